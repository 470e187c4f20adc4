#pragma once

#include <cmath>
#include <map>
#include <optional>

#include "sdm/core.hpp"
#include "sdm/stats.hpp"

namespace sdm {

// One calibration point's cached transform outputs from one training
// iteration. soft_qbin is the post-convention value (0 when the rescaled
// argmax disagreed with the prediction).
struct CalibrationPointRecord {
  std::size_t label = 0;
  std::size_t predicted = 0;
  double soft_qbin = 0.0;
  double o_true = 0.0;      // rescaled output at the true class
  double p_centroid = 0.0;  // rescaled output at the predicted class
};

// Per-iteration summary retained for the robust offsets and for re-tuning
// at a different alpha'.
struct IterationStats {
  std::optional<double> min_valid_qbin;
  double metric = 0.0;  // balanced median q of the iteration, for audit
  std::vector<CalibrationPointRecord> records;
};

struct MinValidQBinResult {
  std::optional<double> min_valid_qbin;
  std::optional<Vec> psi;  // per-class thresholds, set when a bin was found
};

// The region scan: walk the sorted admissible soft-q-bin values,
// build per-true-class eCDFs of the rescaled true-class output restricted
// to soft_qbin >= candidate, and return the first candidate whose
// (1-alpha') quantiles are all >= alpha'. Points with hard bin 0 are
// excluded as out-of-distribution. Absence is a valid outcome.
inline MinValidQBinResult find_min_valid_qbin(const std::vector<CalibrationPointRecord>& records,
                                              std::size_t class_count, double alpha_prime) {
  MinValidQBinResult out;
  std::vector<const CalibrationPointRecord*> admissible;
  for (const auto& rec : records) {
    if (static_cast<long>(std::floor(rec.soft_qbin)) > 0) admissible.push_back(&rec);
  }
  if (admissible.empty()) return out;
  Vec candidates;
  candidates.reserve(admissible.size());
  for (const auto* rec : admissible) candidates.push_back(rec->soft_qbin);
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  for (const double candidate : candidates) {
    std::vector<Vec> per_class(class_count);
    for (const auto* rec : admissible) {
      if (rec->soft_qbin >= candidate) per_class[rec->label].push_back(rec->o_true);
    }
    Vec psi(class_count, 0.0);
    bool all_pass = true;
    for (std::size_t c = 0; c < class_count; ++c) {
      if (per_class[c].empty()) {
        all_pass = false;
        break;
      }
      psi[c] = ecdf_inverse(EmpiricalCdf(std::move(per_class[c])), 1.0 - alpha_prime);
      if (psi[c] < alpha_prime) {
        all_pass = false;
        break;
      }
    }
    if (all_pass) {
      out.min_valid_qbin = candidate;
      out.psi = std::move(psi);
      return out;
    }
  }
  return out;
}

// The robust region gate and per-(prediction, bin) offsets. e_offset holds
// the Cauchy right-tail quantile (location 0) of the across-iteration MADs
// of the per-cell p_centroid medians.
struct RegionThresholds {
  std::optional<double> min_valid_qbin_star;
  std::optional<Vec> psi;
  double c_hat = 0.0;  // robust min valid q-bin; meaningful only when admitting()
  std::map<std::size_t, std::map<long, double>> e_offset;  // prediction -> bin -> offset
  std::vector<std::optional<double>> iteration_min_valid_qbins;
  std::size_t excluded_iterations = 0;  // iterations with no min_valid_qbin

  bool admitting() const { return min_valid_qbin_star.has_value() && psi.has_value(); }

  // Offset lookup with bin clamping: exact bin when present, otherwise the
  // nearest observed bin below (above, when the request undershoots).
  double offset_for(std::size_t predicted, long bin) const {
    const auto cls = e_offset.find(predicted);
    if (cls == e_offset.end() || cls->second.empty()) return 0.0;
    const auto& bins = cls->second;
    auto it = bins.upper_bound(bin);
    if (it == bins.begin()) return it->second;  // below the smallest observed bin
    return std::prev(it)->second;
  }
};

// Combines the J iterations into the final thresholds. The gate c_hat is
// the Cauchy quantile at alpha' located at the winning iteration's
// min_valid_qbin with the MAD of the per-iteration estimates as scale.
// With a single iteration the conventions are c_hat = min_valid_qbin* and
// zero offsets. Iterations lacking a min_valid_qbin are excluded from the
// MAD sample; if the winning iteration lacks one, the result is marked
// non-admitting.
inline RegionThresholds robust_thresholds_and_offsets(const std::vector<IterationStats>& stats,
                                                      std::size_t winner, std::size_t class_count,
                                                      double alpha_prime) {
  if (stats.empty()) throw Error("robust_thresholds_and_offsets: no iterations");
  if (winner >= stats.size()) throw Error("robust_thresholds_and_offsets: bad winner index");
  RegionThresholds out;
  for (const auto& it : stats) {
    out.iteration_min_valid_qbins.push_back(it.min_valid_qbin);
    if (!it.min_valid_qbin) ++out.excluded_iterations;
  }

  const auto winning = find_min_valid_qbin(stats[winner].records, class_count, alpha_prime);
  out.min_valid_qbin_star = winning.min_valid_qbin;
  out.psi = winning.psi;
  if (!out.admitting()) return out;

  Vec qbin_samples;
  for (const auto& it : stats) {
    if (it.min_valid_qbin) qbin_samples.push_back(*it.min_valid_qbin);
  }
  if (stats.size() == 1 || qbin_samples.size() <= 1) {
    out.c_hat = *out.min_valid_qbin_star;
  } else {
    const double mad = robust_scale(qbin_samples).mad;
    out.c_hat = cauchy_inverse_cdf(*out.min_valid_qbin_star, mad, alpha_prime);
  }

  // Union of (prediction, bin) cells attested in any iteration: each
  // iteration contributes one per-cell median of p_centroid.
  std::map<std::size_t, std::map<long, Vec>> cell_medians;
  for (const auto& it : stats) {
    std::map<std::size_t, std::map<long, Vec>> cell_values;
    for (const auto& rec : it.records) {
      const long bin = static_cast<long>(std::floor(rec.soft_qbin));
      cell_values[rec.predicted][bin].push_back(rec.p_centroid);
    }
    for (auto& [pred, bins] : cell_values) {
      for (auto& [bin, values] : bins) {
        cell_medians[pred][bin].push_back(median(std::move(values)));
      }
    }
  }
  for (const auto& [pred, bins] : cell_medians) {
    for (const auto& [bin, medians] : bins) {
      if (stats.size() == 1 || medians.size() <= 1) {
        out.e_offset[pred][bin] = 0.0;
      } else {
        const double mad = robust_scale(medians).mad;
        out.e_offset[pred][bin] = cauchy_inverse_cdf(0.0, mad, alpha_prime);
      }
    }
  }
  return out;
}

}  // namespace sdm
