#pragma once

#include <numeric>
#include <optional>
#include <string>

#include "sdm/core.hpp"
#include "sdm/stats.hpp"

namespace sdm {

// Exact L2 support index over the training split's adaptor representations.
// Rows align across representations, predictions, true labels, and ids.
struct SupportIndex {
  Matrix h_prime;                    // N x M
  std::vector<std::size_t> predicted;  // N
  std::vector<std::size_t> label;      // N
  std::vector<std::string> ids;        // N

  std::size_t size() const { return h_prime.rows; }

  void validate() const {
    if (predicted.size() != size() || label.size() != size() || ids.size() != size()) {
      throw Error("SupportIndex: row arrays misaligned");
    }
    if (!all_finite(h_prime)) throw Error("SupportIndex: non-finite representation");
  }
};

struct QDResult {
  std::size_t q = 0;   // consecutive correctly-predicted matches of the query's class
  double d_nearest = 0.0;  // L2 distance to the nearest row, match or not
  double d = 0.0;          // most conservative distance quantile, in [0,1]
  bool ood = false;        // set when every distance eCDF was empty
  std::vector<std::string> nearest_ids;  // top-k nearest rows, for audit
};

// q (the consecutive-match count) and the nearest-row distance for one
// query. Rows are ranked by ascending L2 distance with ties broken by
// ascending row position; exclude_id drops the self-match during training.
inline QDResult compute_q_and_dx(const SupportIndex& index, const Vec& h_prime,
                                 std::size_t predicted,
                                 const std::optional<std::string>& exclude_id = std::nullopt,
                                 std::size_t top_k = 3) {
  const std::size_t n = index.size();
  if (h_prime.size() != index.h_prime.cols) throw Error("compute_q_and_dx: dimension mismatch");

  std::vector<std::pair<double, std::size_t>> order;
  order.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (exclude_id && index.ids[i] == *exclude_id) continue;
    order.emplace_back(squared_l2(index.h_prime.row(i), h_prime.data(), h_prime.size()), i);
  }
  if (order.empty()) throw Error("compute_q_and_dx: empty index after exclusion");
  std::sort(order.begin(), order.end());  // pair sort: distance, then row position

  QDResult out;
  out.d_nearest = std::sqrt(order.front().first);
  for (const auto& [dist2, row] : order) {
    const bool match = index.predicted[row] == predicted && index.predicted[row] == index.label[row];
    if (!match) break;
    ++out.q;
  }
  const std::size_t k = std::min(top_k, order.size());
  out.nearest_ids.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.nearest_ids.push_back(index.ids[order[i].second]);
  return out;
}

// Class-conditional eCDFs of nearest-match distances, built from points
// with q > 0 only. Calibration-side tables serve test and calibration
// queries; the analogous train-side tables serve train-time queries.
using DistanceCdfs = std::vector<EmpiricalCdf>;

inline DistanceCdfs build_distance_cdfs(const std::vector<double>& d_nearest,
                                        const std::vector<std::size_t>& q,
                                        const std::vector<std::size_t>& label,
                                        std::size_t class_count) {
  if (d_nearest.size() != q.size() || d_nearest.size() != label.size()) {
    throw Error("build_distance_cdfs: arrays misaligned");
  }
  std::vector<Vec> per_class(class_count);
  for (std::size_t i = 0; i < d_nearest.size(); ++i) {
    if (q[i] == 0) continue;  // q = 0 points are effectively OOD
    if (label[i] >= class_count) throw Error("build_distance_cdfs: label out of range");
    per_class[label[i]].push_back(d_nearest[i]);
  }
  DistanceCdfs cdfs;
  cdfs.reserve(class_count);
  for (auto& values : per_class) cdfs.emplace_back(std::move(values), false);
  return cdfs;
}

// The Distance signal d: the minimum over classes of the reverse quantile
// of d_nearest. A distance beyond every stored value gives d = 0; an empty
// class table gives 0 for that class by the eCDF convention.
inline double distance_quantile_d(const DistanceCdfs& cdfs, double d_nearest,
                                  bool* all_empty = nullptr) {
  if (cdfs.empty()) throw Error("distance_quantile_d: no class tables");
  bool empty = true;
  double d = 1.0;
  for (const auto& cdf : cdfs) {
    if (!cdf.empty()) empty = false;
    d = std::min(d, ecdf_quantile(cdf, d_nearest, /*reverse=*/true));
  }
  if (all_empty) *all_empty = empty;
  return empty ? 0.0 : d;
}

}  // namespace sdm
