#pragma once

#include <optional>
#include <string>

#include "sdm/activation.hpp"
#include "sdm/calibration.hpp"
#include "sdm/core.hpp"
#include "sdm/dataset.hpp"
#include "sdm/numerics.hpp"
#include "sdm/region.hpp"
#include "sdm/similarity.hpp"

namespace sdm {

inline constexpr std::uint32_t kArchiveFormatVersion = 1;

// The adaptor with everything needed to reproduce its representation space:
// weights, input normalization, the frozen split membership it was selected
// with, and the per-train-instance (q, d) cache from the final refresh.
struct AdaptorModel {
  AdaptorWeights weights;
  Vec input_mean;
  Vec input_std;
  std::vector<std::string> train_ids;
  std::vector<std::string> calibration_ids;
  Vec train_q;  // aligned with train_ids
  Vec train_d;
  double selection_metric = 0.0;
};

// Snapshot of the configuration an archive was built with.
struct ArchiveConfig {
  std::size_t class_count = 0;
  std::size_t dimension = 0;
  std::size_t filters = 0;
  std::size_t kernel_span = 0;
  bool conv_nonlinearity = false;
  std::size_t iterations = 0;  // J
  std::size_t max_epochs = 0;
  std::size_t batch_size = 50;
  double adaptor_lr = 1e-5;
  double rescaler_lr = 1e-4;
  std::size_t rescaler_max_epochs = 1000;
  std::size_t rescaler_stop_after = 10;
  std::size_t balance_tolerance = 0;
  std::uint64_t seed = 0;
};

// The complete immutable estimator artifact. Everything test-time inference
// needs, plus the cached logits and per-iteration statistics that the
// baseline comparisons and re-tuning consume.
struct EstimatorArchive {
  std::uint32_t format_version = kArchiveFormatVersion;
  double alpha_prime = 0.95;
  ArchiveConfig config;
  AdaptorModel adaptor;
  SupportIndex support;
  CalibrationTables tables;
  RegionThresholds thresholds;
  std::vector<IterationStats> iteration_stats;
  std::size_t winning_iteration = 0;
  // Winning calibration split, cached for the baseline estimators.
  std::vector<std::string> calibration_ids;
  std::vector<std::size_t> calibration_labels;
  Matrix calibration_logits;  // N_ca x C
  std::string dataset_fingerprint;

  void validate() const {
    adaptor.weights.validate();
    support.validate();
    tables.validate();
    if (tables.class_count() != config.class_count) {
      throw Error("EstimatorArchive: table class count mismatch");
    }
  }
};

enum class RejectReason {
  kNone = 0,
  kAdmitted,
  kArchiveNotAdmitting,  // no min-valid-q-bin was found at build time
  kOodTransform,         // an argmax-mismatch convention fired
  kBelowRegionGate,      // soft_qbin_lower below the robust gate
  kBelowClassThreshold,  // adjusted p_lower below psi for the prediction
};

struct Verdict {
  std::string id;
  std::size_t prediction = 0;
  bool admitted = false;
  std::optional<double> p_lower_adjusted;
  RejectReason reason = RejectReason::kNone;
  std::size_t q = 0;
  double d_nearest = 0.0;
  double d = 0.0;
  double soft_qbin = 0.0;
  long hard_qbin = 0;
  double soft_qbin_lower = 0.0;
  std::vector<std::string> exemplar_ids;
  PointUncertainty detail;
};

// Runs the full test-time chain for one embedding: adaptor forward, q and
// nearest distance against the winning train split, the distance quantile,
// the sdm activation, and the calibration transforms; then applies the
// admission rule over the robust gate and per-class thresholds.
inline Verdict predict(const EstimatorArchive& archive, const Vec& embedding,
                       const std::string& id = {}, std::size_t exemplar_top_k = 3) {
  Verdict verdict;
  verdict.id = id;

  const AdaptorOutput fwd = adaptor_forward(archive.adaptor.weights, embedding,
                                            archive.adaptor.input_mean, archive.adaptor.input_std);
  verdict.prediction = argmax_index(fwd.z_prime);

  const QDResult qd = compute_q_and_dx(archive.support, fwd.h_prime, verdict.prediction,
                                       std::nullopt, exemplar_top_k);
  verdict.q = qd.q;
  verdict.d_nearest = qd.d_nearest;
  verdict.exemplar_ids = qd.nearest_ids;
  verdict.d = distance_quantile_d(archive.tables.distance, qd.d_nearest);

  const double q_real = static_cast<double>(qd.q);
  const Vec sdm_out = sdm_activation({fwd.z_prime, q_real, verdict.d});

  PointUncertainty& pt = verdict.detail;
  pt.v = compute_quantile_vector(archive.tables, sdm_out);
  const SoftQBin sq = compute_softqbin(q_real, pt.v, verdict.prediction);

  const RescaleResult centroid =
      rescale_outputs(archive.tables, pt.v, sq.soft, verdict.prediction);
  pt.ood_centroid = centroid.ood;
  pt.o = centroid.output;
  pt.p_centroid = centroid.selected;
  pt.soft_qbin = centroid.ood ? 0.0 : sq.soft;
  pt.hard_qbin = static_cast<long>(std::floor(pt.soft_qbin));
  verdict.soft_qbin = pt.soft_qbin;
  verdict.hard_qbin = pt.hard_qbin;

  const DkwBounds bounds = dkw_adjusted_bounds(archive.tables, sdm_out, q_real, pt.soft_qbin,
                                               verdict.prediction, archive.alpha_prime);
  pt.n_hat = bounds.n_hat;
  pt.epsilon = bounds.epsilon;
  pt.v_lower = bounds.v_lower;
  pt.v_upper = bounds.v_upper;

  const RescaleResult lower =
      rescale_outputs(archive.tables, bounds.v_lower, bounds.soft_qbin_lower, verdict.prediction);
  pt.ood_lower = lower.ood;
  pt.p_lower = lower.selected;
  pt.soft_qbin_lower = lower.ood ? 0.0 : bounds.soft_qbin_lower;
  verdict.soft_qbin_lower = pt.soft_qbin_lower;

  const RescaleResult upper =
      rescale_outputs(archive.tables, bounds.v_upper, bounds.soft_qbin_upper, verdict.prediction);
  pt.ood_upper = upper.ood;
  pt.p_upper = upper.selected;
  pt.soft_qbin_upper = upper.ood ? 0.0 : bounds.soft_qbin_upper;

  if (!archive.thresholds.admitting()) {
    verdict.reason = RejectReason::kArchiveNotAdmitting;
    return verdict;
  }
  if (pt.ood_centroid || pt.ood_lower || pt.ood_upper) {
    verdict.reason = RejectReason::kOodTransform;
    return verdict;
  }
  if (!(pt.soft_qbin_lower >= archive.thresholds.c_hat)) {
    verdict.reason = RejectReason::kBelowRegionGate;
    return verdict;
  }
  const long lower_bin = static_cast<long>(std::floor(pt.soft_qbin_lower));
  const double offset = archive.thresholds.offset_for(verdict.prediction, lower_bin);
  const double adjusted = std::max(0.0, pt.p_lower - offset);
  const double psi = (*archive.thresholds.psi)[verdict.prediction];
  if (!(pt.p_lower - offset >= psi)) {
    verdict.reason = RejectReason::kBelowClassThreshold;
    return verdict;
  }
  verdict.admitted = true;
  verdict.reason = RejectReason::kAdmitted;
  verdict.p_lower_adjusted = adjusted;
  return verdict;
}

// Order-preserving batch prediction; per-point work is independent, so the
// parallel path is deterministic.
inline std::vector<Verdict> predict_batch(const EstimatorArchive& archive,
                                          const std::vector<LabeledInstance>& instances) {
  std::vector<Verdict> verdicts(instances.size());
  parallel_for(instances.size(), [&](std::size_t i) {
    verdicts[i] = predict(archive, instances[i].embedding, instances[i].id);
  });
  return verdicts;
}

}  // namespace sdm
