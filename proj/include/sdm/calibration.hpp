#pragma once

#include <cmath>

#include "sdm/core.hpp"
#include "sdm/numerics.hpp"
#include "sdm/similarity.hpp"
#include "sdm/stats.hpp"

namespace sdm {

// Everything needed at test time after the sdm activation: class-conditional
// calibration-set eCDFs (stratified by true label), per-class counts, and
// the trained rescaler weights.
struct CalibrationTables {
  DistanceCdfs distance;                // d_nearest, q > 0 points only
  std::vector<EmpiricalCdf> sdm_output;  // saturating, activation outputs
  std::vector<EmpiricalCdf> soft_qbin;   // soft q-bin values
  std::vector<double> calibration_counts;  // |D_ca| per true class
  Matrix rescaler;                       // W'' (C x C), no bias

  std::size_t class_count() const { return calibration_counts.size(); }

  void validate() const {
    const std::size_t c = class_count();
    if (distance.size() != c || sdm_output.size() != c || soft_qbin.size() != c) {
      throw Error("CalibrationTables: per-class table count mismatch");
    }
    if (rescaler.rows != c || rescaler.cols != c) {
      throw Error("CalibrationTables: rescaler shape mismatch");
    }
  }
};

// All per-point quantities produced by the post-activation transform chain.
struct PointUncertainty {
  Vec v;        // class-conditional quantiles of the activation output
  Vec v_lower;
  Vec v_upper;
  double soft_qbin = 0.0;
  long hard_qbin = 0;
  double soft_qbin_lower = 0.0;
  double soft_qbin_upper = 0.0;
  Vec o;        // rescaled, renormalized output
  Vec n_hat;    // per-class effective sample sizes
  Vec epsilon;  // per-class DKW band half-widths
  double p_lower = 0.0;
  double p_centroid = 0.0;
  double p_upper = 0.0;
  bool ood_centroid = false;
  bool ood_lower = false;
  bool ood_upper = false;
};

// v_c = saturating eCDF for class c evaluated at the activation output's
// c-th entry. Empty class tables yield 0.
inline Vec compute_quantile_vector(const CalibrationTables& tables, const Vec& sdm_output) {
  if (sdm_output.size() != tables.class_count()) {
    throw Error("compute_quantile_vector: class count mismatch");
  }
  Vec v(sdm_output.size());
  for (std::size_t c = 0; c < sdm_output.size(); ++c) {
    v[c] = ecdf_quantile(tables.sdm_output[c], sdm_output[c]);
  }
  return v;
}

struct SoftQBin {
  double soft = 0.0;
  long hard = 0;
};

// The stable mapping to calibration statistics: q~ = v_yhat * ln(2+q).
inline SoftQBin compute_softqbin(double q, const Vec& v, std::size_t predicted) {
  if (predicted >= v.size()) throw Error("compute_softqbin: prediction out of range");
  SoftQBin out;
  out.soft = v[predicted] * std::log(2.0 + q);
  out.hard = static_cast<long>(std::floor(out.soft));
  return out;
}

struct RescaleResult {
  Vec output;              // normalized over classes
  double selected = 0.0;   // output at the original prediction
  bool ood = false;        // argmax of the output disagrees with the prediction
};

// v' = W''^T v, normalized with base (2 + q~) after max subtraction in the
// exponent. When the argmax no longer matches the original prediction the
// point is flagged; the caller records the corresponding q~ variant as 0
// without recomputation.
inline RescaleResult rescale_outputs(const CalibrationTables& tables, const Vec& v,
                                     double soft_qbin, std::size_t predicted) {
  const std::size_t c = tables.class_count();
  if (v.size() != c) throw Error("rescale_outputs: class count mismatch");
  if (predicted >= c) throw Error("rescale_outputs: prediction out of range");
  Vec v_prime(c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) v_prime[j] += tables.rescaler(i, j) * v[i];
  }
  const double base = 2.0 + soft_qbin;
  const double log_base = std::log(base);
  const double vmax = *std::max_element(v_prime.begin(), v_prime.end());
  RescaleResult out;
  out.output.assign(c, 0.0);
  double sum = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    out.output[i] = std::exp((v_prime[i] - vmax) * log_base);
    sum += out.output[i];
  }
  for (double& x : out.output) x /= sum;
  out.selected = out.output[predicted];
  out.ood = argmax_index(out.output) != predicted;
  return out;
}

struct DkwBounds {
  Vec n_hat;
  Vec epsilon;
  Vec v_lower;
  Vec v_upper;
  double soft_qbin_lower = 0.0;
  double soft_qbin_upper = 0.0;
};

// Effective sample sizes from the soft-q-bin eCDFs, the per-class DKW band,
// and the lower/upper counterparts of the quantile vector: the band is
// subtracted on the predicted coordinate and added elsewhere for the lower
// vector (mirrored for upper), clamped to [0,1]. The bound q-bins use the
// raw similarity count q as the base.
inline DkwBounds dkw_adjusted_bounds(const CalibrationTables& tables, const Vec& sdm_output,
                                     double q, double soft_qbin, std::size_t predicted,
                                     double alpha_prime) {
  const std::size_t c = tables.class_count();
  if (predicted >= c) throw Error("dkw_adjusted_bounds: prediction out of range");
  const Vec v = compute_quantile_vector(tables, sdm_output);
  DkwBounds out;
  out.n_hat.resize(c);
  out.epsilon.resize(c);
  out.v_lower.resize(c);
  out.v_upper.resize(c);
  for (std::size_t i = 0; i < c; ++i) {
    out.n_hat[i] = tables.calibration_counts[i] * ecdf_quantile(tables.soft_qbin[i], soft_qbin);
    out.epsilon[i] = dkw_epsilon(out.n_hat[i], alpha_prime);
    const double sign = i == predicted ? -1.0 : 1.0;
    out.v_lower[i] = std::clamp(v[i] + sign * out.epsilon[i], 0.0, 1.0);
    out.v_upper[i] = std::clamp(v[i] - sign * out.epsilon[i], 0.0, 1.0);
  }
  const double log_base = std::log(2.0 + q);
  out.soft_qbin_lower = out.v_lower[predicted] * log_base;
  out.soft_qbin_upper = out.v_upper[predicted] * log_base;
  return out;
}

// One cached calibration point for rescaler training: the quantile vector,
// its soft q-bin, and the true label.
struct RescalerExample {
  Vec v;
  double soft_qbin = 0.0;
  std::size_t label = 0;
};

struct RescalerTrainConfig {
  std::size_t max_epochs = 1000;
  std::size_t stop_after_increases = 10;  // consecutive epochs above the min loss
  double lr = 1e-4;
  double init_noise = 0.01;
  std::uint64_t seed = 0;
};

struct RescalerLossGrad {
  double loss = 0.0;
  Matrix grad;  // d loss / d W'' entries
};

// Loss and gradient of the rescaler objective for one example: the
// negative base-(2+q~) log of the true-class rescaled output.
inline RescalerLossGrad rescaler_loss_and_grad(const Matrix& w, const RescalerExample& ex,
                                               bool want_grad = true) {
  const std::size_t c = w.rows;
  if (ex.v.size() != c || ex.label >= c) throw Error("rescaler_loss_and_grad: shape mismatch");
  Vec v_prime(c, 0.0);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) v_prime[j] += w(i, j) * ex.v[i];
  }
  const double log_base = std::log(2.0 + ex.soft_qbin);
  const double vmax = *std::max_element(v_prime.begin(), v_prime.end());
  Vec r(c);
  double sum = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    r[i] = std::exp((v_prime[i] - vmax) * log_base);
    sum += r[i];
  }
  RescalerLossGrad out;
  out.loss = -(std::log(r[ex.label] + kEps) - std::log(sum + kEps)) / log_base;
  if (!want_grad) return out;
  Vec g_vp(c);
  double g_total = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    g_vp[j] = r[j] / (sum + kEps) - (j == ex.label ? r[ex.label] / (r[ex.label] + kEps) : 0.0);
    g_total += g_vp[j];
  }
  // Gradient through the max subtraction (the kEps guards are not exactly
  // shift invariant).
  g_vp[static_cast<std::size_t>(
      std::distance(v_prime.begin(), std::max_element(v_prime.begin(), v_prime.end())))] -=
      g_total;
  out.grad = Matrix(c, c);
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) out.grad(i, j) = ex.v[i] * g_vp[j];
  }
  return out;
}

namespace detail {

// Mean rescaler loss over the cached examples with the current weights.
inline double rescaler_loss(const Matrix& w, const std::vector<RescalerExample>& examples) {
  double total = 0.0;
  for (const auto& ex : examples) {
    total += rescaler_loss_and_grad(w, ex, /*want_grad=*/false).loss;
  }
  return total / static_cast<double>(examples.size());
}

}  // namespace detail

// Trains W'' over the calibration split with batch size 1 in split order.
// Training stops after `stop_after_increases` consecutive epochs whose loss
// exceeds the minimum observed; the minimum-loss weights are returned.
// W'' starts at the identity plus small noise so the initial transform is
// near the unrescaled pipeline.
inline Matrix train_rescaler(const std::vector<RescalerExample>& examples, std::size_t class_count,
                             const RescalerTrainConfig& config = {},
                             std::vector<double>* epoch_losses = nullptr) {
  if (examples.empty()) throw Error("train_rescaler: no cached calibration points");
  Matrix w(class_count, class_count);
  auto rng = make_rng(config.seed, /*stream=*/2);
  std::uniform_real_distribution<double> noise(-config.init_noise, config.init_noise);
  for (std::size_t i = 0; i < class_count; ++i) {
    for (std::size_t j = 0; j < class_count; ++j) {
      w(i, j) = (i == j ? 1.0 : 0.0) + noise(rng);
    }
  }

  Matrix best = w;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t increase_streak = 0;
  OptimizerState opt;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    for (const auto& ex : examples) {
      const RescalerLossGrad step = rescaler_loss_and_grad(w, ex);
      adam_update(opt, {&w.data}, {&step.grad.data}, config.lr);
    }
    const double loss = detail::rescaler_loss(w, examples);
    if (!std::isfinite(loss)) throw Error("train_rescaler: non-finite loss");
    if (epoch_losses) epoch_losses->push_back(loss);
    if (loss < best_loss) {
      best_loss = loss;
      best = w;
    }
    if (loss > best_loss) {
      if (++increase_streak >= config.stop_after_increases) break;
    } else {
      increase_streak = 0;
    }
  }
  return best;
}

}  // namespace sdm
