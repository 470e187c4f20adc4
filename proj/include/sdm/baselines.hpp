#pragma once

#include <cmath>
#include <numeric>

#include "sdm/activation.hpp"
#include "sdm/core.hpp"

namespace sdm {

struct TemperatureFit {
  double tau = 1.0;
  bool at_bound = false;  // search ended pinned to a bound of log-tau
};

namespace detail {
inline double temperature_nll(const std::vector<Vec>& logits,
                              const std::vector<std::size_t>& labels, double tau) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const Vec probs = softmax(logits[i], tau);
    total += -std::log(std::max(probs[labels[i]], 1e-300));
  }
  return total / static_cast<double>(logits.size());
}
}  // namespace detail

// Fits the inverse temperature by golden-section search on log(tau) over
// [-4, 4], minimizing the calibration NLL. Deterministic; a result within
// numerical reach of either bound is flagged (degenerate calibration data
// pushes tau to a bound).
inline TemperatureFit fit_temperature(const std::vector<Vec>& logits,
                                      const std::vector<std::size_t>& labels) {
  if (logits.empty() || logits.size() != labels.size()) {
    throw Error("fit_temperature: empty or misaligned calibration data");
  }
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = -4.0, hi = 4.0;
  double x1 = hi - inv_phi * (hi - lo);
  double x2 = lo + inv_phi * (hi - lo);
  double f1 = detail::temperature_nll(logits, labels, std::exp(x1));
  double f2 = detail::temperature_nll(logits, labels, std::exp(x2));
  for (int iter = 0; iter < 100; ++iter) {
    if (f1 < f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - inv_phi * (hi - lo);
      f1 = detail::temperature_nll(logits, labels, std::exp(x1));
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + inv_phi * (hi - lo);
      f2 = detail::temperature_nll(logits, labels, std::exp(x2));
    }
  }
  TemperatureFit fit;
  const double log_tau = 0.5 * (lo + hi);
  fit.tau = std::exp(log_tau);
  fit.at_bound = log_tau < -3.99 || log_tau > 3.99;
  return fit;
}

struct ThresholdVerdict {
  std::size_t prediction = 0;
  double confidence = 0.0;
  bool admitted = false;
};

// The no-calibration baseline: admit when the max probability reaches
// alpha' (>= semantics).
inline ThresholdVerdict baseline_threshold_predict(const Vec& probabilities,
                                                   double alpha_prime) {
  if (probabilities.empty()) throw Error("baseline_threshold_predict: empty input");
  ThresholdVerdict v;
  v.prediction = argmax_index(probabilities);
  v.confidence = probabilities[v.prediction];
  v.admitted = v.confidence >= alpha_prime;
  return v;
}

enum class ConformalVariant { kAps, kRaps };

struct ConformalConfig {
  double alpha = 0.05;
  double raps_lambda = 0.01;
  std::size_t raps_k_reg = 1;
  // Retained for the randomized variant; only the deterministic form is
  // implemented, so enabling it is rejected rather than silently ignored.
  bool randomized = false;
};

// Conformity score of one probability vector at a given class: cumulative
// sorted-descending mass through that class, plus the RAPS rank penalty
// when applicable (deterministic, non-randomized variant).
inline double conformal_score(const Vec& probabilities, std::size_t target,
                              ConformalVariant variant, const ConformalConfig& config) {
  std::vector<std::size_t> order(probabilities.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&probabilities](std::size_t a, std::size_t b) {
    return probabilities[a] > probabilities[b];
  });
  double mass = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    mass += probabilities[order[rank]];
    if (order[rank] == target) {
      if (variant == ConformalVariant::kRaps) {
        const double over = static_cast<double>(rank + 1) -
                            static_cast<double>(config.raps_k_reg);
        mass += config.raps_lambda * std::max(0.0, over);
      }
      return mass;
    }
  }
  throw Error("conformal_score: target class out of range");
}

struct ConformalCalibration {
  double threshold = 0.0;
  bool full_set_fallback = false;  // quantile index exceeded the sample size
};

// The finite-sample threshold: the ceil((n+1)(1-alpha))-th smallest
// calibration conformity score.
inline ConformalCalibration conformal_calibrate(const std::vector<Vec>& probabilities,
                                                const std::vector<std::size_t>& labels,
                                                ConformalVariant variant,
                                                const ConformalConfig& config) {
  if (probabilities.empty() || probabilities.size() != labels.size()) {
    throw Error("conformal_calibrate: empty or misaligned calibration data");
  }
  if (config.randomized) throw Error("conformal_calibrate: randomized variant not implemented");
  const std::size_t n = probabilities.size();
  Vec scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = conformal_score(probabilities[i], labels[i], variant, config);
  }
  std::sort(scores.begin(), scores.end());
  const auto k = static_cast<std::size_t>(
      std::ceil((static_cast<double>(n) + 1.0) * (1.0 - config.alpha)));
  ConformalCalibration cal;
  if (k > n) {
    cal.threshold = std::numeric_limits<double>::infinity();
    cal.full_set_fallback = true;
  } else {
    cal.threshold = scores[k - 1];
  }
  return cal;
}

// Classes are taken in descending probability order while the running score
// stays within the threshold; the class whose score first exceeds it is
// excluded. Admission for the selective-classification comparison is a set
// of size exactly 1.
inline std::vector<std::size_t> conformal_predict_set(const Vec& probabilities,
                                                      const ConformalCalibration& calibration,
                                                      ConformalVariant variant,
                                                      const ConformalConfig& config) {
  std::vector<std::size_t> order(probabilities.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&probabilities](std::size_t a, std::size_t b) {
    return probabilities[a] > probabilities[b];
  });
  std::vector<std::size_t> set;
  double mass = 0.0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    mass += probabilities[order[rank]];
    double score = mass;
    if (variant == ConformalVariant::kRaps) {
      const double over =
          static_cast<double>(rank + 1) - static_cast<double>(config.raps_k_reg);
      score += config.raps_lambda * std::max(0.0, over);
    }
    if (score > calibration.threshold) break;
    set.push_back(order[rank]);
  }
  std::sort(set.begin(), set.end());
  return set;
}

}  // namespace sdm
