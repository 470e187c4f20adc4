#pragma once

#include <algorithm>
#include <cmath>

#include "sdm/core.hpp"

namespace sdm {

// Empirical CDF over a fixed sample. Values are kept sorted ascending.
// `saturating` marks samples known to lie in [0,1] (activation outputs),
// which enables the high-end saturation guard below.
struct EmpiricalCdf {
  Vec values;  // sorted ascending; may be empty
  bool saturating = false;

  EmpiricalCdf() = default;
  explicit EmpiricalCdf(Vec sample, bool saturating_flag = false)
      : values(std::move(sample)), saturating(saturating_flag) {
    std::sort(values.begin(), values.end());
  }

  std::size_t size() const { return values.size(); }
  bool empty() const { return values.empty(); }
};

// Quantile with left-insertion semantics: index = count of stored values
// strictly less than `val`. Forward returns index/n, reverse (used for
// distances) returns 1 - index/n. Empty CDFs return 0 in either mode.
// Saturating CDFs return exactly 1 at or above the stored maximum
// (forward mode only).
inline double ecdf_quantile(const EmpiricalCdf& cdf, double val, bool reverse = false) {
  if (cdf.empty()) return 0.0;
  if (cdf.saturating && !reverse && val >= cdf.values.back()) return 1.0;
  const auto it = std::lower_bound(cdf.values.begin(), cdf.values.end(), val);
  const double index = static_cast<double>(std::distance(cdf.values.begin(), it));
  const double n = static_cast<double>(cdf.values.size());
  return reverse ? 1.0 - index / n : index / n;
}

// Left-continuous inverse of the eCDF above: the smallest stored value
// whose forward quantile is >= p. A constant sample has forward quantile 0
// everywhere, so the max stored value is the fallback.
inline double ecdf_inverse(const EmpiricalCdf& cdf, double p) {
  if (cdf.empty()) throw Error("ecdf_inverse: empty CDF");
  const double n = static_cast<double>(cdf.values.size());
  for (std::size_t k = 0; k < cdf.values.size(); ++k) {
    const auto it = std::lower_bound(cdf.values.begin(), cdf.values.end(), cdf.values[k]);
    const double index = static_cast<double>(std::distance(cdf.values.begin(), it));
    if (index / n >= p) return cdf.values[k];
  }
  return cdf.values.back();
}

// Median with mean-of-middle-two for even lengths.
inline double median(Vec sample) {
  if (sample.empty()) throw Error("median: empty sample");
  std::sort(sample.begin(), sample.end());
  const std::size_t n = sample.size();
  if (n % 2 == 1) return sample[n / 2];
  return 0.5 * (sample[n / 2 - 1] + sample[n / 2]);
}

struct RobustScale {
  double location = 0.0;  // median
  double mad = 0.0;       // median absolute deviation around the median
};

inline RobustScale robust_scale(const Vec& sample) {
  if (sample.empty()) throw Error("robust_scale: empty sample");
  RobustScale out;
  out.location = median(sample);
  Vec dev(sample.size());
  for (std::size_t i = 0; i < sample.size(); ++i) {
    dev[i] = std::fabs(sample[i] - out.location);
  }
  out.mad = median(std::move(dev));
  return out;
}

// Analytic Cauchy quantile function, location + scale * tan(pi*(alpha - 1/2)).
inline double cauchy_inverse_cdf(double location, double scale, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw Error("cauchy_inverse_cdf: alpha must be strictly inside (0,1)");
  }
  if (scale < 0.0) throw Error("cauchy_inverse_cdf: negative scale");
  constexpr double pi = 3.14159265358979323846;
  return location + scale * std::tan(pi * (alpha - 0.5));
}

// One-sided eCDF band half-width from the DKW inequality with the sharp
// constant. n may be a fractional effective sample size; n = 0 maps to 1,
// and the result is capped at 1 (the band is vacuous beyond that).
inline double dkw_epsilon(double n, double alpha_prime) {
  if (n <= 0.0) return 1.0;
  const double eps = std::sqrt(std::log(2.0 / (1.0 - alpha_prime)) / (2.0 * n));
  return std::min(1.0, eps);
}

}  // namespace sdm
