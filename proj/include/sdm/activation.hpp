#pragma once

#include <cmath>

#include "sdm/core.hpp"

namespace sdm {

// Inputs to the sdm activation for one instance: unnormalized output
// magnitudes z', the similarity count q (real-valued; the first training
// epoch uses q = e-2), and the distance quantile d in [0,1].
struct SdmInputs {
  Vec z_prime;
  double q = 0.0;
  double d = 1.0;
};

// Softmax with inverse temperature tau, max-subtracted for stability.
// tau = 0 yields the uniform distribution.
inline Vec softmax(const Vec& z, double tau = 1.0) {
  if (z.empty()) throw Error("softmax: empty input");
  if (tau < 0.0) throw Error("softmax: tau must be >= 0");
  Vec out(z.size());
  const double zmax = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(tau * (z[i] - zmax));
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

// The sdm activation: (2+q)^(d * z'_i), normalized over classes.
//
// The probability form returns the normalized distribution. The log form
// returns log base (2+q) of the stabilized normalized value, with kEps
// guards inside both logs; this is the quantity consumed by the losses.
// Setting q = e-2, d = 1 recovers the standard softmax with tau = 1.
inline Vec sdm_activation(const SdmInputs& in, bool log_form = false) {
  const std::size_t c = in.z_prime.size();
  if (c == 0) throw Error("sdm_activation: empty input");
  if (!(in.q >= 0.0)) throw Error("sdm_activation: q must be >= 0");
  if (!(in.d >= 0.0 && in.d <= 1.0)) throw Error("sdm_activation: d must be in [0,1]");
  const double base = 2.0 + in.q;
  const double log_base = std::log(base);
  const double zmax = *std::max_element(in.z_prime.begin(), in.z_prime.end());
  Vec rescaled(c);
  double sum = 0.0;
  for (std::size_t i = 0; i < c; ++i) {
    rescaled[i] = std::exp(in.d * (in.z_prime[i] - zmax) * log_base);
    sum += rescaled[i];
  }
  if (log_form) {
    const double log_sum = std::log(sum + kEps);
    for (std::size_t i = 0; i < c; ++i) {
      rescaled[i] = (std::log(rescaled[i] + kEps) - log_sum) / log_base;
    }
    return rescaled;
  }
  for (double& v : rescaled) v /= sum;
  return rescaled;
}

// Negative selected entry of a log-form activation; callers take the
// batch mean.
inline double sdm_nll(const Vec& log_form_output, std::size_t true_label) {
  if (true_label >= log_form_output.size()) throw Error("sdm_nll: label out of range");
  return -log_form_output[true_label];
}

}  // namespace sdm
