#pragma once

#include <cmath>
#include <cstdint>

#include "sdm/activation.hpp"
#include "sdm/core.hpp"

namespace sdm {

// Numeric knobs shared by the adaptor and rescaler training loops.
// The defaults mirror the standard configuration: mini-batch 50 at
// lr 1e-5 for the adaptor, batch 1 at lr 1e-4 for the rescaler.
struct NumericsConfig {
  // Stabilization epsilon inside the log-form activations. The compiled
  // default mirrors 32-bit machine epsilon; adjust per platform.
  double stabilization_eps = kEps;
  double adaptor_lr = 1e-5;
  double rescaler_lr = 1e-4;
  std::size_t batch_size = 50;
  // Conv filter length; 0 means full width (one scalar per filter).
  std::size_t kernel_span = 0;
  bool conv_nonlinearity = false;  // optional tanh after the filters

  void validate() const {
    if (!(stabilization_eps > 0.0)) throw Error("NumericsConfig: eps must be positive");
  }
};

// Exemplar-adaptor parameters: M conv filters over the normalized input,
// then a linear layer M -> C.
struct AdaptorWeights {
  Matrix conv;    // M x kernel_span
  Matrix linear;  // M x C
  Vec bias;       // C
  bool conv_nonlinearity = false;

  std::size_t filter_count() const { return conv.rows; }
  std::size_t kernel_span() const { return conv.cols; }
  std::size_t class_count() const { return bias.size(); }

  void validate() const {
    if (conv.rows != linear.rows) throw Error("AdaptorWeights: conv/linear row mismatch");
    if (linear.cols != bias.size()) throw Error("AdaptorWeights: linear/bias mismatch");
    if (!all_finite(conv) || !all_finite(linear) || !all_finite(bias)) {
      throw Error("AdaptorWeights: non-finite parameter");
    }
  }
};

inline AdaptorWeights make_adaptor_weights(std::size_t filters, std::size_t kernel_span,
                                           std::size_t classes, bool nonlinearity = false) {
  AdaptorWeights w;
  w.conv = Matrix(filters, kernel_span);
  w.linear = Matrix(filters, classes);
  w.bias = Vec(classes, 0.0);
  w.conv_nonlinearity = nonlinearity;
  return w;
}

// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline void init_adaptor_weights(AdaptorWeights& w, std::mt19937_64& rng) {
  auto fill = [&rng](std::vector<double>& data, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(1, fan_in)));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : data) v = dist(rng);
  };
  fill(w.conv.data, w.conv.cols);
  fill(w.linear.data, w.linear.rows);
  fill(w.bias, w.linear.rows);
}

inline Vec normalize_input(const Vec& x, const Vec& mean, const Vec& std_dev) {
  if (x.size() != mean.size() || x.size() != std_dev.size()) {
    throw Error("normalize_input: dimension mismatch");
  }
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = std_dev[i] <= kEps ? 1.0 : std_dev[i];
    out[i] = (x[i] - mean[i]) / s;
  }
  return out;
}

struct AdaptorOutput {
  Vec h_prime;  // M
  Vec z_prime;  // C
};

// Forward pass over an already-normalized input. Each filter is applied
// across every valid position and the applications are summed into one
// scalar; with a full-width kernel this is a single dot product.
inline AdaptorOutput adaptor_forward_normalized(const AdaptorWeights& w, const Vec& x_norm) {
  const std::size_t m = w.filter_count();
  const std::size_t k = w.kernel_span();
  const std::size_t c = w.class_count();
  if (x_norm.size() < k) throw Error("adaptor_forward: input shorter than kernel span");
  AdaptorOutput out;
  out.h_prime.assign(m, 0.0);
  const std::size_t positions = x_norm.size() - k + 1;
  for (std::size_t f = 0; f < m; ++f) {
    const double* filt = w.conv.row(f);
    double acc = 0.0;
    for (std::size_t p = 0; p < positions; ++p) {
      acc += dot(filt, x_norm.data() + p, k);
    }
    out.h_prime[f] = w.conv_nonlinearity ? std::tanh(acc) : acc;
  }
  out.z_prime.assign(c, 0.0);
  for (std::size_t f = 0; f < m; ++f) {
    const double h = out.h_prime[f];
    const double* wrow = w.linear.row(f);
    for (std::size_t j = 0; j < c; ++j) out.z_prime[j] += wrow[j] * h;
  }
  for (std::size_t j = 0; j < c; ++j) out.z_prime[j] += w.bias[j];
  return out;
}

inline AdaptorOutput adaptor_forward(const AdaptorWeights& w, const Vec& embedding,
                                     const Vec& mean, const Vec& std_dev) {
  return adaptor_forward_normalized(w, normalize_input(embedding, mean, std_dev));
}

// One training batch for the sdm loss. q and d are per-instance constants
// for the batch; they are refreshed between epochs, not inside it.
struct SdmLossBatch {
  Matrix x_norm;                   // B x D, already normalized
  std::vector<std::size_t> labels;  // B
  Vec q;                            // B
  Vec d;                            // B

  std::size_t size() const { return labels.size(); }
};

struct SdmLossGrads {
  double loss = 0.0;
  Matrix g_conv;
  Matrix g_linear;
  Vec g_bias;
};

// Mean sdm loss over the batch with hand-derived gradients for the conv
// filters, linear weights, and bias. The loss is the log-form activation
// selected at the true class (negated), exactly as evaluated by
// sdm_activation(log_form=true).
inline SdmLossGrads sdm_loss_and_grad(const AdaptorWeights& w, const SdmLossBatch& batch) {
  const std::size_t b = batch.size();
  if (b == 0) throw Error("sdm_loss_and_grad: empty batch");
  if (batch.x_norm.rows != b || batch.q.size() != b || batch.d.size() != b) {
    throw Error("sdm_loss_and_grad: batch arrays misaligned");
  }
  const std::size_t m = w.filter_count();
  const std::size_t k = w.kernel_span();
  const std::size_t c = w.class_count();
  const std::size_t dim = batch.x_norm.cols;
  const std::size_t positions = dim - k + 1;

  SdmLossGrads out;
  out.g_conv = Matrix(m, k);
  out.g_linear = Matrix(m, c);
  out.g_bias = Vec(c, 0.0);

  double total_loss = 0.0;
  const double inv_b = 1.0 / static_cast<double>(b);
  Vec pos_sums(k);  // sum over positions of x_norm[p + j], reused per instance

  for (std::size_t n = 0; n < b; ++n) {
    Vec x_norm(batch.x_norm.row(n), batch.x_norm.row(n) + dim);
    const AdaptorOutput fwd = adaptor_forward_normalized(w, x_norm);
    const std::size_t y = batch.labels[n];
    if (y >= c) throw Error("sdm_loss_and_grad: label out of range");
    const double q = batch.q[n];
    const double d = batch.d[n];
    const double log_base = std::log(2.0 + q);

    const double zmax = *std::max_element(fwd.z_prime.begin(), fwd.z_prime.end());
    Vec r(c);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      r[j] = std::exp(d * (fwd.z_prime[j] - zmax) * log_base);
      sum += r[j];
    }
    total_loss += -(std::log(r[y] + kEps) - std::log(sum + kEps)) / log_base;

    // d/dz of the per-instance loss. The kEps guards break exact shift
    // invariance, so the max subtraction contributes a (small) gradient on
    // the argmax coordinate.
    Vec g_z(c);
    double g_total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      g_z[j] = d * (r[j] / (sum + kEps) - (j == y ? r[y] / (r[y] + kEps) : 0.0));
      g_total += g_z[j];
    }
    const std::size_t arg =
        static_cast<std::size_t>(std::distance(fwd.z_prime.begin(),
                                               std::max_element(fwd.z_prime.begin(),
                                                                fwd.z_prime.end())));
    g_z[arg] -= g_total;
    for (double& g : g_z) g *= inv_b;

    Vec g_h(m, 0.0);
    for (std::size_t f = 0; f < m; ++f) {
      const double* wrow = w.linear.row(f);
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        out.g_linear(f, j) += g_z[j] * fwd.h_prime[f];
        acc += wrow[j] * g_z[j];
      }
      g_h[f] = acc;
      if (w.conv_nonlinearity) g_h[f] *= 1.0 - fwd.h_prime[f] * fwd.h_prime[f];
    }
    for (std::size_t j = 0; j < c; ++j) out.g_bias[j] += g_z[j];

    std::fill(pos_sums.begin(), pos_sums.end(), 0.0);
    for (std::size_t p = 0; p < positions; ++p) {
      for (std::size_t j = 0; j < k; ++j) pos_sums[j] += x_norm[p + j];
    }
    for (std::size_t f = 0; f < m; ++f) {
      double* grow = out.g_conv.row(f);
      for (std::size_t j = 0; j < k; ++j) grow[j] += g_h[f] * pos_sums[j];
    }
  }

  out.loss = total_loss * inv_b;
  if (!std::isfinite(out.loss)) throw Error("sdm_loss_and_grad: non-finite loss");
  return out;
}

// Standard Adam with bias correction. One state slot per parameter tensor;
// the step counter advances once per update call.
struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Vec> first_moment;
  std::vector<Vec> second_moment;
};

inline void adam_update(OptimizerState& state, const std::vector<Vec*>& params,
                        const std::vector<const Vec*>& grads, double lr) {
  if (params.size() != grads.size()) throw Error("adam_update: param/grad count mismatch");
  if (state.first_moment.empty()) {
    state.first_moment.resize(params.size());
    state.second_moment.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first_moment[i].assign(params[i]->size(), 0.0);
      state.second_moment[i].assign(params[i]->size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw Error("adam_update: state/param count mismatch");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Vec& p = *params[i];
    const Vec& g = *grads[i];
    Vec& m = state.first_moment[i];
    Vec& v = state.second_moment[i];
    if (p.size() != g.size() || p.size() != m.size()) {
      throw Error("adam_update: tensor shape mismatch");
    }
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
    }
  }
}

}  // namespace sdm
