#pragma once

#include <fstream>
#include <optional>

#include <json.hpp>

#include "sdm/activation.hpp"
#include "sdm/core.hpp"
#include "sdm/estimator.hpp"
#include "sdm/numerics.hpp"

namespace sdm {

// ---------------------------------------------------------------------------
// A desk-scale autoregressive LM with the negative+positive vocabulary
// bifurcation. The token embedding table and the hidden map are fixed at
// initialization; w_ref and w_neg stay frozen and only w_pos trains.
// ---------------------------------------------------------------------------

struct ToyLmConfig {
  std::size_t vocab_size = 64;  // |V|, including control tokens
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t end_token = 0;    // end-of-unit control token
  std::size_t task_token_offset = 2;  // task k is signalled by token offset + k
  std::size_t task_count = 2;
  std::size_t length_cap = 0;   // 0: derive as 4x the longest train completion
  std::uint64_t seed = 0;
};

struct ToyLM {
  ToyLmConfig config;
  Matrix embedding;   // |V| x embed_dim
  Matrix hidden_map;  // embed_dim x hidden_dim
  Vec hidden_bias;    // hidden_dim
  Matrix w_ref;       // hidden_dim x |V|
  Matrix w_neg;       // hidden_dim x |V|, frozen clone of w_ref
  Matrix w_pos;       // hidden_dim x |V|, the only trainable block

  std::size_t vocab() const { return config.vocab_size; }
};

inline ToyLM make_toy_lm(const ToyLmConfig& config) {
  ToyLM lm;
  lm.config = config;
  auto rng = make_rng(config.seed, /*stream=*/21);
  auto fill = [&rng](Matrix& m, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : m.data) v = dist(rng);
  };
  lm.embedding = Matrix(config.vocab_size, config.embed_dim);
  fill(lm.embedding, 1.0);
  lm.hidden_map = Matrix(config.embed_dim, config.hidden_dim);
  fill(lm.hidden_map, 1.0 / std::sqrt(static_cast<double>(config.embed_dim)));
  lm.hidden_bias.assign(config.hidden_dim, 0.0);
  lm.w_ref = Matrix(config.hidden_dim, config.vocab_size);
  fill(lm.w_ref, 1.0 / std::sqrt(static_cast<double>(config.hidden_dim)));
  lm.w_neg = lm.w_ref;
  lm.w_pos = lm.w_ref;
  return lm;
}

// Hidden state for the prefix tokens[0, prefix_len): tanh of the fixed
// linear map over the mean token embedding.
inline Vec hidden_state(const ToyLM& lm, const std::vector<std::size_t>& tokens,
                        std::size_t prefix_len) {
  if (prefix_len == 0 || prefix_len > tokens.size()) {
    throw Error("hidden_state: bad prefix length");
  }
  Vec mean(lm.config.embed_dim, 0.0);
  for (std::size_t t = 0; t < prefix_len; ++t) {
    if (tokens[t] >= lm.vocab()) throw Error("hidden_state: token out of vocabulary");
    const double* row = lm.embedding.row(tokens[t]);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += row[j];
  }
  for (double& v : mean) v /= static_cast<double>(prefix_len);
  Vec h(lm.config.hidden_dim);
  for (std::size_t j = 0; j < h.size(); ++j) {
    double acc = lm.hidden_bias[j];
    for (std::size_t i = 0; i < mean.size(); ++i) acc += lm.hidden_map(i, j) * mean[i];
    h[j] = std::tanh(acc);
  }
  return h;
}

inline Vec output_logits(const Matrix& w, const Vec& h) {
  Vec z(w.cols, 0.0);
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double hi = h[i];
    const double* row = w.row(i);
    for (std::size_t j = 0; j < w.cols; ++j) z[j] += row[j] * hi;
  }
  return z;
}

// Concatenated negative+positive logits for one prefix.
inline Vec joint_logits(const ToyLM& lm, const Vec& h) {
  Vec z = output_logits(lm.w_neg, h);
  const Vec z_pos = output_logits(lm.w_pos, h);
  z.insert(z.end(), z_pos.begin(), z_pos.end());
  return z;
}

// The joint-vocabulary activation over the 2|V| concatenation; decoding
// maps an argmax index back to a token symbol as index mod |V|.
inline Vec joint_vocab_sdm_forward(const ToyLM& lm, const std::vector<std::size_t>& tokens,
                                   std::size_t prefix_len, double q, double d,
                                   bool log_form = false) {
  const Vec h = hidden_state(lm, tokens, prefix_len);
  return sdm_activation({joint_logits(lm, h), q, d}, log_form);
}

struct DecodeResult {
  std::vector<std::size_t> completion;  // includes the end token when emitted
  bool truncated = false;
};

// Greedy decoding over the joint distribution with q = e-2, d = 1. The sdm
// activation is argmax-preserving, so the argmax of the concatenated logits
// decides each step.
inline DecodeResult greedy_decode(const ToyLM& lm, const std::vector<std::size_t>& prompt,
                                  std::size_t length_cap) {
  if (prompt.empty()) throw Error("greedy_decode: empty prompt");
  DecodeResult out;
  std::vector<std::size_t> tokens = prompt;
  for (std::size_t step = 0; step < length_cap; ++step) {
    const Vec h = hidden_state(lm, tokens, tokens.size());
    const Vec z = joint_logits(lm, h);
    const std::size_t token = argmax_index(z) % lm.vocab();
    out.completion.push_back(token);
    tokens.push_back(token);
    if (token == lm.config.end_token) return out;
  }
  out.truncated = true;
  return out;
}

// Verification features for the completion tokens[marker, len): the mean of
// the per-position hidden states concatenated with the state that predicts
// the end-of-unit token (the final position). A single-token completion
// contributes the same state to both halves.
inline Vec verification_features(const ToyLM& lm, const std::vector<std::size_t>& tokens,
                                 std::size_t marker) {
  if (marker == 0 || marker >= tokens.size()) {
    throw Error("verification_features: marker must leave a non-empty completion");
  }
  Vec mean(lm.config.hidden_dim, 0.0);
  Vec last;
  std::size_t count = 0;
  for (std::size_t t = marker; t < tokens.size(); ++t) {
    last = hidden_state(lm, tokens, t);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += last[j];
    ++count;
  }
  for (double& v : mean) v /= static_cast<double>(count);
  Vec features = mean;
  features.insert(features.end(), last.begin(), last.end());
  return features;
}

// ---------------------------------------------------------------------------
// Corpus representation and IO.
// ---------------------------------------------------------------------------

struct GenAiInstance {
  std::string id;
  std::vector<std::size_t> tokens;
  std::size_t marker = 0;  // completion starts here
  std::size_t verified = 0;  // y in {0, 1}
  std::optional<std::size_t> task_label;
  double q = std::exp(1.0) - 2.0;  // cached per epoch
  double d = 1.0;

  std::vector<std::size_t> prompt() const {
    return {tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(marker)};
  }
  std::size_t completion_length() const { return tokens.size() - marker; }
};

inline std::vector<GenAiInstance> load_toy_corpus(const std::string& path,
                                                  std::size_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file: " + path);
  std::vector<GenAiInstance> docs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed corpus record at line " + std::to_string(line_no) + ": " + e.what());
    }
    GenAiInstance doc;
    try {
      doc.id = obj.value("id", "doc-" + std::to_string(line_no));
      doc.tokens = obj.at("tokens").get<std::vector<std::size_t>>();
      doc.marker = obj.at("marker").get<std::size_t>();
      doc.verified = obj.at("y").get<std::size_t>();
      if (obj.contains("task_label") && !obj["task_label"].is_null()) {
        doc.task_label = obj["task_label"].get<std::size_t>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed corpus record at line " + std::to_string(line_no) + ": " + e.what());
    }
    if (doc.verified > 1) throw Error("verification label must be 0 or 1 at line " +
                                      std::to_string(line_no));
    if (doc.marker == 0 || doc.marker >= doc.tokens.size()) {
      throw Error("marker outside the sequence at line " + std::to_string(line_no));
    }
    for (const std::size_t tok : doc.tokens) {
      if (tok >= vocab_size) {
        throw Error("token out of vocabulary at line " + std::to_string(line_no));
      }
    }
    docs.push_back(std::move(doc));
  }
  if (docs.empty()) throw Error("corpus file has no records: " + path);
  return docs;
}

inline void save_toy_corpus(const std::string& path, const std::vector<GenAiInstance>& docs) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write corpus file: " + path);
  for (const auto& doc : docs) {
    nlohmann::json obj;
    obj["id"] = doc.id;
    obj["tokens"] = doc.tokens;
    obj["marker"] = doc.marker;
    obj["y"] = doc.verified;
    if (doc.task_label) obj["task_label"] = *doc.task_label;
    out << obj.dump() << "\n";
  }
}

// The task prediction parsed from a generated completion: the first task
// indicator token decides.
inline std::optional<std::size_t> parse_task_prediction(const ToyLmConfig& config,
                                                        const std::vector<std::size_t>& completion) {
  for (const std::size_t tok : completion) {
    if (tok >= config.task_token_offset && tok < config.task_token_offset + config.task_count) {
      return tok - config.task_token_offset;
    }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Reference-model pretraining. The bifurcated fine-tuning setup assumes the
// reference weights already generate plausible completions, so w_ref is
// first fit with a plain softmax cross-entropy over all documents; w_neg
// and w_pos are cloned from the result.
// ---------------------------------------------------------------------------

struct ReferencePretrainConfig {
  std::size_t epochs = 100;
  double lr = 2e-2;
  std::size_t batch_docs = 8;
};

inline void pretrain_reference(ToyLM& lm, const std::vector<GenAiInstance>& docs,
                               const ReferencePretrainConfig& config,
                               std::ostream* log = nullptr) {
  struct Position {
    Vec hidden;
    std::size_t label;
  };
  std::vector<Position> positions;
  for (const auto& doc : docs) {
    for (std::size_t t = doc.marker; t < doc.tokens.size(); ++t) {
      positions.push_back({hidden_state(lm, doc.tokens, t), doc.tokens[t]});
    }
  }
  if (positions.empty()) throw Error("pretrain_reference: no completion tokens");
  OptimizerState opt;
  const std::size_t batch = std::max<std::size_t>(1, config.batch_docs) * 8;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < positions.size(); start += batch) {
      const std::size_t stop = std::min(positions.size(), start + batch);
      Matrix grad(lm.w_ref.rows, lm.w_ref.cols);
      double loss = 0.0;
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const Vec z = output_logits(lm.w_ref, positions[i].hidden);
        const Vec probs = softmax(z);
        loss += -std::log(std::max(probs[positions[i].label], 1e-300));
        for (std::size_t a = 0; a < lm.w_ref.rows; ++a) {
          const double ha = positions[i].hidden[a];
          double* grow = grad.row(a);
          for (std::size_t v = 0; v < lm.vocab(); ++v) {
            grow[v] += inv * ha * (probs[v] - (v == positions[i].label ? 1.0 : 0.0));
          }
        }
      }
      adam_update(opt, {&lm.w_ref.data}, {&grad.data}, config.lr);
      epoch_loss += loss * inv;
      ++batches;
    }
    if (log) {
      *log << "[pretrain] epoch=" << epoch << " loss=" << epoch_loss / batches << "\n";
    }
  }
  lm.w_neg = lm.w_ref;
  lm.w_pos = lm.w_ref;
}

// ---------------------------------------------------------------------------
// Next-token loss (joint 2|V| activation) with the masked L2 regularizer.
// ---------------------------------------------------------------------------

struct NextTokenExample {
  Vec hidden;           // fixed-part hidden state for the position
  std::size_t label;    // next token with the +|V| offset already applied
  double q;
  double d;
};

struct TrainingSchedule {
  double beta_min = 0.0;
  double beta_max = 0.1;
  std::size_t epochs = 5;
  std::size_t batch_docs = 8;
  double lr = 5e-3;  // desk-scale default for the w_pos update
  std::uint64_t seed = 0;

  void validate() const {
    if (beta_min > beta_max) throw Error("TrainingSchedule: beta_min > beta_max");
    if (epochs < 1) throw Error("TrainingSchedule: epochs must be >= 1");
  }
};

// Frozen stop-gradient context: the masks and the rescale exponent are
// computed once per batch and treated as constants by the gradient.
struct RegularizerContext {
  std::vector<std::vector<double>> masks;  // per example, 2|V| of {0,1}
  double exponent = 0.0;                   // clamped rescale exponent
};

struct NextTokenLoss {
  double llm_loss = 0.0;
  double reg_term = 0.0;    // R, batch mean of the masked L2 distances
  double reg_scaled = 0.0;  // R'
  double total = 0.0;       // llm_loss + beta * R'
  Matrix g_w_pos;
  RegularizerContext context;
  std::vector<std::size_t> mask_zero_counts;  // diagnostics per example
};

namespace detail {

struct JointActivation {
  Vec log_form;  // 2|V|
  Vec r;         // stabilized base powers
  double r_sum = 0.0;
  double log_base = 0.0;
  std::size_t argmax = 0;  // of the raw logits; carries the max-subtraction gradient
};

inline JointActivation joint_log_activation(const Vec& z, double q, double d) {
  JointActivation out;
  const std::size_t n = z.size();
  out.log_base = std::log(2.0 + q);
  out.argmax = static_cast<std::size_t>(
      std::distance(z.begin(), std::max_element(z.begin(), z.end())));
  const double zmax = z[out.argmax];
  out.r.resize(n);
  out.log_form.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.r[i] = std::exp(d * (z[i] - zmax) * out.log_base);
    out.r_sum += out.r[i];
  }
  const double log_sum = std::log(out.r_sum + kEps);
  for (std::size_t i = 0; i < n; ++i) {
    out.log_form[i] = (std::log(out.r[i] + kEps) - log_sum) / out.log_base;
  }
  return out;
}

}  // namespace detail

// Evaluates the regularized next-token batch objective and its gradient
// for w_pos. When `frozen` is supplied the masks and rescale exponent are reused
// instead of recomputed, which is what a finite-difference probe of the
// stop-gradient objective needs.
inline NextTokenLoss next_token_loss_and_grad(const ToyLM& lm,
                                              const std::vector<NextTokenExample>& batch,
                                              double beta,
                                              const RegularizerContext* frozen = nullptr,
                                              bool want_grad = true) {
  if (batch.empty()) throw Error("next_token_loss_and_grad: empty batch");
  const std::size_t v = lm.vocab();
  const std::size_t joint = 2 * v;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  NextTokenLoss out;
  out.g_w_pos = Matrix(lm.w_pos.rows, lm.w_pos.cols);
  out.context.masks.resize(batch.size());
  out.mask_zero_counts.resize(batch.size());

  struct PerExample {
    detail::JointActivation gen;
    Vec f_orig;
    Vec diff;      // mask * (f_orig - f_gen)
    double r_n = 0.0;
  };
  std::vector<PerExample> cache(batch.size());

  for (std::size_t n = 0; n < batch.size(); ++n) {
    const NextTokenExample& ex = batch[n];
    if (ex.label >= joint) throw Error("next_token_loss_and_grad: label out of range");
    const Vec z_ref = output_logits(lm.w_ref, ex.hidden);
    Vec z_orig = z_ref;
    z_orig.insert(z_orig.end(), z_ref.begin(), z_ref.end());
    Vec z_gen = output_logits(lm.w_neg, ex.hidden);
    const Vec z_pos = output_logits(lm.w_pos, ex.hidden);
    z_gen.insert(z_gen.end(), z_pos.begin(), z_pos.end());

    PerExample& pe = cache[n];
    pe.gen = detail::joint_log_activation(z_gen, ex.q, ex.d);
    pe.f_orig = detail::joint_log_activation(z_orig, ex.q, ex.d).log_form;

    out.llm_loss += -pe.gen.log_form[ex.label];

    if (frozen) {
      out.context.masks[n] = frozen->masks[n];
    } else {
      // Mask out the argmax of each half of both distributions (with the
      // positive-half offset) and the gold label; overlaps just re-zero.
      Vec mask(joint, 1.0);
      const auto argmax_range = [](const Vec& f, std::size_t lo, std::size_t hi) {
        std::size_t best = lo;
        for (std::size_t i = lo + 1; i < hi; ++i) {
          if (f[i] > f[best]) best = i;
        }
        return best;
      };
      mask[argmax_range(pe.f_orig, 0, v)] = 0.0;
      mask[argmax_range(pe.f_orig, v, joint)] = 0.0;
      mask[argmax_range(pe.gen.log_form, 0, v)] = 0.0;
      mask[argmax_range(pe.gen.log_form, v, joint)] = 0.0;
      mask[ex.label] = 0.0;
      out.context.masks[n] = std::move(mask);
    }
    const Vec& mask = out.context.masks[n];
    out.mask_zero_counts[n] = static_cast<std::size_t>(
        std::count(mask.begin(), mask.end(), 0.0));

    pe.diff.resize(joint);
    double sq = 0.0;
    for (std::size_t i = 0; i < joint; ++i) {
      pe.diff[i] = mask[i] * (pe.f_orig[i] - pe.gen.log_form[i]);
      sq += pe.diff[i] * pe.diff[i];
    }
    pe.r_n = std::sqrt(sq);
    out.reg_term += pe.r_n;
  }
  out.llm_loss *= inv_b;
  out.reg_term *= inv_b;

  if (frozen) {
    out.context.exponent = frozen->exponent;
  } else {
    const double scale =
        std::log(out.llm_loss + kEps) / (std::log(out.reg_term + kEps) + kEps);
    out.context.exponent = std::clamp(scale, 0.0, 1.0);
  }
  const double clamped_r = std::max(out.reg_term, 1.0);
  out.reg_scaled = std::sqrt(std::pow(clamped_r, out.context.exponent));
  out.total = out.llm_loss + beta * out.reg_scaled;
  if (!std::isfinite(out.total)) throw Error("next_token_loss_and_grad: non-finite loss");
  if (!want_grad) return out;

  // d(total)/dR through R' (zero when the clamp floor binds).
  const double d_rscaled_d_r =
      out.reg_term >= 1.0
          ? 0.5 * out.context.exponent * std::pow(out.reg_term, 0.5 * out.context.exponent - 1.0)
          : 0.0;

  for (std::size_t n = 0; n < batch.size(); ++n) {
    const NextTokenExample& ex = batch[n];
    const PerExample& pe = cache[n];
    // Gradient w.r.t. the generated log-form vector.
    Vec g_f(joint, 0.0);
    g_f[ex.label] += -inv_b;
    if (pe.r_n > 0.0 && d_rscaled_d_r != 0.0) {
      const double coeff = beta * d_rscaled_d_r * inv_b / pe.r_n;
      for (std::size_t i = 0; i < joint; ++i) {
        g_f[i] += coeff * (-out.context.masks[n][i] * pe.diff[i]);
      }
    }
    // Chain through the log activation to the joint logits, including the
    // max-subtraction term on the argmax coordinate.
    double g_f_total = 0.0;
    for (const double g : g_f) g_f_total += g;
    Vec g_z(joint);
    double g_z_total = 0.0;
    for (std::size_t i = 0; i < joint; ++i) {
      const double ri = pe.gen.r[i];
      g_z[i] = ex.d * (g_f[i] * ri / (ri + kEps) - g_f_total * ri / (pe.gen.r_sum + kEps));
      g_z_total += g_z[i];
    }
    g_z[pe.gen.argmax] -= g_z_total;
    // Only the positive half reaches w_pos.
    for (std::size_t a = 0; a < lm.w_pos.rows; ++a) {
      const double ha = ex.hidden[a];
      double* grow = out.g_w_pos.row(a);
      for (std::size_t j = 0; j < v; ++j) grow[j] += g_z[v + j] * ha;
    }
  }
  return out;
}

// Single-position regularizer evaluation (R, R', and the mask zero count).
struct RegularizerDiagnostics {
  double reg_term = 0.0;
  double reg_scaled = 0.0;
  std::size_t mask_zeros = 0;
};

inline RegularizerDiagnostics regularization_term(const ToyLM& lm, const Vec& hidden,
                                                  std::size_t offset_label, double q, double d) {
  NextTokenExample ex{hidden, offset_label, q, d};
  const NextTokenLoss loss = next_token_loss_and_grad(lm, {ex}, 0.0, nullptr, /*want_grad=*/false);
  return {loss.reg_term, loss.reg_scaled, loss.mask_zero_counts[0]};
}

// ---------------------------------------------------------------------------
// The combined training loop: q/d refresh by scoring throwaway generations
// with the verification estimator, next-token updates of w_pos, and epoch
// selection by the admitted calibration count.
// ---------------------------------------------------------------------------

struct SdmNetworkTrainResult {
  ToyLM lm;  // with the selected epoch's w_pos
  std::size_t selected_epoch = 1;
  std::vector<std::size_t> epoch_admitted_counts;
  std::size_t initial_admitted_count = 0;  // before any fine-tuning
  std::size_t length_cap = 0;
  std::size_t truncated_decodes = 0;
  double final_beta = 0.0;  // beta after the last mini-batch of an epoch
};

namespace detail {

// Admitted-count metric over the calibration prompts: generate, verify,
// require prediction 1, and require task agreement when a label exists.
inline std::size_t admitted_generation_count(const ToyLM& lm, const EstimatorArchive& verifier,
                                             const std::vector<GenAiInstance*>& calibration,
                                             std::size_t length_cap,
                                             std::size_t* truncated = nullptr) {
  std::vector<std::size_t> admitted(calibration.size(), 0);
  std::vector<std::size_t> truncated_flags(calibration.size(), 0);
  parallel_for(calibration.size(), [&](std::size_t i) {
    const GenAiInstance& doc = *calibration[i];
    const std::vector<std::size_t> prompt = doc.prompt();
    const DecodeResult decoded = greedy_decode(lm, prompt, length_cap);
    truncated_flags[i] = decoded.truncated ? 1 : 0;
    std::vector<std::size_t> full = prompt;
    full.insert(full.end(), decoded.completion.begin(), decoded.completion.end());
    const Vec features = verification_features(lm, full, prompt.size());
    const Verdict verdict = predict(verifier, features, doc.id);
    bool ok = verdict.admitted && verdict.prediction == 1;
    if (ok && doc.task_label) {
      const auto parsed = parse_task_prediction(lm.config, decoded.completion);
      ok = parsed.has_value() && *parsed == *doc.task_label;
    }
    admitted[i] = ok ? 1 : 0;
  });
  if (truncated) {
    for (const std::size_t f : truncated_flags) *truncated += f;
  }
  std::size_t count = 0;
  for (const std::size_t a : admitted) count += a;
  return count;
}

// Refresh the cached (q, d) for the positive train documents by scoring a
// throwaway greedy generation with the verification estimator.
inline void refresh_generation_qd(const ToyLM& lm, const EstimatorArchive& verifier,
                                  std::vector<GenAiInstance*>& train_positive,
                                  std::size_t length_cap) {
  parallel_for(train_positive.size(), [&](std::size_t i) {
    GenAiInstance& doc = *train_positive[i];
    const std::vector<std::size_t> prompt = doc.prompt();
    const DecodeResult decoded = greedy_decode(lm, prompt, length_cap);
    std::vector<std::size_t> full = prompt;
    full.insert(full.end(), decoded.completion.begin(), decoded.completion.end());
    const Vec features = verification_features(lm, full, prompt.size());
    const Verdict verdict = predict(verifier, features, doc.id);
    doc.q = static_cast<double>(verdict.q);
    doc.d = verdict.d;
  });
}

}  // namespace detail

// One run of the training loop. `train` and `calibration` must be the
// verification estimator's own frozen splits; only y = 1 train documents
// contribute next-token updates, with their output tokens offset by |V|.
inline SdmNetworkTrainResult sdm_network_train(const ToyLM& initial_lm,
                                               std::vector<GenAiInstance> train,
                                               std::vector<GenAiInstance> calibration,
                                               const EstimatorArchive& verifier,
                                               const TrainingSchedule& schedule,
                                               std::ostream* log = nullptr) {
  schedule.validate();
  SdmNetworkTrainResult result;
  result.lm = initial_lm;
  ToyLM lm = initial_lm;

  std::size_t longest_completion = 1;
  for (const auto& doc : train) {
    longest_completion = std::max(longest_completion, doc.completion_length());
  }
  result.length_cap = lm.config.length_cap != 0 ? lm.config.length_cap
                                                : 4 * longest_completion;

  std::vector<GenAiInstance*> calib_ptrs;
  for (auto& doc : calibration) calib_ptrs.push_back(&doc);
  std::vector<GenAiInstance*> positive;
  for (auto& doc : train) {
    if (doc.verified == 1) positive.push_back(&doc);
  }
  if (positive.empty()) throw Error("sdm_network_train: no verified train documents");

  result.initial_admitted_count = detail::admitted_generation_count(
      lm, verifier, calib_ptrs, result.length_cap, &result.truncated_decodes);
  if (log) {
    *log << "[net-train] epoch=0 admitted=" << result.initial_admitted_count << "\n";
  }

  detail::refresh_generation_qd(lm, verifier, positive, result.length_cap);

  OptimizerState opt;
  std::size_t best_count = 0;
  bool have_best = false;

  const std::size_t batch_docs = std::max<std::size_t>(1, schedule.batch_docs);
  const std::size_t total_batches = (positive.size() + batch_docs - 1) / batch_docs;

  // The hidden states depend only on the frozen parts, so the per-position
  // examples are built once; q and d are re-filled from the doc cache.
  std::vector<std::vector<NextTokenExample>> doc_examples(positive.size());
  parallel_for(positive.size(), [&](std::size_t i) {
    const GenAiInstance& doc = *positive[i];
    for (std::size_t t = doc.marker; t < doc.tokens.size(); ++t) {
      NextTokenExample ex;
      ex.hidden = hidden_state(lm, doc.tokens, t);
      ex.label = doc.tokens[t] + lm.vocab();  // positive-half offset
      ex.q = doc.q;
      ex.d = doc.d;
      doc_examples[i].push_back(std::move(ex));
    }
  });

  for (std::size_t epoch = 1; epoch <= schedule.epochs; ++epoch) {
    double beta = schedule.beta_min;
    const double beta_step =
        (schedule.beta_max - schedule.beta_min) / static_cast<double>(total_batches);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < positive.size(); start += batch_docs) {
      const std::size_t stop = std::min(positive.size(), start + batch_docs);
      std::vector<NextTokenExample> batch;
      for (std::size_t i = start; i < stop; ++i) {
        for (NextTokenExample ex : doc_examples[i]) {
          ex.q = positive[i]->q;
          ex.d = positive[i]->d;
          batch.push_back(std::move(ex));
        }
      }
      const NextTokenLoss loss = next_token_loss_and_grad(lm, batch, beta);
      epoch_loss += loss.total;
      adam_update(opt, {&lm.w_pos.data}, {&loss.g_w_pos.data}, schedule.lr);
      beta += beta_step;
    }
    result.final_beta = beta;
    epoch_loss /= static_cast<double>(total_batches);

    detail::refresh_generation_qd(lm, verifier, positive, result.length_cap);
    const std::size_t admitted = detail::admitted_generation_count(
        lm, verifier, calib_ptrs, result.length_cap, &result.truncated_decodes);
    result.epoch_admitted_counts.push_back(admitted);
    if (log) {
      *log << "[net-train] epoch=" << epoch << " loss=" << epoch_loss
           << " admitted=" << admitted << "\n";
    }
    if (!have_best || admitted > best_count) {
      have_best = true;
      best_count = admitted;
      result.selected_epoch = epoch;
      result.lm = lm;
    }
  }
  return result;
}

// Test-time generation with the verification verdict for branching.
struct VerifiedGeneration {
  std::vector<std::size_t> completion;
  bool truncated = false;
  Verdict verdict;
};

inline VerifiedGeneration generate_verified(const ToyLM& lm, const EstimatorArchive& verifier,
                                            const std::vector<std::size_t>& prompt,
                                            std::size_t length_cap = 0) {
  if (length_cap == 0) length_cap = lm.config.length_cap != 0 ? lm.config.length_cap : 64;
  VerifiedGeneration out;
  const DecodeResult decoded = greedy_decode(lm, prompt, length_cap);
  out.completion = decoded.completion;
  out.truncated = decoded.truncated;
  std::vector<std::size_t> full = prompt;
  full.insert(full.end(), decoded.completion.begin(), decoded.completion.end());
  const Vec features = verification_features(lm, full, prompt.size());
  out.verdict = predict(verifier, features);
  return out;
}

}  // namespace sdm
