#pragma once

#include <iomanip>
#include <numeric>
#include <ostream>

#include "sdm/estimator.hpp"

namespace sdm {

struct TrainingRunConfig {
  std::size_t iterations = 10;  // J
  std::size_t max_epochs = 50;
  std::size_t filters = 1000;  // M
  double alpha_prime = 0.95;
  std::uint64_t seed = 0;
  std::size_t balance_tolerance = 0;
  NumericsConfig numerics;
  RescalerTrainConfig rescaler;
  std::ostream* log = nullptr;
};

// Mean over true-label classes of the within-class median q. Every class
// must be represented.
inline double balanced_median_q(const std::vector<std::size_t>& q,
                                const std::vector<std::size_t>& label,
                                std::size_t class_count) {
  if (q.size() != label.size()) throw Error("balanced_median_q: arrays misaligned");
  std::vector<Vec> per_class(class_count);
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (label[i] >= class_count) throw Error("balanced_median_q: label out of range");
    per_class[label[i]].push_back(static_cast<double>(q[i]));
  }
  double total = 0.0;
  for (std::size_t c = 0; c < class_count; ++c) {
    if (per_class[c].empty()) {
      throw Error("balanced_median_q: class " + std::to_string(c) + " empty");
    }
    total += median(std::move(per_class[c]));
  }
  return total / static_cast<double>(class_count);
}

namespace detail {

// A split materialized for one training round: normalized inputs are fixed
// for the round because the normalization statistics are.
struct RoundData {
  std::vector<const LabeledInstance*> train;
  std::vector<const LabeledInstance*> calibration;
  Vec mean;
  Vec std_dev;
  Matrix train_norm;  // N_tr x D
  Matrix calib_norm;  // N_ca x D
};

inline void compute_mean_std(const std::vector<const LabeledInstance*>& split, Vec& mean,
                             Vec& std_dev) {
  const std::size_t n = split.size();
  const std::size_t d = split.front()->embedding.size();
  mean.assign(d, 0.0);
  std_dev.assign(d, 0.0);
  for (const auto* inst : split) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += inst->embedding[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (const auto* inst : split) {
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = inst->embedding[j] - mean[j];
      std_dev[j] += diff * diff;
    }
  }
  for (double& s : std_dev) s = std::sqrt(s / static_cast<double>(n));
}

inline Matrix normalize_split(const std::vector<const LabeledInstance*>& split, const Vec& mean,
                              const Vec& std_dev) {
  const std::size_t d = mean.size();
  Matrix out(split.size(), d);
  for (std::size_t i = 0; i < split.size(); ++i) {
    const Vec norm = normalize_input(split[i]->embedding, mean, std_dev);
    std::copy(norm.begin(), norm.end(), out.row(i));
  }
  return out;
}

// Stratified even split of the pooled instances, reshuffled per round.
inline RoundData make_round_split(const std::vector<const LabeledInstance*>& pool,
                                  std::size_t class_count, std::mt19937_64& rng) {
  std::vector<std::vector<std::size_t>> by_class(class_count);
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i]->label].push_back(i);
  RoundData round;
  for (auto& idxs : by_class) {
    std::shuffle(idxs.begin(), idxs.end(), rng);
    const std::size_t train_n = (idxs.size() + 1) / 2;
    for (std::size_t i = 0; i < idxs.size(); ++i) {
      (i < train_n ? round.train : round.calibration).push_back(pool[idxs[i]]);
    }
  }
  compute_mean_std(round.train, round.mean, round.std_dev);
  round.train_norm = normalize_split(round.train, round.mean, round.std_dev);
  round.calib_norm = normalize_split(round.calibration, round.mean, round.std_dev);
  return round;
}

struct ForwardCache {
  Matrix h_prime;  // N x M
  Matrix z_prime;  // N x C
  std::vector<std::size_t> predicted;
};

inline ForwardCache forward_all(const AdaptorWeights& w, const Matrix& x_norm) {
  ForwardCache cache;
  cache.h_prime = Matrix(x_norm.rows, w.filter_count());
  cache.z_prime = Matrix(x_norm.rows, w.class_count());
  cache.predicted.assign(x_norm.rows, 0);
  parallel_for(x_norm.rows, [&](std::size_t i) {
    Vec x(x_norm.row(i), x_norm.row(i) + x_norm.cols);
    const AdaptorOutput out = adaptor_forward_normalized(w, x);
    std::copy(out.h_prime.begin(), out.h_prime.end(), cache.h_prime.row(i));
    std::copy(out.z_prime.begin(), out.z_prime.end(), cache.z_prime.row(i));
    Vec z(out.z_prime);
    cache.predicted[i] = argmax_index(z);
  });
  return cache;
}

inline SupportIndex build_support(const ForwardCache& cache,
                                  const std::vector<const LabeledInstance*>& train) {
  SupportIndex index;
  index.h_prime = cache.h_prime;
  index.predicted = cache.predicted;
  index.label.reserve(train.size());
  index.ids.reserve(train.size());
  for (const auto* inst : train) {
    index.label.push_back(inst->label);
    index.ids.push_back(inst->id);
  }
  return index;
}

struct QdRefresh {
  std::vector<std::size_t> q;
  Vec d_nearest;
  Vec d;
  DistanceCdfs cdfs;
};

// Recomputes q and the distance quantile for every train instance against
// the current support index, excluding the self-match and substituting the
// train-side distance eCDFs.
inline QdRefresh refresh_train_qd(const SupportIndex& index,
                                  const std::vector<const LabeledInstance*>& train,
                                  std::size_t class_count) {
  const std::size_t n = train.size();
  QdRefresh out;
  out.q.assign(n, 0);
  out.d_nearest.assign(n, 0.0);
  out.d.assign(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    Vec h(index.h_prime.row(i), index.h_prime.row(i) + index.h_prime.cols);
    const QDResult qd =
        compute_q_and_dx(index, h, index.predicted[i], train[i]->id, /*top_k=*/1);
    out.q[i] = qd.q;
    out.d_nearest[i] = qd.d_nearest;
  });
  std::vector<std::size_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = train[i]->label;
  out.cdfs = build_distance_cdfs(std::vector<double>(out.d_nearest.begin(), out.d_nearest.end()),
                                 out.q, labels, class_count);
  for (std::size_t i = 0; i < n; ++i) {
    out.d[i] = distance_quantile_d(out.cdfs, out.d_nearest[i]);
  }
  return out;
}

// q for every calibration instance against the train index (no exclusion).
inline std::vector<std::size_t> calibration_q(const SupportIndex& index,
                                              const ForwardCache& calib) {
  std::vector<std::size_t> q(calib.h_prime.rows, 0);
  parallel_for(calib.h_prime.rows, [&](std::size_t i) {
    Vec h(calib.h_prime.row(i), calib.h_prime.row(i) + calib.h_prime.cols);
    q[i] = compute_q_and_dx(index, h, calib.predicted[i], std::nullopt, /*top_k=*/1).q;
  });
  return q;
}

}  // namespace detail

struct RoundResult {
  AdaptorWeights weights;
  double metric = 0.0;
  std::size_t best_epoch = 0;
};

// One learning round: epoch 1 uses q = e-2, d = 1 for every train instance
// (standard softmax recovery); q and d are refreshed after every epoch; the
// epoch with the highest balanced median calibration q wins, ties keeping
// the earlier epoch.
inline RoundResult train_single_round(const detail::RoundData& round, std::size_t class_count,
                                      const TrainingRunConfig& config, std::uint64_t round_index) {
  const std::size_t n_train = round.train.size();
  const std::size_t dim = round.train_norm.cols;
  const std::size_t span =
      config.numerics.kernel_span == 0 ? dim : std::min(config.numerics.kernel_span, dim);

  AdaptorWeights weights = make_adaptor_weights(config.filters, span, class_count,
                                                config.numerics.conv_nonlinearity);
  auto init_rng = make_rng(config.seed, 100 + round_index);
  init_adaptor_weights(weights, init_rng);

  std::vector<std::size_t> labels(n_train);
  for (std::size_t i = 0; i < n_train; ++i) labels[i] = round.train[i]->label;

  Vec q_cache(n_train, std::exp(1.0) - 2.0);
  Vec d_cache(n_train, 1.0);

  OptimizerState opt;
  auto shuffle_rng = make_rng(config.seed, 200 + round_index);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);

  RoundResult best;
  best.metric = -1.0;

  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    const std::size_t batch_size = std::max<std::size_t>(1, config.numerics.batch_size);
    for (std::size_t start = 0; start < n_train; start += batch_size) {
      const std::size_t stop = std::min(n_train, start + batch_size);
      SdmLossBatch batch;
      batch.x_norm = Matrix(stop - start, dim);
      batch.labels.resize(stop - start);
      batch.q.resize(stop - start);
      batch.d.resize(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const std::size_t row = order[i];
        std::copy(round.train_norm.row(row), round.train_norm.row(row) + dim,
                  batch.x_norm.row(i - start));
        batch.labels[i - start] = labels[row];
        batch.q[i - start] = q_cache[row];
        batch.d[i - start] = d_cache[row];
      }
      const SdmLossGrads grads = sdm_loss_and_grad(weights, batch);
      epoch_loss += grads.loss;
      ++batches;
      adam_update(opt, {&weights.conv.data, &weights.linear.data, &weights.bias},
                  {&grads.g_conv.data, &grads.g_linear.data, &grads.g_bias},
                  config.numerics.adaptor_lr);
    }
    epoch_loss /= static_cast<double>(std::max<std::size_t>(1, batches));

    const detail::ForwardCache train_fwd = detail::forward_all(weights, round.train_norm);
    const SupportIndex index = detail::build_support(train_fwd, round.train);
    const detail::QdRefresh refreshed = detail::refresh_train_qd(index, round.train, class_count);
    for (std::size_t i = 0; i < n_train; ++i) {
      q_cache[i] = static_cast<double>(refreshed.q[i]);
      d_cache[i] = refreshed.d[i];
    }

    const detail::ForwardCache calib_fwd = detail::forward_all(weights, round.calib_norm);
    const std::vector<std::size_t> calib_q = detail::calibration_q(index, calib_fwd);
    std::vector<std::size_t> calib_labels(round.calibration.size());
    for (std::size_t i = 0; i < calib_labels.size(); ++i) {
      calib_labels[i] = round.calibration[i]->label;
    }
    const double metric = balanced_median_q(calib_q, calib_labels, class_count);

    if (config.log) {
      *config.log << "[train] round=" << (round_index + 1) << " epoch=" << epoch
                  << " loss=" << std::setprecision(10) << epoch_loss << " metric=" << metric
                  << "\n";
    }
    if (metric > best.metric) {
      best.metric = metric;
      best.weights = weights;
      best.best_epoch = epoch;
    }
  }
  return best;
}

namespace detail {

// Everything the winning round contributes to the archive beyond weights.
struct RoundArtifacts {
  SupportIndex support;
  CalibrationTables tables;
  std::vector<CalibrationPointRecord> records;
  Matrix calibration_logits;
  std::vector<std::size_t> calibration_labels;
  std::vector<std::string> calibration_ids;
  Vec train_q;
  Vec train_d;
};

// Builds the full calibration chain for a round's winning weights: support
// index, calibration-side distance eCDFs, activation-output eCDFs, the
// rescaler, soft-q-bin eCDFs, and the per-point records for the region scan.
inline RoundArtifacts build_round_artifacts(const AdaptorWeights& weights, const RoundData& round,
                                            std::size_t class_count,
                                            const TrainingRunConfig& config,
                                            std::uint64_t round_index) {
  RoundArtifacts art;
  const ForwardCache train_fwd = forward_all(weights, round.train_norm);
  art.support = build_support(train_fwd, round.train);
  const QdRefresh train_qd = refresh_train_qd(art.support, round.train, class_count);
  art.train_q.assign(train_qd.q.begin(), train_qd.q.end());
  art.train_d = train_qd.d;

  const std::size_t n_ca = round.calibration.size();
  const ForwardCache calib_fwd = forward_all(weights, round.calib_norm);
  art.calibration_logits = calib_fwd.z_prime;
  art.calibration_labels.resize(n_ca);
  art.calibration_ids.resize(n_ca);
  for (std::size_t i = 0; i < n_ca; ++i) {
    art.calibration_labels[i] = round.calibration[i]->label;
    art.calibration_ids[i] = round.calibration[i]->id;
  }

  // q and nearest distance for every calibration point, then the
  // calibration-side distance tables (q > 0 points only).
  std::vector<std::size_t> ca_q(n_ca, 0);
  Vec ca_dx(n_ca, 0.0);
  parallel_for(n_ca, [&](std::size_t i) {
    Vec h(calib_fwd.h_prime.row(i), calib_fwd.h_prime.row(i) + calib_fwd.h_prime.cols);
    const QDResult qd =
        compute_q_and_dx(art.support, h, calib_fwd.predicted[i], std::nullopt, /*top_k=*/1);
    ca_q[i] = qd.q;
    ca_dx[i] = qd.d_nearest;
  });
  art.tables.distance = build_distance_cdfs(std::vector<double>(ca_dx.begin(), ca_dx.end()), ca_q,
                                            art.calibration_labels, class_count);

  Vec ca_d(n_ca);
  std::vector<Vec> ca_sdm(n_ca);
  for (std::size_t i = 0; i < n_ca; ++i) {
    ca_d[i] = distance_quantile_d(art.tables.distance, ca_dx[i]);
    Vec z(calib_fwd.z_prime.row(i), calib_fwd.z_prime.row(i) + class_count);
    ca_sdm[i] = sdm_activation({z, static_cast<double>(ca_q[i]), ca_d[i]});
  }

  std::vector<Vec> output_values(class_count);
  for (std::size_t i = 0; i < n_ca; ++i) {
    output_values[art.calibration_labels[i]].push_back(ca_sdm[i][art.calibration_labels[i]]);
  }
  art.tables.sdm_output.clear();
  for (auto& values : output_values) {
    art.tables.sdm_output.emplace_back(std::move(values), /*saturating=*/true);
  }
  art.tables.calibration_counts.assign(class_count, 0.0);
  for (const std::size_t y : art.calibration_labels) art.tables.calibration_counts[y] += 1.0;

  // Quantile vectors and soft q-bins, then the rescaler over them.
  // compute_quantile_vector needs only the activation-output tables.
  CalibrationTables partial;
  partial.sdm_output = art.tables.sdm_output;
  partial.calibration_counts = art.tables.calibration_counts;
  std::vector<RescalerExample> examples(n_ca);
  std::vector<SoftQBin> soft(n_ca);
  for (std::size_t i = 0; i < n_ca; ++i) {
    examples[i].v = compute_quantile_vector(partial, ca_sdm[i]);
    soft[i] = compute_softqbin(static_cast<double>(ca_q[i]), examples[i].v,
                               calib_fwd.predicted[i]);
    examples[i].soft_qbin = soft[i].soft;
    examples[i].label = art.calibration_labels[i];
  }
  RescalerTrainConfig rescaler_config = config.rescaler;
  rescaler_config.seed = config.seed + 7919 * (round_index + 1);
  art.tables.rescaler = train_rescaler(examples, class_count, rescaler_config);

  // Rescaled outputs, the OOD convention, and the per-point records.
  art.records.resize(n_ca);
  Vec soft_final(n_ca);
  for (std::size_t i = 0; i < n_ca; ++i) {
    const RescaleResult res =
        rescale_outputs(art.tables, examples[i].v, soft[i].soft, calib_fwd.predicted[i]);
    soft_final[i] = res.ood ? 0.0 : soft[i].soft;
    CalibrationPointRecord& rec = art.records[i];
    rec.label = art.calibration_labels[i];
    rec.predicted = calib_fwd.predicted[i];
    rec.soft_qbin = soft_final[i];
    rec.o_true = res.output[rec.label];
    rec.p_centroid = res.selected;
  }
  std::vector<Vec> qbin_values(class_count);
  for (std::size_t i = 0; i < n_ca; ++i) {
    qbin_values[art.calibration_labels[i]].push_back(soft_final[i]);
  }
  art.tables.soft_qbin.clear();
  for (auto& values : qbin_values) {
    art.tables.soft_qbin.emplace_back(std::move(values), /*saturating=*/false);
  }
  return art;
}

}  // namespace detail

// Full iterative training: J rounds of reshuffled even splits and fresh
// initializations, each refreshed per epoch, with the globally best round
// (strictly greater metric wins) providing the weights, splits, and tables
// of the final estimator, and all rounds contributing iteration statistics
// for the robust thresholds.
inline EstimatorArchive train_full(const DatasetBundle& bundle, const TrainingRunConfig& config) {
  if (bundle.class_count < 2) throw Error("train_full: need at least 2 classes");
  if (config.iterations < 1) throw Error("train_full: J must be >= 1");
  config.numerics.validate();
  std::vector<const LabeledInstance*> pool;
  for (const auto& inst : bundle.train) pool.push_back(&inst);
  for (const auto& inst : bundle.calibration) pool.push_back(&inst);
  if (pool.empty()) throw Error("train_full: empty bundle");

  EstimatorArchive archive;
  archive.alpha_prime = config.alpha_prime;
  archive.config.class_count = bundle.class_count;
  archive.config.dimension = bundle.dimension;
  archive.config.filters = config.filters;
  archive.config.kernel_span =
      config.numerics.kernel_span == 0 ? bundle.dimension : config.numerics.kernel_span;
  archive.config.conv_nonlinearity = config.numerics.conv_nonlinearity;
  archive.config.iterations = config.iterations;
  archive.config.max_epochs = config.max_epochs;
  archive.config.batch_size = config.numerics.batch_size;
  archive.config.adaptor_lr = config.numerics.adaptor_lr;
  archive.config.rescaler_lr = config.rescaler.lr;
  archive.config.rescaler_max_epochs = config.rescaler.max_epochs;
  archive.config.rescaler_stop_after = config.rescaler.stop_after_increases;
  archive.config.balance_tolerance = config.balance_tolerance;
  archive.config.seed = config.seed;

  double best_metric = -1.0;
  std::optional<std::size_t> winner;
  for (std::size_t j = 0; j < config.iterations; ++j) {
    auto split_rng = make_rng(config.seed, 300 + j);
    const detail::RoundData round =
        detail::make_round_split(pool, bundle.class_count, split_rng);
    const RoundResult result = train_single_round(round, bundle.class_count, config, j);
    detail::RoundArtifacts art = detail::build_round_artifacts(result.weights, round,
                                                               bundle.class_count, config, j);
    IterationStats stats;
    stats.metric = result.metric;
    stats.records = std::move(art.records);
    stats.min_valid_qbin =
        find_min_valid_qbin(stats.records, bundle.class_count, config.alpha_prime)
            .min_valid_qbin;
    if (config.log) {
      *config.log << "[round] round=" << (j + 1) << " metric=" << result.metric
                  << " min_valid_qbin="
                  << (stats.min_valid_qbin ? std::to_string(*stats.min_valid_qbin)
                                           : std::string("absent"))
                  << "\n";
    }
    archive.iteration_stats.push_back(std::move(stats));

    if (result.metric > best_metric) {
      best_metric = result.metric;
      winner = j;
      archive.adaptor.weights = result.weights;
      archive.adaptor.input_mean = round.mean;
      archive.adaptor.input_std = round.std_dev;
      archive.adaptor.selection_metric = result.metric;
      archive.adaptor.train_ids.clear();
      for (const auto* inst : round.train) archive.adaptor.train_ids.push_back(inst->id);
      archive.adaptor.calibration_ids.clear();
      for (const auto* inst : round.calibration) {
        archive.adaptor.calibration_ids.push_back(inst->id);
      }
      archive.adaptor.train_q = art.train_q;
      archive.adaptor.train_d = art.train_d;
      archive.support = std::move(art.support);
      archive.tables = std::move(art.tables);
      archive.calibration_logits = std::move(art.calibration_logits);
      archive.calibration_labels = std::move(art.calibration_labels);
      archive.calibration_ids = std::move(art.calibration_ids);
    }
  }
  archive.winning_iteration = *winner;
  archive.thresholds = robust_thresholds_and_offsets(archive.iteration_stats, *winner,
                                                     bundle.class_count, config.alpha_prime);
  archive.validate();
  return archive;
}

}  // namespace sdm
