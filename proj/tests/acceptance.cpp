// Acceptance suite: one pass/fail line per criterion. Exits nonzero if any
// criterion fails. Scaled-down synthetic experiments stand in for the
// full-scale studies; every tolerance is pinned here.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "sdm/archive_io.hpp"
#include "sdm/baselines.hpp"
#include "sdm/pipeline.hpp"
#include "sdm/report.hpp"
#include "sdm/synthetic.hpp"
#include "sdm/training.hpp"

using namespace sdm;

namespace {

int g_failures = 0;

void criterion(int number, const std::string& name, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %2d: %s (%s)\n", pass ? "PASS" : "FAIL", number, name.c_str(),
              detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-6});
}

// --- 1: softmax recovery ----------------------------------------------------

void criterion_softmax_recovery() {
  std::mt19937_64 rng(1001);
  std::uniform_real_distribution<double> zdist(-6.0, 6.0);
  std::uniform_int_distribution<std::size_t> cdist(2, 10);
  const double q = std::exp(1.0) - 2.0;
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t c = cdist(rng);
    Vec z(c);
    for (double& v : z) v = zdist(rng);
    const Vec got = sdm_activation({z, q, 1.0});
    const Vec want = softmax(z, 1.0);
    for (std::size_t i = 0; i < c; ++i) {
      worst = std::max(worst, std::fabs(got[i] - want[i]));
    }
  }
  std::ostringstream detail;
  detail << "max elementwise deviation " << worst << " over 1000 draws, tolerance 1e-6";
  criterion(1, "softmax recovery at q = e-2, d = 1", worst < 1e-6, detail.str());
}

// --- 2: argmax preservation ---------------------------------------------------

void criterion_argmax_preservation() {
  std::mt19937_64 rng(1002);
  std::uniform_real_distribution<double> zdist(-8.0, 8.0);
  std::uniform_real_distribution<double> qdist(0.0, 100.0);
  std::uniform_real_distribution<double> ddist(1e-9, 1.0);
  std::uniform_int_distribution<std::size_t> cdist(2, 10);
  std::size_t violations = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t c = cdist(rng);
    Vec z(c);
    for (double& v : z) v = zdist(rng);
    const Vec out = sdm_activation({z, qdist(rng), ddist(rng)});
    if (argmax_index(out) != argmax_index(z)) ++violations;
  }
  std::ostringstream detail;
  detail << violations << " violations over 10000 draws";
  criterion(2, "argmax preservation", violations == 0, detail.str());
}

// --- 3: gradient correctness ---------------------------------------------------

void criterion_gradients() {
  std::mt19937_64 rng(1003);
  double worst = 0.0;
  std::size_t checked = 0;

  // Adaptor sdm loss.
  {
    std::uniform_real_distribution<double> xdist(-1.5, 1.5);
    std::uniform_real_distribution<double> qdist(0.0, 25.0);
    std::uniform_real_distribution<double> ddist(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t c = 2 + trial % 4;
      AdaptorWeights w = make_adaptor_weights(3, 4, c, trial % 7 == 0);
      init_adaptor_weights(w, rng);
      SdmLossBatch batch;
      const std::size_t b = 1 + trial % 3;
      batch.x_norm = Matrix(b, 4);
      for (double& v : batch.x_norm.data) v = xdist(rng);
      batch.labels.resize(b);
      batch.q.resize(b);
      batch.d.resize(b);
      std::uniform_int_distribution<std::size_t> ydist(0, c - 1);
      for (std::size_t i = 0; i < b; ++i) {
        batch.labels[i] = ydist(rng);
        batch.q[i] = qdist(rng);
        batch.d[i] = ddist(rng);
      }
      const SdmLossGrads grads = sdm_loss_and_grad(w, batch);
      const double step = 1e-4;
      auto probe = [&](double* slot, double analytic) {
        const double saved = *slot;
        *slot = saved + step;
        const double hi = sdm_loss_and_grad(w, batch).loss;
        *slot = saved - step;
        const double lo = sdm_loss_and_grad(w, batch).loss;
        *slot = saved;
        worst = std::max(worst, rel_err(analytic, (hi - lo) / (2.0 * step)));
        ++checked;
      };
      for (std::size_t i = 0; i < w.conv.data.size(); i += 3) probe(&w.conv.data[i], grads.g_conv.data[i]);
      for (std::size_t i = 0; i < w.linear.data.size(); i += 2) probe(&w.linear.data[i], grads.g_linear.data[i]);
      for (std::size_t i = 0; i < w.bias.size(); ++i) probe(&w.bias[i], grads.g_bias[i]);
    }
  }

  // Rescaler loss.
  {
    std::uniform_real_distribution<double> vdist(0.0, 1.0);
    std::uniform_real_distribution<double> qbdist(0.0, 4.0);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t c = 2 + trial % 3;
      Matrix w(c, c);
      std::uniform_real_distribution<double> wdist(-1.0, 1.5);
      for (double& v : w.data) v = wdist(rng);
      RescalerExample ex;
      ex.v.resize(c);
      for (double& v : ex.v) v = vdist(rng);
      ex.soft_qbin = qbdist(rng);
      ex.label = trial % c;
      const RescalerLossGrad grads = rescaler_loss_and_grad(w, ex);
      const double step = 1e-4;
      for (std::size_t i = 0; i < w.data.size(); ++i) {
        const double saved = w.data[i];
        w.data[i] = saved + step;
        const double hi = rescaler_loss_and_grad(w, ex, false).loss;
        w.data[i] = saved - step;
        const double lo = rescaler_loss_and_grad(w, ex, false).loss;
        w.data[i] = saved;
        worst = std::max(worst, rel_err(grads.grad.data[i], (hi - lo) / (2.0 * step)));
        ++checked;
      }
    }
  }

  // Next-token loss with the beta-scaled regularizer.
  {
    std::uniform_real_distribution<double> dist(-0.5, 0.5);
    std::uniform_real_distribution<double> qdist(0.0, 10.0);
    std::uniform_real_distribution<double> ddist(0.1, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
      ToyLmConfig config;
      config.vocab_size = 6;
      config.embed_dim = 4;
      config.hidden_dim = 3;
      config.seed = 2000 + trial;
      ToyLM lm = make_toy_lm(config);
      for (double& v : lm.w_pos.data) v += dist(rng);
      std::vector<NextTokenExample> batch;
      std::uniform_int_distribution<std::size_t> tok(0, 5);
      for (int n = 0; n < 2; ++n) {
        std::vector<std::size_t> tokens = {tok(rng), tok(rng), tok(rng)};
        NextTokenExample ex;
        ex.hidden = hidden_state(lm, tokens, tokens.size());
        ex.label = tok(rng) + lm.vocab();
        ex.q = qdist(rng);
        ex.d = ddist(rng);
        batch.push_back(std::move(ex));
      }
      const double beta = 0.08;
      const NextTokenLoss base = next_token_loss_and_grad(lm, batch, beta);
      const double step = 1e-5;
      for (std::size_t i = 0; i < lm.w_pos.data.size(); i += 7) {
        const double saved = lm.w_pos.data[i];
        lm.w_pos.data[i] = saved + step;
        const double hi = next_token_loss_and_grad(lm, batch, beta, &base.context, false).total;
        lm.w_pos.data[i] = saved - step;
        const double lo = next_token_loss_and_grad(lm, batch, beta, &base.context, false).total;
        lm.w_pos.data[i] = saved;
        worst = std::max(worst, rel_err(base.g_w_pos.data[i], (hi - lo) / (2.0 * step)));
        ++checked;
      }
    }
  }

  std::ostringstream detail;
  detail << "max relative error " << worst << " over " << checked
         << " finite-difference probes, tolerance 1e-4";
  criterion(3, "gradient correctness (adaptor, rescaler, next-token)", worst < 1e-4,
            detail.str());
}

// --- 4: q/d oracle equivalence -------------------------------------------------

struct OracleQd {
  std::size_t q = 0;
  double d_nearest = 0.0;
};

OracleQd brute_force_qd(const SupportIndex& index, const Vec& h, std::size_t predicted) {
  struct Row {
    double dist2;
    std::size_t pos;
  };
  std::vector<Row> rows;
  for (std::size_t i = 0; i < index.size(); ++i) {
    double dist2 = 0.0;
    for (std::size_t j = 0; j < h.size(); ++j) {
      const double diff = index.h_prime(i, j) - h[j];
      dist2 += diff * diff;
    }
    rows.push_back({dist2, i});
  }
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
    return a.pos < b.pos;
  });
  OracleQd out;
  out.d_nearest = std::sqrt(rows.front().dist2);
  for (const Row& row : rows) {
    if (index.predicted[row.pos] != predicted || index.predicted[row.pos] != index.label[row.pos]) {
      break;
    }
    ++out.q;
  }
  return out;
}

void criterion_qd_oracle() {
  std::mt19937_64 rng(1004);
  std::uniform_int_distribution<std::size_t> ndist(2, 500);
  std::uniform_int_distribution<std::size_t> mdist(1, 8);
  std::uniform_int_distribution<std::size_t> classes_dist(2, 5);
  std::uniform_real_distribution<double> xdist(-2.0, 2.0);
  std::size_t mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = ndist(rng);
    const std::size_t dim = mdist(rng);
    const std::size_t classes = classes_dist(rng);
    SupportIndex index;
    index.h_prime = Matrix(n, dim);
    for (double& v : index.h_prime.data) v = xdist(rng);
    index.predicted.resize(n);
    index.label.resize(n);
    index.ids.resize(n);
    std::uniform_int_distribution<std::size_t> cdist(0, classes - 1);
    for (std::size_t i = 0; i < n; ++i) {
      index.predicted[i] = cdist(rng);
      index.label[i] = cdist(rng);
      index.ids[i] = std::to_string(i);
    }
    Vec h(dim);
    for (double& v : h) v = xdist(rng);
    const std::size_t predicted = cdist(rng);
    const QDResult got = compute_q_and_dx(index, h, predicted);
    const OracleQd want = brute_force_qd(index, h, predicted);
    if (got.q != want.q || got.d_nearest != want.d_nearest) ++mismatches;
  }
  std::ostringstream detail;
  detail << mismatches << " mismatches over 1000 random support sets (N <= 500)";
  criterion(4, "q/d brute-force oracle equivalence", mismatches == 0, detail.str());
}

// --- 5: eCDF convention conformance ---------------------------------------------

double oracle_quantile(const std::vector<double>& values, double val, bool reverse,
                       bool saturating) {
  if (values.empty()) return 0.0;
  double max_value = values.front();
  for (const double v : values) max_value = std::max(max_value, v);
  if (saturating && !reverse && val >= max_value) return 1.0;
  std::size_t strictly_less = 0;
  for (const double v : values) {
    if (v < val) ++strictly_less;
  }
  const double frac = static_cast<double>(strictly_less) / static_cast<double>(values.size());
  return reverse ? 1.0 - frac : frac;
}

void criterion_ecdf_conformance() {
  // Exhaustive: every multiset of grid values (size <= 4 over a 6-point
  // grid), every query on a 20-point grid straddling the value range, all
  // mode combinations.
  const std::vector<double> grid = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
  std::vector<std::vector<double>> samples;
  std::vector<double> current;
  std::function<void(std::size_t)> enumerate = [&](std::size_t start) {
    samples.push_back(current);
    if (current.size() == 4) return;
    for (std::size_t i = start; i < grid.size(); ++i) {
      current.push_back(grid[i]);
      enumerate(i);
      current.pop_back();
    }
  };
  enumerate(0);

  std::vector<double> queries;
  for (int i = 0; i < 20; ++i) queries.push_back(-0.2 + 1.4 * i / 19.0);

  std::size_t mismatches = 0;
  std::size_t checked = 0;
  for (const auto& sample : samples) {
    for (const bool reverse : {false, true}) {
      for (const bool saturating : {false, true}) {
        if (reverse && saturating) continue;
        const EmpiricalCdf cdf{Vec(sample), saturating};
        for (const double qv : queries) {
          const double got = ecdf_quantile(cdf, qv, reverse);
          const double want = oracle_quantile(sample, qv, reverse, saturating);
          if (std::fabs(got - want) > 1e-12) ++mismatches;
          ++checked;
        }
      }
    }
  }
  std::ostringstream detail;
  detail << mismatches << " mismatches over " << checked << " exhaustive grid evaluations";
  criterion(5, "eCDF convention conformance", mismatches == 0, detail.str());
}

// --- 6 + 7 + 10: the synthetic calibration experiment ----------------------------

struct BlobExperiment {
  EstimatorArchive archive;
  double train_seconds = 0.0;
};

BlobExperiment run_blob_experiment() {
  BlobsConfig pool;
  pool.per_class = 2000;  // 4000 points: 2000 train / 2000 calibration
  pool.dimension = 8;
  pool.separation = 4.0;  // moderate overlap: Bayes accuracy ~0.977
  pool.seed = 101;
  const DatasetBundle bundle = blobs_bundle(pool, /*split_seed=*/0);

  TrainingRunConfig config;
  config.iterations = 3;
  config.max_epochs = 8;
  config.filters = 16;
  config.alpha_prime = 0.9;
  config.seed = 7;
  config.numerics.adaptor_lr = 5e-3;
  config.numerics.batch_size = 50;

  BlobExperiment experiment;
  const auto start = std::chrono::steady_clock::now();
  experiment.archive = train_full(bundle, config);
  experiment.train_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return experiment;
}

std::vector<std::size_t> labels_of(const std::vector<LabeledInstance>& instances) {
  std::vector<std::size_t> labels;
  labels.reserve(instances.size());
  for (const auto& inst : instances) labels.push_back(inst.label);
  return labels;
}

void criterion_synthetic_calibration(const BlobExperiment& experiment) {
  BlobsConfig test;
  test.per_class = 1000;
  test.dimension = 8;
  test.separation = 4.0;
  test.seed = 202;
  const auto instances = make_gaussian_blobs(test);
  const auto verdicts = predict_batch(experiment.archive, instances);
  const CalibrationReport report = evaluate_estimator(
      make_eval_points(verdicts, labels_of(instances)), 2, 0.9, "p_lower");
  const double admitted_fraction = report.marginal.admitted_fraction(report.test_size);
  const bool pass = report.index_conditional_pass && admitted_fraction >= 0.25 &&
                    experiment.train_seconds < 600.0;
  std::ostringstream detail;
  detail << "index-conditional " << (report.index_conditional_pass ? "pass" : "fail")
         << ", admitted fraction " << admitted_fraction << " (>= 0.25), train time "
         << experiment.train_seconds << "s (< 600s)";
  criterion(6, "synthetic index-conditional calibration", pass, detail.str());
}

void criterion_ood_rejection(const BlobExperiment& experiment) {
  BlobsConfig shifted;
  shifted.per_class = 1000;
  shifted.dimension = 8;
  shifted.separation = 4.0;
  shifted.shift = 5.0;  // every mean translated by 5 sigma per coordinate
  shifted.seed = 303;
  const auto instances = make_gaussian_blobs(shifted);
  const auto verdicts = predict_batch(experiment.archive, instances);
  std::size_t admitted = 0;
  for (const auto& v : verdicts) admitted += v.admitted ? 1 : 0;
  const double fraction = static_cast<double>(admitted) / static_cast<double>(verdicts.size());
  std::ostringstream detail;
  detail << "admitted fraction " << fraction << " on the shifted set (<= 0.02)";
  criterion(7, "out-of-distribution rejection", fraction <= 0.02, detail.str());
}

void criterion_label_flip_audit(const BlobExperiment& experiment) {
  BlobsConfig flipped;
  flipped.per_class = 1000;
  flipped.dimension = 8;
  flipped.separation = 4.0;
  flipped.label_flip_rate = 0.05;
  flipped.seed = 404;
  const auto instances = make_gaussian_blobs(flipped);
  const auto verdicts = predict_batch(experiment.archive, instances);
  const auto suspects = suspect_annotation_report(verdicts, labels_of(instances));

  std::size_t flipped_total = 0;
  for (const auto& inst : instances) {
    if (inst.id.size() >= 5 && inst.id.substr(inst.id.size() - 5) == "-flip") ++flipped_total;
  }
  const double base_rate =
      static_cast<double>(flipped_total) / static_cast<double>(instances.size());
  const std::size_t decile = std::max<std::size_t>(1, suspects.size() / 10);
  std::size_t flipped_in_decile = 0;
  for (std::size_t i = 0; i < decile; ++i) {
    const std::string& id = suspects[i].id;
    if (id.size() >= 5 && id.substr(id.size() - 5) == "-flip") ++flipped_in_decile;
  }
  const double decile_rate =
      suspects.empty() ? 0.0 : static_cast<double>(flipped_in_decile) / static_cast<double>(decile);
  const bool pass = !suspects.empty() && decile_rate >= 3.0 * base_rate;
  std::ostringstream detail;
  detail << "top-decile flip rate " << decile_rate << " vs base rate " << base_rate << " ("
         << suspects.size() << " suspects)";
  criterion(10, "label-flip audit via the suspect report", pass, detail.str());
}

// --- 8: DKW / Cauchy arithmetic ---------------------------------------------------

void criterion_dkw_cauchy() {
  const double dkw = dkw_epsilon(200.0, 0.95);
  const double cauchy = cauchy_inverse_cdf(1.004, 7.9e-05, 0.95);
  const bool pass = std::fabs(dkw - 0.09603) < 1e-5 && std::fabs(cauchy - 1.004499) < 1e-6;
  std::ostringstream detail;
  detail << "dkw_epsilon(200, 0.95) = " << dkw << ", cauchy_inverse_cdf(1.004, 7.9e-05, 0.95) = "
         << std::setprecision(10) << cauchy;
  criterion(8, "DKW and Cauchy arithmetic", pass, detail.str());
}

// --- 9: conformal sanity --------------------------------------------------------

void criterion_conformal() {
  // High top-1 accuracy (margin 8 over unit noise) keeps every calibration
  // score in the rank-1 regime: the APS and RAPS thresholds then coincide
  // and the RAPS penalty can only shrink the sets.
  std::mt19937_64 rng(1009);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> ydist(0, 3);
  auto draw = [&](std::vector<Vec>& probs, std::vector<std::size_t>& labels, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t y = ydist(rng);
      Vec z(4);
      for (std::size_t c = 0; c < 4; ++c) z[c] = (c == y ? 8.0 : 0.0) + noise(rng);
      probs.push_back(softmax(z));
      labels.push_back(y);
    }
  };
  std::vector<Vec> cal_probs, test_probs;
  std::vector<std::size_t> cal_labels, test_labels;
  draw(cal_probs, cal_labels, 2000);
  draw(test_probs, test_labels, 2000);

  ConformalConfig config;
  config.alpha = 0.05;
  config.raps_lambda = 0.05;
  config.raps_k_reg = 1;
  const ConformalCalibration aps =
      conformal_calibrate(cal_probs, cal_labels, ConformalVariant::kAps, config);
  const ConformalCalibration raps =
      conformal_calibrate(cal_probs, cal_labels, ConformalVariant::kRaps, config);
  std::size_t covered = 0;
  std::size_t oversize = 0;
  for (std::size_t i = 0; i < test_probs.size(); ++i) {
    const auto aps_set = conformal_predict_set(test_probs[i], aps, ConformalVariant::kAps, config);
    const auto raps_set =
        conformal_predict_set(test_probs[i], raps, ConformalVariant::kRaps, config);
    if (std::find(aps_set.begin(), aps_set.end(), test_labels[i]) != aps_set.end()) ++covered;
    if (raps_set.size() > aps_set.size()) ++oversize;
  }
  const double coverage = static_cast<double>(covered) / static_cast<double>(test_probs.size());
  const bool pass = coverage >= 1.0 - config.alpha - 0.03 && oversize == 0;
  std::ostringstream detail;
  detail << "APS coverage " << coverage << " (>= " << 1.0 - config.alpha - 0.03 << "), "
         << oversize << " RAPS sets larger than APS";
  criterion(9, "conformal coverage and RAPS set sizes", pass, detail.str());
}

// --- 11: toy sdm network ---------------------------------------------------------

void criterion_toy_network() {
  const auto start = std::chrono::steady_clock::now();

  ToyCorpusConfig corpus_config;
  corpus_config.docs_per_cell = 150;  // 600 documents, well under 2000
  corpus_config.seed = 23;
  ToyLmConfig lm_config;  // |V| = 64 <= 128
  lm_config.seed = 3;
  const auto docs = make_toy_corpus(corpus_config, lm_config);

  ToyLM lm = make_toy_lm(lm_config);
  ReferencePretrainConfig pretrain;
  pretrain_reference(lm, docs, pretrain);

  const auto features = force_decoded_features(lm, docs);
  const DatasetBundle bundle = split_train_calibration(features, 2, /*seed=*/29);
  TrainingRunConfig verifier_config;
  verifier_config.iterations = 3;
  verifier_config.max_epochs = 8;
  verifier_config.filters = 24;
  verifier_config.alpha_prime = 0.9;
  verifier_config.seed = 29;
  verifier_config.numerics.adaptor_lr = 5e-3;
  const EstimatorArchive verifier = train_full(bundle, verifier_config);

  std::map<std::string, const GenAiInstance*> by_id;
  for (const auto& doc : docs) by_id[doc.id] = &doc;
  std::vector<GenAiInstance> train_docs, calib_docs;
  for (const auto& id : verifier.adaptor.train_ids) train_docs.push_back(*by_id.at(id));
  for (const auto& id : verifier.adaptor.calibration_ids) calib_docs.push_back(*by_id.at(id));

  const Matrix w_ref_before = lm.w_ref;
  const Matrix w_neg_before = lm.w_neg;
  TrainingSchedule schedule;  // 5 epochs, beta 0 -> 0.1
  const SdmNetworkTrainResult result =
      sdm_network_train(lm, train_docs, calib_docs, verifier, schedule);

  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const std::size_t selected_count =
      result.epoch_admitted_counts[result.selected_epoch - 1];
  const bool weights_frozen =
      result.lm.w_ref == w_ref_before && result.lm.w_neg == w_neg_before;
  const bool pass = seconds < 900.0 && selected_count >= result.initial_admitted_count &&
                    weights_frozen && result.epoch_admitted_counts.size() == 5;
  std::ostringstream detail;
  detail << "selected epoch " << result.selected_epoch << " admitted " << selected_count
         << " >= initial " << result.initial_admitted_count << ", frozen weights "
         << (weights_frozen ? "unchanged" : "CHANGED") << ", " << seconds << "s (< 900s)";
  criterion(11, "toy sdm-network training", pass, detail.str());
}

// --- 12: determinism ---------------------------------------------------------------

void criterion_determinism() {
  namespace fs = std::filesystem;
  bool pass = true;
  std::ostringstream detail;

  // Training and the full archive byte stream.
  BlobsConfig pool;
  pool.per_class = 150;
  pool.dimension = 4;
  pool.separation = 5.0;
  pool.seed = 31;
  const DatasetBundle bundle = blobs_bundle(pool);
  TrainingRunConfig config;
  config.iterations = 2;
  config.max_epochs = 3;
  config.filters = 8;
  config.alpha_prime = 0.9;
  config.seed = 11;
  config.numerics.adaptor_lr = 5e-3;
  const EstimatorArchive a = train_full(bundle, config);
  const EstimatorArchive b = train_full(bundle, config);
  const bool train_deterministic = detail::encode_adaptor(a) == detail::encode_adaptor(b) &&
                                   detail::encode_support(a) == detail::encode_support(b) &&
                                   detail::encode_tables(a) == detail::encode_tables(b) &&
                                   detail::encode_thresholds(a) == detail::encode_thresholds(b) &&
                                   detail::encode_stats(a) == detail::encode_stats(b);
  pass = pass && train_deterministic;
  detail << "train " << (train_deterministic ? "ok" : "DIFFERS");

  // Prediction across repeated calls and across an archive round trip.
  BlobsConfig probe;
  probe.per_class = 50;
  probe.dimension = 4;
  probe.separation = 5.0;
  probe.seed = 33;
  const auto instances = make_gaussian_blobs(probe);
  const auto dir = fs::temp_directory_path() / "sdm_acceptance_archive";
  fs::remove_all(dir);
  save_archive(a, dir.string());
  const EstimatorArchive loaded = load_archive(dir.string());
  bool predict_deterministic = true;
  for (const auto& inst : instances) {
    const Verdict va = predict(a, inst.embedding, inst.id);
    const Verdict vb = predict(a, inst.embedding, inst.id);
    const Verdict vc = predict(loaded, inst.embedding, inst.id);
    predict_deterministic = predict_deterministic && va.admitted == vb.admitted &&
                            va.admitted == vc.admitted && va.q == vc.q &&
                            va.soft_qbin == vc.soft_qbin &&
                            va.p_lower_adjusted == vc.p_lower_adjusted;
  }
  pass = pass && predict_deterministic;
  detail << ", predict " << (predict_deterministic ? "ok" : "DIFFERS");

  // Save twice: block files byte-identical (manifest differs only in its
  // timestamp field).
  const auto dir2 = fs::temp_directory_path() / "sdm_acceptance_archive2";
  fs::remove_all(dir2);
  save_archive(loaded, dir2.string());
  bool files_identical = true;
  for (const char* name : {"adaptor.bin", "support.bin", "tables.bin", "thresholds.bin",
                           "stats.bin", "baseline_cache.bin"}) {
    files_identical =
        files_identical && detail::read_file_bytes(dir / name) == detail::read_file_bytes(dir2 / name);
  }
  pass = pass && files_identical;
  detail << ", archive files " << (files_identical ? "ok" : "DIFFER");
  fs::remove_all(dir);
  fs::remove_all(dir2);

  // Toy network training.
  ToyCorpusConfig corpus_config;
  corpus_config.docs_per_cell = 20;
  corpus_config.seed = 5;
  ToyLmConfig lm_config;
  lm_config.seed = 3;
  const auto docs = make_toy_corpus(corpus_config, lm_config);
  auto run_net = [&docs, &lm_config]() {
    ToyLM lm = make_toy_lm(lm_config);
    ReferencePretrainConfig pretrain;
    pretrain.epochs = 30;
    pretrain_reference(lm, docs, pretrain);
    const auto features = force_decoded_features(lm, docs);
    const DatasetBundle net_bundle = split_train_calibration(features, 2, 1);
    TrainingRunConfig vconfig;
    vconfig.iterations = 1;
    vconfig.max_epochs = 3;
    vconfig.filters = 8;
    vconfig.alpha_prime = 0.9;
    vconfig.numerics.adaptor_lr = 5e-3;
    const EstimatorArchive verifier = train_full(net_bundle, vconfig);
    std::map<std::string, const GenAiInstance*> by_id;
    for (const auto& doc : docs) by_id[doc.id] = &doc;
    std::vector<GenAiInstance> train_docs, calib_docs;
    for (const auto& id : verifier.adaptor.train_ids) train_docs.push_back(*by_id.at(id));
    for (const auto& id : verifier.adaptor.calibration_ids) calib_docs.push_back(*by_id.at(id));
    TrainingSchedule schedule;
    schedule.epochs = 2;
    return sdm_network_train(lm, train_docs, calib_docs, verifier, schedule).lm.w_pos.data;
  };
  const bool net_deterministic = run_net() == run_net();
  pass = pass && net_deterministic;
  detail << ", net-train " << (net_deterministic ? "ok" : "DIFFERS");

  criterion(12, "byte-reproducible pipeline stages", pass, detail.str());
}

}  // namespace

int main() {
  criterion_softmax_recovery();
  criterion_argmax_preservation();
  criterion_gradients();
  criterion_qd_oracle();
  criterion_ecdf_conformance();
  const BlobExperiment experiment = run_blob_experiment();
  criterion_synthetic_calibration(experiment);
  criterion_ood_rejection(experiment);
  criterion_dkw_cauchy();
  criterion_conformal();
  criterion_label_flip_audit(experiment);
  criterion_toy_network();
  criterion_determinism();

  if (g_failures > 0) {
    std::printf("%d criterion(s) failed\n", g_failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
