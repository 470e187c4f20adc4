#pragma once

#include <filesystem>
#include <iostream>

#include "sdm/archive_io.hpp"
#include "sdm/baselines.hpp"
#include "sdm/report.hpp"
#include "sdm/toy_lm.hpp"
#include "sdm/training.hpp"

namespace sdm {

// The stable verdict JSON-lines record.
inline nlohmann::json verdict_to_json(const Verdict& verdict) {
  nlohmann::json obj;
  obj["id"] = verdict.id;
  obj["prediction"] = verdict.prediction;
  obj["admitted"] = verdict.admitted;
  if (verdict.p_lower_adjusted) {
    obj["p_lower"] = *verdict.p_lower_adjusted;
  } else {
    obj["p_lower"] = nullptr;
  }
  obj["q"] = verdict.q;
  obj["d"] = verdict.d;
  obj["soft_qbin"] = verdict.soft_qbin;
  obj["hard_qbin"] = verdict.hard_qbin;
  obj["exemplar_ids"] = verdict.exemplar_ids;
  return obj;
}

struct TrainPipelineOptions {
  std::string data_path;
  std::string out_dir;
  std::size_t class_count = 2;
  double alpha_prime = 0.95;
  std::size_t iterations = 10;
  std::size_t max_epochs = 50;
  std::size_t filters = 1000;
  double adaptor_lr = 1e-5;
  std::size_t batch_size = 50;
  std::size_t balance_tolerance = 0;
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;
};

inline std::string file_fingerprint(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  return crc32_hex(bytes) + "-" + std::to_string(bytes.size());
}

inline EstimatorArchive run_train_pipeline(const TrainPipelineOptions& options) {
  if (!(options.alpha_prime > 1.0 / static_cast<double>(options.class_count) &&
        options.alpha_prime <= 1.0)) {
    throw Error("alpha' must be in (1/C, 1]");
  }
  const DatasetBundle bundle = load_and_validate(options.data_path, options.class_count,
                                                 options.seed, options.balance_tolerance);
  if (options.log) {
    auto pool = bundle.train;
    pool.insert(pool.end(), bundle.calibration.begin(), bundle.calibration.end());
    *options.log << "[data] per-class counts:";
    for (const auto& [label, count] : class_counts(pool)) {
      *options.log << " " << label << ":" << count;
    }
    *options.log << " (train " << bundle.train.size() << ", calibration "
                 << bundle.calibration.size() << ")\n";
  }
  TrainingRunConfig config;
  config.iterations = options.iterations;
  config.max_epochs = options.max_epochs;
  config.filters = options.filters;
  config.alpha_prime = options.alpha_prime;
  config.seed = options.seed;
  config.balance_tolerance = options.balance_tolerance;
  config.numerics.adaptor_lr = options.adaptor_lr;
  config.numerics.batch_size = options.batch_size;
  config.rescaler.seed = options.seed;
  config.log = options.log;
  EstimatorArchive archive = train_full(bundle, config);
  archive.dataset_fingerprint = file_fingerprint(options.data_path);
  if (!options.out_dir.empty()) save_archive(archive, options.out_dir);
  return archive;
}

inline void run_predict_pipeline(const std::string& archive_dir, const std::string& data_path,
                                 const std::string& out_path) {
  const EstimatorArchive archive = load_archive(archive_dir);
  const DatasetBundle bundle = load_test_bundle(data_path, archive.config.class_count);
  const std::vector<Verdict> verdicts = predict_batch(archive, bundle.test);
  std::ofstream out(out_path);
  if (!out) throw Error("cannot write verdicts file: " + out_path);
  for (const auto& v : verdicts) out << verdict_to_json(v).dump() << "\n";
}

struct EvalPipelineResult {
  CalibrationReport report;
  std::vector<SuspectEntry> suspects;
};

inline EvalPipelineResult run_eval_pipeline(const std::string& archive_dir,
                                            const std::string& data_path, bool with_suspects) {
  const EstimatorArchive archive = load_archive(archive_dir);
  const DatasetBundle bundle = load_test_bundle(data_path, archive.config.class_count);
  const std::vector<Verdict> verdicts = predict_batch(archive, bundle.test);
  std::vector<std::size_t> labels;
  labels.reserve(bundle.test.size());
  for (const auto& inst : bundle.test) labels.push_back(inst.label);
  EvalPipelineResult result;
  result.report = evaluate_estimator(make_eval_points(verdicts, labels),
                                     archive.config.class_count, archive.alpha_prime, "p_lower");
  if (with_suspects) result.suspects = suspect_annotation_report(verdicts, labels);
  return result;
}

// Baseline comparisons over the archive's cached calibration logits and the
// adaptor's logits for the test data.
struct BaselineReports {
  std::vector<CalibrationReport> reports;  // one per requested method
};

inline BaselineReports run_baselines_pipeline(const std::string& archive_dir,
                                              const std::string& data_path,
                                              const std::vector<std::string>& methods,
                                              const ConformalConfig& conformal_config = {}) {
  const EstimatorArchive archive = load_archive(archive_dir);
  const DatasetBundle bundle = load_test_bundle(data_path, archive.config.class_count);
  const double alpha_prime = archive.alpha_prime;

  std::vector<Vec> calibration_logits(archive.calibration_logits.rows);
  for (std::size_t i = 0; i < calibration_logits.size(); ++i) {
    calibration_logits[i].assign(
        archive.calibration_logits.row(i),
        archive.calibration_logits.row(i) + archive.calibration_logits.cols);
  }

  std::vector<Vec> test_logits(bundle.test.size());
  std::vector<std::size_t> labels(bundle.test.size());
  parallel_for(bundle.test.size(), [&](std::size_t i) {
    const AdaptorOutput out =
        adaptor_forward(archive.adaptor.weights, bundle.test[i].embedding,
                        archive.adaptor.input_mean, archive.adaptor.input_std);
    test_logits[i] = out.z_prime;
    labels[i] = bundle.test[i].label;
  });

  BaselineReports result;
  for (const std::string& method : methods) {
    std::vector<EvalPoint> points(bundle.test.size());
    if (method == "softmax" || method == "temp") {
      double tau = 1.0;
      if (method == "temp") {
        tau = fit_temperature(calibration_logits, archive.calibration_labels).tau;
      }
      for (std::size_t i = 0; i < bundle.test.size(); ++i) {
        const ThresholdVerdict v =
            baseline_threshold_predict(softmax(test_logits[i], tau), alpha_prime);
        points[i] = {labels[i], v.prediction, v.admitted};
      }
    } else if (method == "aps" || method == "raps") {
      const ConformalVariant variant =
          method == "aps" ? ConformalVariant::kAps : ConformalVariant::kRaps;
      std::vector<Vec> calibration_probs(calibration_logits.size());
      for (std::size_t i = 0; i < calibration_logits.size(); ++i) {
        calibration_probs[i] = softmax(calibration_logits[i]);
      }
      const ConformalCalibration calibration = conformal_calibrate(
          calibration_probs, archive.calibration_labels, variant, conformal_config);
      for (std::size_t i = 0; i < bundle.test.size(); ++i) {
        const Vec probs = softmax(test_logits[i]);
        const auto set = conformal_predict_set(probs, calibration, variant, conformal_config);
        points[i] = {labels[i], argmax_index(probs), set.size() == 1};
      }
    } else {
      throw Error("unknown baseline method: " + method);
    }
    result.reports.push_back(
        evaluate_estimator(points, archive.config.class_count, alpha_prime, method));
  }
  return result;
}

// Re-derives the region thresholds and offsets from the stored per-iteration
// statistics at a new alpha', then rewrites the archive in place.
inline EstimatorArchive run_retune_pipeline(const std::string& archive_dir, double new_alpha) {
  EstimatorArchive archive = load_archive(archive_dir);
  const double inv_c = 1.0 / static_cast<double>(archive.config.class_count);
  if (!(new_alpha > inv_c && new_alpha <= 1.0)) throw Error("alpha' must be in (1/C, 1]");
  archive.alpha_prime = new_alpha;
  for (auto& stats : archive.iteration_stats) {
    stats.min_valid_qbin =
        find_min_valid_qbin(stats.records, archive.config.class_count, new_alpha).min_valid_qbin;
  }
  archive.thresholds = RegionThresholds{};
  archive.thresholds = robust_thresholds_and_offsets(
      archive.iteration_stats, archive.winning_iteration, archive.config.class_count, new_alpha);
  save_archive(archive, archive_dir);
  return archive;
}

// ---------------------------------------------------------------------------
// Toy sdm-network pipeline: verifier construction by force-decoding, the
// fine-tuning loop, and the LM directory format.
// ---------------------------------------------------------------------------

inline nlohmann::json toy_lm_config_to_json(const ToyLmConfig& config) {
  nlohmann::json obj;
  obj["vocab_size"] = config.vocab_size;
  obj["embed_dim"] = config.embed_dim;
  obj["hidden_dim"] = config.hidden_dim;
  obj["end_token"] = config.end_token;
  obj["task_token_offset"] = config.task_token_offset;
  obj["task_count"] = config.task_count;
  obj["length_cap"] = config.length_cap;
  obj["seed"] = config.seed;
  return obj;
}

inline ToyLmConfig toy_lm_config_from_json(const nlohmann::json& obj) {
  ToyLmConfig config;
  config.vocab_size = obj.at("vocab_size").get<std::size_t>();
  config.embed_dim = obj.at("embed_dim").get<std::size_t>();
  config.hidden_dim = obj.at("hidden_dim").get<std::size_t>();
  config.end_token = obj.at("end_token").get<std::size_t>();
  config.task_token_offset = obj.at("task_token_offset").get<std::size_t>();
  config.task_count = obj.at("task_count").get<std::size_t>();
  config.length_cap = obj.at("length_cap").get<std::size_t>();
  config.seed = obj.at("seed").get<std::uint64_t>();
  return config;
}

inline void save_toy_lm(const ToyLM& lm, const std::string& dir_path) {
  namespace fs = std::filesystem;
  const fs::path dir(dir_path);
  fs::create_directories(dir);
  blockio::Writer w;
  detail::write_matrix(w, "embedding", lm.embedding);
  detail::write_matrix(w, "hidden_map", lm.hidden_map);
  w.f64("hidden_bias", lm.hidden_bias);
  detail::write_matrix(w, "w_ref", lm.w_ref);
  detail::write_matrix(w, "w_neg", lm.w_neg);
  detail::write_matrix(w, "w_pos", lm.w_pos);
  const std::string bytes = w.bytes();
  detail::write_file_bytes(dir / "lm.bin", bytes);
  nlohmann::json manifest;
  manifest["format_version"] = kArchiveFormatVersion;
  manifest["config"] = toy_lm_config_to_json(lm.config);
  manifest["files"]["lm.bin"] = {{"bytes", bytes.size()}, {"crc32", crc32_hex(bytes)}};
  detail::write_file_bytes(dir / "lm_manifest.json", manifest.dump(2) + "\n");
}

inline ToyLM load_toy_lm(const std::string& dir_path) {
  namespace fs = std::filesystem;
  const fs::path dir(dir_path);
  const fs::path manifest_path = dir / "lm_manifest.json";
  if (!fs::exists(manifest_path)) throw Error("lm manifest missing: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_file_bytes(manifest_path));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("lm manifest malformed: ") + e.what());
  }
  if (manifest.at("format_version").get<std::uint32_t>() != kArchiveFormatVersion) {
    throw Error("unsupported lm format version");
  }
  const std::string bytes = detail::read_file_bytes(dir / "lm.bin");
  const auto& meta = manifest.at("files").at("lm.bin");
  if (bytes.size() != meta.at("bytes").get<std::size_t>() ||
      crc32_hex(bytes) != meta.at("crc32").get<std::string>()) {
    throw Error("lm checksum mismatch");
  }
  ToyLM lm;
  lm.config = toy_lm_config_from_json(manifest.at("config"));
  blockio::Reader r(bytes);
  lm.embedding = detail::read_matrix(r, "embedding");
  lm.hidden_map = detail::read_matrix(r, "hidden_map");
  lm.hidden_bias = r.f64("hidden_bias");
  lm.w_ref = detail::read_matrix(r, "w_ref");
  lm.w_neg = detail::read_matrix(r, "w_neg");
  lm.w_pos = detail::read_matrix(r, "w_pos");
  return lm;
}

// Force-decoded verification features over gold token sequences.
inline std::vector<LabeledInstance> force_decoded_features(const ToyLM& lm,
                                                           const std::vector<GenAiInstance>& docs) {
  std::vector<LabeledInstance> features(docs.size());
  parallel_for(docs.size(), [&](std::size_t i) {
    features[i].id = docs[i].id;
    features[i].label = docs[i].verified;
    features[i].task_label = docs[i].task_label;
    features[i].embedding = verification_features(lm, docs[i].tokens, docs[i].marker);
  });
  return features;
}

struct NetTrainOptions {
  std::string corpus_path;
  std::string out_dir;
  ToyLmConfig lm;
  TrainingSchedule schedule;
  ReferencePretrainConfig pretrain;
  // Verifier training configuration (desk-scale defaults).
  std::size_t verifier_iterations = 3;
  std::size_t verifier_epochs = 10;
  std::size_t verifier_filters = 24;
  double verifier_lr = 5e-3;
  double alpha_prime = 0.95;
  std::size_t balance_tolerance = 0;
  std::uint64_t seed = 0;
  std::ostream* log = nullptr;
};

struct NetTrainResult {
  SdmNetworkTrainResult training;
  EstimatorArchive verifier;
};

inline NetTrainResult run_net_train_pipeline(const NetTrainOptions& options) {
  std::vector<GenAiInstance> docs = load_toy_corpus(options.corpus_path, options.lm.vocab_size);

  ToyLmConfig lm_config = options.lm;
  if (lm_config.task_count == 0) {
    std::size_t max_task = 0;
    bool any = false;
    for (const auto& doc : docs) {
      if (doc.task_label) {
        any = true;
        max_task = std::max(max_task, *doc.task_label);
      }
    }
    lm_config.task_count = any ? max_task + 1 : 0;
  }
  lm_config.seed = options.seed;
  ToyLM lm = make_toy_lm(lm_config);
  if (options.pretrain.epochs > 0) pretrain_reference(lm, docs, options.pretrain, options.log);

  // Verifier over force-decoded features; its winning splits become the
  // frozen document splits for the next-token loop.
  const std::vector<LabeledInstance> features = force_decoded_features(lm, docs);
  const DatasetBundle bundle = split_train_calibration(features, 2, options.seed,
                                                       options.balance_tolerance);
  TrainingRunConfig verifier_config;
  verifier_config.iterations = options.verifier_iterations;
  verifier_config.max_epochs = options.verifier_epochs;
  verifier_config.filters = options.verifier_filters;
  verifier_config.alpha_prime = options.alpha_prime;
  verifier_config.seed = options.seed;
  verifier_config.numerics.adaptor_lr = options.verifier_lr;
  verifier_config.log = options.log;
  EstimatorArchive verifier = train_full(bundle, verifier_config);
  verifier.dataset_fingerprint = file_fingerprint(options.corpus_path);

  std::map<std::string, const GenAiInstance*> by_id;
  for (const auto& doc : docs) by_id[doc.id] = &doc;
  std::vector<GenAiInstance> train_docs, calib_docs;
  for (const auto& id : verifier.adaptor.train_ids) train_docs.push_back(*by_id.at(id));
  for (const auto& id : verifier.adaptor.calibration_ids) calib_docs.push_back(*by_id.at(id));

  NetTrainResult result{sdm_network_train(lm, std::move(train_docs), std::move(calib_docs),
                                          verifier, options.schedule, options.log),
                        std::move(verifier)};
  if (!options.out_dir.empty()) {
    save_toy_lm(result.training.lm, options.out_dir);
    save_archive(result.verifier,
                 (std::filesystem::path(options.out_dir) / "verifier").string());
  }
  return result;
}

struct GenerationRecord {
  std::string id;
  VerifiedGeneration generation;
};

inline std::vector<GenerationRecord> run_net_generate_pipeline(const std::string& lm_dir,
                                                               const std::string& prompt_path) {
  const ToyLM lm = load_toy_lm(lm_dir);
  const EstimatorArchive verifier =
      load_archive((std::filesystem::path(lm_dir) / "verifier").string());
  std::ifstream in(prompt_path);
  if (!in) throw Error("cannot open prompt file: " + prompt_path);
  std::vector<GenerationRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed prompt at line " + std::to_string(line_no) + ": " + e.what());
    }
    GenerationRecord rec;
    rec.id = obj.value("id", "prompt-" + std::to_string(line_no));
    const auto prompt = obj.at("tokens").get<std::vector<std::size_t>>();
    rec.generation = generate_verified(lm, verifier, prompt);
    rec.generation.verdict.id = rec.id;
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace sdm
