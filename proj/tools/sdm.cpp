// Command-line front end: training, prediction, evaluation, baseline
// comparisons, re-tuning, and the toy sdm-network loop.

#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sdm/llm_features.hpp"
#include "sdm/pipeline.hpp"
#include "sdm/synthetic.hpp"

namespace {

void echo_config(const std::string& command, const nlohmann::json& config) {
  nlohmann::json line;
  line["command"] = command;
  line["config"] = config;
  std::cerr << "[config] " << line.dump() << "\n";
}

int run(int argc, char** argv) {
  CLI::App app{"Similarity-Distance-Magnitude calibration toolkit"};
  app.require_subcommand(1);

  // --- train ---------------------------------------------------------------
  auto* train = app.add_subcommand("train", "Train an estimator archive");
  sdm::TrainPipelineOptions train_options;
  bool quiet = false;
  train->add_option("--data", train_options.data_path, "JSON-lines dataset")->required();
  train->add_option("--out", train_options.out_dir, "Archive output directory")->required();
  train->add_option("--classes", train_options.class_count, "Class count C");
  train->add_option("--alpha", train_options.alpha_prime, "Target alpha' in (1/C, 1]");
  train->add_option("--j", train_options.iterations, "Training iterations J");
  train->add_option("--m", train_options.filters, "Adaptor filter count M");
  train->add_option("--epochs", train_options.max_epochs, "Max epochs per iteration");
  train->add_option("--lr", train_options.adaptor_lr, "Adaptor learning rate");
  train->add_option("--batch", train_options.batch_size, "Mini-batch size");
  train->add_option("--balance-tolerance", train_options.balance_tolerance,
                    "Allowed class-count spread");
  train->add_option("--seed", train_options.seed, "Run seed");
  train->add_flag("--quiet", quiet, "Suppress progress lines");

  // --- predict -------------------------------------------------------------
  auto* predict_cmd = app.add_subcommand("predict", "Emit verdicts for a dataset");
  std::string archive_dir, data_path, out_path = "verdicts.jsonl";
  predict_cmd->add_option("--archive", archive_dir, "Archive directory")->required();
  predict_cmd->add_option("--data", data_path, "JSON-lines dataset")->required();
  predict_cmd->add_option("--out", out_path, "Verdicts output file");

  // --- eval ----------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate index-conditional calibration");
  std::string eval_archive, eval_data, eval_format = "text";
  bool suspects = false;
  eval_cmd->add_option("--archive", eval_archive, "Archive directory")->required();
  eval_cmd->add_option("--data", eval_data, "Labeled JSON-lines dataset")->required();
  eval_cmd->add_flag("--suspects", suspects, "Also emit the suspect-annotation report");
  eval_cmd->add_option("--format", eval_format, "Report format: text or json")
      ->check(CLI::IsMember({"text", "json"}));

  // --- baselines -------------------------------------------------------------
  auto* baselines_cmd = app.add_subcommand("baselines", "Baseline estimator comparisons");
  std::string base_archive, base_data, methods_csv = "softmax,temp,aps,raps";
  std::string base_format = "text";
  sdm::ConformalConfig conformal;
  baselines_cmd->add_option("--archive", base_archive, "Archive directory")->required();
  baselines_cmd->add_option("--data", base_data, "Labeled JSON-lines dataset")->required();
  baselines_cmd->add_option("--methods", methods_csv, "Comma list: softmax,temp,aps,raps");
  baselines_cmd->add_option("--conformal-alpha", conformal.alpha, "Conformal alpha");
  baselines_cmd->add_option("--raps-lambda", conformal.raps_lambda, "RAPS penalty weight");
  baselines_cmd->add_option("--raps-kreg", conformal.raps_k_reg, "RAPS penalty-free rank");
  baselines_cmd->add_option("--format", base_format, "Report format: text or json")
      ->check(CLI::IsMember({"text", "json"}));

  // --- retune ----------------------------------------------------------------
  auto* retune_cmd = app.add_subcommand("retune", "Re-derive thresholds at a new alpha'");
  std::string retune_archive;
  double retune_alpha = 0.95;
  retune_cmd->add_option("--archive", retune_archive, "Archive directory")->required();
  retune_cmd->add_option("--alpha", retune_alpha, "New alpha'")->required();

  // --- net-train --------------------------------------------------------------
  auto* net_train = app.add_subcommand("net-train", "Train the toy sdm network");
  sdm::NetTrainOptions net_options;
  net_train->add_option("--corpus", net_options.corpus_path, "Token corpus (JSON lines)")
      ->required();
  net_train->add_option("--out", net_options.out_dir, "LM output directory")->required();
  net_train->add_option("--epochs", net_options.schedule.epochs, "Fine-tuning epochs");
  net_train->add_option("--beta-min", net_options.schedule.beta_min, "Schedule start beta");
  net_train->add_option("--beta-max", net_options.schedule.beta_max, "Schedule end beta");
  net_train->add_option("--lr", net_options.schedule.lr, "w_pos learning rate");
  net_train->add_option("--batch-docs", net_options.schedule.batch_docs,
                        "Documents per mini-batch");
  net_train->add_option("--vocab", net_options.lm.vocab_size, "Vocabulary size |V|");
  net_train->add_option("--pretrain-epochs", net_options.pretrain.epochs,
                        "Reference pretraining epochs");
  net_train->add_option("--alpha", net_options.alpha_prime, "Verifier alpha'");
  net_train->add_option("--verifier-j", net_options.verifier_iterations,
                        "Verifier training iterations");
  net_train->add_option("--verifier-epochs", net_options.verifier_epochs,
                        "Verifier epochs per iteration");
  net_train->add_option("--verifier-m", net_options.verifier_filters,
                        "Verifier filter count");
  net_train->add_option("--seed", net_options.seed, "Run seed");
  bool net_quiet = false;
  net_train->add_flag("--quiet", net_quiet, "Suppress progress lines");

  // --- net-generate -------------------------------------------------------------
  auto* net_generate = app.add_subcommand("net-generate", "Generate and verify completions");
  std::string lm_dir, prompt_path, gen_out;
  net_generate->add_option("--lm", lm_dir, "LM directory from net-train")->required();
  net_generate->add_option("--prompt-file", prompt_path, "JSON-lines prompts")->required();
  net_generate->add_option("--out", gen_out, "Output file (default stdout)");

  // --- datagen (utility) ----------------------------------------------------
  auto* datagen = app.add_subcommand("datagen", "Generate synthetic demo data");
  std::string datagen_kind = "blobs", datagen_out;
  sdm::BlobsConfig blobs;
  sdm::ToyCorpusConfig corpus_config;
  datagen->add_option("--kind", datagen_kind, "blobs or corpus")
      ->check(CLI::IsMember({"blobs", "corpus"}));
  datagen->add_option("--out", datagen_out, "Output file")->required();
  datagen->add_option("--per-class", blobs.per_class, "Blob instances per class");
  datagen->add_option("--dim", blobs.dimension, "Blob dimension");
  datagen->add_option("--separation", blobs.separation, "Blob mean separation");
  datagen->add_option("--shift", blobs.shift, "Translate every mean (OOD sets)");
  datagen->add_option("--flip-rate", blobs.label_flip_rate, "Label flip fraction");
  datagen->add_option("--classes", blobs.class_count, "Blob class count");
  datagen->add_option("--docs-per-cell", corpus_config.docs_per_cell,
                      "Corpus documents per (task, y) cell");
  datagen->add_option("--tasks", corpus_config.tasks, "Corpus task count");
  std::uint64_t datagen_seed = 0;
  datagen->add_option("--seed", datagen_seed, "Generator seed");

  // --- llm-features (utility) -------------------------------------------------
  auto* llm_features = app.add_subcommand(
      "llm-features", "Convert structured LLM responses to a feature dataset");
  std::string responses_path, features_out;
  llm_features->add_option("--responses", responses_path, "LLM response JSON lines")
      ->required();
  llm_features->add_option("--out", features_out, "Dataset output file")->required();

  CLI11_PARSE(app, argc, argv);

  if (*train) {
    nlohmann::json config;
    config["data"] = train_options.data_path;
    config["out"] = train_options.out_dir;
    config["classes"] = train_options.class_count;
    config["alpha"] = train_options.alpha_prime;
    config["j"] = train_options.iterations;
    config["m"] = train_options.filters;
    config["epochs"] = train_options.max_epochs;
    config["lr"] = train_options.adaptor_lr;
    config["batch"] = train_options.batch_size;
    config["balance_tolerance"] = train_options.balance_tolerance;
    config["seed"] = train_options.seed;
    echo_config("train", config);
    train_options.log = quiet ? nullptr : &std::cerr;
    const sdm::EstimatorArchive archive = sdm::run_train_pipeline(train_options);
    nlohmann::json summary;
    summary["selection_metric"] = archive.adaptor.selection_metric;
    summary["winning_iteration"] = archive.winning_iteration;
    summary["admitting"] = archive.thresholds.admitting();
    if (archive.thresholds.admitting()) {
      summary["min_valid_qbin"] = *archive.thresholds.min_valid_qbin_star;
      summary["robust_min_valid_qbin"] = archive.thresholds.c_hat;
    }
    std::cout << summary.dump(2) << "\n";
    return 0;
  }
  if (*predict_cmd) {
    nlohmann::json config{{"archive", archive_dir}, {"data", data_path}, {"out", out_path}};
    echo_config("predict", config);
    sdm::run_predict_pipeline(archive_dir, data_path, out_path);
    return 0;
  }
  if (*eval_cmd) {
    nlohmann::json config{{"archive", eval_archive},
                          {"data", eval_data},
                          {"suspects", suspects},
                          {"format", eval_format}};
    echo_config("eval", config);
    const sdm::EvalPipelineResult result =
        sdm::run_eval_pipeline(eval_archive, eval_data, suspects);
    if (eval_format == "json") {
      nlohmann::json out = sdm::report_to_json(result.report);
      if (suspects) out["suspects"] = sdm::suspects_to_json(result.suspects);
      std::cout << out.dump(2) << "\n";
    } else {
      std::cout << sdm::report_to_text(result.report);
      if (suspects) {
        std::cout << "suspect annotations (admitted, label != prediction), descending p_lower:\n";
        for (const auto& s : result.suspects) {
          std::cout << "  " << s.id << " label=" << s.label << " prediction=" << s.prediction
                    << " p_lower=" << s.p_lower_adjusted << " q=" << s.q << "\n";
        }
      }
    }
    return 0;
  }
  if (*baselines_cmd) {
    nlohmann::json config{{"archive", base_archive},
                          {"data", base_data},
                          {"methods", methods_csv},
                          {"conformal_alpha", conformal.alpha},
                          {"raps_lambda", conformal.raps_lambda},
                          {"raps_kreg", conformal.raps_k_reg}};
    echo_config("baselines", config);
    std::vector<std::string> methods;
    std::stringstream ss(methods_csv);
    std::string method;
    while (std::getline(ss, method, ',')) {
      if (!method.empty()) methods.push_back(method);
    }
    const sdm::BaselineReports reports =
        sdm::run_baselines_pipeline(base_archive, base_data, methods, conformal);
    if (base_format == "json") {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& report : reports.reports) arr.push_back(sdm::report_to_json(report));
      std::cout << arr.dump(2) << "\n";
    } else {
      for (const auto& report : reports.reports) {
        std::cout << sdm::report_to_text(report) << "\n";
      }
    }
    return 0;
  }
  if (*retune_cmd) {
    nlohmann::json config{{"archive", retune_archive}, {"alpha", retune_alpha}};
    echo_config("retune", config);
    const sdm::EstimatorArchive archive =
        sdm::run_retune_pipeline(retune_archive, retune_alpha);
    nlohmann::json summary;
    summary["alpha"] = archive.alpha_prime;
    summary["admitting"] = archive.thresholds.admitting();
    if (archive.thresholds.admitting()) {
      summary["robust_min_valid_qbin"] = archive.thresholds.c_hat;
    }
    std::cout << summary.dump(2) << "\n";
    return 0;
  }
  if (*net_train) {
    nlohmann::json config;
    config["corpus"] = net_options.corpus_path;
    config["out"] = net_options.out_dir;
    config["epochs"] = net_options.schedule.epochs;
    config["beta_min"] = net_options.schedule.beta_min;
    config["beta_max"] = net_options.schedule.beta_max;
    config["lr"] = net_options.schedule.lr;
    config["vocab"] = net_options.lm.vocab_size;
    config["pretrain_epochs"] = net_options.pretrain.epochs;
    config["alpha"] = net_options.alpha_prime;
    config["seed"] = net_options.seed;
    echo_config("net-train", config);
    net_options.log = net_quiet ? nullptr : &std::cerr;
    const sdm::NetTrainResult result = sdm::run_net_train_pipeline(net_options);
    nlohmann::json summary;
    summary["selected_epoch"] = result.training.selected_epoch;
    summary["initial_admitted"] = result.training.initial_admitted_count;
    summary["epoch_admitted"] = result.training.epoch_admitted_counts;
    summary["length_cap"] = result.training.length_cap;
    summary["truncated_decodes"] = result.training.truncated_decodes;
    std::cout << summary.dump(2) << "\n";
    return 0;
  }
  if (*net_generate) {
    nlohmann::json config{{"lm", lm_dir}, {"prompt_file", prompt_path}};
    echo_config("net-generate", config);
    const auto records = sdm::run_net_generate_pipeline(lm_dir, prompt_path);
    std::ofstream file;
    std::ostream* out = &std::cout;
    if (!gen_out.empty()) {
      file.open(gen_out);
      if (!file) throw sdm::Error("cannot write output file: " + gen_out);
      out = &file;
    }
    for (const auto& rec : records) {
      nlohmann::json obj;
      obj["id"] = rec.id;
      obj["tokens"] = rec.generation.completion;
      obj["truncated"] = rec.generation.truncated;
      obj["verdict"] = sdm::verdict_to_json(rec.generation.verdict);
      *out << obj.dump() << "\n";
    }
    return 0;
  }
  if (*datagen) {
    nlohmann::json config{{"kind", datagen_kind}, {"out", datagen_out}, {"seed", datagen_seed}};
    echo_config("datagen", config);
    if (datagen_kind == "blobs") {
      blobs.seed = datagen_seed;
      sdm::save_instances(datagen_out, sdm::make_gaussian_blobs(blobs));
    } else {
      corpus_config.seed = datagen_seed;
      sdm::ToyLmConfig lm_config;
      sdm::save_toy_corpus(datagen_out, sdm::make_toy_corpus(corpus_config, lm_config));
    }
    return 0;
  }
  if (*llm_features) {
    nlohmann::json config{{"responses", responses_path}, {"out", features_out}};
    echo_config("llm-features", config);
    const auto records = sdm::load_llm_responses(responses_path);
    std::vector<sdm::LabeledInstance> instances;
    std::size_t refusals = 0;
    for (const auto& rec : records) {
      const sdm::LlmFeatureResult features = sdm::build_llm_features(rec);
      if (features.refusal_warning) ++refusals;
      sdm::LabeledInstance inst;
      inst.id = rec.id;
      inst.label = rec.label.value_or(0);
      inst.embedding = features.features;
      instances.push_back(std::move(inst));
    }
    sdm::save_instances(features_out, instances);
    if (refusals > 0) {
      std::cerr << "[warn] " << refusals << " refusal records mapped to zero vectors\n";
    }
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const sdm::Error& e) {
    nlohmann::json err{{"error", e.what()}};
    std::cerr << err.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    nlohmann::json err{{"error", e.what()}};
    std::cerr << err.dump() << "\n";
    return 1;
  }
}
