#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>

#include "sdm/core.hpp"

namespace sdm {

struct LabeledInstance {
  std::string id;
  Vec embedding;
  std::size_t label = 0;
  std::optional<std::size_t> task_label;
  std::optional<std::string> text;  // provenance only
};

// A validated dataset with its split assignment. Train and calibration are
// expected to be class-balanced within `balance_tolerance`; test carries no
// balance requirement.
struct DatasetBundle {
  std::size_t class_count = 0;
  std::size_t dimension = 0;
  std::vector<LabeledInstance> train;
  std::vector<LabeledInstance> calibration;
  std::vector<LabeledInstance> test;
};

inline std::map<std::size_t, std::size_t> class_counts(const std::vector<LabeledInstance>& split) {
  std::map<std::size_t, std::size_t> counts;
  for (const auto& inst : split) counts[inst.label] += 1;
  return counts;
}

// max class count - min class count over all classes present; classes with
// zero members count as zero.
inline std::size_t balance_spread(const std::vector<LabeledInstance>& split,
                                  std::size_t class_count) {
  if (split.empty() || class_count == 0) return 0;
  std::vector<std::size_t> counts(class_count, 0);
  for (const auto& inst : split) counts[inst.label] += 1;
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
  return *hi - *lo;
}

inline void check_balance(const std::vector<LabeledInstance>& split, std::size_t class_count,
                          std::size_t tolerance, const std::string& split_name) {
  const std::size_t spread = balance_spread(split, class_count);
  if (spread > tolerance) {
    std::ostringstream msg;
    msg << split_name << " split imbalanced: class count spread " << spread
        << " exceeds tolerance " << tolerance;
    throw Error(msg.str());
  }
}

inline void check_no_duplicate_ids(const std::vector<LabeledInstance>& split,
                                   const std::string& split_name) {
  std::set<std::string> seen;
  for (const auto& inst : split) {
    if (!seen.insert(inst.id).second) {
      throw Error("duplicate id '" + inst.id + "' in " + split_name + " split");
    }
  }
}

// Parses one JSON-lines dataset file:
//   {"id": str, "label": int, "task_label": int?, "embedding": [float...], "text": str?}
// The embedding dimension is fixed by the first record. Errors report the
// offending line number.
inline std::vector<LabeledInstance> load_instances(const std::string& path,
                                                   std::size_t expected_class_count,
                                                   std::size_t* dimension_out = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset file: " + path);
  std::vector<LabeledInstance> records;
  std::string line;
  std::size_t line_no = 0;
  std::size_t dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed record at line " + std::to_string(line_no) + ": " + e.what());
    }
    LabeledInstance inst;
    try {
      inst.id = obj.at("id").get<std::string>();
      const long long label = obj.at("label").get<long long>();
      if (label < 0 || static_cast<std::size_t>(label) >= expected_class_count) {
        throw Error("label " + std::to_string(label) + " out of range for C=" +
                    std::to_string(expected_class_count) + " at line " + std::to_string(line_no));
      }
      inst.label = static_cast<std::size_t>(label);
      inst.embedding = obj.at("embedding").get<Vec>();
      if (obj.contains("task_label") && !obj["task_label"].is_null()) {
        const long long task = obj["task_label"].get<long long>();
        if (task < 0) throw Error("negative task_label at line " + std::to_string(line_no));
        inst.task_label = static_cast<std::size_t>(task);
      }
      if (obj.contains("text") && !obj["text"].is_null()) {
        inst.text = obj["text"].get<std::string>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed record at line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!all_finite(inst.embedding)) {
      throw Error("non-finite embedding entry at line " + std::to_string(line_no));
    }
    if (records.empty()) {
      dim = inst.embedding.size();
      if (dim == 0) throw Error("empty embedding at line " + std::to_string(line_no));
    } else if (inst.embedding.size() != dim) {
      throw Error("embedding length " + std::to_string(inst.embedding.size()) +
                  " does not match dimension " + std::to_string(dim) + " at line " +
                  std::to_string(line_no));
    }
    records.push_back(std::move(inst));
  }
  if (records.empty()) throw Error("dataset file has no records: " + path);
  if (dimension_out) *dimension_out = dim;
  return records;
}

inline nlohmann::json instance_to_json(const LabeledInstance& inst) {
  nlohmann::json obj;
  obj["id"] = inst.id;
  obj["label"] = inst.label;
  if (inst.task_label) obj["task_label"] = *inst.task_label;
  obj["embedding"] = inst.embedding;
  if (inst.text) obj["text"] = *inst.text;
  return obj;
}

inline void save_instances(const std::string& path, const std::vector<LabeledInstance>& records) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write dataset file: " + path);
  for (const auto& inst : records) out << instance_to_json(inst).dump() << "\n";
}

// Deterministic stratified half split of a record pool into train and
// calibration. Per-class record order is shuffled with the seed; odd class
// counts place the extra record in train.
inline DatasetBundle split_train_calibration(std::vector<LabeledInstance> pool,
                                             std::size_t class_count, std::uint64_t seed,
                                             std::size_t balance_tolerance = 0) {
  DatasetBundle bundle;
  bundle.class_count = class_count;
  bundle.dimension = pool.empty() ? 0 : pool.front().embedding.size();
  std::vector<std::vector<std::size_t>> by_class(class_count);
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i].label].push_back(i);
  auto rng = make_rng(seed, /*stream=*/1);
  for (auto& idxs : by_class) std::shuffle(idxs.begin(), idxs.end(), rng);
  for (const auto& idxs : by_class) {
    const std::size_t train_n = (idxs.size() + 1) / 2;
    for (std::size_t i = 0; i < idxs.size(); ++i) {
      auto& dst = i < train_n ? bundle.train : bundle.calibration;
      dst.push_back(pool[idxs[i]]);
    }
  }
  check_no_duplicate_ids(bundle.train, "train");
  check_no_duplicate_ids(bundle.calibration, "calibration");
  check_balance(bundle.train, class_count, balance_tolerance, "train");
  check_balance(bundle.calibration, class_count, balance_tolerance, "calibration");
  return bundle;
}

// Loads a dataset file and produces the seeded train/calibration split with
// the balance check applied.
inline DatasetBundle load_and_validate(const std::string& path, std::size_t expected_class_count,
                                       std::uint64_t seed = 0, std::size_t balance_tolerance = 0) {
  auto records = load_instances(path, expected_class_count);
  check_no_duplicate_ids(records, "input");
  return split_train_calibration(std::move(records), expected_class_count, seed,
                                 balance_tolerance);
}

// Loads a dataset file as a test-only bundle (no balance requirement).
inline DatasetBundle load_test_bundle(const std::string& path, std::size_t expected_class_count) {
  DatasetBundle bundle;
  bundle.class_count = expected_class_count;
  bundle.test = load_instances(path, expected_class_count, &bundle.dimension);
  check_no_duplicate_ids(bundle.test, "test");
  return bundle;
}

}  // namespace sdm
