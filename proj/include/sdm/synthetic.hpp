#pragma once

#include <string>

#include "sdm/core.hpp"
#include "sdm/dataset.hpp"
#include "sdm/toy_lm.hpp"

namespace sdm {

struct BlobsConfig {
  std::size_t per_class = 200;     // instances per class
  std::size_t dimension = 2;
  double separation = 4.0;         // distance between adjacent class means
  double noise_sigma = 1.0;
  std::size_t class_count = 2;
  double shift = 0.0;              // translation of every mean, for OOD sets
  double label_flip_rate = 0.0;    // fraction of labels flipped uniformly
  std::uint64_t seed = 0;
  std::string id_prefix = "blob";
};

// Isotropic Gaussian blobs with class means spread along the first axis.
// Flipped instances keep their true geometry; only the recorded label
// changes (ids of flipped points carry a "-flip" suffix for audits).
inline std::vector<LabeledInstance> make_gaussian_blobs(const BlobsConfig& config) {
  auto rng = make_rng(config.seed, /*stream=*/11);
  std::normal_distribution<double> noise(0.0, config.noise_sigma);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<LabeledInstance> out;
  for (std::size_t c = 0; c < config.class_count; ++c) {
    for (std::size_t i = 0; i < config.per_class; ++i) {
      LabeledInstance inst;
      inst.embedding.resize(config.dimension);
      for (std::size_t j = 0; j < config.dimension; ++j) {
        const double mean =
            j == 0 ? config.separation * static_cast<double>(c) + config.shift : config.shift;
        inst.embedding[j] = mean + noise(rng);
      }
      inst.label = c;
      inst.id = config.id_prefix + "-" + std::to_string(c) + "-" + std::to_string(i);
      if (config.label_flip_rate > 0.0 && u(rng) < config.label_flip_rate) {
        inst.label = (c + 1) % config.class_count;
        inst.id += "-flip";
      }
      out.push_back(std::move(inst));
    }
  }
  return out;
}

inline DatasetBundle blobs_bundle(const BlobsConfig& config, std::uint64_t split_seed = 0,
                                  std::size_t balance_tolerance = 0) {
  return split_train_calibration(make_gaussian_blobs(config), config.class_count, split_seed,
                                 balance_tolerance);
}

struct ToyCorpusConfig {
  std::size_t docs_per_cell = 100;  // documents per (task, y) cell
  std::size_t tasks = 2;
  std::uint64_t seed = 0;
  std::string id_prefix = "doc";
};

// A verifiable-vs-corrupted completion corpus over a small vocabulary.
//
// Token map (vocab must be at least 64): 0 is the end-of-unit token; task k
// is signalled by the indicator token 2+k; the prompt carries the cue token
// 10+k (twice, so it dominates the prefix mean) plus two filler tokens from
// 20..27; the verified completion for task k is the indicator followed by
// the fixed pattern 40+4k..42+4k and the end token; corrupted completions
// flip the indicator to another task and replace the pattern with tokens
// from 50..59.
inline std::vector<GenAiInstance> make_toy_corpus(const ToyCorpusConfig& config,
                                                  const ToyLmConfig& lm_config) {
  if (lm_config.vocab_size < 64) throw Error("make_toy_corpus: vocabulary too small");
  if (config.tasks < 1 || config.tasks > 4) throw Error("make_toy_corpus: tasks must be 1..4");
  auto rng = make_rng(config.seed, /*stream=*/31);
  std::uniform_int_distribution<std::size_t> filler(20, 27);
  std::uniform_int_distribution<std::size_t> garbage(50, 59);
  std::vector<GenAiInstance> docs;
  std::size_t counter = 0;
  for (std::size_t task = 0; task < config.tasks; ++task) {
    for (std::size_t y = 0; y < 2; ++y) {
      for (std::size_t i = 0; i < config.docs_per_cell; ++i) {
        GenAiInstance doc;
        doc.id = config.id_prefix + "-" + std::to_string(counter++);
        doc.tokens = {10 + task, 10 + task, filler(rng), filler(rng)};
        doc.marker = doc.tokens.size();
        doc.verified = y;
        doc.task_label = task;
        if (y == 1) {
          doc.tokens.push_back(lm_config.task_token_offset + task);
          for (std::size_t p = 0; p < 3; ++p) doc.tokens.push_back(40 + 4 * task + p);
        } else {
          doc.tokens.push_back(lm_config.task_token_offset + (task + 1) % config.tasks);
          for (std::size_t p = 0; p < 3; ++p) doc.tokens.push_back(garbage(rng));
        }
        doc.tokens.push_back(lm_config.end_token);
        docs.push_back(std::move(doc));
      }
    }
  }
  return docs;
}

}  // namespace sdm
