#pragma once

#include <array>
#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "sdm/core.hpp"

namespace sdm {

// One token of a structured LLM response with its top-1 log-probability.
struct ResponseToken {
  std::string token;
  double logprob = 0.0;  // <= 0
};

// Half-open [begin, end) span into the token array.
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

// A structured multiple-choice response from a black-box LLM API, parsed
// from JSON lines. `refusal` marks records where a required key was missing
// or unparseable; such records map to the all-zeros feature vector.
struct LlmResponseRecord {
  std::string id;
  std::optional<std::size_t> label;  // ground-truth answer index, when known
  std::string answer_letter;
  double confidence = 0.0;  // verbalized confidence in [0,1]
  std::vector<ResponseToken> tokens;
  TokenSpan answer_span;
  TokenSpan confidence_span;
  TokenSpan explanation_span;
  bool refusal = false;
};

inline const std::array<std::string, 4>& default_choice_letters() {
  static const std::array<std::string, 4> letters = {"A", "B", "C", "D"};
  return letters;
}

struct LlmFeatureResult {
  Vec features;  // length 7, every entry in [0,1]
  bool refusal_warning = false;
};

// The 7-value feature construction: mean exponentiated log-probability over
// the tokens of each of the three JSON values (answer letter, verbalized
// confidence, explanation), then a soft one-hot over the 4 answer letters
// with the verbalized confidence as the activated value. Refusals and
// unparseable answer letters map to the all-zeros vector.
inline LlmFeatureResult build_llm_features(
    const LlmResponseRecord& record,
    const std::array<std::string, 4>& letters = default_choice_letters()) {
  LlmFeatureResult out;
  out.features.assign(7, 0.0);
  if (record.refusal) {
    out.refusal_warning = true;
    return out;
  }
  auto letter_index = [&letters](const std::string& s) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < letters.size(); ++i) {
      if (s == letters[i]) return i;
    }
    return std::nullopt;
  };
  const auto idx = letter_index(record.answer_letter);
  if (!idx) {
    out.refusal_warning = true;  // unparseable answer letter: treated as refusal
    return out;
  }

  auto mean_prob = [&record](const TokenSpan& span) {
    if (span.end <= span.begin || span.end > record.tokens.size()) {
      throw Error("build_llm_features: token span out of range");
    }
    double acc = 0.0;
    for (std::size_t i = span.begin; i < span.end; ++i) {
      const double lp = record.tokens[i].logprob;
      if (lp > 0.0) throw Error("build_llm_features: positive log-probability");
      acc += std::exp(lp);
    }
    return acc / static_cast<double>(span.end - span.begin);
  };
  out.features[0] = mean_prob(record.answer_span);
  out.features[1] = mean_prob(record.confidence_span);
  out.features[2] = mean_prob(record.explanation_span);
  if (record.confidence < 0.0 || record.confidence > 1.0) {
    throw Error("build_llm_features: confidence outside [0,1]");
  }
  out.features[3 + *idx] = record.confidence;
  return out;
}

namespace detail {
inline TokenSpan parse_span(const nlohmann::json& spans, const char* key, std::size_t line_no) {
  if (!spans.contains(key)) {
    throw Error("missing token span '" + std::string(key) + "' at line " +
                std::to_string(line_no));
  }
  const auto& arr = spans.at(key);
  if (!arr.is_array() || arr.size() != 2) {
    throw Error("token span '" + std::string(key) + "' must be [begin, end) at line " +
                std::to_string(line_no));
  }
  TokenSpan span;
  span.begin = arr[0].get<std::size_t>();
  span.end = arr[1].get<std::size_t>();
  return span;
}
}  // namespace detail

// Parses an LLM-response JSON-lines file. Each record follows the response
// schema (answer_letter, confidence_in_answer_letter,
// short_explanation_for_answer_confidence) plus:
//   "token_logprobs": [{"token": str, "logprob": float}, ...]
//   "value_token_spans": {"<key>": [begin, end), ...}
//   optional "id" and "label".
// Records missing a required response key are kept as refusals.
inline std::vector<LlmResponseRecord> load_llm_responses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open LLM response file: " + path);
  std::vector<LlmResponseRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed response at line " + std::to_string(line_no) + ": " + e.what());
    }
    LlmResponseRecord rec;
    rec.id = obj.value("id", "line-" + std::to_string(line_no));
    if (obj.contains("label") && !obj["label"].is_null()) {
      rec.label = obj["label"].get<std::size_t>();
    }
    const bool has_required = obj.contains("answer_letter") &&
                              obj.contains("confidence_in_answer_letter") &&
                              obj.contains("short_explanation_for_answer_confidence");
    if (!has_required) {
      rec.refusal = true;
      records.push_back(std::move(rec));
      continue;
    }
    try {
      rec.answer_letter = obj.at("answer_letter").get<std::string>();
      rec.confidence = obj.at("confidence_in_answer_letter").get<double>();
      for (const auto& tok : obj.at("token_logprobs")) {
        rec.tokens.push_back(
            {tok.at("token").get<std::string>(), tok.at("logprob").get<double>()});
      }
      const auto& spans = obj.at("value_token_spans");
      rec.answer_span = detail::parse_span(spans, "answer_letter", line_no);
      rec.confidence_span = detail::parse_span(spans, "confidence_in_answer_letter", line_no);
      rec.explanation_span =
          detail::parse_span(spans, "short_explanation_for_answer_confidence", line_no);
    } catch (const nlohmann::json::exception& e) {
      throw Error("malformed response at line " + std::to_string(line_no) + ": " + e.what());
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace sdm
