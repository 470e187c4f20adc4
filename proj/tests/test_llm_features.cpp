#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "sdm/llm_features.hpp"

using namespace sdm;

namespace {

LlmResponseRecord make_record(const std::string& letter, double confidence,
                              const std::vector<double>& span_probs) {
  // One token per value span, chosen so the mean exponentiated logprob per
  // span equals span_probs.
  LlmResponseRecord rec;
  rec.answer_letter = letter;
  rec.confidence = confidence;
  for (const double p : span_probs) {
    rec.tokens.push_back({"t", std::log(p)});
  }
  rec.answer_span = {0, 1};
  rec.confidence_span = {1, 2};
  rec.explanation_span = {2, 3};
  return rec;
}

}  // namespace

TEST_CASE("build_llm_features: hand-applied construction") {
  const auto rec = make_record("A", 0.9, {0.8, 0.9, 0.7});
  const LlmFeatureResult out = build_llm_features(rec);
  REQUIRE(out.features.size() == 7);
  CHECK_FALSE(out.refusal_warning);
  CHECK(out.features[0] == doctest::Approx(0.8));
  CHECK(out.features[1] == doctest::Approx(0.9));
  CHECK(out.features[2] == doctest::Approx(0.7));
  CHECK(out.features[3] == doctest::Approx(0.9));
  CHECK(out.features[4] == 0.0);
  CHECK(out.features[5] == 0.0);
  CHECK(out.features[6] == 0.0);
}

TEST_CASE("build_llm_features: refusal maps to zeros") {
  LlmResponseRecord rec;
  rec.refusal = true;
  const LlmFeatureResult out = build_llm_features(rec);
  CHECK(out.refusal_warning);
  for (const double v : out.features) CHECK(v == 0.0);
}

TEST_CASE("build_llm_features: saturated probabilities, answer C") {
  const auto rec = make_record("C", 1.0, {1.0, 1.0, 1.0});
  const LlmFeatureResult out = build_llm_features(rec);
  CHECK(out.features == Vec{1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0});
}

TEST_CASE("build_llm_features: unparseable answer letter becomes a refusal") {
  const auto rec = make_record("Z", 0.5, {0.5, 0.5, 0.5});
  const LlmFeatureResult out = build_llm_features(rec);
  CHECK(out.refusal_warning);
  for (const double v : out.features) CHECK(v == 0.0);
}

TEST_CASE("build_llm_features: multi-token spans average in probability space") {
  LlmResponseRecord rec;
  rec.answer_letter = "B";
  rec.confidence = 0.75;
  rec.tokens = {{"B", std::log(0.9)},
                {"0", std::log(0.8)},
                {".", std::log(0.6)},
                {"ok", std::log(0.5)},
                {"!", std::log(0.7)}};
  rec.answer_span = {0, 1};
  rec.confidence_span = {1, 3};
  rec.explanation_span = {3, 5};
  const LlmFeatureResult out = build_llm_features(rec);
  CHECK(out.features[0] == doctest::Approx(0.9));
  CHECK(out.features[1] == doctest::Approx(0.7));
  CHECK(out.features[2] == doctest::Approx(0.6));
  CHECK(out.features[4] == doctest::Approx(0.75));
}

TEST_CASE("build_llm_features: every entry stays in [0,1]") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> pdist(0.01, 1.0);
  const std::array<std::string, 4> letters = {"A", "B", "C", "D"};
  for (int trial = 0; trial < 200; ++trial) {
    const auto rec = make_record(letters[trial % 4], pdist(rng),
                                 {pdist(rng), pdist(rng), pdist(rng)});
    const LlmFeatureResult out = build_llm_features(rec);
    REQUIRE(out.features.size() == 7);
    for (const double v : out.features) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("build_llm_features: positive log-probability rejected") {
  auto rec = make_record("A", 0.5, {0.5, 0.5, 0.5});
  rec.tokens[0].logprob = 0.25;
  CHECK_THROWS_AS(build_llm_features(rec), Error);
}

TEST_CASE("load_llm_responses: parses records and flags refusals") {
  const std::string path = "sdm_test_responses.jsonl";
  {
    std::ofstream out(path);
    out << R"({"id": "r1", "label": 0, "answer_letter": "A", "confidence_in_answer_letter": 0.9,)"
        << R"( "short_explanation_for_answer_confidence": "sure",)"
        << R"( "token_logprobs": [{"token": "A", "logprob": -0.1}, {"token": "0.9", "logprob": -0.2},)"
        << R"( {"token": "sure", "logprob": -0.3}],)"
        << R"( "value_token_spans": {"answer_letter": [0, 1], "confidence_in_answer_letter": [1, 2],)"
        << R"( "short_explanation_for_answer_confidence": [2, 3]}})" << "\n";
    out << R"({"id": "r2"})" << "\n";  // refusal: required keys missing
  }
  const auto records = load_llm_responses(path);
  std::remove(path.c_str());
  REQUIRE(records.size() == 2);
  CHECK_FALSE(records[0].refusal);
  CHECK(records[0].answer_letter == "A");
  CHECK(records[0].label == 0);
  CHECK(records[1].refusal);
  const auto f0 = build_llm_features(records[0]);
  CHECK(f0.features[0] == doctest::Approx(std::exp(-0.1)));
  const auto f1 = build_llm_features(records[1]);
  CHECK(f1.refusal_warning);
}
