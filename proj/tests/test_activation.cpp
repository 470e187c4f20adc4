#include <doctest.h>

#include <cmath>
#include <random>

#include "sdm/activation.hpp"

using namespace sdm;

TEST_CASE("softmax basics") {
  const Vec sym = softmax({0.0, 0.0});
  CHECK(sym[0] == doctest::Approx(0.5));
  CHECK(sym[1] == doctest::Approx(0.5));

  const Vec skew = softmax({1.0, 0.0});
  const double e = std::exp(1.0);
  CHECK(skew[0] == doctest::Approx(e / (e + 1.0)));
  CHECK(skew[1] == doctest::Approx(1.0 / (e + 1.0)));
  CHECK(skew[0] == doctest::Approx(0.7311).epsilon(1e-4));

  const Vec uniform = softmax({3.0, -1.0, 0.5, 2.0}, 0.0);
  for (const double p : uniform) CHECK(p == doctest::Approx(0.25));
}

TEST_CASE("sdm activation recovers softmax at q = e-2, d = 1") {
  const double q = std::exp(1.0) - 2.0;
  const Vec out = sdm_activation({{1.0, 0.0}, q, 1.0});
  const Vec ref = softmax({1.0, 0.0});
  CHECK(out[0] == doctest::Approx(ref[0]).epsilon(1e-9));
  CHECK(out[1] == doctest::Approx(ref[1]).epsilon(1e-9));
}

TEST_CASE("sdm activation: d = 0 gives the uniform distribution") {
  for (const double q : {0.0, 1.0, 17.0}) {
    const Vec out = sdm_activation({{2.0, -1.0, 0.3}, q, 0.0});
    for (const double p : out) CHECK(p == doctest::Approx(1.0 / 3.0));
  }
}

TEST_CASE("sdm activation: direct base-4 evaluation") {
  // q = 2, d = 1, z = [1, 0]: 4^1 / (4^1 + 4^0) = 0.8.
  const Vec out = sdm_activation({{1.0, 0.0}, 2.0, 1.0});
  CHECK(out[0] == doctest::Approx(0.8).epsilon(1e-9));
  CHECK(out[1] == doctest::Approx(0.2).epsilon(1e-9));
}

TEST_CASE("sdm activation properties over random draws") {
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> zdist(-5.0, 5.0);
  std::uniform_real_distribution<double> qdist(0.0, 100.0);
  std::uniform_real_distribution<double> ddist(1e-6, 1.0);
  std::uniform_int_distribution<std::size_t> cdist(2, 8);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t c = cdist(rng);
    Vec z(c);
    for (double& v : z) v = zdist(rng);
    const double q = qdist(rng);
    const double d = ddist(rng);
    const Vec out = sdm_activation({z, q, d});

    // Argmax preservation and normalization.
    CHECK(argmax_index(out) == argmax_index(z));
    double sum = 0.0;
    for (const double p : out) {
      CHECK(p > 0.0);
      sum += p;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));

    // exp of the log form agrees with the probability form.
    const Vec log_out = sdm_activation({z, q, d}, /*log_form=*/true);
    for (std::size_t i = 0; i < c; ++i) {
      const double prob_from_log = std::pow(2.0 + q, log_out[i]);
      CHECK(prob_from_log == doctest::Approx(out[i]).epsilon(1e-5));
    }

    // Sharpening: max probability is non-decreasing in q for d > 0.
    const Vec out_higher_q = sdm_activation({z, q + 10.0, d});
    CHECK(out_higher_q[argmax_index(z)] >= out[argmax_index(z)] - 1e-12);
  }
}

TEST_CASE("sdm activation: large q log/prob agreement") {
  Vec z = {0.4, -1.2, 2.2};
  for (const double q : {0.0, 1.0, 100.0, 1e4}) {
    const Vec prob = sdm_activation({z, q, 0.7});
    const Vec log_out = sdm_activation({z, q, 0.7}, /*log_form=*/true);
    for (std::size_t i = 0; i < z.size(); ++i) {
      CHECK(std::pow(2.0 + q, log_out[i]) == doctest::Approx(prob[i]).epsilon(1e-5));
    }
  }
}

TEST_CASE("sdm_nll") {
  const double q = std::exp(1.0) - 2.0;

  // Uniform output (d = 0) with C = 2: loss is ln 2.
  const Vec uniform_log = sdm_activation({{0.7, -0.3}, q, 0.0}, /*log_form=*/true);
  CHECK(sdm_nll(uniform_log, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-6));

  // Recovery: q = e-2, d = 1 equals the standard cross-entropy.
  const Vec z = {1.3, -0.2, 0.5};
  const Vec log_out = sdm_activation({z, q, 1.0}, /*log_form=*/true);
  const Vec probs = softmax(z);
  for (std::size_t y = 0; y < z.size(); ++y) {
    CHECK(sdm_nll(log_out, y) == doctest::Approx(-std::log(probs[y])).epsilon(1e-6));
  }

  // Perfect prediction limit: true-class probability -> 1 drives loss -> 0.
  const Vec sharp = sdm_activation({{30.0, 0.0}, 50.0, 1.0}, /*log_form=*/true);
  CHECK(sdm_nll(sharp, 0) == doctest::Approx(0.0).epsilon(1e-6));

  CHECK_THROWS_AS(sdm_nll(log_out, 7), Error);
}

TEST_CASE("sdm loss shift invariance") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    Vec z = {dist(rng), dist(rng), dist(rng), dist(rng)};
    Vec shifted = z;
    const double shift = dist(rng) * 10.0;
    for (double& v : shifted) v += shift;
    const Vec a = sdm_activation({z, 3.0, 0.8}, /*log_form=*/true);
    const Vec b = sdm_activation({shifted, 3.0, 0.8}, /*log_form=*/true);
    for (std::size_t i = 0; i < z.size(); ++i) {
      CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-6));
    }
  }
}
