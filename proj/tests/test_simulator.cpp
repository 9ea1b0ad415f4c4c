#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "cola/simulator.hpp"
#include "test_support.hpp"

using namespace cola;

namespace {

ModelConfig sim_model(int n) {
  ModelConfig c;
  c.num_locations = n;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.num_layers = 1;
  c.max_seq_len = 24;
  return c;
}

LocationVocabulary line_vocab(int n) {
  LocationVocabulary v;
  for (int i = 0; i < n; ++i) {
    v.coords.push_back({35.0 + 0.01 * i, 139.0});
    v.keys.push_back("k" + std::to_string(i));
  }
  return v;
}

FrequencyProfile uniform_profile(int n) {
  FrequencyProfile p;
  p.pi.assign(static_cast<std::size_t>(n), 1.0 / n);
  return p;
}

/// Forces the output distribution: zero every weight, then give the tied
/// output rows a fixed direction so that logit_i = scale * bias_i.
void freeze_to_logits(HalfOpenTransformer& m, const std::vector<double>& logits) {
  for (auto& e : m.parameters().entries())
    for (double& v : e.tensor.data()) v = 0.0;
  // Final layer norm output equals its bias; use a unit bias on dim 0.
  const int layers = m.config().num_layers;
  auto& bias = m.parameters().at("layer" + std::to_string(layers - 1) + ".norm2.bias");
  bias.data()[0] = 1.0;
  auto& table = m.parameters().at("embedding.location");
  const std::size_t d = static_cast<std::size_t>(m.config().hidden_dim);
  for (std::size_t i = 0; i < logits.size(); ++i) table.data()[i * d] = logits[i];
}

}  // namespace

TEST(Adjust, Examples) {
  const std::vector<double> logits{0.3, -1.2, 2.0, 0.0};
  const std::vector<double> uniform(4, 0.25);
  for (double tau : {0.001, 0.5, 1.0, 3.0}) {
    const auto a = adjust(logits, uniform, tau);
    const auto s = softmax(logits);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], s[i], 1e-15);
  }
  const auto y = adjust(std::vector<double>{0.0, 0.0}, std::vector<double>{0.8, 0.2}, 1.0);
  EXPECT_NEAR(y[0], 0.2, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(Adjust, Errors) {
  EXPECT_THROW(adjust(std::vector<double>{0, 0}, std::vector<double>{1.0, 0.0}, 0.5), ProfileError);
  EXPECT_THROW(adjust(std::vector<double>{0, 0}, std::vector<double>{0.5, 0.5}, 0.0), ArgumentError);
  EXPECT_THROW(adjust(std::vector<double>{0, 0, 0}, std::vector<double>{0.5, 0.5}, 0.1), DimensionError);
  SimulationConfig c;
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.post_hoc = false;
  EXPECT_NO_THROW(c.validate());
}

TEST(Adjust, Properties) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g(0.0, 3.0);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(trial % 30);
    std::vector<double> logits(n), pi(n);
    for (auto& v : logits) v = g(rng);
    for (auto& v : pi) v = u(rng);
    const double z = std::accumulate(pi.begin(), pi.end(), 0.0);
    for (auto& v : pi) v /= z;
    const double tau = kTauGrid[trial % 6];
    const auto y = adjust(logits, pi, tau);
    EXPECT_NEAR(std::accumulate(y.begin(), y.end(), 0.0), 1.0, 1e-12);
    for (double v : y) EXPECT_GE(v, 0.0);
    // equal logits: the more frequent location gets less mass
    const std::vector<double> flat(n, 0.7);
    const auto f = adjust(flat, pi, tau);
    for (std::size_t i = 0; i + 1 < n; ++i) {
      if (pi[i] > pi[i + 1]) {
        EXPECT_LT(f[i], f[i + 1]);
      }
    }
    // argmax unchanged under uniform pi
    const std::vector<double> uni(n, 1.0 / static_cast<double>(n));
    const auto au = adjust(logits, uni, tau);
    EXPECT_EQ(std::max_element(au.begin(), au.end()) - au.begin(),
              std::max_element(logits.begin(), logits.end()) - logits.begin());
    // tau -> 0 recovers the softmax
    const auto small = adjust(logits, pi, 1e-6);
    const auto s = softmax(logits);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(small[i], s[i], 1e-4);
  }
}

TEST(AdjustmentRatio, PowerLawIdentity) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0.0, 2.0);
  std::vector<double> logits(50);
  for (auto& v : logits) v = g(rng);
  std::vector<std::pair<int, int>> all;
  for (int i = 1; i <= 50; ++i)
    for (int j = 1; j <= 50; ++j) all.emplace_back(i, j);
  const double err = adjustment_ratio_error(logits, 1.2, 1.0, 0.5, all);
  EXPECT_LT(err, 1e-10);
  EXPECT_EQ(adjustment_ratio_error(logits, 1.2, 1.0, 0.5, std::vector<std::pair<int, int>>{{7, 7}}), 0.0);
  EXPECT_EQ(adjustment_ratio_error(logits, 1.2, 2.0, 0.5, all), err);
  for (double gamma : {0.5, 1.0, 2.0})
    for (double tau : kTauGrid)
      for (std::size_t n : {2u, 10u, 200u}) {
        std::vector<double> lg(n);
        for (auto& v : lg) v = g(rng);
        std::vector<std::pair<int, int>> pairs;
        for (int k = 0; k < 100; ++k)
          pairs.emplace_back(1 + static_cast<int>(rng() % n), 1 + static_cast<int>(rng() % n));
        EXPECT_LT(adjustment_ratio_error(lg, gamma, 1.0, tau, pairs), 1e-10);
      }
  EXPECT_THROW(adjustment_ratio_error(logits, 1.2, 1.0, 0.5, std::vector<std::pair<int, int>>{{0, 3}}), IndexError);
}

TEST(SampleNext, NearDeterministicLimit) {
  HalfOpenTransformer m(sim_model(6), 1);
  freeze_to_logits(m, {0, 0, 1000, 0, 0, 0});
  FrequencyProfile pi = uniform_profile(6);
  pi.pi[2] = 0.2;
  pi.pi[0] = 2.0 / 6 - 0.2;
  SimulationConfig cfg;
  cfg.tau = 0.001;
  Rng rng(3);
  const std::vector<int> prefix{6};
  int hits = 0;
  for (int i = 0; i < 10000; ++i) hits += sample_next(m, prefix, pi, cfg, rng) == 2;
  EXPECT_GE(hits, 9990);
}

TEST(SampleNext, MultinomialConcentration) {
  const std::vector<double> logits{0.5, -0.3, 1.2, 0.0, -1.0};
  HalfOpenTransformer m(sim_model(5), 2);
  freeze_to_logits(m, logits);
  FrequencyProfile pi;
  pi.pi = {0.4, 0.1, 0.3, 0.15, 0.05};
  SimulationConfig cfg;
  cfg.tau = 0.5;
  const std::vector<int> prefix{5, 1, 3};
  const auto expected = next_distribution(m, prefix, pi, cfg);
  const auto direct = adjust(logits, pi.pi, 0.5);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(expected[i], direct[i], 1e-12);
  // sampling from the frozen distribution itself, 1e5 draws
  Rng rng(11);
  std::vector<int> counts(5, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(sample_categorical(expected, rng))];
  for (std::size_t i = 0; i < 5; ++i) {
    const double sigma = std::sqrt(draws * expected[i] * (1 - expected[i]));
    EXPECT_LE(std::abs(counts[i] - draws * expected[i]), 3 * sigma) << i;
  }
}

TEST(SampleNext, PrefixBounds) {
  HalfOpenTransformer m(sim_model(5), 2);
  SimulationConfig cfg;
  Rng rng(1);
  EXPECT_THROW(sample_next(m, std::vector<int>{}, uniform_profile(5), cfg, rng), ArgumentError);
  EXPECT_THROW(sample_next(m, std::vector<int>(25, 1), uniform_profile(5), cfg, rng), ArgumentError);
  EXPECT_THROW(sample_next(m, std::vector<int>{5}, uniform_profile(4), cfg, rng), ProfileError);
}

TEST(Simulate, ContractAndReproducibility) {
  HalfOpenTransformer m(sim_model(7), 4);
  SimulationConfig cfg;
  cfg.num_trajectories = 13;
  cfg.horizon = 9;
  cfg.seed = 5;
  const auto a = simulate(m, cfg, line_vocab(7), uniform_profile(7));
  const auto b = simulate(m, cfg, line_vocab(7), uniform_profile(7));
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 13u);
  EXPECT_EQ(visit_count(a), 13u * 9u);
  for (const auto& t : a) {
    for (std::size_t i = 1; i < t.visits.size(); ++i) EXPECT_EQ(t.visits[i].slot, t.visits[i - 1].slot + 1);
    for (const auto& v : t.visits) {
      EXPECT_GE(v.location, 0);
      EXPECT_LT(v.location, 7);
    }
  }
  cfg.seed = 6;
  EXPECT_NE(simulate(m, cfg, line_vocab(7), uniform_profile(7)), a);
  cfg.horizon = 25;
  EXPECT_THROW(simulate(m, cfg, line_vocab(7), uniform_profile(7)), ConfigError);
  cfg.horizon = 24;
  EXPECT_NO_THROW(simulate(m, cfg, line_vocab(7), uniform_profile(7)));
}

TEST(Simulate, ProvenanceWritten) {
  const auto dir = testsupport::temp_dir("simulate_prov");
  HalfOpenTransformer m(sim_model(4), 4);
  SimulationConfig cfg;
  cfg.num_trajectories = 2;
  cfg.horizon = 6;
  const auto sim = simulate(m, cfg, line_vocab(4), uniform_profile(4));
  save_simulation(dir / "sim.tsv", sim, {"abc", 0.1, true, 0, 2, 6});
  EXPECT_EQ(load_corpus(dir / "sim.tsv"), sim);
  std::ifstream prov(dir / "sim.tsv.provenance");
  std::string first;
  std::getline(prov, first);
  EXPECT_EQ(first, "checkpoint_hash\tabc");
}
