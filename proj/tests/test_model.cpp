#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cola/model.hpp"
#include "cola/optim.hpp"
#include "test_support.hpp"

using namespace cola;

namespace {

ModelConfig small_config(int n = 5, int d = 8, int layers = 2, int proj = 1) {
  ModelConfig c;
  c.num_locations = n;
  c.hidden_dim = d;
  c.num_heads = 2;
  c.num_layers = layers;
  c.proj_layers = proj;
  c.max_seq_len = 8;
  c.dropout = 0.0;
  return c;
}

/// Perturbs every parameter so identity initializations do not hide bugs.
void randomize(HalfOpenTransformer& m, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& e : m.parameters().entries())
    for (double& v : e.tensor.data()) v += dist(rng);
}

std::vector<double> logits_of(const HalfOpenTransformer& m, const std::vector<int>& tokens) {
  Tape tape(false);
  Tensor out = m.forward(tape, tokens);
  return {out.data().begin(), out.data().end()};
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c = small_config();
  c.num_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.proj_layers = 4;
  EXPECT_THROW(c.validate(), ConfigError);
  c.proj_layers = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = small_config();
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Parameters, PartitionAndTags) {
  for (int proj : {1, 2, 3}) {
    HalfOpenTransformer m(small_config(5, 8, 2, proj), 1);
    const auto& p = m.parameters();
    auto shared = p.names(Group::Shared), priv = p.names(Group::Private);
    std::set<std::string> s(shared.begin(), shared.end()), q(priv.begin(), priv.end());
    for (const auto& n : s) EXPECT_EQ(q.count(n), 0u) << n;
    EXPECT_EQ(s.size() + q.size(), p.size());
    for (const auto& e : p.entries()) {
      const bool want_shared = e.name.find("attn.w_q") != std::string::npos ||
                               e.name.find("attn.w_k") != std::string::npos ||
                               e.name.find("proj_shared") != std::string::npos;
      EXPECT_EQ(e.group == Group::Shared, want_shared) << e.name;
    }
  }
  ModelConfig full = small_config();
  full.half_open = false;
  HalfOpenTransformer m(full, 1);
  EXPECT_TRUE(m.parameters().names(Group::Private).empty());
}

TEST(Parameters, InitializationScheme) {
  HalfOpenTransformer m(small_config(40, 32), 9);
  const auto& p = m.parameters();
  const auto& w = p.at("layer0.mlp.w1");
  double mean = 0.0, sq = 0.0;
  for (double v : w.data()) { mean += v; sq += v * v; }
  mean /= static_cast<double>(w.size());
  const double sd = std::sqrt(sq / static_cast<double>(w.size()) - mean * mean);
  EXPECT_NEAR(mean, 0.0, 0.003);
  EXPECT_NEAR(sd, 0.02, 0.002);
  for (double v : p.at("layer0.mlp.b1").data()) EXPECT_EQ(v, 0.0);
  for (double v : p.at("layer1.norm2.gain").data()) EXPECT_EQ(v, 1.0);
  for (double v : p.at("layer1.norm2.bias").data()) EXPECT_EQ(v, 0.0);
}

TEST(Embed, Examples) {
  HalfOpenTransformer m(small_config(), 3);
  for (double& v : m.parameters().at("embedding.position").data()) v = 0.0;
  Tape tape(false);
  std::vector<int> ids{2, 2};
  Tensor h = m.embed(tape, ids);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(h.data()[c], h.data()[8 + c]);
  Tensor empty = m.embed(tape, std::vector<int>{});
  EXPECT_EQ(empty.size(), 0u);
  EXPECT_THROW(m.embed(tape, std::vector<int>{6}), IndexError);
  EXPECT_THROW(m.embed(tape, std::vector<int>(9, 0)), ConfigError);
}

TEST(Embed, GradientMatchesDenseOracle) {
  // Dense oracle: the gradient of sum(w * embed(ids)) w.r.t. the table is
  // the sum of w rows scattered to their ids.
  HalfOpenTransformer m(small_config(), 3);
  std::vector<int> ids{0, 3, 3, 1};
  std::mt19937_64 rng(4);
  Tensor w = testsupport::random_tensor({4, 8}, rng, 1.0, false);
  Tape tape;
  tape.backward(sum(tape, mul(tape, m.embed(tape, ids), w)));
  const auto& table = m.parameters().at("embedding.location");
  std::vector<double> dense(table.size(), 0.0);
  for (std::size_t t = 0; t < ids.size(); ++t)
    for (std::size_t c = 0; c < 8; ++c) dense[static_cast<std::size_t>(ids[t]) * 8 + c] += w.data()[t * 8 + c];
  for (std::size_t i = 0; i < dense.size(); ++i) EXPECT_NEAR(table.grad()[i], dense[i], 1e-15);
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_EQ(table.grad()[2 * 8 + c], 0.0);
    EXPECT_EQ(table.grad()[4 * 8 + c], 0.0);
  }
}

TEST(Project, IdentityAndShapes) {
  std::mt19937_64 rng(1);
  for (int proj : {1, 2, 3}) {
    HalfOpenTransformer m(small_config(5, 8, 1, proj), 2);
    Tape tape(false);
    Tensor h = testsupport::random_tensor({3, 8}, rng, 1.0, false);
    auto [hp, hs] = m.project(tape, h, 0);
    EXPECT_EQ(hp.shape(), (Shape{3, 8}));
    EXPECT_EQ(hs.shape(), (Shape{3, 8}));
    if (proj == 1) {
      for (std::size_t i = 0; i < h.size(); ++i) {
        EXPECT_EQ(hp.data()[i], h.data()[i]);
        EXPECT_EQ(hs.data()[i], h.data()[i]);
      }
    }
  }
}

TEST(Project, GradientsReachBothChains) {
  HalfOpenTransformer m(small_config(5, 8, 1, 2), 2);
  randomize(m, 5);
  Batch b = make_batch({{5, 0, 1, 2, 3}});
  Tape tape;
  tape.backward(m.internal_loss(tape, b));
  for (const char* name : {"layer0.proj_shared.0.weight", "layer0.proj_private.0.weight",
                           "layer0.proj_shared.1.weight", "layer0.proj_private.1.weight"}) {
    const auto& t = m.parameters().at(name);
    ASSERT_TRUE(t.has_grad()) << name;
    double norm = 0.0;
    for (double g : t.grad()) norm += std::abs(g);
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Attention, SingleTokenReturnsValueThroughOutput) {
  HalfOpenTransformer m(small_config(), 4);
  randomize(m, 2);
  std::mt19937_64 rng(3);
  Tensor hs = testsupport::random_tensor({1, 8}, rng, 1.0, false);
  Tensor hp = testsupport::random_tensor({1, 8}, rng, 1.0, false);
  Tape tape(false);
  std::vector<std::size_t> lengths{1};
  std::vector<AttentionWeights> weights;
  ForwardOptions opts;
  opts.attention = &weights;
  Tensor z = m.attention(tape, hs, hp, 0, {1, 1, 2}, lengths, opts);
  Tensor expect = matmul(tape, matmul(tape, hp, m.parameters().at("layer0.attn.w_v")),
                         m.parameters().at("layer0.attn.w_o"));
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(z.data()[i], expect.data()[i], 1e-14);
  ASSERT_EQ(weights.size(), 1u);
  EXPECT_EQ(weights[0].at(0, 0, 0, 0), 1.0);
  EXPECT_EQ(weights[0].at(0, 1, 0, 0), 1.0);
}

TEST(Forward, ShapeAndCausality) {
  HalfOpenTransformer m(small_config(), 6);
  randomize(m, 7);
  Tape tape(false);
  Batch b = make_batch({{5, 1, 2, 3}, {5, 4}});
  Tensor out = m.forward(tape, b);
  EXPECT_EQ(out.shape(), (Shape{2, 4, 5}));
  // perturbing token t' never changes logits at t < t'
  for (std::size_t tp = 1; tp < 4; ++tp) {
    std::vector<int> base{5, 1, 2, 3};
    auto ref = logits_of(m, base);
    base[tp] = (base[tp] + 2) % 5;
    auto changed = logits_of(m, base);
    for (std::size_t t = 0; t < tp; ++t)
      for (std::size_t n = 0; n < 5; ++n) EXPECT_EQ(ref[t * 5 + n], changed[t * 5 + n]);
    bool differs = false;
    for (std::size_t n = 0; n < 5; ++n) differs |= ref[tp * 5 + n] != changed[tp * 5 + n];
    EXPECT_TRUE(differs);
  }
  // 3-token end-to-end: position 1 is blind to token 3's embedding row.
  // The row also scores location 2 at the output, so that column moves.
  std::vector<int> three{0, 1, 2};
  auto ref = logits_of(m, three);
  auto& table = m.parameters().at("embedding.location");
  for (std::size_t c = 0; c < 8; ++c) table.data()[2 * 8 + c] += 0.7;
  auto after = logits_of(m, three);
  for (std::size_t n = 0; n < 5; ++n) {
    if (n != 2) {
      EXPECT_EQ(ref[n], after[n]);
    }
  }
}

TEST(Forward, PaddingDoesNotLeak) {
  HalfOpenTransformer m(small_config(), 6);
  randomize(m, 8);
  Tape tape(false);
  Tensor alone = m.forward(tape, std::vector<int>{5, 4});
  Tensor padded = m.forward(tape, make_batch({{5, 1, 2, 3}, {5, 4}}));
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t n = 0; n < 5; ++n)
      EXPECT_NEAR(padded.data()[(4 + t) * 5 + n], alone.data()[t * 5 + n], 1e-12);
}

TEST(Forward, AttentionRowsAreDistributions) {
  HalfOpenTransformer m(small_config(), 6);
  randomize(m, 9);
  Tape tape(false);
  std::vector<AttentionWeights> weights;
  ForwardOptions opts;
  opts.attention = &weights;
  m.forward(tape, make_batch({{5, 1, 2, 3, 0, 0, 4}}), opts);
  ASSERT_EQ(weights.size(), 2u);
  for (const auto& w : weights)
    for (std::size_t h = 0; h < w.heads; ++h)
      for (std::size_t t = 0; t < w.length; ++t) {
        double total = 0.0;
        for (std::size_t s = 0; s < w.length; ++s) {
          const double a = w.at(0, h, t, s);
          EXPECT_GE(a, 0.0);
          if (s > t) {
            EXPECT_EQ(a, 0.0);
          }
          total += a;
        }
        EXPECT_NEAR(total, 1.0, 1e-9);
      }
}

TEST(Forward, ZeroWeightsGiveUniformSoftmax) {
  HalfOpenTransformer m(small_config(), 6);
  m.parameters().set_all(Group::Private);
  for (auto& e : m.parameters().entries())
    for (double& v : e.tensor.data()) v = 0.0;
  Tape tape(false);
  Tensor out = m.forward(tape, std::vector<int>{5, 0, 3});
  Tensor p = softmax(tape, out, 2);
  for (double v : p.data()) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(Forward, WeightTying) {
  HalfOpenTransformer m(small_config(), 6);
  randomize(m, 4);
  EXPECT_EQ(m.output_weight().id(), m.parameters().at("embedding.location").id());
  std::vector<int> toks{5, 1};
  auto before = logits_of(m, toks);
  // location 3 never appears in the input, so only the output side sees it
  for (std::size_t c = 0; c < 8; ++c) m.parameters().at("embedding.location").data()[3 * 8 + c] *= 2.0;
  auto after = logits_of(m, toks);
  for (std::size_t t = 0; t < 2; ++t) {
    EXPECT_NE(before[t * 5 + 3], after[t * 5 + 3]);
    EXPECT_EQ(before[t * 5 + 0], after[t * 5 + 0]);
  }
}

TEST(InternalLoss, Examples) {
  HalfOpenTransformer m(small_config(16), 6);
  Tape tape(false);
  EXPECT_THROW(m.internal_loss(tape, make_batch({{3}})), ArgumentError);
  EXPECT_THROW(m.internal_loss(tape, make_batch({})), ArgumentError);
  for (auto& e : m.parameters().entries())
    for (double& v : e.tensor.data()) v = 0.0;
  EXPECT_NEAR(m.internal_loss(tape, make_batch({{16, 1, 2}, {16, 4}})).item(), std::log(16.0), 1e-12);
  EXPECT_NEAR(std::log(16.0), 2.7726, 1e-4);
}

TEST(InternalLoss, MatchesScalarLoopOracle) {
  HalfOpenTransformer m(small_config(), 11);
  randomize(m, 12);
  Batch b = make_batch({{5, 1, 2, 3}, {5, 4, 0}});
  Tape tape(false);
  const double loss = m.internal_loss(tape, b).item();
  double total = 0.0;
  std::size_t count = 0;
  for (const std::vector<int>& seq : {std::vector<int>{5, 1, 2, 3}, std::vector<int>{5, 4, 0}}) {
    auto lg = logits_of(m, seq);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      double mx = -1e300;
      for (std::size_t n = 0; n < 5; ++n) mx = std::max(mx, lg[t * 5 + n]);
      double z = 0.0;
      for (std::size_t n = 0; n < 5; ++n) z += std::exp(lg[t * 5 + n] - mx);
      total += -(lg[t * 5 + static_cast<std::size_t>(seq[t + 1])] - mx - std::log(z));
      ++count;
    }
  }
  EXPECT_EQ(count, HalfOpenTransformer::prediction_count(b));
  EXPECT_NEAR(loss, total / static_cast<double>(count), 1e-12);
}

TEST(Model, EndToEndGradient) {
  HalfOpenTransformer m(small_config(5, 8, 2, 2), 21);
  randomize(m, 22);
  Batch b = make_batch({{5, 1, 2, 3}, {5, 4, 0}});
  std::vector<Tensor> params = m.parameters().tensors();
  auto f = [&](Tape& t, const std::vector<Tensor>&) { return m.internal_loss(t, b); };
  EXPECT_LT(testsupport::max_gradient_error(f, params), 1e-3);
}

TEST(Model, MemorizesAlternatingCorpus) {
  ModelConfig c = small_config(2, 16, 2, 1);
  c.max_seq_len = 12;
  HalfOpenTransformer m(c, 5);
  std::vector<std::vector<int>> seqs;
  for (int s = 0; s < 4; ++s) {
    std::vector<int> seq{2};
    for (int t = 0; t < 10; ++t) seq.push_back((t + s) % 2);
    seqs.push_back(seq);
  }
  // The first step after the begin token is ambiguous across sequences, so
  // the perfectly predictable part is every later step.
  Batch b = make_batch(seqs);
  auto opt = Optimizer::adam(1e-2);
  auto params = m.parameters().tensors();
  for (int step = 0; step < 200; ++step) {
    Tape tape;
    tape.backward(m.internal_loss(tape, b));
    opt.step(params);
  }
  double later = 0.0;
  int count = 0;
  for (const auto& seq : seqs) {
    auto lg = logits_of(m, seq);
    for (std::size_t t = 1; t + 1 < seq.size(); ++t) {
      const double a = lg[t * 2], bb = lg[t * 2 + 1];
      const double mx = std::max(a, bb);
      const double lse = mx + std::log(std::exp(a - mx) + std::exp(bb - mx));
      later += lse - lg[t * 2 + static_cast<std::size_t>(seq[t + 1])];
      ++count;
    }
  }
  EXPECT_LT(later / count, 0.1);
}

TEST(Model, DropoutOnlyInTraining) {
  ModelConfig c = small_config();
  c.dropout = 0.5;
  HalfOpenTransformer m(c, 3);
  randomize(m, 1);
  Batch b = make_batch({{5, 1, 2, 3}});
  Tape t1(false), t2(false);
  EXPECT_EQ(m.forward(t1, b).data()[3], m.forward(t2, b).data()[3]);
  ForwardOptions train;
  train.training = true;
  EXPECT_THROW(m.forward(t1, b, train), ArgumentError);
  Rng rng(4);
  train.rng = &rng;
  Tensor a = m.forward(t1, b, train), z = m.forward(t2, b);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) differs |= a.data()[i] != z.data()[i];
  EXPECT_TRUE(differs);
}

TEST(Model, SharedInitIndependentOfVocabulary) {
  HalfOpenTransformer a(small_config(5), 77), b(small_config(40), 77);
  EXPECT_TRUE(bitwise_equal(a.parameters(), b.parameters(), Group::Shared));
}

TEST(Model, LoadParametersChecksNamesAndShapes) {
  HalfOpenTransformer a(small_config(5), 1), b(small_config(5), 2), c(small_config(6), 2);
  load_parameters(b, a.parameters());
  EXPECT_TRUE(bitwise_equal(a.parameters(), b.parameters()));
  EXPECT_THROW(load_parameters(c, a.parameters()), Error);
}

TEST(Model, CloneOwnsItsStorage) {
  HalfOpenTransformer m(small_config(), 3);
  HalfOpenTransformer alias = m;
  HalfOpenTransformer copy = m.clone();
  EXPECT_TRUE(bitwise_equal(copy.parameters(), m.parameters()));
  m.parameters().at("layer0.attn.w_q").data()[0] += 1.0;
  EXPECT_TRUE(bitwise_equal(alias.parameters(), m.parameters()));
  EXPECT_FALSE(bitwise_equal(copy.parameters(), m.parameters()));
  EXPECT_EQ(copy.parameters().names(Group::Shared), m.parameters().names(Group::Shared));
}
