#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "cola/evaluation.hpp"
#include "test_support.hpp"

using namespace cola;

namespace {

Trajectory traj(std::vector<int> locs, std::int64_t day = 0) {
  Trajectory t;
  for (std::size_t i = 0; i < locs.size(); ++i) t.visits.push_back({day * 24 + static_cast<std::int64_t>(i), locs[i]});
  return t;
}

LocationVocabulary grid_vocab(int n) {
  LocationVocabulary v;
  for (int i = 0; i < n; ++i) {
    v.coords.push_back({35.0 + 0.02 * (i % 10), 139.0 + 0.02 * (i / 10)});
    v.keys.push_back("k" + std::to_string(i));
  }
  return v;
}

Corpus random_corpus(std::mt19937_64& rng, int n, int count) {
  Corpus c;
  for (int k = 0; k < count; ++k) {
    const int len = 6 + static_cast<int>(rng() % 19);
    std::vector<int> locs;
    for (int i = 0; i < len; ++i) {
      // sticky walk so that runs of equal ids occur
      if (!locs.empty() && rng() % 3 == 0) locs.push_back(locs.back());
      else locs.push_back(static_cast<int>(rng() % static_cast<unsigned>(n)));
    }
    c.push_back(traj(locs, k));
  }
  return c;
}

double jsd_brute(const std::vector<double>& p, const std::vector<double>& q) {
  double kl_pm = 0.0, kl_qm = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    if (p[i] > 0) kl_pm += p[i] * std::log(p[i] / m);
    if (q[i] > 0) kl_qm += q[i] * std::log(q[i] / m);
  }
  return 0.5 * (kl_pm + kl_qm);
}

}  // namespace

TEST(Jsd, Examples) {
  const std::vector<double> p{0.2, 0.5, 0.3};
  EXPECT_EQ(jsd(p, p), 0.0);
  EXPECT_NEAR(jsd(std::vector<double>{1, 0}, std::vector<double>{0, 1}), std::log(2.0), 1e-15);
  EXPECT_NEAR(std::log(2.0), 0.6931, 1e-4);
  EXPECT_THROW(jsd(p, std::vector<double>{1.0}), ArgumentError);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(8), b(8);
    for (auto& v : a) v = u(rng) < 0.2 ? 0.0 : u(rng);
    for (auto& v : b) v = u(rng);
    const double za = std::accumulate(a.begin(), a.end(), 0.0) + 1e-300, zb = std::accumulate(b.begin(), b.end(), 0.0);
    for (auto& v : a) v /= za;
    for (auto& v : b) v /= zb;
    EXPECT_NEAR(jsd(a, b), jsd(b, a), 1e-15);
    EXPECT_NEAR(jsd(a, b), jsd_brute(a, b), 1e-12);
    EXPECT_GE(jsd(a, b), 0.0);
    EXPECT_LE(jsd(a, b), std::log(2.0));
  }
}

TEST(Histogram, Binning) {
  const auto h = make_histogram(std::vector<double>{0.0, 1.99, 2.0, 99.9, 100.0, 5000.0}, distance_bins());
  ASSERT_EQ(h.masses.size(), 51u);
  EXPECT_DOUBLE_EQ(h.masses[0], 2.0 / 6);
  EXPECT_DOUBLE_EQ(h.masses[1], 1.0 / 6);
  EXPECT_DOUBLE_EQ(h.masses[49], 1.0 / 6);
  EXPECT_DOUBLE_EQ(h.masses[50], 2.0 / 6);
  for (std::size_t i = 1; i < h.edges.size(); ++i) EXPECT_LT(h.edges[i - 1], h.edges[i]);
  const auto d = make_histogram(std::vector<double>{1, 24, 3}, duration_bins());
  ASSERT_EQ(d.masses.size(), 24u);
  EXPECT_DOUBLE_EQ(d.masses[0], 1.0 / 3);
  EXPECT_DOUBLE_EQ(d.masses[2], 1.0 / 3);
  EXPECT_DOUBLE_EQ(d.masses[23], 1.0 / 3);
  const auto l = make_histogram(std::vector<double>{1.0, 0.0, 0.5}, dailyloc_bins());
  EXPECT_DOUBLE_EQ(l.masses[19], 1.0 / 3);
  EXPECT_DOUBLE_EQ(l.masses[10], 1.0 / 3);
  EXPECT_THROW(make_histogram(std::vector<double>{}, dailyloc_bins()), ArgumentError);
}

TEST(Distance, Examples) {
  const auto vocab = grid_vocab(30);
  const auto still = metric_distance({traj({4, 4, 4, 4})}, vocab);
  EXPECT_EQ(still.masses[0], 1.0);
  LocationVocabulary eq;
  eq.coords = {{0.0, 0.0}, {0.0, 1.0}};
  eq.keys = {"a", "b"};
  const auto d = distance_samples({traj({0, 1})}, eq);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NEAR(d[0], 111.19, 0.01);
  EXPECT_NEAR(d[0], 6371.0 * 3.14159265358979323846 / 180.0, 1e-9);
  EXPECT_THROW(metric_distance({}, vocab), ArgumentError);
}

TEST(Radius, Examples) {
  const auto vocab = grid_vocab(30);
  EXPECT_EQ(radius_of_gyration(traj({3, 3, 3}), vocab), 0.0);
  LocationVocabulary two;
  two.coords = {{35.0, 139.0}, {35.0, 139.02}};
  two.keys = {"a", "b"};
  const double sep = haversine_km(two.coords[0], two.coords[1]);
  EXPECT_NEAR(radius_of_gyration(traj({0, 1}), two), sep / 2, 0.01 * sep / 2);
  std::mt19937_64 rng(2);
  for (const auto& t : random_corpus(rng, 30, 20)) {
    Trajectory r = t;
    std::reverse(r.visits.begin(), r.visits.end());
    EXPECT_NEAR(radius_of_gyration(t, vocab), radius_of_gyration(r, vocab), 1e-12);
  }
}

TEST(Duration, Examples) {
  auto d = duration_samples({traj({0, 0, 0, 1})});
  EXPECT_EQ(d, (std::vector<double>{3, 1}));
  d = duration_samples({traj({0, 1, 2, 3, 4, 5})});
  EXPECT_EQ(d, std::vector<double>(6, 1.0));
}

TEST(DailyLoc, Examples) {
  EXPECT_EQ(dailyloc_samples({traj({2, 2, 2, 2, 2, 2})}), std::vector<double>{1.0 / 6});
  EXPECT_EQ(dailyloc_samples({traj({0, 1, 2, 3, 4, 5})}), std::vector<double>{1.0});
}

TEST(DurationAndDailyLoc, BruteForceOracles) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    const Corpus c = random_corpus(rng, 12, 1 + static_cast<int>(rng() % 8));
    // run lengths by scanning for changes
    std::vector<double> runs, ratios;
    for (const auto& t : c) {
      int run = 1;
      for (std::size_t i = 1; i <= t.visits.size(); ++i) {
        if (i < t.visits.size() && t.visits[i].location == t.visits[i - 1].location) {
          ++run;
        } else {
          runs.push_back(run);
          run = 1;
        }
      }
      std::set<int> uniq;
      for (const auto& v : t.visits) uniq.insert(v.location);
      ratios.push_back(static_cast<double>(uniq.size()) / static_cast<double>(t.visits.size()));
    }
    EXPECT_EQ(duration_samples(c), runs);
    EXPECT_EQ(dailyloc_samples(c), ratios);
    const auto h = metric_duration(c);
    std::vector<double> manual(24, 0.0);
    for (double r : runs) manual[static_cast<std::size_t>(std::min(r, 24.0)) - 1] += 1.0 / static_cast<double>(runs.size());
    for (std::size_t i = 0; i < 24; ++i) EXPECT_NEAR(h.masses[i], manual[i], 1e-12);
  }
}

TEST(GRank, Examples) {
  std::mt19937_64 rng(4);
  const Corpus real = random_corpus(rng, 40, 30);
  auto rd = metric_grank(real, real);
  EXPECT_EQ(jsd(rd.p, rd.q), 0.0);
  // N < 100: every visited location takes part
  std::set<int> visited;
  for (const auto& t : real)
    for (const auto& v : t.visits) visited.insert(v.location);
  EXPECT_EQ(rd.ids.size(), visited.size());
  EXPECT_EQ(visited.size(), 40u);
}

TEST(GRank, UniformSimAgainstZipfReal) {
  // real visits: location i appears (6 - i) times for i in 0..4, plus 150
  // other locations once each; sim is uniform over ids 0..199.
  Corpus real;
  std::vector<int> seq;
  for (int i = 0; i < 5; ++i)
    for (int k = 0; k < 6 - i; ++k) seq.push_back(i);
  for (int i = 5; i < 155; ++i) seq.push_back(i);
  real.push_back(traj(seq));
  std::vector<int> all(200);
  std::iota(all.begin(), all.end(), 0);
  Corpus sim{traj(all)};
  const auto rd = metric_grank(real, sim);
  ASSERT_EQ(rd.ids.size(), 100u);
  // hand-assembled pair: top-100 = ids 0..4 by count, then ids 5..99 (ties by id)
  std::vector<double> p, q(100, 1.0 / 100);
  for (int i = 0; i < 5; ++i) p.push_back(6.0 - i);
  for (int i = 5; i < 100; ++i) p.push_back(1.0);
  const double z = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= z;
  for (int i = 0; i < 100; ++i) {
    EXPECT_EQ(rd.ids[static_cast<std::size_t>(i)], i);
    EXPECT_NEAR(rd.p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(i)], 1e-12);
    EXPECT_NEAR(rd.q[static_cast<std::size_t>(i)], q[static_cast<std::size_t>(i)], 1e-12);
  }
  EXPECT_NEAR(jsd(rd.p, rd.q), jsd_brute(p, q), 1e-10);
}

TEST(IRank, Examples) {
  const Corpus a{traj({0, 0, 1, 2, 2, 2}), traj({3, 4, 3, 4, 5, 5})};
  EXPECT_EQ(metric_irank(a, a), 0.0);
  const Corpus b{traj({0, 1, 1, 1, 9, 9}), traj({5, 5, 5, 5, 5, 5})};
  // hand average of the two per-trajectory rank JSDs
  auto pair_jsd = [](const Trajectory& r, const Trajectory& s) {
    std::map<int, double> rc, sc;
    for (const auto& v : r.visits) rc[v.location] += 1;
    for (const auto& v : s.visits) sc[v.location] += 1;
    std::vector<std::pair<int, double>> ranked(rc.begin(), rc.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](auto& x, auto& y) { return x.second > y.second; });
    std::vector<double> p, q;
    for (auto& [id, c] : ranked) {
      p.push_back(c + 1e-12);
      q.push_back((sc.count(id) ? sc[id] : 0.0) + 1e-12);
    }
    const double zp = std::accumulate(p.begin(), p.end(), 0.0), zq = std::accumulate(q.begin(), q.end(), 0.0);
    for (auto& v : p) v /= zp;
    for (auto& v : q) v /= zq;
    return jsd_brute(p, q);
  };
  const double expect = 0.5 * (pair_jsd(a[0], b[0]) + pair_jsd(a[1], b[1]));
  EXPECT_NEAR(metric_irank(a, b), expect, 1e-12);
  // jointly permuting both corpora leaves the score unchanged
  const Corpus ar{a[1], a[0]}, br{b[1], b[0]};
  EXPECT_NEAR(metric_irank(ar, br), metric_irank(a, b), 1e-15);
}

TEST(Evaluate, IdenticalCorporaScoreZeroAndOrderFree) {
  std::mt19937_64 rng(8);
  const auto vocab = grid_vocab(40);
  const Corpus real = random_corpus(rng, 40, 25);
  const auto same = evaluate(real, real, vocab, "c", 1, "h");
  for (const auto& name : metric_names()) EXPECT_EQ(same.score(name), 0.0) << name;
  const Corpus sim = random_corpus(rng, 40, 25);
  const auto r1 = evaluate(real, sim, vocab, "c", 1, "h");
  Corpus real_p = real, sim_p = sim;
  std::reverse(real_p.begin(), real_p.end());
  std::reverse(sim_p.begin(), sim_p.end());
  const auto r2 = evaluate(real_p, sim_p, vocab, "c", 1, "h");
  for (const auto& name : metric_names()) {
    EXPECT_NEAR(r1.score(name), r2.score(name), 1e-12) << name;
    EXPECT_GE(r1.score(name), 0.0);
    EXPECT_LE(r1.score(name), std::log(2.0));
  }
  // histogram metrics do not depend on pairing at all
  Corpus sim_only = sim;
  std::rotate(sim_only.begin(), sim_only.begin() + 3, sim_only.end());
  const auto r3 = evaluate(real, sim_only, vocab, "c", 1, "h");
  for (const char* name : {"distance", "radius", "duration", "dailyloc", "g_rank"})
    EXPECT_NEAR(r1.score(name), r3.score(name), 1e-12) << name;
}

TEST(Report, FilesRoundTrip) {
  std::mt19937_64 rng(9);
  const auto vocab = grid_vocab(40);
  const auto report = evaluate(random_corpus(rng, 40, 10), random_corpus(rng, 40, 10), vocab, "c", 3, "abc");
  const auto dir = testsupport::temp_dir("report");
  save_report(dir, report);
  const auto scores = read_report_csv(dir / "report.csv");
  for (const auto& name : metric_names()) EXPECT_EQ(scores.at(name), report.score(name));
  for (const char* f : {"report.json", "hist_distance.txt", "hist_radius.txt", "hist_duration.txt",
                        "hist_dailyloc.txt", "hist_g_rank.txt"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  const auto j = nlohmann::json::parse(std::ifstream(dir / "report.json"));
  EXPECT_EQ(j.at("seed"), 3);
}

TEST(AttentionProfile, SingleTokensAndBounds) {
  ModelConfig c;
  c.num_locations = 40;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.num_layers = 2;
  c.max_seq_len = 24;
  HalfOpenTransformer m(c, 3);
  const auto vocab = grid_vocab(40);
  const Corpus singles{traj({4}), traj({9})};
  const auto p = attention_profile(m, singles, vocab);
  EXPECT_EQ(p.distance_count[0], 2u);
  EXPECT_EQ(p.lag_count[0], 2u);
  EXPECT_EQ(std::accumulate(p.distance_count.begin(), p.distance_count.end(), std::size_t{0}), 2u);
  std::mt19937_64 rng(5);
  const auto q = attention_profile(m, random_corpus(rng, 40, 20), vocab);
  for (double v : q.distance_mean) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  for (double v : q.lag_mean) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(AttentionProfile, UniformAttentionOracle) {
  // Zero queries and keys give every visible key the same weight 1/(t+1)
  // at query position t (the begin token included), so each bucket mean is
  // the average of 1/(t+1) over the pairs that fall in it.
  ModelConfig c;
  c.num_locations = 40;
  c.hidden_dim = 8;
  c.num_heads = 2;
  c.num_layers = 2;
  c.max_seq_len = 24;
  HalfOpenTransformer m(c, 3);
  for (auto& e : m.parameters().entries())
    if (e.name.find("w_q") != std::string::npos || e.name.find("w_k") != std::string::npos)
      for (double& v : e.tensor.data()) v = 0.0;
  const auto vocab = grid_vocab(40);
  std::mt19937_64 rng(6);
  const Corpus corpus = random_corpus(rng, 40, 30);
  const auto prof = attention_profile(m, corpus, vocab);
  std::vector<double> sum(100, 0.0), lag(24, 0.0);
  std::vector<double> cnt(100, 0.0), lcnt(24, 0.0);
  for (const auto& t : corpus) {
    const std::size_t len = std::min<std::size_t>(t.visits.size(), 23);
    for (std::size_t a = 1; a <= len; ++a)
      for (std::size_t b = 1; b <= a; ++b) {
        const double w = 1.0 / static_cast<double>(a + 1);
        const double d = haversine_km(vocab.coords[static_cast<std::size_t>(t.visits[a - 1].location)],
                                      vocab.coords[static_cast<std::size_t>(t.visits[b - 1].location)]);
        sum[static_cast<std::size_t>(d)] += w;
        cnt[static_cast<std::size_t>(d)] += 1;
        const auto l = static_cast<std::size_t>(t.visits[a - 1].slot - t.visits[b - 1].slot);
        lag[l] += w;
        lcnt[l] += 1;
      }
  }
  for (std::size_t i = 0; i < 100; ++i) {
    if (cnt[i] > 0) {
      EXPECT_NEAR(prof.distance_mean[i], sum[i] / cnt[i], 1e-12) << i;
    }
  }
  for (std::size_t i = 0; i < 24; ++i) {
    if (lcnt[i] > 0) {
      EXPECT_NEAR(prof.lag_mean[i], lag[i] / lcnt[i], 1e-12) << i;
    }
  }
  // Beyond the zero bucket, which holds every self-pair, the profile over
  // well-populated buckets is flat up to noise.
  double lo = 1.0, hi = 0.0;
  for (std::size_t i = 1; i < 100; ++i)
    if (prof.distance_count[i] >= 300) {
      lo = std::min(lo, prof.distance_mean[i]);
      hi = std::max(hi, prof.distance_mean[i]);
    }
  EXPECT_LT(hi - lo, 0.25 * hi);
}
