#pragma once

// Trajectory distribution metrics compared through Jensen-Shannon
// divergence (natural log, so scores lie in [0, ln 2]).
//
// Binning is fixed so scores are comparable across runs:
//   distance  50 bins over [0, 100) km plus an overflow bin
//   radius    50 bins over [0, 50) km plus an overflow bin
//   duration  integer bins 1..24 (longer runs fall in the last bin)
//   dailyloc  20 bins over [0, 1]
// G-rank compares visit frequencies of the real corpus's top-100 locations.
// I-rank is the mean over paired trajectories (real i vs simulated i) of
// the same comparison restricted to each real trajectory's own locations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cola/data.hpp"
#include "cola/error.hpp"
#include "cola/model.hpp"
#include "cola/util.hpp"

namespace cola {

inline const double kLn2 = std::log(2.0);
inline constexpr double kRankSmoothing = 1e-12;
inline constexpr std::size_t kTopLocations = 100;

struct Histogram {
  std::vector<double> edges;   // size = masses.size() + 1
  std::vector<double> masses;  // sums to 1
  std::size_t count = 0;
};

struct BinSpec {
  double lo = 0.0;
  double hi = 1.0;
  std::size_t bins = 10;
  bool overflow = false;  // extra bin [hi, inf)
  bool closed_right = false;  // hi itself falls in the last regular bin
};

inline BinSpec distance_bins() { return {0.0, 100.0, 50, true, false}; }
inline BinSpec radius_bins() { return {0.0, 50.0, 50, true, false}; }
inline BinSpec duration_bins() { return {0.5, 24.5, 24, false, true}; }
inline BinSpec dailyloc_bins() { return {0.0, 1.0, 20, false, true}; }

inline Histogram make_histogram(std::span<const double> samples, const BinSpec& spec) {
  if (samples.empty()) throw ArgumentError("histogram of no samples");
  if (spec.bins == 0 || !(spec.hi > spec.lo)) throw ArgumentError("invalid bin specification");
  Histogram h;
  const double width = (spec.hi - spec.lo) / static_cast<double>(spec.bins);
  for (std::size_t i = 0; i <= spec.bins; ++i) h.edges.push_back(spec.lo + width * static_cast<double>(i));
  h.edges.back() = spec.hi;
  if (spec.overflow) h.edges.push_back(std::numeric_limits<double>::infinity());
  const std::size_t total_bins = spec.bins + (spec.overflow ? 1 : 0);
  std::vector<double> counts(total_bins, 0.0);
  for (double x : samples) {
    if (!std::isfinite(x)) throw ArgumentError("non-finite metric sample");
    std::size_t bin;
    if (x < spec.lo) {
      bin = 0;
    } else if (x >= spec.hi) {
      bin = spec.overflow ? spec.bins : spec.bins - 1;
      if (spec.overflow && spec.closed_right && x == spec.hi) bin = spec.bins - 1;
    } else {
      bin = std::min(static_cast<std::size_t>((x - spec.lo) / width), spec.bins - 1);
    }
    counts[bin] += 1.0;
  }
  h.count = samples.size();
  h.masses.resize(total_bins);
  for (std::size_t i = 0; i < total_bins; ++i) h.masses[i] = counts[i] / static_cast<double>(h.count);
  return h;
}

inline double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

/// H((p+q)/2) - (H(p) + H(q))/2, clamped to [0, ln 2].
inline double jsd(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) {
    throw ArgumentError("jsd: distributions of length " + std::to_string(p.size()) + " and " +
                        std::to_string(q.size()));
  }
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  const double value = entropy(m) - 0.5 * (entropy(p) + entropy(q));
  return std::clamp(value, 0.0, kLn2);
}

// ---------------------------------------------------------------------------
// Per-corpus samples

inline std::vector<double> distance_samples(const Corpus& corpus, const LocationVocabulary& vocab) {
  std::vector<double> out;
  for (const auto& traj : corpus) {
    for (std::size_t i = 1; i < traj.visits.size(); ++i) {
      out.push_back(haversine_km(vocab.coords.at(static_cast<std::size_t>(traj.visits[i - 1].location)),
                                 vocab.coords.at(static_cast<std::size_t>(traj.visits[i].location))));
    }
  }
  return out;
}

/// RMS distance of a trajectory's visits to their coordinate mean.
inline double radius_of_gyration(const Trajectory& traj, const LocationVocabulary& vocab) {
  Location center;
  for (const auto& v : traj.visits) {
    const auto& c = vocab.coords.at(static_cast<std::size_t>(v.location));
    center.lat += c.lat;
    center.lon += c.lon;
  }
  const double n = static_cast<double>(traj.visits.size());
  center.lat /= n;
  center.lon /= n;
  double sq = 0.0;
  for (const auto& v : traj.visits) {
    const double d = haversine_km(vocab.coords.at(static_cast<std::size_t>(v.location)), center);
    sq += d * d;
  }
  return std::sqrt(sq / n);
}

inline std::vector<double> radius_samples(const Corpus& corpus, const LocationVocabulary& vocab) {
  std::vector<double> out;
  for (const auto& traj : corpus)
    if (!traj.visits.empty()) out.push_back(radius_of_gyration(traj, vocab));
  return out;
}

/// Run lengths of consecutive identical locations, in hourly steps.
inline std::vector<double> duration_samples(const Corpus& corpus) {
  std::vector<double> out;
  for (const auto& traj : corpus) {
    std::size_t i = 0;
    while (i < traj.visits.size()) {
      std::size_t j = i + 1;
      while (j < traj.visits.size() && traj.visits[j].location == traj.visits[i].location) ++j;
      out.push_back(static_cast<double>(j - i));
      i = j;
    }
  }
  return out;
}

/// Distinct locations per trajectory-day divided by the day's length.
inline std::vector<double> dailyloc_samples(const Corpus& corpus) {
  std::vector<double> out;
  for (const auto& traj : corpus) {
    std::size_t i = 0;
    while (i < traj.visits.size()) {
      const std::int64_t day = day_of(traj.visits[i].slot);
      std::vector<int> seen;
      std::size_t j = i;
      for (; j < traj.visits.size() && day_of(traj.visits[j].slot) == day; ++j) {
        seen.push_back(traj.visits[j].location);
      }
      std::sort(seen.begin(), seen.end());
      const auto unique = static_cast<double>(std::unique(seen.begin(), seen.end()) - seen.begin());
      out.push_back(unique / static_cast<double>(j - i));
      i = j;
    }
  }
  return out;
}

inline Histogram metric_distance(const Corpus& corpus, const LocationVocabulary& vocab,
                                 const BinSpec& bins = distance_bins()) {
  return make_histogram(distance_samples(corpus, vocab), bins);
}
inline Histogram metric_radius(const Corpus& corpus, const LocationVocabulary& vocab,
                               const BinSpec& bins = radius_bins()) {
  return make_histogram(radius_samples(corpus, vocab), bins);
}
inline Histogram metric_duration(const Corpus& corpus, const BinSpec& bins = duration_bins()) {
  return make_histogram(duration_samples(corpus), bins);
}
inline Histogram metric_dailyloc(const Corpus& corpus, const BinSpec& bins = dailyloc_bins()) {
  return make_histogram(dailyloc_samples(corpus), bins);
}

// ---------------------------------------------------------------------------
// Rank metrics

/// Aligned visit-frequency distributions over the real corpus's top
/// locations (descending count, ties by lower id).
struct RankDistributions {
  std::vector<int> ids;
  std::vector<double> p;  // real
  std::vector<double> q;  // simulated
};

namespace detail {

inline std::map<int, double> visit_counts(const std::vector<const Trajectory*>& trajs) {
  std::map<int, double> counts;
  for (const auto* t : trajs)
    for (const auto& v : t->visits) counts[v.location] += 1.0;
  return counts;
}

inline RankDistributions rank_distributions(const std::map<int, double>& real,
                                            const std::map<int, double>& sim,
                                            std::size_t top_k) {
  std::vector<std::pair<int, double>> ranked(real.begin(), real.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > top_k) ranked.resize(top_k);
  RankDistributions out;
  double zp = 0.0, zq = 0.0;
  for (const auto& [id, c] : ranked) {
    out.ids.push_back(id);
    auto it = sim.find(id);
    out.p.push_back(c + kRankSmoothing);
    out.q.push_back((it == sim.end() ? 0.0 : it->second) + kRankSmoothing);
    zp += out.p.back();
    zq += out.q.back();
  }
  for (double& v : out.p) v /= zp;
  for (double& v : out.q) v /= zq;
  return out;
}

inline std::vector<const Trajectory*> pointers(const Corpus& c) {
  std::vector<const Trajectory*> out;
  for (const auto& t : c) out.push_back(&t);
  return out;
}

}  // namespace detail

inline RankDistributions metric_grank(const Corpus& real, const Corpus& sim,
                                      std::size_t top_k = kTopLocations) {
  if (visit_count(real) == 0) throw ArgumentError("G-rank of an empty real corpus");
  return detail::rank_distributions(detail::visit_counts(detail::pointers(real)),
                                    detail::visit_counts(detail::pointers(sim)), top_k);
}

/// Mean over trajectory pairs (real[i], sim[i]) of the per-trajectory rank
/// JSD; pairs run to the shorter corpus.
inline double metric_irank(const Corpus& real, const Corpus& sim,
                           std::size_t top_k = kTopLocations) {
  const std::size_t pairs = std::min(real.size(), sim.size());
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < pairs; ++i) {
    if (real[i].visits.empty()) continue;
    auto rd = detail::rank_distributions(detail::visit_counts({&real[i]}),
                                         detail::visit_counts({&sim[i]}), top_k);
    total += jsd(rd.p, rd.q);
    ++used;
  }
  if (used == 0) throw ArgumentError("I-rank needs at least one non-empty trajectory pair");
  return total / static_cast<double>(used);
}

// ---------------------------------------------------------------------------
// Reports

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"distance", "radius", "duration",
                                              "dailyloc", "g_rank", "i_rank"};
  return names;
}

struct MetricScore {
  std::string name;
  double jsd = 0.0;
  Histogram real;  // for g_rank the masses are the rank distribution
  Histogram sim;
};

struct MetricReport {
  std::string city;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<MetricScore> scores;

  double score(const std::string& name) const {
    for (const auto& s : scores)
      if (s.name == name) return s.jsd;
    throw ArgumentError("no metric named '" + name + "'");
  }
};

namespace detail {
inline Histogram rank_histogram(const std::vector<double>& masses, std::size_t count) {
  Histogram h;
  h.masses = masses;
  h.count = count;
  for (std::size_t i = 0; i <= masses.size(); ++i) h.edges.push_back(static_cast<double>(i) + 0.5);
  return h;
}
}  // namespace detail

inline MetricReport evaluate(const Corpus& real, const Corpus& sim, const LocationVocabulary& vocab,
                             const std::string& city = "", std::uint64_t seed = 0,
                             const std::string& config_hash = "") {
  MetricReport report{city, seed, config_hash, {}};
  auto add = [&](const std::string& name, Histogram r, Histogram s) {
    const double value = jsd(r.masses, s.masses);
    report.scores.push_back({name, value, std::move(r), std::move(s)});
  };
  add("distance", metric_distance(real, vocab), metric_distance(sim, vocab));
  add("radius", metric_radius(real, vocab), metric_radius(sim, vocab));
  add("duration", metric_duration(real), metric_duration(sim));
  add("dailyloc", metric_dailyloc(real), metric_dailyloc(sim));
  auto g = metric_grank(real, sim);
  add("g_rank", detail::rank_histogram(g.p, visit_count(real)),
      detail::rank_histogram(g.q, visit_count(sim)));
  report.scores.push_back({"i_rank", metric_irank(real, sim), {}, {}});
  return report;
}

inline void write_report_csv(std::ostream& os, const MetricReport& report) {
  os << "metric,jsd\n";
  for (const auto& s : report.scores) os << s.name << ',' << format_double(s.jsd) << '\n';
}

inline nlohmann::json report_json(const MetricReport& report) {
  nlohmann::json j;
  j["city"] = report.city;
  j["seed"] = report.seed;
  j["config_hash"] = report.config_hash;
  for (const auto& s : report.scores) j["jsd"][s.name] = s.jsd;
  return j;
}

/// report.csv, report.json and hist_<metric>.txt (bin lower edge, real
/// mass, simulated mass) in `dir`.
inline void save_report(const std::filesystem::path& dir, const MetricReport& report) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir / "report.csv", std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / "report.csv").string());
    write_report_csv(os, report);
  }
  {
    std::ofstream os(dir / "report.json", std::ios::trunc);
    os << report_json(report).dump(2) << '\n';
  }
  for (const auto& s : report.scores) {
    if (s.real.masses.empty()) continue;
    std::ofstream os(dir / ("hist_" + s.name + ".txt"), std::ios::trunc);
    os << "# lower_edge\treal\tsim\n";
    for (std::size_t i = 0; i < s.real.masses.size(); ++i) {
      os << format_double(s.real.edges[i]) << '\t' << format_double(s.real.masses[i]) << '\t'
         << format_double(s.sim.masses[i]) << '\n';
    }
  }
}

inline std::map<std::string, double> read_report_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::map<std::string, double> out;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    auto f = detail::split_fields(line, ',');
    if (f.size() == 2) out[std::string(f[0])] = parse_double(f[1]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention profiles

/// Mean attention weight between location pairs of a trajectory, bucketed
/// by distance (1 km buckets over [0, 100) km) and by time lag (0..23 h).
struct AttentionProfile {
  std::vector<double> distance_mean = std::vector<double>(100, 0.0);
  std::vector<std::size_t> distance_count = std::vector<std::size_t>(100, 0);
  std::vector<double> lag_mean = std::vector<double>(24, 0.0);
  std::vector<std::size_t> lag_count = std::vector<std::size_t>(24, 0);
};

/// Each trajectory is fed as [BOS, x_1, ...] (truncated to the model's
/// window); for every query location t and earlier-or-equal location s the
/// weight, averaged over heads and layers, is bucketed. The BOS column is
/// left out.
inline AttentionProfile attention_profile(const HalfOpenTransformer& model, const Corpus& corpus,
                                          const LocationVocabulary& vocab) {
  const auto& cfg = model.config();
  AttentionProfile prof;
  std::vector<double> dist_sum(100, 0.0), lag_sum(24, 0.0);
  for (const auto& traj : corpus) {
    if (traj.visits.empty()) continue;
    const std::size_t len =
        std::min(traj.visits.size(), static_cast<std::size_t>(cfg.max_seq_len) - 1);
    if (len == 0) continue;
    std::vector<int> tokens{cfg.begin_token()};
    for (std::size_t i = 0; i < len; ++i) tokens.push_back(traj.visits[i].location);
    std::vector<AttentionWeights> weights;
    Tape tape(false);
    ForwardOptions opts;
    opts.attention = &weights;
    model.forward(tape, tokens, opts);
    const double norm = 1.0 / static_cast<double>(weights.size() * weights.front().heads);
    for (std::size_t t = 1; t <= len; ++t) {
      for (std::size_t s = 1; s <= t; ++s) {
        double w = 0.0;
        for (const auto& aw : weights)
          for (std::size_t h = 0; h < aw.heads; ++h) w += aw.at(0, h, t, s);
        w *= norm;
        const auto& a = traj.visits[t - 1];
        const auto& b = traj.visits[s - 1];
        const double d = haversine_km(vocab.coords.at(static_cast<std::size_t>(a.location)),
                                      vocab.coords.at(static_cast<std::size_t>(b.location)));
        if (d < 100.0) {
          const auto bucket = static_cast<std::size_t>(d);
          dist_sum[bucket] += w;
          ++prof.distance_count[bucket];
        }
        const std::int64_t lag = a.slot - b.slot;
        if (lag >= 0 && lag < 24) {
          lag_sum[static_cast<std::size_t>(lag)] += w;
          ++prof.lag_count[static_cast<std::size_t>(lag)];
        }
      }
    }
  }
  for (std::size_t i = 0; i < 100; ++i)
    if (prof.distance_count[i]) prof.distance_mean[i] = dist_sum[i] / static_cast<double>(prof.distance_count[i]);
  for (std::size_t i = 0; i < 24; ++i)
    if (prof.lag_count[i]) prof.lag_mean[i] = lag_sum[i] / static_cast<double>(prof.lag_count[i]);
  return prof;
}

inline void save_attention_profile(const std::filesystem::path& dir, const AttentionProfile& prof) {
  std::filesystem::create_directories(dir);
  std::ofstream d(dir / "attention_distance.txt", std::ios::trunc);
  d << "# km\tmean_weight\tpairs\n";
  for (std::size_t i = 0; i < prof.distance_mean.size(); ++i)
    d << i << '\t' << format_double(prof.distance_mean[i]) << '\t' << prof.distance_count[i] << '\n';
  std::ofstream l(dir / "attention_lag.txt", std::ios::trunc);
  l << "# hours\tmean_weight\tpairs\n";
  for (std::size_t i = 0; i < prof.lag_mean.size(); ++i)
    l << i << '\t' << format_double(prof.lag_mean[i]) << '\t' << prof.lag_count[i] << '\n';
}

}  // namespace cola
