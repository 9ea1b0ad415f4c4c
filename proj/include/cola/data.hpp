#pragma once

// Trajectory corpora: ingestion of raw check-in logs, empirical visit
// frequencies, synthetic long-tailed cities and padded training batches.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cola/error.hpp"
#include "cola/util.hpp"

namespace cola {

inline constexpr double kEarthRadiusKm = 6371.0;
inline constexpr double kPi = 3.14159265358979323846;

struct Location {
  double lat = 0.0;  // degrees
  double lon = 0.0;  // degrees
  bool operator==(const Location&) const = default;
};

/// Great-circle distance in kilometres.
inline double haversine_km(const Location& a, const Location& b) {
  const double to_rad = kPi / 180.0;
  const double dlat = (b.lat - a.lat) * to_rad;
  const double dlon = (b.lon - a.lon) * to_rad;
  const double s = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(a.lat * to_rad) * std::cos(b.lat * to_rad) *
                       std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2.0 * kEarthRadiusKm * std::asin(std::min(1.0, std::sqrt(s)));
}

/// Dense location ids 0..N-1 with coordinates and the original keys.
struct LocationVocabulary {
  std::vector<Location> coords;
  std::vector<std::string> keys;

  std::size_t size() const noexcept { return coords.size(); }

  void validate() const {
    if (keys.size() != coords.size()) {
      throw ArgumentError("vocabulary keys and coordinates differ in length");
    }
    for (std::size_t i = 0; i < coords.size(); ++i) {
      const auto& c = coords[i];
      if (!std::isfinite(c.lat) || !std::isfinite(c.lon) || c.lat < -90 || c.lat > 90 ||
          c.lon < -180 || c.lon > 180) {
        throw ArgumentError("location " + std::to_string(i) + " has invalid coordinates");
      }
    }
  }

  bool operator==(const LocationVocabulary&) const = default;
};

struct Visit {
  std::int64_t slot = 0;  // hours since the Unix epoch
  int location = 0;
  bool operator==(const Visit&) const = default;
};

inline constexpr std::int64_t kSlotsPerDay = 24;

inline std::int64_t day_of(std::int64_t slot) {
  return slot >= 0 ? slot / kSlotsPerDay : -((-slot + kSlotsPerDay - 1) / kSlotsPerDay);
}

struct Trajectory {
  std::string user;
  std::vector<Visit> visits;

  std::size_t size() const noexcept { return visits.size(); }
  std::vector<int> locations() const {
    std::vector<int> out;
    out.reserve(visits.size());
    for (const auto& v : visits) out.push_back(v.location);
    return out;
  }
  bool operator==(const Trajectory&) const = default;
};

using Corpus = std::vector<Trajectory>;

inline std::size_t visit_count(const Corpus& corpus) {
  std::size_t n = 0;
  for (const auto& t : corpus) n += t.size();
  return n;
}

/// Smoothed empirical visit frequencies over the vocabulary.
struct FrequencyProfile {
  std::vector<double> pi;
  double epsilon = 1.0;
  bool operator==(const FrequencyProfile&) const = default;
};

struct CityDataset {
  std::string name;
  LocationVocabulary vocab;
  Corpus train;
  Corpus valid;
  Corpus test;
  FrequencyProfile frequency;

  std::size_t num_locations() const noexcept { return vocab.size(); }
  bool operator==(const CityDataset&) const = default;
};

// ---------------------------------------------------------------------------
// Frequencies

/// pi_i = (count_i + epsilon) / (total + N * epsilon).
inline FrequencyProfile frequency_profile(const Corpus& train, std::size_t num_locations,
                                          double epsilon = 1.0) {
  if (num_locations == 0) throw ArgumentError("frequency profile needs N >= 1");
  if (!(epsilon >= 0.0)) throw ArgumentError("smoothing epsilon must be non-negative");
  std::vector<double> counts(num_locations, 0.0);
  double total = 0.0;
  for (const auto& traj : train) {
    for (const auto& v : traj.visits) {
      if (v.location < 0 || static_cast<std::size_t>(v.location) >= num_locations) {
        throw IndexError("location id " + std::to_string(v.location) +
                         " outside vocabulary of " + std::to_string(num_locations));
      }
      counts[static_cast<std::size_t>(v.location)] += 1.0;
      total += 1.0;
    }
  }
  const double denom = total + static_cast<double>(num_locations) * epsilon;
  if (denom <= 0.0) throw ArgumentError("frequency profile of an empty corpus needs epsilon > 0");
  FrequencyProfile profile;
  profile.epsilon = epsilon;
  profile.pi.resize(num_locations);
  for (std::size_t i = 0; i < num_locations; ++i) profile.pi[i] = (counts[i] + epsilon) / denom;
  return profile;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSizes {
  std::size_t train = 0, valid = 0, test = 0;
};

/// 7:1:2 split sizes, rounded, with the test split taking the remainder.
inline SplitSizes split_sizes(std::size_t total) {
  SplitSizes s;
  s.train = static_cast<std::size_t>(std::llround(0.7 * static_cast<double>(total)));
  s.valid = static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(total)));
  s.valid = std::min(s.valid, total - s.train);
  s.test = total - s.train - s.valid;
  return s;
}

inline void split_dataset(CityDataset& ds, Corpus all, std::uint64_t seed) {
  Rng rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  const SplitSizes sizes = split_sizes(all.size());
  auto first = all.begin();
  ds.train.assign(first, first + static_cast<std::ptrdiff_t>(sizes.train));
  first += static_cast<std::ptrdiff_t>(sizes.train);
  ds.valid.assign(first, first + static_cast<std::ptrdiff_t>(sizes.valid));
  first += static_cast<std::ptrdiff_t>(sizes.valid);
  ds.test.assign(first, all.end());
}

// ---------------------------------------------------------------------------
// Ingestion

struct IngestOptions {
  std::string name = "city";
  std::uint64_t split_seed = 0;
  std::size_t min_daily_visits = 6;
  double smoothing = 1.0;
};

/// Hours since the Unix epoch for an ISO-8601 timestamp such as
/// 2012-04-03T18:00:09Z, 2012-04-03 18:00:09 or 2012-04-03T18:00:09+09:00.
/// The local clock hour is converted to UTC when an offset is present.
inline std::optional<std::int64_t> parse_iso8601_slot(std::string_view text) {
  auto num = [&](std::size_t pos, std::size_t len) -> std::optional<int> {
    if (pos + len > text.size()) return std::nullopt;
    int v = 0;
    for (std::size_t i = pos; i < pos + len; ++i) {
      if (text[i] < '0' || text[i] > '9') return std::nullopt;
      v = v * 10 + (text[i] - '0');
    }
    return v;
  };
  if (text.size() < 13 || text[4] != '-' || text[7] != '-' ||
      (text[10] != 'T' && text[10] != ' ')) {
    return std::nullopt;
  }
  auto y = num(0, 4), mo = num(5, 2), d = num(8, 2), h = num(11, 2);
  if (!y || !mo || !d || !h || *h > 23) return std::nullopt;
  std::size_t pos = 13;
  int minute = 0;
  if (pos < text.size() && text[pos] == ':') {
    auto mi = num(pos + 1, 2);
    if (!mi || *mi > 59) return std::nullopt;
    minute = *mi;
    pos += 3;
    if (pos < text.size() && text[pos] == ':') {
      auto s = num(pos + 1, 2);
      if (!s || *s > 60) return std::nullopt;
      pos += 3;
      if (pos < text.size() && text[pos] == '.') {
        ++pos;
        while (pos < text.size() && text[pos] >= '0' && text[pos] <= '9') ++pos;
      }
    }
  }
  int offset_minutes = 0;
  if (pos < text.size()) {
    if (text[pos] == 'Z' && pos + 1 == text.size()) {
      ++pos;
    } else if (text[pos] == '+' || text[pos] == '-') {
      const int sign = text[pos] == '+' ? 1 : -1;
      auto oh = num(pos + 1, 2);
      if (!oh) return std::nullopt;
      std::size_t p = pos + 3;
      int om = 0;
      if (p < text.size() && text[p] == ':') ++p;
      if (p < text.size()) {
        auto m = num(p, 2);
        if (!m) return std::nullopt;
        om = *m;
        p += 2;
      }
      if (p != text.size()) return std::nullopt;
      offset_minutes = sign * (*oh * 60 + om);
      pos = p;
    } else {
      return std::nullopt;
    }
  }
  using namespace std::chrono;
  const year_month_day ymd{year{*y}, month{static_cast<unsigned>(*mo)},
                           day{static_cast<unsigned>(*d)}};
  if (!ymd.ok()) return std::nullopt;
  const std::int64_t days_since_epoch = sys_days{ymd}.time_since_epoch().count();
  const std::int64_t minutes =
      days_since_epoch * 1440 + *h * 60 + minute - offset_minutes;
  return minutes >= 0 ? minutes / 60 : -((-minutes + 59) / 60);
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(sep, start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? line.npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

/// Reads `user_id,timestamp,latitude,longitude,location_key` rows, applies
/// hourly discretization, keeps the first record per (user, slot), drops
/// user-days with fewer than `min_daily_visits` records and splits 7:1:2.
/// Malformed rows are skipped and described in `warnings`.
inline CityDataset ingest(std::istream& in, const IngestOptions& options,
                          std::vector<std::string>* warnings = nullptr) {
  struct Record {
    std::string user;
    std::int64_t slot;
    std::int64_t order;
    Location where;
    std::string key;
  };
  std::vector<Record> records;
  std::string line;
  std::int64_t line_no = 0;
  auto warn = [&](const std::string& msg) {
    if (warnings) warnings->push_back("line " + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view view = detail::trim(line);
    if (view.empty() || view.front() == '#') continue;
    auto fields = detail::split_fields(view, view.find('\t') != view.npos ? '\t' : ',');
    if (fields.size() != 5) {
      warn("expected 5 fields, got " + std::to_string(fields.size()));
      continue;
    }
    for (auto& f : fields) f = detail::trim(f);
    if (line_no == 1 && fields[0] == "user_id") continue;  // header
    auto slot = parse_iso8601_slot(fields[1]);
    if (!slot) {
      warn("unparseable timestamp '" + std::string(fields[1]) + "'");
      continue;
    }
    Location where;
    try {
      where.lat = parse_double(fields[2]);
      where.lon = parse_double(fields[3]);
    } catch (const Error&) {
      warn("unparseable coordinates");
      continue;
    }
    if (!std::isfinite(where.lat) || !std::isfinite(where.lon) || std::abs(where.lat) > 90 ||
        std::abs(where.lon) > 180) {
      warn("coordinates out of range");
      continue;
    }
    if (fields[0].empty() || fields[4].empty()) {
      warn("empty user or location key");
      continue;
    }
    records.push_back({std::string(fields[0]), *slot, line_no, where, std::string(fields[4])});
  }

  std::stable_sort(records.begin(), records.end(), [](const Record& a, const Record& b) {
    if (a.user != b.user) return a.user < b.user;
    return a.slot < b.slot;
  });
  // First record per (user, slot).
  records.erase(std::unique(records.begin(), records.end(),
                            [](const Record& a, const Record& b) {
                              return a.user == b.user && a.slot == b.slot;
                            }),
                records.end());

  CityDataset ds;
  ds.name = options.name;
  std::unordered_map<std::string, int> ids;
  Corpus all;
  for (std::size_t i = 0; i < records.size();) {
    std::size_t j = i;
    const std::int64_t day = day_of(records[i].slot);
    while (j < records.size() && records[j].user == records[i].user &&
           day_of(records[j].slot) == day) {
      ++j;
    }
    if (j - i >= options.min_daily_visits) {
      Trajectory traj;
      traj.user = records[i].user;
      for (std::size_t r = i; r < j; ++r) {
        auto [it, inserted] = ids.try_emplace(records[r].key, static_cast<int>(ds.vocab.size()));
        if (inserted) {
          ds.vocab.coords.push_back(records[r].where);
          ds.vocab.keys.push_back(records[r].key);
        }
        traj.visits.push_back({records[r].slot, it->second});
      }
      all.push_back(std::move(traj));
    }
    i = j;
  }
  if (all.empty()) throw IngestError("no user-day survives the filters");
  split_dataset(ds, std::move(all), options.split_seed);
  ds.frequency = frequency_profile(ds.train, ds.vocab.size(), options.smoothing);
  return ds;
}

inline CityDataset ingest_file(const std::filesystem::path& path, const IngestOptions& options,
                               std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  return ingest(in, options, warnings);
}

// ---------------------------------------------------------------------------
// Synthetic cities

/// A synthetic city: N locations on a jittered grid, Zipf popularity over a
/// random rank order, and per-user days drawn from a Metropolis-Hastings
/// chain whose proposal decays with distance and whose stationary law is
/// the Zipf popularity. Every user has a home where each day starts and,
/// with `return_home_prob`, ends.
struct SynthSpec {
  std::string name = "synth";
  std::uint64_t seed = 1;            // users and their days
  std::uint64_t structure_seed = 1;  // geometry and popularity ranks
  std::uint64_t relabel_seed = 0;    // 0 keeps ids; otherwise permutes them
  std::uint64_t split_seed = 0;
  int num_locations = 200;
  int num_users = 300;
  int days = 2;
  double zipf_gamma = 1.2;
  double extent_km = 20.0;
  double center_lat = 35.0;
  double center_lon = 139.0;
  int min_steps = 6;
  int max_steps = 24;
  double locality_km = 2.0;
  double jump_prob = 0.1;
  double return_home_prob = 0.5;

  void validate() const {
    if (num_locations < 2) throw ArgumentError("synthetic city needs N >= 2");
    if (!(zipf_gamma > 0.0)) throw ArgumentError("Zipf exponent must be positive");
    if (num_users < 1 || days < 1) throw ArgumentError("need at least one user-day");
    if (min_steps < 6 || max_steps < min_steps || max_steps > 24) {
      throw ArgumentError("steps per day must satisfy 6 <= min <= max <= 24");
    }
    if (!(extent_km > 0.0) || !(locality_km > 0.0)) {
      throw ArgumentError("extent and locality must be positive");
    }
    if (jump_prob < 0.0 || jump_prob > 1.0 || return_home_prob < 0.0 ||
        return_home_prob > 1.0) {
      throw ArgumentError("probabilities must lie in [0, 1]");
    }
    if (std::abs(center_lat) > 80.0 || std::abs(center_lon) > 170.0) {
      throw ArgumentError("city center too close to a pole or the antimeridian");
    }
  }
};

namespace detail {

inline std::size_t sample_cdf(const double* cdf, std::size_t n, double u) {
  const double target = u * cdf[n - 1];
  const double* it = std::upper_bound(cdf, cdf + n, target);
  return std::min(static_cast<std::size_t>(it - cdf), n - 1);
}

/// Re-indexes a corpus so that only visited locations remain, preserving
/// the relative order of ids.
inline void compact_vocabulary(LocationVocabulary& vocab, Corpus& corpus) {
  std::vector<char> used(vocab.size(), 0);
  for (const auto& t : corpus)
    for (const auto& v : t.visits) used[static_cast<std::size_t>(v.location)] = 1;
  std::vector<int> remap(vocab.size(), -1);
  LocationVocabulary out;
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    if (!used[i]) continue;
    remap[i] = static_cast<int>(out.size());
    out.coords.push_back(vocab.coords[i]);
    out.keys.push_back(vocab.keys[i]);
  }
  for (auto& t : corpus)
    for (auto& v : t.visits) v.location = remap[static_cast<std::size_t>(v.location)];
  vocab = std::move(out);
}

}  // namespace detail

inline CityDataset synth_city(const SynthSpec& spec) {
  spec.validate();
  const std::size_t n = static_cast<std::size_t>(spec.num_locations);
  Rng geo(derive_seed(spec.structure_seed, "geometry"));

  // Jittered grid in a local planar frame, then converted to degrees.
  const std::size_t side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  const double cell = spec.extent_km / static_cast<double>(side);
  const double km_per_deg_lat = kPi * kEarthRadiusKm / 180.0;
  const double km_per_deg_lon = km_per_deg_lat * std::cos(spec.center_lat * kPi / 180.0);
  std::vector<double> xs(n), ys(n);
  LocationVocabulary vocab;
  for (std::size_t i = 0; i < n; ++i) {
    const double gx = static_cast<double>(i % side) + 0.5 + 0.6 * (uniform01(geo) - 0.5);
    const double gy = static_cast<double>(i / side) + 0.5 + 0.6 * (uniform01(geo) - 0.5);
    xs[i] = (gx - 0.5 * static_cast<double>(side)) * cell;
    ys[i] = (gy - 0.5 * static_cast<double>(side)) * cell;
    vocab.coords.push_back({spec.center_lat + ys[i] / km_per_deg_lat,
                            spec.center_lon + xs[i] / km_per_deg_lon});
  }

  // Popularity: location with rank r (1-based) gets weight r^-gamma.
  std::vector<std::size_t> rank(n);
  std::iota(rank.begin(), rank.end(), std::size_t{0});
  std::shuffle(rank.begin(), rank.end(), geo);
  std::vector<double> weight(n);
  for (std::size_t i = 0; i < n; ++i) {
    weight[i] = std::pow(static_cast<double>(rank[i] + 1), -spec.zipf_gamma);
  }
  std::vector<double> stationary_cdf(n);
  std::partial_sum(weight.begin(), weight.end(), stationary_cdf.begin());

  // Proposal q(j|i) = (1-jump) * local(j|i) + jump / N, local ~ exp(-d/locality).
  std::vector<double> proposal(n * n);
  std::vector<double> proposal_cdf(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = std::hypot(xs[i] - xs[j], ys[i] - ys[j]);
      const double w = i == j ? 0.0 : std::exp(-d / spec.locality_km);
      proposal[i * n + j] = w;
      z += w;
    }
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      proposal[i * n + j] = (1.0 - spec.jump_prob) * proposal[i * n + j] / z +
                            spec.jump_prob / static_cast<double>(n);
      acc += proposal[i * n + j];
      proposal_cdf[i * n + j] = acc;
    }
  }

  // Optional relabelling of location ids; geometry and kernel are unchanged.
  std::vector<int> label(n);
  std::iota(label.begin(), label.end(), 0);
  if (spec.relabel_seed != 0) {
    Rng rl(derive_seed(spec.relabel_seed, "relabel"));
    std::shuffle(label.begin(), label.end(), rl);
  }
  LocationVocabulary labelled;
  labelled.coords.resize(n);
  labelled.keys.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    labelled.coords[static_cast<std::size_t>(label[i])] = vocab.coords[i];
    labelled.keys[static_cast<std::size_t>(label[i])] = "L" + std::to_string(i);
  }

  Rng rng(derive_seed(spec.seed, "users"));
  Corpus all;
  all.reserve(static_cast<std::size_t>(spec.num_users) * static_cast<std::size_t>(spec.days));
  std::vector<int> hours(24);
  for (int u = 0; u < spec.num_users; ++u) {
    const std::size_t home = detail::sample_cdf(stationary_cdf.data(), n, uniform01(rng));
    for (int day = 0; day < spec.days; ++day) {
      const int steps =
          spec.min_steps +
          static_cast<int>(uniform01(rng) * static_cast<double>(spec.max_steps - spec.min_steps + 1));
      const int len = std::min(steps, spec.max_steps);
      std::iota(hours.begin(), hours.end(), 0);
      std::shuffle(hours.begin(), hours.end(), rng);
      std::sort(hours.begin(), hours.begin() + len);

      Trajectory traj;
      traj.user = "u" + std::to_string(u);
      std::size_t here = home;
      for (int s = 0; s < len; ++s) {
        if (s > 0) {
          if (s == len - 1 && uniform01(rng) < spec.return_home_prob) {
            here = home;
          } else {
            const std::size_t next =
                detail::sample_cdf(proposal_cdf.data() + here * n, n, uniform01(rng));
            const double ratio = (weight[next] * proposal[next * n + here]) /
                                 (weight[here] * proposal[here * n + next]);
            if (uniform01(rng) < ratio) here = next;
          }
        }
        const std::int64_t slot = static_cast<std::int64_t>(day) * kSlotsPerDay + hours[static_cast<std::size_t>(s)];
        traj.visits.push_back({slot, label[here]});
      }
      all.push_back(std::move(traj));
    }
  }

  CityDataset ds;
  ds.name = spec.name;
  ds.vocab = std::move(labelled);
  detail::compact_vocabulary(ds.vocab, all);
  split_dataset(ds, std::move(all), spec.split_seed);
  ds.frequency = frequency_profile(ds.train, ds.vocab.size());
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

/// Right-padded token matrix [batch_size x length] with a validity mask.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t length = 0;
  std::vector<int> tokens;
  std::vector<std::uint8_t> mask;
  std::vector<std::size_t> lengths;

  int token(std::size_t b, std::size_t t) const { return tokens[b * length + t]; }
};

inline Batch make_batch(const std::vector<std::vector<int>>& sequences) {
  Batch batch;
  batch.batch_size = sequences.size();
  for (const auto& s : sequences) batch.length = std::max(batch.length, s.size());
  batch.tokens.assign(batch.batch_size * batch.length, 0);
  batch.mask.assign(batch.batch_size * batch.length, 0);
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    batch.lengths.push_back(sequences[b].size());
    for (std::size_t t = 0; t < sequences[b].size(); ++t) {
      batch.tokens[b * batch.length + t] = sequences[b][t];
      batch.mask[b * batch.length + t] = 1;
    }
  }
  return batch;
}

/// Splits each trajectory into windows of at most `max_len` locations,
/// shuffles the windows with `seed` and groups them into padded batches.
/// When `begin_token` is set it is prepended to every window.
inline std::vector<Batch> make_batches(const Corpus& trajectories, std::size_t batch_size,
                                       std::size_t max_len, std::uint64_t seed,
                                       std::optional<int> begin_token = std::nullopt) {
  if (batch_size == 0) throw ArgumentError("batch size must be at least 1");
  if (max_len == 0) throw ArgumentError("window length must be at least 1");
  std::vector<std::vector<int>> windows;
  for (const auto& traj : trajectories) {
    const auto locs = traj.locations();
    for (std::size_t start = 0; start < locs.size(); start += max_len) {
      std::vector<int> w;
      if (begin_token) w.push_back(*begin_token);
      const std::size_t end = std::min(locs.size(), start + max_len);
      w.insert(w.end(), locs.begin() + static_cast<std::ptrdiff_t>(start),
               locs.begin() + static_cast<std::ptrdiff_t>(end));
      windows.push_back(std::move(w));
    }
  }
  Rng rng(seed);
  std::shuffle(windows.begin(), windows.end(), rng);
  std::vector<Batch> batches;
  for (std::size_t i = 0; i < windows.size(); i += batch_size) {
    const std::size_t end = std::min(windows.size(), i + batch_size);
    batches.push_back(make_batch(std::vector<std::vector<int>>(
        windows.begin() + static_cast<std::ptrdiff_t>(i),
        windows.begin() + static_cast<std::ptrdiff_t>(end))));
  }
  return batches;
}

// ---------------------------------------------------------------------------
// Text serialization
//
// A dataset directory holds:
//   dataset.txt     name and location count
//   vocabulary.tsv  id, lat, lon, key
//   train.tsv, valid.tsv, test.tsv   user, slot, location_id (one visit per row)
//   frequency.tsv   smoothing epsilon and pi per id
// Consecutive rows with the same user and day form one trajectory.

inline void write_corpus(std::ostream& os, const Corpus& corpus) {
  os << "# user\tslot\tlocation_id\n";
  for (const auto& traj : corpus) {
    for (const auto& v : traj.visits) {
      os << traj.user << '\t' << v.slot << '\t' << v.location << '\n';
    }
  }
}

inline Corpus read_corpus(std::istream& is) {
  Corpus corpus;
  std::string line;
  std::int64_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    std::string_view view = detail::trim(line);
    if (view.empty() || view.front() == '#') continue;
    auto f = detail::split_fields(view, '\t');
    if (f.size() != 3) throw IoError("corpus line " + std::to_string(line_no) + ": expected 3 fields");
    Visit v{parse_int<std::int64_t>(f[1]), parse_int<int>(f[2])};
    const bool same = !corpus.empty() && corpus.back().user == f[0] &&
                      day_of(corpus.back().visits.back().slot) == day_of(v.slot) &&
                      corpus.back().visits.back().slot < v.slot;
    if (!same) corpus.push_back(Trajectory{std::string(f[0]), {}});
    corpus.back().visits.push_back(v);
  }
  return corpus;
}

inline void save_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  write_corpus(os, corpus);
}

inline Corpus load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  return read_corpus(is);
}

inline void save_dataset(const std::filesystem::path& dir, const CityDataset& ds) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* file) {
    std::ofstream os(dir / file, std::ios::trunc);
    if (!os) throw IoError("cannot write " + (dir / file).string());
    return os;
  };
  {
    auto os = open("dataset.txt");
    os << "name\t" << ds.name << "\nnum_locations\t" << ds.vocab.size() << '\n';
  }
  {
    auto os = open("vocabulary.tsv");
    os << "# id\tlat\tlon\tkey\n";
    for (std::size_t i = 0; i < ds.vocab.size(); ++i) {
      os << i << '\t' << format_double(ds.vocab.coords[i].lat) << '\t'
         << format_double(ds.vocab.coords[i].lon) << '\t' << ds.vocab.keys[i] << '\n';
    }
  }
  save_corpus(dir / "train.tsv", ds.train);
  save_corpus(dir / "valid.tsv", ds.valid);
  save_corpus(dir / "test.tsv", ds.test);
  {
    auto os = open("frequency.tsv");
    os << "# epsilon\t" << format_double(ds.frequency.epsilon) << "\n# id\tpi\n";
    for (std::size_t i = 0; i < ds.frequency.pi.size(); ++i) {
      os << i << '\t' << format_double(ds.frequency.pi[i]) << '\n';
    }
  }
}

inline CityDataset load_dataset(const std::filesystem::path& dir) {
  auto open = [&](const char* file) {
    std::ifstream is(dir / file);
    if (!is) throw IoError("cannot read " + (dir / file).string());
    return is;
  };
  CityDataset ds;
  std::size_t declared = 0;
  {
    auto is = open("dataset.txt");
    std::string line;
    while (std::getline(is, line)) {
      auto f = detail::split_fields(line, '\t');
      if (f.size() != 2) continue;
      if (f[0] == "name") ds.name = std::string(f[1]);
      if (f[0] == "num_locations") declared = parse_int<std::size_t>(f[1]);
    }
  }
  {
    auto is = open("vocabulary.tsv");
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty() || line.front() == '#') continue;
      auto f = detail::split_fields(line, '\t');
      if (f.size() != 4) throw IoError("vocabulary row must have 4 fields");
      if (parse_int<std::size_t>(f[0]) != ds.vocab.size()) {
        throw IoError("vocabulary ids must be dense and ordered");
      }
      ds.vocab.coords.push_back({parse_double(f[1]), parse_double(f[2])});
      ds.vocab.keys.emplace_back(f[3]);
    }
  }
  if (ds.vocab.size() != declared) throw IoError("vocabulary size disagrees with dataset.txt");
  ds.vocab.validate();
  ds.train = load_corpus(dir / "train.tsv");
  ds.valid = load_corpus(dir / "valid.tsv");
  ds.test = load_corpus(dir / "test.tsv");
  {
    auto is = open("frequency.tsv");
    std::string line;
    while (std::getline(is, line)) {
      auto f = detail::split_fields(line, '\t');
      if (f.size() == 2 && f[0] == "# epsilon") {
        ds.frequency.epsilon = parse_double(f[1]);
        continue;
      }
      if (line.empty() || line.front() == '#') continue;
      if (f.size() != 2) throw IoError("frequency row must have 2 fields");
      ds.frequency.pi.push_back(parse_double(f[1]));
    }
  }
  if (ds.frequency.pi.size() != ds.vocab.size()) {
    throw IoError("frequency table size disagrees with vocabulary");
  }
  for (const Corpus* c : {&ds.train, &ds.valid, &ds.test})
    for (const auto& t : *c)
      for (const auto& v : t.visits)
        if (v.location < 0 || static_cast<std::size_t>(v.location) >= ds.vocab.size())
          throw IoError("location id " + std::to_string(v.location) + " outside vocabulary");
  return ds;
}

}  // namespace cola
