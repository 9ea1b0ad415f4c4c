#pragma once

// Autoregressive trajectory generation with post-hoc frequency adjustment:
// at sampling time the model's probabilities are divided by pi^tau and
// renormalized, which lifts rarely visited locations relative to popular
// ones. Training is never affected.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cola/data.hpp"
#include "cola/error.hpp"
#include "cola/model.hpp"
#include "cola/util.hpp"

namespace cola {

/// Grid the exponent is searched over.
inline constexpr double kTauGrid[] = {0.001, 0.01, 0.1, 0.25, 0.5, 1.0};

struct SimulationConfig {
  double tau = 0.1;
  int num_trajectories = 100;
  int horizon = 24;
  std::uint64_t seed = 0;
  bool post_hoc = true;

  void validate() const {
    if (post_hoc && !(tau > 0.0)) throw ConfigError("tau must be positive when adjustment is on");
    if (num_trajectories < 1) throw ConfigError("num_trajectories must be positive");
    if (horizon < 1) throw ConfigError("horizon must be positive");
  }
};

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

/// y_i = exp(p_i) / pi_i^tau / sum_j exp(p_j) / pi_j^tau, computed as
/// softmax(p - tau * log(pi)).
inline std::vector<double> adjust(std::span<const double> logits, std::span<const double> pi,
                                  double tau) {
  if (logits.size() != pi.size()) {
    throw DimensionError("adjust: " + std::to_string(logits.size()) + " logits but " +
                         std::to_string(pi.size()) + " frequencies");
  }
  if (!(tau > 0.0)) throw ArgumentError("adjust: tau must be positive");
  std::vector<double> shifted(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (!(pi[i] > 0.0)) {
      throw ProfileError("frequency of location " + std::to_string(i) + " is not positive");
    }
    shifted[i] = logits[i] - tau * std::log(pi[i]);
  }
  return softmax(shifted);
}

/// Inverse-CDF categorical draw.
inline int sample_categorical(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return static_cast<int>(i);
  }
  for (std::size_t i = probs.size(); i-- > 0;)
    if (probs[i] > 0.0) return static_cast<int>(i);
  throw ArgumentError("cannot sample from an all-zero distribution");
}

/// Next-location distribution after `prefix` (which starts with the
/// begin-of-sequence token), adjusted when `config.post_hoc` is set.
inline std::vector<double> next_distribution(const HalfOpenTransformer& model,
                                             std::span<const int> prefix, const FrequencyProfile& pi,
                                             const SimulationConfig& config) {
  const auto& cfg = model.config();
  if (prefix.empty() || prefix.size() > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw ArgumentError("prefix length must lie in [1, " + std::to_string(cfg.max_seq_len) + "]");
  }
  if (pi.pi.size() != static_cast<std::size_t>(cfg.num_locations)) {
    throw ProfileError("frequency profile covers " + std::to_string(pi.pi.size()) +
                       " locations, model has " + std::to_string(cfg.num_locations));
  }
  Tape tape(false);
  Tensor logits = model.forward(tape, prefix);
  const std::size_t n = static_cast<std::size_t>(cfg.num_locations);
  std::span<const double> last = logits.data().subspan((prefix.size() - 1) * n, n);
  return config.post_hoc ? adjust(last, pi.pi, config.tau) : softmax(last);
}

inline int sample_next(const HalfOpenTransformer& model, std::span<const int> prefix,
                       const FrequencyProfile& pi, const SimulationConfig& config, Rng& rng) {
  const auto probs = next_distribution(model, prefix, pi, config);
  return sample_categorical(probs, rng);
}

/// Generates `num_trajectories` trajectories of `horizon` steps from the
/// begin-of-sequence token. Trajectory i is one day (slots 24*i .. 24*i+h-1)
/// of user "sim<i>" and draws from its own seed-derived stream.
inline Corpus simulate(const HalfOpenTransformer& model, const SimulationConfig& config,
                       const LocationVocabulary& vocab, const FrequencyProfile& pi) {
  config.validate();
  const auto& cfg = model.config();
  if (vocab.size() != static_cast<std::size_t>(cfg.num_locations)) {
    throw ArgumentError("vocabulary does not match the model");
  }
  if (config.horizon > cfg.max_seq_len) {
    throw ConfigError("horizon " + std::to_string(config.horizon) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  Corpus out;
  out.reserve(static_cast<std::size_t>(config.num_trajectories));
  for (int i = 0; i < config.num_trajectories; ++i) {
    Rng rng(derive_seed(config.seed, "simulate", static_cast<std::uint64_t>(i)));
    std::vector<int> tokens{cfg.begin_token()};
    Trajectory traj;
    traj.user = "sim" + std::to_string(i);
    for (int t = 0; t < config.horizon; ++t) {
      const int next = sample_next(model, tokens, pi, config, rng);
      traj.visits.push_back({static_cast<std::int64_t>(i) * kSlotsPerDay + t, next});
      tokens.push_back(next);
    }
    out.push_back(std::move(traj));
  }
  return out;
}

struct SimulationProvenance {
  std::string checkpoint_hash;
  double tau = 0.0;
  bool post_hoc = true;
  std::uint64_t seed = 0;
  int num_trajectories = 0;
  int horizon = 0;
};

/// Writes the corpus in split-file format plus a provenance sidecar.
inline void save_simulation(const std::filesystem::path& path, const Corpus& corpus,
                            const SimulationProvenance& prov) {
  save_corpus(path, corpus);
  std::ofstream os(path.string() + ".provenance", std::ios::trunc);
  if (!os) throw IoError("cannot write provenance for " + path.string());
  os << "checkpoint_hash\t" << prov.checkpoint_hash << "\ntau\t" << format_double(prov.tau)
     << "\npost_hoc\t" << (prov.post_hoc ? "true" : "false") << "\nseed\t" << prov.seed
     << "\nnum_trajectories\t" << prov.num_trajectories << "\nhorizon\t" << prov.horizon
     << '\n';
}

// ---------------------------------------------------------------------------

/// For pi_i proportional to a * i^-gamma (i 1-based), returns the largest
/// |(y~_i / y~_j) / ((y^_i / y^_j) * (i/j)^(tau*gamma)) - 1| over `pairs`,
/// where y^ is the plain softmax and y~ the adjusted distribution.
inline double adjustment_ratio_error(std::span<const double> logits, double gamma, double a,
                                 double tau, std::span<const std::pair<int, int>> pairs) {
  const std::size_t n = logits.size();
  std::vector<double> pi(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pi[i] = a * std::pow(static_cast<double>(i + 1), -gamma);
    z += pi[i];
  }
  for (double& p : pi) p /= z;
  const auto plain = softmax(logits);
  const auto adjusted = adjust(logits, pi, tau);
  double worst = 0.0;
  for (auto [i, j] : pairs) {
    if (i < 1 || j < 1 || static_cast<std::size_t>(i) > n || static_cast<std::size_t>(j) > n) {
      throw IndexError("pair index outside [1, " + std::to_string(n) + "]");
    }
    const std::size_t ii = static_cast<std::size_t>(i - 1), jj = static_cast<std::size_t>(j - 1);
    const double lhs = adjusted[ii] / adjusted[jj];
    const double rhs = plain[ii] / plain[jj] *
                       std::pow(static_cast<double>(i) / static_cast<double>(j), tau * gamma);
    worst = std::max(worst, std::abs(lhs / rhs - 1.0));
  }
  return worst;
}

}  // namespace cola
