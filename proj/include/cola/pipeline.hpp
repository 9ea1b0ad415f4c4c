#pragma once

// Declarative run configuration and the commands of the `cola` tool.
//
// Every command is a function of (config, seeds, input files). Outputs go
// under <output>/<command>/<city>/seed-<s>/ together with a manifest.json
// that records the config hash, the data hash and the code version.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cola/data.hpp"
#include "cola/error.hpp"
#include "cola/evaluation.hpp"
#include "cola/model.hpp"
#include "cola/parameters.hpp"
#include "cola/simulator.hpp"
#include "cola/transfer.hpp"
#include "cola/util.hpp"

namespace cola {

inline constexpr const char* kCodeVersion = "cola 0.1.0";

struct CitySpec {
  enum class Kind { synth, ingest, dataset };
  std::string name;
  Kind kind = Kind::synth;
  SynthSpec synth;
  std::filesystem::path path;  // ingest: raw file; dataset: directory
  IngestOptions ingest;
};

struct TrainConfig {
  int epochs = 250;
  double learning_rate = 1e-3;
  int batch_size = 32;
};

struct RunConfig {
  ModelConfig model;  // num_locations is filled in per city
  TransferConfig transfer;
  TrainConfig train;
  SimulationConfig simulation;  // num_trajectories 0 means "size of the test split"
  bool half_open = true;
  bool post_hoc = true;
  std::vector<CitySpec> cities;
  std::string target;
  std::optional<std::vector<std::string>> sources;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output = "out";
  bool verbose = false;

  const CitySpec& city(const std::string& name) const {
    for (const auto& c : cities)
      if (c.name == name) return c;
    throw ConfigError("no city named '" + name + "'");
  }
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

using Json = nlohmann::json;

inline void check_keys(const Json& obj, const std::string& where,
                       std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void read(const Json& obj, const char* key, T& into, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    into = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + where);
  }
}

inline SynthSpec parse_synth(const Json& j, const std::string& name) {
  const std::string where = "cities." + name + ".synth";
  check_keys(j, where,
             {"seed", "structure_seed", "relabel_seed", "split_seed", "num_locations",
              "num_users", "days", "zipf_gamma", "extent_km", "center_lat", "center_lon",
              "min_steps", "max_steps", "locality_km", "jump_prob", "return_home_prob"});
  SynthSpec s;
  s.name = name;
  read(j, "seed", s.seed, where);
  s.structure_seed = s.seed;
  read(j, "structure_seed", s.structure_seed, where);
  read(j, "relabel_seed", s.relabel_seed, where);
  read(j, "split_seed", s.split_seed, where);
  read(j, "num_locations", s.num_locations, where);
  read(j, "num_users", s.num_users, where);
  read(j, "days", s.days, where);
  read(j, "zipf_gamma", s.zipf_gamma, where);
  read(j, "extent_km", s.extent_km, where);
  read(j, "center_lat", s.center_lat, where);
  read(j, "center_lon", s.center_lon, where);
  read(j, "min_steps", s.min_steps, where);
  read(j, "max_steps", s.max_steps, where);
  read(j, "locality_km", s.locality_km, where);
  read(j, "jump_prob", s.jump_prob, where);
  read(j, "return_home_prob", s.return_home_prob, where);
  try {
    s.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return s;
}

}  // namespace detail

/// Parses and validates a configuration. Relative paths resolve against
/// `base_dir`. Unknown keys are rejected.
inline RunConfig parse_run_config(const nlohmann::json& j,
                                  const std::filesystem::path& base_dir = ".") {
  using detail::check_keys;
  using detail::read;
  check_keys(j, "config",
             {"output", "seeds", "model", "transfer", "train", "simulation", "ablation", "cities",
              "target", "sources"});
  RunConfig cfg;
  if (j.contains("output")) {
    std::string out;
    read(j, "output", out, "config");
    cfg.output = std::filesystem::path(out).is_absolute() ? std::filesystem::path(out)
                                                          : base_dir / out;
  } else {
    cfg.output = base_dir / "out";
  }
  read(j, "seeds", cfg.seeds, "config");
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model",
               {"hidden_dim", "num_heads", "num_layers", "proj_layers", "max_seq_len", "dropout"});
    read(m, "hidden_dim", cfg.model.hidden_dim, "model");
    read(m, "num_heads", cfg.model.num_heads, "model");
    read(m, "num_layers", cfg.model.num_layers, "model");
    read(m, "proj_layers", cfg.model.proj_layers, "model");
    read(m, "max_seq_len", cfg.model.max_seq_len, "model");
    read(m, "dropout", cfg.model.dropout, "model");
  }
  if (j.contains("transfer")) {
    const auto& t = j.at("transfer");
    check_keys(t, "transfer",
               {"meta_epochs", "source_epochs", "target_epochs", "source_lr", "target_lr",
                "meta_lr", "batch_size", "checkpoint_every"});
    read(t, "meta_epochs", cfg.transfer.meta_epochs, "transfer");
    read(t, "source_epochs", cfg.transfer.source_epochs, "transfer");
    read(t, "target_epochs", cfg.transfer.target_epochs, "transfer");
    read(t, "source_lr", cfg.transfer.source_lr, "transfer");
    read(t, "target_lr", cfg.transfer.target_lr, "transfer");
    read(t, "meta_lr", cfg.transfer.meta_lr, "transfer");
    read(t, "batch_size", cfg.transfer.batch_size, "transfer");
    read(t, "checkpoint_every", cfg.transfer.checkpoint_every, "transfer");
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train", {"epochs", "learning_rate", "batch_size"});
    read(t, "epochs", cfg.train.epochs, "train");
    read(t, "learning_rate", cfg.train.learning_rate, "train");
    read(t, "batch_size", cfg.train.batch_size, "train");
  }
  cfg.simulation.num_trajectories = 0;
  if (j.contains("simulation")) {
    const auto& s = j.at("simulation");
    check_keys(s, "simulation", {"tau", "num_trajectories", "horizon"});
    read(s, "tau", cfg.simulation.tau, "simulation");
    read(s, "num_trajectories", cfg.simulation.num_trajectories, "simulation");
    read(s, "horizon", cfg.simulation.horizon, "simulation");
  }
  if (j.contains("ablation")) {
    const auto& a = j.at("ablation");
    check_keys(a, "ablation", {"half_open", "post_hoc"});
    read(a, "half_open", cfg.half_open, "ablation");
    read(a, "post_hoc", cfg.post_hoc, "ablation");
  }
  if (!j.contains("cities") || !j.at("cities").is_array() || j.at("cities").empty()) {
    throw ConfigError("config needs a non-empty 'cities' list");
  }
  std::set<std::string> names;
  for (const auto& c : j.at("cities")) {
    check_keys(c, "cities[]", {"name", "synth", "ingest", "dataset"});
    CitySpec spec;
    read(c, "name", spec.name, "cities[]");
    if (spec.name.empty()) throw ConfigError("every city needs a name");
    if (!names.insert(spec.name).second) throw ConfigError("duplicate city '" + spec.name + "'");
    const int kinds = static_cast<int>(c.contains("synth")) + static_cast<int>(c.contains("ingest")) +
                      static_cast<int>(c.contains("dataset"));
    if (kinds != 1) {
      throw ConfigError("city '" + spec.name + "' needs exactly one of synth, ingest, dataset");
    }
    if (c.contains("synth")) {
      spec.kind = CitySpec::Kind::synth;
      spec.synth = detail::parse_synth(c.at("synth"), spec.name);
    } else if (c.contains("ingest")) {
      spec.kind = CitySpec::Kind::ingest;
      const auto& in = c.at("ingest");
      const std::string where = "cities." + spec.name + ".ingest";
      check_keys(in, where, {"path", "split_seed", "min_daily_visits"});
      std::string path;
      read(in, "path", path, where);
      spec.path = std::filesystem::path(path).is_absolute() ? std::filesystem::path(path)
                                                            : base_dir / path;
      spec.ingest.name = spec.name;
      read(in, "split_seed", spec.ingest.split_seed, where);
      read(in, "min_daily_visits", spec.ingest.min_daily_visits, where);
      if (!std::filesystem::exists(spec.path)) {
        throw ConfigError("input file " + spec.path.string() + " does not exist");
      }
    } else {
      spec.kind = CitySpec::Kind::dataset;
      std::string path;
      read(c, "dataset", path, "cities." + spec.name);
      spec.path = std::filesystem::path(path).is_absolute() ? std::filesystem::path(path)
                                                            : base_dir / path;
      if (!std::filesystem::is_directory(spec.path)) {
        throw ConfigError("dataset directory " + spec.path.string() + " does not exist");
      }
    }
    cfg.cities.push_back(std::move(spec));
  }
  read(j, "target", cfg.target, "config");
  if (cfg.target.empty()) cfg.target = cfg.cities.back().name;
  cfg.city(cfg.target);
  if (j.contains("sources")) {
    std::vector<std::string> src;
    read(j, "sources", src, "config");
    cfg.sources = src;
  }
  if (cfg.seeds.empty()) throw ConfigError("seed list must not be empty");
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, path.parent_path().empty() ? "." : path.parent_path());
}

/// Effective configuration as canonical JSON (object keys sorted).
inline nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["model"] = {{"hidden_dim", cfg.model.hidden_dim},   {"num_heads", cfg.model.num_heads},
                {"num_layers", cfg.model.num_layers},   {"proj_layers", cfg.model.proj_layers},
                {"max_seq_len", cfg.model.max_seq_len}, {"dropout", cfg.model.dropout}};
  const auto& t = cfg.transfer;
  j["transfer"] = {{"meta_epochs", t.meta_epochs}, {"source_epochs", t.source_epochs},
                   {"target_epochs", t.target_epochs}, {"source_lr", t.source_lr},
                   {"target_lr", t.target_lr},     {"meta_lr", t.meta_lr},
                   {"batch_size", t.batch_size},   {"checkpoint_every", t.checkpoint_every}};
  j["train"] = {{"epochs", cfg.train.epochs},
                {"learning_rate", cfg.train.learning_rate},
                {"batch_size", cfg.train.batch_size}};
  j["simulation"] = {{"tau", cfg.simulation.tau},
                     {"num_trajectories", cfg.simulation.num_trajectories},
                     {"horizon", cfg.simulation.horizon}};
  j["ablation"] = {{"half_open", cfg.half_open}, {"post_hoc", cfg.post_hoc}};
  j["data"] = nlohmann::json::array();
  for (const auto& c : cfg.cities) {
    nlohmann::json cj{{"name", c.name}};
    if (c.kind == CitySpec::Kind::synth) {
      const auto& s = c.synth;
      cj["synth"] = {{"seed", s.seed},
                     {"structure_seed", s.structure_seed},
                     {"relabel_seed", s.relabel_seed},
                     {"split_seed", s.split_seed},
                     {"num_locations", s.num_locations},
                     {"num_users", s.num_users},
                     {"days", s.days},
                     {"zipf_gamma", s.zipf_gamma},
                     {"extent_km", s.extent_km},
                     {"center_lat", s.center_lat},
                     {"center_lon", s.center_lon},
                     {"min_steps", s.min_steps},
                     {"max_steps", s.max_steps},
                     {"locality_km", s.locality_km},
                     {"jump_prob", s.jump_prob},
                     {"return_home_prob", s.return_home_prob}};
    } else if (c.kind == CitySpec::Kind::ingest) {
      cj["ingest"] = {{"path", c.path.generic_string()},
                      {"split_seed", c.ingest.split_seed},
                      {"min_daily_visits", c.ingest.min_daily_visits}};
    } else {
      cj["dataset"] = c.path.generic_string();
    }
    j["data"].push_back(cj);
  }
  j["target"] = cfg.target;
  if (cfg.sources) j["sources"] = *cfg.sources;
  j["seeds"] = cfg.seeds;
  return j;
}

inline std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a(to_json(cfg).dump())); }

/// Hash of the data description alone (cities, target, seeds).
inline std::string data_hash(const RunConfig& cfg) {
  const auto j = to_json(cfg);
  nlohmann::json d{{"data", j["data"]}, {"target", j["target"]}, {"seeds", j["seeds"]}};
  return hex64(fnv1a(d.dump()));
}

// ---------------------------------------------------------------------------
// Helpers

inline CityDataset resolve_city(const CitySpec& spec, std::vector<std::string>* warnings = nullptr) {
  switch (spec.kind) {
    case CitySpec::Kind::synth: return synth_city(spec.synth);
    case CitySpec::Kind::ingest: return ingest_file(spec.path, spec.ingest, warnings);
    case CitySpec::Kind::dataset: {
      auto ds = load_dataset(spec.path);
      ds.name = spec.name;
      return ds;
    }
  }
  throw ConfigError("unknown city kind");
}

inline ModelConfig model_config_for(const RunConfig& cfg, const CityDataset& ds, bool half_open) {
  ModelConfig m = cfg.model;
  m.num_locations = static_cast<int>(ds.num_locations());
  m.half_open = half_open;
  m.validate();
  return m;
}

inline std::filesystem::path seed_dir(const RunConfig& cfg, const std::string& command,
                                      const std::string& city, std::uint64_t seed) {
  return cfg.output / command / city / ("seed-" + std::to_string(seed));
}

inline void write_manifest(const std::filesystem::path& dir, const RunConfig& cfg,
                           const std::string& command, const std::string& city,
                           std::optional<std::uint64_t> seed, nlohmann::json extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json j = {{"command", command},
                      {"city", city},
                      {"config_hash", config_hash(cfg)},
                      {"data_hash", data_hash(cfg)},
                      {"code_version", kCodeVersion}};
  if (seed) j["seed"] = *seed;
  if (!extra.is_null()) j["details"] = std::move(extra);
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write manifest in " + dir.string());
  os << j.dump(2) << '\n';
}

inline void write_trace(const std::filesystem::path& path, const std::vector<TraceRow>& rows) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  write_trace_csv(os, rows);
}

inline std::vector<std::string> source_names(const RunConfig& cfg) {
  if (cfg.sources) {
    for (const auto& s : *cfg.sources) {
      cfg.city(s);
      if (s == cfg.target) throw ConfigError("the target city cannot also be a source");
    }
    return *cfg.sources;
  }
  std::vector<std::string> out;
  for (const auto& c : cfg.cities)
    if (c.name != cfg.target) out.push_back(c.name);
  return out;
}

/// Every non-empty subset of `names` in binary-counting order. The empty
/// subset is plain single-city training (see cmd_train).
inline std::vector<std::vector<std::string>> source_subsets(const std::vector<std::string>& names) {
  std::vector<std::vector<std::string>> out;
  const std::size_t n = names.size();
  for (std::size_t mask = 1; mask < (std::size_t{1} << n); ++mask) {
    std::vector<std::string> subset;
    for (std::size_t i = 0; i < n; ++i)
      if (mask & (std::size_t{1} << i)) subset.push_back(names[i]);
    out.push_back(std::move(subset));
  }
  return out;
}

inline std::string subset_label(const std::vector<std::string>& subset) {
  if (subset.empty()) return "none";
  std::string out;
  for (const auto& s : subset) out += (out.empty() ? "" : "+") + s;
  return out;
}

// ---------------------------------------------------------------------------
// Commands

inline std::vector<std::filesystem::path> cmd_synth(const RunConfig& cfg) {
  std::vector<std::filesystem::path> out;
  for (const auto& c : cfg.cities) {
    if (c.kind != CitySpec::Kind::synth) continue;
    const auto dir = cfg.output / "synth" / c.name;
    save_dataset(dir, synth_city(c.synth));
    write_manifest(dir, cfg, "synth", c.name, c.synth.seed);
    out.push_back(dir);
  }
  return out;
}

inline std::vector<std::filesystem::path> cmd_ingest(const RunConfig& cfg) {
  std::vector<std::filesystem::path> out;
  for (const auto& c : cfg.cities) {
    if (c.kind != CitySpec::Kind::ingest) continue;
    std::vector<std::string> warnings;
    const auto dir = cfg.output / "ingest" / c.name;
    save_dataset(dir, ingest_file(c.path, c.ingest, &warnings));
    std::ofstream w(dir / "warnings.txt", std::ios::trunc);
    for (const auto& msg : warnings) w << msg << '\n';
    if (cfg.verbose)
      for (const auto& msg : warnings) std::cerr << "warning: " << c.name << ": " << msg << '\n';
    write_manifest(dir, cfg, "ingest", c.name, std::nullopt);
    out.push_back(dir);
  }
  return out;
}

/// Trains one city model (single-city setting) for one seed.
inline CityModel train_city(const RunConfig& cfg, const CityDataset& ds, std::uint64_t seed,
                            bool half_open, std::vector<TraceRow>* trace = nullptr) {
  if (cfg.train.epochs < 1) throw ConfigError("train.epochs must be at least 1");
  if (cfg.train.batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
  CityModel city = make_single_city_model(model_config_for(cfg, ds, half_open), ds.name, seed,
                                          cfg.train.learning_rate);
  for (int e = 1; e <= cfg.train.epochs; ++e) {
    const double loss = internal_update(city, ds.train, 1, cfg.train.batch_size).front();
    if (cfg.verbose) std::cerr << "train city=" << ds.name << " seed=" << seed << " epoch=" << e
                               << " loss=" << loss << '\n';
    if (trace) trace->push_back({1, "train", ds.name, e, loss});
  }
  return city;
}

inline std::vector<std::filesystem::path> cmd_train(const RunConfig& cfg) {
  const CityDataset ds = resolve_city(cfg.city(cfg.target));
  std::vector<std::filesystem::path> out;
  for (std::uint64_t seed : cfg.seeds) {
    std::vector<TraceRow> trace;
    CityModel city = train_city(cfg, ds, seed, cfg.half_open, &trace);
    const auto dir = seed_dir(cfg, "train", cfg.target, seed);
    std::filesystem::create_directories(dir);
    save_checkpoint(dir / "model.ckpt", city.parameters());
    write_trace(dir / "trace.csv", trace);
    write_manifest(dir, cfg, "train", cfg.target, seed,
                   {{"valid_loss", evaluate_loss(city.model, ds.valid.empty() ? ds.train : ds.valid)}});
    out.push_back(dir);
  }
  return out;
}

struct TransferRun {
  CityModelRegistry registry;
  TransferResult result;
};

/// One transfer run of the configured target from `sources` for `seed`.
inline TransferRun transfer_city(const RunConfig& cfg, const CityDataset& target,
                                 const std::vector<CityDataset>& sources, std::uint64_t seed,
                                 bool half_open, const std::filesystem::path& checkpoint_dir = {}) {
  std::vector<std::pair<std::string, ModelConfig>> src_cfgs;
  std::vector<const CityDataset*> src_ptrs;
  for (const auto& s : sources) {
    src_cfgs.emplace_back(s.name, model_config_for(cfg, s, half_open));
    src_ptrs.push_back(&s);
  }
  TransferConfig tc = cfg.transfer;
  tc.checkpoint_dir = checkpoint_dir;
  tc.log_progress = cfg.verbose;
  TransferRun run{make_registry(model_config_for(cfg, target, half_open), target.name, src_cfgs,
                                seed, tc),
                  {}};
  run.result = run_transfer(run.registry, src_ptrs, target, tc);
  return run;
}

/// Runs transfer for the configured sources, or for every subset of them
/// when `combinations` is set. Returns the output directories.
inline std::vector<std::filesystem::path> cmd_transfer(const RunConfig& cfg, bool combinations = false) {
  const CityDataset target = resolve_city(cfg.city(cfg.target));
  const auto names = source_names(cfg);
  std::map<std::string, CityDataset> datasets;
  for (const auto& n : names) datasets.emplace(n, resolve_city(cfg.city(n)));
  const auto subsets = combinations ? source_subsets(names)
                                    : std::vector<std::vector<std::string>>{names};
  std::vector<std::filesystem::path> out;
  for (const auto& subset : subsets) {
    std::vector<CityDataset> sources;
    for (const auto& n : subset) sources.push_back(datasets.at(n));
    for (std::uint64_t seed : cfg.seeds) {
      auto dir = combinations ? cfg.output / "transfer" / cfg.target / subset_label(subset) /
                                    ("seed-" + std::to_string(seed))
                              : seed_dir(cfg, "transfer", cfg.target, seed);
      std::filesystem::create_directories(dir);
      auto run = transfer_city(cfg, target, sources, seed, cfg.half_open, dir);
      write_trace(dir / "trace.csv", run.result.trace);
      const auto& model = run.registry.target->model;
      write_manifest(dir, cfg, "transfer", cfg.target, seed,
                     {{"sources", subset},
                      {"valid_loss", evaluate_loss(model, target.valid.empty() ? target.train
                                                                               : target.valid)}});
      out.push_back(dir);
    }
  }
  return out;
}

inline SimulationConfig simulation_for(const RunConfig& cfg, const CityDataset& ds,
                                       std::uint64_t seed, bool post_hoc) {
  SimulationConfig sc = cfg.simulation;
  if (sc.num_trajectories <= 0) sc.num_trajectories = static_cast<int>(std::max<std::size_t>(1, ds.test.size()));
  sc.seed = derive_seed(seed, "simulation");
  sc.post_hoc = post_hoc;
  return sc;
}

inline std::vector<std::filesystem::path> cmd_simulate(const RunConfig& cfg,
                                                       const std::optional<std::filesystem::path>& checkpoint = {}) {
  const CityDataset ds = resolve_city(cfg.city(cfg.target));
  std::vector<std::filesystem::path> out;
  for (std::uint64_t seed : cfg.seeds) {
    const auto ckpt = checkpoint ? *checkpoint : seed_dir(cfg, "transfer", cfg.target, seed) / "target.ckpt";
    const ParameterSet params = load_checkpoint(ckpt);
    HalfOpenTransformer model(model_config_for(cfg, ds, cfg.half_open), 0);
    load_parameters(model, params);
    const SimulationConfig sc = simulation_for(cfg, ds, seed, cfg.post_hoc);
    const Corpus sim = simulate(model, sc, ds.vocab, ds.frequency);
    const auto dir = seed_dir(cfg, "simulate", cfg.target, seed);
    std::filesystem::create_directories(dir);
    save_simulation(dir / "sim.tsv", sim,
                    {hex64(checkpoint_hash(params)), sc.tau, sc.post_hoc, sc.seed,
                     sc.num_trajectories, sc.horizon});
    write_manifest(dir, cfg, "simulate", cfg.target, seed, {{"checkpoint", ckpt.generic_string()}});
    out.push_back(dir);
  }
  return out;
}

inline void write_mean_report(const std::filesystem::path& path,
                              const std::vector<MetricReport>& reports) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << "metric,mean_jsd,trials\n";
  for (const auto& name : metric_names()) {
    double total = 0.0;
    for (const auto& r : reports) total += r.score(name);
    os << name << ',' << format_double(total / static_cast<double>(reports.size())) << ','
       << reports.size() << '\n';
  }
}

inline std::vector<std::filesystem::path> cmd_evaluate(const RunConfig& cfg,
                                                       const std::optional<std::filesystem::path>& real_path = {},
                                                       const std::optional<std::filesystem::path>& sim_path = {}) {
  const CityDataset ds = resolve_city(cfg.city(cfg.target));
  const Corpus real = real_path ? load_corpus(*real_path) : ds.test;
  std::vector<MetricReport> reports;
  std::vector<std::filesystem::path> out;
  for (std::uint64_t seed : cfg.seeds) {
    const Corpus sim = load_corpus(sim_path ? *sim_path : seed_dir(cfg, "simulate", cfg.target, seed) / "sim.tsv");
    MetricReport report = evaluate(real, sim, ds.vocab, cfg.target, seed, config_hash(cfg));
    const auto dir = seed_dir(cfg, "evaluate", cfg.target, seed);
    save_report(dir, report);
    write_manifest(dir, cfg, "evaluate", cfg.target, seed);
    reports.push_back(std::move(report));
    out.push_back(dir);
  }
  write_mean_report(cfg.output / "evaluate" / cfg.target / "mean.csv", reports);
  return out;
}

/// Row labels of the ablation table, in display order, with the
/// (half_open, post_hoc) switches of each row.
struct AblationRow {
  const char* label;
  bool half_open;
  bool post_hoc;
};
inline constexpr AblationRow kAblationRows[] = {
    {"NONE", false, false}, {"w/o HA", false, true}, {"w/o PO", true, false}, {"COLA", true, true}};

inline std::string ablation_dir_name(const AblationRow& row) {
  std::string s = row.label;
  std::replace(s.begin(), s.end(), '/', '-');
  std::replace(s.begin(), s.end(), ' ', '_');
  return s;
}

struct AblationTable {
  /// reports[row][seed index]
  std::vector<std::vector<MetricReport>> reports;
};

inline void write_ablation_table(std::ostream& os, const AblationTable& table) {
  os << "variant";
  for (const auto& n : metric_names()) os << ',' << n;
  os << '\n';
  for (std::size_t r = 0; r < std::size(kAblationRows); ++r) {
    os << kAblationRows[r].label;
    for (const auto& n : metric_names()) {
      double total = 0.0;
      for (const auto& rep : table.reports[r]) total += rep.score(n);
      os << ',' << format_double(total / static_cast<double>(table.reports[r].size()));
    }
    os << '\n';
  }
}

/// The 2x2 grid {half-open on/off} x {post-hoc on/off}; every variant uses
/// the same seeds and data splits.
inline AblationTable cmd_ablate(const RunConfig& cfg) {
  const CityDataset target = resolve_city(cfg.city(cfg.target));
  std::vector<CityDataset> sources;
  for (const auto& n : source_names(cfg)) sources.push_back(resolve_city(cfg.city(n)));
  AblationTable table;
  table.reports.resize(std::size(kAblationRows));
  for (std::uint64_t seed : cfg.seeds) {
    for (bool half_open : {false, true}) {
      auto run = transfer_city(cfg, target, sources, seed, half_open);
      const auto& model = run.registry.target->model;
      for (std::size_t r = 0; r < std::size(kAblationRows); ++r) {
        const auto& row = kAblationRows[r];
        if (row.half_open != half_open) continue;
        const SimulationConfig sc = simulation_for(cfg, target, seed, row.post_hoc);
        const Corpus sim = simulate(model, sc, target.vocab, target.frequency);
        MetricReport report = evaluate(target.test, sim, target.vocab, target.name, seed, data_hash(cfg));
        const auto dir = seed_dir(cfg, "ablate", cfg.target, seed) / ablation_dir_name(row);
        save_report(dir, report);
        write_manifest(dir, cfg, "ablate", cfg.target, seed,
                       {{"variant", row.label}, {"half_open", row.half_open}, {"post_hoc", row.post_hoc}});
        table.reports[r].push_back(std::move(report));
      }
    }
  }
  const auto dir = cfg.output / "ablate" / cfg.target;
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / "table.csv", std::ios::trunc);
  write_ablation_table(os, table);
  return table;
}

/// Collects per-seed evaluation reports of the target into a summary with
/// one row per seed and a mean row.
inline std::filesystem::path cmd_report(const RunConfig& cfg, std::ostream* echo = nullptr) {
  std::ostringstream os;
  os << "seed";
  for (const auto& n : metric_names()) os << ',' << n;
  os << '\n';
  std::map<std::string, double> totals;
  std::size_t found = 0;
  for (std::uint64_t seed : cfg.seeds) {
    const auto path = seed_dir(cfg, "evaluate", cfg.target, seed) / "report.csv";
    if (!std::filesystem::exists(path)) continue;
    const auto scores = read_report_csv(path);
    os << seed;
    for (const auto& n : metric_names()) {
      const double v = scores.count(n) ? scores.at(n) : 0.0;
      totals[n] += v;
      os << ',' << format_double(v);
    }
    os << '\n';
    ++found;
  }
  if (found == 0) throw IoError("no evaluation reports found for " + cfg.target);
  os << "mean";
  for (const auto& n : metric_names()) os << ',' << format_double(totals[n] / static_cast<double>(found));
  os << '\n';
  const auto dir = cfg.output / "report" / cfg.target;
  std::filesystem::create_directories(dir);
  std::ofstream file(dir / "summary.csv", std::ios::trunc);
  file << os.str();
  if (echo) *echo << os.str();
  return dir / "summary.csv";
}

}  // namespace cola
