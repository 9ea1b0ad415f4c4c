#pragma once

// Cross-city transfer loop.
//
// For each meta epoch every source city, in declared order, clones the
// meta model's shared parameters, trains on its own train split, and then
// hands the gradient of its test-split loss back to the meta model's shared
// parameters (first order). The target then clones the meta shared group
// and trains on its train split. Private parameters never leave a model.

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cola/data.hpp"
#include "cola/error.hpp"
#include "cola/model.hpp"
#include "cola/optim.hpp"
#include "cola/parameters.hpp"
#include "cola/util.hpp"

namespace cola {

struct TransferConfig {
  int meta_epochs = 5;
  int source_epochs = 1;
  int target_epochs = 50;
  double source_lr = 1e-3;
  double target_lr = 1e-3;
  double meta_lr = 5e-4;
  int batch_size = 32;
  /// Checkpoint every n meta epochs (0: only after the final epoch).
  int checkpoint_every = 0;
  /// Where checkpoints go; empty disables them.
  std::filesystem::path checkpoint_dir;
  bool log_progress = false;

  void validate() const {
    if (meta_epochs < 1 || source_epochs < 1 || target_epochs < 1) {
      throw ConfigError("epoch counts must be at least 1");
    }
    if (!(source_lr > 0.0) || !(target_lr > 0.0) || !(meta_lr > 0.0)) {
      throw ConfigError("learning rates must be positive");
    }
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  }
};

/// A city model together with the state that persists across meta epochs:
/// its optimizer moments, its dropout stream and its epoch counter (which
/// seeds the per-epoch shuffle).
struct CityModel {
  std::string name;
  HalfOpenTransformer model;
  Optimizer optimizer;
  Rng dropout_rng;
  std::uint64_t shuffle_seed = 0;
  int epochs_done = 0;

  CityModel(std::string city, ModelConfig config, std::uint64_t seed, double learning_rate)
      : name(std::move(city)),
        model(config, derive_seed(seed, "model")),
        optimizer(Optimizer::adam(learning_rate)),
        dropout_rng(derive_seed(seed, "dropout")),
        shuffle_seed(derive_seed(seed, "shuffle")) {}

  ParameterSet& parameters() { return model.parameters(); }
  const ParameterSet& parameters() const { return model.parameters(); }
};

struct TraceRow {
  int meta_epoch = 0;
  std::string phase;  // "train", "source", "meta" or "target"
  std::string city;
  int epoch = 0;      // 1-based training epoch; 0 for the meta gradient pass
  double mean_loss = 0.0;
  bool operator==(const TraceRow&) const = default;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& rows) {
  os << "meta_epoch,phase,city,epoch,mean_loss\n";
  for (const auto& r : rows) {
    os << r.meta_epoch << ',' << r.phase << ',' << r.city << ',' << r.epoch << ','
       << format_double(r.mean_loss) << '\n';
  }
}

// ---------------------------------------------------------------------------

/// The location table is sized by a city's vocabulary. When every
/// parameter is shared and two cities differ in N, it stays city-local.
inline bool city_local(const std::string& name, const Shape& a, const Shape& b) {
  return name == "embedding.location" && a != b;
}

/// Overwrites every shared parameter of `target` with a copy of the
/// same-named parameter of `meta`. Private parameters are not touched.
inline void meta_clone(ParameterSet& target, const ParameterSet& meta) {
  const auto shared = target.names(Group::Shared);
  if (shared != meta.names(Group::Shared)) {
    throw RegistryError("shared parameter names differ between model and meta model");
  }
  for (const auto& name : shared) {
    const Tensor& src = meta.at(name);
    Tensor& dst = target.at(name);
    if (src.shape() != dst.shape() && !city_local(name, src.shape(), dst.shape())) {
      throw RegistryError("shared parameter '" + name + "' has shape " +
                          shape_string(dst.shape()) + " but meta holds " +
                          shape_string(src.shape()));
    }
  }
  for (const auto& name : shared) {
    if (city_local(name, meta.at(name).shape(), target.at(name).shape())) continue;
    target.at(name).assign(meta.at(name));
  }
}

/// Runs `epochs` passes of shuffled minibatch training on every parameter
/// of `city`; returns the mean training loss of each epoch.
inline std::vector<double> internal_update(CityModel& city, const Corpus& train, int epochs,
                                           int batch_size) {
  if (train.empty()) throw ArgumentError("internal update on an empty corpus for " + city.name);
  if (epochs < 0) throw ArgumentError("epochs must be non-negative");
  const auto& cfg = city.model.config();
  auto params = city.parameters().tensors();
  std::vector<double> trace;
  for (int e = 0; e < epochs; ++e) {
    const auto seed = derive_seed(city.shuffle_seed, "epoch",
                                  static_cast<std::uint64_t>(city.epochs_done));
    auto batches = make_batches(train, static_cast<std::size_t>(batch_size),
                                static_cast<std::size_t>(cfg.max_seq_len), seed,
                                cfg.begin_token());
    double weighted = 0.0;
    std::size_t positions = 0;
    for (const auto& batch : batches) {
      const std::size_t count = HalfOpenTransformer::prediction_count(batch);
      if (count == 0) continue;
      Tape tape;
      ForwardOptions opts;
      opts.training = true;
      opts.rng = &city.dropout_rng;
      Tensor loss = city.model.internal_loss(tape, batch, opts);
      tape.backward(loss);
      city.optimizer.step(params);
      weighted += loss.item() * static_cast<double>(count);
      positions += count;
    }
    ++city.epochs_done;
    trace.push_back(positions ? weighted / static_cast<double>(positions) : 0.0);
  }
  return trace;
}

/// Mean internal loss over a whole split in evaluation mode.
inline double evaluate_loss(const HalfOpenTransformer& model, const Corpus& split,
                            int batch_size = 64) {
  if (split.empty()) throw ArgumentError("cannot evaluate on an empty split");
  const auto& cfg = model.config();
  auto batches = make_batches(split, static_cast<std::size_t>(batch_size),
                              static_cast<std::size_t>(cfg.max_seq_len), 0, cfg.begin_token());
  double weighted = 0.0;
  std::size_t positions = 0;
  for (const auto& batch : batches) {
    const std::size_t count = HalfOpenTransformer::prediction_count(batch);
    if (count == 0) continue;
    Tape tape(false);
    weighted += model.internal_loss(tape, batch).item() * static_cast<double>(count);
    positions += count;
  }
  if (positions == 0) throw ArgumentError("split has no prediction positions");
  return weighted / static_cast<double>(positions);
}

/// Accumulates into `model`'s parameter gradients the gradient of the
/// mean internal loss over the whole split (evaluation mode, minibatches
/// weighted by their prediction counts). Returns that loss.
inline double accumulate_split_gradient(HalfOpenTransformer& model, const Corpus& split,
                                        int batch_size) {
  if (split.empty()) throw ArgumentError("meta gradient on an empty split");
  const auto& cfg = model.config();
  auto batches = make_batches(split, static_cast<std::size_t>(batch_size),
                              static_cast<std::size_t>(cfg.max_seq_len), 0, cfg.begin_token());
  std::size_t total = 0;
  for (const auto& b : batches) total += HalfOpenTransformer::prediction_count(b);
  if (total == 0) throw ArgumentError("split has no prediction positions");
  double loss_sum = 0.0;
  for (const auto& batch : batches) {
    const std::size_t count = HalfOpenTransformer::prediction_count(batch);
    if (count == 0) continue;
    const double weight = static_cast<double>(count) / static_cast<double>(total);
    Tape tape;
    Tensor loss = model.internal_loss(tape, batch);
    Tensor weighted = mul(tape, loss, Tensor::scalar(weight));
    tape.backward(weighted);
    loss_sum += loss.item() * weight;
  }
  return loss_sum;
}

/// theta_meta <- theta_meta - alpha * grad for every shared parameter of
/// `meta`, taking the gradient of the same-named parameter of `source`.
/// All of `source`'s gradients are cleared afterwards, so private gradients
/// are discarded.
inline void apply_meta_gradient(ParameterSet& meta, ParameterSet& source, double alpha) {
  if (!(alpha >= 0.0)) throw ArgumentError("meta learning rate must be non-negative");
  std::vector<Tensor> targets;
  for (auto& e : meta.entries()) {
    if (e.group != Group::Shared) continue;
    if (!source.contains(e.name)) {
      throw RegistryError("source model lacks shared parameter '" + e.name + "'");
    }
    const auto& src = source.entry(e.name);
    if (src.group != Group::Shared) {
      throw RegistryError("parameter '" + e.name + "' is not shared in the source model");
    }
    if (city_local(e.name, src.tensor.shape(), e.tensor.shape())) continue;
    if (src.tensor.shape() != e.tensor.shape()) {
      throw RegistryError("shared parameter '" + e.name + "' has shape " +
                          shape_string(src.tensor.shape()) + " in the source but " +
                          shape_string(e.tensor.shape()) + " in meta");
    }
    if (!src.tensor.has_grad()) {
      throw StateError("source parameter '" + e.name + "' has no gradient");
    }
    e.tensor.ensure_grad();
    auto g = e.tensor.grad();
    auto sg = src.tensor.grad();
    std::copy(sg.begin(), sg.end(), g.begin());
    targets.push_back(e.tensor);
  }
  Optimizer::sgd(alpha).step(targets);
  source.zero_grad();
}

/// First-order meta update from one adapted source model. Returns the
/// source's test-split loss.
inline double meta_update(ParameterSet& meta, HalfOpenTransformer& source, const Corpus& test,
                          double alpha, int batch_size) {
  source.parameters().zero_grad();
  const double loss = accumulate_split_gradient(source, test, batch_size);
  apply_meta_gradient(meta, source.parameters(), alpha);
  return loss;
}

// ---------------------------------------------------------------------------

/// The meta model, the source models in processing order, and the target.
struct CityModelRegistry {
  ParameterSet meta;
  std::vector<CityModel> sources;
  std::optional<CityModel> target;
};

/// Builds the registry for one target and a list of source cities. The
/// meta model is the shared group of a freshly initialized model using the
/// target's configuration and seed; the target model uses that same seed,
/// so with no sources the pipeline equals plain single-city training.
inline CityModelRegistry make_registry(const ModelConfig& target_config,
                                       const std::string& target_name,
                                       const std::vector<std::pair<std::string, ModelConfig>>& sources,
                                       std::uint64_t seed, const TransferConfig& config) {
  CityModelRegistry reg;
  const std::uint64_t target_seed = derive_seed(seed, "city.target");
  {
    HalfOpenTransformer init(target_config, derive_seed(target_seed, "model"));
    reg.meta = init.parameters().view(Group::Shared).deep_copy();
  }
  for (std::size_t k = 0; k < sources.size(); ++k) {
    reg.sources.emplace_back(sources[k].first, sources[k].second,
                             derive_seed(seed, "city.source", k), config.source_lr);
  }
  reg.target.emplace(target_name, target_config, target_seed, config.target_lr);
  const auto meta_names = reg.meta.names(Group::Shared);
  for (const auto& src : reg.sources) {
    if (src.parameters().names(Group::Shared) != meta_names) {
      throw RegistryError("source '" + src.name + "' has a different shared group");
    }
    for (const auto& name : meta_names) {
      const Shape& a = src.parameters().at(name).shape();
      const Shape& b = reg.meta.at(name).shape();
      if (a != b && !city_local(name, a, b)) {
        throw RegistryError("source '" + src.name + "' disagrees on the shape of '" + name + "'");
      }
    }
  }
  return reg;
}

/// Single-city training with the same seeding as the target of a transfer
/// run; `city` is built exactly as make_registry builds a target.
inline CityModel make_single_city_model(const ModelConfig& config, const std::string& name,
                                        std::uint64_t seed, double learning_rate) {
  return CityModel(name, config, derive_seed(seed, "city.target"), learning_rate);
}

struct TransferHooks {
  enum class Role { source, target };
  /// Called around every meta clone; `before` is a deep copy taken just
  /// before the clone, `after` is the live model. Only snapshotted when set.
  std::function<void(Role role, const std::string& city, const ParameterSet& before,
                     const ParameterSet& after, const ParameterSet& meta)>
      on_clone;
};

struct TransferResult {
  std::vector<TraceRow> trace;
};

inline void checkpoint_registry(const CityModelRegistry& reg, const std::filesystem::path& dir,
                                const std::string& tag) {
  save_checkpoint(dir / ("meta" + tag + ".ckpt"), reg.meta);
  for (const auto& src : reg.sources) {
    save_checkpoint(dir / ("source-" + src.name + tag + ".ckpt"), src.parameters());
  }
  save_checkpoint(dir / ("target" + tag + ".ckpt"), reg.target->parameters());
}

/// Runs the full transfer loop; the trained target lives in reg.target.
inline TransferResult run_transfer(CityModelRegistry& reg, const std::vector<const CityDataset*>& sources,
                                   const CityDataset& target, const TransferConfig& config,
                                   const TransferHooks& hooks = {}) {
  config.validate();
  if (!reg.target) throw RegistryError("registry has no target model");
  if (sources.size() != reg.sources.size()) {
    throw RegistryError("registry has " + std::to_string(reg.sources.size()) +
                        " source models but " + std::to_string(sources.size()) +
                        " source datasets were given");
  }
  TransferResult result;
  auto clone = [&](TransferHooks::Role role, CityModel& city) {
    if (hooks.on_clone) {
      const ParameterSet before = city.parameters().deep_copy();
      meta_clone(city.parameters(), reg.meta);
      hooks.on_clone(role, city.name, before, city.parameters(), reg.meta);
    } else {
      meta_clone(city.parameters(), reg.meta);
    }
  };
  auto log = [&](const TraceRow& row) {
    if (config.log_progress) {
      std::cerr << "meta_epoch=" << row.meta_epoch << " phase=" << row.phase
                << " city=" << row.city << " epoch=" << row.epoch
                << " loss=" << row.mean_loss << '\n';
    }
    result.trace.push_back(row);
  };

  for (int e = 1; e <= config.meta_epochs; ++e) {
    for (std::size_t k = 0; k < reg.sources.size(); ++k) {
      CityModel& src = reg.sources[k];
      clone(TransferHooks::Role::source, src);
      const auto losses =
          internal_update(src, sources[k]->train, config.source_epochs, config.batch_size);
      for (std::size_t i = 0; i < losses.size(); ++i) {
        log({e, "source", src.name, static_cast<int>(i) + 1, losses[i]});
      }
      const double test_loss =
          meta_update(reg.meta, src.model, sources[k]->test, config.meta_lr, config.batch_size);
      log({e, "meta", src.name, 0, test_loss});
    }
    CityModel& tgt = *reg.target;
    clone(TransferHooks::Role::target, tgt);
    const auto losses = internal_update(tgt, target.train, config.target_epochs, config.batch_size);
    for (std::size_t i = 0; i < losses.size(); ++i) {
      log({e, "target", tgt.name, static_cast<int>(i) + 1, losses[i]});
    }
    if (!config.checkpoint_dir.empty() && config.checkpoint_every > 0 &&
        e % config.checkpoint_every == 0 && e != config.meta_epochs) {
      checkpoint_registry(reg, config.checkpoint_dir, "-epoch" + std::to_string(e));
    }
  }
  if (!config.checkpoint_dir.empty()) checkpoint_registry(reg, config.checkpoint_dir, "");
  return result;
}

}  // namespace cola
