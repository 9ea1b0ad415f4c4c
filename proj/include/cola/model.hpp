#pragma once

// Half-open Transformer.
//
// Location and positional embeddings, value/output projections, norms and
// MLPs are private to a city. The shared input projection and the
// query/key projections are shared, so they can be moved between cities
// whose vocabularies differ. Output logits reuse the location embedding
// table (weight tying). Vocabulary id N is a begin-of-sequence token: it has
// an embedding row but no output logit.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cola/data.hpp"
#include "cola/error.hpp"
#include "cola/parameters.hpp"
#include "cola/tensor.hpp"
#include "cola/util.hpp"

namespace cola {

struct ModelConfig {
  int num_locations = 0;
  int hidden_dim = 96;
  int num_heads = 4;
  int num_layers = 2;
  int proj_layers = 1;
  int max_seq_len = 24;
  double dropout = 0.1;
  /// When false every parameter is tagged shared (full parameter sharing).
  bool half_open = true;

  int vocab_size() const noexcept { return num_locations + 1; }
  int begin_token() const noexcept { return num_locations; }

  void validate() const {
    if (num_locations < 1) throw ConfigError("num_locations must be positive");
    if (hidden_dim < 1 || num_heads < 1 || num_layers < 1 || max_seq_len < 1) {
      throw ConfigError("hidden_dim, num_heads, num_layers and max_seq_len must be positive");
    }
    if (hidden_dim % num_heads != 0) {
      throw ConfigError("num_heads (" + std::to_string(num_heads) +
                        ") must divide hidden_dim (" + std::to_string(hidden_dim) + ")");
    }
    if (proj_layers < 1 || proj_layers > 3) throw ConfigError("proj_layers must be 1, 2 or 3");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  }
};

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;  // required when training with dropout
  /// Receives one entry per layer when set.
  std::vector<AttentionWeights>* attention = nullptr;
};

class HalfOpenTransformer {
 public:
  static constexpr double kInitStd = 0.02;

  /// Shared parameters are drawn from one seed-derived stream and private
  /// parameters from another, so two models built with the same seed agree
  /// on their shared group regardless of vocabulary size.
  HalfOpenTransformer(ModelConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng shared_rng(derive_seed(seed, "init.shared"));
    Rng private_rng(derive_seed(seed, "init.private"));
    build(shared_rng, private_rng);
  }

  /// Copies share parameter storage; a clone owns fresh storage.
  HalfOpenTransformer clone() const {
    HalfOpenTransformer copy(*this);
    copy.params_ = params_.deep_copy();
    return copy;
  }

  const ModelConfig& config() const noexcept { return config_; }
  ParameterSet& parameters() noexcept { return params_; }
  const ParameterSet& parameters() const noexcept { return params_; }

  /// Same storage as the location embedding table.
  const Tensor& output_weight() const { return params_.at("embedding.location"); }

  // -- building blocks ------------------------------------------------------

  /// row t = location_embedding[ids[t]] + position_embedding[t].
  Tensor embed(Tape& tape, std::span<const int> ids) const {
    if (ids.size() > static_cast<std::size_t>(config_.max_seq_len)) {
      throw ConfigError("sequence of " + std::to_string(ids.size()) +
                        " tokens exceeds max_seq_len " + std::to_string(config_.max_seq_len));
    }
    std::vector<int> pos(ids.size());
    for (std::size_t t = 0; t < ids.size(); ++t) pos[t] = static_cast<int>(t);
    return embed_positions(tape, ids, pos);
  }

  /// Private and shared views of h for `layer`; each is [rows x d].
  std::pair<Tensor, Tensor> project(Tape& tape, const Tensor& h, int layer) const {
    const std::string base = "layer" + std::to_string(layer);
    return {projection_chain(tape, h, base + ".proj_private"),
            projection_chain(tape, h, base + ".proj_shared")};
  }

  /// Queries and keys from h_shared, values from h_private, causal
  /// multi-head attention, then the output projection.
  Tensor attention(Tape& tape, const Tensor& h_shared, const Tensor& h_private, int layer,
                   const AttentionLayout& layout, std::span<const std::size_t> lengths,
                   const ForwardOptions& options = {}) const {
    const std::string base = "layer" + std::to_string(layer) + ".attn.";
    Tensor q = matmul(tape, h_shared, params_.at(base + "w_q"));
    Tensor k = matmul(tape, h_shared, params_.at(base + "w_k"));
    Tensor v = matmul(tape, h_private, params_.at(base + "w_v"));
    AttentionWeights* capture = nullptr;
    if (options.attention) {
      options.attention->emplace_back();
      capture = &options.attention->back();
    }
    const double rate = options.training ? config_.dropout : 0.0;
    Tensor mixed = causal_attention(tape, q, k, v, layout, lengths, rate, options.rng, capture);
    return matmul(tape, mixed, params_.at(base + "w_o"));
  }

  // -- full model -----------------------------------------------------------

  /// Logits [B x L x N] for a padded batch; position t scores the location
  /// that follows token t.
  Tensor forward(Tape& tape, const Batch& batch, const ForwardOptions& options = {}) const {
    const std::size_t B = batch.batch_size, L = batch.length;
    if (L > static_cast<std::size_t>(config_.max_seq_len)) {
      throw ConfigError("batch length " + std::to_string(L) + " exceeds max_seq_len " +
                        std::to_string(config_.max_seq_len));
    }
    if (options.training && config_.dropout > 0.0 && options.rng == nullptr) {
      throw ArgumentError("training forward with dropout needs a generator");
    }
    std::vector<int> pos(B * L);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 0; t < L; ++t) pos[b * L + t] = static_cast<int>(t);
    Tensor h = embed_positions(tape, batch.tokens, pos);
    const AttentionLayout layout{B, L, static_cast<std::size_t>(config_.num_heads)};
    const double rate = options.training ? config_.dropout : 0.0;
    for (int l = 0; l < config_.num_layers; ++l) {
      const std::string base = "layer" + std::to_string(l);
      auto [h_private, h_shared] = project(tape, h, l);
      Tensor z = attention(tape, h_shared, h_private, l, layout, batch.lengths, options);
      Tensor h_bar = layer_norm(tape, add(tape, h, z), params_.at(base + ".norm1.gain"),
                                params_.at(base + ".norm1.bias"));
      Tensor inner = relu(tape, add_bias(tape, matmul(tape, h_bar, params_.at(base + ".mlp.w1")),
                                         params_.at(base + ".mlp.b1")));
      Tensor mlp = add_bias(tape, matmul(tape, inner, params_.at(base + ".mlp.w2")),
                            params_.at(base + ".mlp.b2"));
      if (rate > 0.0) mlp = dropout(tape, mlp, rate, *options.rng);
      h = layer_norm(tape, mlp, params_.at(base + ".norm2.gain"),
                     params_.at(base + ".norm2.bias"));
    }
    const std::size_t n = static_cast<std::size_t>(config_.num_locations);
    Tensor out_weight = slice_rows(tape, output_weight(), 0, n);
    Tensor logits = matmul_nt(tape, h, out_weight);
    return reshape(tape, logits, Shape{B, L, n});
  }

  /// Logits [1 x L x N] for one token sequence.
  Tensor forward(Tape& tape, std::span<const int> tokens, const ForwardOptions& options = {}) const {
    return forward(tape, make_batch({std::vector<int>(tokens.begin(), tokens.end())}), options);
  }

  /// Mean next-token negative log-likelihood: tokens[:, :-1] predict
  /// tokens[:, 1:], restricted to valid targets.
  Tensor internal_loss(Tape& tape, const Batch& batch, const ForwardOptions& options = {}) const {
    if (batch.batch_size == 0 || batch.length < 2) {
      throw ArgumentError("internal loss needs at least one prediction position");
    }
    const std::size_t B = batch.batch_size, L = batch.length - 1;
    Batch inputs;
    inputs.batch_size = B;
    inputs.length = L;
    inputs.tokens.resize(B * L);
    inputs.mask.resize(B * L);
    std::vector<int> targets(B * L);
    std::vector<std::uint8_t> valid(B * L);
    for (std::size_t b = 0; b < B; ++b) {
      inputs.lengths.push_back(batch.lengths[b] > 0 ? std::min(batch.lengths[b] - 1, L) : 0);
      for (std::size_t t = 0; t < L; ++t) {
        inputs.tokens[b * L + t] = batch.token(b, t);
        inputs.mask[b * L + t] = batch.mask[b * batch.length + t];
        targets[b * L + t] = batch.token(b, t + 1);
        valid[b * L + t] = batch.mask[b * batch.length + t + 1];
      }
    }
    Tensor logits = forward(tape, inputs, options);
    return cross_entropy(tape, logits, targets, valid);
  }

  /// Number of valid prediction positions internal_loss averages over.
  static std::size_t prediction_count(const Batch& batch) {
    std::size_t n = 0;
    for (std::size_t len : batch.lengths) n += len > 0 ? len - 1 : 0;
    return n;
  }

 private:
  Tensor embed_positions(Tape& tape, std::span<const int> ids, std::span<const int> pos) const {
    const int vocab = config_.vocab_size();
    for (int id : ids) {
      if (id < 0 || id >= vocab) {
        throw IndexError("location id " + std::to_string(id) + " outside [0, " +
                         std::to_string(vocab) + ")");
      }
    }
    if (ids.empty()) return Tensor::zeros(Shape{0, static_cast<std::size_t>(config_.hidden_dim)});
    Tensor tok = embedding(tape, params_.at("embedding.location"), ids);
    Tensor where = embedding(tape, params_.at("embedding.position"), pos);
    return add(tape, tok, where);
  }

  Tensor projection_chain(Tape& tape, const Tensor& h, const std::string& base) const {
    Tensor x = h;
    for (int i = 0; i < config_.proj_layers; ++i) {
      if (i > 0) x = relu(tape, x);
      const std::string p = base + "." + std::to_string(i);
      x = add_bias(tape, matmul(tape, x, params_.at(p + ".weight")), params_.at(p + ".bias"));
    }
    return x;
  }

  void build(Rng& shared_rng, Rng& private_rng) {
    const std::size_t d = static_cast<std::size_t>(config_.hidden_dim);
    const Group shared = Group::Shared;
    auto gaussian = [](Shape shape, Rng& rng) {
      std::normal_distribution<double> dist(0.0, kInitStd);
      Tensor t = Tensor::zeros(std::move(shape), true);
      for (double& v : t.data()) v = dist(rng);
      return t;
    };
    auto filled = [](Shape shape, double value) {
      Tensor t = Tensor::zeros(std::move(shape), true);
      for (double& v : t.data()) v = value;
      return t;
    };
    auto identity = [d]() {
      Tensor t = Tensor::zeros(Shape{d, d}, true);
      for (std::size_t i = 0; i < d; ++i) t.data()[i * d + i] = 1.0;
      return t;
    };
    params_.add("embedding.location",
                gaussian(Shape{static_cast<std::size_t>(config_.vocab_size()), d}, private_rng),
                Group::Private);
    params_.add("embedding.position",
                gaussian(Shape{static_cast<std::size_t>(config_.max_seq_len), d}, private_rng),
                Group::Private);
    for (int l = 0; l < config_.num_layers; ++l) {
      const std::string base = "layer" + std::to_string(l);
      for (int i = 0; i < config_.proj_layers; ++i) {
        params_.add(base + ".proj_shared." + std::to_string(i) + ".weight", identity(), shared);
        params_.add(base + ".proj_shared." + std::to_string(i) + ".bias", filled({d}, 0.0), shared);
        params_.add(base + ".proj_private." + std::to_string(i) + ".weight", identity(),
                    Group::Private);
        params_.add(base + ".proj_private." + std::to_string(i) + ".bias", filled({d}, 0.0),
                    Group::Private);
      }
      params_.add(base + ".attn.w_q", gaussian({d, d}, shared_rng), shared);
      params_.add(base + ".attn.w_k", gaussian({d, d}, shared_rng), shared);
      params_.add(base + ".attn.w_v", gaussian({d, d}, private_rng), Group::Private);
      params_.add(base + ".attn.w_o", gaussian({d, d}, private_rng), Group::Private);
      params_.add(base + ".norm1.gain", filled({d}, 1.0), Group::Private);
      params_.add(base + ".norm1.bias", filled({d}, 0.0), Group::Private);
      params_.add(base + ".mlp.w1", gaussian({d, 4 * d}, private_rng), Group::Private);
      params_.add(base + ".mlp.b1", filled({4 * d}, 0.0), Group::Private);
      params_.add(base + ".mlp.w2", gaussian({4 * d, d}, private_rng), Group::Private);
      params_.add(base + ".mlp.b2", filled({d}, 0.0), Group::Private);
      params_.add(base + ".norm2.gain", filled({d}, 1.0), Group::Private);
      params_.add(base + ".norm2.bias", filled({d}, 0.0), Group::Private);
    }
    if (!config_.half_open) params_.set_all(Group::Shared);
  }

  ModelConfig config_;
  ParameterSet params_;
};

/// Copies parameter values by name from `source` into `model`; shapes and
/// group tags must agree.
inline void load_parameters(HalfOpenTransformer& model, const ParameterSet& source) {
  auto& params = model.parameters();
  if (params.size() != source.size()) {
    throw RegistryError("checkpoint holds " + std::to_string(source.size()) +
                        " parameters, model has " + std::to_string(params.size()));
  }
  for (auto& e : params.entries()) {
    const auto& src = source.entry(e.name);
    if (src.group != e.group) throw RegistryError("group tag differs for '" + e.name + "'");
    if (src.tensor.shape() != e.tensor.shape()) {
      throw RegistryError("shape differs for '" + e.name + "': " +
                          shape_string(src.tensor.shape()) + " vs " +
                          shape_string(e.tensor.shape()));
    }
    e.tensor.assign(src.tensor);
  }
}

}  // namespace cola
