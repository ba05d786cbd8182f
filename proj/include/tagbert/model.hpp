#pragma once

// Dual-head transformer encoder: BERT-style post-normalization blocks, a
// masked-LM head on the last block and a supertag head reading an
// intermediate block (or a learned softmax mixture over all blocks).

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/autodiff.hpp"
#include "tagbert/masking.hpp"
#include "tagbert/rng.hpp"

namespace tagbert {

struct ModelConfig {
  std::size_t num_layers = 12;
  std::size_t hidden = 768;
  std::size_t heads = 12;
  std::size_t ffn_hidden = 1536;
  std::size_t vocab_size = 30000;
  std::size_t type_vocab_size = 2883;
  std::size_t max_positions = 512;
  std::size_t tag_layer = 4;  // 1-based block index read by the tag head
  bool layer_weighter = false;
  bool tag_head = true;
  bool tie_decoder = true;
  double dropout = 0.1;
  double layer_norm_eps = 1e-12;

  void validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("invalid model config: " + what); };
    if (num_layers < 1) fail("num_layers must be >= 1");
    if (hidden < 1 || heads < 1) fail("hidden and heads must be >= 1");
    if (hidden % heads != 0)
      fail("hidden (" + std::to_string(hidden) + ") must be divisible by heads (" + std::to_string(heads) + ")");
    if (ffn_hidden < 1) fail("ffn_hidden must be >= 1");
    if (vocab_size <= static_cast<std::size_t>(kReservedSubwords)) fail("vocab_size must exceed the reserved tokens");
    if (tag_head && type_vocab_size <= static_cast<std::size_t>(kReservedTypes))
      fail("type_vocab_size must exceed the reserved types");
    if (max_positions < 2) fail("max_positions must be >= 2");
    if (tag_layer < 1 || tag_layer > num_layers)
      fail("tag_layer (" + std::to_string(tag_layer) + ") must lie in [1, " + std::to_string(num_layers) + "]");
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"num_layers", c.num_layers},
                     {"hidden", c.hidden},
                     {"heads", c.heads},
                     {"ffn_hidden", c.ffn_hidden},
                     {"vocab_size", c.vocab_size},
                     {"type_vocab_size", c.type_vocab_size},
                     {"max_positions", c.max_positions},
                     {"tag_layer", c.tag_layer},
                     {"layer_weighter", c.layer_weighter},
                     {"tag_head", c.tag_head},
                     {"tie_decoder", c.tie_decoder},
                     {"dropout", c.dropout},
                     {"layer_norm_eps", c.layer_norm_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("num_layers").get_to(c.num_layers);
  j.at("hidden").get_to(c.hidden);
  j.at("heads").get_to(c.heads);
  j.at("ffn_hidden").get_to(c.ffn_hidden);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("type_vocab_size").get_to(c.type_vocab_size);
  j.at("max_positions").get_to(c.max_positions);
  j.at("tag_layer").get_to(c.tag_layer);
  j.at("layer_weighter").get_to(c.layer_weighter);
  j.at("tag_head").get_to(c.tag_head);
  j.at("tie_decoder").get_to(c.tie_decoder);
  j.at("dropout").get_to(c.dropout);
  j.at("layer_norm_eps").get_to(c.layer_norm_eps);
}

/// BERT-base replica with the narrowed 1536-wide feed-forward layers and the
/// tag head on the fourth block.
inline ModelConfig base_preset(std::size_t type_vocab_size = 2883) {
  ModelConfig c;
  c.type_vocab_size = type_vocab_size;
  return c;
}

struct ParamBreakdown {
  std::size_t embeddings = 0;
  std::size_t per_block = 0;
  std::size_t blocks = 0;
  std::size_t mlm_head = 0;
  std::size_t tag_head = 0;
  std::size_t layer_weighter = 0;
  std::size_t total = 0;
  std::size_t total_without_tag_head = 0;
  double tag_head_fraction = 0.0;  // tag_head / total
};

/// Closed-form parameter count of the layout built by Model::init.
inline ParamBreakdown count_params(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.hidden, f = c.ffn_hidden, V = c.vocab_size, T = c.type_vocab_size;
  ParamBreakdown p;
  p.embeddings = V * d + c.max_positions * d + 2 * d;
  p.per_block = 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d) + 2 * d;
  p.blocks = c.num_layers * p.per_block;
  p.mlm_head = (d * d + d) + 2 * d + V + (c.tie_decoder ? 0 : V * d);
  p.tag_head = c.tag_head ? d * T + T : 0;
  p.layer_weighter = c.tag_head && c.layer_weighter ? c.num_layers : 0;
  p.total = p.embeddings + p.blocks + p.mlm_head + p.tag_head + p.layer_weighter;
  p.total_without_tag_head = p.total - p.tag_head - p.layer_weighter;
  p.tag_head_fraction = static_cast<double>(p.tag_head) / static_cast<double>(p.total);
  return p;
}

inline nlohmann::ordered_json to_json(const ParamBreakdown& p) {
  nlohmann::ordered_json j;
  j["embeddings"] = p.embeddings;
  j["per_block"] = p.per_block;
  j["blocks"] = p.blocks;
  j["mlm_head"] = p.mlm_head;
  j["tag_head"] = p.tag_head;
  j["layer_weighter"] = p.layer_weighter;
  j["total"] = p.total;
  j["total_without_tag_head"] = p.total_without_tag_head;
  j["tag_head_fraction"] = p.tag_head_fraction;
  return j;
}

namespace names {
inline std::string block(std::size_t i, std::string_view rest) {
  return "blocks." + std::to_string(i) + "." + std::string(rest);
}
}  // namespace names

enum class InitKind { normal, zero, one };

template <class T>
class Model {
 public:
  using scalar_type = T;

  Model() = default;

  /// Weights ~ N(0, 0.02^2) truncated at two standard deviations, biases and
  /// normalization offsets 0, normalization gains 1, mixture logits 0. Every
  /// parameter draws from its own named substream, so adding or removing a
  /// head leaves all other parameters unchanged.
  static Model init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config_ = config;
    const std::size_t d = config.hidden, f = config.ffn_hidden;
    m.add("embeddings.token", {config.vocab_size, d}, InitKind::normal, seed);
    m.add("embeddings.position", {config.max_positions, d}, InitKind::normal, seed);
    m.add("embeddings.norm.gain", {d}, InitKind::one, seed);
    m.add("embeddings.norm.bias", {d}, InitKind::zero, seed);
    for (std::size_t l = 1; l <= config.num_layers; ++l) {
      for (const char* proj : {"query", "key", "value", "output"}) {
        m.add(names::block(l, std::string("attention.") + proj + ".weight"), {d, d}, InitKind::normal, seed);
        m.add(names::block(l, std::string("attention.") + proj + ".bias"), {d}, InitKind::zero, seed);
      }
      m.add(names::block(l, "attention.norm.gain"), {d}, InitKind::one, seed);
      m.add(names::block(l, "attention.norm.bias"), {d}, InitKind::zero, seed);
      m.add(names::block(l, "ffn.in.weight"), {f, d}, InitKind::normal, seed);
      m.add(names::block(l, "ffn.in.bias"), {f}, InitKind::zero, seed);
      m.add(names::block(l, "ffn.out.weight"), {d, f}, InitKind::normal, seed);
      m.add(names::block(l, "ffn.out.bias"), {d}, InitKind::zero, seed);
      m.add(names::block(l, "ffn.norm.gain"), {d}, InitKind::one, seed);
      m.add(names::block(l, "ffn.norm.bias"), {d}, InitKind::zero, seed);
    }
    m.add("mlm.transform.weight", {d, d}, InitKind::normal, seed);
    m.add("mlm.transform.bias", {d}, InitKind::zero, seed);
    m.add("mlm.norm.gain", {d}, InitKind::one, seed);
    m.add("mlm.norm.bias", {d}, InitKind::zero, seed);
    if (!config.tie_decoder) m.add("mlm.decoder.weight", {config.vocab_size, d}, InitKind::normal, seed);
    m.add("mlm.decoder.bias", {config.vocab_size}, InitKind::zero, seed);
    if (config.tag_head) {
      m.add("tag.weight", {config.type_vocab_size, d}, InitKind::normal, seed);
      m.add("tag.bias", {config.type_vocab_size}, InitKind::zero, seed);
      if (config.layer_weighter) m.add("tag.layer_logits", {config.num_layers}, InitKind::zero, seed);
    }
    return m;
  }

  const ModelConfig& config() const noexcept { return config_; }
  std::vector<Parameter<T>>& parameters() noexcept { return params_; }
  const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }

  std::optional<std::size_t> index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }
  bool has(std::string_view name) const { return index_of(name).has_value(); }

  Parameter<T>& param(std::string_view name) { return params_[require(name)]; }
  const Parameter<T>& param(std::string_view name) const { return params_[require(name)]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Softmax of the layer-weighter logits (empty without a weighter).
  std::vector<double> mixture_weights() const {
    if (!has("tag.layer_logits")) return {};
    const auto& l = param("tag.layer_logits").value;
    std::vector<double> w(l.size());
    double mx = -INFINITY, s = 0.0;
    for (T v : l.data()) mx = std::max(mx, static_cast<double>(v));
    for (std::size_t i = 0; i < w.size(); ++i) s += (w[i] = std::exp(static_cast<double>(l[i]) - mx));
    for (double& v : w) v /= s;
    return w;
  }

  /// Adds a parameter (used by checkpoint loading and task heads).
  Parameter<T>& add_parameter(Parameter<T> p) {
    if (index_.contains(p.name)) throw std::invalid_argument("duplicate parameter '" + p.name + "'");
    index_.emplace(p.name, params_.size());
    params_.push_back(std::move(p));
    return params_.back();
  }

  static bool decays(std::string_view name) {
    return name.ends_with(".weight") || name.starts_with("embeddings.token") ||
           name.starts_with("embeddings.position");
  }

 private:
  std::size_t require(std::string_view name) const {
    auto i = index_of(name);
    if (!i) throw std::out_of_range("model has no parameter '" + std::string(name) + "'");
    return *i;
  }

  void add(const std::string& name, Shape shape, InitKind kind, std::uint64_t seed) {
    Parameter<T> p;
    p.name = name;
    p.value = Tensor<T>(std::move(shape));
    p.decay = decays(name);
    if (kind == InitKind::one) p.value.fill(T{1});
    if (kind == InitKind::normal) {
      Rng rng(derive_seed(seed, "init", hash_name(name)));
      for (T& v : p.value.data()) {
        double z;
        do z = rng.normal();
        while (std::abs(z) > 2.0);
        v = static_cast<T>(0.02 * z);
      }
    }
    add_parameter(std::move(p));
  }

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <class M>
concept ModelRef = requires { typename std::remove_const_t<M>::scalar_type; } &&
                   std::is_same_v<std::remove_const_t<M>, Model<typename std::remove_const_t<M>::scalar_type>>;

template <class M>
using scalar_of = typename std::remove_const_t<M>::scalar_type;

struct ForwardOptions {
  Rng* dropout_rng = nullptr;  // dropout is active only when set and config.dropout > 0
};

/// Hidden states: index 0 is the embedding output, index i the output of
/// block i. Padding keys receive zero attention weight.
template <ModelRef M>
std::vector<Var> encode(Tape<scalar_of<M>>& t, M& model, const MaskedBatch& batch,
                        const ForwardOptions& options = {}) {
  const ModelConfig& c = model.config();
  const std::size_t B = batch.batch, N = batch.length;
  if (N > c.max_positions)
    throw std::invalid_argument("sequence length " + std::to_string(N) + " exceeds max_positions " +
                                std::to_string(c.max_positions));
  if (batch.input_ids.size() != B * N || batch.attention_mask.size() != B * N)
    throw ShapeError("batch arrays do not match shape (" + std::to_string(B) + ", " + std::to_string(N) + ")");
  const double p = options.dropout_rng ? c.dropout : 0.0;
  Rng* rng = options.dropout_rng;

  std::vector<std::int32_t> positions(B * N);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::int32_t>(i % N);

  auto P = [&](const std::string& name) { return t.param(model.param(name)); };

  Var h = ad::add(t, ad::embedding(t, P("embeddings.token"), batch.input_ids),
                  ad::embedding(t, P("embeddings.position"), positions));
  h = ad::layer_norm(t, h, P("embeddings.norm.gain"), P("embeddings.norm.bias"), c.layer_norm_eps);
  h = ad::dropout(t, h, p, rng);
  std::vector<Var> hidden{h};

  for (std::size_t l = 1; l <= c.num_layers; ++l) {
    auto BP = [&](std::string_view rest) { return P(names::block(l, rest)); };
    Var q = ad::linear(t, h, BP("attention.query.weight"), BP("attention.query.bias"));
    Var k = ad::linear(t, h, BP("attention.key.weight"), BP("attention.key.bias"));
    Var v = ad::linear(t, h, BP("attention.value.weight"), BP("attention.value.bias"));
    Var ctx = ad::attention(t, q, k, v, {B, N, c.heads}, batch.attention_mask, p, rng);
    Var a = ad::linear(t, ctx, BP("attention.output.weight"), BP("attention.output.bias"));
    a = ad::dropout(t, a, p, rng);
    Var h1 = ad::layer_norm(t, ad::add(t, h, a), BP("attention.norm.gain"), BP("attention.norm.bias"),
                            c.layer_norm_eps);
    Var ff = ad::gelu(t, ad::linear(t, h1, BP("ffn.in.weight"), BP("ffn.in.bias")));
    ff = ad::linear(t, ff, BP("ffn.out.weight"), BP("ffn.out.bias"));
    ff = ad::dropout(t, ff, p, rng);
    h = ad::layer_norm(t, ad::add(t, h1, ff), BP("ffn.norm.gain"), BP("ffn.norm.bias"), c.layer_norm_eps);
    hidden.push_back(h);
  }
  return hidden;
}

/// Vocabulary logits from the last hidden state: transform, gelu, normalize,
/// then the decoder tied to the token embeddings plus an output bias.
/// With `rows`, only those rows of the (batch * length) layout are scored.
template <ModelRef M>
Var mlm_logits(Tape<scalar_of<M>>& t, M& model, Var last_hidden,
               const std::vector<std::size_t>* rows = nullptr) {
  const ModelConfig& c = model.config();
  auto P = [&](const std::string& name) { return t.param(model.param(name)); };
  Var x = rows ? ad::gather_rows(t, last_hidden, *rows) : last_hidden;
  x = ad::gelu(t, ad::linear(t, x, P("mlm.transform.weight"), P("mlm.transform.bias")));
  x = ad::layer_norm(t, x, P("mlm.norm.gain"), P("mlm.norm.bias"), c.layer_norm_eps);
  Var decoder = c.tie_decoder ? P("embeddings.token") : P("mlm.decoder.weight");
  return ad::linear(t, x, decoder, P("mlm.decoder.bias"));
}

/// Input of the tag head: block `tag_layer`, or the softmax-weighted mixture
/// of blocks 1..L when the layer weighter is on.
template <ModelRef M>
Var tag_input(Tape<scalar_of<M>>& t, M& model, std::span<const Var> hidden) {
  const ModelConfig& c = model.config();
  if (hidden.size() != c.num_layers + 1)
    throw std::invalid_argument("tag head expects " + std::to_string(c.num_layers + 1) + " hidden states");
  if (c.layer_weighter) return ad::weighted_sum(t, hidden.subspan(1), t.param(model.param("tag.layer_logits")));
  return hidden[c.tag_layer];
}

template <ModelRef M>
Var tag_logits(Tape<scalar_of<M>>& t, M& model, std::span<const Var> hidden,
               const std::vector<std::size_t>* rows = nullptr) {
  if (!model.config().tag_head) throw std::logic_error("model was built without a tag head");
  Var x = tag_input(t, model, hidden);
  if (rows) x = ad::gather_rows(t, x, *rows);
  return ad::linear(t, x, t.param(model.param("tag.weight")), t.param(model.param("tag.bias")));
}

/// Plain-value conveniences for inference and tests.
template <class T>
std::vector<Tensor<T>> hidden_states(const Model<T>& model, const MaskedBatch& batch) {
  Tape<T> t;
  std::vector<Tensor<T>> out;
  for (Var v : encode(t, model, batch)) out.push_back(t.value(v));
  return out;
}

template <class T>
Tensor<T> mlm_logits(const Model<T>& model, const MaskedBatch& batch) {
  Tape<T> t;
  auto hidden = encode(t, model, batch);
  Tensor<T> y = t.value(mlm_logits(t, model, hidden.back()));
  return y.reshaped({batch.batch, batch.length, model.config().vocab_size});
}

template <class T>
Tensor<T> tag_logits(const Model<T>& model, const MaskedBatch& batch) {
  Tape<T> t;
  auto hidden = encode(t, model, batch);
  Tensor<T> y = t.value(tag_logits(t, model, std::span<const Var>(hidden)));
  return y.reshaped({batch.batch, batch.length, model.config().type_vocab_size});
}

}  // namespace tagbert
