#pragma once

// Flat `key = value` run configuration with dotted keys. Defaults are
// overridden by a config file, which is overridden by command-line settings.
// Unknown keys and unparsable values are rejected.

#include <charconv>
#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tagbert/corpus.hpp"
#include "tagbert/finetune.hpp"
#include "tagbert/masking.hpp"
#include "tagbert/model.hpp"
#include "tagbert/pretrain.hpp"
#include "tagbert/syngen.hpp"
#include "tagbert/text.hpp"

namespace tagbert {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ValueKind { integer, real, boolean, text, integer_list };

class RunConfig {
 public:
  RunConfig() {
    const ModelConfig m;
    def("seed", ValueKind::integer, "0");
    def("numerics.threads", ValueKind::integer, "1");
    def("numerics.dtype", ValueKind::text, "float32");

    def("corpus.format", ValueKind::text, "jsonl");
    def("corpus.max_tokens", ValueKind::integer, "100");
    def("corpus.tail_quantile", ValueKind::real, "0");  // > 0 replaces max_tokens
    def("vocab.size", ValueKind::integer, "30000");
    def("typevocab.coverage", ValueKind::real, "0.95");

    def("model.num_layers", ValueKind::integer, std::to_string(m.num_layers));
    def("model.hidden", ValueKind::integer, std::to_string(m.hidden));
    def("model.heads", ValueKind::integer, std::to_string(m.heads));
    def("model.ffn_hidden", ValueKind::integer, std::to_string(m.ffn_hidden));
    def("model.max_positions", ValueKind::integer, std::to_string(m.max_positions));
    def("model.tag_layer", ValueKind::integer, std::to_string(m.tag_layer));
    def("model.layer_weighter", ValueKind::boolean, "false");
    def("model.tag_head", ValueKind::boolean, "true");
    def("model.tie_decoder", ValueKind::boolean, "true");
    def("model.dropout", ValueKind::real, "0.1");
    def("model.layer_norm_eps", ValueKind::real, "1e-12");

    const PretrainConfig p;
    def("pretrain.batch_size", ValueKind::integer, std::to_string(p.batch_size));
    def("pretrain.epochs", ValueKind::integer, std::to_string(p.epochs));
    def("pretrain.peak_lr", ValueKind::real, "1e-4");
    def("pretrain.warmup_steps", ValueKind::integer, std::to_string(p.warmup_steps));
    def("pretrain.loss_mode", ValueKind::text, "sum_of_means");
    def("pretrain.clip_norm", ValueKind::real, "1.0");
    def("pretrain.weight_decay", ValueKind::real, "0.01");
    def("pretrain.beta1", ValueKind::real, "0.9");
    def("pretrain.beta2", ValueKind::real, "0.999");
    def("pretrain.eps", ValueKind::real, "1e-8");
    def("pretrain.max_len", ValueKind::integer, std::to_string(p.max_len));

    def("masking.mask_rate", ValueKind::real, "0.15");
    def("masking.p_mask", ValueKind::real, "0.8");
    def("masking.p_random", ValueKind::real, "0.1");
    def("masking.p_keep", ValueKind::real, "0.1");
    def("masking.tag_replace_prob", ValueKind::real, "0.01");

    def("eval.seed", ValueKind::integer, "12345");
    def("eval.batch_size", ValueKind::integer, "64");

    def("finetune.lr", ValueKind::real, "3e-5");
    def("finetune.batch_size", ValueKind::integer, "32");
    def("finetune.max_epochs", ValueKind::integer, "10");
    def("finetune.seeds", ValueKind::integer_list, "1,2,3");
    def("finetune.max_len", ValueKind::integer, "100");
    def("finetune.selection", ValueKind::text, "accuracy");
    def("finetune.head_dropout", ValueKind::real, "0.1");
    def("finetune.clip_norm", ValueKind::real, "1.0");

    const syngen::GrammarParams g;
    def("syngen.vocab_size", ValueKind::integer, std::to_string(g.vocab_size));
    def("syngen.type_count", ValueKind::integer, std::to_string(g.type_count));
    def("syngen.ambiguity_rate", ValueKind::real, "0.3");
    def("syngen.max_depth", ValueKind::integer, std::to_string(g.max_depth));
    def("syngen.nesting_limit", ValueKind::integer, std::to_string(g.nesting_limit));
    def("syngen.min_len", ValueKind::integer, "3");
    def("syngen.max_len", ValueKind::integer, "20");
  }

  void set(const std::string& key, const std::string& value) {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
    check(key, it->second.kind, value);
    it->second.value = value;
  }

  /// Parses `key=value` (as given to --set).
  void set_assignment(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
  }

  /// Reads a config file: one `key = value` per line, '#' starts a comment.
  void load(std::istream& in, const std::string& source = "config") {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      line = std::string(text::strip_cr(line));
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      if (trim(line).empty()) continue;
      try {
        set_assignment(line);
      } catch (const ConfigError& e) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void save(std::ostream& out) const {
    for (const auto& [k, e] : entries_) out << k << " = " << e.value << '\n';
  }

  bool has(const std::string& key) const { return entries_.contains(key); }
  const std::string& text(const std::string& key) const { return entry(key).value; }

  std::int64_t integer(const std::string& key) const { return parse_int(key, entry(key).value); }
  std::size_t size(const std::string& key) const {
    const auto v = integer(key);
    if (v < 0) throw ConfigError(key + " must be non-negative");
    return static_cast<std::size_t>(v);
  }
  double real(const std::string& key) const { return parse_real(key, entry(key).value); }
  bool boolean(const std::string& key) const { return entry(key).value == "true"; }
  std::vector<std::uint64_t> integers(const std::string& key) const {
    std::vector<std::uint64_t> out;
    std::stringstream ss(entry(key).value);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(static_cast<std::uint64_t>(parse_int(key, trim(item))));
    return out;
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> k;
    for (const auto& [key, _] : entries_) k.push_back(key);
    return k;
  }

  // --- module views -------------------------------------------------------

  ModelConfig model(std::size_t vocab_size, std::size_t type_vocab_size) const {
    ModelConfig m;
    m.num_layers = size("model.num_layers");
    m.hidden = size("model.hidden");
    m.heads = size("model.heads");
    m.ffn_hidden = size("model.ffn_hidden");
    m.vocab_size = vocab_size;
    m.type_vocab_size = type_vocab_size;
    m.max_positions = size("model.max_positions");
    m.tag_layer = size("model.tag_layer");
    m.layer_weighter = boolean("model.layer_weighter");
    m.tag_head = boolean("model.tag_head");
    m.tie_decoder = boolean("model.tie_decoder");
    m.dropout = real("model.dropout");
    m.layer_norm_eps = real("model.layer_norm_eps");
    m.validate();
    return m;
  }

  MaskingConfig masking() const {
    MaskingConfig c;
    c.mask_rate = real("masking.mask_rate");
    c.p_mask = real("masking.p_mask");
    c.p_random = real("masking.p_random");
    c.p_keep = real("masking.p_keep");
    c.tag_replace_prob = real("masking.tag_replace_prob");
    c.validate();
    return c;
  }

  PretrainConfig pretrain() const {
    PretrainConfig c;
    c.batch_size = size("pretrain.batch_size");
    c.epochs = size("pretrain.epochs");
    c.peak_lr = real("pretrain.peak_lr");
    c.warmup_steps = size("pretrain.warmup_steps");
    c.seed = static_cast<std::uint64_t>(integer("seed"));
    c.masking = masking();
    c.loss_mode = loss_mode_from_name(text("pretrain.loss_mode"));
    c.clip_norm = real("pretrain.clip_norm");
    c.adamw = {real("pretrain.beta1"), real("pretrain.beta2"), real("pretrain.eps"), real("pretrain.weight_decay")};
    c.max_len = size("pretrain.max_len");
    c.validate();
    return c;
  }

  FinetuneConfig finetune() const {
    FinetuneConfig c;
    c.lr = real("finetune.lr");
    c.batch_size = size("finetune.batch_size");
    c.max_epochs = size("finetune.max_epochs");
    c.seeds = integers("finetune.seeds");
    c.max_len = size("finetune.max_len");
    const auto& sel = text("finetune.selection");
    if (sel == "accuracy") c.selection = SelectionMetric::accuracy;
    else if (sel == "span_f1") c.selection = SelectionMetric::span_f1;
    else throw ConfigError("finetune.selection must be accuracy or span_f1, got '" + sel + "'");
    c.head_dropout = real("finetune.head_dropout");
    c.clip_norm = real("finetune.clip_norm");
    c.validate();
    return c;
  }

  syngen::GrammarParams grammar() const {
    syngen::GrammarParams g;
    g.vocab_size = size("syngen.vocab_size");
    g.type_count = size("syngen.type_count");
    g.ambiguity_rate = real("syngen.ambiguity_rate");
    g.max_depth = size("syngen.max_depth");
    g.nesting_limit = size("syngen.nesting_limit");
    return g;
  }

  syngen::LengthRange sentence_lengths() const { return {size("syngen.min_len"), size("syngen.max_len")}; }

  LengthPolicy length_policy() const {
    const double q = real("corpus.tail_quantile");
    if (q > 0.0) return TailQuantile{q};
    return MaxTokens{size("corpus.max_tokens")};
  }

 private:
  struct Entry {
    ValueKind kind;
    std::string value;
  };

  void def(const std::string& key, ValueKind kind, std::string value) {
    check(key, kind, value);
    entries_.emplace(key, Entry{kind, std::move(value)});
  }

  const Entry& entry(const std::string& key) const {
    auto it = entries_.find(key);
    if (it == entries_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  }

  static std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::int64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
      throw ConfigError(key + ": '" + v + "' is not an integer");
    return out;
  }

  static double parse_real(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (v.empty() || used != v.size()) throw ConfigError(key + ": '" + v + "' is not a number");
    return out;
  }

  static void check(const std::string& key, ValueKind kind, const std::string& v) {
    switch (kind) {
      case ValueKind::integer:
        parse_int(key, v);
        break;
      case ValueKind::real:
        parse_real(key, v);
        break;
      case ValueKind::boolean:
        if (v != "true" && v != "false") throw ConfigError(key + ": expected true or false, got '" + v + "'");
        break;
      case ValueKind::integer_list: {
        std::stringstream ss(v);
        std::string item;
        bool any = false;
        while (std::getline(ss, item, ',')) {
          parse_int(key, trim(item));
          any = true;
        }
        if (!any) throw ConfigError(key + ": expected a comma-separated list of integers");
        break;
      }
      case ValueKind::text:
        if (v.empty()) throw ConfigError(key + ": empty value");
        break;
    }
  }

  std::map<std::string, Entry> entries_;
};

}  // namespace tagbert
