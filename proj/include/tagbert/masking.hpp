#pragma once

// Dynamic whole-word masking, label construction and batch collation.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/rng.hpp"
#include "tagbert/vocab.hpp"

namespace tagbert {

static_assert(std::endian::native == std::endian::little,
              "binary shard and checkpoint layouts assume a little-endian host");

inline constexpr std::int32_t kIgnore = -100;

struct MaskingConfig {
  double mask_rate = 0.15;
  double p_mask = 0.8;
  double p_random = 0.1;
  double p_keep = 0.1;
  double tag_replace_prob = 0.01;

  void validate() const {
    if (!(mask_rate >= 0.0 && mask_rate <= 1.0)) throw std::invalid_argument("mask_rate must lie in [0, 1]");
    if (p_mask < 0 || p_random < 0 || p_keep < 0 || std::abs(p_mask + p_random + p_keep - 1.0) > 1e-9)
      throw std::invalid_argument("mask/random/keep proportions must be non-negative and sum to 1");
    if (!(tag_replace_prob >= 0.0 && tag_replace_prob < 1.0))
      throw std::invalid_argument("tag_replace_prob must lie in [0, 1)");
  }
};

enum class Treatment : std::uint8_t { mask, random, keep };

/// Each word is selected independently with probability mask_rate; an empty
/// selection is redrawn. mask_rate == 0 (or a selection that stays empty
/// after many redraws) falls back to one uniformly chosen word.
inline std::vector<std::size_t> select_words(const TokenizedSentence& sentence, double mask_rate,
                                             Rng& rng) {
  const std::size_t words = sentence.word_count();
  std::vector<std::size_t> chosen;
  if (words == 0) return chosen;
  if (mask_rate > 0.0) {
    for (int attempt = 0; attempt < 1000 && chosen.empty(); ++attempt)
      for (std::size_t w = 0; w < words; ++w)
        if (rng.bernoulli(mask_rate)) chosen.push_back(w);
  }
  if (chosen.empty()) chosen.push_back(rng.index(words));
  return chosen;
}

struct Corruption {
  std::vector<std::int32_t> input_ids;
  std::vector<std::int32_t> mlm_labels;
  std::vector<Treatment> treatments;  // one per selected word, in selection order
};

/// One treatment per selected word, applied to all of its subword tokens:
/// [MASK], uniformly random non-reserved ids, or unchanged. Labels carry the
/// original ids at every token of a selected word.
inline Corruption corrupt(const TokenizedSentence& sentence, std::span<const std::size_t> selection,
                          std::size_t vocab_size, Rng& rng, const MaskingConfig& scheme) {
  Corruption out;
  out.input_ids = sentence.token_ids;
  out.mlm_labels.assign(sentence.size(), kIgnore);
  std::vector<std::int8_t> word_treatment(sentence.word_count(), -1);
  for (std::size_t w : selection) {
    const double u = rng.uniform();
    const Treatment t = u < scheme.p_mask                    ? Treatment::mask
                        : u < scheme.p_mask + scheme.p_random ? Treatment::random
                                                              : Treatment::keep;
    word_treatment.at(w) = static_cast<std::int8_t>(t);
    out.treatments.push_back(t);
  }
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    const std::int32_t w = sentence.word_index[i];
    if (w < 0 || word_treatment[static_cast<std::size_t>(w)] < 0) continue;
    out.mlm_labels[i] = sentence.token_ids[i];
    switch (static_cast<Treatment>(word_treatment[static_cast<std::size_t>(w)])) {
      case Treatment::mask:
        out.input_ids[i] = kMask;
        break;
      case Treatment::random:
        out.input_ids[i] = static_cast<std::int32_t>(
            rng.integer(kReservedSubwords, static_cast<std::int64_t>(vocab_size) - 1));
        break;
      case Treatment::keep:
        break;
    }
  }
  return out;
}

/// Type label at every first-subword position whose tag is a real type;
/// kIgnore at continuations, boundary markers and [UNK] types. With
/// probability replace_prob a label is swapped for a different non-reserved
/// type drawn uniformly.
inline std::vector<std::int32_t> build_tag_labels(const TokenizedSentence& sentence, Rng& rng,
                                                  double replace_prob, std::size_t type_count) {
  std::vector<std::int32_t> labels(sentence.size(), kIgnore);
  const std::int64_t real_types = static_cast<std::int64_t>(type_count) - kReservedTypes;
  for (std::size_t i = 0; i < sentence.size(); ++i) {
    if (!sentence.is_first_subword[i]) continue;
    const std::int32_t gold = sentence.tag_ids.at(static_cast<std::size_t>(sentence.word_index[i]));
    if (gold < kReservedTypes) continue;
    std::int32_t label = gold;
    if (replace_prob > 0.0 && real_types > 1 && rng.bernoulli(replace_prob)) {
      std::int64_t r = rng.integer(0, real_types - 2) + kReservedTypes;
      if (r >= gold) ++r;
      label = static_cast<std::int32_t>(r);
    }
    labels[i] = label;
  }
  return labels;
}

struct SeedTrace {
  std::uint64_t masking = 0;
  std::uint64_t replacement = 0;
  friend bool operator==(const SeedTrace&, const SeedTrace&) = default;
};

/// Substream seeds for one instance in one epoch.
inline SeedTrace instance_seeds(std::uint64_t seed, std::uint64_t epoch, std::uint64_t instance) {
  return {derive_seed(seed, "masking", epoch, instance), derive_seed(seed, "replacement", epoch, instance)};
}

struct MaskedInstance {
  std::vector<std::int32_t> input_ids;
  std::vector<std::int32_t> mlm_labels;
  std::vector<std::int32_t> tag_labels;
  std::vector<std::int32_t> word_index;
  SeedTrace seed_trace;

  std::size_t size() const noexcept { return input_ids.size(); }
  friend bool operator==(const MaskedInstance&, const MaskedInstance&) = default;
};

/// Builds the instance entirely from the two seeds in `trace`, so the same
/// trace always reproduces the same instance.
inline MaskedInstance make_instance(const TokenizedSentence& sentence, const MaskingConfig& config,
                                    std::size_t vocab_size, std::size_t type_count, SeedTrace trace) {
  Rng mask_rng(trace.masking);
  const auto selection = select_words(sentence, config.mask_rate, mask_rng);
  Corruption c = corrupt(sentence, selection, vocab_size, mask_rng, config);
  Rng replace_rng(trace.replacement);
  MaskedInstance out;
  out.input_ids = std::move(c.input_ids);
  out.mlm_labels = std::move(c.mlm_labels);
  out.tag_labels = build_tag_labels(sentence, replace_rng, config.tag_replace_prob, type_count);
  out.word_index = sentence.word_index;
  out.seed_trace = trace;
  return out;
}

/// Uncorrupted instance: no MLM targets, gold type labels (or any per-word
/// labels given in `word_labels`) at first subwords.
inline MaskedInstance plain_instance(const TokenizedSentence& sentence,
                                     std::span<const std::int32_t> word_labels) {
  MaskedInstance out;
  out.input_ids = sentence.token_ids;
  out.mlm_labels.assign(sentence.size(), kIgnore);
  out.tag_labels.assign(sentence.size(), kIgnore);
  out.word_index = sentence.word_index;
  for (std::size_t i = 0; i < sentence.size(); ++i)
    if (sentence.is_first_subword[i]) out.tag_labels[i] = word_labels[static_cast<std::size_t>(sentence.word_index[i])];
  return out;
}

/// Cuts an instance to max_len tokens, keeping [CLS] and ending in [SEP].
inline MaskedInstance truncate(MaskedInstance inst, std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("max_len must leave room for [CLS] and [SEP]");
  if (inst.size() <= max_len) return inst;
  inst.input_ids.resize(max_len);
  inst.mlm_labels.resize(max_len);
  inst.tag_labels.resize(max_len);
  inst.word_index.resize(max_len);
  inst.input_ids.back() = kSep;
  inst.mlm_labels.back() = kIgnore;
  inst.tag_labels.back() = kIgnore;
  inst.word_index.back() = -1;
  return inst;
}

struct MaskedBatch {
  std::size_t batch = 0, length = 0;
  std::vector<std::int32_t> input_ids;
  std::vector<std::int32_t> mlm_labels;
  std::vector<std::int32_t> tag_labels;
  std::vector<std::uint8_t> attention_mask;
  std::vector<std::int32_t> word_index;

  std::size_t positions() const noexcept { return batch * length; }
  friend bool operator==(const MaskedBatch&, const MaskedBatch&) = default;
};

/// Pads instances to a rectangle; longer instances are truncated to max_len.
inline MaskedBatch collate(std::span<const MaskedInstance> instances, std::size_t max_len) {
  if (instances.empty()) throw std::invalid_argument("collate: empty batch");
  MaskedBatch b;
  b.batch = instances.size();
  for (const auto& inst : instances) b.length = std::max(b.length, std::min(inst.size(), max_len));
  const std::size_t n = b.positions();
  b.input_ids.assign(n, kPad);
  b.mlm_labels.assign(n, kIgnore);
  b.tag_labels.assign(n, kIgnore);
  b.attention_mask.assign(n, 0);
  b.word_index.assign(n, -1);
  for (std::size_t r = 0; r < instances.size(); ++r) {
    const MaskedInstance inst = truncate(instances[r], max_len);
    for (std::size_t i = 0; i < inst.size(); ++i) {
      const std::size_t at = r * b.length + i;
      b.input_ids[at] = inst.input_ids[i];
      b.mlm_labels[at] = inst.mlm_labels[i];
      b.tag_labels[at] = inst.tag_labels[i];
      b.attention_mask[at] = 1;
      b.word_index[at] = inst.word_index[i];
    }
  }
  return b;
}

// Shard layout: uint64 little-endian header length, JSON header, then the
// arrays named in header["fields"] back to back, row-major, little-endian.

namespace detail {

template <class V>
void write_array(std::ostream& out, const std::vector<V>& v) {
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(V)));
}

template <class V>
void read_array(std::istream& in, std::vector<V>& v, std::size_t n, const char* name) {
  v.resize(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(V)));
  if (!in) throw std::runtime_error(std::string("shard truncated while reading ") + name);
}

}  // namespace detail

inline void write_shard(std::ostream& out, const MaskedBatch& b) {
  nlohmann::ordered_json header;
  header["format"] = "tagbert-shard";
  header["version"] = 1;
  header["shape"] = {b.batch, b.length};
  header["fields"] = nlohmann::ordered_json::array({
      {{"name", "input_ids"}, {"dtype", "int32"}},
      {{"name", "mlm_labels"}, {"dtype", "int32"}},
      {{"name", "tag_labels"}, {"dtype", "int32"}},
      {{"name", "attention_mask"}, {"dtype", "uint8"}},
      {{"name", "word_index"}, {"dtype", "int32"}},
  });
  const std::string text = header.dump();
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  detail::write_array(out, b.input_ids);
  detail::write_array(out, b.mlm_labels);
  detail::write_array(out, b.tag_labels);
  detail::write_array(out, b.attention_mask);
  detail::write_array(out, b.word_index);
}

/// Reads one shard; returns false at a clean end of stream.
inline bool read_shard(std::istream& in, MaskedBatch& b) {
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof len)) return false;
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("shard header truncated");
  const auto header = nlohmann::json::parse(text);
  if (header.value("format", "") != "tagbert-shard") throw std::runtime_error("not a tagbert shard");
  b = {};
  b.batch = header.at("shape").at(0).get<std::size_t>();
  b.length = header.at("shape").at(1).get<std::size_t>();
  const std::size_t n = b.positions();
  for (const auto& field : header.at("fields")) {
    const auto name = field.at("name").get<std::string>();
    if (name == "input_ids") detail::read_array(in, b.input_ids, n, "input_ids");
    else if (name == "mlm_labels") detail::read_array(in, b.mlm_labels, n, "mlm_labels");
    else if (name == "tag_labels") detail::read_array(in, b.tag_labels, n, "tag_labels");
    else if (name == "attention_mask") detail::read_array(in, b.attention_mask, n, "attention_mask");
    else if (name == "word_index") detail::read_array(in, b.word_index, n, "word_index");
    else throw std::runtime_error("unknown shard field '" + name + "'");
  }
  return true;
}

}  // namespace tagbert
