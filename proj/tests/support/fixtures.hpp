#pragma once

// Small random models and batches shared by the test binaries.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>

#include "tagbert/masking.hpp"
#include "tagbert/model.hpp"
#include "tagbert/rng.hpp"
#include "tagbert/syngen.hpp"
#include "tagbert/vocab.hpp"

namespace tagbert::testing {

inline ModelConfig tiny_config(std::size_t layers = 2, std::size_t hidden = 8, std::size_t heads = 2,
                               std::size_t tag_layer = 1) {
  ModelConfig c;
  c.num_layers = layers;
  c.hidden = hidden;
  c.heads = heads;
  c.ffn_hidden = 2 * hidden;
  c.vocab_size = 13;
  c.type_vocab_size = 6;
  c.max_positions = 16;
  c.tag_layer = tag_layer;
  c.dropout = 0.0;
  return c;
}

/// Random batch with per-row lengths in [3, length], padding after, and
/// roughly a third of the real positions carrying MLM and tag labels.
inline MaskedBatch random_batch(const ModelConfig& c, std::size_t batch, std::size_t length, Rng& rng,
                                bool with_padding = true) {
  MaskedBatch b;
  b.batch = batch;
  b.length = length;
  const std::size_t n = batch * length;
  b.input_ids.assign(n, kPad);
  b.mlm_labels.assign(n, kIgnore);
  b.tag_labels.assign(n, kIgnore);
  b.attention_mask.assign(n, 0);
  b.word_index.assign(n, -1);
  for (std::size_t r = 0; r < batch; ++r) {
    const std::size_t len = with_padding ? static_cast<std::size_t>(rng.integer(3, static_cast<std::int64_t>(length))) : length;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t at = r * length + i;
      b.attention_mask[at] = 1;
      b.input_ids[at] = static_cast<std::int32_t>(rng.integer(0, static_cast<std::int64_t>(c.vocab_size) - 1));
      b.word_index[at] = static_cast<std::int32_t>(i);
      if (rng.bernoulli(0.35))
        b.mlm_labels[at] = static_cast<std::int32_t>(rng.integer(kReservedSubwords, static_cast<std::int64_t>(c.vocab_size) - 1));
      if (rng.bernoulli(0.4))
        b.tag_labels[at] = static_cast<std::int32_t>(rng.integer(kReservedTypes, static_cast<std::int64_t>(c.type_vocab_size) - 1));
    }
    // At least one label of each kind per row.
    b.mlm_labels[r * length] = kReservedSubwords;
    b.tag_labels[r * length + 1] = kReservedTypes;
  }
  return b;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("tagbert-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Encoded synthetic corpus plus the vocabularies built from it.
struct SynCorpus {
  syngen::ToyGrammar grammar;
  std::vector<Sentence> sentences;
  SubwordVocab vocab;
  TypeVocab types;
  std::vector<TokenizedSentence> encoded;
};

inline SynCorpus syn_corpus(std::size_t n, std::uint64_t sample_seed, std::uint64_t grammar_seed = 1,
                            std::size_t vocab_size = 120) {
  SynCorpus c;
  c.grammar = syngen::make_grammar(grammar_seed, {});
  c.sentences = syngen::sample(c.grammar, n, sample_seed);
  c.vocab = build_subword_vocab(c.sentences, vocab_size);
  c.types = build_type_vocab(compute_stats(std::span<const Sentence>(c.sentences), WordLength{}), 1.0);
  for (const auto& s : c.sentences) c.encoded.push_back(encode(c.vocab, c.types, s));
  return c;
}

inline ModelConfig syn_config(const SynCorpus& c, std::size_t layers = 2, std::size_t hidden = 32) {
  ModelConfig m = tiny_config(layers, hidden, 2, 1);
  m.vocab_size = c.vocab.size();
  m.type_vocab_size = c.types.size();
  m.max_positions = 128;
  return m;
}

}  // namespace tagbert::testing
