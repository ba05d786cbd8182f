#pragma once

// Word/supertag corpus ingestion, sanitation and length filtering.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/text.hpp"

namespace tagbert {

struct Sentence {
  std::vector<std::string> words;
  std::vector<std::string> tags;

  std::size_t size() const noexcept { return words.size(); }
  friend bool operator==(const Sentence&, const Sentence&) = default;
};

/// Empty string when the sentence is well formed, else the reason it is not.
inline std::string validate(const Sentence& s) {
  if (s.words.empty()) return "empty sentence";
  if (s.words.size() != s.tags.size())
    return "length mismatch: " + std::to_string(s.words.size()) + " words but " +
           std::to_string(s.tags.size()) + " tags";
  for (std::size_t i = 0; i < s.words.size(); ++i) {
    const auto& w = s.words[i];
    if (w.empty()) return "word " + std::to_string(i) + " is empty";
    if (text::has_space(w)) return "word " + std::to_string(i) + " contains whitespace";
    if (!text::valid_utf8(w)) return "word " + std::to_string(i) + " is not valid UTF-8";
    const auto& t = s.tags[i];
    if (t.empty()) return "tag " + std::to_string(i) + " is empty";
    if (t.find('\n') != std::string::npos || t.find('\r') != std::string::npos)
      return "tag " + std::to_string(i) + " contains a line break";
    if (!text::valid_utf8(t)) return "tag " + std::to_string(i) + " is not valid UTF-8";
  }
  return {};
}

enum class CorpusFormat { jsonl, tsv };

struct Diagnostic {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct IngestResult {
  std::vector<Sentence> sentences;
  std::vector<Diagnostic> diagnostics;
};

namespace detail {

inline void ingest_jsonl(std::istream& in, IngestResult& out) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view view = text::strip_cr(line);
    if (view.find_first_not_of(" \t") == std::string_view::npos) continue;
    Sentence s;
    try {
      const auto j = nlohmann::json::parse(view);
      if (!j.is_object() || !j.contains("words") || !j.contains("tags")) {
        out.diagnostics.push_back({lineno, "record lacks \"words\" or \"tags\""});
        continue;
      }
      s.words = j.at("words").get<std::vector<std::string>>();
      s.tags = j.at("tags").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      out.diagnostics.push_back({lineno, std::string("malformed record: ") + e.what()});
      continue;
    }
    if (auto why = validate(s); !why.empty()) {
      out.diagnostics.push_back({lineno, why});
      continue;
    }
    out.sentences.push_back(std::move(s));
  }
}

inline void ingest_tsv(std::istream& in, IngestResult& out) {
  std::string line;
  std::size_t lineno = 0, start = 0;
  Sentence current;
  std::string error;
  auto flush = [&] {
    if (!error.empty()) {
      out.diagnostics.push_back({start, error});
    } else if (!current.words.empty()) {
      if (auto why = validate(current); !why.empty())
        out.diagnostics.push_back({start, why});
      else
        out.sentences.push_back(std::move(current));
    }
    current = {};
    error.clear();
    start = 0;
  };
  while (std::getline(in, line)) {
    ++lineno;
    const std::string_view view = text::strip_cr(line);
    if (view.empty()) {
      flush();
      continue;
    }
    if (start == 0) start = lineno;
    const auto tab = view.find('\t');
    if (tab == std::string_view::npos || view.find('\t', tab + 1) != std::string_view::npos) {
      if (error.empty()) error = "line " + std::to_string(lineno) + ": expected word<TAB>tag";
      continue;
    }
    current.words.emplace_back(view.substr(0, tab));
    current.tags.emplace_back(view.substr(tab + 1));
  }
  flush();
}

}  // namespace detail

/// Reads sentences in input order. Malformed records are skipped and
/// reported with the (first) line number of the record.
inline IngestResult ingest(std::istream& in, CorpusFormat format) {
  IngestResult out;
  if (format == CorpusFormat::jsonl)
    detail::ingest_jsonl(in, out);
  else
    detail::ingest_tsv(in, out);
  return out;
}

inline CorpusFormat format_from_name(std::string_view name) {
  if (name == "jsonl") return CorpusFormat::jsonl;
  if (name == "tsv") return CorpusFormat::tsv;
  throw std::invalid_argument("unknown corpus format '" + std::string(name) + "'");
}

inline void write_jsonl(std::ostream& out, std::span<const Sentence> sentences) {
  for (const auto& s : sentences) {
    nlohmann::ordered_json j;
    j["words"] = s.words;
    j["tags"] = s.tags;
    out << j.dump() << '\n';
  }
}

inline void write_tsv(std::ostream& out, std::span<const Sentence> sentences) {
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.size(); ++i) out << s.words[i] << '\t' << s.tags[i] << '\n';
    out << '\n';
  }
}

/// Lowercased words joined by single spaces; tags do not participate.
inline std::string normalized_key(std::span<const std::string> words) {
  std::string key;
  for (const auto& w : words) {
    for (const auto& piece : text::split_ws(w)) {
      if (!key.empty()) key += ' ';
      key += text::lower_ascii(piece);
    }
  }
  return key;
}

inline std::string normalized_key(const Sentence& s) { return normalized_key(s.words); }

/// One key per line; each line is normalized the same way as sentences.
inline std::unordered_set<std::string> read_exclusion_keys(std::istream& in) {
  std::unordered_set<std::string> keys;
  std::string line;
  while (std::getline(in, line)) {
    const auto words = text::split_ws(line);
    if (!words.empty()) keys.insert(normalized_key(words));
  }
  return keys;
}

/// Drops duplicates (first occurrence wins) and sentences whose key is in
/// `exclusion`, preserving order.
inline std::vector<Sentence> sanitize(std::span<const Sentence> sentences,
                                      const std::unordered_set<std::string>& exclusion) {
  std::unordered_set<std::string> seen;
  std::vector<Sentence> out;
  for (const auto& s : sentences) {
    std::string key = normalized_key(s);
    if (exclusion.contains(key)) continue;
    if (!seen.insert(std::move(key)).second) continue;
    out.push_back(s);
  }
  return out;
}

/// Anything that can report the encoded length of a word sequence, boundary
/// markers included.
template <class Tok>
concept LengthMeasure = requires(const Tok& t, std::span<const std::string> words) {
  { t.encoded_length(words) } -> std::convertible_to<std::size_t>;
};

/// Length measure for when no subword vocabulary exists yet: one token per
/// word plus the two boundary markers.
struct WordLength {
  std::size_t encoded_length(std::span<const std::string> words) const { return words.size() + 2; }
};

struct MaxTokens {
  std::size_t n = 100;
};
struct TailQuantile {
  double q = 0.05;
};
using LengthPolicy = std::variant<MaxTokens, TailQuantile>;

/// Nearest-rank p-quantile of unsorted values.
inline std::size_t nearest_rank_quantile(std::vector<std::size_t> values, double p) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty sample is undefined");
  std::sort(values.begin(), values.end());
  const double pos = p * static_cast<double>(values.size());
  std::size_t rank = static_cast<std::size_t>(std::ceil(pos - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

/// {max_tokens: n} keeps sentences whose encoded length is < n.
/// {tail_quantile: q} keeps sentences no longer than the nearest-rank
/// (1 - q) quantile of the input lengths, dropping the upper tail.
template <LengthMeasure Tok>
std::vector<Sentence> length_filter(std::span<const Sentence> sentences, const Tok& tokenizer,
                                    const LengthPolicy& policy) {
  std::vector<std::size_t> lengths;
  lengths.reserve(sentences.size());
  for (const auto& s : sentences) lengths.push_back(tokenizer.encoded_length(s.words));

  std::size_t limit = 0;  // keep length <= limit
  if (const auto* m = std::get_if<MaxTokens>(&policy)) {
    if (m->n < 1) throw std::invalid_argument("max_tokens must be at least 1");
    limit = m->n - 1;
  } else {
    const double q = std::get<TailQuantile>(policy).q;
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("tail_quantile must lie in (0, 1)");
    if (sentences.empty())
      throw std::invalid_argument("tail_quantile filtering of an empty corpus: quantile undefined");
    limit = nearest_rank_quantile(lengths, 1.0 - q);
  }
  std::vector<Sentence> out;
  for (std::size_t i = 0; i < sentences.size(); ++i)
    if (lengths[i] <= limit) out.push_back(sentences[i]);
  return out;
}

struct CorpusStats {
  std::size_t sentence_count = 0;
  std::size_t word_count = 0;
  std::map<std::string, std::size_t> tag_frequency;
  std::map<std::size_t, std::size_t> length_histogram;

  /// Shard merge; associative and commutative.
  CorpusStats& merge(const CorpusStats& other) {
    sentence_count += other.sentence_count;
    word_count += other.word_count;
    for (const auto& [k, v] : other.tag_frequency) tag_frequency[k] += v;
    for (const auto& [k, v] : other.length_histogram) length_histogram[k] += v;
    return *this;
  }

  friend bool operator==(const CorpusStats&, const CorpusStats&) = default;
};

template <LengthMeasure Tok>
CorpusStats compute_stats(std::span<const Sentence> sentences, const Tok& tokenizer) {
  CorpusStats st;
  for (const auto& s : sentences) {
    ++st.sentence_count;
    st.word_count += s.size();
    for (const auto& t : s.tags) ++st.tag_frequency[t];
    ++st.length_histogram[tokenizer.encoded_length(s.words)];
  }
  return st;
}

inline nlohmann::ordered_json to_json(const CorpusStats& st) {
  nlohmann::ordered_json j;
  j["sentence_count"] = st.sentence_count;
  j["word_count"] = st.word_count;
  j["tag_frequency"] = st.tag_frequency;
  nlohmann::ordered_json hist = nlohmann::ordered_json::object();
  for (const auto& [len, n] : st.length_histogram) hist[std::to_string(len)] = n;
  j["length_histogram"] = hist;
  return j;
}

}  // namespace tagbert
