#pragma once

// Subword (WordPiece-style) and supertag vocabularies, and sentence encoding
// with first-subword alignment of word-level tags.

#include <array>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tagbert/corpus.hpp"
#include "tagbert/text.hpp"

namespace tagbert {

inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kUnk = 1;
inline constexpr std::int32_t kCls = 2;
inline constexpr std::int32_t kSep = 3;
inline constexpr std::int32_t kMask = 4;
inline constexpr std::int32_t kReservedSubwords = 5;

inline constexpr std::int32_t kTypePad = 0;
inline constexpr std::int32_t kTypeUnk = 1;
inline constexpr std::int32_t kReservedTypes = 2;

inline constexpr std::string_view kContinuation = "##";
inline constexpr std::size_t kMaxWordChars = 64;

namespace detail {

/// Ordered token list with reverse index; line number in the file = id.
class TokenTable {
 public:
  TokenTable() = default;
  explicit TokenTable(std::span<const std::string_view> reserved) {
    for (auto r : reserved) add(std::string(r));
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::optional<std::int32_t> find(const std::string& tok) const {
    auto it = index_.find(tok);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(const std::string& tok) const { return index_.contains(tok); }

  /// Returns false when the token already exists.
  bool add(std::string tok) {
    if (index_.contains(tok)) return false;
    index_.emplace(tok, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(std::move(tok));
    return true;
  }

  void save(std::ostream& out) const {
    for (const auto& t : tokens_) out << t << '\n';
  }

  static TokenTable load(std::istream& in, std::span<const std::string_view> reserved,
                         std::string_view what) {
    TokenTable table;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::string tok(text::strip_cr(line));
      if (lineno <= reserved.size() && tok != reserved[lineno - 1])
        throw std::invalid_argument(std::string(what) + " file line " + std::to_string(lineno) +
                                    ": expected reserved token " + std::string(reserved[lineno - 1]) +
                                    ", found '" + tok + "'");
      if (tok.empty())
        throw std::invalid_argument(std::string(what) + " file line " + std::to_string(lineno) +
                                    ": empty entry");
      if (!table.add(tok))
        throw std::invalid_argument(std::string(what) + " file line " + std::to_string(lineno) +
                                    ": duplicate entry '" + tok + "'");
    }
    if (table.size() < reserved.size())
      throw std::invalid_argument(std::string(what) + " file is missing reserved entries");
    return table;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

inline constexpr std::array<std::string_view, 5> kSubwordReserved = {"[PAD]", "[UNK]", "[CLS]",
                                                                     "[SEP]", "[MASK]"};
inline constexpr std::array<std::string_view, 2> kTypeReserved = {"[PAD]", "[UNK]"};

}  // namespace detail

class SubwordVocab {
 public:
  SubwordVocab() : table_(detail::kSubwordReserved) {}

  static SubwordVocab from_tokens(std::span<const std::string> tokens) {
    SubwordVocab v;
    for (const auto& t : tokens) v.add_piece(t);
    return v;
  }

  static SubwordVocab load(std::istream& in) {
    SubwordVocab v;
    v.table_ = detail::TokenTable::load(in, detail::kSubwordReserved, "subword vocabulary");
    for (std::size_t i = kReservedSubwords; i < v.table_.size(); ++i)
      check_piece(v.table_.tokens()[i]);
    return v;
  }

  void save(std::ostream& out) const { table_.save(out); }

  std::size_t size() const noexcept { return table_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return table_.tokens(); }
  const std::string& token(std::int32_t id) const { return table_.token(id); }
  std::optional<std::int32_t> find(const std::string& piece) const { return table_.find(piece); }
  std::int32_t id(const std::string& piece) const { return table_.find(piece).value_or(kUnk); }

  bool add_piece(const std::string& piece) {
    check_piece(piece);
    return table_.add(piece);
  }

  /// Greedy longest-match-first segmentation. Pieces after the first are
  /// looked up with the "##" prefix; if any position has no match, or the
  /// word exceeds kMaxWordChars code points, the whole word is [UNK].
  std::vector<std::int32_t> tokenize_word(std::string_view word) const {
    const auto chars = text::code_points(word);
    if (chars.empty() || chars.size() > kMaxWordChars) return {kUnk};
    std::vector<std::int32_t> out;
    std::size_t start = 0;
    while (start < chars.size()) {
      std::optional<std::int32_t> match;
      std::size_t end = chars.size();
      for (; end > start; --end) {
        std::string piece = start > 0 ? std::string(kContinuation) : std::string();
        for (std::size_t k = start; k < end; ++k) piece += chars[k];
        if ((match = table_.find(piece))) break;
      }
      if (!match) return {kUnk};
      out.push_back(*match);
      start = end;
    }
    return out;
  }

  std::size_t encoded_length(std::span<const std::string> words) const {
    std::size_t n = 2;
    for (const auto& w : words) n += tokenize_word(w).size();
    return n;
  }

 private:
  static void check_piece(const std::string& piece) {
    if (piece.empty() || piece == kContinuation || text::has_space(piece))
      throw std::invalid_argument("invalid subword piece '" + piece + "'");
  }

  detail::TokenTable table_;
};

/// Frequency-driven merge builder: starts from every character seen (both
/// as word-initial and "##" continuation piece) and repeatedly merges the
/// most frequent adjacent pair inside words, ties broken by the
/// lexicographically smallest pair, until target_size entries exist.
inline SubwordVocab build_subword_vocab(std::span<const Sentence> corpus, std::size_t target_size) {
  std::map<std::string, std::size_t> word_freq;
  for (const auto& s : corpus)
    for (const auto& w : s.words) ++word_freq[w];
  if (word_freq.empty()) throw std::invalid_argument("cannot build a subword vocabulary from an empty corpus");

  std::set<std::string> alphabet;
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  for (const auto& [w, n] : word_freq) {
    auto chars = text::code_points(w);
    std::vector<std::string> pieces;
    for (std::size_t i = 0; i < chars.size(); ++i) {
      alphabet.insert(chars[i]);
      pieces.push_back(i == 0 ? chars[i] : std::string(kContinuation) + chars[i]);
    }
    words.emplace_back(std::move(pieces), n);
  }
  const std::size_t floor = kReservedSubwords + 2 * alphabet.size();
  if (target_size <= floor)
    throw std::invalid_argument("target vocabulary size " + std::to_string(target_size) +
                                " must exceed reserved tokens plus alphabet (" +
                                std::to_string(floor) + ")");

  SubwordVocab vocab;
  for (const auto& c : alphabet) {
    vocab.add_piece(c);
    vocab.add_piece(std::string(kContinuation) + c);
  }

  auto merged = [](const std::string& a, const std::string& b) {
    return a + b.substr(kContinuation.size());
  };

  while (vocab.size() < target_size) {
    std::map<std::pair<std::string, std::string>, std::size_t> pairs;
    for (const auto& [pieces, n] : words)
      for (std::size_t i = 0; i + 1 < pieces.size(); ++i) pairs[{pieces[i], pieces[i + 1]}] += n;
    if (pairs.empty()) break;
    auto best = pairs.begin();
    for (auto it = pairs.begin(); it != pairs.end(); ++it)
      if (it->second > best->second) best = it;
    const auto [left, right] = best->first;
    const std::string piece = merged(left, right);
    for (auto& [pieces, n] : words) {
      std::vector<std::string> next;
      for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (i + 1 < pieces.size() && pieces[i] == left && pieces[i + 1] == right) {
          next.push_back(piece);
          ++i;
        } else {
          next.push_back(pieces[i]);
        }
      }
      pieces = std::move(next);
    }
    vocab.add_piece(piece);
  }
  return vocab;
}

struct TypeVocabReport {
  double requested_coverage = 1.0;
  double achieved_coverage = 1.0;
  std::size_t kept_types = 0;
  std::size_t total_types = 0;
};

class TypeVocab {
 public:
  TypeVocab() : table_(detail::kTypeReserved) {}

  static TypeVocab load(std::istream& in) {
    TypeVocab v;
    v.table_ = detail::TokenTable::load(in, detail::kTypeReserved, "type vocabulary");
    return v;
  }

  void save(std::ostream& out) const { table_.save(out); }

  std::size_t size() const noexcept { return table_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return table_.tokens(); }
  const std::string& token(std::int32_t id) const { return table_.token(id); }

  /// Type id, or kTypeUnk for types filtered out of the vocabulary.
  std::int32_t id(const std::string& tag) const { return table_.find(tag).value_or(kTypeUnk); }

  bool add(const std::string& tag) { return table_.add(tag); }

 private:
  detail::TokenTable table_;
};

/// Keeps the smallest frequency-ranked prefix of types (ties broken
/// lexicographically) whose cumulative count reaches coverage * total.
inline TypeVocab build_type_vocab(const CorpusStats& stats, double coverage,
                                  TypeVocabReport* report = nullptr) {
  if (!(coverage > 0.0 && coverage <= 1.0))
    throw std::invalid_argument("coverage must lie in (0, 1]");
  if (stats.tag_frequency.empty())
    throw std::invalid_argument("cannot build a type vocabulary from an empty frequency table");
  std::vector<std::pair<std::string, std::size_t>> ranked(stats.tag_frequency.begin(),
                                                          stats.tag_frequency.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::size_t total = 0;
  for (const auto& [_, n] : ranked) total += n;
  const double needed = coverage * static_cast<double>(total) * (1.0 - 1e-12);

  TypeVocab vocab;
  std::size_t covered = 0;
  for (const auto& [tag, n] : ranked) {
    if (static_cast<double>(covered) >= needed) break;
    vocab.add(tag);
    covered += n;
  }
  if (report) {
    report->requested_coverage = coverage;
    report->achieved_coverage = static_cast<double>(covered) / static_cast<double>(total);
    report->kept_types = vocab.size() - kReservedTypes;
    report->total_types = ranked.size();
  }
  return vocab;
}

struct TokenizedSentence {
  std::vector<std::int32_t> token_ids;
  std::vector<std::int32_t> word_index;  // -1 at [CLS]/[SEP]
  std::vector<std::uint8_t> is_first_subword;
  std::vector<std::int32_t> tag_ids;  // one per word

  std::size_t size() const noexcept { return token_ids.size(); }
  std::size_t word_count() const noexcept {
    return word_index.empty() ? 0 : static_cast<std::size_t>(*std::max_element(word_index.begin(), word_index.end()) + 1);
  }
};

inline TokenizedSentence encode(const SubwordVocab& vocab, std::span<const std::string> words) {
  TokenizedSentence out;
  out.token_ids.push_back(kCls);
  out.word_index.push_back(-1);
  out.is_first_subword.push_back(0);
  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto pieces = vocab.tokenize_word(words[w]);
    for (std::size_t p = 0; p < pieces.size(); ++p) {
      out.token_ids.push_back(pieces[p]);
      out.word_index.push_back(static_cast<std::int32_t>(w));
      out.is_first_subword.push_back(p == 0 ? 1 : 0);
    }
  }
  out.token_ids.push_back(kSep);
  out.word_index.push_back(-1);
  out.is_first_subword.push_back(0);
  return out;
}

inline TokenizedSentence encode(const SubwordVocab& vocab, const TypeVocab& types,
                                const Sentence& sentence) {
  TokenizedSentence out = encode(vocab, sentence.words);
  out.tag_ids.reserve(sentence.tags.size());
  for (const auto& t : sentence.tags) out.tag_ids.push_back(types.id(t));
  return out;
}

}  // namespace tagbert
