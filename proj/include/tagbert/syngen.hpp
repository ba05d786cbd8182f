#pragma once

// Synthetic categorial-grammar corpora with gold supertags.
//
// Types are first order: an atomic result category with a list of atomic
// arguments, each consumed from the left (`a\x`) or the right (`x/a`).
// Sentences are generated top-down from `s`: a category is realized by a
// word carrying a type with that result, flanked by its arguments, which are
// generated recursively. A CKY checker over forward and backward application
// verifies that every emitted tag sequence derives `s`.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/corpus.hpp"
#include "tagbert/rng.hpp"

namespace tagbert::syngen {

struct GrammarParams {
  std::size_t vocab_size = 50;
  std::size_t type_count = 12;
  double ambiguity_rate = 0.3;
  std::size_t max_depth = 3;       // maximum number of arguments of a type
  std::size_t nesting_limit = 6;   // derivation depth after which minimal types are forced
};

struct Arg {
  bool left = false;
  std::string atom;
  friend bool operator==(const Arg&, const Arg&) = default;
};

struct LexicalType {
  std::string name;
  std::string result;
  std::vector<Arg> args;  // innermost first; the last one is consumed first
  double weight = 1.0;
};

struct LexEntry {
  std::size_t type = 0;
  double weight = 1.0;
};

inline const std::vector<std::string>& atoms() {
  static const std::vector<std::string> a{"s", "np", "n", "pp"};
  return a;
}

inline std::string type_name(const std::string& result, const std::vector<Arg>& args) {
  std::string cat = result;
  bool complex = false;
  for (const auto& a : args) {
    const std::string inner = complex ? "(" + cat + ")" : cat;
    cat = a.left ? a.atom + "\\" + inner : inner + "/" + a.atom;
    complex = true;
  }
  return cat;
}

struct ToyGrammar {
  std::uint64_t seed = 0;
  GrammarParams params;
  std::vector<LexicalType> types;
  std::vector<std::string> words;
  std::vector<std::vector<LexEntry>> lexicon;  // per word

  // Derived indices.
  std::map<std::string, std::vector<std::size_t>> types_by_result;
  std::vector<std::vector<std::pair<std::size_t, double>>> words_by_type;

  void index() {
    types_by_result.clear();
    for (std::size_t t = 0; t < types.size(); ++t) types_by_result[types[t].result].push_back(t);
    words_by_type.assign(types.size(), {});
    for (std::size_t w = 0; w < words.size(); ++w)
      for (const auto& e : lexicon[w]) words_by_type[e.type].emplace_back(w, e.weight);
  }

  /// Candidate types for realizing `category` at derivation depth `depth`.
  std::vector<std::size_t> candidates(const std::string& category, std::size_t depth) const {
    auto it = types_by_result.find(category);
    if (it == types_by_result.end()) return {};
    std::vector<std::size_t> out = it->second;
    if (depth >= params.nesting_limit) {
      std::size_t min_arity = SIZE_MAX;
      for (auto t : out) min_arity = std::min(min_arity, types[t].args.size());
      std::erase_if(out, [&](std::size_t t) { return types[t].args.size() != min_arity; });
    }
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["seed"] = seed;
    j["params"] = {{"vocab_size", params.vocab_size},
                   {"type_count", params.type_count},
                   {"ambiguity_rate", params.ambiguity_rate},
                   {"max_depth", params.max_depth},
                   {"nesting_limit", params.nesting_limit}};
    auto types_j = nlohmann::ordered_json::array();
    for (const auto& t : types) types_j.push_back({{"type", t.name}, {"weight", t.weight}});
    j["types"] = types_j;
    auto lex = nlohmann::ordered_json::array();
    for (std::size_t w = 0; w < words.size(); ++w) {
      auto entries = nlohmann::ordered_json::array();
      for (const auto& e : lexicon[w]) entries.push_back({{"type", types[e.type].name}, {"weight", e.weight}});
      lex.push_back({{"word", words[w]}, {"entries", entries}});
    }
    j["lexicon"] = lex;
    return j;
  }
};

namespace detail {

inline std::vector<LexicalType> type_pool(std::size_t max_depth) {
  std::vector<LexicalType> pool;
  std::vector<std::vector<Arg>> arg_lists{{}};
  for (std::size_t depth = 0; depth <= max_depth; ++depth) {
    std::vector<std::vector<Arg>> next;
    for (const auto& args : arg_lists) {
      if (args.size() == depth)
        for (const auto& r : atoms()) pool.push_back({type_name(r, args), r, args, 1.0});
      for (bool left : {true, false})
        for (const auto& a : atoms()) {
          auto longer = args;
          longer.push_back({left, a});
          next.push_back(std::move(longer));
        }
    }
    arg_lists = std::move(next);
  }
  return pool;
}

inline std::string make_word(Rng& rng) {
  static const std::string onset = "bdfghjklmnprstvwz";
  static const std::string vowel = "aeiou";
  static const std::string coda = "nrst";
  std::string w;
  const auto syllables = rng.integer(1, 3);
  for (std::int64_t s = 0; s < syllables; ++s) {
    w += onset[rng.index(onset.size())];
    w += vowel[rng.index(vowel.size())];
    if (rng.bernoulli(0.3)) w += coda[rng.index(coda.size())];
  }
  return w;
}

}  // namespace detail

/// Expected number of uses of each type per sentence, ignoring the length
/// range: category demand is pushed down level by level from `s`.
inline std::vector<double> expected_usage(const ToyGrammar& g) {
  std::vector<double> usage(g.types.size(), 0.0);
  std::map<std::string, double> demand{{"s", 1.0}};
  for (std::size_t depth = 0; depth < g.params.nesting_limit + 64 && !demand.empty(); ++depth) {
    std::map<std::string, double> next;
    for (const auto& [cat, mass] : demand) {
      const auto cands = g.candidates(cat, depth);
      double total = 0.0;
      for (auto t : cands) total += g.types[t].weight;
      for (auto t : cands) {
        const double u = mass * g.types[t].weight / total;
        usage[t] += u;
        for (const auto& a : g.types[t].args) next[a.atom] += u;
      }
    }
    demand = std::move(next);
  }
  return usage;
}

/// Deterministic grammar for (seed, params). The first three types are
/// np, np\s and (np\s)/np; the rest are drawn from all types of arity up to
/// max_depth whose result category is already reachable. Types are
/// Zipf-weighted by selection rank.
inline ToyGrammar make_grammar(std::uint64_t seed, const GrammarParams& params) {
  if (params.type_count < 3) throw std::invalid_argument("type_count must be at least 3");
  if (!(params.ambiguity_rate >= 0.0 && params.ambiguity_rate < 1.0))
    throw std::invalid_argument("ambiguity_rate must lie in [0, 1)");
  if (params.max_depth < 2) throw std::invalid_argument("max_depth must be at least 2 (transitive types need two arguments)");
  if (params.vocab_size < params.type_count)
    throw std::invalid_argument("vocab_size must be at least type_count so every type has a word");

  auto pool = detail::type_pool(params.max_depth);
  if (params.type_count > pool.size())
    throw std::invalid_argument("type_count " + std::to_string(params.type_count) + " exceeds the " +
                                std::to_string(pool.size()) + " types expressible with max_depth " +
                                std::to_string(params.max_depth));

  ToyGrammar g;
  g.seed = seed;
  g.params = params;
  std::set<std::string> chosen, reachable{"s"}, terminable;
  auto take = [&](const LexicalType& t) {
    g.types.push_back(t);
    chosen.insert(t.name);
    for (const auto& a : t.args) reachable.insert(a.atom);
    bool term = true;
    for (const auto& a : t.args) term = term && terminable.contains(a.atom);
    if (term) terminable.insert(t.result);
  };
  take({"np", "np", {}, 1.0});
  take({type_name("s", {{true, "np"}}), "s", {{true, "np"}}, 1.0});
  take({type_name("s", {{true, "np"}, {false, "np"}}), "s", {{true, "np"}, {false, "np"}}, 1.0});

  Rng rng(derive_seed(seed, "grammar"));
  std::vector<LexicalType> candidates;
  for (const auto& t : pool)
    if (!chosen.contains(t.name)) candidates.push_back(t);
  std::shuffle(candidates.begin(), candidates.end(), rng.engine());

  auto atomic = [&](const std::string& a) {
    for (const auto& t : pool)
      if (t.args.empty() && t.result == a) return t;
    throw std::logic_error("missing atomic type");
  };

  while (g.types.size() < params.type_count) {
    bool added = false;
    for (std::size_t i = 0; i < candidates.size() && !added; ++i) {
      const auto& c = candidates[i];
      if (chosen.contains(c.name) || !reachable.contains(c.result)) continue;
      std::set<std::string> missing;
      for (const auto& a : c.args)
        if (!terminable.contains(a.atom) && !chosen.contains(a.atom)) missing.insert(a.atom);
      if (c.args.empty() && !chosen.contains(c.name)) missing.clear();
      if (g.types.size() + 1 + missing.size() > params.type_count) continue;
      const auto copy = c;
      take(copy);
      for (const auto& a : missing) take(atomic(a));
      // Recompute termination now that new atomic types exist.
      for (bool changed = true; changed;) {
        changed = false;
        for (const auto& t : g.types) {
          bool term = true;
          for (const auto& a : t.args) term = term && terminable.contains(a.atom);
          if (term && terminable.insert(t.result).second) changed = true;
        }
      }
      added = true;
    }
    if (!added)
      throw std::invalid_argument("cannot select " + std::to_string(params.type_count) +
                                  " reachable types under max_depth " + std::to_string(params.max_depth));
  }
  for (std::size_t i = 0; i < g.types.size(); ++i) g.types[i].weight = 1.0 / static_cast<double>(i + 1);

  g.index();
  const auto usage = expected_usage(g);

  // Lexicon: word i < type_count carries type i, the rest draw a type
  // uniformly. Words are ranked by a seeded shuffle and weighted 1/(rank+1)
  // within each of their types; the top-ranked share of words is ambiguous
  // and receives a second type of similar expected usage, so ambiguity sits
  // on frequent words.
  Rng wrng(derive_seed(seed, "lexicon"));
  std::set<std::string> seen;
  while (g.words.size() < params.vocab_size) {
    auto w = detail::make_word(wrng);
    if (seen.insert(w).second) g.words.push_back(std::move(w));
  }
  std::vector<std::size_t> order(params.vocab_size);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), wrng.engine());
  std::vector<double> word_weight(params.vocab_size);
  for (std::size_t r = 0; r < order.size(); ++r) word_weight[order[r]] = 1.0 / static_cast<double>(r + 1);

  g.lexicon.resize(params.vocab_size);
  for (std::size_t w = 0; w < params.vocab_size; ++w) {
    const std::size_t t = w < params.type_count ? w : wrng.index(params.type_count);
    g.lexicon[w].push_back({t, word_weight[w]});
  }
  const auto ambiguous = static_cast<std::size_t>(std::llround(params.ambiguity_rate * static_cast<double>(params.vocab_size)));
  for (std::size_t i = 0; i < ambiguous; ++i) {
    auto& entries = g.lexicon[order[i]];
    const std::size_t first = entries[0].type;
    std::vector<std::pair<double, std::size_t>> near;
    for (std::size_t t = 0; t < params.type_count; ++t)
      if (t != first) near.emplace_back(std::abs(std::log(usage[t] + 1e-12) - std::log(usage[first] + 1e-12)), t);
    std::sort(near.begin(), near.end());
    const std::size_t pool = std::min<std::size_t>(3, near.size());
    entries.push_back({near[wrng.index(pool)].second, word_weight[order[i]]});
  }
  g.index();
  return g;
}

struct Span {
  std::string category;
  std::size_t start = 0, end = 0;  // [start, end)
};

struct Derivation {
  Sentence sentence;
  std::vector<Span> spans;  // one per realized category, pre-order
};

struct LengthRange {
  std::size_t min = 3, max = 20;
};

namespace detail {

template <class W>
std::size_t weighted_choice(Rng& rng, const std::vector<W>& weights) {
  double total = 0;
  for (double w : weights) total += w;
  double u = rng.uniform() * total;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (u < weights[i]) return i;
    u -= weights[i];
  }
  return weights.size() - 1;
}

struct TooLong {};

inline void expand(const ToyGrammar& g, const std::string& category, std::size_t depth, std::size_t max_len,
                   Rng& rng, Derivation& out) {
  const auto cands = g.candidates(category, depth);
  if (cands.empty()) throw std::logic_error("no type realizes category " + category);
  std::vector<double> weights;
  for (auto t : cands) weights.push_back(g.types[t].weight);
  const LexicalType& type = g.types[cands[weighted_choice(rng, weights)]];
  const std::size_t node = out.spans.size();
  out.spans.push_back({category, out.sentence.size(), 0});
  for (const auto& a : type.args)
    if (a.left) expand(g, a.atom, depth + 1, max_len, rng, out);
  const std::size_t type_id = static_cast<std::size_t>(&type - g.types.data());
  const auto& words = g.words_by_type[type_id];
  std::vector<double> ww;
  for (const auto& [w, weight] : words) ww.push_back(weight);
  out.sentence.words.push_back(g.words[words[weighted_choice(rng, ww)].first]);
  out.sentence.tags.push_back(type.name);
  if (out.sentence.size() > max_len) throw TooLong{};
  for (auto it = type.args.rbegin(); it != type.args.rend(); ++it)
    if (!it->left) expand(g, it->atom, depth + 1, max_len, rng, out);
  out.spans[node].end = out.sentence.size();
}

}  // namespace detail

/// Sentence i is drawn from its own substream of `seed`, redrawn until its
/// length falls inside `lengths`.
inline std::vector<Derivation> sample_derivations(const ToyGrammar& g, std::size_t n, std::uint64_t seed,
                                                  LengthRange lengths = {}) {
  if (n < 1) throw std::invalid_argument("sample size must be at least 1");
  if (lengths.min < 1 || lengths.min > lengths.max) throw std::invalid_argument("invalid length range");
  std::vector<Derivation> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "sample", i));
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt > 100000) throw std::runtime_error("grammar cannot produce sentences in the requested length range");
      Derivation d;
      try {
        detail::expand(g, "s", 0, lengths.max, rng, d);
      } catch (const detail::TooLong&) {
        continue;
      }
      if (d.sentence.size() < lengths.min) continue;
      out.push_back(std::move(d));
      break;
    }
  }
  return out;
}

inline std::vector<Sentence> sample(const ToyGrammar& g, std::size_t n, std::uint64_t seed,
                                    LengthRange lengths = {}) {
  std::vector<Sentence> out;
  for (auto& d : sample_derivations(g, n, seed, lengths)) out.push_back(std::move(d.sentence));
  return out;
}

// --- derivation checking --------------------------------------------------

struct Category {
  std::string atom;  // set for atomic categories
  char slash = 0;    // '/' : left = result, right = argument; '\\' : left = argument, right = result
  std::shared_ptr<const Category> left, right;

  bool atomic() const noexcept { return slash == 0; }

  std::string str() const {
    if (atomic()) return atom;
    auto wrap = [](const Category& c) { return c.atomic() ? c.str() : "(" + c.str() + ")"; };
    return wrap(*left) + slash + wrap(*right);
  }
};

namespace detail {

inline std::shared_ptr<const Category> parse_term(const std::string& s, std::size_t& i);

inline std::shared_ptr<const Category> parse_expr(const std::string& s, std::size_t& i) {
  auto lhs = parse_term(s, i);
  while (i < s.size() && (s[i] == '/' || s[i] == '\\')) {
    const char op = s[i++];
    auto rhs = parse_term(s, i);
    auto c = std::make_shared<Category>();
    c->slash = op;
    c->left = lhs;
    c->right = rhs;
    lhs = c;
  }
  return lhs;
}

inline std::shared_ptr<const Category> parse_term(const std::string& s, std::size_t& i) {
  if (i < s.size() && s[i] == '(') {
    ++i;
    auto c = parse_expr(s, i);
    if (i >= s.size() || s[i] != ')') throw std::invalid_argument("unbalanced parentheses in type '" + s + "'");
    ++i;
    return c;
  }
  std::size_t j = i;
  while (j < s.size() && s[j] != '/' && s[j] != '\\' && s[j] != '(' && s[j] != ')') ++j;
  if (j == i) throw std::invalid_argument("malformed type '" + s + "'");
  auto c = std::make_shared<Category>();
  c->atom = s.substr(i, j - i);
  i = j;
  return c;
}

}  // namespace detail

inline std::shared_ptr<const Category> parse_category(const std::string& s) {
  std::size_t i = 0;
  auto c = detail::parse_expr(s, i);
  if (i != s.size()) throw std::invalid_argument("trailing characters in type '" + s + "'");
  return c;
}

/// True when the tag sequence derives `goal` by forward (X/Y Y => X) and
/// backward (Y Y\X => X) application.
inline bool derives(const std::vector<std::string>& tags, const std::string& goal = "s") {
  const std::size_t n = tags.size();
  if (n == 0) return false;
  std::map<std::string, std::shared_ptr<const Category>> parsed;
  auto get = [&](const std::string& s) {
    auto it = parsed.find(s);
    if (it != parsed.end()) return it->second;
    return parsed[s] = parse_category(s);
  };
  std::vector<std::vector<std::set<std::string>>> chart(n, std::vector<std::set<std::string>>(n + 1));
  for (std::size_t i = 0; i < n; ++i) chart[i][i + 1].insert(get(tags[i])->str());
  for (std::size_t len = 2; len <= n; ++len)
    for (std::size_t i = 0; i + len <= n; ++i)
      for (std::size_t k = i + 1; k < i + len; ++k)
        for (const auto& a : chart[i][k])
          for (const auto& b : chart[k][i + len]) {
            auto ca = get(a), cb = get(b);
            if (ca->slash == '/' && ca->right->str() == b) chart[i][i + len].insert(ca->left->str());
            if (cb->slash == '\\' && cb->left->str() == a) chart[i][i + len].insert(cb->right->str());
          }
  return chart[0][n].contains(goal);
}

// --- derived labelling tasks ----------------------------------------------

/// Coarse POS-like label: the result category of the word's type.
inline std::vector<std::string> coarse_labels(const std::vector<std::string>& tags) {
  std::vector<std::string> out;
  for (const auto& t : tags) {
    auto c = parse_category(t);
    while (!c->atomic()) c = c->slash == '/' ? c->left : c->right;
    std::string label = c->atom;
    for (char& ch : label) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    out.push_back(label);
  }
  return out;
}

/// IOB chunks of the outermost noun-phrase constituents.
inline std::vector<std::string> np_chunk_labels(const Derivation& d) {
  std::vector<std::string> out(d.sentence.size(), "O");
  for (const auto& sp : d.spans) {
    if (sp.category != "np") continue;
    if (out[sp.start] != "O") continue;  // inside an earlier, enclosing np
    out[sp.start] = "B-NP";
    for (std::size_t i = sp.start + 1; i < sp.end; ++i) out[i] = "I-NP";
  }
  return out;
}

}  // namespace tagbert::syngen
