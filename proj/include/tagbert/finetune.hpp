#pragma once

// Token-classification fine-tuning and CoNLL-style scoring.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/checkpoint.hpp"
#include "tagbert/masking.hpp"
#include "tagbert/model.hpp"
#include "tagbert/optim.hpp"
#include "tagbert/pretrain.hpp"
#include "tagbert/text.hpp"
#include "tagbert/vocab.hpp"

namespace tagbert {

enum class LabelScheme { plain, iob };

struct LabeledSentence {
  std::vector<std::string> words;
  std::vector<std::string> labels;
  friend bool operator==(const LabeledSentence&, const LabeledSentence&) = default;
};

/// Two whitespace-separated columns (word, label); blank lines end sentences.
inline std::vector<LabeledSentence> read_conll(std::istream& in) {
  std::vector<LabeledSentence> out;
  LabeledSentence cur;
  std::string line;
  std::size_t lineno = 0;
  auto flush = [&] {
    if (!cur.words.empty()) out.push_back(std::move(cur));
    cur = {};
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto cols = text::split_ws(text::strip_cr(line));
    if (cols.empty()) {
      flush();
      continue;
    }
    if (cols.size() != 2)
      throw std::runtime_error("line " + std::to_string(lineno) + ": expected 'word<TAB>label', got " +
                               std::to_string(cols.size()) + " columns");
    cur.words.push_back(cols[0]);
    cur.labels.push_back(cols[1]);
  }
  flush();
  return out;
}

inline void write_conll(std::ostream& out, std::span<const LabeledSentence> sentences) {
  for (const auto& s : sentences) {
    for (std::size_t i = 0; i < s.words.size(); ++i) out << s.words[i] << '\t' << s.labels[i] << '\n';
    out << '\n';
  }
}

struct IobLabel {
  char prefix = 'O';  // 'B', 'I' or 'O'
  std::string type;
};

inline IobLabel parse_iob(const std::string& label) {
  if (label == "O") return {};
  if (label.size() > 2 && (label[0] == 'B' || label[0] == 'I') && label[1] == '-')
    return {label[0], label.substr(2)};
  throw std::invalid_argument("malformed IOB label '" + label + "'");
}

struct TaskDataset {
  std::vector<LabeledSentence> train, validation, test;
  std::vector<std::string> label_set;  // sorted; index = class id
  LabelScheme scheme = LabelScheme::plain;

  std::int32_t label_id(const std::string& label) const {
    auto it = std::lower_bound(label_set.begin(), label_set.end(), label);
    if (it == label_set.end() || *it != label) throw std::out_of_range("label '" + label + "' not in label set");
    return static_cast<std::int32_t>(it - label_set.begin());
  }
};

inline TaskDataset make_task(std::vector<LabeledSentence> train, std::vector<LabeledSentence> validation,
                             std::vector<LabeledSentence> test, LabelScheme scheme) {
  TaskDataset d{std::move(train), std::move(validation), std::move(test), {}, scheme};
  std::set<std::string> labels;
  for (const auto* split : {&d.train, &d.validation, &d.test})
    for (const auto& s : *split) {
      if (s.words.size() != s.labels.size()) throw std::invalid_argument("sentence with mismatched word and label counts");
      for (const auto& l : s.labels) {
        if (scheme == LabelScheme::iob) parse_iob(l);
        labels.insert(l);
      }
    }
  d.label_set.assign(labels.begin(), labels.end());
  return d;
}

// --- scoring ----------------------------------------------------------------

inline double accuracy(std::span<const std::vector<std::string>> pred, std::span<const std::vector<std::string>> gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("accuracy: sentence counts differ");
  std::size_t total = 0, hit = 0;
  for (std::size_t s = 0; s < gold.size(); ++s) {
    if (pred[s].size() != gold[s].size()) throw std::invalid_argument("accuracy: sentence lengths differ");
    for (std::size_t i = 0; i < gold[s].size(); ++i) hit += pred[s][i] == gold[s][i];
    total += gold[s].size();
  }
  if (total == 0) throw std::invalid_argument("accuracy of an empty dataset is undefined");
  return static_cast<double>(hit) / static_cast<double>(total);
}

struct Chunk {
  std::string type;
  std::size_t start = 0, end = 0;  // [start, end)
  auto operator<=>(const Chunk&) const = default;
};

/// Chunks of an IOB sequence. An I-X following O or a different type opens a
/// new chunk, as the CoNLL scorer does.
inline std::vector<Chunk> extract_chunks(std::span<const std::string> labels) {
  std::vector<Chunk> out;
  std::optional<Chunk> open;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const IobLabel l = parse_iob(labels[i]);
    if (open && (l.prefix != 'I' || l.type != open->type)) {
      open->end = i;
      out.push_back(*open);
      open.reset();
    }
    if (l.prefix != 'O' && !open) open = Chunk{l.type, i, 0};
  }
  if (open) {
    open->end = labels.size();
    out.push_back(*open);
  }
  return out;
}

struct SpanScores {
  double precision = 0.0, recall = 0.0, f1 = 0.0;  // percentages
  std::size_t correct = 0, predicted = 0, gold = 0;
};

/// Micro-averaged exact-match span scores in percent. With no spans on
/// either side the sequences agree perfectly and all three scores are 100.
inline SpanScores span_f1(std::span<const std::vector<std::string>> pred, std::span<const std::vector<std::string>> gold) {
  if (pred.size() != gold.size()) throw std::invalid_argument("span_f1: sentence counts differ");
  SpanScores s;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (pred[i].size() != gold[i].size()) throw std::invalid_argument("span_f1: sentence lengths differ");
    const auto p = extract_chunks(pred[i]);
    const auto g = extract_chunks(gold[i]);
    const std::set<Chunk> gs(g.begin(), g.end());
    for (const auto& c : p) s.correct += gs.contains(c);
    s.predicted += p.size();
    s.gold += g.size();
  }
  if (s.predicted == 0 && s.gold == 0) {
    s.precision = s.recall = s.f1 = 100.0;
    return s;
  }
  s.precision = s.predicted ? 100.0 * static_cast<double>(s.correct) / static_cast<double>(s.predicted) : 0.0;
  s.recall = s.gold ? 100.0 * static_cast<double>(s.correct) / static_cast<double>(s.gold) : 0.0;
  s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

// --- model ------------------------------------------------------------------

/// Adds an affine classifier ("head.weight" (C, d), "head.bias" (C)).
template <class T>
void attach_head(Model<T>& model, std::size_t num_labels, std::uint64_t seed) {
  if (num_labels < 2) throw std::invalid_argument("a classifier needs at least 2 labels, got " + std::to_string(num_labels));
  if (model.has("head.weight")) throw std::invalid_argument("model already has a classification head");
  const std::size_t d = model.config().hidden;
  Parameter<T> w;
  w.name = "head.weight";
  w.value = Tensor<T>({num_labels, d});
  Rng rng(derive_seed(seed, "init", hash_name(w.name)));
  for (T& v : w.value.data()) {
    double z;
    do z = rng.normal();
    while (std::abs(z) > 2.0);
    v = static_cast<T>(0.02 * z);
  }
  Parameter<T> b;
  b.name = "head.bias";
  b.value = Tensor<T>({num_labels});
  b.decay = false;
  model.add_parameter(std::move(w));
  model.add_parameter(std::move(b));
}

template <class T>
std::size_t head_classes(const Model<T>& model) {
  return model.param("head.weight").value.shape()[0];
}

/// Classifier logits at the first subword of every word that survived
/// truncation (rows with a label in the batch).
template <ModelRef M>
Var classifier_logits(Tape<scalar_of<M>>& t, M& model, const MaskedBatch& batch, const std::vector<std::size_t>& rows,
                      double head_dropout = 0.0, Rng* rng = nullptr) {
  const auto hidden = encode(t, model, batch, ForwardOptions{rng});
  Var x = ad::gather_rows(t, hidden.back(), rows);
  x = ad::dropout(t, x, rng ? head_dropout : 0.0, rng);
  return ad::linear(t, x, t.param(model.param("head.weight")), t.param(model.param("head.bias")));
}

struct EncodedTask {
  std::vector<TokenizedSentence> sentences;
  std::vector<std::vector<std::int32_t>> labels;
};

inline EncodedTask encode_task(const SubwordVocab& vocab, const TaskDataset& task,
                               std::span<const LabeledSentence> split) {
  EncodedTask out;
  for (const auto& s : split) {
    out.sentences.push_back(encode(vocab, s.words));
    std::vector<std::int32_t> ids;
    for (const auto& l : s.labels) ids.push_back(task.label_id(l));
    out.labels.push_back(std::move(ids));
  }
  return out;
}

inline MaskedBatch task_batch(const EncodedTask& data, std::span<const std::size_t> ids, std::size_t max_len) {
  std::vector<MaskedInstance> instances;
  for (std::size_t i : ids) instances.push_back(plain_instance(data.sentences[i], data.labels[i]));
  return collate(instances, max_len);
}

inline std::vector<std::size_t> labelled_rows(const MaskedBatch& b) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < b.positions(); ++i)
    if (b.tag_labels[i] != kIgnore) rows.push_back(i);
  return rows;
}

struct Predictions {
  std::vector<std::vector<std::int32_t>> labels;  // per sentence, words kept after truncation
  std::size_t excluded_words = 0;
};

/// One prediction per word whose first subword survives truncation to
/// max_len tokens; the remaining words are counted as excluded.
template <class T>
Predictions predict(const Model<T>& model, const EncodedTask& data, std::size_t max_len, std::size_t batch_size = 64) {
  Predictions out;
  out.labels.resize(data.sentences.size());
  std::vector<std::size_t> ids(data.sentences.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t first = 0; first < ids.size(); first += batch_size) {
    const auto chunk = std::span(ids).subspan(first, std::min(batch_size, ids.size() - first));
    const MaskedBatch b = task_batch(data, chunk, max_len);
    const auto rows = labelled_rows(b);
    Tape<T> tape;
    const Tensor<T> logits = tape.value(classifier_logits(tape, model, b, rows));
    for (std::size_t r = 0; r < rows.size(); ++r)
      out.labels[chunk[rows[r] / b.length]].push_back(static_cast<std::int32_t>(argmax_row(logits, r)));
  }
  for (std::size_t s = 0; s < data.sentences.size(); ++s)
    out.excluded_words += data.labels[s].size() - out.labels[s].size();
  return out;
}

struct TaskScores {
  double accuracy = 0.0;
  std::optional<SpanScores> spans;
  std::size_t scored_words = 0, excluded_words = 0;
};

template <class T>
TaskScores evaluate_task(const Model<T>& model, const TaskDataset& task, const EncodedTask& data, std::size_t max_len) {
  const Predictions p = predict(model, data, max_len);
  std::vector<std::vector<std::string>> pred, gold;
  TaskScores s;
  for (std::size_t i = 0; i < data.labels.size(); ++i) {
    std::vector<std::string> ps, gs;
    for (std::size_t w = 0; w < p.labels[i].size(); ++w) {
      ps.push_back(task.label_set[static_cast<std::size_t>(p.labels[i][w])]);
      gs.push_back(task.label_set[static_cast<std::size_t>(data.labels[i][w])]);
    }
    s.scored_words += ps.size();
    pred.push_back(std::move(ps));
    gold.push_back(std::move(gs));
  }
  s.excluded_words = p.excluded_words;
  s.accuracy = accuracy(pred, gold);
  if (task.scheme == LabelScheme::iob) s.spans = span_f1(pred, gold);
  return s;
}

enum class SelectionMetric { accuracy, span_f1 };

struct FinetuneConfig {
  double lr = 3e-5;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 10;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t max_len = 100;
  SelectionMetric selection = SelectionMetric::accuracy;
  double head_dropout = 0.1;
  double clip_norm = 1.0;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("finetune batch_size must be >= 1");
    if (seeds.empty()) throw std::invalid_argument("finetune needs at least one seed");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
      throw std::invalid_argument("finetune seeds must be distinct");
    if (max_len < 2) throw std::invalid_argument("max_len must be >= 2");
    if (!(head_dropout >= 0.0 && head_dropout < 1.0)) throw std::invalid_argument("head_dropout must lie in [0, 1)");
  }
};

inline double selection_value(const TaskScores& s, SelectionMetric m) {
  if (m == SelectionMetric::span_f1) {
    if (!s.spans) throw std::invalid_argument("span_f1 selection requires an IOB task");
    return s.spans->f1;
  }
  return s.accuracy;
}

struct SeedRun {
  std::uint64_t seed = 0;
  std::size_t best_epoch = 0;  // 0 when no epoch ran
  std::vector<double> validation_curve;
  TaskScores test;
};

struct FinetuneReport {
  std::vector<SeedRun> runs;
  double mean_test_accuracy = 0.0;
  std::optional<double> mean_test_span_f1;
  std::size_t excluded_words = 0;  // in the test split, per run
};

inline nlohmann::ordered_json to_json(const FinetuneReport& r) {
  nlohmann::ordered_json j;
  auto runs = nlohmann::ordered_json::array();
  for (const auto& run : r.runs) {
    nlohmann::ordered_json x;
    x["seed"] = run.seed;
    x["best_epoch"] = run.best_epoch;
    x["validation_curve"] = run.validation_curve;
    x["test_accuracy"] = run.test.accuracy;
    if (run.test.spans) {
      x["test_precision"] = run.test.spans->precision;
      x["test_recall"] = run.test.spans->recall;
      x["test_span_f1"] = run.test.spans->f1;
    }
    x["scored_words"] = run.test.scored_words;
    x["excluded_words"] = run.test.excluded_words;
    runs.push_back(x);
  }
  j["runs"] = runs;
  j["mean"]["test_accuracy"] = r.mean_test_accuracy;
  if (r.mean_test_span_f1) j["mean"]["test_span_f1"] = *r.mean_test_span_f1;
  j["excluded_words"] = r.excluded_words;
  return j;
}

template <class T>
struct FinetuneResult {
  FinetuneReport report;
  std::vector<Model<T>> best;  // per seed
};

/// Per seed: fresh head on a copy of the pretrained model, Adam without
/// weight decay at a constant learning rate, validation after every epoch,
/// the earliest best epoch kept and scored on the test split.
template <class T>
FinetuneResult<T> finetune(const Model<T>& pretrained, const SubwordVocab& vocab, const TaskDataset& task,
                           const FinetuneConfig& config,
                           std::optional<std::filesystem::path> checkpoint_dir = std::nullopt) {
  config.validate();
  if (task.train.empty()) throw std::invalid_argument("fine-tuning needs a non-empty training split");
  const EncodedTask train = encode_task(vocab, task, task.train);
  const EncodedTask validation = encode_task(vocab, task, task.validation);
  const EncodedTask test = encode_task(vocab, task, task.test);
  FinetuneResult<T> out;

  for (std::uint64_t seed : config.seeds) {
    Model<T> model = pretrained;
    attach_head(model, task.label_set.size(), seed);
    AdamW<T> adam(AdamWOptions{0.9, 0.999, 1e-8, 0.0});
    SeedRun run;
    run.seed = seed;
    Model<T> best = model;
    double best_value = -std::numeric_limits<double>::infinity();
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
      const auto order = epoch_order(train.sentences.size(), seed, epoch);
      for (std::size_t first = 0; first < order.size(); first += config.batch_size) {
        const auto ids = std::span(order).subspan(first, std::min(config.batch_size, order.size() - first));
        const MaskedBatch b = task_batch(train, ids, config.max_len);
        const auto rows = labelled_rows(b);
        if (rows.empty()) continue;
        std::vector<std::int32_t> targets;
        for (auto r : rows) targets.push_back(b.tag_labels[r]);
        ++step;
        zero_grad(model.parameters());
        Rng rng(derive_seed(seed, "dropout", step));
        Tape<T> tape;
        const Var logits = classifier_logits(tape, model, b, rows, config.head_dropout, &rng);
        const ad::CrossEntropy ce = ad::cross_entropy(tape, logits, targets, kIgnore);
        if (!std::isfinite(static_cast<double>(tape.value(ce.loss).item())))
          throw std::runtime_error("non-finite fine-tuning loss at step " + std::to_string(step) + " (seed " +
                                   std::to_string(seed) + ")");
        tape.backward(ce.loss);
        clip_grad_norm(model.parameters(), config.clip_norm);
        adam.step(model.parameters(), config.lr);
      }
      const double value = validation.sentences.empty()
                               ? 0.0
                               : selection_value(evaluate_task(model, task, validation, config.max_len), config.selection);
      run.validation_curve.push_back(value);
      if (value > best_value) {
        best_value = value;
        best = model;
        run.best_epoch = epoch;
      }
    }
    if (!test.sentences.empty()) run.test = evaluate_task(best, task, test, config.max_len);
    if (checkpoint_dir) save_checkpoint(*checkpoint_dir / ("seed-" + std::to_string(seed)), best);
    out.report.runs.push_back(run);
    out.best.push_back(std::move(best));
  }

  double acc = 0.0, f1 = 0.0;
  for (const auto& r : out.report.runs) {
    acc += r.test.accuracy;
    if (r.test.spans) f1 += r.test.spans->f1;
  }
  const double n = static_cast<double>(out.report.runs.size());
  out.report.mean_test_accuracy = acc / n;
  if (task.scheme == LabelScheme::iob) out.report.mean_test_span_f1 = f1 / n;
  out.report.excluded_words = out.report.runs.front().test.excluded_words;
  return out;
}

}  // namespace tagbert
