// tagbert: command-line entry point.
//
// Every subcommand resolves its settings as defaults < --config file <
// --set key=value < dedicated flags, and writes the resolved config next to
// its outputs so the run can be replayed from that file and the seed.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tagbert/checkpoint.hpp"
#include "tagbert/config.hpp"
#include "tagbert/corpus.hpp"
#include "tagbert/finetune.hpp"
#include "tagbert/pretrain.hpp"
#include "tagbert/syngen.hpp"
#include "tagbert/vocab.hpp"

namespace fs = std::filesystem;
using namespace tagbert;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::int64_t> seed;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "key = value config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "override a config key (key=value), repeatable");
  cmd->add_option("--seed", c.seed, "global seed (config key 'seed')");
  cmd->add_flag("--deterministic", c.deterministic, "single-threaded numerics");
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_file.empty()) {
    std::ifstream in(c.config_file);
    if (!in) throw std::runtime_error("cannot read " + c.config_file);
    cfg.load(in, c.config_file);
  }
  for (const auto& s : c.sets) cfg.set_assignment(s);
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  if (c.deterministic) cfg.set("numerics.threads", "1");
  return cfg;
}

void echo_config(const RunConfig& cfg, const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "# resolved configuration\n";
  cfg.save(out);
}

std::ifstream open_in(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return in;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

CorpusFormat format_for(const fs::path& p, const RunConfig& cfg) {
  if (p.extension() == ".tsv") return CorpusFormat::tsv;
  if (p.extension() == ".jsonl") return CorpusFormat::jsonl;
  return format_from_name(cfg.text("corpus.format"));
}

std::vector<Sentence> read_corpus(const fs::path& p, const RunConfig& cfg, bool quiet = false) {
  auto in = open_in(p);
  auto r = ingest(in, format_for(p, cfg));
  if (!quiet)
    for (const auto& d : r.diagnostics) std::cerr << p.string() << ":" << d.line << ": skipped: " << d.message << '\n';
  return std::move(r.sentences);
}

SubwordVocab read_vocab(const fs::path& p) {
  auto in = open_in(p);
  return SubwordVocab::load(in);
}

TypeVocab read_types(const fs::path& p) {
  auto in = open_in(p);
  return TypeVocab::load(in);
}

std::vector<TokenizedSentence> encode_all(const SubwordVocab& v, const TypeVocab& t, std::span<const Sentence> s) {
  std::vector<TokenizedSentence> out;
  out.reserve(s.size());
  for (const auto& x : s) out.push_back(encode(v, t, x));
  return out;
}

void write_json(const fs::path& p, const nlohmann::ordered_json& j) {
  auto out = open_out(p);
  out << j.dump(2) << '\n';
}

template <class F>
auto with_dtype(const std::string& dtype, F&& f) {
  if (dtype == "float32") return f(float{});
  if (dtype == "float64") return f(double{});
  throw ConfigError("numerics.dtype must be float32 or float64, got '" + dtype + "'");
}

std::string dtype_of_checkpoint(const fs::path& dir) {
  const auto d = read_manifest(dir).at("dtype").get<std::string>();
  return d;
}

// --- gen ----------------------------------------------------------------------

struct GenArgs {
  std::size_t n = 0;
  std::string out, grammar_out, task;
};

int run_gen(const Common& common, const GenArgs& a) {
  const RunConfig cfg = resolve(common);
  const auto seed = static_cast<std::uint64_t>(cfg.integer("seed"));
  const auto grammar = syngen::make_grammar(seed, cfg.grammar());
  const auto derivations = syngen::sample_derivations(grammar, a.n, seed, cfg.sentence_lengths());
  auto out = open_out(a.out);
  if (a.task.empty()) {
    std::vector<Sentence> s;
    for (const auto& d : derivations) s.push_back(d.sentence);
    if (format_for(a.out, cfg) == CorpusFormat::tsv) write_tsv(out, s);
    else write_jsonl(out, s);
  } else {
    if (a.task != "pos" && a.task != "chunk") throw ConfigError("--task must be pos or chunk");
    std::vector<LabeledSentence> s;
    for (const auto& d : derivations)
      s.push_back({d.sentence.words, a.task == "pos" ? syngen::coarse_labels(d.sentence.tags) : syngen::np_chunk_labels(d)});
    write_conll(out, s);
  }
  if (!a.grammar_out.empty()) {
    auto g = open_out(a.grammar_out);
    g << grammar.to_json().dump(2) << '\n';
  }
  echo_config(cfg, a.out + ".config");
  return 0;
}

// --- prep ---------------------------------------------------------------------

struct PrepArgs {
  std::vector<std::string> inputs;
  std::string out, vocab, exclude;
};

int run_prep(const Common& common, const PrepArgs& a) {
  const RunConfig cfg = resolve(common);
  const fs::path dir(a.out);
  std::vector<Sentence> all;
  std::size_t rejected = 0;
  for (const auto& f : a.inputs) {
    auto in = open_in(f);
    auto r = ingest(in, format_for(f, cfg));
    for (const auto& d : r.diagnostics) std::cerr << f << ":" << d.line << ": skipped: " << d.message << '\n';
    rejected += r.diagnostics.size();
    all.insert(all.end(), std::make_move_iterator(r.sentences.begin()), std::make_move_iterator(r.sentences.end()));
  }
  std::unordered_set<std::string> excl;
  if (!a.exclude.empty()) {
    auto in = open_in(a.exclude);
    excl = read_exclusion_keys(in);
  }
  const auto clean = sanitize(all, excl);
  const auto policy = cfg.length_policy();
  std::vector<Sentence> kept;
  CorpusStats stats;
  if (a.vocab.empty()) {
    kept = length_filter(clean, WordLength{}, policy);
    stats = compute_stats(std::span<const Sentence>(kept), WordLength{});
  } else {
    const auto v = read_vocab(a.vocab);
    kept = length_filter(clean, v, policy);
    stats = compute_stats(std::span<const Sentence>(kept), v);
  }
  {
    auto out = open_out(dir / "corpus.jsonl");
    write_jsonl(out, kept);
  }
  auto j = to_json(stats);
  j["ingested"] = all.size();
  j["rejected_records"] = rejected;
  j["after_sanitize"] = clean.size();
  j["after_length_filter"] = kept.size();
  write_json(dir / "stats.json", j);
  echo_config(cfg, dir / "config.txt");
  std::cout << "kept " << kept.size() << " of " << all.size() << " sentences\n";
  return 0;
}

// --- vocabularies -------------------------------------------------------------

struct VocabArgs {
  std::string input, out;
  std::optional<std::size_t> size;
  std::optional<double> coverage;
};

int run_build_vocab(const Common& common, const VocabArgs& a) {
  RunConfig cfg = resolve(common);
  if (a.size) cfg.set("vocab.size", std::to_string(*a.size));
  const auto corpus = read_corpus(a.input, cfg);
  const auto v = build_subword_vocab(corpus, cfg.size("vocab.size"));
  auto out = open_out(a.out);
  v.save(out);
  echo_config(cfg, a.out + ".config");
  std::cout << "vocabulary of " << v.size() << " pieces\n";
  return 0;
}

int run_build_typevocab(const Common& common, const VocabArgs& a) {
  RunConfig cfg = resolve(common);
  if (a.coverage) {
    std::ostringstream s;
    s << *a.coverage;
    cfg.set("typevocab.coverage", s.str());
  }
  const auto corpus = read_corpus(a.input, cfg);
  TypeVocabReport report;
  const auto v = build_type_vocab(compute_stats(std::span<const Sentence>(corpus), WordLength{}),
                                  cfg.real("typevocab.coverage"), &report);
  auto out = open_out(a.out);
  v.save(out);
  echo_config(cfg, a.out + ".config");
  nlohmann::ordered_json j;
  j["requested_coverage"] = report.requested_coverage;
  j["achieved_coverage"] = report.achieved_coverage;
  j["kept_types"] = report.kept_types;
  j["total_types"] = report.total_types;
  j["vocabulary_size"] = v.size();
  std::cout << j.dump() << '\n';
  return 0;
}

// --- pretrain -----------------------------------------------------------------

struct PretrainArgs {
  std::string corpus, heldout, vocab, types, out, resume;
};

template <class T>
int pretrain_as(const RunConfig& cfg, const PretrainArgs& a) {
  const fs::path dir(a.out);
  const auto vocab = read_vocab(a.vocab);
  const auto types = read_types(a.types);
  const auto sentences = read_corpus(a.corpus, cfg);
  const auto data = encode_all(vocab, types, sentences);
  const PretrainConfig pc = cfg.pretrain();
  const auto seed = static_cast<std::uint64_t>(cfg.integer("seed"));

  Model<T> model;
  AdamW<T> optimizer(pc.adamw);
  if (!a.resume.empty()) {
    auto ck = load_checkpoint<T>(a.resume);
    if (!ck.optimizer) throw std::runtime_error(a.resume + " holds no optimizer state, cannot resume");
    model = std::move(ck.model);
    optimizer.state() = std::move(*ck.optimizer);
    std::cerr << "resuming at step " << optimizer.state().step << '\n';
  } else {
    model = Model<T>::init(cfg.model(vocab.size(), types.size()), seed);
  }
  echo_config(cfg, dir / "config.txt");

  auto metrics = std::ofstream(dir / "metrics.jsonl", a.resume.empty() ? std::ios::trunc : std::ios::app);
  TrainOptions opts;
  opts.metrics = &metrics;
  opts.checkpoint_dir = dir / "checkpoints";
  const auto result = train(model, optimizer, std::span<const TokenizedSentence>(data), pc, opts);

  nlohmann::ordered_json summary;
  summary["instances"] = data.size();
  summary["steps"] = result.position.step;
  summary["total_steps"] = result.schedule.total_steps;
  summary["epoch_mean_joint"] = result.epoch_mean_joint;
  summary["parameters"] = model.parameter_count();
  if (!a.heldout.empty()) {
    const auto held = read_corpus(a.heldout, cfg);
    const auto hd = encode_all(vocab, types, held);
    const auto r = evaluate_heldout(model, std::span<const TokenizedSentence>(hd), pc.masking,
                                    static_cast<std::uint64_t>(cfg.integer("eval.seed")), cfg.size("eval.batch_size"),
                                    pc.max_len);
    summary["heldout"] = {{"mlm_perplexity", r.mlm_perplexity},
                          {"tag_accuracy", r.tag_accuracy},
                          {"masked_tokens", r.masked_tokens},
                          {"tag_positions", r.tag_positions}};
  }
  write_json(dir / "summary.json", summary);
  std::cout << summary.dump() << '\n';
  return 0;
}

int run_pretrain(const Common& common, const PretrainArgs& a) {
  const RunConfig cfg = resolve(common);
  return with_dtype(cfg.text("numerics.dtype"), [&]<class T>(T) { return pretrain_as<T>(cfg, a); });
}

// --- finetune -----------------------------------------------------------------

struct FinetuneArgs {
  std::string checkpoint, vocab, train, validation, test, scheme = "plain", out;
};

std::vector<LabeledSentence> read_task_split(const std::string& p) {
  if (p.empty()) return {};
  auto in = open_in(p);
  return read_conll(in);
}

LabelScheme scheme_from(const std::string& s) {
  if (s == "plain") return LabelScheme::plain;
  if (s == "iob") return LabelScheme::iob;
  throw ConfigError("--scheme must be plain or iob, got '" + s + "'");
}

template <class T>
int finetune_as(const RunConfig& cfg, const FinetuneArgs& a) {
  const fs::path dir(a.out);
  auto ck = load_checkpoint<T>(a.checkpoint);
  const auto vocab = read_vocab(a.vocab);
  const auto task = make_task(read_task_split(a.train), read_task_split(a.validation), read_task_split(a.test),
                              scheme_from(a.scheme));
  echo_config(cfg, dir / "config.txt");
  const auto r = finetune(ck.model, vocab, task, cfg.finetune(), dir);
  auto j = to_json(r.report);
  j["labels"] = task.label_set;
  write_json(dir / "report.json", j);
  std::cout << j["mean"].dump() << '\n';
  return 0;
}

int run_finetune(const Common& common, const FinetuneArgs& a) {
  const RunConfig cfg = resolve(common);
  return with_dtype(dtype_of_checkpoint(a.checkpoint) == "float64" ? "float64" : "float32",
                    [&]<class T>(T) { return finetune_as<T>(cfg, a); });
}

// --- eval ---------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, vocab, types, corpus, task, scheme = "plain", labels;
};

template <class T>
int eval_as(const RunConfig& cfg, const EvalArgs& a) {
  const auto ck = load_checkpoint<T>(a.checkpoint);
  const auto vocab = read_vocab(a.vocab);
  nlohmann::ordered_json j;
  if (!a.corpus.empty()) {
    if (a.types.empty()) throw ConfigError("--corpus needs --types");
    const auto types = read_types(a.types);
    const auto data = encode_all(vocab, types, read_corpus(a.corpus, cfg));
    const auto r = evaluate_heldout(ck.model, std::span<const TokenizedSentence>(data), cfg.masking(),
                                    static_cast<std::uint64_t>(cfg.integer("eval.seed")), cfg.size("eval.batch_size"),
                                    cfg.size("pretrain.max_len"));
    j["mlm_perplexity"] = r.mlm_perplexity;
    j["tag_accuracy"] = r.tag_accuracy;
    j["masked_tokens"] = r.masked_tokens;
    j["tag_positions"] = r.tag_positions;
  }
  if (!a.task.empty()) {
    if (!ck.model.has("head.weight")) throw std::runtime_error(a.checkpoint + " has no classification head");
    // The label inventory comes from the fine-tuning report next to the checkpoint.
    const fs::path labels_file = a.labels.empty() ? fs::path(a.checkpoint).parent_path() / "report.json" : fs::path(a.labels);
    auto in = open_in(labels_file);
    const auto report = nlohmann::json::parse(in);
    TaskDataset task = make_task({}, {}, read_task_split(a.task), scheme_from(a.scheme));
    task.label_set = report.at("labels").get<std::vector<std::string>>();
    if (task.label_set.size() != head_classes(ck.model))
      throw std::runtime_error("label inventory of " + std::to_string(task.label_set.size()) +
                               " does not match the head's " + std::to_string(head_classes(ck.model)) + " classes");
    const auto data = encode_task(vocab, task, task.test);
    const auto s = evaluate_task(ck.model, task, data, cfg.size("finetune.max_len"));
    j["accuracy"] = s.accuracy;
    if (s.spans) j["span_f1"] = {{"precision", s.spans->precision}, {"recall", s.spans->recall}, {"f1", s.spans->f1}};
    j["scored_words"] = s.scored_words;
    j["excluded_words"] = s.excluded_words;
  }
  if (j.empty()) throw ConfigError("eval needs --corpus or --task");
  std::cout << j.dump() << '\n';
  return 0;
}

int run_eval(const Common& common, const EvalArgs& a) {
  const RunConfig cfg = resolve(common);
  return with_dtype(dtype_of_checkpoint(a.checkpoint) == "float64" ? "float64" : "float32",
                    [&]<class T>(T) { return eval_as<T>(cfg, a); });
}

// --- inspect ------------------------------------------------------------------

std::uint64_t fnv1a(const std::vector<char>& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : bytes) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
  return h;
}

template <class T>
int inspect_as(const fs::path& dir) {
  const auto ck = load_checkpoint<T>(dir);
  const ModelConfig& c = ck.model.config();
  const auto breakdown = count_params(c);
  std::size_t task_head = 0;
  for (const auto& p : ck.model.parameters())
    if (p.name.starts_with("head.")) task_head += p.value.size();
  const std::size_t actual = ck.model.parameter_count();

  nlohmann::ordered_json j;
  j["dtype"] = dtype_name<T>();
  j["config"] = nlohmann::json(c);
  j["count_params"] = to_json(breakdown);
  j["task_head"] = task_head;
  j["actual_parameters"] = actual;
  j["count_matches"] = breakdown.total + task_head == actual;
  auto tensors = nlohmann::ordered_json::array();
  for (const auto& p : ck.model.parameters()) tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  j["tensors"] = tensors;
  // Hash of the values as they load, independent of the on-disk layout.
  std::vector<char> bytes;
  for (const auto& p : ck.model.parameters()) {
    const auto* b = reinterpret_cast<const char*>(p.value.ptr());
    bytes.insert(bytes.end(), b, b + p.value.size() * sizeof(T));
  }
  std::ostringstream hash;
  hash << std::hex << fnv1a(bytes);
  j["values_fnv1a"] = hash.str();
  if (ck.optimizer) j["optimizer_step"] = ck.optimizer->step;
  if (ck.position) j["trainer"] = {{"step", ck.position->step}, {"epoch", ck.position->epoch}};
  std::cout << j.dump(2) << '\n';
  return j["count_matches"].get<bool>() ? 0 : 3;
}

int run_inspect(const std::string& dir) {
  return dtype_of_checkpoint(dir) == "float64" ? inspect_as<double>(dir) : inspect_as<float>(dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tagbert: joint masked-language-model and supertag pretraining"};
  app.require_subcommand(1);

  Common common;

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "sample a synthetic categorial-grammar corpus");
  add_common(gen_cmd, common);
  gen_cmd->add_option("--n", gen.n, "number of sentences")->required()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--out", gen.out, "output corpus (.jsonl or .tsv) or task file (.conll)")->required();
  gen_cmd->add_option("--grammar-out", gen.grammar_out, "write the grammar as JSON");
  gen_cmd->add_option("--task", gen.task, "emit a labelling task instead: pos | chunk");

  PrepArgs prep;
  auto* prep_cmd = app.add_subcommand("prep", "ingest, deduplicate and length-filter corpora");
  add_common(prep_cmd, common);
  prep_cmd->add_option("--in", prep.inputs, "input corpus files")->required()->check(CLI::ExistingFile);
  prep_cmd->add_option("--out", prep.out, "output directory")->required();
  prep_cmd->add_option("--vocab", prep.vocab, "measure lengths in subwords of this vocabulary")->check(CLI::ExistingFile);
  prep_cmd->add_option("--exclude", prep.exclude, "file of sentences to exclude (one per line)")->check(CLI::ExistingFile);

  VocabArgs vocab;
  auto* vocab_cmd = app.add_subcommand("build-vocab", "learn a subword vocabulary");
  add_common(vocab_cmd, common);
  vocab_cmd->add_option("--in", vocab.input, "prepared corpus")->required()->check(CLI::ExistingFile);
  vocab_cmd->add_option("--out", vocab.out, "vocabulary file")->required();
  vocab_cmd->add_option("--size", vocab.size, "target size (config key vocab.size)");

  VocabArgs typevocab;
  auto* type_cmd = app.add_subcommand("build-typevocab", "select the type vocabulary by coverage");
  add_common(type_cmd, common);
  type_cmd->add_option("--in", typevocab.input, "prepared corpus")->required()->check(CLI::ExistingFile);
  type_cmd->add_option("--out", typevocab.out, "type vocabulary file")->required();
  type_cmd->add_option("--coverage", typevocab.coverage, "token coverage (config key typevocab.coverage)");

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "joint masked-LM and supertag pretraining");
  add_common(pre_cmd, common);
  pre_cmd->add_option("--corpus", pre.corpus, "training corpus")->required()->check(CLI::ExistingFile);
  pre_cmd->add_option("--vocab", pre.vocab, "subword vocabulary")->required()->check(CLI::ExistingFile);
  pre_cmd->add_option("--types", pre.types, "type vocabulary")->required()->check(CLI::ExistingFile);
  pre_cmd->add_option("--out", pre.out, "run directory")->required();
  pre_cmd->add_option("--heldout", pre.heldout, "held-out corpus evaluated after training")->check(CLI::ExistingFile);
  pre_cmd->add_option("--resume", pre.resume, "checkpoint directory to resume from")->check(CLI::ExistingDirectory);

  FinetuneArgs ft;
  auto* ft_cmd = app.add_subcommand("finetune", "fine-tune a token classifier over several seeds");
  add_common(ft_cmd, common);
  ft_cmd->add_option("--checkpoint", ft.checkpoint, "pretrained checkpoint")->required()->check(CLI::ExistingDirectory);
  ft_cmd->add_option("--vocab", ft.vocab, "subword vocabulary")->required()->check(CLI::ExistingFile);
  ft_cmd->add_option("--train", ft.train, "training split (CoNLL)")->required()->check(CLI::ExistingFile);
  ft_cmd->add_option("--validation", ft.validation, "validation split (CoNLL)")->required()->check(CLI::ExistingFile);
  ft_cmd->add_option("--test", ft.test, "test split (CoNLL)")->required()->check(CLI::ExistingFile);
  ft_cmd->add_option("--scheme", ft.scheme, "plain | iob");
  ft_cmd->add_option("--out", ft.out, "run directory")->required();

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "held-out perplexity and tag accuracy, or task scores");
  add_common(ev_cmd, common);
  ev_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint")->required()->check(CLI::ExistingDirectory);
  ev_cmd->add_option("--vocab", ev.vocab, "subword vocabulary")->required()->check(CLI::ExistingFile);
  ev_cmd->add_option("--types", ev.types, "type vocabulary")->check(CLI::ExistingFile);
  ev_cmd->add_option("--corpus", ev.corpus, "held-out corpus")->check(CLI::ExistingFile);
  ev_cmd->add_option("--task", ev.task, "labelled test file (CoNLL)")->check(CLI::ExistingFile);
  ev_cmd->add_option("--scheme", ev.scheme, "plain | iob");
  ev_cmd->add_option("--labels", ev.labels, "fine-tuning report holding the label inventory")->check(CLI::ExistingFile);

  std::string inspect_dir;
  auto* in_cmd = app.add_subcommand("inspect", "print a checkpoint's configuration and parameter breakdown");
  in_cmd->add_option("checkpoint", inspect_dir, "checkpoint directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return run_gen(common, gen);
    if (*prep_cmd) return run_prep(common, prep);
    if (*vocab_cmd) return run_build_vocab(common, vocab);
    if (*type_cmd) return run_build_typevocab(common, typevocab);
    if (*pre_cmd) return run_pretrain(common, pre);
    if (*ft_cmd) return run_finetune(common, ft);
    if (*ev_cmd) return run_eval(common, ev);
    if (*in_cmd) return run_inspect(inspect_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
