#pragma once

// Joint masked-LM + supertag pretraining.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tagbert/checkpoint.hpp"
#include "tagbert/masking.hpp"
#include "tagbert/model.hpp"
#include "tagbert/optim.hpp"

namespace tagbert {

enum class LossMode { sum_of_means, sum_of_sums };

inline LossMode loss_mode_from_name(std::string_view name) {
  if (name == "sum_of_means") return LossMode::sum_of_means;
  if (name == "sum_of_sums") return LossMode::sum_of_sums;
  throw std::invalid_argument("unknown loss mode '" + std::string(name) + "'");
}

inline std::string loss_mode_name(LossMode m) { return m == LossMode::sum_of_means ? "sum_of_means" : "sum_of_sums"; }

struct PretrainConfig {
  std::size_t batch_size = 256;
  std::size_t epochs = 8;
  double peak_lr = 1e-4;
  std::size_t warmup_steps = 10000;
  std::uint64_t seed = 0;
  MaskingConfig masking;
  LossMode loss_mode = LossMode::sum_of_means;
  double clip_norm = 1.0;  // <= 0 disables clipping
  AdamWOptions adamw;
  std::size_t max_len = 100;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (max_len < 2) throw std::invalid_argument("max_len must be >= 2");
    masking.validate();
  }
};

inline std::size_t steps_per_epoch(std::size_t instances, std::size_t batch_size) {
  return (instances + batch_size - 1) / batch_size;
}

inline Schedule schedule_for(const PretrainConfig& c, std::size_t instances) {
  Schedule s{c.peak_lr, c.warmup_steps, c.epochs * steps_per_epoch(instances, c.batch_size)};
  s.validate();
  return s;
}

struct TrainMetrics {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr = 0.0;
  double mlm_loss = 0.0;
  double tag_loss = 0.0;
  double joint_loss = 0.0;
  double tag_accuracy = std::numeric_limits<double>::quiet_NaN();  // NaN when no tag labels
  std::size_t masked_token_count = 0;

  friend bool operator==(const TrainMetrics&, const TrainMetrics&) = default;
};

inline nlohmann::ordered_json to_json(const TrainMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["epoch"] = m.epoch;
  j["lr"] = m.lr;
  j["mlm_loss"] = m.mlm_loss;
  j["tag_loss"] = m.tag_loss;
  j["joint_loss"] = m.joint_loss;
  j["tag_accuracy"] = std::isnan(m.tag_accuracy) ? nlohmann::ordered_json() : nlohmann::ordered_json(m.tag_accuracy);
  j["masked_token_count"] = m.masked_token_count;
  return j;
}

struct JointLoss {
  Var total;
  ad::CrossEntropy mlm, tag;
};

/// Sum of the two cross-entropies. Either stream may be empty (it then
/// contributes exactly zero); both empty is a degenerate batch.
template <class T>
JointLoss joint_loss(Tape<T>& t, Var mlm_logits, std::span<const std::int32_t> mlm_labels, Var tag_logits,
                     std::span<const std::int32_t> tag_labels, LossMode mode = LossMode::sum_of_means) {
  const ad::Reduction r = mode == LossMode::sum_of_means ? ad::Reduction::mean : ad::Reduction::sum;
  JointLoss out;
  out.mlm = ad::cross_entropy(t, mlm_logits, mlm_labels, kIgnore, r);
  out.tag = ad::cross_entropy(t, tag_logits, tag_labels, kIgnore, r);
  if (out.mlm.empty() && out.tag.empty())
    throw std::invalid_argument("degenerate batch: neither the MLM nor the tag stream has a label");
  out.total = ad::add(t, out.mlm.loss, out.tag.loss);
  return out;
}

/// Loss streams of one forward pass. Only labelled rows are scored.
struct ForwardResult {
  JointLoss loss;
  Var mlm_logits, tag_logits;  // invalid when the stream is empty
  std::vector<std::int32_t> mlm_targets, tag_targets;
};

template <ModelRef M>
ForwardResult forward_joint(Tape<scalar_of<M>>& t, M& model, const MaskedBatch& batch, LossMode mode,
                            const ForwardOptions& options = {}) {
  using T = scalar_of<M>;
  const auto hidden = encode(t, model, batch, options);
  std::vector<std::size_t> mlm_rows, tag_rows;
  ForwardResult out;
  for (std::size_t i = 0; i < batch.positions(); ++i) {
    if (batch.mlm_labels[i] != kIgnore) {
      mlm_rows.push_back(i);
      out.mlm_targets.push_back(batch.mlm_labels[i]);
    }
    if (model.config().tag_head && batch.tag_labels[i] != kIgnore) {
      tag_rows.push_back(i);
      out.tag_targets.push_back(batch.tag_labels[i]);
    }
  }
  const Var empty = t.constant(Tensor<T>({0, 1}));
  out.mlm_logits = mlm_rows.empty() ? empty : mlm_logits(t, model, hidden.back(), &mlm_rows);
  out.tag_logits = tag_rows.empty() ? empty : tag_logits(t, model, std::span<const Var>(hidden), &tag_rows);
  out.loss = joint_loss(t, out.mlm_logits, out.mlm_targets, out.tag_logits, out.tag_targets, mode);
  return out;
}

template <class T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t r) {
  const T* row = logits.ptr() + r * logits.cols();
  return static_cast<std::size_t>(std::max_element(row, row + logits.cols()) - row);
}

template <class T>
std::size_t count_correct(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  std::size_t correct = 0;
  for (std::size_t r = 0; r < targets.size(); ++r)
    if (argmax_row(logits, r) == static_cast<std::size_t>(targets[r])) ++correct;
  return correct;
}

/// Masked instances of one step: rows `order[first, first + count)` masked
/// with the substreams of (seed, epoch, instance id).
inline MaskedBatch make_batch(std::span<const TokenizedSentence> data, std::span<const std::size_t> ids,
                              const MaskingConfig& masking, std::size_t vocab_size, std::size_t type_count,
                              std::uint64_t seed, std::size_t epoch, std::size_t max_len) {
  std::vector<MaskedInstance> instances;
  instances.reserve(ids.size());
  for (std::size_t id : ids)
    instances.push_back(make_instance(data[id], masking, vocab_size, type_count, instance_seeds(seed, epoch, id)));
  return collate(instances, max_len);
}

/// Instance order of one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "shuffle", epoch));
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

struct TrainOptions {
  std::ostream* metrics = nullptr;                     // JSON lines, one per step
  std::optional<std::filesystem::path> checkpoint_dir;  // epoch-<e>/ and final/ below it
  std::optional<std::size_t> stop_after_step;          // interrupt early (resume tests)
  std::function<void(const TrainMetrics&)> on_step;
};

struct TrainResult {
  std::vector<TrainMetrics> metrics;
  std::vector<double> epoch_mean_joint;  // only epochs fully covered by this call
  TrainerPosition position;
  Schedule schedule;
};

/// Runs (or resumes, from the optimizer's step count) joint pretraining.
/// Step s (1-based) uses lr_at(schedule, s); epoch e visits the instances in
/// the order drawn from (seed, "shuffle", e) and masks instance i with the
/// substreams of (seed, e, i); dropout at step s draws from (seed, "dropout", s).
template <class T>
TrainResult train(Model<T>& model, AdamW<T>& optimizer, std::span<const TokenizedSentence> data,
                  const PretrainConfig& config, const TrainOptions& options = {}) {
  config.validate();
  if (data.empty()) throw std::invalid_argument("pretraining corpus is empty");
  const ModelConfig& mc = model.config();
  TrainResult result;
  result.schedule = schedule_for(config, data.size());
  const std::size_t spe = steps_per_epoch(data.size(), config.batch_size);
  const std::size_t total = result.schedule.total_steps;
  const std::size_t type_count = mc.tag_head ? mc.type_vocab_size : kReservedTypes + 1;

  std::size_t step = optimizer.state().step;
  std::vector<std::size_t> order;
  std::size_t order_epoch = SIZE_MAX;
  double epoch_sum = 0.0;
  std::size_t epoch_steps = 0;

  auto save = [&](const std::string& name, std::size_t epoch_done) {
    if (!options.checkpoint_dir) return;
    save_checkpoint(*options.checkpoint_dir / name, model, &optimizer.state(), TrainerPosition{step, epoch_done});
  };

  while (step < total) {
    if (options.stop_after_step && step >= *options.stop_after_step) break;
    const std::size_t epoch = step / spe;
    const std::size_t in_epoch = step % spe;
    if (epoch != order_epoch) {
      order = epoch_order(data.size(), config.seed, epoch);
      order_epoch = epoch;
    }
    const std::size_t first = in_epoch * config.batch_size;
    const std::size_t count = std::min(config.batch_size, data.size() - first);
    const MaskedBatch batch = make_batch(data, std::span(order).subspan(first, count), config.masking,
                                         mc.vocab_size, type_count, config.seed, epoch, config.max_len);
    ++step;

    zero_grad(model.parameters());
    Rng dropout_rng(derive_seed(config.seed, "dropout", step));
    Tape<T> tape;
    const ForwardResult fw = forward_joint(tape, model, batch, config.loss_mode, ForwardOptions{&dropout_rng});
    TrainMetrics m;
    m.step = step;
    m.epoch = epoch;
    m.lr = lr_at(result.schedule, step);
    m.mlm_loss = tape.value(fw.loss.mlm.loss).item();
    m.tag_loss = tape.value(fw.loss.tag.loss).item();
    m.joint_loss = tape.value(fw.loss.total).item();
    m.masked_token_count = fw.loss.mlm.count;
    if (!std::isfinite(m.joint_loss))
      throw std::runtime_error("non-finite loss at step " + std::to_string(step) + " (epoch " +
                               std::to_string(epoch) + ", batch " + std::to_string(in_epoch) + ", seed " +
                               std::to_string(config.seed) + "): mlm " + std::to_string(m.mlm_loss) + ", tag " +
                               std::to_string(m.tag_loss));
    if (!fw.tag_targets.empty())
      m.tag_accuracy = static_cast<double>(count_correct(tape.value(fw.tag_logits), fw.tag_targets)) /
                       static_cast<double>(fw.tag_targets.size());
    tape.backward(fw.loss.total);
    clip_grad_norm(model.parameters(), config.clip_norm);
    optimizer.step(model.parameters(), m.lr);

    if (options.metrics) *options.metrics << to_json(m).dump() << '\n';
    if (options.on_step) options.on_step(m);
    result.metrics.push_back(m);
    if (in_epoch == 0) epoch_sum = 0.0, epoch_steps = 0;
    epoch_sum += m.joint_loss;
    ++epoch_steps;
    if (in_epoch + 1 == spe) {
      if (epoch_steps == spe) result.epoch_mean_joint.push_back(epoch_sum / static_cast<double>(spe));
      save("epoch-" + std::to_string(epoch + 1), epoch + 1);
    }
  }
  result.position = {step, step / spe};
  if (step == total) save("final", total / spe);
  if (options.metrics) options.metrics->flush();
  return result;
}

struct HeldoutResult {
  double mlm_perplexity = 0.0;
  double tag_accuracy = 0.0;
  std::size_t masked_tokens = 0;
  std::size_t tag_positions = 0;
};

/// Accumulates masked-token cross-entropy and tag argmax hits over batches.
class HeldoutAccumulator {
 public:
  template <class T>
  void add_mlm(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
    for (std::size_t r = 0; r < targets.size(); ++r) {
      const T* row = logits.ptr() + r * logits.cols();
      const double mx = static_cast<double>(*std::max_element(row, row + logits.cols()));
      double se = 0.0;
      for (std::size_t c = 0; c < logits.cols(); ++c) se += std::exp(static_cast<double>(row[c]) - mx);
      ce_sum_ += std::log(se) + mx - static_cast<double>(row[targets[r]]);
    }
    masked_ += targets.size();
  }

  template <class T>
  void add_tags(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
    correct_ += count_correct(logits, targets);
    tagged_ += targets.size();
  }

  HeldoutResult result() const {
    if (masked_ == 0 && tagged_ == 0) throw std::invalid_argument("held-out evaluation over an empty stream");
    HeldoutResult r;
    r.masked_tokens = masked_;
    r.tag_positions = tagged_;
    r.mlm_perplexity = masked_ ? std::exp(ce_sum_ / static_cast<double>(masked_)) : std::numeric_limits<double>::quiet_NaN();
    r.tag_accuracy = tagged_ ? static_cast<double>(correct_) / static_cast<double>(tagged_)
                             : std::numeric_limits<double>::quiet_NaN();
    return r;
  }

 private:
  double ce_sum_ = 0.0;
  std::size_t masked_ = 0, correct_ = 0, tagged_ = 0;
};

/// Perplexity over masked tokens and tag accuracy against gold labels, with
/// masking drawn from `eval_seed` and no label replacement.
template <class T>
HeldoutResult evaluate_heldout(const Model<T>& model, std::span<const TokenizedSentence> data,
                               MaskingConfig masking, std::uint64_t eval_seed, std::size_t batch_size = 64,
                               std::size_t max_len = 100) {
  if (data.empty()) throw std::invalid_argument("held-out evaluation over an empty stream");
  masking.tag_replace_prob = 0.0;
  const ModelConfig& mc = model.config();
  const std::size_t type_count = mc.tag_head ? mc.type_vocab_size : kReservedTypes + 1;
  HeldoutAccumulator acc;
  std::vector<std::size_t> ids(data.size());
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  for (std::size_t first = 0; first < data.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, data.size() - first);
    const MaskedBatch batch = make_batch(data, std::span(ids).subspan(first, count), masking, mc.vocab_size,
                                         type_count, eval_seed, 0, max_len);
    Tape<T> tape;
    const ForwardResult fw = forward_joint(tape, model, batch, LossMode::sum_of_sums);
    if (!fw.mlm_targets.empty()) acc.add_mlm(tape.value(fw.mlm_logits), fw.mlm_targets);
    if (!fw.tag_targets.empty()) acc.add_tags(tape.value(fw.tag_logits), fw.tag_targets);
  }
  return acc.result();
}

}  // namespace tagbert
