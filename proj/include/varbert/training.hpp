#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "varbert/checkpoint.hpp"
#include "varbert/common.hpp"
#include "varbert/masking.hpp"
#include "varbert/model.hpp"
#include "varbert/numeric.hpp"
#include "varbert/tokenizer.hpp"

namespace varbert {

enum class Objective { MLM, MLM_WW, CMLM };

inline std::string objective_name(Objective o) {
  switch (o) {
    case Objective::MLM: return "mlm";
    case Objective::MLM_WW: return "mlm-ww";
    case Objective::CMLM: return "cmlm";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "mlm") return Objective::MLM;
  if (s == "mlm-ww" || s == "mlm_ww" || s == "wwm") return Objective::MLM_WW;
  if (s == "cmlm") return Objective::CMLM;
  throw UsageError("unknown objective '" + s + "' (mlm, mlm-ww, cmlm)");
}

struct TrainConfig {
  Objective objective = Objective::MLM;
  std::size_t batch_size = 1024;  // sequences per optimizer step (gradient accumulation)
  std::size_t max_epochs = 40;
  double peak_lr = 1e-4;
  // 0 selects min(10000, 6% of the planned steps).
  std::size_t warmup_steps = 10000;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-6;
  double dropout = 0.1;
  std::uint64_t seed = 1;

  std::size_t resolved_warmup(std::size_t total_steps) const {
    if (warmup_steps) return warmup_steps;
    auto scaled = static_cast<std::size_t>(std::llround(0.06 * static_cast<double>(total_steps)));
    return std::clamp<std::size_t>(scaled, 1, 10000);
  }

  void validate(std::size_t total_steps) const {
    if (!(peak_lr > 0)) throw UsageError("peak learning rate must be positive");
    if (batch_size == 0) throw UsageError("batch size must be positive");
    if (max_epochs > 40) throw UsageError("epochs are capped at 40");
    if (total_steps > 0 && resolved_warmup(total_steps) >= total_steps)
      throw UsageError("warmup (" + std::to_string(resolved_warmup(total_steps)) + " steps) must be shorter than the " +
                       std::to_string(total_steps) + " planned steps");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"objective", objective_name(c.objective)},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"peak_lr", c.peak_lr},
          {"warmup_steps", c.warmup_steps},
          {"weight_decay", c.weight_decay},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"dropout", c.dropout},
          {"seed", c.seed}};
}

// Linear warmup from 0 to peak, then linear decay to 0 at total_steps.
inline double lr_at_step(std::size_t step, const TrainConfig& c, std::size_t total_steps) {
  if (step > total_steps) throw UsageError("step beyond the planned schedule");
  const std::size_t warmup = c.resolved_warmup(total_steps);
  if (step < warmup) return c.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (total_steps == warmup) return c.peak_lr;
  return c.peak_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
}

// One bias-corrected Adam step with decoupled weight decay on a single
// tensor. `step` is the 1-based update index.
template <typename T>
void adam_update(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, std::size_t step,
                 double lr, bool decay, const TrainConfig& c) {
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * g;
    const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double update = (mi / bc1) / (std::sqrt(vi / bc2) + c.adam_eps);
    double x = static_cast<double>(theta[i]);
    x -= lr * (update + (decay ? c.weight_decay * x : 0.0));
    theta[i] = static_cast<T>(x);
  }
}

// Whole-model step. Rejects (throws, leaving everything untouched) when any
// gradient is non-finite.
template <typename T>
void adam_update(Model<T>& model, AdamState<T>& state, double lr, const TrainConfig& c) {
  auto& params = model.params();
  for (const auto& [name, t] : params)
    for (T g : t.grad)
      if (!std::isfinite(static_cast<double>(g))) throw RuntimeError("non-finite gradient in " + name + "; step rejected");
  ++state.step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params[i];
    if (t.grad.size() != t.size()) t.zero_grad();
    adam_update<T>(t.values, t.grad, state.m[i], state.v[i], state.step, lr, weight_decays(name), c);
  }
}

struct StepRecord {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  std::size_t masked_tokens = 0;
  std::size_t epoch = 0;
};

inline nlohmann::json to_json(const StepRecord& r) {
  return {{"step", r.step}, {"lr", r.lr}, {"loss", r.loss}, {"masked_tokens", r.masked_tokens}, {"epoch", r.epoch}};
}

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double validation_perplexity = 0;  // 0 when there is no validation data
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  bool diverged = false;
  std::string message;
};

template <typename T>
struct TrainState {
  Model<T> model;
  AdamState<T> adam;
  std::size_t epochs_completed = 0;
};

using StepSink = std::function<void(const StepRecord&)>;

// One training example: an encoding, and for CMLM the variable it predicts.
struct TrainingUnit {
  std::size_t instance = 0;
  std::size_t variable = 0;
};

// Builds the masked, framed model input for one unit under `objective`.
// The masking seed folds in the epoch, so MLM plans change every epoch.
// CMLM masks every token of the unit's variable inside its variable_view.
inline MaskedInput make_training_input(const Encoding& enc, Objective objective, std::size_t vocab_size,
                                       std::size_t max_seq, std::uint64_t seed, std::size_t epoch,
                                       std::size_t instance, std::size_t variable = 0) {
  const std::uint64_t plan_seed = derive_seed(seed, 0x6d61736bULL, epoch, instance);
  switch (objective) {
    case Objective::MLM: return frame_sequence(apply_plan(enc, plan_mlm(enc, vocab_size, plan_seed)), max_seq);
    case Objective::MLM_WW:
      return frame_sequence(apply_plan(enc, plan_mlm_whole_word(enc, vocab_size, plan_seed)), max_seq);
    case Objective::CMLM: break;
  }
  const Encoding view = variable_view(enc, variable, std::vector<bool>(enc.slot_token_spans.size(), true));
  return frame_sequence(apply_plan(view, plan_cmlm(view, constrained_set(view))), max_seq);
}

// Summed negative log-likelihood of the targets of one framed input.
template <typename T>
double target_nll(Model<T>& model, const MaskedInput& in) {
  Tape<T> tape(false);
  Var hidden = model.encode(tape, in.ids, nullptr, false, nullptr);
  std::vector<std::size_t> rows;
  std::vector<ops::Target> targets;
  for (const auto& t : in.targets) {
    targets.push_back({rows.size(), t.id});
    rows.push_back(t.row);
  }
  Var loss = ops::cross_entropy_masked(tape, model.head(tape, hidden, std::move(rows)), std::move(targets));
  return static_cast<double>(tape.value(loss)[0]) * static_cast<double>(in.targets.size());
}

// MLM trains on every non-empty encoding; CMLM on every variable with tokens.
inline std::vector<TrainingUnit> trainable_units(const std::vector<Encoding>& data, Objective objective) {
  std::vector<TrainingUnit> units;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].size() == 0) continue;
    if (objective != Objective::CMLM) {
      units.push_back({i, 0});
      continue;
    }
    for (std::size_t v = 0; v < data[i].slot_token_spans.size(); ++v) {
      std::size_t tokens = 0;
      for (const TokenRange& r : data[i].slot_token_spans[v]) tokens += r.size();
      if (tokens) units.push_back({i, v});
    }
  }
  return units;
}

// exp(mean NLL) over the data, with the objective's masking at a fixed seed.
template <typename T>
double masked_perplexity(Model<T>& model, const std::vector<Encoding>& data, Objective objective, std::uint64_t seed) {
  double nll = 0;
  std::size_t count = 0;
  for (const TrainingUnit& u : trainable_units(data, objective)) {
    auto in = make_training_input(data[u.instance], objective, model.config().vocab_size, model.config().max_seq, seed,
                                  /*epoch=*/0xffff, u.instance, u.variable);
    if (in.targets.empty()) continue;
    nll += target_nll(model, in);
    count += in.targets.size();
  }
  if (count == 0) throw DataError("perplexity over an empty target set");
  return std::exp(nll / static_cast<double>(count));
}

inline std::size_t planned_steps(std::size_t instances, const TrainConfig& c) {
  return c.max_epochs * ((instances + c.batch_size - 1) / c.batch_size);
}

// Runs epochs state.epochs_completed .. config.max_epochs-1. On a non-finite
// loss or gradient the run stops with the last good weights and
// log.diverged set.
template <typename T>
TrainLog train(TrainState<T>& state, const std::vector<Encoding>& data, const std::vector<Encoding>& validation,
               const TrainConfig& config, const StepSink& sink = {}) {
  const std::vector<TrainingUnit> eligible = trainable_units(data, config.objective);
  if (eligible.empty()) throw DataError("no trainable instances for objective " + objective_name(config.objective));
  const std::size_t total = planned_steps(eligible.size(), config);
  config.validate(total);
  Model<T>& model = state.model;
  const std::size_t vocab = model.config().vocab_size;
  const std::size_t max_seq = model.config().max_seq;

  TrainLog log;
  for (std::size_t epoch = state.epochs_completed; epoch < config.max_epochs; ++epoch) {
    std::vector<TrainingUnit> order = eligible;
    Rng shuffle_rng(derive_seed(config.seed, 0x73687566ULL, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0;
    std::size_t epoch_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<MaskedInput> inputs;
      std::size_t total_targets = 0;
      for (std::size_t b = start; b < end; ++b) {
        const TrainingUnit& u = order[b];
        auto in = make_training_input(data[u.instance], config.objective, vocab, max_seq, config.seed, epoch,
                                      u.instance, u.variable);
        if (in.targets.empty()) continue;
        total_targets += in.targets.size();
        inputs.push_back(std::move(in));
      }
      const std::size_t step = state.adam.step + 1;
      const double lr = lr_at_step(std::min(step, total), config, total);
      model.zero_grad();
      double batch_loss = 0;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto& in = inputs[k];
        Rng dropout_rng(derive_seed(config.seed, 0x64726f70ULL, step, k));
        Tape<T> tape;
        Var hidden = model.encode(tape, in.ids, nullptr, true, &dropout_rng);
        std::vector<std::size_t> rows;
        std::vector<ops::Target> targets;
        for (const auto& t : in.targets) {
          targets.push_back({rows.size(), t.id});
          rows.push_back(t.row);
        }
        Var loss = ops::cross_entropy_masked(tape, model.head(tape, hidden, std::move(rows)), std::move(targets));
        const T weight = static_cast<T>(static_cast<double>(in.targets.size()) / static_cast<double>(total_targets));
        batch_loss += static_cast<double>(tape.value(loss)[0]) * static_cast<double>(weight);
        tape.backward(loss, weight);
      }
      if (inputs.empty()) continue;
      if (!std::isfinite(batch_loss)) {
        log.diverged = true;
        log.message = "non-finite loss at step " + std::to_string(step);
        return log;
      }
      try {
        adam_update(model, state.adam, lr, config);
      } catch (const RuntimeError& e) {
        log.diverged = true;
        log.message = e.what();
        return log;
      }
      StepRecord rec{step, lr, batch_loss, total_targets, epoch};
      log.steps.push_back(rec);
      if (sink) sink(rec);
      epoch_loss += batch_loss;
      ++epoch_batches;
    }
    EpochRecord er{epoch, epoch_batches ? epoch_loss / static_cast<double>(epoch_batches) : 0.0, 0.0};
    if (!validation.empty() && !trainable_units(validation, config.objective).empty())
      er.validation_perplexity = masked_perplexity(model, validation, config.objective, config.seed);
    log.epochs.push_back(er);
    state.epochs_completed = epoch + 1;
  }
  return log;
}

template <typename T>
Checkpoint<T> to_checkpoint(const TrainState<T>& state, const std::string& vocab_hash, const TrainConfig& config) {
  Checkpoint<T> ck{state.model, state.adam, vocab_hash, nlohmann::json::object()};
  ck.meta["epochs_completed"] = state.epochs_completed;
  ck.meta["train_config"] = to_json(config);
  return ck;
}

template <typename T>
struct TrainOutcome {
  Checkpoint<T> checkpoint;
  TrainLog log;
};

// MLM / whole-word MLM pre-training from a fresh initialization.
template <typename T = float>
TrainOutcome<T> pretrain(const std::vector<Encoding>& corpus, const std::vector<Encoding>& validation,
                         const BpeVocab& vocab, ModelConfig model_config, const TrainConfig& config,
                         const StepSink& sink = {}) {
  if (config.objective == Objective::CMLM) throw UsageError("pretraining uses mlm or mlm-ww");
  if (model_config.vocab_size != vocab.size()) throw UsageError("model vocab_size differs from the vocabulary");
  model_config.dropout = config.dropout;
  TrainState<T> state{Model<T>(model_config, derive_seed(config.seed, 0x696e6974ULL)), {}, 0};
  state.adam = AdamState<T>::zeros(state.model);
  if (config.max_epochs == 0) return {to_checkpoint(state, vocab.hash(), config), {}};
  TrainLog log = train(state, corpus, validation, config, sink);
  auto ck = to_checkpoint(state, vocab.hash(), config);
  ck.meta["objective"] = objective_name(config.objective);
  if (log.diverged) ck.meta["diverged"] = log.message;
  return {std::move(ck), std::move(log)};
}

// CMLM fine-tuning from an existing checkpoint (fresh optimizer state).
template <typename T = float>
TrainOutcome<T> finetune(const Checkpoint<T>& init, const std::vector<Encoding>& data,
                         const std::vector<Encoding>& validation, const BpeVocab& vocab, const TrainConfig& config,
                         const StepSink& sink = {}) {
  if (config.objective != Objective::CMLM) throw UsageError("fine-tuning uses the cmlm objective");
  if (init.vocab_hash != vocab.hash())
    throw DataError("checkpoint vocab hash " + init.vocab_hash + " does not match dataset vocabulary " + vocab.hash());
  if (data.empty()) throw DataError("empty fine-tuning dataset");
  TrainState<T> state{init.model, {}, 0};
  state.model.set_dropout(config.dropout);
  state.adam = AdamState<T>::zeros(state.model);
  if (config.max_epochs == 0) return {to_checkpoint(state, vocab.hash(), config), {}};
  TrainLog log = train(state, data, validation, config, sink);
  auto ck = to_checkpoint(state, vocab.hash(), config);
  ck.meta["objective"] = "cmlm";
  if (init.meta.contains("objective")) ck.meta["init_objective"] = init.meta["objective"];
  if (log.diverged) ck.meta["diverged"] = log.message;
  return {std::move(ck), std::move(log)};
}

}  // namespace varbert
