#pragma once

// Joint training of base and gate parameters on the summed clean + ablated
// cross-entropy, plus perplexity evaluation.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "selfablate/checkpoint.hpp"
#include "selfablate/config.hpp"
#include "selfablate/data.hpp"
#include "selfablate/model.hpp"
#include "selfablate/ops.hpp"
#include "selfablate/optim.hpp"

namespace selfablate {

template <typename T>
struct CombinedLoss {
  Tensor<T> total;
  T clean;
  T ablated;
};

/// CE(clean) + weight * CE(ablated); weight is 1 unless configured otherwise.
template <typename T>
CombinedLoss<T> combined_loss(const Tensor<T>& clean_logits, const Tensor<T>& ablated_logits,
                              std::span<const std::int32_t> targets, T ablated_weight = T{1}) {
  detail::require_same_shape(clean_logits.shape(), ablated_logits.shape(), "combined_loss");
  Tensor<T> ce_clean = cross_entropy(clean_logits, targets);
  Tensor<T> ce_ablated = cross_entropy(ablated_logits, targets);
  Tensor<T> weighted = ablated_weight == T{1} ? ce_ablated : scale(ce_ablated, ablated_weight);
  return {add(ce_clean, weighted), ce_clean.item(), ce_ablated.item()};
}

/// Token-weighted mean cross-entropy of the clean (inference) path.
template <typename T>
double mean_token_ce(const Transformer<T>& model, const std::vector<Batch>& batches) {
  double total = 0.0;
  std::size_t tokens = 0;
  NoGradGuard no_grad;
  for (const auto& b : batches) {
    const Tensor<T> logits = model.forward_inference(b.input);
    total += static_cast<double>(cross_entropy(logits, b.targets).item()) * b.targets.size();
    tokens += b.targets.size();
  }
  if (tokens == 0) throw Error("perplexity evaluation needs at least one batch");
  return total / static_cast<double>(tokens);
}

template <typename T>
double evaluate_perplexity(const Transformer<T>& model, const std::vector<Batch>& batches) {
  return std::exp(mean_token_ce(model, batches));
}

struct StepResult {
  std::size_t step = 0;  // index of the step just taken (0-based)
  double lr = 0.0;
  double loss = 0.0;
  double loss_clean = 0.0;
  double loss_ablated = 0.0;
  double grad_norm = 0.0;          // before clipping
  double clipped_grad_norm = 0.0;  // after clipping
};

/// One metrics.jsonl line.
struct MetricsRecord {
  std::size_t step = 0;  // completed optimizer steps
  double lr = 0.0;
  double loss_clean = 0.0;
  double loss_ablated = 0.0;
  double ppl = 0.0;

  json to_json() const {
    return json{{"step", step}, {"lr", lr}, {"loss_clean", loss_clean}, {"loss_ablated", loss_ablated}, {"ppl", ppl}};
  }
};

class Trainer {
 public:
  Trainer(const ModelConfig& model_config, const TrainConfig& train_config,
          const std::vector<std::string>& train_docs, const std::vector<std::string>& val_docs)
      : Trainer(Transformer<float>(model_config), train_config, train_docs, val_docs, std::nullopt, 0) {}

  /// Continues from a checkpoint; optimizer state is restored when present.
  Trainer(const Checkpoint& resume, const TrainConfig& train_config, const std::vector<std::string>& train_docs,
          const std::vector<std::string>& val_docs)
      : Trainer(load_model<float>(resume), train_config, train_docs, val_docs, resume.optimizer, resume.step) {}

  Transformer<float>& model() { return model_; }
  const Transformer<float>& model() const { return model_; }
  const TrainConfig& train_config() const { return train_; }
  const BatchStream& stream() const { return stream_; }
  std::size_t current_step() const { return step_; }
  bool done() const { return step_ >= train_.total_steps; }

  /// Observes (and may patch) activations during every training forward.
  void set_hook(ActivationHook<float> hook) { hook_ = std::move(hook); }

  StepResult step() {
    if (done()) throw Error("training already reached total_steps");
    Tape<float>::current().clear();
    model_.zero_grad();

    const Batch batch = stream_.batch(step_);
    const DualOutput<float> out = model_.forward_dual(batch.input, hook_ ? &hook_ : nullptr);
    const auto loss = combined_loss(out.clean_logits, out.ablated_logits, batch.targets,
                                    static_cast<float>(train_.ablated_loss_weight));
    if (!std::isfinite(loss.total.item())) {
      Tape<float>::current().clear();
      throw NonFiniteError("non-finite loss at step " + std::to_string(step_));
    }
    backward(loss.total);

    StepResult r;
    r.step = step_;
    r.loss = loss.total.item();
    r.loss_clean = loss.clean;
    r.loss_ablated = loss.ablated;
    r.grad_norm = clip_grad_norm(params_, train_.grad_clip);
    r.clipped_grad_norm = grad_global_norm(params_);
    r.lr = cosine_lr(step_, train_.total_steps, train_.lr, train_.lr_min);
    adamw_step(params_, optim_, r.lr, adam_config());
    ++step_;
    return r;
  }

  double validation_perplexity() const { return evaluate_perplexity(model_, val_batches_); }
  const std::vector<Batch>& validation_batches() const { return val_batches_; }

  /// Runs to total_steps. `on_eval` receives a record every eval_interval
  /// completed steps and after the last step; `on_step` sees every step.
  void run(const std::function<void(const MetricsRecord&)>& on_eval,
           const std::function<void(const StepResult&)>& on_step = {}) {
    while (!done()) {
      const StepResult r = step();
      if (on_step) on_step(r);
      if (step_ % train_.eval_interval == 0 || done()) {
        MetricsRecord m{step_, r.lr, r.loss_clean, r.loss_ablated, validation_perplexity()};
        if (on_eval) on_eval(m);
      }
    }
  }

  Checkpoint checkpoint() const {
    Checkpoint c = make_checkpoint(model_, step_);
    c.optimizer = optim_;
    c.train = to_json(train_);
    return c;
  }

 private:
  Trainer(Transformer<float> model, const TrainConfig& train_config, const std::vector<std::string>& train_docs,
          const std::vector<std::string>& val_docs, std::optional<AdamState<float>> optim, std::size_t step)
      : model_(std::move(model)),
        train_(train_config),
        stream_(train_docs, train_config.seq_len, train_config.batch_size, train_config.seed),
        step_(step) {
    train_.validate(model_.config());
    for (const auto& [_, t] : model_.parameters()) params_.push_back(t);
    optim_ = optim ? std::move(*optim) : AdamState<float>::for_params(params_);
    const auto& eval_docs = val_docs.empty() ? train_docs : val_docs;
    val_batches_ = BatchStream(eval_docs, train_.seq_len, train_.batch_size, train_.seed)
                       .sequential_batches(std::max<std::size_t>(1, train_.eval_batches));
  }

  AdamWConfig adam_config() const {
    return {train_.beta1, train_.beta2, train_.adam_eps, train_.weight_decay};
  }

  Transformer<float> model_;
  TrainConfig train_;
  BatchStream stream_;
  std::size_t step_ = 0;
  std::vector<Tensor<float>> params_;
  AdamState<float> optim_;
  std::vector<Batch> val_batches_;
  ActivationHook<float> hook_;
};

}  // namespace selfablate
