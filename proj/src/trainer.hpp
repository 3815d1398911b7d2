#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "blocks.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "metrics.hpp"
#include "optim.hpp"

namespace gatedformer {

// Run clock behind wall_ms. The default null clock always reads zero so the
// metrics CSV stays a pure function of (seed, config, corpus); `timing=real`
// switches to the steady clock.
class RunClock {
 public:
  explicit RunClock(bool real) : real_(real), start_(std::chrono::steady_clock::now()) {}

  double now_ms() const {
    if (!real_) return 0.0;
    const auto d = std::chrono::steady_clock::now() - start_;
    return std::chrono::duration<double, std::milli>(d).count();
  }

 private:
  bool real_;
  std::chrono::steady_clock::time_point start_;
};

struct EvalMetrics {
  double loss = 0.0;
  double ppl = 1.0;
  double bpc = 0.0;
};

// Mean token NLL over a whole split, processed as one stream in seq_len
// segments (a trailing short segment is included, so every target counts).
// XL memory threads across consecutive segments. Dropout is off.
template <class T>
EvalMetrics evaluate_split(const Model<T>& model, const std::vector<int32_t>& ids, int64_t seq_len,
                           int64_t mem_len) {
  require(seq_len >= 1, ErrorCode::InvalidArgument, "evaluate: seq_len must be >= 1");
  require(ids.size() >= 2, ErrorCode::CorpusTooSmall, "evaluate: split has no predictable token");

  Model<T> view = model;  // shares parameter tensors
  view.cfg.mem_len = mem_len;

  ForwardCtx ctx{/*train=*/false, model.seed, /*step=*/0};
  SegmentMemory<T> memory;
  double total_nll = 0.0;
  int64_t count = 0;
  const int64_t n = static_cast<int64_t>(ids.size());
  for (int64_t p = 0; p + 1 < n; p += seq_len) {
    const int64_t len = std::min<int64_t>(seq_len, n - 1 - p);
    std::vector<int32_t> inputs(ids.begin() + p, ids.begin() + p + len);
    std::vector<int32_t> targets(ids.begin() + p + 1, ids.begin() + p + len + 1);
    Tensor<T> logits = forward_stream(view, inputs, &memory, ctx);
    Tensor<T> nll = cross_entropy_from_logits(logits, targets);
    total_nll += static_cast<double>(nll.values()[0]) * static_cast<double>(len);
    count += len;
  }
  const double loss = total_nll / static_cast<double>(count);
  return {loss, to_ppl(loss), to_bpc(loss)};
}

// Optimizer bookkeeping that travels with a training run (and into
// checkpoints).
template <class T>
struct TrainerState {
  int64_t step = 0;
  SgdAnnealState sgd;
  AdamState<T> adam;
};

template <class T>
struct TrainHooks {
  std::function<void(const MetricsRecord&)> on_record;
  std::function<void(const Model<T>&, const TrainerState<T>&)> on_checkpoint;
};

// The training loop: forward, cross-entropy, backward, (SGD-mode) global
// norm clip, optimizer step. XL memories thread across batches and reset at
// epoch boundaries. Validation runs every eval_interval steps and feeds the
// SGD annealing policy.
template <class T>
std::vector<MetricsRecord> train_model(Model<T>& model, const std::vector<int32_t>& train_ids,
                                       const std::vector<int32_t>& valid_ids, const RunConfig& rc,
                                       TrainerState<T>& state, const TrainHooks<T>& hooks = {}) {
  require(rc.lr > 0.0, ErrorCode::ConfigError, "key lr: must be > 0");
  require(rc.optimizer != OptimizerKind::SgdAnneal || rc.clip_norm > 0.0, ErrorCode::ConfigError,
          "key clip_norm: must be > 0 in sgd mode");
  require(rc.seq_len >= 1, ErrorCode::ConfigError, "key seq_len: must be >= 1");
  require(rc.eval_interval >= 1, ErrorCode::ConfigError, "key eval_interval: must be >= 1");

  BatchStream batches(train_ids, rc.batch_size, rc.seq_len);
  const int64_t steps = rc.max_steps > 0 ? rc.max_steps : rc.epochs * batches.batch_count();
  require(steps >= 1, ErrorCode::ConfigError, "key max_steps/epochs: no training steps requested");

  if (state.step == 0) {
    state.sgd.lr = rc.lr;
    state.sgd.decay_factor = rc.decay_factor;
    state.sgd.patience = rc.patience;
  }

  RunClock clock(rc.timing_real);
  auto params = model.named_parameters();
  std::vector<SegmentMemory<T>> memories;
  std::vector<MetricsRecord> records;
  double interval_loss = 0.0;
  int64_t interval_steps = 0;

  auto emit = [&](MetricsRecord record) {
    if (hooks.on_record) hooks.on_record(record);
    records.push_back(std::move(record));
  };

  const int64_t start_step = state.step;
  for (int64_t step = start_step + 1; step <= start_step + steps; ++step) {
    const int64_t batch_index = (step - 1) % batches.batch_count();
    const int64_t epoch = (step - 1) / batches.batch_count() + 1;
    if (batch_index == 0) memories.clear();  // epoch boundary: fresh memory

    const auto batch = batches.get(batch_index);
    ForwardCtx ctx{/*train=*/true, rc.seed, static_cast<uint64_t>(step)};
    std::vector<Tensor<T>> logits = forward_lm(model, batch.inputs, &memories, ctx);

    Tensor<T> loss;
    for (size_t s = 0; s < logits.size(); ++s) {
      Tensor<T> nll = cross_entropy_from_logits(logits[s], batch.targets[s]);
      loss = s == 0 ? nll : add(loss, nll);
    }
    loss = scale(loss, T(1) / static_cast<T>(logits.size()));

    const double loss_value = static_cast<double>(loss.values()[0]);
    if (!std::isfinite(loss_value))
      fail(ErrorCode::DivergedLoss, "loss became non-finite at step " + std::to_string(step));

    model.zero_grad();
    backward(loss);

    double lr_now = rc.lr;
    if (rc.optimizer == OptimizerKind::SgdAnneal) {
      clip_global_norm(params, rc.clip_norm);
      lr_now = state.sgd.lr;
      sgd_step(params, lr_now);
    } else {
      adam_step(params, state.adam, rc.lr, rc.beta1, rc.beta2, rc.adam_eps);
    }
    state.step = step;
    interval_loss += loss_value;
    interval_steps += 1;

    const bool at_interval = step % rc.eval_interval == 0 || step == start_step + steps;
    if (at_interval) {
      emit(MetricsRecord::from_loss(step, epoch, "train", interval_loss / interval_steps, lr_now,
                                    clock.now_ms()));
      interval_loss = 0.0;
      interval_steps = 0;
      if (!valid_ids.empty()) {
        const EvalMetrics valid = evaluate_split(model, valid_ids, rc.seq_len, rc.mem_len);
        emit(MetricsRecord::from_loss(step, epoch, "valid", valid.loss, lr_now, clock.now_ms()));
        if (rc.optimizer == OptimizerKind::SgdAnneal) state.sgd.observe_validation(valid.loss);
      }
      if (hooks.on_checkpoint) hooks.on_checkpoint(model, state);
    }
  }
  return records;
}

}  // namespace gatedformer
