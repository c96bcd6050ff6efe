#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mim/autograd.hpp"
#include "mim/data.hpp"
#include "mim/model.hpp"

namespace mim {

enum class TrainMode { kAR, kFIM, kMIM };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(std::string_view text);

struct TrainConfig {
  TrainMode mode = TrainMode::kMIM;
  double beta = 0.1;
  double lr_max = 3e-3;
  double warmup_fraction = 0.02;
  std::size_t total_steps = 3000;
  std::size_t batch_tokens = 1024;
  double grad_clip = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  std::uint64_t seed = 0;
  double fim_rate = 0.5;
  double psm_rate = 0.5;
  bool fim_middle_only = false;
  // Ablation switches for the agreement term.
  bool tv_stop_grad_fwd = false;
  bool tv_stop_grad_bwd = false;

  // Throws ConfigError naming the field.
  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Per-token means over the batch.
struct LossBreakdown {
  double nll_fwd = 0.0;
  double nll_bwd = 0.0;
  double tv_mean = 0.0;
  double total = 0.0;
};

// 0.5 * sum |p - q|. Throws ContractError unless both rows sum to 1 within 1e-4.
double tv_distance(std::span<const double> p, std::span<const double> q);

// A recorded loss, ready for backward().
template <typename T>
struct LossEvaluation {
  std::unique_ptr<Graph<T>> graph;
  Var total;
  LossBreakdown breakdown;

  GradientMap<T> gradients() { return graph->backward(total); }
};

// nll_fwd + nll_bwd + beta * mean TV between the two predictions of every
// document token. Throws AlignmentError on a misaligned batch.
template <typename T>
LossEvaluation<T> mim_loss(const Parameters<T>& params, const MimBatch& batch, double beta, ops::TvOptions tv = {},
                           bool track_gradients = true);

// Teacher-forced NLL of a single stream (AR and FIM); reported as nll_fwd.
template <typename T>
LossEvaluation<T> stream_loss(const Parameters<T>& params, const StreamBatch& batch, bool track_gradients = true);

// Linear warmup to lr_max, cosine to 0.1 * lr_max at total_steps, flat after.
double lr_schedule(std::size_t step, const TrainConfig& config);

// Moments aligned with Parameters::tensors.
template <typename T>
struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
};

template <typename T>
OptimizerState<T> init_optimizer(const Parameters<T>& params);

// Clips by global norm, applies decoupled weight decay and an Adam update.
// Returns the gradient norm before clipping.
template <typename T>
double adamw_update(Parameters<T>& params, OptimizerState<T>& opt, const GradientMap<T>& grads,
                    const TrainConfig& config, double lr);

// Everything a step consumes. For MIM only `mim` is filled, otherwise `stream`.
struct TrainingBatch {
  MimBatch mim;
  StreamBatch stream;
  std::size_t tokens = 0;
};

// Deterministic batch for a given step: the sampling generator is derived from
// (config.seed, step) so a resumed run sees the same batches.
TrainingBatch make_training_batch(const std::vector<TokenSeq>& docs, const TrainConfig& config,
                                  std::size_t context_len, std::uint64_t step);

struct StepReport {
  LossBreakdown loss;
  double lr = 0.0;
  double grad_norm = 0.0;
};

// One optimizer step on the mode's loss. Throws NumericError naming the step
// and the loss terms if the loss is not finite.
StepReport train_step(Parameters<float>& params, OptimizerState<float>& opt, const TrainingBatch& batch,
                      const TrainConfig& config);

// ---------------------------------------------------------------------------
// Two-stage training for fused models

// Ground-truth streams plus candidate streams generated at lambda = 0.
// Candidate token ids never receive gradients.
struct TwoStageBatch {
  MimBatch truth;
  StreamBatch cand_fwd;  // [L2R, BOS, z_1..] rows, geometry of truth.fwd
  StreamBatch cand_bwd;  // [R2L, BOS, z_N..] rows, geometry of truth.bwd
};

// Greedy continuation of `context` for `count` tokens, lowest id on ties.
template <typename T>
TokenSeq greedy_tokens(const Parameters<T>& params, std::span<const TokenId> context, std::size_t count);

// Stage 1: no update, candidates from the decoupled model (lambda treated as 0).
template <typename T>
TwoStageBatch make_two_stage_batch(const Parameters<T>& params, const MimBatch& truth);

// Stage-2 loss: the forward NLL comes from the ground-truth forward stream fused
// with the backward candidates, the backward NLL from the ground-truth backward
// stream fused with the forward candidates.
template <typename T>
LossEvaluation<T> two_stage_loss(const Parameters<T>& params, const TwoStageBatch& batch, double beta, T lambda,
                                 ops::TvOptions tv = {}, bool track_gradients = true);

// Both stages plus the update. Throws ContractError if the model's lambda is 0.
StepReport two_stage_step(Parameters<float>& params, OptimizerState<float>& opt, const TrainingBatch& batch,
                          const TrainConfig& config);

}  // namespace mim
