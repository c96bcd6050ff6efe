#include "mim/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "mim/errors.hpp"

namespace mim {

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kAR:
      return "AR";
    case TrainMode::kFIM:
      return "FIM";
    case TrainMode::kMIM:
      return "MIM";
  }
  return "?";
}

TrainMode parse_train_mode(std::string_view text) {
  std::string up(text);
  std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (up == "AR") return TrainMode::kAR;
  if (up == "FIM") return TrainMode::kFIM;
  if (up == "MIM") return TrainMode::kMIM;
  throw ConfigError("train.mode: unknown mode '" + std::string(text) + "' (expected AR, FIM or MIM)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("train." + field + ": " + why);
  };
  if (!(beta >= 0.0) || !std::isfinite(beta)) fail("beta", "must be a finite non-negative number");
  if (beta > 0.0 && mode != TrainMode::kMIM) fail("beta", "agreement weight requires mode MIM");
  if (!(lr_max >= 0.0)) fail("lr_max", "must be non-negative");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) fail("warmup_fraction", "must lie in [0, 1)");
  if (total_steps == 0) fail("total_steps", "must be positive");
  if (batch_tokens == 0) fail("batch_tokens", "must be positive");
  if (!(grad_clip >= 0.0)) fail("grad_clip", "must be non-negative (0 disables clipping)");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1", "must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps", "must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be non-negative");
  if (!(fim_rate >= 0.0 && fim_rate <= 1.0)) fail("fim_rate", "must lie in [0, 1]");
  if (!(psm_rate >= 0.0 && psm_rate <= 1.0)) fail("psm_rate", "must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"beta", c.beta},
                     {"lr_max", c.lr_max},
                     {"warmup_fraction", c.warmup_fraction},
                     {"total_steps", c.total_steps},
                     {"batch_tokens", c.batch_tokens},
                     {"grad_clip", c.grad_clip},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"weight_decay", c.weight_decay},
                     {"seed", c.seed},
                     {"fim_rate", c.fim_rate},
                     {"psm_rate", c.psm_rate},
                     {"fim_middle_only", c.fim_middle_only},
                     {"tv_stop_grad_fwd", c.tv_stop_grad_fwd},
                     {"tv_stop_grad_bwd", c.tv_stop_grad_bwd}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.mode = j.contains("mode") ? parse_train_mode(j.at("mode").get<std::string>()) : d.mode;
  // The agreement term only exists for MIM, so other modes default to beta 0.
  c.beta = j.value("beta", c.mode == TrainMode::kMIM ? d.beta : 0.0);
  c.lr_max = j.value("lr_max", d.lr_max);
  c.warmup_fraction = j.value("warmup_fraction", d.warmup_fraction);
  c.total_steps = j.value("total_steps", d.total_steps);
  c.batch_tokens = j.value("batch_tokens", d.batch_tokens);
  c.grad_clip = j.value("grad_clip", d.grad_clip);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.seed = j.value("seed", d.seed);
  c.fim_rate = j.value("fim_rate", d.fim_rate);
  c.psm_rate = j.value("psm_rate", d.psm_rate);
  c.fim_middle_only = j.value("fim_middle_only", d.fim_middle_only);
  c.tv_stop_grad_fwd = j.value("tv_stop_grad_fwd", d.tv_stop_grad_fwd);
  c.tv_stop_grad_bwd = j.value("tv_stop_grad_bwd", d.tv_stop_grad_bwd);
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size() || p.empty()) throw ContractError("tv_distance: distributions must have equal, non-zero size");
  double sp = 0.0, sq = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sp += p[i];
    sq += q[i];
    acc += std::abs(p[i] - q[i]);
  }
  if (std::abs(sp - 1.0) > 1e-4 || std::abs(sq - 1.0) > 1e-4) {
    throw ContractError("tv_distance: inputs are not normalized (sums " + std::to_string(sp) + ", " +
                        std::to_string(sq) + ")");
  }
  return 0.5 * acc;
}

namespace {

template <typename T>
StreamTokens tokens_of(const StreamBatch& b) {
  return {b.inputs, b.rows, b.length};
}

template <typename T>
Var combine(Graph<T>& g, Var nll_f, Var nll_b, Var tv, double beta) {
  return ops::linear_combination(g, {nll_f, nll_b, tv}, {T{1}, T{1}, static_cast<T>(beta)});
}

template <typename T>
LossBreakdown read_breakdown(const Graph<T>& g, Var nll_f, Var nll_b, Var tv, Var total) {
  LossBreakdown out;
  out.nll_fwd = g.value(nll_f).item();
  out.nll_bwd = g.value(nll_b).item();
  out.tv_mean = g.value(tv).item();
  out.total = g.value(total).item();
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> checked_pairs(const MimBatch& batch) {
  check_alignment(batch);
  if (batch.fwd.rows != batch.bwd.rows || batch.fwd.length != batch.bwd.length) {
    throw AlignmentError("MimBatch streams have different geometry");
  }
  return batch.alignment;
}

}  // namespace

template <typename T>
LossEvaluation<T> mim_loss(const Parameters<T>& params, const MimBatch& batch, double beta, ops::TvOptions tv,
                           bool track_gradients) {
  auto pairs = checked_pairs(batch);
  LossEvaluation<T> ev;
  ev.graph = std::make_unique<Graph<T>>(track_gradients);
  Graph<T>& g = *ev.graph;
  auto bound = bind_parameters(g, params);
  Var lf = stream_logits(g, bound, tokens_of<T>(batch.fwd));
  Var lb = stream_logits(g, bound, tokens_of<T>(batch.bwd));
  Var nll_f = ops::cross_entropy(g, lf, batch.fwd.targets);
  Var nll_b = ops::cross_entropy(g, lb, batch.bwd.targets);
  Var agree = ops::tv_mean(g, lf, lb, pairs, tv);
  ev.total = combine(g, nll_f, nll_b, agree, beta);
  ev.breakdown = read_breakdown(g, nll_f, nll_b, agree, ev.total);
  return ev;
}

template <typename T>
LossEvaluation<T> stream_loss(const Parameters<T>& params, const StreamBatch& batch, bool track_gradients) {
  LossEvaluation<T> ev;
  ev.graph = std::make_unique<Graph<T>>(track_gradients);
  Graph<T>& g = *ev.graph;
  auto bound = bind_parameters(g, params);
  Var logits = stream_logits(g, bound, tokens_of<T>(batch));
  ev.total = ops::cross_entropy(g, logits, batch.targets);
  ev.breakdown.nll_fwd = g.value(ev.total).item();
  ev.breakdown.total = ev.breakdown.nll_fwd;
  return ev;
}

double lr_schedule(std::size_t step, const TrainConfig& config) {
  const double total = static_cast<double>(config.total_steps);
  const double warmup = config.warmup_fraction * total;
  const double s = static_cast<double>(step);
  const double floor = 0.1 * config.lr_max;
  if (s < warmup) return config.lr_max * s / warmup;
  const double span = total - warmup;
  const double progress = span > 0.0 ? std::min(1.0, (s - warmup) / span) : 1.0;
  return floor + (config.lr_max - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
OptimizerState<T> init_optimizer(const Parameters<T>& params) {
  OptimizerState<T> opt;
  for (const auto& t : params.tensors) {
    opt.m.emplace_back(t.shape());
    opt.v.emplace_back(t.shape());
  }
  return opt;
}

template <typename T>
double adamw_update(Parameters<T>& params, OptimizerState<T>& opt, const GradientMap<T>& grads,
                    const TrainConfig& config, double lr) {
  if (opt.m.size() != params.tensors.size() || opt.v.size() != params.tensors.size()) {
    throw ShapeError("optimizer state does not match the parameters");
  }
  std::vector<const Tensor<T>*> g(params.tensors.size(), nullptr);
  double sq = 0.0;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto it = grads.find(params.names[i]);
    if (it == grads.end()) continue;
    if (it->second.shape() != params.tensors[i].shape()) {
      throw ShapeError("gradient for " + params.names[i] + " has shape " + shape_string(it->second.shape()));
    }
    g[i] = &it->second;
    for (T x : it->second.values()) sq += static_cast<double>(x) * static_cast<double>(x);
  }
  const double norm = std::sqrt(sq);
  const double clip = config.grad_clip > 0.0 && norm > config.grad_clip ? config.grad_clip / norm : 1.0;
  const double t = static_cast<double>(opt.step + 1);
  const double b1 = config.adam_beta1, b2 = config.adam_beta2;
  const double bc1 = 1.0 - std::pow(b1, t), bc2 = 1.0 - std::pow(b2, t);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    auto& p = params.tensors[i].values();
    auto& m = opt.m[i].values();
    auto& v = opt.v[i].values();
    const double wd = decays(params.names[i]) ? config.weight_decay : 0.0;
    const Tensor<T>* gi = g[i];
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t jj = 0; jj < static_cast<std::ptrdiff_t>(p.size()); ++jj) {
      const auto j = static_cast<std::size_t>(jj);
      const double grad = gi ? static_cast<double>((*gi)[j]) * clip : 0.0;
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * grad;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * grad * grad;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      double pj = static_cast<double>(p[j]);
      pj -= lr * wd * pj;
      pj -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + config.adam_eps);
      p[j] = static_cast<T>(pj);
    }
  }
  ++opt.step;
  return norm;
}

TrainingBatch make_training_batch(const std::vector<TokenSeq>& docs, const TrainConfig& config,
                                  std::size_t context_len, std::uint64_t step) {
  auto rng = step_rng(config.seed, step);
  TrainingBatch batch;
  // FIM layouts add three sentinels and EOS to the document.
  const std::size_t max_len = config.mode == TrainMode::kFIM ? context_len - 3 : context_len - kStreamHead;
  auto windows = sample_windows(docs, rng, max_len, config.batch_tokens);
  for (const auto& w : windows) batch.tokens += w.size();
  switch (config.mode) {
    case TrainMode::kMIM:
      batch.mim = make_mim_batch(windows, context_len);
      break;
    case TrainMode::kAR: {
      std::vector<TrainingRow> rows;
      for (const auto& w : windows) rows.push_back(stream_row(w, Direction::kLeftToRight));
      batch.stream = pack_rows(rows);
      break;
    }
    case TrainMode::kFIM: {
      std::vector<TrainingRow> rows;
      for (const auto& w : windows) {
        auto ex = apply_fim_transform(decode(w), rng, config.fim_rate, config.psm_rate);
        rows.push_back(fim_row(ex, config.fim_middle_only));
      }
      batch.stream = pack_rows(rows);
      break;
    }
  }
  return batch;
}

namespace {

void require_finite(const LossBreakdown& l, std::uint64_t step) {
  if (std::isfinite(l.total) && std::isfinite(l.nll_fwd) && std::isfinite(l.nll_bwd) && std::isfinite(l.tv_mean)) {
    return;
  }
  std::ostringstream msg;
  msg << "non-finite loss at step " << step << ": nll_fwd=" << l.nll_fwd << " nll_bwd=" << l.nll_bwd
      << " tv_mean=" << l.tv_mean << " total=" << l.total;
  throw NumericError(msg.str());
}

StepReport apply_step(Parameters<float>& params, OptimizerState<float>& opt, LossEvaluation<float>& ev,
                      const TrainConfig& config) {
  require_finite(ev.breakdown, opt.step);
  StepReport report;
  report.loss = ev.breakdown;
  auto grads = ev.gradients();
  report.lr = lr_schedule(opt.step, config);
  report.grad_norm = adamw_update(params, opt, grads, config, report.lr);
  return report;
}

ops::TvOptions tv_options(const TrainConfig& config) { return {config.tv_stop_grad_fwd, config.tv_stop_grad_bwd}; }

}  // namespace

StepReport train_step(Parameters<float>& params, OptimizerState<float>& opt, const TrainingBatch& batch,
                      const TrainConfig& config) {
  LossEvaluation<float> ev;
  if (config.mode == TrainMode::kMIM) {
    if (params.config.lambda > 0.0) {
      throw ContractError("train_step: the model has lambda > 0; use two_stage_step");
    }
    ev = mim_loss(params, batch.mim, config.beta, tv_options(config));
  } else {
    ev = stream_loss(params, batch.stream);
  }
  return apply_step(params, opt, ev, config);
}

template <typename T>
TokenSeq greedy_tokens(const Parameters<T>& params, std::span<const TokenId> context, std::size_t count) {
  TokenSeq out;
  if (count == 0) return out;
  AttentionCache<T> cache(params.config);
  Tensor<T> logits = forward_pass(params, context, &cache);
  std::size_t last = logits.rows() - 1;
  while (true) {
    auto row = logits.row(last);
    const auto best = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    out.push_back(best);
    if (out.size() == count) break;
    logits = forward_pass(params, std::span<const TokenId>(&out.back(), 1), &cache);
    last = 0;
  }
  return out;
}

template <typename T>
TwoStageBatch make_two_stage_batch(const Parameters<T>& params, const MimBatch& truth) {
  checked_pairs(truth);
  TwoStageBatch batch;
  batch.truth = truth;
  const std::size_t longest = *std::max_element(truth.doc_lengths.begin(), truth.doc_lengths.end());
  // Free-running candidates depend only on the stream head, so one generation
  // per direction serves every row.
  const TokenSeq head_f(truth.fwd.inputs.begin(), truth.fwd.inputs.begin() + kStreamHead);
  const TokenSeq head_b(truth.bwd.inputs.begin(), truth.bwd.inputs.begin() + kStreamHead);
  const TokenSeq gen_f = greedy_tokens(params, std::span<const TokenId>(head_f), longest);
  const TokenSeq gen_b = greedy_tokens(params, std::span<const TokenId>(head_b), longest);
  // Candidate rows reuse the ground-truth layout with the document span
  // replaced, so heads and padding stay identical.
  batch.cand_fwd = truth.fwd;
  batch.cand_bwd = truth.bwd;
  for (auto* rows : {&batch.cand_fwd, &batch.cand_bwd}) std::fill(rows->targets.begin(), rows->targets.end(), -1);
  for (std::size_t r = 0; r < truth.doc_lengths.size(); ++r) {
    const auto n = static_cast<std::ptrdiff_t>(truth.doc_lengths[r]);
    std::copy(gen_f.begin(), gen_f.begin() + n,
              batch.cand_fwd.inputs.begin() + static_cast<std::ptrdiff_t>(r * truth.fwd.length + kStreamHead));
    std::copy(gen_b.begin(), gen_b.begin() + n,
              batch.cand_bwd.inputs.begin() + static_cast<std::ptrdiff_t>(r * truth.bwd.length + kStreamHead));
  }
  return batch;
}

template <typename T>
LossEvaluation<T> two_stage_loss(const Parameters<T>& params, const TwoStageBatch& batch, double beta, T lambda,
                                 ops::TvOptions tv, bool track_gradients) {
  auto pairs = checked_pairs(batch.truth);
  const auto& truth = batch.truth;
  if (batch.cand_fwd.rows != truth.fwd.rows || batch.cand_fwd.length != truth.fwd.length ||
      batch.cand_bwd.rows != truth.bwd.rows || batch.cand_bwd.length != truth.bwd.length) {
    throw AlignmentError("candidate streams do not match the ground-truth geometry");
  }
  LossEvaluation<T> ev;
  ev.graph = std::make_unique<Graph<T>>(track_gradients);
  Graph<T>& g = *ev.graph;
  auto bound = bind_parameters(g, params);
  Var lf = fused_stream_logits(g, bound, tokens_of<T>(truth.fwd), tokens_of<T>(batch.cand_bwd), lambda).first;
  Var lb = fused_stream_logits(g, bound, tokens_of<T>(batch.cand_fwd), tokens_of<T>(truth.bwd), lambda).second;
  Var nll_f = ops::cross_entropy(g, lf, truth.fwd.targets);
  Var nll_b = ops::cross_entropy(g, lb, truth.bwd.targets);
  Var agree = ops::tv_mean(g, lf, lb, pairs, tv);
  ev.total = combine(g, nll_f, nll_b, agree, beta);
  ev.breakdown = read_breakdown(g, nll_f, nll_b, agree, ev.total);
  return ev;
}

StepReport two_stage_step(Parameters<float>& params, OptimizerState<float>& opt, const TrainingBatch& batch,
                          const TrainConfig& config) {
  if (!(params.config.lambda > 0.0)) {
    throw ContractError("two_stage_step: lambda is 0, the streams are decoupled; use train_step");
  }
  if (config.mode != TrainMode::kMIM) throw ContractError("two_stage_step: requires mode MIM");
  const TwoStageBatch staged = make_two_stage_batch(params, batch.mim);
  auto ev = two_stage_loss(params, staged, config.beta, static_cast<float>(params.config.lambda), tv_options(config));
  return apply_step(params, opt, ev, config);
}

#define MIM_INSTANTIATE_TRAINING(T)                                                                              \
  template LossEvaluation<T> mim_loss<T>(const Parameters<T>&, const MimBatch&, double, ops::TvOptions, bool);  \
  template LossEvaluation<T> stream_loss<T>(const Parameters<T>&, const StreamBatch&, bool);                     \
  template OptimizerState<T> init_optimizer<T>(const Parameters<T>&);                                           \
  template double adamw_update<T>(Parameters<T>&, OptimizerState<T>&, const GradientMap<T>&, const TrainConfig&, \
                                  double);                                                                      \
  template TokenSeq greedy_tokens<T>(const Parameters<T>&, std::span<const TokenId>, std::size_t);              \
  template TwoStageBatch make_two_stage_batch<T>(const Parameters<T>&, const MimBatch&);                        \
  template LossEvaluation<T> two_stage_loss<T>(const Parameters<T>&, const TwoStageBatch&, double, T,           \
                                               ops::TvOptions, bool);

MIM_INSTANTIATE_TRAINING(float)
MIM_INSTANTIATE_TRAINING(double)

#undef MIM_INSTANTIATE_TRAINING

}  // namespace mim
