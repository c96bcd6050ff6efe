#include "mim/inference.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>

#include "mim/data.hpp"
#include "mim/errors.hpp"

namespace mim {

namespace {

std::size_t argmax(std::span<const double> dist) {
  return static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
}

Distribution softmax_row(std::span<const float> logits) {
  Distribution out(logits.size());
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(static_cast<double>(logits[i]) - top);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

TokenSeq concat(std::span<const TokenId> a, std::span<const TokenId> b) {
  TokenSeq out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

bool same(std::span<const TokenId> a, std::span<const TokenId> b) { return std::ranges::equal(a, b); }

}  // namespace

// ---------------------------------------------------------------------------
// LanguageModel

Distribution LanguageModel::next_distribution(std::span<const TokenId> context) {
  if (context.empty()) throw ContractError("next_distribution: empty context");
  if (context.size() > context_limit()) {
    throw LengthError("next_distribution: context of " + std::to_string(context.size()) + " exceeds limit " +
                      std::to_string(context_limit()));
  }
  ++calls_;
  return do_next(context);
}

std::vector<Distribution> LanguageModel::batched_distributions(std::span<const TokenId> context,
                                                               std::span<const TokenId> block) {
  if (context.empty()) throw ContractError("batched_distributions: empty context");
  if (context.size() + block.size() > context_limit()) {
    throw LengthError("batched_distributions: " + std::to_string(context.size() + block.size()) +
                      " tokens exceed limit " + std::to_string(context_limit()));
  }
  ++calls_;
  ++batched_calls_;
  return do_batched(context, block);
}

std::vector<Distribution> LanguageModel::do_batched(std::span<const TokenId> context, std::span<const TokenId> block) {
  TokenSeq seq(context.begin(), context.end());
  std::vector<Distribution> out;
  out.reserve(block.size() + 1);
  out.push_back(do_next(seq));
  for (TokenId t : block) {
    seq.push_back(t);
    out.push_back(do_next(seq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// TransformerLM

TransformerLM::TransformerLM(std::shared_ptr<const Parameters<float>> params)
    : params_(std::move(params)), cache_(params_->config) {}

TensorF TransformerLM::logits_from(std::span<const TokenId> tokens, std::size_t from) {
  std::size_t keep = 0;
  while (keep < cached_.size() && keep < tokens.size() && cached_[keep] == tokens[keep]) ++keep;
  keep = std::min(keep, from);
  cache_.truncate(keep);
  cached_.resize(keep);

  TensorF logits = forward_pass(*params_, tokens.subspan(keep), &cache_);
  cached_.assign(tokens.begin(), tokens.end());
  const std::size_t skip = from - keep;
  TensorF out({logits.rows() - skip, logits.cols()});
  std::copy(logits.data() + skip * logits.cols(), logits.data() + logits.size(), out.data());
  return out;
}

Distribution TransformerLM::do_next(std::span<const TokenId> context) {
  const TensorF logits = logits_from(context, context.size() - 1);
  return softmax_row(logits.row(0));
}

std::vector<Distribution> TransformerLM::do_batched(std::span<const TokenId> context, std::span<const TokenId> block) {
  const TokenSeq all = concat(context, block);
  const TensorF logits = logits_from(all, context.size() - 1);
  std::vector<Distribution> out;
  out.reserve(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) out.push_back(softmax_row(logits.row(r)));
  return out;
}

// ---------------------------------------------------------------------------
// ScriptedLM

ScriptedLM::ScriptedLM(TokenSeq script, double confidence, std::size_t head, std::optional<TokenId> anchor,
                       std::size_t vocab, std::size_t limit)
    : script_(std::move(script)), confidence_(confidence), head_(head), anchor_(anchor), vocab_(vocab), limit_(limit) {
  if (!(confidence > 0.0 && confidence <= 1.0)) throw ContractError("ScriptedLM: confidence must be in (0, 1]");
  if (vocab_ < 2) throw ContractError("ScriptedLM: vocabulary needs at least 2 ids");
  for (TokenId t : script_) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_) throw IndexError("ScriptedLM: script token outside vocabulary");
  }
}

Distribution ScriptedLM::do_next(std::span<const TokenId> context) {
  std::size_t pos = context.size() >= head_ ? context.size() - head_ : 0;
  if (anchor_) {
    const auto it = std::find(context.rbegin(), context.rend(), *anchor_);
    if (it != context.rend()) pos = static_cast<std::size_t>(it - context.rbegin());
  }
  const TokenId next = pos < script_.size() ? script_[pos] : vocab::kEos;
  Distribution dist(vocab_, (1.0 - confidence_) / static_cast<double>(vocab_ - 1));
  if (static_cast<std::size_t>(next) < vocab_) dist[static_cast<std::size_t>(next)] = confidence_;
  return dist;
}

// ---------------------------------------------------------------------------
// Sampling

Distribution nucleus(std::span<const double> dist, double top_p, double temperature) {
  if (dist.empty()) throw ContractError("nucleus: empty distribution");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ContractError("nucleus: top_p must be in (0, 1]");
  Distribution q(dist.size(), 0.0);
  if (temperature <= 0.0) {
    q[argmax(dist)] = 1.0;
    return q;
  }
  double top = -std::numeric_limits<double>::infinity();
  for (double p : dist) {
    if (p > 0.0) top = std::max(top, std::log(p) / temperature);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < dist.size(); ++i) {
    if (dist[i] > 0.0) {
      q[i] = std::exp(std::log(dist[i]) / temperature - top);
      total += q[i];
    }
  }
  for (double& v : q) v /= total;

  std::vector<std::size_t> order(q.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return q[a] > q[b]; });
  double mass = 0.0;
  std::size_t kept = 0;
  while (kept < order.size() && mass < top_p - 1e-12) mass += q[order[kept++]];
  Distribution out(q.size(), 0.0);
  for (std::size_t i = 0; i < kept; ++i) out[order[i]] = q[order[i]] / mass;
  return out;
}

TokenId top_p_sample(std::span<const double> dist, const SamplingParams& params, std::mt19937_64& rng) {
  if (params.temperature <= 0.0) {
    if (dist.empty()) throw ContractError("top_p_sample: empty distribution");
    return static_cast<TokenId>(argmax(dist));
  }
  const Distribution q = nucleus(dist, params.top_p, params.temperature);
  const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] <= 0.0) continue;
    last = i;
    acc += q[i];
    if (u < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last);
}

Generation generate(LanguageModel& lm, std::span<const TokenId> context, const SamplingParams& params,
                    std::mt19937_64& rng) {
  if (context.size() > lm.context_limit()) {
    throw LengthError("generate: context of " + std::to_string(context.size()) + " exceeds limit " +
                      std::to_string(lm.context_limit()));
  }
  Generation out;
  TokenSeq seq(context.begin(), context.end());
  while (out.tokens.size() < params.max_tokens) {
    if (seq.size() > lm.context_limit()) {
      out.reason = StopReason::kContextFull;
      return out;
    }
    const Distribution dist = lm.next_distribution(seq);
    const TokenId t = top_p_sample(dist, params, rng);
    if (std::ranges::find(params.stop, t) != params.stop.end()) {
      out.reason = StopReason::kStopToken;
      out.stop_token = t;
      return out;
    }
    seq.push_back(t);
    out.tokens.push_back(t);
    out.log_probs.push_back(std::log(dist[static_cast<std::size_t>(t)]));
  }
  out.reason = StopReason::kMaxTokens;
  return out;
}

FimResult fim_infill(LanguageModel& lm, std::span<const TokenId> prefix, std::span<const TokenId> suffix,
                     const SamplingParams& params) {
  if (lm.vocab_size() < vocab::kSize) {
    throw ConfigError("fim: model vocabulary of " + std::to_string(lm.vocab_size()) +
                      " ids has no PRE/SUF/MID sentinels");
  }
  TokenSeq context{vocab::kSuf};
  context.insert(context.end(), suffix.begin(), suffix.end());
  context.push_back(vocab::kPre);
  context.insert(context.end(), prefix.begin(), prefix.end());
  context.push_back(vocab::kMid);
  std::mt19937_64 rng(params.seed);
  Generation g = generate(lm, context, params, rng);
  FimResult out;
  out.rounds = std::max<std::size_t>(1, g.tokens.size());
  out.middle = std::move(g.tokens);
  out.log_probs = std::move(g.log_probs);
  return out;
}

// ---------------------------------------------------------------------------
// Meet detection

TokenSeq candidate_middle(std::span<const TokenId> fwd, std::span<const TokenId> bwd_ltr, const MeetCandidate& c) {
  if (c.fwd_len > fwd.size() || c.tail_begin > bwd_ltr.size()) throw ContractError("candidate_middle: stale candidate");
  TokenSeq out(fwd.begin(), fwd.begin() + static_cast<std::ptrdiff_t>(c.fwd_len));
  out.insert(out.end(), bwd_ltr.begin() + static_cast<std::ptrdiff_t>(c.tail_begin), bwd_ltr.end());
  return out;
}

std::vector<MeetCandidate> forward_meets(std::span<const TokenId> prefix, std::span<const TokenId> fwd,
                                         std::span<const TokenId> bwd_ltr, std::span<const TokenId> suffix,
                                         std::size_t n) {
  if (n == 0) throw ContractError("meet detection: n-gram size must be positive");
  const TokenSeq x = concat(prefix, fwd);
  const TokenSeq y = concat(bwd_ltr, suffix);
  std::vector<MeetCandidate> out;
  if (x.size() < n) return out;
  const std::span<const TokenId> g = std::span<const TokenId>(x).subspan(x.size() - n);
  for (std::size_t b = 0; b <= bwd_ltr.size() && b + n <= y.size(); ++b) {
    if (!same(g, std::span<const TokenId>(y).subspan(b, n))) continue;
    const std::size_t into_suffix = b + n > bwd_ltr.size() ? b + n - bwd_ltr.size() : 0;
    if (fwd.size() < into_suffix) continue;
    MeetCandidate c;
    c.side = MeetSide::kForward;
    c.fwd_end = x.size();
    c.bwd_anchor = b;
    c.ngram.assign(g.begin(), g.end());
    c.fwd_len = fwd.size() - into_suffix;
    c.tail_begin = std::min(b + n, bwd_ltr.size());
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<MeetCandidate> backward_meets(std::span<const TokenId> prefix, std::span<const TokenId> fwd,
                                          std::span<const TokenId> bwd_ltr, std::span<const TokenId> suffix,
                                          std::size_t n) {
  if (n == 0) throw ContractError("meet detection: n-gram size must be positive");
  const TokenSeq x = concat(prefix, fwd);
  const TokenSeq y = concat(bwd_ltr, suffix);
  std::vector<MeetCandidate> out;
  if (y.size() < n) return out;
  const std::span<const TokenId> g = std::span<const TokenId>(y).first(n);
  const std::size_t into_suffix = n > bwd_ltr.size() ? n - bwd_ltr.size() : 0;
  for (std::size_t a = x.size(); a >= std::max(prefix.size(), n); --a) {
    if (same(std::span<const TokenId>(x).subspan(a - n, n), g) && a - prefix.size() >= into_suffix) {
      MeetCandidate c;
      c.side = MeetSide::kBackward;
      c.fwd_end = a;
      c.bwd_anchor = 0;
      c.ngram.assign(g.begin(), g.end());
      c.fwd_len = a - prefix.size() - into_suffix;
      c.tail_begin = std::min(n, bwd_ltr.size());
      out.push_back(std::move(c));
    }
    if (a == 0) break;
  }
  return out;
}

std::optional<MeetCandidate> detect_meet(std::span<const TokenId> prefix, std::span<const TokenId> fwd,
                                         std::span<const TokenId> bwd_ltr, std::span<const TokenId> suffix,
                                         std::size_t n) {
  auto f = forward_meets(prefix, fwd, bwd_ltr, suffix, n);
  if (!f.empty()) return f.front();
  auto b = backward_meets(prefix, fwd, bwd_ltr, suffix, n);
  if (!b.empty()) return b.front();
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Verification

VerifyReport parallel_verify(LanguageModel& lm, std::span<const TokenId> context, std::span<const TokenId> candidates,
                             VerifyCriterion criterion, double tau, std::vector<double>* accepted_log_probs) {
  VerifyReport report;
  report.proposed = candidates.size();
  if (accepted_log_probs) accepted_log_probs->clear();
  if (candidates.empty()) return report;
  const std::vector<Distribution> dists = lm.batched_distributions(context, candidates);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const TokenId t = candidates[i];
    if (t < 0 || static_cast<std::size_t>(t) >= dists[i].size()) throw IndexError("parallel_verify: token outside vocabulary");
    const double p = dists[i][static_cast<std::size_t>(t)];
    const bool ok = criterion == VerifyCriterion::kGreedyExact ? argmax(dists[i]) == static_cast<std::size_t>(t)
                                                               : p >= tau;
    if (!ok) break;
    ++report.accepted;
    if (accepted_log_probs) accepted_log_probs->push_back(std::log(p));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Two-sided infilling

std::string to_string(InfillStatus status) {
  switch (status) {
    case InfillStatus::kJoinedVerified: return "joined-verified";
    case InfillStatus::kForwardFallback: return "forward-fallback";
    case InfillStatus::kBackwardFallback: return "backward-fallback";
  }
  return "unknown";
}

void to_json(nlohmann::json& j, const MeetCandidate& c) {
  j = {{"side", c.side == MeetSide::kForward ? "forward" : "backward"},
       {"fwd_end", c.fwd_end},
       {"bwd_anchor", c.bwd_anchor},
       {"ngram", c.ngram},
       {"fwd_len", c.fwd_len},
       {"tail_begin", c.tail_begin}};
}

void to_json(nlohmann::json& j, const InfillResult& r) {
  auto finite_or_null = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  j = {{"status", to_string(r.status)},
       {"middle", r.middle},
       {"rounds", r.rounds},
       {"generation_rounds", r.generation_rounds},
       {"verification_calls", r.verification_calls},
       {"fwd_tokens", r.fwd_tokens},
       {"bwd_tokens", r.bwd_tokens},
       {"fwd_mean_log_prob", finite_or_null(r.fwd_mean_log_prob)},
       {"bwd_mean_log_prob", finite_or_null(r.bwd_mean_log_prob)}};
  nlohmann::json v = nlohmann::json::array();
  for (const auto& rep : r.verifications) v.push_back({{"accepted", rep.accepted}, {"proposed", rep.proposed}});
  j["verifications"] = std::move(v);
  j["meet"] = r.meet ? nlohmann::json(*r.meet) : nlohmann::json(nullptr);
}

namespace {

// One generating direction. `known` is the head plus the given context, `gen`
// the generated tokens in generation order.
struct Side {
  LanguageModel& lm;
  TokenSeq known;
  TokenSeq gen;
  std::vector<double> log_probs;
  std::mt19937_64 rng;
  bool done = false;
  bool called = false;

  TokenSeq context() const { return concat(known, gen); }

  double mean_log_prob() const {
    if (gen.empty()) return -std::numeric_limits<double>::infinity();
    return std::accumulate(log_probs.begin(), log_probs.end(), 0.0) / static_cast<double>(gen.size());
  }

  void step(const InfillRequest& req) {
    called = false;
    if (done) return;
    const TokenSeq ctx = context();
    if (ctx.size() > lm.context_limit()) {
      done = true;
      return;
    }
    const Distribution dist = lm.next_distribution(ctx);
    called = true;
    const TokenId t = top_p_sample(dist, req.sampling, rng);
    if (std::ranges::find(req.sampling.stop, t) != req.sampling.stop.end()) {
      done = true;
      return;
    }
    gen.push_back(t);
    log_probs.push_back(std::log(dist[static_cast<std::size_t>(t)]));
    if (gen.size() >= req.budget) done = true;
  }

  // Replace everything after `keep` generated tokens with verified tokens.
  void adopt(std::size_t keep, std::span<const TokenId> tokens, const std::vector<double>& lps,
             const InfillRequest& req) {
    gen.resize(keep);
    log_probs.resize(keep);
    gen.insert(gen.end(), tokens.begin(), tokens.end());
    log_probs.insert(log_probs.end(), lps.begin(), lps.end());
    done = gen.size() >= req.budget;
  }
};

TokenSeq reversed(std::span<const TokenId> s) { return TokenSeq(s.rbegin(), s.rend()); }

}  // namespace

InfillResult mim_infill(LanguageModel& fwd_lm, LanguageModel& bwd_lm, const InfillRequest& req) {
  if (req.budget == 0) throw ContractError("mim_infill: budget must be positive");
  if (req.ngram == 0) throw ContractError("mim_infill: n-gram size must be positive");
  if (req.verifications_per_round == 0) throw ContractError("mim_infill: verifications_per_round must be positive");
  if (req.concurrent && &fwd_lm == &bwd_lm) throw ContractError("mim_infill: concurrent rounds need two model instances");

  Side fwd{fwd_lm, concat(req.fwd_head, req.prefix), {}, {}, std::mt19937_64(splitmix64(req.sampling.seed * 2 + 1))};
  const TokenSeq rev_suffix = reversed(req.suffix);
  Side bwd{bwd_lm, concat(req.bwd_head, rev_suffix), {}, {}, std::mt19937_64(splitmix64(req.sampling.seed * 2 + 2))};

  InfillResult result;
  auto finish = [&](InfillStatus status, TokenSeq middle) {
    result.status = status;
    result.middle = std::move(middle);
    result.fwd_tokens = fwd.gen.size();
    result.bwd_tokens = bwd.gen.size();
    result.fwd_mean_log_prob = fwd.mean_log_prob();
    result.bwd_mean_log_prob = bwd.mean_log_prob();
    result.rounds = std::max<std::size_t>(1, result.generation_rounds + result.verification_calls);
    return result;
  };

  // Returns true when the candidate was fully accepted.
  auto try_candidate = [&](const MeetCandidate& c, const TokenSeq& bwd_ltr) {
    const bool by_backward = req.backward_verification && c.side == MeetSide::kBackward;
    std::vector<double> lps;
    if (!by_backward) {
      TokenSeq context = concat(req.fwd_head, req.prefix);
      context.insert(context.end(), fwd.gen.begin(), fwd.gen.begin() + static_cast<std::ptrdiff_t>(c.fwd_len));
      TokenSeq tail(bwd_ltr.begin() + static_cast<std::ptrdiff_t>(c.tail_begin), bwd_ltr.end());
      const std::size_t tail_len = tail.size();
      if (req.verify_suffix) {
        tail.insert(tail.end(), req.suffix.begin(), req.suffix.end());
        if (req.suffix_end) tail.push_back(*req.suffix_end);
      }
      const std::size_t room = fwd_lm.context_limit() > context.size() ? fwd_lm.context_limit() - context.size() : 0;
      const bool cut = tail.size() > room;
      if (cut) tail.resize(room);
      VerifyReport rep;
      rep.proposed = tail.size();
      if (!tail.empty()) {
        rep = parallel_verify(fwd_lm, context, tail, req.criterion, req.tau, &lps);
        ++result.verification_calls;
        result.verifications.push_back(rep);
      }
      if (rep.full() && !cut) return true;
      // Fast-forward never runs into the suffix.
      const std::size_t keep = std::min(rep.accepted, tail_len);
      if (c.fwd_len + keep > fwd.gen.size()) {
        lps.resize(keep);
        fwd.adopt(c.fwd_len, std::span<const TokenId>(tail).first(keep), lps, req);
      }
      return false;
    }
    // The backward model continues leftwards through the forward tokens that
    // precede the shared n-gram.
    const std::size_t before = c.fwd_end >= req.prefix.size() + c.ngram.size()
                                   ? c.fwd_end - req.ngram - req.prefix.size()
                                   : 0;
    TokenSeq cand = reversed(std::span<const TokenId>(fwd.gen).first(before));
    const TokenSeq context = bwd.context();
    const std::size_t room = bwd_lm.context_limit() > context.size() ? bwd_lm.context_limit() - context.size() : 0;
    const bool cut = cand.size() > room;
    if (cut) cand.resize(room);
    VerifyReport rep;
    rep.proposed = cand.size();
    if (!cand.empty()) {
      rep = parallel_verify(bwd_lm, context, cand, req.criterion, req.tau, &lps);
      ++result.verification_calls;
      result.verifications.push_back(rep);
    }
    if (rep.full() && !cut) return true;
    if (rep.accepted > 0) bwd.adopt(bwd.gen.size(), std::span<const TokenId>(cand).first(rep.accepted), lps, req);
    return false;
  };

  while (!(fwd.done && bwd.done)) {
    if (req.concurrent) {
      auto pending = std::async(std::launch::async, [&] { bwd.step(req); });
      fwd.step(req);
      pending.get();
    } else {
      fwd.step(req);
      bwd.step(req);
    }
    if (fwd.called || bwd.called) ++result.generation_rounds;

    const TokenSeq bwd_ltr = reversed(bwd.gen);
    std::vector<MeetCandidate> cands = forward_meets(req.prefix, fwd.gen, bwd_ltr, req.suffix, req.ngram);
    std::vector<MeetCandidate> back = backward_meets(req.prefix, fwd.gen, bwd_ltr, req.suffix, req.ngram);
    cands.insert(cands.end(), back.begin(), back.end());

    const TokenSeq fwd_before = fwd.gen;
    const TokenSeq bwd_before = bwd.gen;
    for (std::size_t i = 0; i < cands.size() && i < req.verifications_per_round; ++i) {
      if (try_candidate(cands[i], bwd_ltr)) {
        result.meet = cands[i];
        return finish(InfillStatus::kJoinedVerified, candidate_middle(fwd.gen, bwd_ltr, cands[i]));
      }
      // Remaining candidates were computed against the old state.
      if (fwd.gen != fwd_before || bwd.gen != bwd_before) break;
    }
  }

  const double f = fwd.mean_log_prob();
  const double b = bwd.mean_log_prob();
  if (f >= b) return finish(InfillStatus::kForwardFallback, fwd.gen);
  return finish(InfillStatus::kBackwardFallback, reversed(bwd.gen));
}

}  // namespace mim
