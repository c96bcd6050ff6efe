#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mim/model.hpp"
#include "mim/vocab.hpp"

namespace mim {

using Distribution = std::vector<double>;

// Anything that maps a context to next-token distributions. Every public call
// counts as one model invocation.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::size_t vocab_size() const = 0;
  // Longest context (including the tokens being scored) the model accepts.
  virtual std::size_t context_limit() const = 0;

  Distribution next_distribution(std::span<const TokenId> context);
  // Distributions after context, context + block[0], ..., context + block:
  // |block| + 1 rows from a single invocation.
  std::vector<Distribution> batched_distributions(std::span<const TokenId> context, std::span<const TokenId> block);

  std::size_t calls() const noexcept { return calls_; }
  std::size_t batched_calls() const noexcept { return batched_calls_; }
  void reset_counters() noexcept { calls_ = batched_calls_ = 0; }

 protected:
  virtual Distribution do_next(std::span<const TokenId> context) = 0;
  virtual std::vector<Distribution> do_batched(std::span<const TokenId> context, std::span<const TokenId> block);

 private:
  std::size_t calls_ = 0;
  std::size_t batched_calls_ = 0;
};

// Trained transformer. Consecutive calls reuse the cached keys/values of the
// longest common prefix with the previous context.
class TransformerLM : public LanguageModel {
 public:
  explicit TransformerLM(std::shared_ptr<const Parameters<float>> params);

  std::size_t vocab_size() const override { return params_->config.vocab_size; }
  std::size_t context_limit() const override { return params_->config.context_len; }

 protected:
  Distribution do_next(std::span<const TokenId> context) override;
  std::vector<Distribution> do_batched(std::span<const TokenId> context, std::span<const TokenId> block) override;

 private:
  // Logits for positions [from, tokens.size()) after syncing the cache.
  TensorF logits_from(std::span<const TokenId> tokens, std::size_t from);

  std::shared_ptr<const Parameters<float>> params_;
  AttentionCache<float> cache_;
  TokenSeq cached_;
};

// Mock that follows a fixed script by position. The position is the number of
// context tokens after the first `head` tokens, or after the last `anchor`
// token when one is set. Past the end of the script it predicts EOS.
// The scripted token gets probability `confidence`; the rest is spread evenly.
class ScriptedLM : public LanguageModel {
 public:
  ScriptedLM(TokenSeq script, double confidence = 0.9, std::size_t head = kStreamHead,
             std::optional<TokenId> anchor = std::nullopt, std::size_t vocab = vocab::kSize,
             std::size_t limit = 4096);

  std::size_t vocab_size() const override { return vocab_; }
  std::size_t context_limit() const override { return limit_; }

 protected:
  Distribution do_next(std::span<const TokenId> context) override;

 private:
  TokenSeq script_;
  double confidence_;
  std::size_t head_;
  std::optional<TokenId> anchor_;
  std::size_t vocab_;
  std::size_t limit_;
};

class UniformLM : public LanguageModel {
 public:
  explicit UniformLM(std::size_t vocab = vocab::kSize, std::size_t limit = 4096) : vocab_(vocab), limit_(limit) {}
  std::size_t vocab_size() const override { return vocab_; }
  std::size_t context_limit() const override { return limit_; }

 protected:
  Distribution do_next(std::span<const TokenId>) override { return Distribution(vocab_, 1.0 / static_cast<double>(vocab_)); }

 private:
  std::size_t vocab_;
  std::size_t limit_;
};

// ---------------------------------------------------------------------------
// Sampling and generation

struct SamplingParams {
  double top_p = 0.95;
  double temperature = 0.0;  // 0 means argmax
  std::uint64_t seed = 0;
  std::size_t max_tokens = 256;
  std::vector<TokenId> stop = {vocab::kEos};
};

// Distribution actually sampled from: temperature applied to log-probs, then
// the smallest descending-probability set with mass >= top_p, renormalized.
Distribution nucleus(std::span<const double> dist, double top_p, double temperature);

// Temperature 0 is argmax with the lowest id winning ties.
TokenId top_p_sample(std::span<const double> dist, const SamplingParams& params, std::mt19937_64& rng);

enum class StopReason { kStopToken, kMaxTokens, kContextFull };

struct Generation {
  TokenSeq tokens;                 // stop token excluded
  std::vector<double> log_probs;   // log p(token) under the model, per token
  StopReason reason = StopReason::kMaxTokens;
  std::optional<TokenId> stop_token;
};

// Throws LengthError if the context alone does not fit the model.
Generation generate(LanguageModel& lm, std::span<const TokenId> context, const SamplingParams& params,
                    std::mt19937_64& rng);

struct FimResult {
  TokenSeq middle;
  std::vector<double> log_probs;
  std::size_t rounds = 1;
};

// SPM context [SUF] suffix [PRE] prefix [MID], generated until a stop token.
// Throws ConfigError if the model vocabulary lacks the sentinels.
FimResult fim_infill(LanguageModel& lm, std::span<const TokenId> prefix, std::span<const TokenId> suffix,
                     const SamplingParams& params);

// ---------------------------------------------------------------------------
// Meet detection

enum class MeetSide { kForward, kBackward };

// With X = prefix ++ F and Y = B ++ suffix (B written left to right, newest
// backward token first), a meet is a pair (a, b) with X[a-n, a) == Y[b, b+n).
// The stitched text is X[0, a) ++ Y[b+n, ..): the shared n-gram is kept once.
struct MeetCandidate {
  MeetSide side = MeetSide::kForward;
  std::size_t fwd_end = 0;     // a
  std::size_t bwd_anchor = 0;  // b
  TokenSeq ngram;
  std::size_t fwd_len = 0;     // forward tokens kept in the middle
  std::size_t tail_begin = 0;  // first backward token after the n-gram

  friend bool operator==(const MeetCandidate&, const MeetCandidate&) = default;
};

// Middle proposed by a candidate: F[0, fwd_len) ++ B[tail_begin, ..).
TokenSeq candidate_middle(std::span<const TokenId> fwd, std::span<const TokenId> bwd_ltr, const MeetCandidate& c);

// Forward side: G = last n of X matched against windows of Y starting inside B
// (or exactly at the suffix), smallest anchor first. Backward side: G = first n
// of Y matched against windows of X ending inside F (or exactly at the prefix
// end), largest end first.
std::vector<MeetCandidate> forward_meets(std::span<const TokenId> prefix, std::span<const TokenId> fwd,
                                         std::span<const TokenId> bwd_ltr, std::span<const TokenId> suffix,
                                         std::size_t n);
std::vector<MeetCandidate> backward_meets(std::span<const TokenId> prefix, std::span<const TokenId> fwd,
                                          std::span<const TokenId> bwd_ltr, std::span<const TokenId> suffix,
                                          std::size_t n);

// First forward candidate, else first backward candidate.
std::optional<MeetCandidate> detect_meet(std::span<const TokenId> prefix, std::span<const TokenId> fwd,
                                         std::span<const TokenId> bwd_ltr, std::span<const TokenId> suffix,
                                         std::size_t n);

// ---------------------------------------------------------------------------
// Verification

enum class VerifyCriterion { kGreedyExact, kThreshold };

struct VerifyReport {
  std::size_t accepted = 0;
  std::size_t proposed = 0;
  bool full() const noexcept { return accepted == proposed; }
};

// One batched call over context ++ candidates; accepts the longest prefix whose
// tokens meet the criterion at their preceding position. Empty candidates are
// accepted without calling the model. `accepted_log_probs` receives the model
// log-probability of each accepted token.
VerifyReport parallel_verify(LanguageModel& lm, std::span<const TokenId> context, std::span<const TokenId> candidates,
                             VerifyCriterion criterion, double tau = 0.0,
                             std::vector<double>* accepted_log_probs = nullptr);

// ---------------------------------------------------------------------------
// Two-sided infilling

struct InfillRequest {
  TokenSeq prefix;
  TokenSeq suffix;
  std::size_t ngram = 4;
  std::size_t budget = 64;  // tokens per side
  SamplingParams sampling;
  VerifyCriterion criterion = VerifyCriterion::kGreedyExact;
  double tau = 0.1;
  // Forward and backward token generation on separate threads each round.
  bool concurrent = false;
  std::size_t verifications_per_round = 1;
  // Let the backward model verify candidates found by backward detection.
  bool backward_verification = false;
  // Forward verification also runs over the suffix, then `suffix_end` if set;
  // a join is accepted only when those tokens pass as well.
  bool verify_suffix = false;
  std::optional<TokenId> suffix_end;
  TokenSeq fwd_head = {vocab::kL2R, vocab::kBos};
  TokenSeq bwd_head = {vocab::kR2L, vocab::kBos};
};

enum class InfillStatus { kJoinedVerified, kForwardFallback, kBackwardFallback };

std::string to_string(InfillStatus status);

struct InfillResult {
  TokenSeq middle;
  InfillStatus status = InfillStatus::kForwardFallback;
  std::size_t rounds = 0;             // generation rounds + verification calls, at least 1
  std::size_t generation_rounds = 0;
  std::size_t verification_calls = 0;
  std::vector<VerifyReport> verifications;
  std::optional<MeetCandidate> meet;  // the accepted candidate
  std::size_t fwd_tokens = 0;
  std::size_t bwd_tokens = 0;
  double fwd_mean_log_prob = -std::numeric_limits<double>::infinity();
  double bwd_mean_log_prob = -std::numeric_limits<double>::infinity();
};

void to_json(nlohmann::json& j, const MeetCandidate& c);
void to_json(nlohmann::json& j, const InfillResult& r);

// Throws ContractError for a zero budget or n-gram size.
InfillResult mim_infill(LanguageModel& fwd_lm, LanguageModel& bwd_lm, const InfillRequest& request);

}  // namespace mim
