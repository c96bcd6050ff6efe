#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "mim/inference.hpp"
#include "mim/model.hpp"
#include "mim/vocab.hpp"

namespace mim {

// Where a report came from; written into every report document.
struct ReportMeta {
  std::string config_hash;
  std::string checkpoint_hash;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const ReportMeta& m);

// ---------------------------------------------------------------------------
// Perplexity

struct PerplexityReport {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::size_t tokens = 0;
};

// Documents longer than the model context are cut into consecutive windows of
// context - 2 tokens, each scored after its own [dir, BOS] head.
std::vector<TokenSeq> eval_windows(const std::vector<TokenSeq>& docs, std::size_t max_len);

// exp(mean NLL) of every document token plus the closing EOS (optional), read
// in the given direction. BOS and the direction sentinel are never targets.
// Throws ContractError on an empty split.
PerplexityReport perplexity(LanguageModel& lm, const std::vector<TokenSeq>& docs,
                            Direction direction = Direction::kLeftToRight, bool include_eos = true);

// Teacher-forced forward/backward NLL and the mean TV between the two
// predictions of every held-out token.
struct AgreementReport {
  double nll_fwd = 0.0;
  double nll_bwd = 0.0;
  double tv_mean = 0.0;
  double perplexity_fwd = 0.0;
  double perplexity_bwd = 0.0;
  std::size_t tokens = 0;
};

AgreementReport held_out_agreement(const Parameters<float>& params, const std::vector<TokenSeq>& docs,
                                   std::size_t batch_tokens = 4096);

void to_json(nlohmann::json& j, const PerplexityReport& r);
void to_json(nlohmann::json& j, const AgreementReport& r);

// ---------------------------------------------------------------------------
// Infilling engines

struct InfillExample {
  TokenSeq prefix;
  TokenSeq middle;
  TokenSeq suffix;
};

struct EngineOutput {
  TokenSeq middle;
  std::size_t rounds = 1;
  std::string status;
  std::optional<InfillResult> detail;  // set by the two-sided engine
};

class InfillEngine {
 public:
  virtual ~InfillEngine() = default;
  virtual std::string name() const = 0;
  virtual EngineOutput run(const TokenSeq& prefix, const TokenSeq& suffix) = 0;
};

class FimEngine final : public InfillEngine {
 public:
  FimEngine(LanguageModel& lm, SamplingParams sampling) : lm_(lm), sampling_(std::move(sampling)) {}
  std::string name() const override { return "fim"; }
  EngineOutput run(const TokenSeq& prefix, const TokenSeq& suffix) override;

 private:
  LanguageModel& lm_;
  SamplingParams sampling_;
};

// Two-sided engine; `base` supplies everything except prefix and suffix.
class MimEngine final : public InfillEngine {
 public:
  MimEngine(LanguageModel& fwd, LanguageModel& bwd, InfillRequest base) : fwd_(fwd), bwd_(bwd), base_(std::move(base)) {}
  std::string name() const override { return "mim"; }
  EngineOutput run(const TokenSeq& prefix, const TokenSeq& suffix) override;

 private:
  LanguageModel& fwd_;
  LanguageModel& bwd_;
  InfillRequest base_;
};

struct ExactMatchReport {
  double rate = 0.0;
  std::size_t matches = 0;
  std::size_t total = 0;
  double mean_rounds = 0.0;
};

void to_json(nlohmann::json& j, const ExactMatchReport& r);

// Byte-exact comparison of the produced middle with the reference; no
// whitespace normalization. Throws ContractError on an empty dataset.
ExactMatchReport exact_match_infill(InfillEngine& engine, const std::vector<InfillExample>& examples);

// One interior line of a random multi-line document is masked; prefix and
// suffix are clipped to `context` bytes on each side.
std::vector<InfillExample> line_infill_examples(const std::vector<TokenSeq>& docs, std::size_t count,
                                                std::uint64_t seed, std::size_t context = 96);

// ---------------------------------------------------------------------------
// Synthetic languages

enum class SyntheticTask { kBrackets, kArithmetic };

std::string to_string(SyntheticTask task);
SyntheticTask parse_synthetic_task(std::string_view text);

// Stack oracle over ()[]{}; any other byte makes the string unbalanced.
bool brackets_balanced(std::string_view s);
std::size_t bracket_depth(std::string_view s);

// Integer value of an expression over digits, + - * and parentheses with the
// usual precedence; nullopt if it does not parse.
std::optional<long long> evaluate_arithmetic(std::string_view expr);

// Documents of the form "<expr>=<value>" whose expression evaluates to value.
bool arithmetic_consistent(std::string_view doc);

bool synthetic_pass(SyntheticTask task, std::string_view full);

// Random walk with depth in [0, max_depth], 1..max_pairs bracket pairs.
std::string random_brackets(std::mt19937_64& rng, std::size_t max_depth = 6, std::size_t max_pairs = 16);
std::string random_arithmetic(std::mt19937_64& rng, std::size_t max_depth = 2);

std::vector<std::string> synthetic_corpus(SyntheticTask task, std::size_t count, std::uint64_t seed);

// Held-out tasks: a fresh document with a non-empty span masked (arithmetic
// masks inside the expression only).
std::vector<InfillExample> synthetic_examples(SyntheticTask task, std::size_t count, std::uint64_t seed);

struct SuiteReport {
  SyntheticTask task = SyntheticTask::kBrackets;
  double pass_rate = 0.0;
  double exact_match = 0.0;
  std::size_t passes = 0;
  std::size_t matches = 0;
  std::size_t total = 0;
  double mean_rounds = 0.0;
};

void to_json(nlohmann::json& j, const SuiteReport& r);

SuiteReport synthetic_suite(InfillEngine& engine, SyntheticTask task, const std::vector<InfillExample>& examples);

// ---------------------------------------------------------------------------
// Sequential-round benchmark

struct LatencyExample {
  std::size_t mim_rounds = 0;
  std::size_t fim_rounds = 0;
  std::size_t mim_generation_rounds = 0;
  std::size_t mim_verification_calls = 0;
  std::size_t accepted_tokens = 0;
  std::size_t proposed_tokens = 0;
  std::string mim_status;
  double mim_ms = 0.0;
  double fim_ms = 0.0;
};

struct LatencyReport {
  std::vector<LatencyExample> examples;
  std::size_t total_mim_rounds = 0;
  std::size_t total_fim_rounds = 0;
  double round_ratio = 0.0;        // total MIM rounds / total FIM rounds
  double acceptance_rate = 0.0;    // accepted / proposed verification tokens
  double joined_fraction = 0.0;
  double mim_ms = 0.0;
  double fim_ms = 0.0;
};

void to_json(nlohmann::json& j, const LatencyExample& e);
void to_json(nlohmann::json& j, const LatencyReport& r);

// Both paths run on every example; examples are processed in order.
LatencyReport step_count_benchmark(InfillEngine& mim, InfillEngine& fim, const std::vector<InfillExample>& examples);

}  // namespace mim
