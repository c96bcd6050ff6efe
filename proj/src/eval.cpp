#include "mim/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "mim/data.hpp"
#include "mim/errors.hpp"
#include "mim/training.hpp"

namespace mim {

void to_json(nlohmann::json& j, const ReportMeta& m) {
  j = {{"config_hash", m.config_hash}, {"checkpoint_hash", m.checkpoint_hash}, {"seed", m.seed}};
}

// ---------------------------------------------------------------------------
// Perplexity

std::vector<TokenSeq> eval_windows(const std::vector<TokenSeq>& docs, std::size_t max_len) {
  if (max_len == 0) throw ContractError("eval_windows: max_len must be positive");
  std::vector<TokenSeq> out;
  for (const auto& d : docs) {
    if (d.empty()) {
      out.emplace_back();
      continue;
    }
    for (std::size_t at = 0; at < d.size(); at += max_len) {
      const std::size_t end = std::min(d.size(), at + max_len);
      out.emplace_back(d.begin() + static_cast<std::ptrdiff_t>(at), d.begin() + static_cast<std::ptrdiff_t>(end));
    }
  }
  return out;
}

PerplexityReport perplexity(LanguageModel& lm, const std::vector<TokenSeq>& docs, Direction direction,
                            bool include_eos) {
  if (docs.empty()) throw ContractError("perplexity: empty split");
  if (lm.vocab_size() < vocab::kSize) throw ConfigError("perplexity: model vocabulary has no stream sentinels");
  const TokenId dir = direction == Direction::kLeftToRight ? vocab::kL2R : vocab::kR2L;
  const TokenSeq head{dir, vocab::kBos};
  // One slot is reserved for the EOS target of the final window.
  const std::size_t max_len = lm.context_limit() - head.size();
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& doc : docs) {
    const TokenSeq seq = direction == Direction::kLeftToRight ? doc : TokenSeq(doc.rbegin(), doc.rend());
    std::size_t at = 0;
    do {
      const std::size_t end = std::min(seq.size(), at + max_len);
      TokenSeq targets(seq.begin() + static_cast<std::ptrdiff_t>(at), seq.begin() + static_cast<std::ptrdiff_t>(end));
      const bool last = end == seq.size();
      if (last && include_eos) targets.push_back(vocab::kEos);
      if (!targets.empty()) {
        const std::span<const TokenId> block(targets.data(), targets.size() - 1);
        const auto dists = lm.batched_distributions(head, block);
        for (std::size_t i = 0; i < targets.size(); ++i) {
          total -= std::log(dists[i][static_cast<std::size_t>(targets[i])]);
        }
        count += targets.size();
      }
      at = end;
    } while (at < seq.size());
  }
  if (count == 0) throw ContractError("perplexity: split has no scored tokens");
  PerplexityReport r;
  r.tokens = count;
  r.mean_nll = total / static_cast<double>(count);
  r.perplexity = std::exp(r.mean_nll);
  return r;
}

AgreementReport held_out_agreement(const Parameters<float>& params, const std::vector<TokenSeq>& docs,
                                   std::size_t batch_tokens) {
  if (docs.empty()) throw ContractError("held_out_agreement: empty split");
  const std::size_t ctx = params.config.context_len;
  const auto windows = eval_windows(docs, ctx - kStreamHead);
  double nll_f = 0.0, nll_b = 0.0, tv = 0.0;
  std::size_t targets = 0, aligned = 0;
  std::size_t at = 0;
  while (at < windows.size()) {
    std::vector<TokenSeq> group;
    std::size_t tokens = 0;
    while (at < windows.size() && (group.empty() || tokens + windows[at].size() <= batch_tokens)) {
      tokens += windows[at].size();
      group.push_back(windows[at++]);
    }
    const MimBatch batch = make_mim_batch(group, ctx);
    const auto ev = mim_loss<float>(params, batch, 1.0, {}, false);
    const std::size_t t = batch.fwd.scored_tokens();
    nll_f += ev.breakdown.nll_fwd * static_cast<double>(t);
    nll_b += ev.breakdown.nll_bwd * static_cast<double>(t);
    if (!batch.alignment.empty()) tv += ev.breakdown.tv_mean * static_cast<double>(batch.alignment.size());
    targets += t;
    aligned += batch.alignment.size();
  }
  AgreementReport r;
  r.tokens = targets;
  r.nll_fwd = nll_f / static_cast<double>(targets);
  r.nll_bwd = nll_b / static_cast<double>(targets);
  r.tv_mean = aligned ? tv / static_cast<double>(aligned) : 0.0;
  r.perplexity_fwd = std::exp(r.nll_fwd);
  r.perplexity_bwd = std::exp(r.nll_bwd);
  return r;
}

void to_json(nlohmann::json& j, const PerplexityReport& r) {
  j = {{"perplexity", r.perplexity}, {"mean_nll", r.mean_nll}, {"tokens", r.tokens}};
}

void to_json(nlohmann::json& j, const AgreementReport& r) {
  j = {{"nll_fwd", r.nll_fwd},
       {"nll_bwd", r.nll_bwd},
       {"tv_mean", r.tv_mean},
       {"perplexity_fwd", r.perplexity_fwd},
       {"perplexity_bwd", r.perplexity_bwd},
       {"tokens", r.tokens}};
}

// ---------------------------------------------------------------------------
// Engines

EngineOutput FimEngine::run(const TokenSeq& prefix, const TokenSeq& suffix) {
  FimResult r = fim_infill(lm_, prefix, suffix, sampling_);
  EngineOutput out;
  out.middle = std::move(r.middle);
  out.rounds = r.rounds;
  out.status = "fim";
  return out;
}

EngineOutput MimEngine::run(const TokenSeq& prefix, const TokenSeq& suffix) {
  InfillRequest req = base_;
  req.prefix = prefix;
  req.suffix = suffix;
  InfillResult r = mim_infill(fwd_, bwd_, req);
  EngineOutput out;
  out.middle = r.middle;
  out.rounds = r.rounds;
  out.status = to_string(r.status);
  out.detail = std::move(r);
  return out;
}

void to_json(nlohmann::json& j, const ExactMatchReport& r) {
  j = {{"exact_match", r.rate}, {"matches", r.matches}, {"total", r.total}, {"mean_rounds", r.mean_rounds}};
}

ExactMatchReport exact_match_infill(InfillEngine& engine, const std::vector<InfillExample>& examples) {
  if (examples.empty()) throw ContractError("exact_match_infill: empty dataset");
  ExactMatchReport r;
  std::size_t rounds = 0;
  for (const auto& ex : examples) {
    const EngineOutput out = engine.run(ex.prefix, ex.suffix);
    if (out.middle == ex.middle) ++r.matches;
    rounds += out.rounds;
  }
  r.total = examples.size();
  r.rate = static_cast<double>(r.matches) / static_cast<double>(r.total);
  r.mean_rounds = static_cast<double>(rounds) / static_cast<double>(r.total);
  return r;
}

std::vector<InfillExample> line_infill_examples(const std::vector<TokenSeq>& docs, std::size_t count,
                                                std::uint64_t seed, std::size_t context) {
  // (doc, line start, line end) of every non-empty interior line.
  struct Line {
    std::size_t doc, begin, end;
  };
  std::vector<Line> lines;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    const TokenSeq& t = docs[d];
    std::vector<std::size_t> breaks;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] == '\n') breaks.push_back(i);
    }
    for (std::size_t b = 0; b + 1 < breaks.size(); ++b) {
      if (breaks[b + 1] > breaks[b] + 1) lines.push_back({d, breaks[b] + 1, breaks[b + 1]});
    }
  }
  std::vector<InfillExample> out;
  if (lines.empty()) return out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, lines.size() - 1);
  for (std::size_t i = 0; i < count; ++i) {
    const Line& l = lines[pick(rng)];
    const TokenSeq& t = docs[l.doc];
    const std::size_t pb = l.begin > context ? l.begin - context : 0;
    const std::size_t se = std::min(t.size(), l.end + context);
    InfillExample ex;
    ex.prefix.assign(t.begin() + static_cast<std::ptrdiff_t>(pb), t.begin() + static_cast<std::ptrdiff_t>(l.begin));
    ex.middle.assign(t.begin() + static_cast<std::ptrdiff_t>(l.begin), t.begin() + static_cast<std::ptrdiff_t>(l.end));
    ex.suffix.assign(t.begin() + static_cast<std::ptrdiff_t>(l.end), t.begin() + static_cast<std::ptrdiff_t>(se));
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic languages

std::string to_string(SyntheticTask task) {
  return task == SyntheticTask::kBrackets ? "brackets" : "arithmetic";
}

SyntheticTask parse_synthetic_task(std::string_view text) {
  if (text == "brackets" || text == "balanced-brackets") return SyntheticTask::kBrackets;
  if (text == "arithmetic" || text == "arithmetic-eval") return SyntheticTask::kArithmetic;
  throw ConfigError("task: expected brackets or arithmetic, got '" + std::string(text) + "'");
}

bool brackets_balanced(std::string_view s) {
  std::string stack;
  for (char c : s) {
    switch (c) {
      case '(': stack.push_back(')'); break;
      case '[': stack.push_back(']'); break;
      case '{': stack.push_back('}'); break;
      case ')':
      case ']':
      case '}':
        if (stack.empty() || stack.back() != c) return false;
        stack.pop_back();
        break;
      default: return false;
    }
  }
  return stack.empty();
}

std::size_t bracket_depth(std::string_view s) {
  std::size_t depth = 0, best = 0;
  for (char c : s) {
    if (c == '(' || c == '[' || c == '{') best = std::max(best, ++depth);
    if ((c == ')' || c == ']' || c == '}') && depth > 0) --depth;
  }
  return best;
}

namespace {

class ArithmeticParser {
 public:
  explicit ArithmeticParser(std::string_view s) : s_(s) {}

  std::optional<long long> parse() {
    auto v = expr();
    if (!v || pos_ != s_.size()) return std::nullopt;
    return v;
  }

 private:
  std::optional<long long> expr() {
    auto v = term();
    while (v && pos_ < s_.size() && (s_[pos_] == '+' || s_[pos_] == '-')) {
      const char op = s_[pos_++];
      auto r = term();
      if (!r) return std::nullopt;
      long long out;
      if (op == '+' ? __builtin_add_overflow(*v, *r, &out) : __builtin_sub_overflow(*v, *r, &out)) return std::nullopt;
      v = out;
    }
    return v;
  }

  std::optional<long long> term() {
    auto v = factor();
    while (v && pos_ < s_.size() && s_[pos_] == '*') {
      ++pos_;
      auto r = factor();
      if (!r) return std::nullopt;
      long long out;
      if (__builtin_mul_overflow(*v, *r, &out)) return std::nullopt;
      v = out;
    }
    return v;
  }

  std::optional<long long> factor() {
    if (pos_ >= s_.size()) return std::nullopt;
    if (s_[pos_] == '(') {
      ++pos_;
      auto v = expr();
      if (!v || pos_ >= s_.size() || s_[pos_] != ')') return std::nullopt;
      ++pos_;
      return v;
    }
    const std::size_t start = pos_;
    long long v = 0;
    while (pos_ < s_.size() && s_[pos_] >= '0' && s_[pos_] <= '9') {
      if (pos_ - start >= 15) return std::nullopt;
      v = v * 10 + (s_[pos_++] - '0');
    }
    if (pos_ == start) return std::nullopt;
    return v;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

std::optional<long long> parse_integer(std::string_view s) {
  bool negative = false;
  if (!s.empty() && s[0] == '-') {
    negative = true;
    s.remove_prefix(1);
  }
  if (s.empty() || s.size() > 15) return std::nullopt;
  long long v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
    v = v * 10 + (c - '0');
  }
  return negative ? -v : v;
}

}  // namespace

std::optional<long long> evaluate_arithmetic(std::string_view expr) { return ArithmeticParser(expr).parse(); }

bool arithmetic_consistent(std::string_view doc) {
  const std::size_t eq = doc.find('=');
  if (eq == std::string_view::npos || doc.find('=', eq + 1) != std::string_view::npos) return false;
  const auto lhs = evaluate_arithmetic(doc.substr(0, eq));
  const auto rhs = parse_integer(doc.substr(eq + 1));
  return lhs && rhs && *lhs == *rhs;
}

bool synthetic_pass(SyntheticTask task, std::string_view full) {
  return task == SyntheticTask::kBrackets ? brackets_balanced(full) : arithmetic_consistent(full);
}

std::string random_brackets(std::mt19937_64& rng, std::size_t max_depth, std::size_t max_pairs) {
  if (max_depth == 0 || max_pairs == 0) throw ContractError("random_brackets: depth and pairs must be positive");
  const std::size_t pairs = std::uniform_int_distribution<std::size_t>(1, max_pairs)(rng);
  std::string s;
  std::size_t depth = 0, opened = 0;
  std::bernoulli_distribution coin(0.5);
  while (s.size() < 2 * pairs) {
    const bool can_open = opened < pairs && depth < max_depth;
    const bool can_close = depth > 0;
    const bool open = can_open && (!can_close || coin(rng));
    if (open) {
      s.push_back('(');
      ++depth;
      ++opened;
    } else {
      s.push_back(')');
      --depth;
    }
  }
  return s;
}

namespace {

std::string random_expr(std::mt19937_64& rng, std::size_t depth) {
  std::uniform_int_distribution<int> digit(0, 9);
  if (depth == 0 || std::bernoulli_distribution(0.35)(rng)) return std::to_string(digit(rng));
  static constexpr char kOps[] = {'+', '-', '*'};
  const char op = kOps[std::uniform_int_distribution<int>(0, 2)(rng)];
  auto side = [&] {
    std::string e = random_expr(rng, depth - 1);
    if (e.size() > 1 && std::bernoulli_distribution(0.5)(rng)) e = "(" + e + ")";
    return e;
  };
  std::string l = side();
  std::string r = side();
  return l + op + r;
}

}  // namespace

std::string random_arithmetic(std::mt19937_64& rng, std::size_t max_depth) {
  const std::string e = random_expr(rng, max_depth);
  return e + "=" + std::to_string(*evaluate_arithmetic(e));
}

std::vector<std::string> synthetic_corpus(SyntheticTask task, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::string> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(task == SyntheticTask::kBrackets ? random_brackets(rng) : random_arithmetic(rng));
  }
  return out;
}

std::vector<InfillExample> synthetic_examples(SyntheticTask task, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<InfillExample> out;
  out.reserve(count);
  while (out.size() < count) {
    const std::string doc = task == SyntheticTask::kBrackets ? random_brackets(rng) : random_arithmetic(rng);
    const std::size_t span = task == SyntheticTask::kBrackets ? doc.size() : doc.find('=');
    if (span < 1) continue;
    const std::size_t len = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(span, 8))(rng);
    const std::size_t at = std::uniform_int_distribution<std::size_t>(0, span - len)(rng);
    const TokenSeq ids = encode(doc);
    InfillExample ex;
    ex.prefix.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(at));
    ex.middle.assign(ids.begin() + static_cast<std::ptrdiff_t>(at), ids.begin() + static_cast<std::ptrdiff_t>(at + len));
    ex.suffix.assign(ids.begin() + static_cast<std::ptrdiff_t>(at + len), ids.end());
    out.push_back(std::move(ex));
  }
  return out;
}

void to_json(nlohmann::json& j, const SuiteReport& r) {
  j = {{"task", to_string(r.task)}, {"pass_rate", r.pass_rate}, {"exact_match", r.exact_match},
       {"passes", r.passes},        {"matches", r.matches},     {"total", r.total},
       {"mean_rounds", r.mean_rounds}};
}

SuiteReport synthetic_suite(InfillEngine& engine, SyntheticTask task, const std::vector<InfillExample>& examples) {
  if (examples.empty()) throw ContractError("synthetic_suite: empty dataset");
  SuiteReport r;
  r.task = task;
  std::size_t rounds = 0;
  for (const auto& ex : examples) {
    const EngineOutput out = engine.run(ex.prefix, ex.suffix);
    TokenSeq full = ex.prefix;
    full.insert(full.end(), out.middle.begin(), out.middle.end());
    full.insert(full.end(), ex.suffix.begin(), ex.suffix.end());
    const bool bytes_only = std::ranges::all_of(out.middle, [](TokenId t) { return vocab::is_byte(t); });
    if (bytes_only && synthetic_pass(task, decode(full))) ++r.passes;
    if (out.middle == ex.middle) ++r.matches;
    rounds += out.rounds;
  }
  r.total = examples.size();
  r.pass_rate = static_cast<double>(r.passes) / static_cast<double>(r.total);
  r.exact_match = static_cast<double>(r.matches) / static_cast<double>(r.total);
  r.mean_rounds = static_cast<double>(rounds) / static_cast<double>(r.total);
  return r;
}

// ---------------------------------------------------------------------------
// Sequential-round benchmark

void to_json(nlohmann::json& j, const LatencyExample& e) {
  j = {{"mim_rounds", e.mim_rounds},
       {"fim_rounds", e.fim_rounds},
       {"mim_generation_rounds", e.mim_generation_rounds},
       {"mim_verification_calls", e.mim_verification_calls},
       {"accepted_tokens", e.accepted_tokens},
       {"proposed_tokens", e.proposed_tokens},
       {"mim_status", e.mim_status},
       {"mim_ms", e.mim_ms},
       {"fim_ms", e.fim_ms}};
}

void to_json(nlohmann::json& j, const LatencyReport& r) {
  j = {{"examples", r.examples},
       {"total_mim_rounds", r.total_mim_rounds},
       {"total_fim_rounds", r.total_fim_rounds},
       {"round_ratio", r.round_ratio},
       {"acceptance_rate", r.acceptance_rate},
       {"joined_fraction", r.joined_fraction},
       {"mim_ms", r.mim_ms},
       {"fim_ms", r.fim_ms}};
}

LatencyReport step_count_benchmark(InfillEngine& mim, InfillEngine& fim, const std::vector<InfillExample>& examples) {
  using clock = std::chrono::steady_clock;
  auto elapsed = [](clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(clock::now() - t0).count();
  };
  LatencyReport r;
  std::size_t accepted = 0, proposed = 0, joined = 0;
  for (const auto& ex : examples) {
    LatencyExample e;
    auto t0 = clock::now();
    const EngineOutput m = mim.run(ex.prefix, ex.suffix);
    e.mim_ms = elapsed(t0);
    t0 = clock::now();
    const EngineOutput f = fim.run(ex.prefix, ex.suffix);
    e.fim_ms = elapsed(t0);
    e.mim_rounds = m.rounds;
    e.fim_rounds = f.rounds;
    e.mim_status = m.status;
    if (m.detail) {
      e.mim_generation_rounds = m.detail->generation_rounds;
      e.mim_verification_calls = m.detail->verification_calls;
      for (const auto& v : m.detail->verifications) {
        e.accepted_tokens += v.accepted;
        e.proposed_tokens += v.proposed;
      }
      if (m.detail->status == InfillStatus::kJoinedVerified) ++joined;
    }
    accepted += e.accepted_tokens;
    proposed += e.proposed_tokens;
    r.total_mim_rounds += e.mim_rounds;
    r.total_fim_rounds += e.fim_rounds;
    r.mim_ms += e.mim_ms;
    r.fim_ms += e.fim_ms;
    r.examples.push_back(std::move(e));
  }
  r.round_ratio = r.total_fim_rounds ? static_cast<double>(r.total_mim_rounds) / static_cast<double>(r.total_fim_rounds)
                                     : 0.0;
  r.acceptance_rate = proposed ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0;
  r.joined_fraction = examples.empty() ? 0.0 : static_cast<double>(joined) / static_cast<double>(examples.size());
  return r;
}

}  // namespace mim
