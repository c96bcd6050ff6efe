#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>
#include <random>

#include "mim/errors.hpp"
#include "mim/inference.hpp"

using namespace mim;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 32;
  c.d_head = 8;
  c.context_len = 64;
  return c;
}

std::shared_ptr<const Parameters<float>> small_model(std::uint64_t seed) {
  return std::make_shared<const Parameters<float>>(init_parameters<float>(small_config(), seed));
}

TokenSeq reversed(const TokenSeq& s) { return TokenSeq(s.rbegin(), s.rend()); }

TokenSeq cat(TokenSeq a, const TokenSeq& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

// Distinct tokens so that no accidental n-gram repeats.
TokenSeq distinct_tokens(std::size_t n, TokenId start) {
  TokenSeq t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<TokenId>(start + static_cast<TokenId>(i));
  return t;
}

struct Agreeing {
  ScriptedLM fwd;
  ScriptedLM bwd;
  Agreeing(const TokenSeq& doc, double conf = 0.9) : fwd(doc, conf), bwd(reversed(doc), conf) {}
};

// All (a, b) with X[a-n, a) == Y[b, b+n), stitched, keeping only those whose
// stitched text starts with the prefix and ends with the suffix.
struct BruteMeet {
  std::size_t a, b;
  TokenSeq middle;
};

std::vector<BruteMeet> brute_meets(const TokenSeq& p, const TokenSeq& f, const TokenSeq& bl, const TokenSeq& s,
                                   std::size_t n) {
  const TokenSeq x = cat(p, f);
  const TokenSeq y = cat(bl, s);
  std::vector<BruteMeet> out;
  for (std::size_t a = n; a <= x.size(); ++a) {
    for (std::size_t b = 0; b + n <= y.size(); ++b) {
      bool eq = true;
      for (std::size_t k = 0; k < n; ++k) eq = eq && x[a - n + k] == y[b + k];
      if (!eq) continue;
      TokenSeq st(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(a));
      st.insert(st.end(), y.begin() + static_cast<std::ptrdiff_t>(b + n), y.end());
      if (st.size() < p.size() + s.size()) continue;
      if (!std::equal(p.begin(), p.end(), st.begin())) continue;
      if (!std::equal(s.begin(), s.end(), st.end() - static_cast<std::ptrdiff_t>(s.size()))) continue;
      out.push_back({a, b, TokenSeq(st.begin() + static_cast<std::ptrdiff_t>(p.size()),
                                    st.end() - static_cast<std::ptrdiff_t>(s.size()))});
    }
  }
  return out;
}

}  // namespace

TEST_CASE("nucleus truncation and sampling") {
  const std::vector<double> p{0.5, 0.3, 0.15, 0.05};
  const Distribution q = nucleus(p, 0.9, 1.0);
  CHECK(q[0] == doctest::Approx(10.0 / 19.0).epsilon(1e-12));
  CHECK(q[1] == doctest::Approx(6.0 / 19.0).epsilon(1e-12));
  CHECK(q[2] == doctest::Approx(3.0 / 19.0).epsilon(1e-12));
  CHECK(q[3] == 0.0);

  SamplingParams sp;
  sp.top_p = 0.9;
  sp.temperature = 1.0;
  std::mt19937_64 rng(7);
  std::vector<int> counts(4, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(top_p_sample(p, sp, rng))];
  CHECK(counts[3] == 0);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(counts[i] / double(draws) - q[i]) < 0.01);

  // Temperature 0.5 squares then renormalizes.
  const std::vector<double> r{0.5, 0.3, 0.2};
  const Distribution t = nucleus(r, 1.0, 0.5);
  const double z = 0.25 + 0.09 + 0.04;
  CHECK(t[0] == doctest::Approx(0.25 / z));
  CHECK(t[1] == doctest::Approx(0.09 / z));
  CHECK(t[2] == doctest::Approx(0.04 / z));

  SamplingParams greedy;
  greedy.temperature = 0.0;
  CHECK(top_p_sample(std::vector<double>{0.2, 0.4, 0.4}, greedy, rng) == 1);
  CHECK_THROWS_AS(nucleus(p, 0.0, 1.0), ContractError);
}

TEST_CASE("generation with a scripted model") {
  const TokenSeq doc = encode("hello");
  ScriptedLM lm(doc, 0.8);
  SamplingParams sp;
  std::mt19937_64 rng(0);
  const TokenSeq head{vocab::kL2R, vocab::kBos};
  const Generation g = generate(lm, head, sp, rng);
  CHECK(g.tokens == doc);
  CHECK(g.reason == StopReason::kStopToken);
  REQUIRE(g.stop_token);
  CHECK(*g.stop_token == vocab::kEos);
  CHECK(lm.calls() == doc.size() + 1);

  // Log-probs agree with rescoring the emitted sequence in one pass.
  const auto dists = lm.batched_distributions(head, g.tokens);
  for (std::size_t i = 0; i < g.tokens.size(); ++i) {
    CHECK(g.log_probs[i] == doctest::Approx(std::log(dists[i][static_cast<std::size_t>(g.tokens[i])])));
  }

  sp.max_tokens = 3;
  CHECK(generate(lm, head, sp, rng).tokens.size() == 3);

  ScriptedLM tight(doc, 0.8, 2, std::nullopt, vocab::kSize, 4);
  CHECK_THROWS_AS(generate(tight, TokenSeq(5, 1), sp, rng), LengthError);
  sp.max_tokens = 100;
  const Generation full = generate(tight, head, sp, rng);
  CHECK(full.reason == StopReason::kContextFull);
  CHECK(full.tokens.size() == 3);
}

TEST_CASE("transformer model reuses its cache correctly") {
  auto params = small_model(3);
  TransformerLM lm(params);
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> id(0, 255);
  TokenSeq ctx{vocab::kL2R, vocab::kBos};
  for (int i = 0; i < 20; ++i) ctx.push_back(id(rng));

  const TensorF full = forward_pass(*params, ctx);
  for (std::size_t len = 3; len <= ctx.size(); len += 4) {
    const Distribution d = lm.next_distribution(std::span<const TokenId>(ctx).first(len));
    const auto row = full.row(len - 1);
    double top = row[0];
    for (float v : row) top = std::max(top, double(v));
    double z = 0.0;
    for (float v : row) z += std::exp(double(v) - top);
    for (std::size_t k = 0; k < d.size(); k += 17) CHECK(d[k] == doctest::Approx(std::exp(row[k] - top) / z).epsilon(1e-4));
  }

  // A branch off an earlier position must not see stale cache entries.
  TokenSeq branch(ctx.begin(), ctx.begin() + 10);
  branch.push_back(7);
  const Distribution db = lm.next_distribution(branch);
  TransformerLM fresh(params);
  const Distribution df = fresh.next_distribution(branch);
  for (std::size_t k = 0; k < db.size(); ++k) CHECK(db[k] == doctest::Approx(df[k]).epsilon(1e-4));

  lm.reset_counters();
  const TokenSeq block(ctx.begin() + 12, ctx.end());
  const auto rows = lm.batched_distributions(std::span<const TokenId>(ctx).first(12), block);
  CHECK(lm.calls() == 1);
  CHECK(lm.batched_calls() == 1);
  REQUIRE(rows.size() == block.size() + 1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Distribution d = fresh.next_distribution(std::span<const TokenId>(ctx).first(12 + i));
    for (std::size_t k = 0; k < d.size(); k += 13) CHECK(rows[i][k] == doctest::Approx(d[k]).epsilon(1e-4));
  }
  CHECK_THROWS_AS(lm.next_distribution(TokenSeq(65, 1)), LengthError);
}

TEST_CASE("fim infill") {
  const TokenSeq middle = encode("fox jumps");
  ScriptedLM lm(middle, 0.9, 0, vocab::kMid);
  const FimResult r = fim_infill(lm, encode("the "), encode(" over"), SamplingParams{});
  CHECK(r.middle == middle);
  CHECK(r.rounds == middle.size());

  ScriptedLM empty(TokenSeq{}, 0.9, 0, vocab::kMid);
  const FimResult e = fim_infill(empty, encode("a"), encode("b"), SamplingParams{});
  CHECK(e.middle.empty());
  CHECK(e.rounds == 1);

  ModelConfig toy = small_config();
  toy.vocab_size = 16;
  TransformerLM small(std::make_shared<const Parameters<float>>(init_parameters<float>(toy, 1)));
  CHECK_THROWS_AS(fim_infill(small, TokenSeq{1}, TokenSeq{2}, SamplingParams{}), ConfigError);
}

TEST_CASE("meet detection examples") {
  const TokenSeq p{1, 2};
  const TokenSeq s{40, 41};
  const TokenSeq f{5, 6, 7, 8};
  const TokenSeq b{7, 8, 9};
  const auto m = detect_meet(p, f, b, s, 2);
  REQUIRE(m);
  CHECK(m->side == MeetSide::kForward);
  CHECK(m->bwd_anchor == 0);
  CHECK(m->ngram == TokenSeq{7, 8});
  CHECK(candidate_middle(f, b, *m) == TokenSeq{5, 6, 7, 8, 9});

  // Word-level sentence: the forward side reaches "over", which the backward
  // side produced first.
  std::map<std::string, TokenId> ids;
  auto words = [&](std::initializer_list<const char*> ws) {
    TokenSeq out;
    for (const char* w : ws) out.push_back(ids.try_emplace(w, static_cast<TokenId>(ids.size())).first->second);
    return out;
  };
  const TokenSeq wp = words({"The", "quick"});
  const TokenSeq wf = words({"brown", "fox", "jumps", "over"});
  const TokenSeq wb = words({"over", "the", "lazy"});
  const TokenSeq ws = words({"dog"});
  const auto wm = detect_meet(wp, wf, wb, ws, 1);
  REQUIRE(wm);
  CHECK(candidate_middle(wf, wb, *wm) == words({"brown", "fox", "jumps", "over", "the", "lazy"}));

  // Boundary: the forward side's last n tokens are the start of the suffix.
  const auto bm = detect_meet(p, TokenSeq{5, 40, 41}, TokenSeq{}, s, 2);
  REQUIRE(bm);
  CHECK(bm->bwd_anchor == 0);
  CHECK(candidate_middle(TokenSeq{5, 40, 41}, TokenSeq{}, *bm) == TokenSeq{5});

  // Backward boundary: the backward side's newest tokens end the prefix.
  const auto km = detect_meet(p, TokenSeq{5}, TokenSeq{1, 2, 9}, s, 2);
  REQUIRE(km);
  CHECK(km->side == MeetSide::kBackward);
  CHECK(km->fwd_end == 2);
  CHECK(candidate_middle(TokenSeq{5}, TokenSeq{1, 2, 9}, *km) == TokenSeq{9});

  CHECK_FALSE(detect_meet(p, TokenSeq{5, 6}, TokenSeq{7, 8}, s, 2));
  CHECK_THROWS_AS(detect_meet(p, f, b, s, 0), ContractError);
}

TEST_CASE("meet detection agrees with brute force") {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> tok(0, 2);
  std::uniform_int_distribution<int> len(0, 6);
  int seen = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    auto draw = [&] {
      TokenSeq t(static_cast<std::size_t>(len(rng)));
      for (auto& x : t) x = tok(rng);
      return t;
    };
    const TokenSeq p = draw(), f = draw(), b = draw(), s = draw();
    const std::size_t n = static_cast<std::size_t>(1 + trial % 3);
    const auto all = brute_meets(p, f, b, s, n);
    const std::size_t xa = p.size() + f.size();

    // Forward class: a = |X|, b within B or at its end; smallest b.
    const BruteMeet* want_f = nullptr;
    for (const auto& m : all) {
      if (m.a == xa && m.b <= b.size() && (!want_f || m.b < want_f->b)) want_f = &m;
    }
    // Backward class: b = 0, a at or after the prefix end; largest a.
    const BruteMeet* want_b = nullptr;
    for (const auto& m : all) {
      if (m.b == 0 && m.a >= p.size() && (!want_b || m.a > want_b->a)) want_b = &m;
    }

    const auto fm = forward_meets(p, f, b, s, n);
    const auto bm = backward_meets(p, f, b, s, n);
    REQUIRE(fm.empty() == (want_f == nullptr));
    REQUIRE(bm.empty() == (want_b == nullptr));
    if (want_f) {
      CHECK(fm.front().bwd_anchor == want_f->b);
      CHECK(candidate_middle(f, b, fm.front()) == want_f->middle);
      ++seen;
    }
    if (want_b) {
      CHECK(bm.front().fwd_end == want_b->a);
      CHECK(candidate_middle(f, b, bm.front()) == want_b->middle);
    }
    for (const auto& c : fm) CHECK(std::ranges::any_of(all, [&](const BruteMeet& m) { return m.a == c.fwd_end && m.b == c.bwd_anchor; }));
    for (const auto& c : bm) CHECK(std::ranges::any_of(all, [&](const BruteMeet& m) { return m.a == c.fwd_end && m.b == c.bwd_anchor; }));

    const auto d = detect_meet(p, f, b, s, n);
    CHECK(d.has_value() == (want_f || want_b));
    if (d && want_f) CHECK(d->side == MeetSide::kForward);
  }
  CHECK(seen > 100);
}

TEST_CASE("parallel verification") {
  const TokenSeq doc = distinct_tokens(8, 10);
  ScriptedLM lm(doc, 0.7);
  const TokenSeq ctx{vocab::kL2R, vocab::kBos, 10, 11};
  TokenSeq cand{12, 13, 99, 15};
  std::vector<double> lps;
  const VerifyReport r = parallel_verify(lm, ctx, cand, VerifyCriterion::kGreedyExact, 0.0, &lps);
  CHECK(r.accepted == 2);
  CHECK(r.proposed == 4);
  CHECK_FALSE(r.full());
  CHECK(lm.calls() == 1);
  CHECK(lm.batched_calls() == 1);
  CHECK(lps.size() == 2);
  CHECK(lps[0] == doctest::Approx(std::log(0.7)));

  // Oracle: one position at a time.
  std::size_t k = 0;
  TokenSeq seq = ctx;
  ScriptedLM oracle(doc, 0.7);
  for (TokenId t : cand) {
    const Distribution d = oracle.next_distribution(seq);
    if (std::max_element(d.begin(), d.end()) - d.begin() != t) break;
    ++k;
    seq.push_back(t);
  }
  CHECK(r.accepted == k);

  lm.reset_counters();
  const VerifyReport e = parallel_verify(lm, ctx, TokenSeq{}, VerifyCriterion::kGreedyExact);
  CHECK(e.accepted == 0);
  CHECK(e.full());
  CHECK(lm.calls() == 0);

  // Threshold: the off-script token has probability 0.3 / 263, about 1.14e-3.
  CHECK(parallel_verify(lm, ctx, cand, VerifyCriterion::kThreshold, 1e-3).accepted == 4);
  CHECK(parallel_verify(lm, ctx, cand, VerifyCriterion::kThreshold, 2e-3).accepted == 2);
  CHECK(parallel_verify(lm, ctx, cand, VerifyCriterion::kThreshold, 0.5).accepted == 2);
  CHECK(parallel_verify(lm, ctx, cand, VerifyCriterion::kThreshold, 0.8).accepted == 0);
}

TEST_CASE("two-sided infill with agreeing scripted models") {
  const TokenSeq p = distinct_tokens(5, 100);
  const TokenSeq s = distinct_tokens(5, 200);
  const TokenSeq t = distinct_tokens(10, 0);
  Agreeing lms(cat(cat(p, t), s));
  InfillRequest req;
  req.prefix = p;
  req.suffix = s;
  req.ngram = 2;
  req.budget = 64;
  const InfillResult r = mim_infill(lms.fwd, lms.bwd, req);
  CHECK(r.status == InfillStatus::kJoinedVerified);
  CHECK(r.middle == t);
  CHECK(r.generation_rounds == 6);
  CHECK(r.verification_calls == 1);
  CHECK(r.rounds == 7);
  REQUIRE(r.meet);
  CHECK(r.meet->side == MeetSide::kForward);

  for (std::size_t n = 1; n <= 4; ++n) {
    for (std::size_t m = 1; m <= 40; ++m) {
      const TokenSeq mid = distinct_tokens(m, 0);
      Agreeing a(cat(cat(p, mid), s));
      req.ngram = n;
      const InfillResult out = mim_infill(a.fwd, a.bwd, req);
      CHECK(out.middle == mid);
      if (m >= n) {
        CHECK(out.status == InfillStatus::kJoinedVerified);
        CHECK(out.rounds <= (m + n + 1) / 2 + 1);
      }
      CHECK(out.rounds >= 1);
    }
  }

  // Agreeing models with backward verification switched on still join.
  req.ngram = 3;
  req.backward_verification = true;
  Agreeing b(cat(cat(p, t), s));
  CHECK(mim_infill(b.fwd, b.bwd, req).middle == t);
}

TEST_CASE("joins verified through the suffix") {
  const TokenSeq p = distinct_tokens(5, 100);
  const TokenSeq s = distinct_tokens(5, 200);
  const TokenSeq t = distinct_tokens(10, 0);
  const TokenSeq other = distinct_tokens(5, 50);
  InfillRequest req;
  req.prefix = p;
  req.suffix = s;
  req.ngram = 2;
  req.budget = 16;
  req.verify_suffix = true;
  req.suffix_end = vocab::kEos;

  // Scripts that agree through the end of the document: the tail, the suffix
  // and EOS are checked in the single verification call.
  {
    Agreeing a(cat(cat(p, t), s));
    const InfillResult r = mim_infill(a.fwd, a.bwd, req);
    CHECK(r.status == InfillStatus::kJoinedVerified);
    CHECK(r.middle == t);
    REQUIRE(r.verifications.size() == 1);
    REQUIRE(r.meet);
    CHECK(r.verifications[0].proposed == t.size() - r.meet->fwd_len + s.size() + 1);
  }
  // The forward model expects a different continuation after the middle.
  for (const auto criterion : {VerifyCriterion::kGreedyExact, VerifyCriterion::kThreshold}) {
    ScriptedLM f(cat(cat(p, t), other)), b(reversed(cat(cat(p, t), s)));
    req.criterion = criterion;
    const InfillResult r = mim_infill(f, b, req);
    CHECK(r.status != InfillStatus::kJoinedVerified);
    // Fast-forward stops at the end of the backward tail.
    CHECK(r.fwd_tokens <= req.budget);
    req.verify_suffix = false;
    ScriptedLM f2(cat(cat(p, t), other)), b2(reversed(cat(cat(p, t), s)));
    CHECK(mim_infill(f2, b2, req).status == InfillStatus::kJoinedVerified);
    req.verify_suffix = true;
  }
  req.criterion = VerifyCriterion::kGreedyExact;
  // The document goes on after the suffix, so EOS is rejected.
  {
    ScriptedLM f(cat(cat(cat(p, t), s), other)), b(reversed(cat(cat(p, t), s)));
    CHECK(mim_infill(f, b, req).status != InfillStatus::kJoinedVerified);
    req.suffix_end.reset();
    ScriptedLM f2(cat(cat(cat(p, t), s), other)), b2(reversed(cat(cat(p, t), s)));
    const InfillResult r = mim_infill(f2, b2, req);
    CHECK(r.status == InfillStatus::kJoinedVerified);
    CHECK(r.middle == t);
  }
}

TEST_CASE("sentence infill with byte scripts") {
  const std::string sentence = "The quick brown fox jumps over the lazy dog";
  Agreeing lms(encode(sentence));
  InfillRequest req;
  req.prefix = encode("The quick ");
  req.suffix = encode(" dog");
  const InfillResult r = mim_infill(lms.fwd, lms.bwd, req);
  CHECK(r.status == InfillStatus::kJoinedVerified);
  CHECK(decode(r.middle) == "brown fox jumps over the lazy");
}

TEST_CASE("fallback when the sides never meet") {
  const TokenSeq fa(20, 'a');
  const TokenSeq fb(20, 'b');
  InfillRequest req;
  req.prefix = encode("x");
  req.suffix = encode("y");
  req.budget = 8;
  {
    ScriptedLM f(cat(req.prefix, fa), 0.9), b(reversed(cat(fb, req.suffix)), 0.6);
    const InfillResult r = mim_infill(f, b, req);
    CHECK(r.status == InfillStatus::kForwardFallback);
    CHECK(r.middle == TokenSeq(8, 'a'));
    CHECK(r.generation_rounds == 8);
    CHECK(r.verification_calls == 0);
    CHECK(r.fwd_mean_log_prob == doctest::Approx(std::log(0.9)));
    CHECK(r.bwd_mean_log_prob == doctest::Approx(std::log(0.6)));
  }
  {
    ScriptedLM f(cat(req.prefix, fa), 0.6), b(reversed(cat(fb, req.suffix)), 0.9);
    const InfillResult r = mim_infill(f, b, req);
    CHECK(r.status == InfillStatus::kBackwardFallback);
    CHECK(r.middle == TokenSeq(8, 'b'));
  }
  {
    // Equal confidence goes to the forward side.
    ScriptedLM f(cat(req.prefix, fa), 0.7), b(reversed(cat(fb, req.suffix)), 0.7);
    CHECK(mim_infill(f, b, req).status == InfillStatus::kForwardFallback);
  }
  {
    // An empty side counts as minus infinity.
    ScriptedLM f(req.prefix, 0.9), b(reversed(cat(fb, req.suffix)), 0.1);
    const InfillResult r = mim_infill(f, b, req);
    CHECK(r.status == InfillStatus::kBackwardFallback);
    CHECK(r.fwd_tokens == 0);
  }
  ScriptedLM f(fa), b(fb);
  req.budget = 0;
  CHECK_THROWS_AS(mim_infill(f, b, req), ContractError);
}

TEST_CASE("joined results match plain greedy decoding") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> id(97, 100);
  int joined = 0;
  for (int trial = 0; trial < 40; ++trial) {
    auto params_t = small_model(static_cast<std::uint64_t>(trial));
    TransformerLM f(params_t), b(params_t);
    InfillRequest req;
    for (int i = 0; i < 6; ++i) req.prefix.push_back(id(rng));
    for (int i = 0; i < 6; ++i) req.suffix.push_back(id(rng));
    req.ngram = 1 + static_cast<std::size_t>(trial % 2);
    req.budget = 16;
    const InfillResult r = mim_infill(f, b, req);
    if (r.status != InfillStatus::kJoinedVerified) continue;
    ++joined;
    TransformerLM plain(params_t);
    SamplingParams sp;
    sp.max_tokens = r.middle.size();
    sp.stop.clear();
    std::mt19937_64 g(0);
    const TokenSeq ctx = cat(TokenSeq{vocab::kL2R, vocab::kBos}, req.prefix);
    CHECK(generate(plain, ctx, sp, g).tokens == r.middle);
  }
  CHECK(joined > 0);
}

TEST_CASE("concurrent rounds are deterministic") {
  auto params = small_model(8);
  InfillRequest req;
  req.prefix = encode("int f(");
  req.suffix = encode(") {}");
  req.budget = 12;
  req.ngram = 2;
  req.sampling.temperature = 0.8;
  req.sampling.top_p = 0.95;
  req.sampling.seed = 1234;
  auto run = [&](bool concurrent) {
    TransformerLM f(params), b(params);
    InfillRequest r = req;
    r.concurrent = concurrent;
    return mim_infill(f, b, r);
  };
  const InfillResult a = run(false);
  const InfillResult c = run(true);
  const InfillResult d = run(true);
  CHECK(a.middle == c.middle);
  CHECK(c.middle == d.middle);
  CHECK(a.rounds == c.rounds);
  CHECK(a.status == c.status);

  req.sampling.seed = 99;
  TransformerLM f(params), b(params);
  const InfillResult other = mim_infill(f, b, req);
  CHECK(other.fwd_tokens + other.bwd_tokens > 0);

  TransformerLM same(params);
  req.concurrent = true;
  CHECK_THROWS_AS(mim_infill(same, same, req), ContractError);

  const nlohmann::json j = a;
  CHECK(j["status"].is_string());
  CHECK(j["rounds"] == a.rounds);
}
