#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "mim/errors.hpp"
#include "mim/model.hpp"

using namespace mim;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = 32;
  c.d_head = 8;
  c.context_len = 24;
  return c;
}

TokenSeq random_tokens(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> id(0, 263);
  TokenSeq t(n);
  for (auto& x : t) x = id(rng);
  return t;
}

bool rows_bitwise_equal(const TensorF& a, const TensorF& b, std::size_t rows) {
  return std::memcmp(a.data(), b.data(), rows * a.cols() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("init is deterministic and counts parameters") {
  ModelConfig c;
  c.d_model = 64;
  c.d_head = 16;
  auto a = init_parameters<float>(c, 3);
  auto b = init_parameters<float>(c, 3);
  auto other = init_parameters<float>(c, 4);
  REQUIRE(a.tensors.size() == b.tensors.size());
  bool differs = false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    CHECK(bitwise_equal(a.tensors[i], b.tensors[i]));
    differs = differs || !(a.tensors[i] == other.tensors[i]);
  }
  CHECK(differs);

  // 264x64 token table, 256x64 positions, per layer: two layer norms (4x64),
  // wq 64x64, wk/wv 64x16, wo 64x64, w1 64x256 + 256, w2 256x64 + 64;
  // final layer norm 2x64.
  const std::size_t per_layer = 256 + 4096 + 1024 + 1024 + 4096 + 16384 + 256 + 16384 + 64;
  const std::size_t expected = 264 * 64 + 256 * 64 + 2 * per_layer + 128;
  CHECK(expected == 120576);
  CHECK(parameter_count(c) == expected);
  CHECK(a.scalar_count() == expected);

  CHECK(decays("h0.attn.wq"));
  CHECK(decays("tok_emb"));
  CHECK_FALSE(decays("h1.ln2.gain"));
  CHECK_FALSE(decays("h0.mlp.b1"));
  CHECK_FALSE(decays("ln_f.bias"));
}

TEST_CASE("init statistics") {
  ModelConfig c;
  auto p = init_parameters<double>(c, 9);
  auto stddev = [](const TensorD& t) {
    double s = 0, s2 = 0;
    for (double v : t.values()) {
      s += v;
      s2 += v * v;
    }
    const double n = static_cast<double>(t.size());
    return std::sqrt(s2 / n - (s / n) * (s / n));
  };
  CHECK(stddev(p["h0.mlp.w1"]) == doctest::Approx(0.02).epsilon(0.03));
  CHECK(stddev(p["h0.mlp.w2"]) == doctest::Approx(0.02 / std::sqrt(4.0)).epsilon(0.03));
  CHECK(p["h1.ln1.gain"][0] == 1.0);
  CHECK(p["h1.mlp.b1"][5] == 0.0);
}

TEST_CASE("config validation") {
  auto c = small_config();
  CHECK_NOTHROW(c.validate());
  c.d_head = 7;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.context_len = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.lambda = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);

  c = small_config();
  c.lambda = 0.3;
  c.fusion = FusionPoint::kResidual;
  nlohmann::json j = c;
  CHECK(j.get<ModelConfig>() == c);
}

TEST_CASE("forward pass is causal") {
  auto c = small_config();
  auto p = init_parameters<float>(c, 1);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    auto tokens = random_tokens(rng, 16);
    auto base = forward_pass(p, std::span<const TokenId>(tokens));
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      auto changed = tokens;
      changed[t] = (changed[t] + 1) % 264;
      auto out = forward_pass(p, std::span<const TokenId>(changed));
      CHECK(rows_bitwise_equal(base, out, t));
      CHECK_FALSE(rows_bitwise_equal(base, out, t + 1));
    }
  }
}

TEST_CASE("cached decoding matches the full pass") {
  for (bool mqa : {true, false}) {
    auto c = small_config();
    c.mqa = mqa;
    auto p = init_parameters<float>(c, 5);
    std::mt19937_64 rng(6);
    auto tokens = random_tokens(rng, c.context_len);
    auto full = forward_pass(p, std::span<const TokenId>(tokens));
    AttentionCache<float> cache(c);
    // A multi-token prompt followed by single tokens.
    auto head = forward_pass(p, std::span<const TokenId>(tokens).first(5), &cache);
    CHECK(cache.length() == 5);
    double worst = 0;
    for (std::size_t i = 0; i < 5 * head.cols(); ++i) worst = std::max(worst, double(std::abs(head[i] - full[i])));
    for (std::size_t t = 5; t < tokens.size(); ++t) {
      auto step = forward_pass(p, std::span<const TokenId>(tokens).subspan(t, 1), &cache);
      CHECK(cache.length() == t + 1);
      for (std::size_t v = 0; v < step.cols(); ++v) worst = std::max(worst, double(std::abs(step[v] - full.at(t, v))));
    }
    CHECK(worst < 1e-4);
    CHECK(cache.memory_floats() == c.n_layers * c.context_len * 2 * c.d_head * (mqa ? 1 : c.n_heads));
    CHECK_THROWS_AS(forward_pass(p, std::span<const TokenId>(tokens).first(1), &cache), LengthError);
    cache.truncate(3);
    CHECK(cache.length() == 3);
  }
  auto c = small_config();
  auto p = init_parameters<float>(c, 5);
  TokenSeq too_long(c.context_len + 1, 1);
  CHECK_THROWS_AS(forward_pass(p, std::span<const TokenId>(too_long)), LengthError);
}

TEST_CASE("graph logits equal the graph-free pass") {
  auto c = small_config();
  auto p = init_parameters<float>(c, 8);
  std::mt19937_64 rng(9);
  auto tokens = random_tokens(rng, 12);
  Graph<float> g(false);
  auto bound = bind_parameters(g, p);
  auto logits = g.value(stream_logits(g, bound, {tokens, 1, tokens.size()}));
  auto direct = forward_pass(p, std::span<const TokenId>(tokens));
  for (std::size_t i = 0; i < logits.size(); ++i) CHECK(logits[i] == doctest::Approx(direct[i]).epsilon(1e-5));

  // Batched rows are independent of each other.
  auto second = random_tokens(rng, 12);
  TokenSeq both = tokens;
  both.insert(both.end(), second.begin(), second.end());
  auto batched = g.value(stream_logits(g, bound, {both, 2, 12}));
  CHECK(rows_bitwise_equal(batched, logits, 12));
}

TEST_CASE("fused forward") {
  auto c = small_config();
  auto p = init_parameters<float>(c, 10);
  std::mt19937_64 rng(11);
  auto f = random_tokens(rng, 10);
  auto b = random_tokens(rng, 10);
  auto [lf, lb] = fused_forward<float>(p, f, b, 0.0f);
  CHECK(bitwise_equal(lf, forward_pass(p, std::span<const TokenId>(f))));
  CHECK(bitwise_equal(lb, forward_pass(p, std::span<const TokenId>(b))));

  FusedActivations<float> acts;
  auto [zf, zb] = fused_forward<float>(p, f, b, 0.0f, &acts);
  REQUIRE(acts.fwd_fused.size() == c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    CHECK(bitwise_equal(acts.fwd_fused[l], acts.fwd_attention[l]));
    CHECK(bitwise_equal(acts.bwd_fused[l], acts.bwd_attention[l]));
  }

  auto [mf, mb] = fused_forward<float>(p, f, b, 0.3f, &acts);
  CHECK_FALSE(mf == lf);
  CHECK_FALSE(mb == lb);
  auto [sf, sb] = fused_forward<float>(p, b, f, 0.3f);
  CHECK(bitwise_equal(sf, mb));
  CHECK(bitwise_equal(sb, mf));

  // Each stream stays causal in its own order: changing step t of either
  // stream leaves steps < t of both streams untouched.
  for (std::size_t t = 1; t < 10; t += 3) {
    auto f2 = f;
    f2[t] = (f2[t] + 7) % 264;
    auto [cf, cb] = fused_forward<float>(p, f2, b, 0.3f);
    CHECK(rows_bitwise_equal(cf, mf, t));
    CHECK(rows_bitwise_equal(cb, mb, t));
  }

  c.fusion = FusionPoint::kResidual;
  auto pr = p;
  pr.config = c;
  auto [rf, rb] = fused_forward<float>(pr, f, b, 0.0f);
  CHECK(bitwise_equal(rf, lf));
  CHECK_FALSE(fused_forward<float>(pr, f, b, 0.3f).first == mf);

  TokenSeq shorter(9, 1);
  CHECK_THROWS_AS(fused_forward<float>(p, f, shorter, 0.3f), AlignmentError);
}
