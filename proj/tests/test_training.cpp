#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "mim/errors.hpp"
#include "mim/training.hpp"

using namespace mim;
using namespace mim::testing;

namespace {

ModelConfig toy_config(std::size_t vocab, std::size_t layers, std::size_t d, std::size_t ctx) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = 2;
  c.d_model = d;
  c.d_head = d / 2;
  c.context_len = ctx;
  c.vocab_size = vocab;
  return c;
}

std::vector<double> softmax(std::span<const double> logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  std::vector<double> p(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

std::vector<TokenSeq> small_docs(std::mt19937_64& rng, std::size_t count, std::size_t max_token) {
  std::uniform_int_distribution<int> len(1, 5), tok(0, static_cast<int>(max_token) - 1);
  std::vector<TokenSeq> docs(count);
  for (auto& d : docs) {
    d.resize(static_cast<std::size_t>(len(rng)));
    for (auto& t : d) t = tok(rng);
  }
  return docs;
}

}  // namespace

TEST_CASE("tv distance") {
  std::vector<double> p{0.2, 0.3, 0.5};
  CHECK(tv_distance(p, p) == 0.0);
  CHECK(tv_distance(std::vector<double>{1, 0, 0}, std::vector<double>{0, 1, 0}) == 1.0);
  CHECK(tv_distance(std::vector<double>{0.5, 0.5, 0}, std::vector<double>{0.25, 0.25, 0.5}) ==
        doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(tv_distance(std::vector<double>{0.5, 0.6}, std::vector<double>{0.5, 0.5}), ContractError);

  std::mt19937_64 rng(1);
  std::gamma_distribution<double> gamma(0.5, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> a(7), b(7);
    double sa = 0, sb = 0;
    for (auto& v : a) sa += (v = gamma(rng));
    for (auto& v : b) sb += (v = gamma(rng));
    for (auto& v : a) v /= sa;
    for (auto& v : b) v /= sb;
    const double d = tv_distance(a, b);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(d == tv_distance(b, a));
  }
}

TEST_CASE("mim loss on a v=4 toy matches an explicit oracle") {
  auto params = init_parameters<double>(toy_config(4, 1, 8, 8), 2);
  // Two-token document [0, 1]; L2R->2, R2L->3, BOS->0, EOS->1. Overlapping ids
  // are harmless here, the oracle consumes the same rows.
  MimBatch b;
  b.fwd = pack_rows({{{2, 0, 0, 1}, {-1, 0, 1, 1}}});
  b.bwd = pack_rows({{{3, 0, 1, 0}, {-1, 1, 0, 1}}});
  b.alignment = {{1, 2}, {2, 1}};
  b.doc_lengths = {2};

  for (double beta : {0.0, 0.1, 0.7}) {
    auto ev = mim_loss(params, b, beta);
    auto lf = forward_pass(params, std::span<const TokenId>(b.fwd.inputs));
    auto lb = forward_pass(params, std::span<const TokenId>(b.bwd.inputs));
    auto nll = [](const TensorD& logits, const std::vector<TokenId>& targets) {
      double s = 0;
      int n = 0;
      for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r] < 0) continue;
        s -= std::log(softmax(logits.row(r))[static_cast<std::size_t>(targets[r])]);
        ++n;
      }
      return s / n;
    };
    double tv = 0;
    for (auto [f, w] : b.alignment) {
      auto p = softmax(lf.row(f)), q = softmax(lb.row(w));
      double acc = 0;
      for (std::size_t z = 0; z < 4; ++z) acc += std::abs(p[z] - q[z]);
      tv += 0.5 * acc;
    }
    tv /= 2;
    const double want = nll(lf, b.fwd.targets) + nll(lb, b.bwd.targets) + beta * tv;
    CHECK(std::abs(ev.breakdown.total - want) < 1e-5);
    CHECK(std::abs(ev.breakdown.tv_mean - tv) < 1e-9);
    CHECK(std::abs(ev.breakdown.total - (ev.breakdown.nll_fwd + ev.breakdown.nll_bwd + beta * ev.breakdown.tv_mean)) <
          1e-6);
    if (beta == 0.0) CHECK(ev.breakdown.total == ev.breakdown.nll_fwd + ev.breakdown.nll_bwd);
  }

  auto broken = b;
  broken.alignment = {{1, 1}, {2, 2}};
  CHECK_THROWS_AS(mim_loss(params, broken, 0.1), AlignmentError);
  CHECK(TrainConfig{}.beta == 0.1);
}

TEST_CASE("full loss gradient matches finite differences") {
  auto params = init_parameters<double>(toy_config(16, 2, 16, 8), 3);
  // Larger weights make every term of the gradient visible to the check.
  for (auto& t : params.tensors) {
    for (auto& v : t.values()) v *= 5.0;
  }
  std::mt19937_64 rng(4);
  auto batch = compact_batch(make_mim_batch(small_docs(rng, 2, 8), 8), 16);
  auto ev = mim_loss(params, batch, 0.1);
  auto grads = ev.gradients();
  CHECK(grads.size() == params.tensors.size());
  auto err = parameter_gradient_error(params, grads, [&](const Parameters<double>& p) {
    return mim_loss(p, batch, 0.1, {}, false).breakdown.total;
  });
  CHECK(err < 1e-4);

  // Stopping the gradient on one side changes the regularizer's gradient only.
  auto stopped = mim_loss(params, batch, 0.1, {true, false});
  auto sg = stopped.gradients();
  CHECK_FALSE(sg.at("h0.attn.wq") == grads.at("h0.attn.wq"));
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.lr_max = 1e-3;
  c.total_steps = 1000;
  c.warmup_fraction = 0.02;
  CHECK(lr_schedule(0, c) == 0.0);
  CHECK(lr_schedule(10, c) == doctest::Approx(0.5e-3));
  CHECK(lr_schedule(20, c) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_schedule(1000, c) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_schedule(5000, c) == doctest::Approx(1e-4).epsilon(1e-12));
  // Monotone after warmup.
  for (std::size_t s = 21; s <= 1000; ++s) CHECK(lr_schedule(s, c) <= lr_schedule(s - 1, c));
}

TEST_CASE("config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.mode = TrainMode::kAR;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.beta = 0.0;
  CHECK_NOTHROW(c.validate());
  nlohmann::json j = c;
  CHECK(j.get<TrainConfig>() == c);
  CHECK(nlohmann::json{{"mode", "FIM"}}.get<TrainConfig>().beta == 0.0);
  CHECK_THROWS_AS(parse_train_mode("BERT"), ConfigError);
}

TEST_CASE("adam update with zero learning rate leaves parameters alone") {
  auto params = init_parameters<float>(toy_config(264, 1, 16, 32), 5);
  auto before = params;
  auto opt = init_optimizer(params);
  TrainConfig c;
  c.lr_max = 0.0;
  c.total_steps = 10;
  c.batch_tokens = 64;
  std::vector<TokenSeq> docs{encode("hello there"), encode("general kenobi")};
  for (std::uint64_t s = 0; s < 3; ++s) train_step(params, opt, make_training_batch(docs, c, 32, s), c);
  for (std::size_t i = 0; i < params.tensors.size(); ++i) CHECK(bitwise_equal(params.tensors[i], before.tensors[i]));
  CHECK(opt.step == 3);
}

TEST_CASE("gradient clipping and decay exclusions") {
  Parameters<double> p;
  p.names = {"w", "ln.gain"};
  p.tensors = {TensorD({2}, 1.0), TensorD({2}, 1.0)};
  auto opt = init_optimizer(p);
  TrainConfig c;
  c.weight_decay = 0.5;
  GradientMap<double> g{{"w", TensorD({2}, 30.0)}, {"ln.gain", TensorD({2}, 40.0)}};
  const double norm = adamw_update(p, opt, g, c, 0.1);
  CHECK(norm == doctest::Approx(std::sqrt(2 * 30.0 * 30.0 + 2 * 40.0 * 40.0)));
  // First Adam step moves every coordinate by lr (bias-corrected m/sqrt(v) = 1),
  // plus decay on the weight only.
  CHECK(p["w"][0] == doctest::Approx(1.0 - 0.1 * 0.5 - 0.1).epsilon(1e-6));
  CHECK(p["ln.gain"][0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
  // Clipped gradient reached the moments: (1 - beta1) * 30 / norm.
  CHECK(opt.m[0][0] == doctest::Approx(0.1 * 30.0 / norm));
}

TEST_CASE("training is deterministic and overfits a small corpus") {
  std::mt19937_64 rng(6);
  std::vector<TokenSeq> docs;
  std::uniform_int_distribution<int> ch('a', 'h');
  for (int i = 0; i < 50; ++i) {
    std::string s(12, ' ');
    for (auto& x : s) x = static_cast<char>(ch(rng));
    docs.push_back(encode(s));
  }
  auto cfg = toy_config(264, 2, 32, 32);
  for (TrainMode mode : {TrainMode::kMIM, TrainMode::kAR, TrainMode::kFIM}) {
    TrainConfig tc;
    tc.mode = mode;
    tc.beta = mode == TrainMode::kMIM ? 0.1 : 0.0;
    tc.total_steps = 200;
    tc.batch_tokens = 256;
    tc.lr_max = 1e-2;
    tc.seed = 7;
    auto a = init_parameters<float>(cfg, 1);
    auto b = a;
    auto oa = init_optimizer(a), ob = init_optimizer(b);
    double first = 0, last = 0;
    for (std::uint64_t s = 0; s < tc.total_steps; ++s) {
      auto batch = make_training_batch(docs, tc, cfg.context_len, s);
      auto r = train_step(a, oa, batch, tc);
      if (s < 10) train_step(b, ob, batch, tc);
      if (s == 0) first = r.loss.total;
      last = r.loss.total;
      if (s == 9) {
        for (std::size_t i = 0; i < a.tensors.size(); ++i) CHECK(bitwise_equal(a.tensors[i], b.tensors[i]));
      }
      CHECK(r.loss.tv_mean >= 0.0);
      CHECK(r.loss.tv_mean <= 1.0);
    }
    INFO("mode " << to_string(mode) << " first " << first << " last " << last);
    CHECK(last < 0.5 * first);
  }
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  auto params = init_parameters<float>(toy_config(264, 1, 16, 32), 5);
  params["h0.mlp.w1"][3] = std::numeric_limits<float>::quiet_NaN();
  auto opt = init_optimizer(params);
  TrainConfig c;
  c.batch_tokens = 16;
  try {
    train_step(params, opt, make_training_batch({encode("abcdef")}, c, 32, 0), c);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    const std::string what = e.what();
    CHECK(what.find("step 0") != std::string::npos);
    CHECK(what.find("nll_fwd") != std::string::npos);
  }
}

TEST_CASE("two-stage training") {
  auto cfg = toy_config(16, 2, 16, 8);
  cfg.lambda = 0.3;
  auto params = init_parameters<double>(cfg, 8);
  for (auto& t : params.tensors) {
    for (auto& v : t.values()) v *= 5.0;
  }
  std::mt19937_64 rng(9);
  auto truth = compact_batch(make_mim_batch(small_docs(rng, 2, 8), 8), 16);
  auto staged = make_two_stage_batch(params, truth);
  auto again = make_two_stage_batch(params, truth);
  CHECK(staged.cand_fwd.inputs == again.cand_fwd.inputs);
  CHECK(staged.cand_bwd.inputs == again.cand_bwd.inputs);
  CHECK(staged.cand_fwd.length == truth.fwd.length);

  // Candidates are held fixed while parameters move.
  auto ev = two_stage_loss(params, staged, 0.1, 0.3);
  auto grads = ev.gradients();
  auto err = parameter_gradient_error(params, grads, [&](const Parameters<double>& p) {
    return two_stage_loss(p, staged, 0.1, 0.3, {}, false).breakdown.total;
  });
  CHECK(err < 1e-4);

  // lambda = 0 in stage 2 is exactly the decoupled loss, and candidates no
  // longer matter.
  auto decoupled = two_stage_loss(params, staged, 0.1, 0.0);
  auto reference = mim_loss(params, truth, 0.1);
  CHECK(decoupled.breakdown.total == reference.breakdown.total);
  CHECK(decoupled.breakdown.tv_mean == reference.breakdown.tv_mean);
  auto scrambled = staged;
  for (auto& t : scrambled.cand_fwd.inputs) t = (t + 3) % 16;
  for (auto& t : scrambled.cand_bwd.inputs) t = (t + 5) % 16;
  CHECK(two_stage_loss(params, scrambled, 0.1, 0.0).breakdown.total == reference.breakdown.total);
  CHECK(two_stage_loss(params, scrambled, 0.1, 0.3).breakdown.total != ev.breakdown.total);

  auto fp = params.cast<float>();
  auto opt = init_optimizer(fp);
  TrainConfig tc;
  TrainingBatch tb;
  tb.mim = truth;
  auto report = two_stage_step(fp, opt, tb, tc);
  CHECK(std::isfinite(report.loss.total));
  CHECK(opt.step == 1);
  CHECK_THROWS_AS(train_step(fp, opt, tb, tc), ContractError);
  fp.config.lambda = 0.0;
  CHECK_THROWS_AS(two_stage_step(fp, opt, tb, tc), ContractError);
}
