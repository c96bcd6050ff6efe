// Acceptance checks. Each criterion prints one PASS/FAIL line; the exit code
// is nonzero if any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "mim/errors.hpp"
#include "mim/eval.hpp"
#include "mim/inference.hpp"
#include "mim/run.hpp"
#include "prose.hpp"

using namespace mim;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  bool verbose = false;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

ModelConfig small_model(std::size_t vocab, std::size_t d, std::size_t ctx) {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = d;
  c.d_head = d / 2;
  c.context_len = ctx;
  c.vocab_size = vocab;
  return c;
}

TokenSeq random_bytes(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> b(0, 255);
  TokenSeq t(n);
  for (auto& x : t) x = b(rng);
  return t;
}

TokenSeq cat(TokenSeq a, const TokenSeq& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b) { return bitwise_equal(a, b); }

bool same_params(const Parameters<float>& a, const Parameters<float>& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (!same_bits(a.tensors[i], b.tensors[i])) return false;
  }
  return true;
}

std::vector<TokenSeq> prose_docs(std::uint64_t seed, std::size_t count) {
  acceptance::ProseGenerator gen(seed);
  std::vector<TokenSeq> docs;
  for (std::size_t i = 0; i < count; ++i) docs.push_back(encode(gen.paragraph()));
  return docs;
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity(Context&) {
  const auto t0 = Clock::now();
  const ModelConfig cfg = small_model(16, 32, 8);
  std::mt19937_64 rng(1);
  // Two documents over ids 0..7; sentinels map onto ids 8..15.
  std::vector<TokenSeq> docs;
  std::uniform_int_distribution<int> id(0, 7);
  for (std::size_t len : {6u, 4u}) {
    TokenSeq d(len);
    for (auto& t : d) t = id(rng);
    docs.push_back(d);
  }
  const MimBatch batch = testing::compact_batch(make_mim_batch(docs, cfg.context_len), cfg.vocab_size);
  double worst = 0.0;
  for (double scale : {1.0, 5.0}) {
    auto params = init_parameters<double>(cfg, 2);
    for (auto& t : params.tensors) {
      for (auto& v : t.values()) v *= scale;
    }
    auto ev = mim_loss(params, batch, 0.1);
    const auto grads = ev.gradients();
    // |p - q| has a kink at zero; a step of 1e-5 straddles it for some
    // entries of the TV term, so the difference quotient uses 1e-6.
    const double err = testing::parameter_gradient_error(
        params, grads, [&](const Parameters<double>& p) { return mim_loss(p, batch, 0.1, {}, false).breakdown.total; },
        1e-6);
    worst = std::max(worst, err);
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 60.0,
          "max rel err " + fmt(worst, 3) + " over " + std::to_string(parameter_count(cfg)) + " params, " +
              fmt(secs, 3) + " s"};
}

Outcome tv_oracle(Context&) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> size(2, 300);
  std::exponential_distribution<double> ex(1.0);
  std::bernoulli_distribution zero(0.2);
  double worst = 0.0;
  bool in_range = true, symmetric = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = size(rng);
    std::vector<double> p(n), q(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = zero(rng) ? 0.0 : ex(rng);
      q[i] = zero(rng) ? 0.0 : ex(rng);
    }
    p[0] += 1e-3;
    q[n - 1] += 1e-3;
    const double sp = std::accumulate(p.begin(), p.end(), 0.0);
    const double sq = std::accumulate(q.begin(), q.end(), 0.0);
    for (auto& v : p) v /= sp;
    for (auto& v : q) v /= sq;
    long double direct = 0.0L;
    for (std::size_t i = 0; i < n; ++i) direct += std::fabs(static_cast<long double>(p[i]) - q[i]);
    direct *= 0.5L;
    const double tv = tv_distance(p, q);
    worst = std::max(worst, static_cast<double>(std::fabs(tv - direct)));
    in_range = in_range && tv >= 0.0 && tv <= 1.0;
    symmetric = symmetric && tv == tv_distance(q, p);
  }
  return {worst < 1e-6 && in_range && symmetric, "max |tv - oracle| " + fmt(worst, 3) + ", range " +
                                                     (in_range ? "ok" : "violated") + ", symmetry " +
                                                     (symmetric ? "exact" : "violated")};
}

Outcome causality(Context&) {
  const ModelConfig cfg = small_model(vocab::kSize, 32, 32);
  const auto params = init_parameters<float>(cfg, 3);
  std::mt19937_64 rng(3);
  std::size_t violations = 0, checks = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const TokenSeq tokens = random_bytes(rng, cfg.context_len);
    const auto base = forward_pass(params, std::span<const TokenId>(tokens));
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      TokenSeq changed = tokens;
      changed[t] = (changed[t] + 1 + static_cast<TokenId>(rng() % 200)) % 264;
      const auto out = forward_pass(params, std::span<const TokenId>(changed));
      ++checks;
      if (t > 0 && std::memcmp(base.data(), out.data(), sizeof(float) * t * base.cols()) != 0) ++violations;
    }
  }
  return {violations == 0, std::to_string(checks) + " perturbations, " + std::to_string(violations) + " violations"};
}

Outcome backward_symmetry(Context&) {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> count(1, 5);
  std::uniform_int_distribution<std::size_t> len(1, 40);
  std::size_t docs = 0, bad_alignment = 0, bad_rows = 0;
  while (docs < 1000) {
    std::vector<TokenSeq> batch_docs;
    for (int i = count(rng); i > 0; --i) batch_docs.push_back(random_bytes(rng, len(rng)));
    const MimBatch b = make_mim_batch(batch_docs, 64);
    // Brute force: every document token must be paired with the forward
    // position whose context is its left part and the backward position whose
    // context is its right part, read in reverse.
    std::set<std::pair<std::size_t, std::size_t>> want;
    for (std::size_t r = 0; r < batch_docs.size(); ++r) {
      const TokenSeq& d = batch_docs[r];
      const std::size_t n = d.size();
      const TokenSeq rev = reverse_with_sentinel(d, Direction::kRightToLeft);
      for (std::size_t p = 0; p < rev.size(); ++p) {
        if (b.bwd.inputs[r * b.bwd.length + p] != rev[p]) ++bad_rows;
      }
      for (std::size_t i = 0; i < n; ++i) {
        // Forward position i+1 sees [L2R, BOS, x_0..x_{i-1}]; backward
        // position n-i sees [R2L, BOS, x_{n-1}..x_{i+1}].
        want.insert({r * b.fwd.length + i + 1, r * b.bwd.length + (n - i)});
      }
    }
    const std::set<std::pair<std::size_t, std::size_t>> got(b.alignment.begin(), b.alignment.end());
    if (got != want || got.size() != b.alignment.size()) ++bad_alignment;
    docs += batch_docs.size();
  }

  // Backward logits are the forward machinery run on the reversed stream.
  const auto params = init_parameters<float>(small_model(vocab::kSize, 32, 64), 5);
  std::size_t bad_logits = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const TokenSeq d = random_bytes(rng, len(rng));
    const MimBatch b = make_mim_batch({d}, 64);
    Graph<float> g(false);
    const auto bound = bind_parameters(g, params);
    const auto from_batch = g.value(stream_logits(g, bound, {b.bwd.inputs, 1, b.bwd.length}));
    const TokenSeq rev = reverse_with_sentinel(d, Direction::kRightToLeft);
    const auto direct = g.value(stream_logits(g, bound, {rev, 1, rev.size()}));
    const auto plain = forward_pass(params, std::span<const TokenId>(rev));
    if (!bitwise_equal(from_batch, direct)) ++bad_logits;
    for (std::size_t i = 0; i < plain.size(); ++i) {
      if (std::abs(plain[i] - direct[i]) > 1e-4f) {
        ++bad_logits;
        break;
      }
    }
  }
  return {bad_alignment == 0 && bad_rows == 0 && bad_logits == 0,
          std::to_string(docs) + " documents, alignment mismatches " + std::to_string(bad_alignment) +
              ", reversed-row mismatches " + std::to_string(bad_rows) + ", logit mismatches " +
              std::to_string(bad_logits) + "/100"};
}

Outcome join_soundness(Context& ctx) {
  // A toy model trained briefly on short prose so that both directions
  // produce text that actually meets.
  const auto docs = prose_docs(5, 400);
  RunConfig rc;
  rc.model = small_model(vocab::kSize, 32, 128);
  rc.train.total_steps = 300;
  rc.train.batch_tokens = 512;
  rc.train.lr_max = 1e-2;
  rc.train.seed = 5;
  TrainingState state = init_training(rc);
  train_until(rc, docs, state, rc.train.total_steps, nullptr);
  const auto params = std::make_shared<const Parameters<float>>(state.params);
  if (ctx.verbose) std::cerr << "join soundness: model trained\n";

  std::mt19937_64 rng(6);
  std::size_t joined = 0, violations = 0;
  for (int run = 0; run < 500; ++run) {
    const TokenSeq& d = docs[rng() % docs.size()];
    const std::size_t cut = std::min<std::size_t>(d.size(), 60);
    const std::size_t a = std::uniform_int_distribution<std::size_t>(1, cut / 2)(rng);
    const std::size_t b = std::uniform_int_distribution<std::size_t>(a, cut)(rng);
    InfillRequest req;
    req.prefix.assign(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(a));
    req.suffix.assign(d.begin() + static_cast<std::ptrdiff_t>(b), d.begin() + static_cast<std::ptrdiff_t>(cut));
    req.ngram = 2 + static_cast<std::size_t>(run % 3);
    req.budget = 24;
    req.criterion = VerifyCriterion::kGreedyExact;
    TransformerLM f(params), bw(params);
    const InfillResult r = mim_infill(f, bw, req);
    if (r.status != InfillStatus::kJoinedVerified) continue;
    ++joined;
    TransformerLM plain(params);
    SamplingParams sp;
    sp.max_tokens = r.middle.size();
    sp.stop.clear();
    std::mt19937_64 g(0);
    const TokenSeq head = cat(TokenSeq{vocab::kL2R, vocab::kBos}, req.prefix);
    if (generate(plain, head, sp, g).tokens != r.middle) ++violations;
  }
  return {violations == 0 && joined > 0,
          "500 runs, " + std::to_string(joined) + " joined, " + std::to_string(violations) + " violations"};
}

Outcome round_bound(Context&) {
  std::mt19937_64 rng(7);
  bool ok = true;
  std::string detail;
  for (std::size_t m : {8u, 16u, 32u, 64u}) {
    std::size_t worst = 0, fim_rounds = 0;
    for (int trial = 0; trial < 25; ++trial) {
      std::vector<TokenId> ids(256);
      std::iota(ids.begin(), ids.end(), 0);
      std::shuffle(ids.begin(), ids.end(), rng);
      const TokenSeq p(ids.begin(), ids.begin() + 8);
      const TokenSeq mid(ids.begin() + 8, ids.begin() + 8 + static_cast<std::ptrdiff_t>(m));
      const TokenSeq s(ids.begin() + 8 + static_cast<std::ptrdiff_t>(m), ids.begin() + 16 + static_cast<std::ptrdiff_t>(m));
      const TokenSeq doc = cat(cat(p, mid), s);
      ScriptedLM fwd(doc), bwd(TokenSeq(doc.rbegin(), doc.rend())), fim_lm(mid, 0.9, 0, vocab::kMid);
      InfillRequest base;
      base.ngram = 4;
      base.budget = 2 * m;
      MimEngine mim(fwd, bwd, base);
      FimEngine fim(fim_lm, SamplingParams{});
      const LatencyReport r = step_count_benchmark(mim, fim, {{p, mid, s}});
      const LatencyExample& e = r.examples[0];
      worst = std::max(worst, e.mim_rounds);
      fim_rounds = e.fim_rounds;
      ok = ok && e.mim_status == "joined-verified" && e.fim_rounds == m;
    }
    const std::size_t bound = (m + 4 + 1) / 2 + 1;
    ok = ok && worst <= bound;
    detail += "M=" + std::to_string(m) + ": " + std::to_string(worst) + "<=" + std::to_string(bound) + " (FIM " +
              std::to_string(fim_rounds) + ") ";
  }
  detail.pop_back();
  return {ok, detail};
}

// ---------------------------------------------------------------------------

struct TrainedRun {
  double ppl_start = 0.0;
  double ppl_end = 0.0;
  double tv_end = 0.0;
  fs::path checkpoint;
};

TrainedRun train_and_measure(Context& ctx, RunConfig rc, const std::vector<TokenSeq>& held_out) {
  const TrainingState init = init_training(rc);
  TrainedRun out;
  out.ppl_start = held_out_agreement(init.params, held_out).perplexity_fwd;
  TrainOptions opts;
  opts.quiet = !ctx.verbose;
  const auto t0 = Clock::now();
  const TrainSummary s = run_training(rc, opts);
  const auto ck = load_checkpoint(s.checkpoint);
  const AgreementReport a = held_out_agreement(ck.params, held_out);
  out.ppl_end = a.perplexity_fwd;
  out.tv_end = a.tv_mean;
  out.checkpoint = s.checkpoint;
  if (ctx.verbose) {
    std::cerr << rc.out_dir << ": ppl " << out.ppl_start << " -> " << out.ppl_end << ", tv " << out.tv_end << ", "
              << seconds_since(t0) << " s\n";
  }
  return out;
}

RunConfig desk_config(const fs::path& out, TrainMode mode, double beta) {
  RunConfig rc;
  rc.model.n_layers = 2;
  rc.model.n_heads = 4;
  rc.model.d_model = 128;
  rc.model.d_head = 32;
  rc.model.context_len = 256;
  rc.train.mode = mode;
  rc.train.beta = beta;
  rc.train.total_steps = 3000;
  rc.train.batch_tokens = 1024;
  rc.train.seed = 11;
  rc.data.val_fraction = 0.05;
  rc.data.seed = 11;
  rc.out_dir = out.string();
  rc.checkpoint_every = 0;
  rc.log_every = 50;
  rc.eval_docs = 1 << 20;
  return rc;
}

Outcome training_trend(Context& ctx) {
  const auto t0 = Clock::now();
  const fs::path dir = ctx.work / "trend";
  fs::create_directories(dir);
  const fs::path corpus = dir / "prose.txt";
  {
    acceptance::ProseGenerator gen(12);
    std::ofstream(corpus) << gen.corpus(1 << 20);
  }
  struct Variant {
    std::string name;
    TrainMode mode;
    double beta;
  };
  const std::vector<Variant> variants{{"ar", TrainMode::kAR, 0.0},
                                      {"fim", TrainMode::kFIM, 0.0},
                                      {"mim", TrainMode::kMIM, 0.1},
                                      {"mim-beta0", TrainMode::kMIM, 0.0}};
  std::map<std::string, TrainedRun> runs;
  std::vector<TokenSeq> held_out;
  for (const auto& v : variants) {
    RunConfig rc = desk_config(dir / v.name, v.mode, v.beta);
    rc.data.corpus = {corpus.string()};
    if (held_out.empty()) held_out = load_run_corpus(rc.data).validation;
    runs[v.name] = train_and_measure(ctx, rc, held_out);
  }
  bool a = true;
  std::string detail = "held-out ppl";
  for (const auto& v : variants) {
    const TrainedRun& r = runs[v.name];
    if (v.name != "mim-beta0") a = a && r.ppl_end < 0.5 * r.ppl_start;
    detail += " " + v.name + " " + fmt(r.ppl_start, 4) + "->" + fmt(r.ppl_end, 4) + ";";
  }
  const TrainedRun& m = runs["mim"];
  const TrainedRun& z = runs["mim-beta0"];
  const bool b = m.tv_end < z.tv_end;
  const bool c = std::abs(m.ppl_end - z.ppl_end) <= 0.1 * z.ppl_end;
  detail += " tv beta0.1 " + fmt(m.tv_end) + " vs beta0 " + fmt(z.tv_end) + "; (a) " + (a ? "ok" : "fail") + " (b) " +
            (b ? "ok" : "fail") + " (c) " + (c ? "ok" : "fail") + "; " + fmt(seconds_since(t0) / 60.0, 3) + " min";
  return {a && b && c, detail};
}

Outcome lambda_decoupling(Context&) {
  const ModelConfig cfg = small_model(vocab::kSize, 32, 32);
  const auto params = init_parameters<float>(cfg, 8);
  std::mt19937_64 rng(8);
  std::size_t bad_fused = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 32;
    const TokenSeq f = random_bytes(rng, n);
    const TokenSeq b = random_bytes(rng, n);
    const auto [lf, lb] = fused_forward<float>(params, f, b, 0.0f);
    if (!bitwise_equal(lf, forward_pass(params, std::span<const TokenId>(f))) ||
        !bitwise_equal(lb, forward_pass(params, std::span<const TokenId>(b)))) {
      ++bad_fused;
    }
  }

  // Stage 2 with lambda forced to 0: loss, gradients and the resulting update
  // are those of the decoupled objective.
  std::size_t bad_stage = 0;
  const auto docs = prose_docs(9, 64);
  TrainConfig tc;
  tc.batch_tokens = 256;
  for (std::uint64_t step = 0; step < 5; ++step) {
    const TrainingBatch tb = make_training_batch(docs, tc, cfg.context_len, step);
    auto fused_cfg = cfg;
    fused_cfg.lambda = 0.3;
    Parameters<float> staged_params = params;
    staged_params.config = fused_cfg;
    const TwoStageBatch staged = make_two_stage_batch(staged_params, tb.mim);
    auto ref = mim_loss(params, tb.mim, tc.beta);
    auto two = two_stage_loss(staged_params, staged, tc.beta, 0.0f);
    if (ref.breakdown.total != two.breakdown.total || ref.breakdown.tv_mean != two.breakdown.tv_mean) ++bad_stage;
    const auto gr = ref.gradients();
    const auto gt = two.gradients();
    for (const auto& [name, g] : gr) {
      if (!gt.count(name) || !bitwise_equal(g, gt.at(name))) ++bad_stage;
    }
    Parameters<float> p1 = params, p2 = params;
    auto o1 = init_optimizer(p1), o2 = init_optimizer(p2);
    o1.step = o2.step = 100;
    train_step(p1, o1, tb, tc);
    adamw_update(p2, o2, gt, tc, lr_schedule(o2.step, tc));
    if (!same_params(p1, p2)) ++bad_stage;
  }
  return {bad_fused == 0 && bad_stage == 0, "fused lambda=0 mismatches " + std::to_string(bad_fused) +
                                                "/50, stage-2 lambda=0 mismatches " + std::to_string(bad_stage) +
                                                " over 5 batches (loss, gradients, update)"};
}

Outcome fim_statistics(Context&) {
  acceptance::ProseGenerator gen(10);
  std::mt19937_64 rng(10);
  std::size_t transformed = 0, broken = 0;
  const std::size_t total = 10000;
  for (std::size_t i = 0; i < total; ++i) {
    const std::string doc = gen.paragraph();
    const FimExample ex = apply_fim_transform(doc, rng, 0.5, 0.5);
    if (ex.prefix + ex.middle + ex.suffix != doc) ++broken;
    if (ex.transformed()) {
      ++transformed;
      const FimParts parts = parse_fim(ex.ids);
      if (decode(parts.prefix) + decode(parts.middle) + decode(parts.suffix) != doc) ++broken;
    }
  }
  const double frac = static_cast<double>(transformed) / total;
  return {frac >= 0.48 && frac <= 0.52 && broken == 0,
          "transformed fraction " + fmt(frac) + ", reconstruction failures " + std::to_string(broken)};
}

Outcome persistence(Context& ctx) {
  const fs::path dir = ctx.work / "persistence";
  fs::remove_all(dir);
  fs::create_directories(dir);
  {
    acceptance::ProseGenerator gen(13);
    std::ofstream(dir / "c.txt") << gen.corpus(20000);
  }
  RunConfig rc;
  rc.model = small_model(vocab::kSize, 32, 64);
  rc.train.total_steps = 20;
  rc.train.batch_tokens = 256;
  rc.train.seed = 13;
  rc.data.corpus = {(dir / "c.txt").string()};
  rc.out_dir = (dir / "full").string();
  rc.log_every = 1;
  rc.checkpoint_every = 0;
  const TrainSummary full = run_training(rc);
  const auto a = load_checkpoint(full.checkpoint);

  // Round trip.
  save_checkpoint(dir / "copy.bin", a);
  const auto copy = load_checkpoint(dir / "copy.bin");
  bool roundtrip = same_params(a.params, copy.params);
  for (std::size_t i = 0; i < a.params.tensors.size(); ++i) {
    roundtrip = roundtrip && same_bits(a.optimizer->m[i], copy.optimizer->m[i]) &&
                same_bits(a.optimizer->v[i], copy.optimizer->v[i]);
  }

  // Resume.
  RunConfig split = rc;
  split.out_dir = (dir / "split").string();
  TrainOptions stop;
  stop.stop_after = 7;
  const TrainSummary first = run_training(split, stop);
  TrainOptions resume;
  resume.resume = first.checkpoint;
  const TrainSummary second = run_training(split, resume);
  const auto b = load_checkpoint(second.checkpoint);
  bool resumed = same_params(a.params, b.params);
  auto metrics = [](const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);) {
      auto j = nlohmann::json::parse(line);
      j.erase("wall_ms");
      out.push_back(j.dump());
    }
    return out;
  };
  resumed = resumed && metrics(dir / "full" / "metrics.jsonl") == metrics(dir / "split" / "metrics.jsonl");

  // Scheduling independence.
  const auto params = std::make_shared<const Parameters<float>>(a.params);
  std::size_t differ = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    InfillRequest req;
    req.prefix = encode("Anna found the ");
    req.suffix = encode(" near the river.");
    req.budget = 16;
    req.ngram = 3;
    req.sampling.temperature = 0.9;
    req.sampling.seed = seed;
    auto run = [&](bool concurrent) {
      TransformerLM f(params), bw(params);
      InfillRequest r = req;
      r.concurrent = concurrent;
      return nlohmann::json(mim_infill(f, bw, r)).dump();
    };
    const std::string s = run(false);
    if (run(true) != s || run(true) != s) ++differ;
  }
  return {roundtrip && resumed && differ == 0, std::string("checkpoint round trip ") +
                                                   (roundtrip ? "bitwise" : "differs") + ", resume " +
                                                   (resumed ? "bitwise" : "differs") + ", concurrent vs serial " +
                                                   std::to_string(differ) + "/20 differ"};
}

Outcome synthetic_quality(Context& ctx) {
  const auto t0 = Clock::now();
  const fs::path dir = ctx.work / "brackets";
  fs::create_directories(dir);
  auto config = [&](const std::string& name, TrainMode mode, double beta) {
    RunConfig rc = desk_config(dir / name, mode, beta);
    rc.data.synthetic = "brackets";
    rc.data.synthetic_count = 100000;
    rc.eval_docs = 512;
    return rc;
  };
  TrainOptions opts;
  opts.quiet = !ctx.verbose;
  const TrainSummary mim_run = run_training(config("mim", TrainMode::kMIM, 0.1), opts);
  const TrainSummary fim_run = run_training(config("fim", TrainMode::kFIM, 0.0), opts);
  const auto mim_params = std::make_shared<const Parameters<float>>(load_checkpoint(mim_run.checkpoint).params);
  const auto fim_params = std::make_shared<const Parameters<float>>(load_checkpoint(fim_run.checkpoint).params);

  const auto tasks = synthetic_examples(SyntheticTask::kBrackets, 500, 99);
  TransformerLM f(mim_params), b(mim_params), fim_lm(fim_params);
  // Joins are verified with a probability threshold through the suffix and
  // the end of the document; bigrams give enough meets on a two-symbol alphabet.
  InfillRequest req;
  req.ngram = 2;
  req.budget = 64;
  req.criterion = VerifyCriterion::kThreshold;
  req.tau = 0.1;
  req.verifications_per_round = 4;
  req.verify_suffix = true;
  req.suffix_end = vocab::kEos;
  MimEngine mim(f, b, req);
  FimEngine fim(fim_lm, SamplingParams{});
  const SuiteReport m = synthetic_suite(mim, SyntheticTask::kBrackets, tasks);
  const SuiteReport g = synthetic_suite(fim, SyntheticTask::kBrackets, tasks);
  std::ofstream(dir / "report.json") << nlohmann::json{{"mim", m}, {"fim", g}}.dump(2) << '\n';
  const bool pass_rate = m.pass_rate > 0.9;
  const bool em = m.exact_match >= g.exact_match - 0.02;
  return {pass_rate && em, "MIM pass " + fmt(m.pass_rate) + " EM " + fmt(m.exact_match) + " rounds " +
                               fmt(m.mean_rounds, 3) + "; FIM pass " + fmt(g.pass_rate) + " EM " +
                               fmt(g.exact_match) + " rounds " + fmt(g.mean_rounds, 3) + "; " +
                               fmt(seconds_since(t0) / 60.0, 3) + " min"};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome(Context&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> selected;
  std::string work = "acceptance_work";
  bool verbose = false;
  app.add_option("--criterion,-c", selected, "criteria to run (default: all)")->check(CLI::Range(1, 11));
  app.add_option("--work", work, "scratch directory for training runs");
  app.add_flag("--verbose", verbose);
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "gradient fidelity", gradient_fidelity},     {2, "tv oracle", tv_oracle},
      {3, "causality", causality},                     {4, "backward symmetry", backward_symmetry},
      {5, "join soundness", join_soundness},           {6, "round-count bound", round_bound},
      {7, "training trend", training_trend},           {8, "lambda decoupling", lambda_decoupling},
      {9, "fim transform statistics", fim_statistics}, {10, "persistence and determinism", persistence},
      {11, "synthetic infilling quality", synthetic_quality},
  };
  Context ctx{fs::path(work), verbose};
  fs::create_directories(ctx.work);
  bool ok = true;
  for (const auto& c : all) {
    if (!selected.empty() && std::find(selected.begin(), selected.end(), c.id) == selected.end()) continue;
    Outcome o;
    try {
      o = c.run(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    ok = ok && o.pass;
    std::cout << "criterion " << c.id << " (" << c.name << "): " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail
              << std::endl;
  }
  return ok ? 0 : 1;
}
