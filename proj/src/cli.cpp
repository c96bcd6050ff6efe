#include "mim/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>

#include "CLI11.hpp"
#include "mim/errors.hpp"
#include "mim/eval.hpp"
#include "mim/run.hpp"

namespace mim {

namespace {

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("MIM_SEED");
  if (v == nullptr || *v == '\0') return std::nullopt;
  char* end = nullptr;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (*end != '\0') throw ConfigError(std::string("MIM_SEED: not an unsigned integer: '") + v + "'");
  return s;
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void write_report(const nlohmann::json& report, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << report.dump(2) << '\n';
    return;
  }
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) throw IoError("cannot write " + path);
  f << report.dump(2) << '\n';
}

struct Loaded {
  CheckpointData data;
  RunConfig config;
  std::shared_ptr<const Parameters<float>> params;
  ReportMeta meta;
};

Loaded load(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path);
  Loaded l;
  l.data = load_checkpoint(path);
  l.config = l.data.run_config.get<RunConfig>();
  l.params = std::make_shared<const Parameters<float>>(l.data.params);
  l.meta = {l.data.config_hash, file_hash(path), l.config.train.seed};
  return l;
}

void require_sentinels(const ModelConfig& c, const std::string& what) {
  if (!c.sentinel_compatible()) {
    throw ConfigError(what + ": checkpoint vocabulary (" + std::to_string(c.vocab_size) +
                      " ids) has no sentinel tokens");
  }
}

std::vector<TokenSeq> corpus_docs(const std::vector<std::string>& files) {
  for (const auto& f : files) {
    if (!std::filesystem::exists(f)) throw IoError("dataset not found: " + f);
  }
  CorpusOptions options;
  const Corpus c = build_corpus(std::vector<std::filesystem::path>(files.begin(), files.end()), options);
  return c.train;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string mode;
  std::optional<double> beta;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> corpus;
  std::string synthetic;
  std::string out_dir;
  std::string resume;
  std::optional<std::uint64_t> stop_after;
  bool verbose = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  nlohmann::json doc = a.config.empty() ? nlohmann::json::object() : read_json_file(a.config);
  const bool seed_in_config = doc.contains("train") && doc["train"].contains("seed");
  for (const auto& o : a.overrides) apply_override(doc, o);
  if (!a.mode.empty()) apply_override(doc, "train.mode=\"" + a.mode + "\"");
  if (a.beta) doc["train"]["beta"] = *a.beta;
  if (a.steps) doc["train"]["total_steps"] = *a.steps;
  if (a.seed) {
    doc["train"]["seed"] = *a.seed;
  } else if (!seed_in_config && !(doc.contains("train") && doc["train"].contains("seed"))) {
    if (auto s = env_seed()) doc["train"]["seed"] = *s;
  }
  if (!a.corpus.empty()) doc["data"]["corpus"] = a.corpus;
  if (!a.synthetic.empty()) doc["data"]["synthetic"] = a.synthetic;
  if (!a.out_dir.empty()) doc["out_dir"] = a.out_dir;
  const RunConfig config = doc.get<RunConfig>();
  config.validate();
  for (const auto& f : config.data.corpus) {
    if (!std::filesystem::exists(f)) throw IoError("corpus not found: " + f);
  }
  TrainOptions options;
  if (!a.resume.empty()) options.resume = a.resume;
  options.stop_after = a.stop_after;
  options.quiet = !a.verbose;
  const TrainSummary s = run_training(config, options);
  out << nlohmann::json{{"step", s.final_step},
                        {"checkpoint", s.checkpoint.string()},
                        {"config_hash", config_hash(config)},
                        {"mode", to_string(config.train.mode)},
                        {"report", s.report}}
             .dump(2)
      << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct DecodeArgs {
  std::size_t ngram = 4;
  std::size_t budget = 64;
  double top_p = 0.95;
  double temperature = 0.0;
  std::optional<std::uint64_t> seed;
  bool concurrent = false;
  std::optional<double> tau;
  std::size_t verifications = 1;
  bool verify_suffix = false;
  bool document_end = false;
};

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& seed) {
  if (seed) return *seed;
  return env_seed().value_or(0);
}

InfillRequest make_request(const DecodeArgs& d) {
  InfillRequest req;
  req.ngram = d.ngram;
  req.budget = d.budget;
  req.concurrent = d.concurrent;
  req.sampling.top_p = d.top_p;
  req.sampling.temperature = d.temperature;
  req.sampling.seed = resolve_seed(d.seed);
  req.sampling.max_tokens = d.budget;
  if (d.tau) {
    req.criterion = VerifyCriterion::kThreshold;
    req.tau = *d.tau;
  }
  req.verifications_per_round = d.verifications;
  req.verify_suffix = d.verify_suffix;
  if (d.document_end) req.suffix_end = vocab::kEos;
  return req;
}

SamplingParams fim_sampling(const DecodeArgs& d) {
  SamplingParams s;
  s.top_p = d.top_p;
  s.temperature = d.temperature;
  s.seed = resolve_seed(d.seed);
  s.max_tokens = 2 * d.budget;
  return s;
}

struct InfillArgs {
  std::string checkpoint;
  std::string prefix;
  std::string suffix;
  std::string mode = "mim";
  DecodeArgs decode;
  bool json = false;
};

int cmd_infill(const InfillArgs& a, std::ostream& out) {
  const Loaded l = load(a.checkpoint);
  require_sentinels(l.params->config, "--mode " + a.mode);
  const TokenSeq prefix = encode(a.prefix);
  const TokenSeq suffix = encode(a.suffix);
  if (a.mode == "fim") {
    TransformerLM lm(l.params);
    const FimResult r = fim_infill(lm, prefix, suffix, fim_sampling(a.decode));
    if (a.json) {
      out << nlohmann::json{{"mode", "fim"}, {"middle", r.middle}, {"text", render(r.middle)}, {"rounds", r.rounds}}
                 .dump(2)
          << '\n';
    } else {
      out << render(r.middle) << '\n';
    }
    return kExitOk;
  }
  TransformerLM fwd(l.params), bwd(l.params);
  InfillRequest req = make_request(a.decode);
  req.prefix = prefix;
  req.suffix = suffix;
  const InfillResult r = mim_infill(fwd, bwd, req);
  if (a.json) {
    nlohmann::json j = r;
    j["mode"] = "mim";
    j["text"] = render(r.middle);
    out << j.dump(2) << '\n';
  } else {
    out << render(r.middle) << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::vector<std::string> corpus;
  std::string split = "validation";
  std::size_t max_docs = 256;
  std::string task;
  std::size_t lines = 0;
  std::size_t examples = 200;
  std::string engine = "mim";
  std::uint64_t data_seed = 1;
  DecodeArgs decode;
  std::string out;
};

std::unique_ptr<InfillEngine> make_engine(const std::string& kind, LanguageModel& a, LanguageModel& b,
                                          const DecodeArgs& d) {
  if (kind == "fim") return std::make_unique<FimEngine>(a, fim_sampling(d));
  return std::make_unique<MimEngine>(a, b, make_request(d));
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Loaded l = load(a.checkpoint);
  require_sentinels(l.params->config, "eval");
  std::vector<TokenSeq> docs;
  std::string source;
  if (!a.corpus.empty()) {
    docs = corpus_docs(a.corpus);
    source = "files";
  } else {
    const Corpus c = load_run_corpus(l.config.data);
    docs = a.split == "train" || c.validation.empty() ? c.train : c.validation;
    source = a.split == "train" || c.validation.empty() ? "train" : "validation";
  }
  if (docs.empty()) throw IoError("eval: the dataset has no documents");
  docs.resize(std::min(docs.size(), a.max_docs));

  nlohmann::json report = evaluation_report(*l.params, docs, l.meta);
  report["split"] = source;
  TransformerLM fwd(l.params), bwd(l.params);
  if (!a.task.empty()) {
    const SyntheticTask task = parse_synthetic_task(a.task);
    // Synthetic examples are whole documents: the suffix ends the document.
    DecodeArgs d = a.decode;
    d.document_end = true;
    auto engine = make_engine(a.engine, fwd, bwd, d);
    report["synthetic"] = synthetic_suite(*engine, task, synthetic_examples(task, a.examples, a.data_seed));
    report["synthetic"]["engine"] = engine->name();
  }
  if (a.lines > 0) {
    const auto ex = line_infill_examples(docs, a.lines, a.data_seed);
    if (ex.empty()) throw IoError("eval: no multi-line documents for line infilling");
    auto engine = make_engine(a.engine, fwd, bwd, a.decode);
    report["line_infill"] = exact_match_infill(*engine, ex);
    report["line_infill"]["engine"] = engine->name();
  }
  write_report(report, a.out, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string checkpoint;
  std::string fim_checkpoint;
  std::string task = "brackets";
  std::string mock;
  std::size_t middle = 32;
  std::size_t examples = 50;
  std::uint64_t data_seed = 1;
  bool per_example = false;
  DecodeArgs decode;
  std::string out;
};

// Distinct byte ids so that the scripted streams never repeat an n-gram.
std::vector<InfillExample> mock_examples(std::size_t m, std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<InfillExample> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<TokenId> ids(256);
    std::iota(ids.begin(), ids.end(), 0);
    std::shuffle(ids.begin(), ids.end(), rng);
    InfillExample ex;
    ex.prefix.assign(ids.begin(), ids.begin() + 8);
    ex.middle.assign(ids.begin() + 8, ids.begin() + 8 + static_cast<std::ptrdiff_t>(m));
    ex.suffix.assign(ids.begin() + 8 + static_cast<std::ptrdiff_t>(m), ids.begin() + 16 + static_cast<std::ptrdiff_t>(m));
    out.push_back(std::move(ex));
  }
  return out;
}

// Scripted models for one example at a time; the engine looks them up by prefix.
class MockEngine final : public InfillEngine {
 public:
  MockEngine(std::string kind, bool fim, InfillRequest base, const std::vector<InfillExample>& examples)
      : kind_(std::move(kind)), fim_(fim), base_(std::move(base)) {
    for (const auto& e : examples) examples_.emplace(e.prefix, e);
  }
  std::string name() const override { return fim_ ? "fim" : "mim"; }
  EngineOutput run(const TokenSeq& prefix, const TokenSeq& suffix) override {
    const InfillExample& ex = examples_.at(prefix);
    if (fim_) {
      ScriptedLM lm(ex.middle, 0.9, 0, vocab::kMid);
      return FimEngine(lm, base_.sampling).run(prefix, suffix);
    }
    TokenSeq fdoc = prefix, bdoc = prefix;
    fdoc.insert(fdoc.end(), ex.middle.begin(), ex.middle.end());
    if (kind_ == "agreeing") {
      bdoc = fdoc;
    } else {
      // The backward model believes in a different middle.
      for (TokenId t : ex.middle) bdoc.push_back(static_cast<TokenId>(255 - t));
    }
    fdoc.insert(fdoc.end(), suffix.begin(), suffix.end());
    bdoc.insert(bdoc.end(), suffix.begin(), suffix.end());
    std::reverse(bdoc.begin(), bdoc.end());
    ScriptedLM f(fdoc), b(bdoc);
    return MimEngine(f, b, base_).run(prefix, suffix);
  }

 private:
  std::string kind_;
  bool fim_;
  InfillRequest base_;
  std::map<TokenSeq, InfillExample> examples_;
};

int cmd_bench(const BenchArgs& a, std::ostream& out) {
  nlohmann::json report;
  LatencyReport r;
  if (!a.mock.empty()) {
    if (a.mock != "agreeing" && a.mock != "disagreeing") throw ConfigError("--mock: expected agreeing or disagreeing");
    if (a.middle == 0 || a.middle > 240) throw ConfigError("--middle: must lie in [1, 240]");
    const auto ex = mock_examples(a.middle, a.examples, a.data_seed);
    MockEngine mim(a.mock, false, make_request(a.decode), ex);
    MockEngine fim(a.mock, true, make_request(a.decode), ex);
    r = step_count_benchmark(mim, fim, ex);
    report["mock"] = a.mock;
    report["middle_tokens"] = a.middle;
    report["ngram"] = a.decode.ngram;
    report["bound"] = (a.middle + a.decode.ngram + 1) / 2 + 1;
    std::size_t worst = 0;
    for (const auto& e : r.examples) worst = std::max(worst, e.mim_rounds);
    report["max_mim_rounds"] = worst;
  } else {
    if (a.checkpoint.empty()) throw ConfigError("bench: --checkpoint or --mock is required");
    const Loaded l = load(a.checkpoint);
    require_sentinels(l.params->config, "bench");
    const Loaded f = a.fim_checkpoint.empty() ? l : load(a.fim_checkpoint);
    require_sentinels(f.params->config, "bench --fim-checkpoint");
    std::vector<InfillExample> ex;
    if (a.task == "lines") {
      const Corpus c = load_run_corpus(l.config.data);
      ex = line_infill_examples(c.validation.empty() ? c.train : c.validation, a.examples, a.data_seed);
      if (ex.empty()) throw IoError("bench: no multi-line documents for line infilling");
    } else {
      ex = synthetic_examples(parse_synthetic_task(a.task), a.examples, a.data_seed);
    }
    TransformerLM fwd(l.params), bwd(l.params), fim_lm(f.params);
    MimEngine mim(fwd, bwd, make_request(a.decode));
    FimEngine fim(fim_lm, fim_sampling(a.decode));
    r = step_count_benchmark(mim, fim, ex);
    report["meta"] = l.meta;
    report["task"] = a.task;
  }
  nlohmann::json body = r;
  if (!a.per_example) body.erase("examples");
  report.update(body);
  write_report(report, a.out, out);
  return kExitOk;
}

void add_decode_flags(CLI::App* app, DecodeArgs& d) {
  app->add_option("--ngram", d.ngram, "n-gram length for meet detection")->check(CLI::Range(1, 64));
  app->add_option("--budget", d.budget, "maximum tokens per side")->check(CLI::Range(1, 1 << 20));
  app->add_option("--top-p", d.top_p, "nucleus mass")->check(CLI::Range(0.0, 1.0));
  app->add_option("--temperature", d.temperature, "0 decodes greedily")->check(CLI::NonNegativeNumber);
  app->add_option("--seed", d.seed, "sampling seed (falls back to MIM_SEED)");
  app->add_flag("--concurrent", d.concurrent, "run both sides on separate threads");
  app->add_option("--tau", d.tau, "accept verified tokens with probability >= tau instead of greedy agreement")
      ->check(CLI::Range(0.0, 1.0));
  app->add_option("--verifications", d.verifications, "meet candidates verified per round")
      ->check(CLI::Range(1, 1024));
  app->add_flag("--verify-suffix", d.verify_suffix, "verify joins through the suffix");
  app->add_flag("--document-end", d.document_end, "the suffix ends the document (verified with EOS)");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bidirectional language model training, infilling and evaluation", "mim"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model");
  t->add_option("--config", train.config, "JSON run configuration");
  t->add_option("--set", train.overrides, "override a config field, e.g. train.beta=0.1");
  t->add_option("--mode", train.mode, "ar, fim or mim")->check(CLI::IsMember({"ar", "fim", "mim"}, CLI::ignore_case));
  t->add_option("--beta", train.beta, "agreement weight")->check(CLI::NonNegativeNumber);
  t->add_option("--steps", train.steps, "total optimizer steps")->check(CLI::PositiveNumber);
  t->add_option("--seed", train.seed, "run seed (falls back to MIM_SEED)");
  t->add_option("--corpus", train.corpus, "corpus text files");
  t->add_option("--synthetic", train.synthetic, "brackets or arithmetic");
  t->add_option("--out", train.out_dir, "output directory");
  t->add_option("--resume", train.resume, "checkpoint to resume from");
  t->add_option("--stop-after", train.stop_after, "stop (with a checkpoint) after this many steps");
  t->add_flag("--verbose", train.verbose, "log progress to stderr");

  InfillArgs infill;
  auto* i = app.add_subcommand("infill", "fill the gap between a prefix and a suffix");
  i->add_option("--checkpoint", infill.checkpoint)->required();
  i->add_option("--prefix", infill.prefix, "text before the gap");
  i->add_option("--suffix", infill.suffix, "text after the gap");
  i->add_option("--mode", infill.mode, "mim or fim")->check(CLI::IsMember({"mim", "fim"}));
  i->add_flag("--json", infill.json, "print the full result as JSON");
  add_decode_flags(i, infill.decode);

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "perplexity, agreement and infilling quality");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--corpus", eval.corpus, "evaluate on these files instead of the training data");
  e->add_option("--split", eval.split, "train or validation")->check(CLI::IsMember({"train", "validation"}));
  e->add_option("--max-docs", eval.max_docs, "documents scored")->check(CLI::PositiveNumber);
  e->add_option("--task", eval.task, "synthetic infilling suite: brackets or arithmetic");
  e->add_option("--lines", eval.lines, "masked-line exact-match examples");
  e->add_option("--examples", eval.examples, "synthetic examples")->check(CLI::PositiveNumber);
  e->add_option("--engine", eval.engine, "mim or fim")->check(CLI::IsMember({"mim", "fim"}));
  e->add_option("--data-seed", eval.data_seed, "seed for the evaluation examples");
  e->add_option("--out", eval.out, "write the report here instead of stdout");
  add_decode_flags(e, eval.decode);

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "sequential-round comparison of two-sided and FIM infilling");
  b->add_option("--checkpoint", bench.checkpoint, "model for the two-sided engine");
  b->add_option("--fim-checkpoint", bench.fim_checkpoint, "model for the FIM path (defaults to --checkpoint)");
  b->add_option("--task", bench.task, "brackets, arithmetic or lines")
      ->check(CLI::IsMember({"brackets", "arithmetic", "lines"}));
  b->add_option("--mock", bench.mock, "agreeing or disagreeing scripted models instead of a checkpoint");
  b->add_option("--middle", bench.middle, "middle length for --mock");
  b->add_option("--examples", bench.examples)->check(CLI::PositiveNumber);
  b->add_option("--data-seed", bench.data_seed);
  b->add_flag("--per-example", bench.per_example, "include every example in the report");
  b->add_option("--out", bench.out, "write the report here instead of stdout");
  add_decode_flags(b, bench.decode);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& ex) {
    err << "mim: " << ex.what() << '\n';
    return kExitUsage;
  }

  try {
    if (t->parsed()) return cmd_train(train, out);
    if (i->parsed()) return cmd_infill(infill, out);
    if (e->parsed()) return cmd_eval(eval, out);
    if (b->parsed()) return cmd_bench(bench, out);
  } catch (const ConfigError& ex) {
    err << "mim: config error: " << ex.what() << '\n';
    return kExitConfig;
  } catch (const IoError& ex) {
    err << "mim: i/o error: " << ex.what() << '\n';
    return kExitIo;
  } catch (const std::exception& ex) {
    err << "mim: " << ex.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace mim
