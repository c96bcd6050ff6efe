#include "mim/run.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <iostream>

#include "mim/errors.hpp"

namespace mim {

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (!model.sentinel_compatible()) throw ConfigError("model.vocab_size: training on text needs the byte vocabulary");
  if (data.corpus.empty() && data.synthetic.empty()) throw ConfigError("data.corpus: no corpus files or synthetic task");
  if (!data.corpus.empty() && !data.synthetic.empty()) throw ConfigError("data.synthetic: set either corpus or synthetic");
  if (!data.synthetic.empty()) parse_synthetic_task(data.synthetic);
  if (!data.synthetic.empty() && data.synthetic_count == 0) throw ConfigError("data.synthetic_count: must be positive");
  if (!(data.val_fraction >= 0.0 && data.val_fraction < 1.0)) throw ConfigError("data.val_fraction: must lie in [0, 1)");
  if (data.delimiter.empty()) throw ConfigError("data.delimiter: must not be empty");
  if (out_dir.empty()) throw ConfigError("out_dir: must not be empty");
  if (log_every == 0) throw ConfigError("log_every: must be positive");
}

void to_json(nlohmann::json& j, const DataConfig& c) {
  j = {{"corpus", c.corpus},
       {"synthetic", c.synthetic},
       {"synthetic_count", c.synthetic_count},
       {"val_fraction", c.val_fraction},
       {"delimiter", c.delimiter},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, DataConfig& c) {
  DataConfig d;
  if (j.contains("corpus")) {
    const auto& v = j.at("corpus");
    c.corpus = v.is_string() ? std::vector<std::string>{v.get<std::string>()} : v.get<std::vector<std::string>>();
  } else {
    c.corpus = d.corpus;
  }
  c.synthetic = j.value("synthetic", d.synthetic);
  c.synthetic_count = j.value("synthetic_count", d.synthetic_count);
  c.val_fraction = j.value("val_fraction", d.val_fraction);
  c.delimiter = j.value("delimiter", d.delimiter);
  c.seed = j.value("seed", d.seed);
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"model", c.model},
       {"train", c.train},
       {"data", c.data},
       {"out_dir", c.out_dir},
       {"checkpoint_every", c.checkpoint_every},
       {"log_every", c.log_every},
       {"eval_docs", c.eval_docs}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  static const std::vector<std::string> kKeys{"model",      "train",           "data",     "out_dir",
                                              "checkpoint_every", "log_every", "eval_docs"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(kKeys.begin(), kKeys.end(), key) == kKeys.end()) throw ConfigError("unknown config key '" + key + "'");
  }
  RunConfig d;
  c.model = j.value("model", nlohmann::json::object()).get<ModelConfig>();
  c.train = j.value("train", nlohmann::json::object()).get<TrainConfig>();
  c.data = j.value("data", nlohmann::json::object()).get<DataConfig>();
  c.out_dir = j.value("out_dir", d.out_dir);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.log_every = j.value("log_every", d.log_every);
  c.eval_docs = j.value("eval_docs", d.eval_docs);
}

void apply_override(nlohmann::json& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "': expected key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &config;
  std::size_t from = 0;
  for (;;) {
    const auto dot = key.find('.', from);
    const std::string part = key.substr(from, dot - from);
    if (part.empty()) throw ConfigError("override '" + key + "': empty key segment");
    if (!node->is_object()) *node = nlohmann::json::object();
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    from = dot + 1;
  }
}

std::string config_hash(const RunConfig& config) {
  const nlohmann::json j = {{"model", config.model}, {"train", config.train}, {"data", config.data}};
  return hex64(fnv1a(j.dump()));
}

Corpus load_run_corpus(const DataConfig& data) {
  CorpusOptions options;
  options.val_fraction = data.val_fraction;
  options.delimiter = data.delimiter;
  options.seed = data.seed;
  if (!data.synthetic.empty()) {
    const SyntheticTask task = parse_synthetic_task(data.synthetic);
    std::string text;
    for (const auto& doc : synthetic_corpus(task, data.synthetic_count, data.seed)) {
      text += doc;
      text += '\n';
    }
    options.delimiter = "\n";
    return build_corpus_from_texts({text}, options);
  }
  std::vector<std::filesystem::path> paths(data.corpus.begin(), data.corpus.end());
  return build_corpus(paths, options);
}

void to_json(nlohmann::json& j, const MetricsRecord& r) {
  j = {{"step", r.step},       {"lr", r.lr},       {"nll_fwd", r.nll_fwd},         {"nll_bwd", r.nll_bwd},
       {"tv_mean", r.tv_mean}, {"total", r.total}, {"grad_norm", r.grad_norm},     {"tokens_seen", r.tokens_seen},
       {"wall_ms", r.wall_ms}};
}

void from_json(const nlohmann::json& j, MetricsRecord& r) {
  r.step = j.at("step").get<std::uint64_t>();
  r.lr = j.at("lr").get<double>();
  r.nll_fwd = j.at("nll_fwd").get<double>();
  r.nll_bwd = j.at("nll_bwd").get<double>();
  r.tv_mean = j.at("tv_mean").get<double>();
  r.total = j.at("total").get<double>();
  r.grad_norm = j.value("grad_norm", 0.0);
  r.tokens_seen = j.at("tokens_seen").get<std::uint64_t>();
  r.wall_ms = j.value("wall_ms", 0.0);
}

TrainingState init_training(const RunConfig& config) {
  TrainingState s;
  s.params = init_parameters<float>(config.model, config.train.seed);
  s.optimizer = init_optimizer(s.params);
  return s;
}

TrainingState resume_training(const RunConfig& config, const std::filesystem::path& checkpoint) {
  CheckpointData ck = load_checkpoint(checkpoint, config_hash(config));
  if (!ck.optimizer) throw ConfigError(checkpoint.string() + ": no optimizer state to resume from");
  TrainingState s;
  s.params = std::move(ck.params);
  s.optimizer = std::move(*ck.optimizer);
  s.step = ck.step;
  s.tokens_seen = ck.tokens_seen;
  return s;
}

void train_until(const RunConfig& config, const std::vector<TokenSeq>& docs, TrainingState& state,
                 std::uint64_t until, const std::function<void(const MetricsRecord&)>& on_step) {
  using clock = std::chrono::steady_clock;
  const bool fused = config.model.lambda > 0.0;
  while (state.step < until) {
    const auto t0 = clock::now();
    const TrainingBatch batch = make_training_batch(docs, config.train, config.model.context_len, state.step);
    const StepReport r = fused ? two_stage_step(state.params, state.optimizer, batch, config.train)
                               : train_step(state.params, state.optimizer, batch, config.train);
    state.tokens_seen += batch.tokens;
    MetricsRecord m;
    m.step = state.step;
    m.lr = r.lr;
    m.nll_fwd = r.loss.nll_fwd;
    m.nll_bwd = r.loss.nll_bwd;
    m.tv_mean = r.loss.tv_mean;
    m.total = r.loss.total;
    m.grad_norm = r.grad_norm;
    m.tokens_seen = state.tokens_seen;
    m.wall_ms = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    ++state.step;
    if (on_step) on_step(m);
  }
}

CheckpointData to_checkpoint(const RunConfig& config, const TrainingState& state, bool with_optimizer) {
  CheckpointData ck;
  ck.params = state.params;
  if (with_optimizer) ck.optimizer = state.optimizer;
  ck.run_config = config;
  ck.config_hash = config_hash(config);
  ck.step = state.step;
  ck.tokens_seen = state.tokens_seen;
  return ck;
}

nlohmann::json evaluation_report(const Parameters<float>& params, const std::vector<TokenSeq>& docs,
                                 const ReportMeta& meta) {
  const AgreementReport a = held_out_agreement(params, docs);
  nlohmann::json j = a;
  j["meta"] = meta;
  j["documents"] = docs.size();
  return j;
}

namespace {

std::vector<TokenSeq> report_docs(const Corpus& corpus, std::size_t limit) {
  const auto& src = corpus.validation.empty() ? corpus.train : corpus.validation;
  return {src.begin(), src.begin() + static_cast<std::ptrdiff_t>(std::min(limit, src.size()))};
}

}  // namespace

TrainSummary run_training(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  const Corpus corpus = load_run_corpus(config.data);
  if (corpus.train.empty()) throw ConfigError("data: the training split is empty");
  const std::filesystem::path dir(config.out_dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "config.json");
    f << nlohmann::json(config).dump(2) << '\n';
    std::ofstream m(dir / "manifest.json");
    m << nlohmann::json(corpus.manifest).dump(2) << '\n';
  }

  TrainingState state = options.resume ? resume_training(config, *options.resume) : init_training(config);
  std::ofstream metrics(dir / "metrics.jsonl", options.resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + (dir / "metrics.jsonl").string());

  const std::uint64_t total = config.train.total_steps;
  const std::uint64_t until = options.stop_after ? std::min<std::uint64_t>(*options.stop_after, total) : total;
  auto save = [&](const std::filesystem::path& path) {
    save_checkpoint(path, to_checkpoint(config, state));
    return path;
  };
  TrainSummary summary;
  while (state.step < until) {
    std::uint64_t next = until;
    if (config.checkpoint_every > 0) {
      next = std::min<std::uint64_t>(until, (state.step / config.checkpoint_every + 1) * config.checkpoint_every);
    }
    train_until(config, corpus.train, state, next, [&](const MetricsRecord& m) {
      if (m.step % config.log_every == 0 || m.step + 1 == total) {
        metrics << nlohmann::json(m).dump() << '\n';
        metrics.flush();
        if (!options.quiet) {
          std::cerr << "step " << m.step << " lr " << m.lr << " nll_fwd " << m.nll_fwd << " nll_bwd " << m.nll_bwd
                    << " tv " << m.tv_mean << '\n';
        }
      }
    });
    if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0) {
      summary.checkpoint = save(dir / ("ckpt-" + std::to_string(state.step) + ".bin"));
    }
  }
  summary.final_step = state.step;
  if (state.step < total) {
    summary.checkpoint = save(dir / ("ckpt-" + std::to_string(state.step) + ".bin"));
    return summary;
  }
  summary.checkpoint = save(dir / "final.bin");
  ReportMeta meta{config_hash(config), file_hash(summary.checkpoint), config.train.seed};
  summary.report = evaluation_report(state.params, report_docs(corpus, config.eval_docs), meta);
  summary.report["mode"] = to_string(config.train.mode);
  summary.report["step"] = state.step;
  std::ofstream(dir / "report.json") << summary.report.dump(2) << '\n';
  return summary;
}

}  // namespace mim
