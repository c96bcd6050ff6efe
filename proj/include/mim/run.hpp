#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mim/checkpoint.hpp"
#include "mim/data.hpp"
#include "mim/eval.hpp"
#include "mim/model.hpp"
#include "mim/training.hpp"

namespace mim {

struct DataConfig {
  std::vector<std::string> corpus;  // text files; documents split on `delimiter`
  std::string synthetic;            // "brackets" or "arithmetic" instead of files
  std::size_t synthetic_count = 100000;
  double val_fraction = 0.05;
  std::string delimiter = "\n\n";
  std::uint64_t seed = 0;  // split and synthetic generation

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string out_dir = "runs/default";
  std::size_t checkpoint_every = 500;  // 0 keeps only the final checkpoint
  std::size_t log_every = 10;
  std::size_t eval_docs = 256;         // held-out documents in the final report

  // Throws ConfigError naming the field.
  void validate() const;
};

void to_json(nlohmann::json& j, const DataConfig& c);
void from_json(const nlohmann::json& j, DataConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

// Applies "section.key=value" overrides to a config document. The value is
// parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& config, std::string_view assignment);

// Hash of everything that affects the trained weights (model, train, data);
// output paths and logging cadence are excluded.
std::string config_hash(const RunConfig& config);

Corpus load_run_corpus(const DataConfig& data);

struct MetricsRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double nll_fwd = 0.0;
  double nll_bwd = 0.0;
  double tv_mean = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  std::uint64_t tokens_seen = 0;
  double wall_ms = 0.0;
};

void to_json(nlohmann::json& j, const MetricsRecord& r);
void from_json(const nlohmann::json& j, MetricsRecord& r);

struct TrainingState {
  Parameters<float> params;
  OptimizerState<float> optimizer;
  std::uint64_t step = 0;
  std::uint64_t tokens_seen = 0;
};

TrainingState init_training(const RunConfig& config);
// Throws ConfigError if the checkpoint was written by a different config.
TrainingState resume_training(const RunConfig& config, const std::filesystem::path& checkpoint);

// Runs steps [state.step, until). `on_step` sees every step's record.
void train_until(const RunConfig& config, const std::vector<TokenSeq>& docs, TrainingState& state,
                 std::uint64_t until, const std::function<void(const MetricsRecord&)>& on_step);

CheckpointData to_checkpoint(const RunConfig& config, const TrainingState& state, bool with_optimizer = true);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::optional<std::uint64_t> stop_after;  // simulate an interruption
  bool quiet = true;
};

struct TrainSummary {
  std::uint64_t final_step = 0;
  std::filesystem::path checkpoint;
  nlohmann::json report;
};

// Writes <out_dir>/config.json, metrics.jsonl (appended on resume),
// ckpt-<step>.bin every checkpoint_every steps, final.bin and report.json.
TrainSummary run_training(const RunConfig& config, const TrainOptions& options = {});

// Held-out perplexity in both directions plus TV agreement.
nlohmann::json evaluation_report(const Parameters<float>& params, const std::vector<TokenSeq>& docs,
                                 const ReportMeta& meta);

}  // namespace mim
