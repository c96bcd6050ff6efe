#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mim/vocab.hpp"

namespace mim {

// ---------------------------------------------------------------------------
// Corpus

struct SourceFile {
  std::string path;
  std::size_t bytes = 0;
  std::size_t documents = 0;
};

struct CorpusManifest {
  std::vector<SourceFile> sources;
  double val_fraction = 0.0;
  std::uint64_t seed = 0;
  std::string delimiter = "\n\n";
  std::size_t train_documents = 0;
  std::size_t validation_documents = 0;
};

void to_json(nlohmann::json& j, const SourceFile& s);
void from_json(const nlohmann::json& j, SourceFile& s);
void to_json(nlohmann::json& j, const CorpusManifest& m);
void from_json(const nlohmann::json& j, CorpusManifest& m);

struct CorpusOptions {
  double val_fraction = 0.0;
  std::uint64_t seed = 0;
  // Documents are separated by this string; the default splits on blank lines.
  std::string delimiter = "\n\n";
};

// Immutable after construction. Train and validation never share a document
// slot (identical text may still appear in both if the source repeats it).
struct Corpus {
  std::vector<TokenSeq> train;
  std::vector<TokenSeq> validation;
  CorpusManifest manifest;
};

// Splits `text` on the delimiter, trimming surrounding newlines and dropping
// empty pieces.
std::vector<std::string> split_documents(std::string_view text, std::string_view delimiter);

Corpus build_corpus(const std::vector<std::filesystem::path>& paths, const CorpusOptions& options);
// Same as build_corpus over in-memory sources named "<memory:i>".
Corpus build_corpus_from_texts(const std::vector<std::string>& texts, const CorpusOptions& options);

std::string read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Stream batches

// Rows of equal (padded) length with per-position targets.
// targets[i] == -1 marks positions that are not scored.
struct StreamBatch {
  std::size_t rows = 0;
  std::size_t length = 0;
  std::vector<TokenId> inputs;
  std::vector<TokenId> targets;

  std::size_t scored_tokens() const;
};

struct TrainingRow {
  TokenSeq inputs;
  std::vector<TokenId> targets;
};

StreamBatch pack_rows(const std::vector<TrainingRow>& rows);

// Teacher-forcing row for one stream view of a document:
// inputs [dir, BOS, v_1..v_N], targets [-, v_1..v_N, EOS].
TrainingRow stream_row(std::span<const TokenId> doc, Direction direction);

// Forward (L2R) and backward (R2L) views of the same documents.
// alignment[k] = (flat fwd position, flat bwd position) of two predictions of
// the same token x_i; there is one entry per document token.
struct MimBatch {
  StreamBatch fwd;
  StreamBatch bwd;
  std::vector<std::pair<std::size_t, std::size_t>> alignment;
  std::vector<std::size_t> doc_lengths;
};

// Documents longer than context_len - 2 are truncated to their first
// context_len - 2 tokens.
MimBatch make_mim_batch(const std::vector<TokenSeq>& docs, std::size_t context_len);

// Throws AlignmentError if any aligned pair disagrees on its target.
void check_alignment(const MimBatch& batch);

// ---------------------------------------------------------------------------
// FIM transform

enum class FimLayout { kPlain, kPsm, kSpm };

struct FimExample {
  FimLayout layout = FimLayout::kPlain;
  TokenSeq ids;
  std::size_t cut_begin = 0;
  std::size_t cut_end = 0;
  std::string prefix;
  std::string middle;
  std::string suffix;

  bool transformed() const noexcept { return layout != FimLayout::kPlain; }
};

// PSM: [PRE] prefix [SUF] suffix [MID] middle [EOS]
// SPM: [SUF] suffix [PRE] prefix [MID] middle [EOS]
// Plain: [L2R, BOS] doc [EOS]
FimExample fim_layout(std::string_view doc, std::size_t cut_begin, std::size_t cut_end, FimLayout layout);

// With probability fim_rate splits at two uniform byte cut points and emits PSM
// (probability psm_rate) or SPM; otherwise emits the plain example.
FimExample apply_fim_transform(std::string_view doc, std::mt19937_64& rng, double fim_rate, double psm_rate);

// Recovers (prefix, middle, suffix) from a transformed id sequence.
struct FimParts {
  TokenSeq prefix;
  TokenSeq middle;
  TokenSeq suffix;
};
FimParts parse_fim(std::span<const TokenId> ids);

// Shifted teacher-forcing row. With middle_only, only positions predicting
// middle tokens and the final EOS are scored.
TrainingRow fim_row(const FimExample& example, bool middle_only);

// ---------------------------------------------------------------------------
// Sampling

// Deterministic per-step generator derived from a master seed.
std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step, std::uint64_t stream = 0);

std::uint64_t splitmix64(std::uint64_t x) noexcept;

// Draws random documents (random windows of at most max_len tokens for longer
// ones) until at least batch_tokens tokens are collected.
std::vector<TokenSeq> sample_windows(const std::vector<TokenSeq>& docs, std::mt19937_64& rng, std::size_t max_len,
                                     std::size_t batch_tokens);

}  // namespace mim
