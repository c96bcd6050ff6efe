#include "mim/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mim/errors.hpp"

namespace mim {

void to_json(nlohmann::json& j, const SourceFile& s) {
  j = nlohmann::json{{"path", s.path}, {"bytes", s.bytes}, {"documents", s.documents}};
}

void from_json(const nlohmann::json& j, SourceFile& s) {
  j.at("path").get_to(s.path);
  j.at("bytes").get_to(s.bytes);
  j.at("documents").get_to(s.documents);
}

void to_json(nlohmann::json& j, const CorpusManifest& m) {
  j = nlohmann::json{{"sources", m.sources},
                     {"val_fraction", m.val_fraction},
                     {"seed", m.seed},
                     {"delimiter", m.delimiter},
                     {"train_documents", m.train_documents},
                     {"validation_documents", m.validation_documents}};
}

void from_json(const nlohmann::json& j, CorpusManifest& m) {
  j.at("sources").get_to(m.sources);
  j.at("val_fraction").get_to(m.val_fraction);
  j.at("seed").get_to(m.seed);
  j.at("delimiter").get_to(m.delimiter);
  j.at("train_documents").get_to(m.train_documents);
  j.at("validation_documents").get_to(m.validation_documents);
}

std::vector<std::string> split_documents(std::string_view text, std::string_view delimiter) {
  if (delimiter.empty()) throw ConfigError("document delimiter must not be empty");
  std::vector<std::string> docs;
  auto push = [&docs](std::string_view piece) {
    while (!piece.empty() && (piece.front() == '\n' || piece.front() == '\r')) piece.remove_prefix(1);
    while (!piece.empty() && (piece.back() == '\n' || piece.back() == '\r')) piece.remove_suffix(1);
    if (!piece.empty()) docs.emplace_back(piece);
  };
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t hit = text.find(delimiter, start);
    if (hit == std::string_view::npos) {
      push(text.substr(start));
      break;
    }
    push(text.substr(start, hit - start));
    start = hit + delimiter.size();
  }
  return docs;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("error while reading " + path.string());
  return ss.str();
}

namespace {

Corpus split_corpus(std::vector<std::string> documents, std::vector<SourceFile> sources,
                    const CorpusOptions& options) {
  if (options.val_fraction < 0.0 || options.val_fraction > 1.0) {
    throw ConfigError("val_fraction must lie in [0, 1]");
  }
  std::vector<std::size_t> order(documents.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(options.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(options.val_fraction * static_cast<double>(documents.size())));

  Corpus corpus;
  for (std::size_t i = 0; i < order.size(); ++i) {
    TokenSeq ids = encode(documents[order[i]]);
    (i < n_val ? corpus.validation : corpus.train).push_back(std::move(ids));
  }
  corpus.manifest.sources = std::move(sources);
  corpus.manifest.val_fraction = options.val_fraction;
  corpus.manifest.seed = options.seed;
  corpus.manifest.delimiter = options.delimiter;
  corpus.manifest.train_documents = corpus.train.size();
  corpus.manifest.validation_documents = corpus.validation.size();
  return corpus;
}

}  // namespace

Corpus build_corpus(const std::vector<std::filesystem::path>& paths, const CorpusOptions& options) {
  if (paths.empty()) throw IoError("build_corpus: no input files");
  std::vector<std::string> documents;
  std::vector<SourceFile> sources;
  for (const auto& path : paths) {
    const std::string text = read_file(path);
    auto docs = split_documents(text, options.delimiter);
    sources.push_back({path.string(), text.size(), docs.size()});
    for (auto& d : docs) documents.push_back(std::move(d));
  }
  return split_corpus(std::move(documents), std::move(sources), options);
}

Corpus build_corpus_from_texts(const std::vector<std::string>& texts, const CorpusOptions& options) {
  std::vector<std::string> documents;
  std::vector<SourceFile> sources;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    auto docs = split_documents(texts[i], options.delimiter);
    sources.push_back({"<memory:" + std::to_string(i) + ">", texts[i].size(), docs.size()});
    for (auto& d : docs) documents.push_back(std::move(d));
  }
  return split_corpus(std::move(documents), std::move(sources), options);
}

std::size_t StreamBatch::scored_tokens() const {
  return static_cast<std::size_t>(std::count_if(targets.begin(), targets.end(), [](TokenId t) { return t >= 0; }));
}

StreamBatch pack_rows(const std::vector<TrainingRow>& rows) {
  if (rows.empty()) throw ContractError("pack_rows: no rows");
  StreamBatch batch;
  batch.rows = rows.size();
  for (const auto& r : rows) {
    if (r.inputs.size() != r.targets.size() || r.inputs.empty()) {
      throw ShapeError("pack_rows: inputs and targets must be non-empty and of equal length");
    }
    batch.length = std::max(batch.length, r.inputs.size());
  }
  batch.inputs.assign(batch.rows * batch.length, vocab::kPad);
  batch.targets.assign(batch.rows * batch.length, -1);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].inputs.begin(), rows[i].inputs.end(), batch.inputs.begin() + static_cast<std::ptrdiff_t>(i * batch.length));
    std::copy(rows[i].targets.begin(), rows[i].targets.end(), batch.targets.begin() + static_cast<std::ptrdiff_t>(i * batch.length));
  }
  return batch;
}

TrainingRow stream_row(std::span<const TokenId> doc, Direction direction) {
  TrainingRow row;
  row.inputs = reverse_with_sentinel(doc, direction);
  row.targets.assign(row.inputs.size(), -1);
  // Position p >= 1 predicts the token at p + 1; the last position predicts EOS.
  for (std::size_t p = 1; p + 1 < row.inputs.size(); ++p) row.targets[p] = row.inputs[p + 1];
  row.targets.back() = vocab::kEos;
  return row;
}

MimBatch make_mim_batch(const std::vector<TokenSeq>& docs, std::size_t context_len) {
  if (context_len < 4) throw ContractError("make_mim_batch: context_len must be at least 4");
  if (docs.empty()) throw ContractError("make_mim_batch: no documents");
  const std::size_t max_len = context_len - kStreamHead;
  std::vector<TrainingRow> fwd_rows, bwd_rows;
  MimBatch batch;
  for (const auto& doc : docs) {
    if (doc.empty()) throw ContractError("make_mim_batch: empty document");
    const std::span<const TokenId> view(doc.data(), std::min(doc.size(), max_len));
    fwd_rows.push_back(stream_row(view, Direction::kLeftToRight));
    bwd_rows.push_back(stream_row(view, Direction::kRightToLeft));
    batch.doc_lengths.push_back(view.size());
  }
  batch.fwd = pack_rows(fwd_rows);
  batch.bwd = pack_rows(bwd_rows);
  // x_i is predicted at forward position i and at backward position N - i + 1.
  for (std::size_t r = 0; r < docs.size(); ++r) {
    const std::size_t n = batch.doc_lengths[r];
    for (std::size_t i = 1; i <= n; ++i) {
      batch.alignment.emplace_back(r * batch.fwd.length + i, r * batch.bwd.length + mirror_position(i, n));
    }
  }
  return batch;
}

void check_alignment(const MimBatch& batch) {
  for (const auto& [f, b] : batch.alignment) {
    if (f >= batch.fwd.targets.size() || b >= batch.bwd.targets.size() ||
        batch.fwd.targets[f] != batch.bwd.targets[b] || batch.fwd.targets[f] < 0) {
      throw AlignmentError("MimBatch alignment mismatch at forward position " + std::to_string(f));
    }
  }
}

FimExample fim_layout(std::string_view doc, std::size_t cut_begin, std::size_t cut_end, FimLayout layout) {
  if (cut_begin > cut_end || cut_end > doc.size()) {
    throw ContractError("fim_layout: cut points must satisfy 0 <= begin <= end <= length");
  }
  FimExample ex;
  ex.layout = layout;
  ex.cut_begin = cut_begin;
  ex.cut_end = cut_end;
  ex.prefix = std::string(doc.substr(0, cut_begin));
  ex.middle = std::string(doc.substr(cut_begin, cut_end - cut_begin));
  ex.suffix = std::string(doc.substr(cut_end));
  auto append = [&ex](std::string_view s) {
    for (unsigned char c : s) ex.ids.push_back(static_cast<TokenId>(c));
  };
  switch (layout) {
    case FimLayout::kPlain:
      ex.ids = {vocab::kL2R, vocab::kBos};
      append(doc);
      break;
    case FimLayout::kPsm:
      ex.ids.push_back(vocab::kPre);
      append(ex.prefix);
      ex.ids.push_back(vocab::kSuf);
      append(ex.suffix);
      ex.ids.push_back(vocab::kMid);
      append(ex.middle);
      break;
    case FimLayout::kSpm:
      ex.ids.push_back(vocab::kSuf);
      append(ex.suffix);
      ex.ids.push_back(vocab::kPre);
      append(ex.prefix);
      ex.ids.push_back(vocab::kMid);
      append(ex.middle);
      break;
  }
  ex.ids.push_back(vocab::kEos);
  return ex;
}

FimExample apply_fim_transform(std::string_view doc, std::mt19937_64& rng, double fim_rate, double psm_rate) {
  if (fim_rate < 0.0 || fim_rate > 1.0 || psm_rate < 0.0 || psm_rate > 1.0) {
    throw ContractError("apply_fim_transform: rates must lie in [0, 1]");
  }
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (!(coin(rng) < fim_rate)) return fim_layout(doc, 0, 0, FimLayout::kPlain);
  std::uniform_int_distribution<std::size_t> cut(0, doc.size());
  std::size_t a = cut(rng);
  std::size_t b = cut(rng);
  if (a > b) std::swap(a, b);
  const FimLayout layout = coin(rng) < psm_rate ? FimLayout::kPsm : FimLayout::kSpm;
  return fim_layout(doc, a, b, layout);
}

FimParts parse_fim(std::span<const TokenId> ids) {
  auto find = [&ids](TokenId s) {
    const auto it = std::find(ids.begin(), ids.end(), s);
    if (it == ids.end()) {
      throw ContractError("parse_fim: missing <" + std::string(vocab::sentinel_name(s)) + ">");
    }
    return static_cast<std::size_t>(it - ids.begin());
  };
  const std::size_t pre = find(vocab::kPre);
  const std::size_t suf = find(vocab::kSuf);
  const std::size_t mid = find(vocab::kMid);
  std::size_t end = ids.size();
  if (end > 0 && ids[end - 1] == vocab::kEos) --end;
  auto slice = [&ids](std::size_t b, std::size_t e) { return TokenSeq(ids.begin() + static_cast<std::ptrdiff_t>(b), ids.begin() + static_cast<std::ptrdiff_t>(e)); };
  FimParts parts;
  if (pre < suf) {  // PSM
    parts.prefix = slice(pre + 1, suf);
    parts.suffix = slice(suf + 1, mid);
  } else {  // SPM
    parts.suffix = slice(suf + 1, pre);
    parts.prefix = slice(pre + 1, mid);
  }
  parts.middle = slice(mid + 1, end);
  return parts;
}

TrainingRow fim_row(const FimExample& example, bool middle_only) {
  const TokenSeq& ids = example.ids;
  TrainingRow row;
  row.inputs.assign(ids.begin(), ids.end() - 1);
  row.targets.assign(ids.begin() + 1, ids.end());
  if (example.layout == FimLayout::kPlain) {
    row.targets[0] = -1;  // L2R -> BOS is not a prediction
    return row;
  }
  if (middle_only) {
    const auto mid = static_cast<std::size_t>(std::find(ids.begin(), ids.end(), vocab::kMid) - ids.begin());
    // Target index t predicts ids[t + 1]; keep t + 1 > mid.
    for (std::size_t t = 0; t + 1 <= mid && t < row.targets.size(); ++t) row.targets[t] = -1;
  }
  return row;
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step, std::uint64_t stream) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ splitmix64(step * 0x100000001b3ULL + stream)));
}

std::vector<TokenSeq> sample_windows(const std::vector<TokenSeq>& docs, std::mt19937_64& rng, std::size_t max_len,
                                     std::size_t batch_tokens) {
  if (docs.empty()) throw ContractError("sample_windows: no documents");
  if (max_len == 0) throw ContractError("sample_windows: max_len must be positive");
  std::uniform_int_distribution<std::size_t> pick(0, docs.size() - 1);
  std::vector<TokenSeq> out;
  std::size_t tokens = 0;
  while (tokens < batch_tokens) {
    const TokenSeq& doc = docs[pick(rng)];
    if (doc.empty()) continue;
    std::size_t start = 0;
    const std::size_t len = std::min(doc.size(), max_len);
    if (doc.size() > max_len) {
      std::uniform_int_distribution<std::size_t> offset(0, doc.size() - max_len);
      start = offset(rng);
    }
    out.emplace_back(doc.begin() + static_cast<std::ptrdiff_t>(start), doc.begin() + static_cast<std::ptrdiff_t>(start + len));
    tokens += len;
  }
  return out;
}

}  // namespace mim
