#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "mim/data.hpp"
#include "mim/errors.hpp"
#include "mim/vocab.hpp"

using namespace mim;

namespace {

TokenSeq random_doc(std::mt19937_64& rng, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::uniform_int_distribution<int> byte(0, 255);
  TokenSeq d(len(rng));
  for (auto& t : d) t = byte(rng);
  return d;
}

}  // namespace

TEST_CASE("encode and decode") {
  CHECK(encode("").empty());
  CHECK(decode(TokenSeq{}).empty());
  CHECK(encode("ab") == TokenSeq{97, 98});

  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> byte(0, 255);
  std::string blob(1024, '\0');
  for (auto& c : blob) c = static_cast<char>(byte(rng));
  auto ids = encode(blob);
  for (auto id : ids) CHECK(vocab::is_byte(id));
  CHECK(decode(ids) == blob);

  try {
    decode(TokenSeq{97, vocab::kMid});
    FAIL("expected a contract error");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("MID") != std::string::npos);
  }
  CHECK_THROWS_AS(decode(TokenSeq{300}), IndexError);
}

TEST_CASE("sentinel ids are fixed and distinct from bytes") {
  std::set<TokenId> ids;
  for (std::string_view name : {"BOS", "EOS", "L2R", "R2L", "PRE", "SUF", "MID", "PAD"}) {
    auto id = vocab::sentinel_by_name(name);
    REQUIRE(id.has_value());
    CHECK(*id >= 256);
    CHECK(*id < 264);
    CHECK(vocab::sentinel_name(*id) == name);
    ids.insert(*id);
  }
  CHECK(ids.size() == 8);
  CHECK(vocab::kBos == 256);
  CHECK(vocab::kPad == 263);
  CHECK(render(TokenSeq{vocab::kR2L, 104}) == "<R2L>h");
}

TEST_CASE("reverse_with_sentinel") {
  CHECK(reverse_with_sentinel(TokenSeq{5, 6, 7}, Direction::kRightToLeft) ==
        TokenSeq{vocab::kR2L, vocab::kBos, 7, 6, 5});
  CHECK(reverse_with_sentinel(TokenSeq{5, 6, 7}, Direction::kLeftToRight) ==
        TokenSeq{vocab::kL2R, vocab::kBos, 5, 6, 7});
  CHECK(reverse_with_sentinel(TokenSeq{5}, Direction::kLeftToRight).size() == 3);
  CHECK(reverse_with_sentinel(TokenSeq{5}, Direction::kRightToLeft).size() == 3);

  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    auto doc = random_doc(rng, 40);
    auto r2l = reverse_with_sentinel(doc, Direction::kRightToLeft);
    CHECK(strip_stream(r2l) == doc);
    // Stripping only the head and reversing again restores the original order.
    TokenSeq body(r2l.begin() + kStreamHead, r2l.end());
    auto twice = reverse_with_sentinel(body, Direction::kRightToLeft);
    CHECK(TokenSeq(twice.begin() + kStreamHead, twice.end()) == doc);
    const std::size_t n = doc.size();
    for (std::size_t i = 1; i <= n; ++i) CHECK(r2l[kStreamHead + mirror_position(i, n) - 1] == doc[i - 1]);
  }
  CHECK_THROWS_AS(reverse_with_sentinel(TokenSeq{1, vocab::kEos}, Direction::kLeftToRight), ContractError);
}

TEST_CASE("mim batch on [a,b,c]") {
  const TokenId a = 'a', b = 'b', c = 'c';
  auto batch = make_mim_batch({TokenSeq{a, b, c}}, 16);
  CHECK(batch.fwd.length == 5);
  CHECK(batch.fwd.inputs == TokenSeq{vocab::kL2R, vocab::kBos, a, b, c});
  CHECK(batch.fwd.targets == TokenSeq{-1, a, b, c, vocab::kEos});
  CHECK(batch.bwd.inputs == TokenSeq{vocab::kR2L, vocab::kBos, c, b, a});
  CHECK(batch.bwd.targets == TokenSeq{-1, c, b, a, vocab::kEos});
  // b is predicted from [L2R,BOS,a] at forward position 2 and from [R2L,BOS,c]
  // at backward position 2.
  REQUIRE(batch.alignment.size() == 3);
  bool found = false;
  for (auto [f, w] : batch.alignment) {
    if (batch.fwd.targets[f] == b) {
      found = true;
      CHECK(f == 2);
      CHECK(w == 2);
      CHECK(TokenSeq(batch.fwd.inputs.begin(), batch.fwd.inputs.begin() + 3) == TokenSeq{vocab::kL2R, vocab::kBos, a});
      CHECK(TokenSeq(batch.bwd.inputs.begin(), batch.bwd.inputs.begin() + 3) == TokenSeq{vocab::kR2L, vocab::kBos, c});
    }
  }
  CHECK(found);

  CHECK(make_mim_batch({TokenSeq{42}}, 8).alignment.size() == 1);
  CHECK_THROWS_AS(make_mim_batch({TokenSeq{}}, 8), ContractError);
  CHECK_THROWS_AS(make_mim_batch({TokenSeq{1}}, 3), ContractError);
  CHECK(make_mim_batch({TokenSeq(20, 7)}, 8).doc_lengths[0] == 6);
}

TEST_CASE("mim batch alignment property") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TokenSeq> docs;
    std::uniform_int_distribution<int> count(1, 5);
    for (int i = count(rng); i > 0; --i) docs.push_back(random_doc(rng, 30));
    auto batch = make_mim_batch(docs, 24);
    CHECK_NOTHROW(check_alignment(batch));
    std::size_t expected = 0;
    for (std::size_t r = 0; r < docs.size(); ++r) {
      const std::size_t n = batch.doc_lengths[r];
      expected += n;
      // Brute force: the backward row really is the reversed document.
      TokenSeq view(docs[r].begin(), docs[r].begin() + static_cast<std::ptrdiff_t>(n));
      auto want = reverse_with_sentinel(view, Direction::kRightToLeft);
      for (std::size_t p = 0; p < want.size(); ++p) CHECK(batch.bwd.inputs[r * batch.bwd.length + p] == want[p]);
    }
    CHECK(batch.alignment.size() == expected);
    for (auto [f, w] : batch.alignment) CHECK(batch.fwd.targets[f] == batch.bwd.targets[w]);
  }
  auto broken = make_mim_batch({TokenSeq{1, 2, 3}}, 8);
  std::swap(broken.alignment[0], broken.alignment[1]);
  broken.alignment[0].second = broken.alignment[1].second;
  CHECK_THROWS_AS(check_alignment(broken), AlignmentError);
}

TEST_CASE("fim layouts") {
  auto psm = fim_layout("abcdef", 2, 4, FimLayout::kPsm);
  CHECK(psm.ids == TokenSeq{vocab::kPre, 'a', 'b', vocab::kSuf, 'e', 'f', vocab::kMid, 'c', 'd', vocab::kEos});
  auto spm = fim_layout("abcdef", 2, 4, FimLayout::kSpm);
  CHECK(spm.ids == TokenSeq{vocab::kSuf, 'e', 'f', vocab::kPre, 'a', 'b', vocab::kMid, 'c', 'd', vocab::kEos});
  for (const auto& ex : {psm, spm}) {
    auto parts = parse_fim(ex.ids);
    CHECK(decode(parts.prefix) + decode(parts.middle) + decode(parts.suffix) == "abcdef");
  }

  std::mt19937_64 rng(14);
  for (int i = 0; i < 200; ++i) {
    auto ex = apply_fim_transform("hello world", rng, 0.0, 0.5);
    CHECK(ex.layout == FimLayout::kPlain);
    CHECK(ex.ids.front() == vocab::kL2R);
  }

  auto row = fim_row(psm, false);
  CHECK(row.inputs.size() == psm.ids.size() - 1);
  CHECK(std::count(row.targets.begin(), row.targets.end(), -1) == 0);
  auto masked = fim_row(psm, true);
  // Scored: c, d, EOS.
  CHECK(std::count_if(masked.targets.begin(), masked.targets.end(), [](TokenId t) { return t >= 0; }) == 3);
  CHECK(masked.targets.back() == vocab::kEos);
}

TEST_CASE("fim transform statistics and reconstruction") {
  std::mt19937_64 rng(15);
  std::uniform_int_distribution<int> len(0, 80), ch('a', 'z');
  int transformed = 0, psm = 0;
  const int total = 10000;
  for (int i = 0; i < total; ++i) {
    std::string doc(static_cast<std::size_t>(len(rng)), ' ');
    for (auto& c : doc) c = static_cast<char>(ch(rng));
    auto ex = apply_fim_transform(doc, rng, 0.5, 0.5);
    CHECK(ex.prefix + ex.middle + ex.suffix == doc);
    if (ex.transformed()) {
      ++transformed;
      psm += ex.layout == FimLayout::kPsm;
      auto parts = parse_fim(ex.ids);
      CHECK(decode(parts.prefix) + decode(parts.middle) + decode(parts.suffix) == doc);
    }
  }
  const double frac = static_cast<double>(transformed) / total;
  CHECK(frac >= 0.48);
  CHECK(frac <= 0.52);
  CHECK(static_cast<double>(psm) / transformed == doctest::Approx(0.5).epsilon(0.06));
}

TEST_CASE("corpus building") {
  std::string text;
  for (int i = 0; i < 1000; ++i) text += "document " + std::to_string(i) + "\n\n";
  auto all = build_corpus_from_texts({text}, {0.0, 7});
  CHECK(all.train.size() == 1000);
  CHECK(all.validation.empty());

  auto split = build_corpus_from_texts({text}, {0.1, 7});
  CHECK(split.validation.size() == 100);
  CHECK(split.train.size() == 900);
  auto again = build_corpus_from_texts({text}, {0.1, 7});
  CHECK(again.validation == split.validation);
  CHECK(again.train == split.train);
  std::set<TokenSeq> train(split.train.begin(), split.train.end());
  for (const auto& d : split.validation) CHECK(train.count(d) == 0);

  auto dir = std::filesystem::temp_directory_path() / "mim_corpus_test";
  std::filesystem::create_directories(dir);
  {
    std::ofstream(dir / "a.txt") << "one\n\ntwo\n\n\n\nthree\n";
  }
  auto from_file = build_corpus({dir / "a.txt"}, {});
  CHECK(from_file.train.size() == 3);
  CHECK(from_file.manifest.sources.at(0).documents == 3);
  nlohmann::json j = from_file.manifest;
  CHECK(j.get<CorpusManifest>().sources.at(0).path == from_file.manifest.sources.at(0).path);

  try {
    build_corpus({dir / "missing.txt"}, {});
    FAIL("expected an I/O error");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("missing.txt") != std::string::npos);
  }
  CorpusOptions custom;
  custom.delimiter = "|";
  CHECK(build_corpus_from_texts({"x|y|z"}, custom).train.size() == 3);
}

TEST_CASE("step rng and window sampling are deterministic") {
  auto a = step_rng(5, 10);
  auto b = step_rng(5, 10);
  CHECK(a() == b());
  CHECK(step_rng(5, 10)() != step_rng(5, 11)());
  std::vector<TokenSeq> docs{TokenSeq(100, 1), TokenSeq(3, 2)};
  auto r1 = step_rng(1, 2);
  auto r2 = step_rng(1, 2);
  auto w1 = sample_windows(docs, r1, 16, 64);
  CHECK(w1 == sample_windows(docs, r2, 16, 64));
  std::size_t tokens = 0;
  for (const auto& w : w1) {
    CHECK(w.size() <= 16);
    tokens += w.size();
  }
  CHECK(tokens >= 64);
}
