#include "mim/vocab.hpp"

#include <array>
#include <utility>

#include "mim/errors.hpp"

namespace mim {
namespace vocab {
namespace {

constexpr std::array<std::pair<TokenId, std::string_view>, 8> kSentinels{{
    {kBos, "BOS"},
    {kEos, "EOS"},
    {kL2R, "L2R"},
    {kR2L, "R2L"},
    {kPre, "PRE"},
    {kSuf, "SUF"},
    {kMid, "MID"},
    {kPad, "PAD"},
}};

}  // namespace

std::string_view sentinel_name(TokenId id) noexcept {
  for (const auto& [sid, name] : kSentinels) {
    if (sid == id) return name;
  }
  return {};
}

std::optional<TokenId> sentinel_by_name(std::string_view name) noexcept {
  for (const auto& [sid, sname] : kSentinels) {
    if (sname == name) return sid;
  }
  return std::nullopt;
}

}  // namespace vocab

TokenSeq encode(std::string_view bytes) {
  TokenSeq ids;
  ids.reserve(bytes.size());
  for (unsigned char c : bytes) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

std::string decode(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (vocab::is_sentinel(id)) {
      throw ContractError("cannot decode sentinel <" + std::string(vocab::sentinel_name(id)) + ">");
    }
    if (!vocab::is_byte(id)) throw IndexError("token id " + std::to_string(id) + " outside the vocabulary");
    out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::string render(std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) {
    if (vocab::is_byte(id)) {
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    } else if (vocab::is_sentinel(id)) {
      out += '<';
      out += vocab::sentinel_name(id);
      out += '>';
    } else {
      out += "<?" + std::to_string(id) + ">";
    }
  }
  return out;
}

TokenSeq reverse_with_sentinel(std::span<const TokenId> doc, Direction direction) {
  TokenSeq out;
  out.reserve(doc.size() + kStreamHead);
  out.push_back(direction == Direction::kLeftToRight ? vocab::kL2R : vocab::kR2L);
  out.push_back(vocab::kBos);
  for (TokenId id : doc) {
    if (!vocab::is_byte(id)) {
      throw ContractError("reverse_with_sentinel: document contains non-byte token " + std::to_string(id));
    }
  }
  if (direction == Direction::kLeftToRight) {
    out.insert(out.end(), doc.begin(), doc.end());
  } else {
    out.insert(out.end(), doc.rbegin(), doc.rend());
  }
  return out;
}

TokenSeq strip_stream(std::span<const TokenId> stream) {
  if (stream.size() < kStreamHead || stream[1] != vocab::kBos ||
      (stream[0] != vocab::kL2R && stream[0] != vocab::kR2L)) {
    throw ContractError("strip_stream: missing [L2R|R2L, BOS] head");
  }
  auto body = stream.subspan(kStreamHead);
  if (stream[0] == vocab::kL2R) return TokenSeq(body.begin(), body.end());
  return TokenSeq(body.rbegin(), body.rend());
}

}  // namespace mim
