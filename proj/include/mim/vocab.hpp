#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mim {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by eight sentinels.
namespace vocab {

inline constexpr TokenId kBos = 256;
inline constexpr TokenId kEos = 257;
inline constexpr TokenId kL2R = 258;
inline constexpr TokenId kR2L = 259;
inline constexpr TokenId kPre = 260;
inline constexpr TokenId kSuf = 261;
inline constexpr TokenId kMid = 262;
inline constexpr TokenId kPad = 263;
inline constexpr std::size_t kSize = 264;
inline constexpr std::size_t kByteCount = 256;

constexpr bool is_byte(TokenId id) noexcept { return id >= 0 && id < 256; }
constexpr bool is_sentinel(TokenId id) noexcept { return id >= 256 && id < static_cast<TokenId>(kSize); }

// "BOS", "EOS", ... for sentinel ids; empty for anything else.
std::string_view sentinel_name(TokenId id) noexcept;
std::optional<TokenId> sentinel_by_name(std::string_view name) noexcept;

}  // namespace vocab

TokenSeq encode(std::string_view bytes);

// Throws ContractError naming the sentinel if one is present, IndexError for
// ids outside the vocabulary.
std::string decode(std::span<const TokenId> ids);

// Human-readable rendering that shows sentinels as <NAME>.
std::string render(std::span<const TokenId> ids);

enum class Direction { kLeftToRight, kRightToLeft };

// L2R: [L2R, BOS, x_1..x_N]; R2L: [R2L, BOS, x_N..x_1].
TokenSeq reverse_with_sentinel(std::span<const TokenId> doc, Direction direction);

// Inverse of reverse_with_sentinel: strips the two-token head and restores
// left-to-right order.
TokenSeq strip_stream(std::span<const TokenId> stream);

// Number of leading sentinel tokens in a stream ([dir, BOS]).
inline constexpr std::size_t kStreamHead = 2;

// 1-based position of x_i inside the R2L view: i <-> N - i + 1.
constexpr std::size_t mirror_position(std::size_t i, std::size_t n) noexcept { return n - i + 1; }

}  // namespace mim
