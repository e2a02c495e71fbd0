#pragma once

#include <array>
#include <cstdint>
#include <numeric>
#include <vector>

namespace far {

enum class Direction : std::uint8_t { forward = 0, reverse = 1 };

inline const char* direction_name(Direction d) { return d == Direction::forward ? "fwd" : "rev"; }

/// Retention vector over the hidden units of one LSTM direction.
struct DirectionMask {
  std::vector<std::uint8_t> keep;

  static DirectionMask full(int hidden) { return {std::vector<std::uint8_t>(static_cast<std::size_t>(hidden), 1)}; }

  int total() const { return static_cast<int>(keep.size()); }
  int retained() const {
    return std::accumulate(keep.begin(), keep.end(), 0, [](int acc, std::uint8_t k) { return acc + (k ? 1 : 0); });
  }
  double retention() const { return keep.empty() ? 0.0 : static_cast<double>(retained()) / static_cast<double>(total()); }
  bool is_full() const { return retained() == total(); }

  bool operator==(const DirectionMask&) const = default;
};

/// Per-layer mask: one entry per head, indexed by Direction.
struct PruneMask {
  std::vector<std::array<DirectionMask, 2>> heads;

  static PruneMask full(int num_heads, int hidden) {
    PruneMask m;
    m.heads.assign(static_cast<std::size_t>(num_heads), {DirectionMask::full(hidden), DirectionMask::full(hidden)});
    return m;
  }

  const DirectionMask& at(int head, Direction d) const { return heads.at(static_cast<std::size_t>(head))[static_cast<std::size_t>(d)]; }
  DirectionMask& at(int head, Direction d) { return heads.at(static_cast<std::size_t>(head))[static_cast<std::size_t>(d)]; }

  bool is_full() const {
    for (const auto& h : heads)
      for (const auto& d : h)
        if (!d.is_full()) return false;
    return true;
  }

  bool operator==(const PruneMask&) const = default;
};

}  // namespace far
