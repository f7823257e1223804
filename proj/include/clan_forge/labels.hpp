#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace clan_forge {

/// H×W map of class indices, row-major.
struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), values(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }

  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

}  // namespace clan_forge
