#pragma once

#include <cstddef>
#include <vector>

namespace muffin {

// Item id reserved for left padding; never a target and never ranked.
inline constexpr std::size_t kPaddingId = 0;

// Left-padded item id rows. The last column of every row is a real item.
struct SequenceBatch {
  std::size_t rows = 0;
  std::size_t length = 0;
  std::vector<std::size_t> ids;      // rows * length, row-major
  std::vector<std::size_t> lengths;  // true length per row, capped at length
  std::vector<std::size_t> targets;  // next item per row
  std::vector<std::size_t> users;    // dataset user index per row

  std::size_t at(std::size_t row, std::size_t pos) const { return ids[row * length + pos]; }
};

}  // namespace muffin
