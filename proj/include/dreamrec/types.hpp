#pragma once

#include <cstdint>

namespace dreamrec {

/// Dense item index. 0 is the padding token; real items are 1..num_items.
using ItemIndex = std::uint32_t;

inline constexpr ItemIndex kPaddingItem = 0;

}  // namespace dreamrec
