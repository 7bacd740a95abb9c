#pragma once

#include "navseg/blocks.hpp"

namespace navseg::fixture {

// Five blocks covering every block type; inputs must be multiples of 4.
inline NetworkSpec tiny_spec() {
  NetworkSpec s;
  s.blocks = {initial_spec(3, 8), {BlockKind::Downsample, 8, 16, 4}, {BlockKind::Standard, 16, 16, 4},
              {BlockKind::Upsample, 16, 8, 4}, lastconv_spec(8, 2)};
  return s;
}

}  // namespace navseg::fixture
