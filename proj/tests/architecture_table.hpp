#pragma once

// Reference architecture listing for a 512x256 RGB input, as
// (block, type, input "WxHxC", output "WxHxC"). Wide rows carry 128 channels in
// the full network and 64 in the pruned one.

#include <cstddef>
#include <string>
#include <vector>

namespace navseg::fixture {

struct ArchRow {
  std::size_t block;
  std::string type;
  std::string input;
  std::string output;
};

inline std::vector<ArchRow> architecture_rows(bool pruned) {
  const std::string wide = pruned ? "64x32x64" : "64x32x128";
  std::vector<ArchRow> rows;
  rows.push_back({1, "Initial", "512x256x3", "256x128x16"});
  rows.push_back({2, "Downsample", "256x128x16", "128x64x64"});
  for (std::size_t b = 3; b <= 6; ++b) rows.push_back({b, "Standard", "128x64x64", "128x64x64"});
  rows.push_back({7, "Downsample", "128x64x64", wide});
  for (std::size_t b = 8; b <= 24; ++b) rows.push_back({b, "Standard", wide, wide});
  rows.push_back({25, "Upsample", wide, "128x64x64"});
  rows.push_back({26, "Standard", "128x64x64", "128x64x64"});
  rows.push_back({27, "Standard", "128x64x64", "128x64x64"});
  rows.push_back({28, "Upsample", "128x64x64", "256x128x16"});
  rows.push_back({29, "Standard", "256x128x16", "256x128x16"});
  rows.push_back({30, "LastConv", "256x128x16", "512x256x2"});
  return rows;
}

}  // namespace navseg::fixture
