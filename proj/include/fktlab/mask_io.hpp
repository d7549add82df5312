#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <vector>

#include <json.hpp>

#include "fktlab/filter_mask.hpp"

namespace fktlab {

using MaskTable = std::map<TaskId, FilterMask>;

// Binary layout, all integers little-endian:
//   u32 record count
//   per record: i32 task id, u32 layer count,
//     per layer: u32 bit count, ceil(bits/8) bytes, bit i of a layer at
//     byte i/8, bit position i%8.
std::vector<std::uint8_t> encode_masks(const MaskTable& masks);
MaskTable decode_masks(std::span<const std::uint8_t> bytes);

// {"tasks": [{"task": 1, "layers": ["1011", "01"]}, ...]}
nlohmann::json masks_to_json(const MaskTable& masks);
MaskTable masks_from_json(const nlohmann::json& j);

void write_masks(const std::filesystem::path& path, const MaskTable& masks);
MaskTable read_masks(const std::filesystem::path& path);

}  // namespace fktlab
