#pragma once

#include <cstdint>
#include <filesystem>

#include "hoi/denoiser.hpp"

namespace hoi {

// Binary layout, all integers little-endian:
//   "HIDF"                     4 bytes
//   format version             u32 (currently 1)
//   H, W, D_m, B, heads, D_a, D_s, K          u32 each
//   patch mode, ffn multiplier, local patch h, local patch w   u32 each
//   parameter count            u64
//   parameters                 f64 each, in ParamLayout order
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const DenoiserParams& params);
DenoiserParams load_checkpoint(const std::filesystem::path& path);

}  // namespace hoi
