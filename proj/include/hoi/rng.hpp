#pragma once

#include <cstdint>
#include <random>

namespace hoi {

using Rng = std::mt19937_64;

// Child stream for task `index` under `master`. Streams for distinct indices
// are decorrelated through a splitmix64 finalizer.
Rng derive_stream(std::uint64_t master, std::uint64_t index);

std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index);

}  // namespace hoi
