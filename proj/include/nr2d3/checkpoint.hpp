#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nr2d3/array.hpp"

namespace nr2d3 {

// Self-describing binary container: magic "NR2D3", a format version, then named
// little-endian sections holding the config echo, named parameter arrays with shape
// headers, the rng state, and the step counter. load(save(x)) reproduces x bit for bit.
struct Checkpoint {
    std::string config_text;
    std::vector<std::pair<std::string, Array>> params;  // order preserved
    std::uint64_t rng_state = 0;
    std::int64_t step = 0;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Checkpoint& ck);

// Rejects bad magic, any other format version, truncated files, and unknown sections.
Checkpoint load_checkpoint(const std::string& path);

// FNV-1a over a file's bytes, for cross-run identity checks.
std::uint64_t file_checksum(const std::string& path);

}  // namespace nr2d3
