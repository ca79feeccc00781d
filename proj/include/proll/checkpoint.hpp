#pragma once

#include <string>
#include <vector>

#include "proll/tensor.hpp"

namespace proll {

struct CheckpointEntry {
    std::string name;
    Tensor value;
};

// "PROF" container: u32 version, u32 entry count, then per entry
// u16 name length + name, u8 rank, u32 per dim, raw little-endian f32 payload.
// Round trips byte-exactly; entry order is preserved.
void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> load_checkpoint(const std::string& path);

}  // namespace proll
