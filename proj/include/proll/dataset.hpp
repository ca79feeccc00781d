#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "proll/chords.hpp"
#include "proll/tensor.hpp"

namespace proll {

enum class Split : uint8_t { Train = 0, Val = 1 };

struct SegmentRecord {
    Tensor roll;  // (2,P,F), entries 0/1
    ChordSequence chords;
    Split split = Split::Train;
};

struct SegmentDataset {
    int pitches = 128, frames = 128;
    std::vector<SegmentRecord> records;

    std::vector<size_t> indices(Split s) const {
        std::vector<size_t> out;
        for (size_t i = 0; i < records.size(); ++i)
            if (records[i].split == s) out.push_back(i);
        return out;
    }
};

// "PRLL" container: u32 version=1, u32 count, u32 dims (2,P,F); per record a
// bit-packed roll (channel-major, pitch-major, time-minor, LSB-first bits),
// 32x36 chord bytes, u8 split. Round trips byte-exactly.
void save_dataset(const std::string& path, const SegmentDataset& ds);
SegmentDataset load_dataset(const std::string& path);  // BadMagic, VersionMismatch, TruncatedFile

}  // namespace proll
