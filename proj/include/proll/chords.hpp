#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "proll/tensor.hpp"

namespace proll {

inline constexpr int kBeatsPerSegment = 32;
inline constexpr int kChordDim = 36;

struct ChordLabel {
    int root = -1;  // pitch class, -1 = no chord
    int bass = -1;
    uint16_t chroma = 0;  // bit per pitch class

    bool none() const { return root < 0; }
    bool operator==(const ChordLabel&) const = default;
};

// [root one-hot 12 | bass one-hot 12 | chroma multi-hot 12]
using ChordEncoding36 = std::array<uint8_t, kChordDim>;
using ChordSequence = std::vector<ChordEncoding36>;  // exactly kBeatsPerSegment entries

enum class ChordQuality { Maj, Min, Dim, Aug, Sus4, Dom7, Maj7, Min7 };
inline constexpr int kNumChordQualities = 8;

const std::vector<int>& chord_intervals(ChordQuality q);

// Root-position MIDI pitches of the chord, octave 4 (root C4 = 60).
std::vector<int> chord_pitches(int root, ChordQuality q, int octave = 4);

ChordEncoding36 encode_chord(const ChordLabel& label);
ChordLabel decode_chord(const ChordEncoding36& v);  // throws IllegalVector

// Beat-wise extraction from a (2, P, F) onset/sustain roll, F divisible by 32.
// A pitch class is in the chroma when it sounds in at least half of the
// beat's frames (>= 2 of 4 at full resolution); bass is the class of the
// lowest pitch sounding at all. `pitch_stride` maps row p to MIDI pitch
// p*pitch_stride (downsampled rolls).
ChordSequence extract_chords(const Tensor& roll, int pitch_stride = 1);

// Micro-averaged binary F1 over all beat/bit positions; 1.0 when both empty.
double chord_f1(const ChordSequence& a, const ChordSequence& b);

Tensor chord_sequence_tensor(const ChordSequence& seq);  // (32, 36) of 0/1

// Text form, one line per beat: "beat_index root bass chroma_hex"
// (root/bass -1 and chroma 000 for no-chord).
void write_chord_text(const std::string& path, const ChordSequence& seq);
ChordSequence read_chord_text(const std::string& path);  // throws BadChordFile

}  // namespace proll
