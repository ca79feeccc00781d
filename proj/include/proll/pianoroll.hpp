#pragma once

#include <string>
#include <vector>

#include "proll/midi.hpp"
#include "proll/tensor.hpp"

namespace proll {

inline constexpr int kFullPitches = 128;
inline constexpr int kFullFrames = 128;  // 32 beats at 1/4-beat steps
inline constexpr int kSegmentBeats = 32;

// 8-bar sliding windows with a hop of `hop_bars`; notes re-based to the
// window start, truncated/clipped at the window edges.
std::vector<std::vector<NoteEvent>> segment_song(const std::vector<NoteEvent>& notes, int bars = 8,
                                                 int hop_bars = 1);

// (2,128,128) onset/sustain roll; onset frame floor(onset*4), sustain through
// ceil((onset+duration)*4)-1. Throws PitchOutOfRange, OnsetOutOfWindow.
Tensor encode_pianoroll(const std::vector<NoteEvent>& notes);

// Inverse of the encoding on a (2,P,F) roll. Row p is MIDI pitch
// p*pitch_stride; time resolution is frames_per_beat frames per beat.
std::vector<NoteEvent> decode_pianoroll(const Tensor& roll, double threshold = 0.5, int pitch_stride = 1,
                                        double frames_per_beat = 4.0);

// OR-pooling downsample of both pitch and time axes by `factor`.
Tensor downsample_roll(const Tensor& roll, int factor);

// Pitch vertical (low at the bottom), time horizontal; onset and sustain in
// distinct colors, integer-scaled by `scale`.
void render_png(const Tensor& roll, const std::string& path, int scale = 1);

}  // namespace proll
