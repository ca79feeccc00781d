#include "proll/pianoroll.hpp"

#include <algorithm>
#include <cmath>

#include "proll/errors.hpp"
#include "proll/png_writer.hpp"

namespace proll {

std::vector<std::vector<NoteEvent>> segment_song(const std::vector<NoteEvent>& notes, int bars, int hop_bars) {
    std::vector<std::vector<NoteEvent>> windows;
    if (notes.empty()) return windows;
    double song_end = 0;
    for (const auto& n : notes) song_end = std::max(song_end, n.onset + n.duration);
    int song_bars = static_cast<int>(std::ceil(song_end / 4.0));
    int count = (song_bars - bars) / hop_bars + 1;
    if (count < 1) return windows;

    double len = bars * 4.0;
    for (int k = 0; k < count; ++k) {
        double start = k * hop_bars * 4.0;
        double end = start + len;
        std::vector<NoteEvent> win;
        for (const auto& n : notes) {
            double a = std::max(n.onset, start);
            double b = std::min(n.onset + n.duration, end);
            if (b <= a) continue;
            win.push_back({n.pitch, a - start, b - a, n.velocity});
        }
        windows.push_back(std::move(win));
    }
    return windows;
}

Tensor encode_pianoroll(const std::vector<NoteEvent>& notes) {
    Tensor roll({2, kFullPitches, kFullFrames});
    float* onset = roll.data();
    float* sustain = roll.data() + static_cast<size_t>(kFullPitches) * kFullFrames;
    for (const auto& n : notes) {
        if (n.pitch < 0 || n.pitch >= kFullPitches) throw PitchOutOfRange(std::to_string(n.pitch));
        if (n.onset < 0 || n.onset >= kSegmentBeats)
            throw OnsetOutOfWindow(std::to_string(n.onset) + " beats");
        int t0 = static_cast<int>(std::floor(n.onset * 4.0));
        int t1 = static_cast<int>(std::ceil((n.onset + n.duration) * 4.0)) - 1;
        t1 = std::min(t1, kFullFrames - 1);
        size_t row = static_cast<size_t>(n.pitch) * kFullFrames;
        onset[row + t0] = 1.f;
        for (int t = t0 + 1; t <= t1; ++t) sustain[row + t] = 1.f;
    }
    return roll;
}

std::vector<NoteEvent> decode_pianoroll(const Tensor& roll, double threshold, int pitch_stride,
                                        double frames_per_beat) {
    if (roll.rank() != 3 || roll.dim(0) != 2) throw ShapeMismatch("decode expects (2,P,F)");
    int P = roll.dim(1), F = roll.dim(2);
    const float* onset = roll.data();
    const float* sustain = roll.data() + static_cast<size_t>(P) * F;
    std::vector<NoteEvent> notes;
    for (int p = 0; p < P; ++p) {
        size_t row = static_cast<size_t>(p) * F;
        for (int t = 0; t < F; ++t) {
            if (onset[row + t] <= threshold) continue;
            int end = t + 1;
            while (end < F && sustain[row + end] > threshold) ++end;
            notes.push_back({p * pitch_stride, t / frames_per_beat, (end - t) / frames_per_beat, 100});
        }
    }
    std::stable_sort(notes.begin(), notes.end(), [](const NoteEvent& a, const NoteEvent& b) {
        if (a.onset != b.onset) return a.onset < b.onset;
        return a.pitch < b.pitch;
    });
    return notes;
}

Tensor downsample_roll(const Tensor& roll, int factor) {
    if (roll.rank() != 3 || roll.dim(0) != 2) throw ShapeMismatch("downsample expects (2,P,F)");
    int P = roll.dim(1), F = roll.dim(2);
    if (factor < 1 || P % factor || F % factor) throw ShapeMismatch("downsample factor must divide dims");
    int Pd = P / factor, Fd = F / factor;
    Tensor out({2, Pd, Fd});
    for (int c = 0; c < 2; ++c)
        for (int p = 0; p < Pd; ++p)
            for (int t = 0; t < Fd; ++t) {
                float v = 0.f;
                for (int dp = 0; dp < factor && v == 0.f; ++dp)
                    for (int dt = 0; dt < factor; ++dt) {
                        size_t at = (static_cast<size_t>(c) * P + p * factor + dp) * F + t * factor + dt;
                        if (roll[at] > 0.5f) {
                            v = 1.f;
                            break;
                        }
                    }
                out[(static_cast<size_t>(c) * Pd + p) * Fd + t] = v;
            }
    return out;
}

void render_png(const Tensor& roll, const std::string& path, int scale) {
    if (roll.rank() != 3 || roll.dim(0) != 2) throw ShapeMismatch("render expects (2,P,F)");
    int P = roll.dim(1), F = roll.dim(2);
    const float* onset = roll.data();
    const float* sustain = roll.data() + static_cast<size_t>(P) * F;
    int W = F * scale, H = P * scale;
    std::vector<uint8_t> rgb(static_cast<size_t>(W) * H * 3);
    const uint8_t bg[3] = {24, 24, 32}, on[3] = {255, 180, 40}, sus[3] = {70, 150, 235};
    for (int y = 0; y < H; ++y) {
        int p = P - 1 - y / scale;  // low pitches at the bottom
        for (int x = 0; x < W; ++x) {
            int t = x / scale;
            size_t at = static_cast<size_t>(p) * F + t;
            const uint8_t* c = onset[at] > 0.5f ? on : sustain[at] > 0.5f ? sus : bg;
            uint8_t* px = rgb.data() + (static_cast<size_t>(y) * W + x) * 3;
            px[0] = c[0];
            px[1] = c[1];
            px[2] = c[2];
        }
    }
    write_png_rgb(path, W, H, rgb);
}

}  // namespace proll
