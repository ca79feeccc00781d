#include "proll/chords.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "proll/errors.hpp"

namespace proll {

const std::vector<int>& chord_intervals(ChordQuality q) {
    static const std::vector<int> tables[kNumChordQualities] = {
        {0, 4, 7},      // maj
        {0, 3, 7},      // min
        {0, 3, 6},      // dim
        {0, 4, 8},      // aug
        {0, 5, 7},      // sus4
        {0, 4, 7, 10},  // dom7
        {0, 4, 7, 11},  // maj7
        {0, 3, 7, 10},  // min7
    };
    return tables[static_cast<int>(q)];
}

std::vector<int> chord_pitches(int root, ChordQuality q, int octave) {
    std::vector<int> out;
    int base = 12 * (octave + 1) + root;
    for (int iv : chord_intervals(q)) out.push_back(base + iv);
    return out;
}

ChordEncoding36 encode_chord(const ChordLabel& label) {
    ChordEncoding36 v{};
    if (label.none()) {
        if (label.bass >= 0 || label.chroma) throw IllegalVector("no-chord label with bass or chroma set");
        return v;
    }
    if (label.root > 11 || label.bass < 0 || label.bass > 11 || !label.chroma)
        throw IllegalVector("chord label fields out of range");
    v[label.root] = 1;
    v[12 + label.bass] = 1;
    for (int pc = 0; pc < 12; ++pc)
        if (label.chroma >> pc & 1) v[24 + pc] = 1;
    return v;
}

ChordLabel decode_chord(const ChordEncoding36& v) {
    int root = -1, bass = -1;
    uint16_t chroma = 0;
    for (int i = 0; i < 12; ++i) {
        if (v[i]) {
            if (root >= 0) throw IllegalVector("two bits in root block");
            root = i;
        }
        if (v[12 + i]) {
            if (bass >= 0) throw IllegalVector("two bits in bass block");
            bass = i;
        }
        if (v[24 + i]) chroma |= static_cast<uint16_t>(1u << i);
    }
    bool has_root = root >= 0, has_bass = bass >= 0, has_chroma = chroma != 0;
    if (has_root != has_bass || has_root != has_chroma)
        throw IllegalVector("root/bass/chroma blocks disagree on chord presence");
    return {root, bass, chroma};
}

ChordSequence extract_chords(const Tensor& roll, int pitch_stride) {
    if (roll.rank() != 3 || roll.dim(0) != 2) throw ShapeMismatch("extract_chords expects (2,P,F)");
    int P = roll.dim(1), F = roll.dim(2);
    if (F % kBeatsPerSegment) throw ShapeMismatch("frame count not divisible into 32 beats");
    int fpb = F / kBeatsPerSegment;
    int chroma_min_frames = std::max(1, fpb / 2);
    const float* onset = roll.data();
    const float* sustain = roll.data() + static_cast<size_t>(P) * F;

    ChordSequence seq(kBeatsPerSegment);
    for (int b = 0; b < kBeatsPerSegment; ++b) {
        int lowest = -1;
        int class_frames[12] = {0};
        for (int fr = 0; fr < fpb; ++fr) {
            int t = b * fpb + fr;
            bool class_sounds[12] = {false};
            for (int p = 0; p < P; ++p) {
                size_t at = static_cast<size_t>(p) * F + t;
                if (onset[at] > 0.5f || sustain[at] > 0.5f) {
                    int pitch = p * pitch_stride;
                    if (lowest < 0 || pitch < lowest) lowest = pitch;
                    class_sounds[pitch % 12] = true;
                }
            }
            for (int pc = 0; pc < 12; ++pc)
                if (class_sounds[pc]) ++class_frames[pc];
        }
        uint16_t chroma = 0;
        for (int pc = 0; pc < 12; ++pc)
            if (class_frames[pc] >= chroma_min_frames) chroma |= static_cast<uint16_t>(1u << pc);
        if (!chroma) {
            seq[b] = ChordEncoding36{};
            continue;
        }
        // argmax over roots x templates of 2*|T cap chroma| - |chroma \ T|
        int best_score = INT32_MIN, best_root = 0, best_q = 0;
        for (int root = 0; root < 12; ++root)
            for (int q = 0; q < kNumChordQualities; ++q) {
                uint16_t tmask = 0;
                for (int iv : chord_intervals(static_cast<ChordQuality>(q)))
                    tmask |= static_cast<uint16_t>(1u << ((root + iv) % 12));
                int hit = std::popcount(static_cast<unsigned>(tmask & chroma));
                int extra = std::popcount(static_cast<unsigned>(chroma & ~tmask));
                int score = 2 * hit - extra;
                if (score > best_score ||
                    (score == best_score && (q < best_q || (q == best_q && root < best_root)))) {
                    best_score = score;
                    best_root = root;
                    best_q = q;
                }
            }
        seq[b] = encode_chord({best_root, lowest % 12, chroma});
    }
    return seq;
}

double chord_f1(const ChordSequence& a, const ChordSequence& b) {
    if (a.size() != static_cast<size_t>(kBeatsPerSegment) || b.size() != a.size())
        throw LengthMismatch("chord sequences must both have 32 beats");
    long tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < kBeatsPerSegment; ++i)
        for (int j = 0; j < kChordDim; ++j) {
            bool ga = a[i][j] != 0, gb = b[i][j] != 0;
            tp += ga && gb;
            fp += ga && !gb;
            fn += !ga && gb;
        }
    if (tp + fp + fn == 0) return 1.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

Tensor chord_sequence_tensor(const ChordSequence& seq) {
    if (seq.size() != static_cast<size_t>(kBeatsPerSegment)) throw LengthMismatch("chord sequence length");
    Tensor t({kBeatsPerSegment, kChordDim});
    for (int b = 0; b < kBeatsPerSegment; ++b)
        for (int j = 0; j < kChordDim; ++j) t[static_cast<size_t>(b) * kChordDim + j] = seq[b][j] ? 1.f : 0.f;
    return t;
}

void write_chord_text(const std::string& path, const ChordSequence& seq) {
    if (seq.size() != static_cast<size_t>(kBeatsPerSegment)) throw LengthMismatch("chord sequence length");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    for (int b = 0; b < kBeatsPerSegment; ++b) {
        ChordLabel label = decode_chord(seq[b]);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%d %d %d %03x", b, label.root, label.bass, label.chroma);
        os << buf << '\n';
    }
    if (!os) throw IoError("write failed: " + path);
}

ChordSequence read_chord_text(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw BadChordFile("cannot open: " + path);
    ChordSequence seq(kBeatsPerSegment);
    int expect = 0;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        size_t first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        int beat, root, bass;
        std::string hex;
        if (!(ls >> beat >> root >> bass >> hex))
            throw BadChordFile(path + ":" + std::to_string(lineno) + ": expected 'beat root bass chroma_hex'");
        if (beat != expect)
            throw BadChordFile(path + ":" + std::to_string(lineno) + ": beats must run 0..31 in order");
        unsigned chroma = 0;
        try {
            size_t used = 0;
            chroma = std::stoul(hex, &used, 16);
            if (used != hex.size()) throw std::invalid_argument(hex);
        } catch (const std::exception&) {
            throw BadChordFile(path + ":" + std::to_string(lineno) + ": bad chroma hex '" + hex + "'");
        }
        if (root < -1 || root > 11 || bass < -1 || bass > 11 || chroma > 0xFFF)
            throw BadChordFile(path + ":" + std::to_string(lineno) + ": field out of range");
        ChordLabel label{root, bass, static_cast<uint16_t>(chroma)};
        bool has_root = root >= 0, has_bass = bass >= 0, has_chroma = chroma != 0;
        if (has_root != has_bass || has_root != has_chroma)
            throw BadChordFile(path + ":" + std::to_string(lineno) + ": inconsistent no-chord fields");
        seq[beat] = encode_chord(label);
        ++expect;
    }
    if (expect != kBeatsPerSegment)
        throw BadChordFile(path + ": expected 32 beat lines, got " + std::to_string(expect));
    return seq;
}

}  // namespace proll
