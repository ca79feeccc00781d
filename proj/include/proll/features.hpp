#pragma once

#include <utility>
#include <vector>

#include "proll/chords.hpp"
#include "proll/midi.hpp"

namespace proll {

struct FeaturePools {
    std::vector<double> pitch_range;  // per segment with >= 2 notes
    std::vector<double> durations;    // per note, beats
    std::vector<double> iois;         // per consecutive pair of distinct onsets
};

FeaturePools extract_features(const std::vector<std::vector<NoteEvent>>& segments);

// Overlap of the two Gaussian-KDE densities (Scott bandwidth) integrated on a
// 1000-point grid over the union range extended by 3 bandwidths; falls back
// to 64-bin histogram intersection when a pool has zero variance. Throws
// InsufficientSamples below 2 points per pool.
double overlapping_area(const std::vector<double>& a, const std::vector<double>& b);

struct OAReport {
    double oa_pitch_range = 0.0;
    double oa_ioi = 0.0;
    double oa_duration = 0.0;
    double oa_avg = 0.0;
    double chord_f1 = 0.0;
};

// Compares generated and reference corpora on the three feature pools and
// averages chord F1 over (target, extracted) sequence pairs. Throws
// EmptyCorpus when either corpus has no segments.
OAReport evaluate(const std::vector<std::vector<NoteEvent>>& generated,
                  const std::vector<std::vector<NoteEvent>>& reference,
                  const std::vector<std::pair<ChordSequence, ChordSequence>>& chord_pairs);

// Table-1-ordered report rendering.
std::string report_csv(const OAReport& r);
std::string report_table(const OAReport& r);

}  // namespace proll
