#include "proll/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "proll/errors.hpp"

namespace proll {

FeaturePools extract_features(const std::vector<std::vector<NoteEvent>>& segments) {
    FeaturePools pools;
    for (const auto& notes : segments) {
        if (notes.size() >= 2) {
            int lo = 128, hi = -1;
            for (const auto& n : notes) {
                lo = std::min(lo, n.pitch);
                hi = std::max(hi, n.pitch);
            }
            pools.pitch_range.push_back(static_cast<double>(hi - lo));
        }
        std::vector<double> onsets;
        for (const auto& n : notes) {
            if (n.duration > 0) pools.durations.push_back(n.duration);
            onsets.push_back(n.onset);
        }
        std::sort(onsets.begin(), onsets.end());
        onsets.erase(std::unique(onsets.begin(), onsets.end()), onsets.end());
        for (size_t i = 1; i < onsets.size(); ++i) pools.iois.push_back(onsets[i] - onsets[i - 1]);
    }
    return pools;
}

namespace {

struct Stats {
    double mean = 0.0, sd = 0.0, lo = 0.0, hi = 0.0;
};

Stats pool_stats(const std::vector<double>& p) {
    Stats s;
    s.lo = std::numeric_limits<double>::infinity();
    s.hi = -s.lo;
    for (double v : p) {
        s.mean += v;
        s.lo = std::min(s.lo, v);
        s.hi = std::max(s.hi, v);
    }
    s.mean /= static_cast<double>(p.size());
    double ss = 0.0;
    for (double v : p) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(p.size() - 1));
    return s;
}

double histogram_intersection(const std::vector<double>& a, const std::vector<double>& b, double lo,
                              double hi) {
    if (hi <= lo) return 1.0;  // all values in both pools coincide
    constexpr int kBins = 64;
    auto histogram = [&](const std::vector<double>& p) {
        std::vector<double> h(kBins, 0.0);
        for (double v : p) {
            int bin = static_cast<int>((v - lo) / (hi - lo) * kBins);
            h[std::clamp(bin, 0, kBins - 1)] += 1.0 / static_cast<double>(p.size());
        }
        return h;
    };
    auto ha = histogram(a), hb = histogram(b);
    double oa = 0.0;
    for (int i = 0; i < kBins; ++i) oa += std::min(ha[i], hb[i]);
    return std::clamp(oa, 0.0, 1.0);
}

double kde(const std::vector<double>& p, double h, double x) {
    double acc = 0.0;
    for (double v : p) {
        double z = (x - v) / h;
        acc += std::exp(-0.5 * z * z);
    }
    return acc / (static_cast<double>(p.size()) * h * std::sqrt(2.0 * M_PI));
}

}  // namespace

double overlapping_area(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw InsufficientSamples("overlapping_area needs at least 2 samples per pool");
    Stats sa = pool_stats(a), sb = pool_stats(b);
    double lo = std::min(sa.lo, sb.lo), hi = std::max(sa.hi, sb.hi);
    if (sa.sd == 0.0 || sb.sd == 0.0) return histogram_intersection(a, b, lo, hi);

    double ha = sa.sd * std::pow(static_cast<double>(a.size()), -0.2);
    double hb = sb.sd * std::pow(static_cast<double>(b.size()), -0.2);
    double glo = std::min(sa.lo - 3.0 * ha, sb.lo - 3.0 * hb);
    double ghi = std::max(sa.hi + 3.0 * ha, sb.hi + 3.0 * hb);
    constexpr int kGrid = 1000;
    double dx = (ghi - glo) / (kGrid - 1);
    double oa = 0.0;
    for (int i = 0; i < kGrid; ++i) {
        double x = glo + i * dx;
        oa += std::min(kde(a, ha, x), kde(b, hb, x)) * dx;
    }
    return std::clamp(oa, 0.0, 1.0);
}

OAReport evaluate(const std::vector<std::vector<NoteEvent>>& generated,
                  const std::vector<std::vector<NoteEvent>>& reference,
                  const std::vector<std::pair<ChordSequence, ChordSequence>>& chord_pairs) {
    if (generated.empty() || reference.empty()) throw EmptyCorpus("evaluate needs both corpora non-empty");
    FeaturePools g = extract_features(generated);
    FeaturePools r = extract_features(reference);

    OAReport rep;
    rep.oa_pitch_range = overlapping_area(g.pitch_range, r.pitch_range);
    rep.oa_ioi = overlapping_area(g.iois, r.iois);
    rep.oa_duration = overlapping_area(g.durations, r.durations);
    rep.oa_avg = (rep.oa_pitch_range + rep.oa_ioi + rep.oa_duration) / 3.0;
    if (!chord_pairs.empty()) {
        double acc = 0.0;
        for (const auto& [target, extracted] : chord_pairs) acc += chord_f1(target, extracted);
        rep.chord_f1 = acc / static_cast<double>(chord_pairs.size());
    }
    return rep;
}

std::string report_csv(const OAReport& r) {
    char buf[192];
    std::snprintf(buf, sizeof buf, "pitch_range,ioi,note_duration,avg,chord_f1\n%.4f,%.4f,%.4f,%.4f,%.4f\n",
                  r.oa_pitch_range, r.oa_ioi, r.oa_duration, r.oa_avg, r.chord_f1);
    return buf;
}

std::string report_table(const OAReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "%-12s %-8s %-14s %-8s %-8s\n%-12.4f %-8.4f %-14.4f %-8.4f %-8.4f\n", "Pitch Range",
                  "IOI", "Note Duration", "Avg", "Chord F1", r.oa_pitch_range, r.oa_ioi, r.oa_duration,
                  r.oa_avg, r.chord_f1);
    return buf;
}

}  // namespace proll
