#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <vector>

#include "proll/chords.hpp"
#include "proll/dataset.hpp"
#include "proll/errors.hpp"
#include "proll/pianoroll.hpp"
#include "proll/rng.hpp"

using namespace proll;

namespace {

std::vector<uint8_t> slurp(const char* path) {
    std::ifstream is(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void spit(const char* path, const std::vector<uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

SegmentDataset make_dataset() {
    SegmentDataset ds;
    Rng rng = rng_stream(61, "dataset", 0);
    for (int i = 0; i < 3; ++i) {
        SegmentRecord rec;
        rec.roll = Tensor({2, kFullPitches, kFullFrames});
        for (size_t j = 0; j < rec.roll.size(); ++j) rec.roll[j] = rng.below(8) == 0 ? 1.0f : 0.0f;
        rec.chords = ChordSequence(kBeatsPerSegment);
        for (int b = 0; b < kBeatsPerSegment; ++b) {
            ChordLabel l;
            l.root = static_cast<int>(rng.below(12));
            l.bass = static_cast<int>(rng.below(12));
            l.chroma = static_cast<uint16_t>(1 + rng.below(4095));
            rec.chords[b] = encode_chord(l);
        }
        rec.split = i == 2 ? Split::Val : Split::Train;
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

}  // namespace

TEST_CASE("round trip preserves rolls, chords, and splits") {
    auto ds = make_dataset();
    const char* path = "ds_roundtrip.prll";
    save_dataset(path, ds);
    auto back = load_dataset(path);

    CHECK(back.pitches == ds.pitches);
    CHECK(back.frames == ds.frames);
    REQUIRE(back.records.size() == ds.records.size());
    for (size_t i = 0; i < ds.records.size(); ++i) {
        CHECK(max_abs_diff(back.records[i].roll, ds.records[i].roll) == 0.0f);
        CHECK(back.records[i].chords == ds.records[i].chords);
        CHECK(back.records[i].split == ds.records[i].split);
    }
    CHECK(back.indices(Split::Train) == std::vector<size_t>{0, 1});
    CHECK(back.indices(Split::Val) == std::vector<size_t>{2});

    // byte-exact: saving the loaded copy reproduces the file
    const char* path2 = "ds_roundtrip2.prll";
    save_dataset(path2, back);
    CHECK(slurp(path) == slurp(path2));
    std::remove(path);
    std::remove(path2);
}

TEST_CASE("non-default dims survive the container") {
    SegmentDataset ds;
    ds.pitches = 32;
    ds.frames = 32;
    SegmentRecord rec;
    rec.roll = Tensor({2, 32, 32});
    rec.roll[5] = 1.0f;
    rec.roll[static_cast<size_t>(32) * 32 + 7] = 1.0f;
    rec.chords = ChordSequence(kBeatsPerSegment);
    ds.records.push_back(rec);
    const char* path = "ds_small.prll";
    save_dataset(path, ds);
    auto back = load_dataset(path);
    REQUIRE(back.records.size() == 1);
    CHECK(back.pitches == 32);
    CHECK(max_abs_diff(back.records[0].roll, rec.roll) == 0.0f);
    std::remove(path);
}

TEST_CASE("error taxonomy: magic, version, truncation") {
    auto ds = make_dataset();
    const char* path = "ds_errors.prll";
    save_dataset(path, ds);
    auto good = slurp(path);

    auto bad = good;
    bad[0] = 'X';
    spit(path, bad);
    CHECK_THROWS_AS(load_dataset(path), BadMagic);

    bad = good;
    bad[4] = 9;
    spit(path, bad);
    CHECK_THROWS_AS(load_dataset(path), VersionMismatch);

    bad = good;
    bad.resize(bad.size() - 100);  // count says 3, payload holds less
    spit(path, bad);
    CHECK_THROWS_AS(load_dataset(path), TruncatedFile);

    bad = good;
    bad.resize(6);  // header cut short
    spit(path, bad);
    CHECK_THROWS_AS(load_dataset(path), TruncatedFile);

    std::remove(path);
    CHECK_THROWS_AS(load_dataset("missing.prll"), IoError);
}
