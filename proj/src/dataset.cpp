#include "proll/dataset.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "proll/errors.hpp"

static_assert(std::endian::native == std::endian::little, "dataset io assumes little-endian host");

namespace proll {

namespace {

constexpr char kMagic[4] = {'P', 'R', 'L', 'L'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t take_u32(std::istream& is, const char* what) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw TruncatedFile(std::string("dataset ") + what);
    return v;
}

}  // namespace

void save_dataset(const std::string& path, const SegmentDataset& ds) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<uint32_t>(ds.records.size()));
    put_u32(os, 2);
    put_u32(os, static_cast<uint32_t>(ds.pitches));
    put_u32(os, static_cast<uint32_t>(ds.frames));

    size_t bits = static_cast<size_t>(2) * ds.pitches * ds.frames;
    std::vector<uint8_t> packed((bits + 7) / 8);
    for (const auto& rec : ds.records) {
        if (rec.roll.rank() != 3 || rec.roll.dim(0) != 2 || rec.roll.dim(1) != ds.pitches ||
            rec.roll.dim(2) != ds.frames)
            throw ShapeMismatch("dataset record roll shape");
        if (rec.chords.size() != static_cast<size_t>(kBeatsPerSegment))
            throw LengthMismatch("dataset record chord sequence");
        std::fill(packed.begin(), packed.end(), uint8_t(0));
        for (size_t i = 0; i < bits; ++i)
            if (rec.roll[i] > 0.5f) packed[i >> 3] |= static_cast<uint8_t>(1u << (i & 7));
        os.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
        for (const auto& beat : rec.chords)
            os.write(reinterpret_cast<const char*>(beat.data()), kChordDim);
        uint8_t tag = static_cast<uint8_t>(rec.split);
        os.write(reinterpret_cast<const char*>(&tag), 1);
    }
    if (!os) throw IoError("write failed: " + path);
}

SegmentDataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4)) throw TruncatedFile("dataset magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw BadMagic(path);
    uint32_t version = take_u32(is, "version");
    if (version != kVersion) throw VersionMismatch("dataset version " + std::to_string(version));
    uint32_t count = take_u32(is, "count");
    uint32_t ch = take_u32(is, "channels");
    uint32_t P = take_u32(is, "pitches");
    uint32_t F = take_u32(is, "frames");
    if (ch != 2 || P == 0 || F == 0) throw BadMagic("dataset dims (" + std::to_string(ch) + ")");

    SegmentDataset ds;
    ds.pitches = static_cast<int>(P);
    ds.frames = static_cast<int>(F);
    size_t bits = static_cast<size_t>(2) * P * F;
    std::vector<uint8_t> packed((bits + 7) / 8);
    for (uint32_t i = 0; i < count; ++i) {
        SegmentRecord rec;
        if (!is.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size())))
            throw TruncatedFile("dataset roll payload");
        rec.roll = Tensor({2, static_cast<int>(P), static_cast<int>(F)});
        for (size_t b = 0; b < bits; ++b)
            if (packed[b >> 3] >> (b & 7) & 1) rec.roll[b] = 1.f;
        rec.chords.resize(kBeatsPerSegment);
        for (auto& beat : rec.chords)
            if (!is.read(reinterpret_cast<char*>(beat.data()), kChordDim))
                throw TruncatedFile("dataset chord payload");
        uint8_t tag;
        if (!is.read(reinterpret_cast<char*>(&tag), 1)) throw TruncatedFile("dataset split tag");
        rec.split = tag ? Split::Val : Split::Train;
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

}  // namespace proll
