#include "proll/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "proll/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes little-endian host");

namespace proll {

namespace {

constexpr char kMagic[4] = {'P', 'R', 'O', 'F'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is, const char* what) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T)))
        throw TruncatedFile(std::string("checkpoint ") + what);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(kMagic, 4);
    put<uint32_t>(os, kVersion);
    put<uint32_t>(os, static_cast<uint32_t>(entries.size()));
    for (const auto& e : entries) {
        if (e.name.size() > 0xFFFF) throw IoError("checkpoint entry name too long: " + e.name);
        put<uint16_t>(os, static_cast<uint16_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        put<uint8_t>(os, static_cast<uint8_t>(e.value.rank()));
        for (int d = 0; d < e.value.rank(); ++d) put<uint32_t>(os, static_cast<uint32_t>(e.value.dim(d)));
        os.write(reinterpret_cast<const char*>(e.value.data()),
                 static_cast<std::streamsize>(e.value.size() * sizeof(float)));
    }
    if (!os) throw IoError("write failed: " + path);
}

std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4)) throw TruncatedFile("checkpoint magic in " + path);
    if (std::memcmp(magic, kMagic, 4) != 0) throw BadMagic("not a checkpoint file: " + path);
    uint32_t version = take<uint32_t>(is, "version");
    if (version != kVersion) throw VersionMismatch("checkpoint version " + std::to_string(version));
    uint32_t count = take<uint32_t>(is, "entry count");
    std::vector<CheckpointEntry> entries;
    entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        uint16_t nlen = take<uint16_t>(is, "name length");
        std::string name(nlen, '\0');
        if (nlen && !is.read(name.data(), nlen)) throw TruncatedFile("checkpoint entry name");
        uint8_t rank = take<uint8_t>(is, "rank");
        std::vector<int> shape(rank);
        for (int d = 0; d < rank; ++d) shape[d] = static_cast<int>(take<uint32_t>(is, "dim"));
        Tensor t(shape);
        if (t.size() &&
            !is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float))))
            throw TruncatedFile("checkpoint payload of " + name);
        entries.push_back({std::move(name), std::move(t)});
    }
    return entries;
}

}  // namespace proll
