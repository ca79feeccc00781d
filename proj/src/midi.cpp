#include "proll/midi.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>

#include "proll/errors.hpp"

namespace proll {

namespace {

struct Cursor {
    const uint8_t* p;
    const uint8_t* end;

    uint8_t u8(const char* what) {
        if (p >= end) throw MalformedHeader(std::string("truncated: ") + what);
        return *p++;
    }
    uint16_t u16(const char* what) {
        uint16_t hi = u8(what), lo = u8(what);
        return static_cast<uint16_t>(hi << 8 | lo);
    }
    uint32_t u32(const char* what) {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = v << 8 | u8(what);
        return v;
    }
    uint32_t varlen(const char* what) {
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            uint8_t b = u8(what);
            v = v << 7 | (b & 0x7F);
            if (!(b & 0x80)) return v;
        }
        throw MalformedHeader(std::string("overlong varlen: ") + what);
    }
    void skip(uint32_t n, const char* what) {
        if (end - p < static_cast<ptrdiff_t>(n)) throw MalformedHeader(std::string("truncated: ") + what);
        p += n;
    }
};

void append_varlen(std::vector<uint8_t>& out, uint32_t v) {
    uint8_t stack[4];
    int n = 0;
    stack[n++] = v & 0x7F;
    while ((v >>= 7)) stack[n++] = static_cast<uint8_t>(0x80 | (v & 0x7F));
    while (n) out.push_back(stack[--n]);
}

}  // namespace

MidiParseResult parse_midi(const std::vector<uint8_t>& bytes) {
    Cursor c{bytes.data(), bytes.data() + bytes.size()};
    if (bytes.size() < 4 || std::memcmp(c.p, "MThd", 4) != 0) throw MalformedHeader("missing MThd magic");
    c.skip(4, "magic");
    uint32_t hlen = c.u32("header length");
    if (hlen < 6) throw MalformedHeader("header chunk too short");
    uint16_t format = c.u16("format");
    uint16_t ntrks = c.u16("track count");
    uint16_t division = c.u16("division");
    c.skip(hlen - 6, "header padding");
    if (format > 1) throw UnsupportedFormat("SMF type " + std::to_string(format));
    if (division & 0x8000) throw UnsupportedFormat("SMPTE division");
    if (division == 0) throw MalformedHeader("zero division");
    double div = static_cast<double>(division);

    MidiParseResult result;
    // (channel, pitch) -> FIFO of pending note-ons
    std::deque<std::pair<uint32_t, int>> pending[16][128];

    for (uint16_t trk = 0; trk < ntrks; ++trk) {
        if (c.end - c.p < 8 || std::memcmp(c.p, "MTrk", 4) != 0) throw MalformedHeader("missing MTrk magic");
        c.skip(4, "track magic");
        uint32_t tlen = c.u32("track length");
        if (c.end - c.p < static_cast<ptrdiff_t>(tlen)) throw MalformedHeader("truncated track");
        Cursor t{c.p, c.p + tlen};
        c.skip(tlen, "track body");

        uint32_t tick = 0;
        uint8_t status = 0;
        bool ended = false;
        while (t.p < t.end && !ended) {
            tick += t.varlen("delta time");
            uint8_t b = t.u8("event status");
            if (b < 0x80) {
                if (status < 0x80) throw MalformedHeader("data byte with no running status");
                --t.p;
                b = status;
            }
            if (b == 0xFF) {
                status = 0;
                uint8_t type = t.u8("meta type");
                uint32_t len = t.varlen("meta length");
                const uint8_t* data = t.p;
                t.skip(len, "meta payload");
                if (type == 0x2F) {
                    ended = true;
                } else if (type == 0x51 && len == 3) {
                    uint32_t uspq = static_cast<uint32_t>(data[0]) << 16 | static_cast<uint32_t>(data[1]) << 8 |
                                    data[2];
                    if (uspq) result.tempo_bpm = 60e6 / uspq;
                } else if (type == 0x58 && len >= 2) {
                    int num = data[0], denom = 1 << data[1];
                    if (num != 4 || denom != 4) result.non_44_meter = true;
                }
            } else if (b == 0xF0 || b == 0xF7) {
                status = 0;
                uint32_t len = t.varlen("sysex length");
                t.skip(len, "sysex payload");
            } else {
                status = b;
                uint8_t kind = b & 0xF0;
                uint8_t chan = b & 0x0F;
                uint8_t d1 = t.u8("event data");
                uint8_t d2 = (kind == 0xC0 || kind == 0xD0) ? 0 : t.u8("event data");
                if (kind == 0x90 && d2 > 0) {
                    pending[chan][d1 & 0x7F].push_back({tick, d2});
                } else if (kind == 0x80 || (kind == 0x90 && d2 == 0)) {
                    auto& q = pending[chan][d1 & 0x7F];
                    if (!q.empty()) {
                        auto [start, vel] = q.front();
                        q.pop_front();
                        if (tick > start)
                            result.notes.push_back(
                                {d1 & 0x7F, start / div, (tick - start) / div, vel});
                    }
                }
            }
        }
        // clip dangling note-ons at track end
        for (auto& bypitch : pending)
            for (int p = 0; p < 128; ++p) {
                auto& q = bypitch[p];
                while (!q.empty()) {
                    auto [start, vel] = q.front();
                    q.pop_front();
                    result.truncated_note = true;
                    if (tick > start) result.notes.push_back({p, start / div, (tick - start) / div, vel});
                }
            }
    }
    std::stable_sort(result.notes.begin(), result.notes.end(), [](const NoteEvent& a, const NoteEvent& b) {
        if (a.onset != b.onset) return a.onset < b.onset;
        return a.pitch < b.pitch;
    });
    return result;
}

std::vector<uint8_t> write_midi(const std::vector<NoteEvent>& notes, double tempo_bpm) {
    constexpr uint32_t kDiv = 480;
    struct Ev {
        uint32_t tick;
        int order;  // offs before ons at the same tick
        uint8_t bytes[3];
    };
    std::vector<Ev> evs;
    evs.reserve(notes.size() * 2);
    for (const auto& n : notes) {
        auto on = static_cast<uint32_t>(std::llround(n.onset * kDiv));
        auto off = static_cast<uint32_t>(std::llround((n.onset + n.duration) * kDiv));
        if (off <= on) off = on + 1;
        uint8_t pitch = static_cast<uint8_t>(n.pitch & 0x7F);
        uint8_t vel = static_cast<uint8_t>(std::clamp(n.velocity, 1, 127));
        evs.push_back({on, 1, {0x90, pitch, vel}});
        evs.push_back({off, 0, {0x80, pitch, 0x40}});
    }
    std::stable_sort(evs.begin(), evs.end(), [](const Ev& a, const Ev& b) {
        if (a.tick != b.tick) return a.tick < b.tick;
        return a.order < b.order;
    });

    std::vector<uint8_t> track;
    auto uspq = static_cast<uint32_t>(std::llround(60e6 / tempo_bpm));
    track.insert(track.end(), {0x00, 0xFF, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08});  // 4/4
    track.insert(track.end(), {0x00, 0xFF, 0x51, 0x03, static_cast<uint8_t>(uspq >> 16),
                               static_cast<uint8_t>(uspq >> 8), static_cast<uint8_t>(uspq)});
    uint32_t last = 0;
    for (const auto& e : evs) {
        append_varlen(track, e.tick - last);
        last = e.tick;
        track.insert(track.end(), e.bytes, e.bytes + 3);
    }
    track.insert(track.end(), {0x00, 0xFF, 0x2F, 0x00});

    std::vector<uint8_t> out;
    auto be32 = [&](uint32_t v) {
        out.insert(out.end(), {static_cast<uint8_t>(v >> 24), static_cast<uint8_t>(v >> 16),
                               static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v)});
    };
    auto be16 = [&](uint16_t v) {
        out.insert(out.end(), {static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v)});
    };
    out.insert(out.end(), {'M', 'T', 'h', 'd'});
    be32(6);
    be16(0);
    be16(1);
    be16(kDiv);
    out.insert(out.end(), {'M', 'T', 'r', 'k'});
    be32(static_cast<uint32_t>(track.size()));
    out.insert(out.end(), track.begin(), track.end());
    return out;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return bytes;
}

void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for write: " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed: " + path);
}

}  // namespace proll
