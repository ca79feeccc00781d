#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace proll {

struct NoteEvent {
    int pitch = 0;
    double onset = 0;     // beats from song start
    double duration = 0;  // beats
    int velocity = 100;

    bool operator==(const NoteEvent&) const = default;
};

struct MidiParseResult {
    std::vector<NoteEvent> notes;  // sorted by (onset, pitch)
    bool truncated_note = false;   // dangling note-on clipped at track end
    bool non_44_meter = false;     // time-signature meta other than 4/4 seen
    double tempo_bpm = 120.0;      // first tempo meta, if any
};

// SMF format 0/1 reader. Ticks become beats via the header division.
// Throws MalformedHeader, UnsupportedFormat (format 2 / SMPTE division).
MidiParseResult parse_midi(const std::vector<uint8_t>& bytes);

// Single-track format 0 writer, division 480, 4/4; note-offs precede
// note-ons at equal ticks so zero-length gaps survive a round trip.
std::vector<uint8_t> write_midi(const std::vector<NoteEvent>& notes, double tempo_bpm = 120.0);

std::vector<uint8_t> read_file_bytes(const std::string& path);        // IoError
void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);

}  // namespace proll
