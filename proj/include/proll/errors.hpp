#pragma once

#include <stdexcept>
#include <string>

namespace proll {

#define PROLL_ERROR(Name)                                                                        \
    struct Name : std::runtime_error {                                                           \
        explicit Name(const std::string& what) : std::runtime_error(#Name ": " + what) {}        \
    }

// numeric / shape
PROLL_ERROR(ShapeMismatch);
PROLL_ERROR(GroupsDontDivideChannels);
PROLL_ERROR(NonFiniteOutput);
PROLL_ERROR(NonpositiveDelta);
PROLL_ERROR(OddSpatialDims);

// io / serialization
PROLL_ERROR(IoError);
PROLL_ERROR(BadMagic);
PROLL_ERROR(VersionMismatch);
PROLL_ERROR(TruncatedFile);
PROLL_ERROR(BadCheckpoint);

// midi / pianoroll
PROLL_ERROR(MalformedHeader);
PROLL_ERROR(UnsupportedFormat);
PROLL_ERROR(PitchOutOfRange);
PROLL_ERROR(OnsetOutOfWindow);

// chords
PROLL_ERROR(IllegalVector);
PROLL_ERROR(LengthMismatch);
PROLL_ERROR(BadChordFile);

// diffusion / training
PROLL_ERROR(StepOutOfRange);
PROLL_ERROR(BadRange);
PROLL_ERROR(EmptyBatch);
PROLL_ERROR(EmptyDataset);

// eval
PROLL_ERROR(InsufficientSamples);
PROLL_ERROR(EmptyCorpus);

// cli
PROLL_ERROR(NoValidSongs);
PROLL_ERROR(ConfigError);

#undef PROLL_ERROR

}  // namespace proll
