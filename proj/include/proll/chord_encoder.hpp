#pragma once

#include <string>

#include "proll/chords.hpp"
#include "proll/nn.hpp"

namespace proll {

// Chord-sequence conditioner: embed 36->64 per beat, run a bidirectional
// tanh RNN (hidden 128), concatenate the two final states and project
// 256->512. Trained jointly with the diffusion loss.
template <typename T>
struct ChordEncoderT {
    static constexpr int kEmbed = 64;
    static constexpr int kHidden = 128;
    static constexpr int kLatent = 512;

    LinearT<T> embed;
    ParamT<T>* wx_f = nullptr;  // (128, 64)
    ParamT<T>* wh_f = nullptr;  // (128, 128)
    ParamT<T>* b_f = nullptr;
    ParamT<T>* wx_b = nullptr;
    ParamT<T>* wh_b = nullptr;
    ParamT<T>* b_b = nullptr;
    LinearT<T> head;

    ChordEncoderT() = default;
    ChordEncoderT(ParamStoreT<T>& ps, const std::string& prefix, Rng& rng);

    // seq (B, 32, 36) -> latent (B, 512)
    ad::VarT<T> operator()(const ad::VarT<T>& seq) const;
};

using ChordEncoder = ChordEncoderT<float>;

}  // namespace proll
