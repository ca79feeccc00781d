#include "proll/chord_encoder.hpp"

#include "proll/errors.hpp"

namespace proll {

template <typename T>
ChordEncoderT<T>::ChordEncoderT(ParamStoreT<T>& ps, const std::string& prefix, Rng& rng) {
    embed = LinearT<T>(ps, prefix + ".embed", kChordDim, kEmbed, Init::GlorotUniform, rng);
    auto recurrent = [&](const std::string& name, ParamT<T>*& wx, ParamT<T>*& wh, ParamT<T>*& b) {
        wx = &ps.add(prefix + name + ".wx", {kHidden, kEmbed});
        wh = &ps.add(prefix + name + ".wh", {kHidden, kHidden});
        b = &ps.add(prefix + name + ".bias", {kHidden});
        init_glorot_uniform(*wx, kEmbed, kHidden, rng);
        init_glorot_uniform(*wh, kHidden, kHidden, rng);
    };
    recurrent(".fwd", wx_f, wh_f, b_f);
    recurrent(".bwd", wx_b, wh_b, b_b);
    head = LinearT<T>(ps, prefix + ".head", 2 * kHidden, kLatent, Init::GlorotUniform, rng);
}

template <typename T>
ad::VarT<T> ChordEncoderT<T>::operator()(const ad::VarT<T>& seq) const {
    const auto& ss = seq->value.shape();
    if (ss.size() != 3 || ss[1] != kBeatsPerSegment || ss[2] != kChordDim)
        throw ShapeMismatch("chord encoder expects (B,32,36)");
    int B = ss[0];
    auto xe = embed(seq);  // (B,32,64)

    auto run = [&](bool forward, ParamT<T>* wx, ParamT<T>* wh, ParamT<T>* b) {
        auto wxv = ad::leaf(*wx);
        auto whv = ad::leaf(*wh);
        auto bv = ad::leaf(*b);
        ad::VarT<T> h = ad::constant(TensorT<T>({B, kHidden}));
        for (int i = 0; i < kBeatsPerSegment; ++i) {
            int t = forward ? i : kBeatsPerSegment - 1 - i;
            auto xt = ad::reshape(ad::slice(xe, 1, t, 1), {B, kEmbed});
            h = ad::tanh_of(ad::add(ad::linear(xt, wxv, bv), ad::linear(h, whv, ad::VarT<T>{})));
        }
        return h;
    };
    auto hf = run(true, wx_f, wh_f, b_f);
    auto hb = run(false, wx_b, wh_b, b_b);
    return head(ad::concat<T>({hf, hb}, 1));  // (B, 512)
}

template struct ChordEncoderT<float>;
template struct ChordEncoderT<double>;

}  // namespace proll
