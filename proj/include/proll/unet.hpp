#pragma once

#include <memory>
#include <string>
#include <vector>

#include "proll/nn.hpp"
#include "proll/ssm.hpp"
#include "proll/wavelet.hpp"

namespace proll {

struct UNetConfig {
    int in_channels = 2;
    int image_size = 128;
    int base = 32;
    std::vector<int> mults = {1, 2, 4};
    int attn_max_hw = 1024;  // attention/mamba only where H*W fits
    int temb_dim = 128;
    int cond_dim = 512;
    int heads = 4;
    int ssm_states = 8;
    int max_steps = 1000;
    bool enable_wavelet_skips = true;
    bool enable_mamba = true;

    int levels() const { return static_cast<int>(mults.size()); }
    int channels_at(int level) const { return base * mults[level]; }
    bool attn_at(int level) const {
        int hw = (image_size >> level) * (image_size >> level);
        return hw <= attn_max_hw;
    }
};

// 64 geometric frequencies from 1 down to 1/10000, interleaved sin/cos,
// then a two-layer SiLU MLP.
template <typename T>
struct TimeEmbeddingT {
    LinearT<T> l1, l2;
    int dim = 128;

    TimeEmbeddingT() = default;
    TimeEmbeddingT(ParamStoreT<T>& ps, const std::string& prefix, int dim, Rng& rng);

    static TensorT<T> sinusoid(const std::vector<int>& t, int dim);  // (B, dim)
    ad::VarT<T> operator()(const std::vector<int>& t, int max_steps) const;
};

// GN -> SiLU -> conv3x3 -> +time bias -> GN -> SiLU -> conv3x3 (zero-init),
// residual with a 1x1 projection when channel counts change.
template <typename T>
struct ResBlockT {
    GroupNormT<T> n1, n2;
    Conv2dT<T> c1, c2, skip;
    LinearT<T> temb_proj;
    int cin = 0, cout = 0;

    ResBlockT() = default;
    ResBlockT(ParamStoreT<T>& ps, const std::string& prefix, int cin, int cout, int temb_dim, Rng& rng);
    ad::VarT<T> operator()(const ad::VarT<T>& x, const ad::VarT<T>& temb) const;
};

// Pre-norm self-attention, pre-norm single-token cross-attention over the
// 512-D condition latent, feed-forward x4. Residual branches end in
// zero-init projections.
template <typename T>
struct TransformerBlockT {
    LayerNormT<T> ln1, ln2, ln3;
    LinearT<T> q1, k1, v1, o1;
    LinearT<T> q2, k2, v2, o2;
    LinearT<T> cond_proj;
    LinearT<T> f1, f2;
    int channels = 0, heads = 4, cond_dim = 512;

    TransformerBlockT() = default;
    TransformerBlockT(ParamStoreT<T>& ps, const std::string& prefix, int channels, int heads, int cond_dim,
                      Rng& rng);
    // x (B,C,H,W), cond (B,cond_dim) -> same shape as x
    ad::VarT<T> operator()(const ad::VarT<T>& x, const ad::VarT<T>& cond) const;
};

// Transformer block, then flatten -> layer norm -> Mamba block with a
// residual around the Mamba stage; reshape back to (B,C,H,W).
template <typename T>
struct TransformerMambaT {
    TransformerBlockT<T> transformer;
    LayerNormT<T> norm;
    MambaBlockT<T> mamba;
    bool mamba_enabled = true;
    int channels = 0;

    TransformerMambaT() = default;
    TransformerMambaT(ParamStoreT<T>& ps, const std::string& prefix, int channels, const UNetConfig& cfg,
                      Rng& rng);
    ad::VarT<T> operator()(const ad::VarT<T>& x, const ad::VarT<T>& cond) const;
};

template <typename T>
struct UNetT {
    UNetConfig cfg;
    TimeEmbeddingT<T> temb;
    Conv2dT<T> stem;
    std::vector<ResBlockT<T>> enc_res;
    std::vector<std::unique_ptr<TransformerMambaT<T>>> enc_tm;  // per level, null when attention is off
    std::vector<Conv2dT<T>> down;                               // levels-1 stride-2 convs
    ResBlockT<T> mid_res1, mid_res2;
    std::unique_ptr<TransformerMambaT<T>> mid_tm;
    std::vector<std::unique_ptr<WTBT<T>>> skip_wtb;  // per level when wavelet skips are on
    std::vector<ResBlockT<T>> dec_res;
    std::vector<std::unique_ptr<TransformerMambaT<T>>> dec_tm;
    std::vector<Conv2dT<T>> up;  // nearest x2 followed by these convs
    GroupNormT<T> head_norm;
    Conv2dT<T> head_conv;
    ParamT<T>* null_cond = nullptr;  // learned 512-D null-condition token

    UNetT() = default;
    UNetT(ParamStoreT<T>& ps, const UNetConfig& cfg, Rng& rng);

    // x (B,2,H,W); t one step index per batch item, 0-based; cond (B,cond_dim).
    ad::VarT<T> operator()(const ad::VarT<T>& x, const std::vector<int>& t, const ad::VarT<T>& cond) const;

    ad::VarT<T> null_latent(int batch) const;  // (B, cond_dim) from the null token

    // Sum of wavelet regularizer terms over all skip-filter instances.
    ad::VarT<T> wavelet_regularizer(bool literal = false) const;
};

using UNet = UNetT<float>;

template <typename T>
size_t count_params_containing(const ParamStoreT<T>& ps, const std::string& needle) {
    size_t n = 0;
    for (auto* p : ps.all())
        if (p->name.find(needle) != std::string::npos) n += p->value.size();
    return n;
}

}  // namespace proll
