#pragma once

#include <string>

#include "proll/nn.hpp"

namespace proll {

// Largest group count in {8,4,2,1} that divides the channel count.
inline int norm_groups_for(int channels) {
    for (int g : {8, 4, 2, 1})
        if (channels % g == 0) return g;
    return 1;
}

// Learnable analysis (a0/a1) and synthesis (s0/s1) filter pairs, length n.
template <typename T>
struct WaveletFiltersT {
    ParamT<T>* a0 = nullptr;
    ParamT<T>* a1 = nullptr;
    ParamT<T>* s0 = nullptr;
    ParamT<T>* s1 = nullptr;
    int n = 2;

    WaveletFiltersT() = default;
    WaveletFiltersT(ParamStoreT<T>& ps, const std::string& prefix, int n);
};

// Fill with the orthonormal Haar pair (padded with zeros when n > 2):
// a0=s0=(1,1)/sqrt(2), a1=s1=(1,-1)/sqrt(2).
template <typename T>
void haar_init(WaveletFiltersT<T>& f);

// (4,1,N,N) analysis kernel stack (F_ll, F_lh, F_hl, F_hh), F_xy = x-filter
// outer y-filter; rebuilt from the filters on every call so gradients reach them.
template <typename T>
ad::VarT<T> build_wavelet_kernel(const ad::VarT<T>& row_low, const ad::VarT<T>& row_high);

// Single-level 2-D transform: (B,C,H,W) -> (B,4C,H/2,W/2), subbands
// (ll,lh,hl,hh) interleaved per channel (output channel 4c+s).
template <typename T>
ad::VarT<T> dwt2d(const ad::VarT<T>& x, const WaveletFiltersT<T>& f);

// Inverse via stride-2 transposed convolution with the synthesis kernels:
// (B,4C,H/2,W/2) -> (B,C,H,W).
template <typename T>
ad::VarT<T> idwt2d(const ad::VarT<T>& y, const WaveletFiltersT<T>& f);

// Learnable wavelet node: dwt -> depthwise 3x3 (x r channels) -> pointwise
// 1x1 back to 4C (zero-init) -> idwt. forward() adds the input residual.
template <typename T>
struct LWNT {
    WaveletFiltersT<T> filters;
    Conv2dT<T> depthwise, pointwise;
    int channels = 0, r = 2;

    LWNT() = default;
    LWNT(ParamStoreT<T>& ps, const std::string& prefix, int channels, Rng& rng, int r = 2, int filter_len = 2);

    ad::VarT<T> path(const ad::VarT<T>& x) const;  // without the residual
    ad::VarT<T> operator()(const ad::VarT<T>& x) const { return ad::add(path(x), x); }
};

// Wavelet transform block for skip connections:
//   h = x + lwn_path(norm1(x)); y = h + ffn(norm2(h))
// Zero-init pointwise/ffn output convs make this the identity at start.
template <typename T>
struct WTBT {
    GroupNormT<T> norm1, norm2;
    LWNT<T> lwn;
    Conv2dT<T> ffn1, ffn2;
    int channels = 0;

    WTBT() = default;
    WTBT(ParamStoreT<T>& ps, const std::string& prefix, int channels, Rng& rng, int ffn_mult = 4);
    ad::VarT<T> operator()(const ad::VarT<T>& x) const;
};

// Sum of squared deviations of the filter cross-correlation from the ideal
// delta of height 2 (per-lag form); `literal` compares the lag sum against 2
// as a single scalar instead.
template <typename T>
ad::VarT<T> wavelet_loss(const WaveletFiltersT<T>& f, bool literal = false);

template <typename T>
T wavelet_loss_value(const WaveletFiltersT<T>& f, bool literal = false);

using WaveletFilters = WaveletFiltersT<float>;
using LWN = LWNT<float>;
using WTB = WTBT<float>;

}  // namespace proll
