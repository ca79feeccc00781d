#include "proll/wavelet.hpp"

#include <cmath>

#include "proll/errors.hpp"

namespace proll {

template <typename T>
WaveletFiltersT<T>::WaveletFiltersT(ParamStoreT<T>& ps, const std::string& prefix, int n_) : n(n_) {
    if (n_ < 2 || n_ % 2) throw ShapeMismatch("wavelet filter length must be even and >= 2");
    a0 = &ps.add(prefix + ".a0", {n_});
    a1 = &ps.add(prefix + ".a1", {n_});
    s0 = &ps.add(prefix + ".s0", {n_});
    s1 = &ps.add(prefix + ".s1", {n_});
}

template <typename T>
void haar_init(WaveletFiltersT<T>& f) {
    T h = T(1) / std::sqrt(T(2));
    for (ParamT<T>* p : {f.a0, f.a1, f.s0, f.s1}) p->value.fill(T(0));
    f.a0->value[0] = h;
    f.a0->value[1] = h;
    f.a1->value[0] = h;
    f.a1->value[1] = -h;
    f.s0->value = f.a0->value;
    f.s1->value = f.a1->value;
}

template <typename T>
ad::VarT<T> build_wavelet_kernel(const ad::VarT<T>& low, const ad::VarT<T>& high) {
    int n = low->value.dim(0);
    auto ll = ad::reshape(ad::outer(low, low), {1, 1, n, n});
    auto lh = ad::reshape(ad::outer(low, high), {1, 1, n, n});
    auto hl = ad::reshape(ad::outer(high, low), {1, 1, n, n});
    auto hh = ad::reshape(ad::outer(high, high), {1, 1, n, n});
    return ad::concat<T>({ll, lh, hl, hh}, 0);
}

namespace {

template <typename T>
void require_even_hw(const TensorT<T>& x, const char* op) {
    if (x.rank() != 4) throw ShapeMismatch(std::string(op) + " expects (B,C,H,W)");
    if (x.dim(2) % 2 || x.dim(3) % 2)
        throw OddSpatialDims(std::string(op) + ": " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
}

}  // namespace

template <typename T>
ad::VarT<T> dwt2d(const ad::VarT<T>& x, const WaveletFiltersT<T>& f) {
    require_even_hw(x->value, "dwt2d");
    int c = x->value.dim(1);
    auto kernel = build_wavelet_kernel(ad::leaf(*f.a0), ad::leaf(*f.a1));
    auto weight = c == 1 ? kernel : ad::repeat_outer(kernel, c);
    return ad::conv2d(x, weight, ad::VarT<T>{}, 2, (f.n - 2) / 2, c);
}

template <typename T>
ad::VarT<T> idwt2d(const ad::VarT<T>& y, const WaveletFiltersT<T>& f) {
    const auto& ys = y->value.shape();
    if (ys.size() != 4 || ys[1] % 4) throw ShapeMismatch("idwt2d expects (B,4C,H,W)");
    int c = ys[1] / 4;
    auto kernel = build_wavelet_kernel(ad::leaf(*f.s0), ad::leaf(*f.s1));
    auto weight = c == 1 ? kernel : ad::repeat_outer(kernel, c);
    return ad::conv_transpose2d(y, weight, 2, (f.n - 2) / 2, c);
}

template <typename T>
LWNT<T>::LWNT(ParamStoreT<T>& ps, const std::string& prefix, int channels_, Rng& rng, int r_, int filter_len)
    : channels(channels_), r(r_) {
    filters = WaveletFiltersT<T>(ps, prefix + ".wavelet", filter_len);
    haar_init(filters);
    int wc = 4 * channels_;
    depthwise = Conv2dT<T>(ps, prefix + ".depthwise", wc, wc * r_, 3, Init::HeNormal, rng, 1, 1, wc);
    pointwise = Conv2dT<T>(ps, prefix + ".pointwise", wc * r_, wc, 1, Init::Zero, rng);
}

template <typename T>
ad::VarT<T> LWNT<T>::path(const ad::VarT<T>& x) const {
    require_even_hw(x->value, "lwn");
    return idwt2d(pointwise(depthwise(dwt2d(x, filters))), filters);
}

template <typename T>
WTBT<T>::WTBT(ParamStoreT<T>& ps, const std::string& prefix, int channels_, Rng& rng, int ffn_mult)
    : channels(channels_) {
    norm1 = GroupNormT<T>(ps, prefix + ".norm1", channels_, norm_groups_for(channels_));
    norm2 = GroupNormT<T>(ps, prefix + ".norm2", channels_, norm_groups_for(channels_));
    lwn = LWNT<T>(ps, prefix + ".lwn", channels_, rng);
    ffn1 = Conv2dT<T>(ps, prefix + ".ffn1", channels_, channels_ * ffn_mult, 1, Init::HeNormal, rng);
    ffn2 = Conv2dT<T>(ps, prefix + ".ffn2", channels_ * ffn_mult, channels_, 1, Init::Zero, rng);
}

template <typename T>
ad::VarT<T> WTBT<T>::operator()(const ad::VarT<T>& x) const {
    auto h = ad::add(x, lwn.path(norm1(x)));
    auto y = ad::add(h, ffn2(ad::silu(ffn1(norm2(h)))));
    return y;
}

template <typename T>
ad::VarT<T> wavelet_loss(const WaveletFiltersT<T>& f, bool literal) {
    return ad::filter_reconstruction_loss(ad::leaf(*f.a0), ad::leaf(*f.s0), ad::leaf(*f.a1), ad::leaf(*f.s1),
                                          literal);
}

template <typename T>
T wavelet_loss_value(const WaveletFiltersT<T>& f, bool literal) {
    return wavelet_loss(f, literal)->value[0];
}

#define PROLL_INSTANTIATE_WAVELET(T)                                                          \
    template struct WaveletFiltersT<T>;                                                       \
    template void haar_init<T>(WaveletFiltersT<T>&);                                          \
    template ad::VarT<T> build_wavelet_kernel<T>(const ad::VarT<T>&, const ad::VarT<T>&);     \
    template ad::VarT<T> dwt2d<T>(const ad::VarT<T>&, const WaveletFiltersT<T>&);             \
    template ad::VarT<T> idwt2d<T>(const ad::VarT<T>&, const WaveletFiltersT<T>&);            \
    template struct LWNT<T>;                                                                  \
    template struct WTBT<T>;                                                                  \
    template ad::VarT<T> wavelet_loss<T>(const WaveletFiltersT<T>&, bool);                    \
    template T wavelet_loss_value<T>(const WaveletFiltersT<T>&, bool);

PROLL_INSTANTIATE_WAVELET(float)
PROLL_INSTANTIATE_WAVELET(double)

}  // namespace proll
