#include "proll/ssm.hpp"

#include <cmath>

#include "proll/errors.hpp"

namespace proll {

template <typename T>
std::pair<T, T> discretize_scalar(T a, T b, T delta, bool exact_zoh) {
    if (!(delta > T(0))) throw NonpositiveDelta("delta = " + std::to_string(delta));
    T da = delta * a;
    T abar = std::exp(da);
    if (!exact_zoh) return {abar, delta * b};
    T phi = std::abs(da) < T(1e-5) ? delta * (T(1) + da / T(2) + da * da / T(6)) : std::expm1(da) / a;
    return {abar, phi * b};
}

template <typename T>
TensorT<T> ssm_kernel_conv(const TensorT<T>& x, const std::vector<T>& abar, const std::vector<T>& bbar,
                           const std::vector<T>& c) {
    const auto& xs = x.shape();
    if (xs.size() != 3 || xs[2] != 1) throw ShapeMismatch("kernel conv expects (B,L,1)");
    size_t n = abar.size();
    if (bbar.size() != n || c.size() != n) throw ShapeMismatch("kernel conv state dims differ");
    int B = xs[0], L = xs[1];

    // K[t] = sum_n c[n] abar[n]^t bbar[n]
    std::vector<T> kernel(L, T(0));
    for (size_t i = 0; i < n; ++i) {
        T pw = bbar[i] * c[i];
        for (int t = 0; t < L; ++t) {
            kernel[t] += pw;
            pw *= abar[i];
        }
    }
    TensorT<T> y({B, L, 1});
    for (int bb = 0; bb < B; ++bb)
        for (int t = 0; t < L; ++t) {
            T acc = 0;
            for (int tau = 0; tau <= t; ++tau) acc += kernel[tau] * x[(static_cast<size_t>(bb) * L + t - tau)];
            y[static_cast<size_t>(bb) * L + t] = acc;
        }
    return y;
}

template <typename T>
SSMParamsT<T>::SSMParamsT(ParamStoreT<T>& ps, const std::string& prefix, int channels_, int n_state, Rng& rng)
    : channels(channels_), state_dim(n_state) {
    A_log = &ps.add(prefix + ".A_log", {channels_, n_state});
    for (int c = 0; c < channels_; ++c)
        for (int n = 0; n < n_state; ++n)
            A_log->value[static_cast<size_t>(c) * n_state + n] = std::log(static_cast<T>(n + 1));
    D = &ps.add(prefix + ".D", {channels_});
    D->value.fill(T(1));
    wb = LinearT<T>(ps, prefix + ".wb", channels_, n_state, Init::GlorotUniform, rng);
    wc = LinearT<T>(ps, prefix + ".wc", channels_, n_state, Init::GlorotUniform, rng);
    wdelta = LinearT<T>(ps, prefix + ".wdelta", channels_, 1, Init::GlorotUniform, rng);
    // softplus(-3) ~ 0.049 keeps initial step sizes small but nonzero
    wdelta.b->value.fill(T(-3));
}

template <typename T>
ad::VarT<T> selective_scan(const ad::VarT<T>& x, const SSMParamsT<T>& p) {
    const auto& xs = x->value.shape();
    if (xs.size() != 3 || xs[2] != p.channels) throw ShapeMismatch("selective_scan input");
    int B = xs[0], L = xs[1];
    auto delta = ad::softplus(ad::reshape(p.wdelta(x), {B, L}));
    auto bt = p.wb(x);
    auto ct = p.wc(x);
    auto a = ad::neg(ad::exp_of(ad::leaf(*p.A_log)));
    auto y = ad::selective_scan_core(x, delta, bt, ct, a, p.exact_zoh);
    return ad::add(y, ad::scale_lastdim(x, ad::leaf(*p.D)));
}

template <typename T>
MambaBlockT<T>::MambaBlockT(ParamStoreT<T>& ps, const std::string& prefix, int channels_, Rng& rng,
                            int n_state, int expand, int conv_width)
    : channels(channels_), expanded(channels_ * expand) {
    norm = LayerNormT<T>(ps, prefix + ".norm", channels_);
    proj_ssm = LinearT<T>(ps, prefix + ".in_ssm", channels_, expanded, Init::HeNormal, rng);
    proj_gate = LinearT<T>(ps, prefix + ".in_gate", channels_, expanded, Init::HeNormal, rng);
    conv = DWConv1dT<T>(ps, prefix + ".conv", expanded, conv_width, rng);
    ssm = SSMParamsT<T>(ps, prefix + ".ssm", expanded, n_state, rng);
    out_proj = LinearT<T>(ps, prefix + ".out", expanded, channels_, Init::Zero, rng);
}

template <typename T>
ad::VarT<T> MambaBlockT<T>::operator()(const ad::VarT<T>& x) const {
    auto h = norm(x);
    auto b1 = selective_scan(ad::silu(conv(proj_ssm(h))), ssm);
    auto b2 = ad::silu(proj_gate(h));
    return out_proj(ad::mul(b1, b2));
}

#define PROLL_INSTANTIATE_SSM(T)                                                                  \
    template std::pair<T, T> discretize_scalar<T>(T, T, T, bool);                                 \
    template TensorT<T> ssm_kernel_conv<T>(const TensorT<T>&, const std::vector<T>&,              \
                                           const std::vector<T>&, const std::vector<T>&);         \
    template struct SSMParamsT<T>;                                                                \
    template ad::VarT<T> selective_scan<T>(const ad::VarT<T>&, const SSMParamsT<T>&);             \
    template struct MambaBlockT<T>;

PROLL_INSTANTIATE_SSM(float)
PROLL_INSTANTIATE_SSM(double)

}  // namespace proll
