#pragma once

#include <string>
#include <utility>
#include <vector>

#include "proll/nn.hpp"

namespace proll {

// Zero-order-hold discretization of a scalar diagonal entry:
// abar = exp(delta*a), bbar = (exp(delta*a)-1)/a * b, series near delta*a = 0.
// With exact_zoh = false, the simplified bbar = delta*b is used instead.
template <typename T>
std::pair<T, T> discretize_scalar(T a, T b, T delta, bool exact_zoh = true);

// Reference path for constant parameters: y = x * K where
// K[t] = sum_n c[n] * abar[n]^t * bbar[n], causal. x is (B,L,1).
template <typename T>
TensorT<T> ssm_kernel_conv(const TensorT<T>& x, const std::vector<T>& abar, const std::vector<T>& bbar,
                           const std::vector<T>& c);

// Diagonal selective state space parameters over `channels` channels with
// `state_dim` states each. A = -exp(A_log) stays negative; per-position
// delta/B/C come from linear projections of the input.
template <typename T>
struct SSMParamsT {
    ParamT<T>* A_log = nullptr;  // (C, N)
    ParamT<T>* D = nullptr;      // (C) skip
    LinearT<T> wb, wc, wdelta;
    int channels = 0, state_dim = 0;
    bool exact_zoh = true;

    SSMParamsT() = default;
    SSMParamsT(ParamStoreT<T>& ps, const std::string& prefix, int channels, int n_state, Rng& rng);
};

// x (B,L,C) -> y (B,L,C): h_t = abar_t h_{t-1} + bbar_t x_t, y_t = C_t h_t + D x_t.
template <typename T>
ad::VarT<T> selective_scan(const ad::VarT<T>& x, const SSMParamsT<T>& p);

// Two-branch gated block: pre-norm, then
//   branch 1: linear C->EC, causal depthwise conv, SiLU, selective scan
//   branch 2: linear C->EC, SiLU
// merged by Hadamard product and projected back EC->C (zero-init projection,
// so the block starts as a no-op for residual callers).
template <typename T>
struct MambaBlockT {
    LayerNormT<T> norm;
    LinearT<T> proj_ssm, proj_gate, out_proj;
    DWConv1dT<T> conv;
    SSMParamsT<T> ssm;
    int channels = 0, expanded = 0;

    MambaBlockT() = default;
    MambaBlockT(ParamStoreT<T>& ps, const std::string& prefix, int channels, Rng& rng, int n_state = 8,
                int expand = 2, int conv_width = 4);
    ad::VarT<T> operator()(const ad::VarT<T>& x) const;
};

using MambaBlock = MambaBlockT<float>;

}  // namespace proll
