#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "proll/tensor.hpp"

namespace proll {

// A named tensor with an accumulated gradient slot. Owned by the model
// modules; graphs reference parameters, they never own them.
template <typename T>
struct ParamT {
    std::string name;
    TensorT<T> value;
    TensorT<T> grad;

    ParamT() = default;
    ParamT(std::string n, TensorT<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
using ParamRefs = std::vector<ParamT<T>*>;

namespace ad {

// Reverse-mode tape. Every forward op allocates a node holding its result;
// backprop closures read node.grad and accumulate into the parents' grads.
// The op set is fixed: exactly the primitives the model needs, each with a
// hand-written backward that is covered by finite-difference checks.
template <typename T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad;
    bool needs_grad = false;
    std::vector<std::shared_ptr<NodeT>> parents;
    std::function<void(NodeT&)> backprop;

    TensorT<T>& ensure_grad() {
        if (grad.size() != value.size()) grad = TensorT<T>(value.shape());
        return grad;
    }
};

template <typename T>
using VarT = std::shared_ptr<NodeT<T>>;

template <typename T>
VarT<T> constant(TensorT<T> value);

// Leaf bound to a parameter; backward accumulates into param.grad.
template <typename T>
VarT<T> leaf(ParamT<T>& p);

// Seeds d(root)/d(root)=1 and runs the tape in reverse topological order.
// root must be scalar (size 1).
template <typename T>
void backward(const VarT<T>& root);

// ---- elementwise ----
template <typename T> VarT<T> add(const VarT<T>& a, const VarT<T>& b);
template <typename T> VarT<T> sub(const VarT<T>& a, const VarT<T>& b);
template <typename T> VarT<T> mul(const VarT<T>& a, const VarT<T>& b);
template <typename T> VarT<T> scale(const VarT<T>& a, T c);
template <typename T> VarT<T> neg(const VarT<T>& a);
template <typename T> VarT<T> exp_of(const VarT<T>& a);
template <typename T> VarT<T> tanh_of(const VarT<T>& a);
template <typename T> VarT<T> silu(const VarT<T>& a);       // x * sigmoid(x)
template <typename T> VarT<T> softplus(const VarT<T>& a);   // log(1+e^x)
template <typename T> VarT<T> softmax_lastdim(const VarT<T>& a);

// ---- shape ----
template <typename T> VarT<T> reshape(const VarT<T>& a, std::vector<int> shape);
template <typename T> VarT<T> permute(const VarT<T>& a, std::vector<int> axes);
template <typename T> VarT<T> concat(const std::vector<VarT<T>>& parts, int axis);
template <typename T> VarT<T> slice(const VarT<T>& a, int axis, int start, int len);
// Repeats the whole tensor `times` times along a new flattened leading axis;
// result shape = {times * a.shape[0], a.shape[1:]...}.
template <typename T> VarT<T> repeat_outer(const VarT<T>& a, int times);

// ---- linear algebra ----
// x: (..., Din), w: (Dout, Din), b: (Dout) or null
template <typename T> VarT<T> linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b);
// a: (..., M, K), b: (..., K, N) with equal leading dims; optional transposes
// apply to the trailing two axes.
template <typename T> VarT<T> bmm(const VarT<T>& a, const VarT<T>& b, bool ta = false, bool tb = false);
// u: (N), v: (M) -> (N, M)
template <typename T> VarT<T> outer(const VarT<T>& u, const VarT<T>& v);
// x: (..., C) scaled per last-dim channel by d: (C)
template <typename T> VarT<T> scale_lastdim(const VarT<T>& x, const VarT<T>& d);

// ---- convolution ----
// x: (B, Cin, H, W), w: (Cout, Cin/groups, kh, kw), b: (Cout) or null
template <typename T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b, int stride = 1, int padding = 0,
               int groups = 1);
// x: (B, Cin, H, W), w: (Cin, Cout/groups, kh, kw); out (B, Cout, (H-1)*s+kh-2p, ...)
template <typename T>
VarT<T> conv_transpose2d(const VarT<T>& x, const VarT<T>& w, int stride = 1, int padding = 0, int groups = 1);
// x: (B, L, C), w: (C, K), b: (C) or null; causal, zero-padded left, same length.
template <typename T>
VarT<T> dwconv1d_causal(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b);
// Nearest-neighbour 2x spatial upsampling of (B, C, H, W).
template <typename T> VarT<T> upsample_nearest2x(const VarT<T>& x);

// ---- normalization ----
// x: (B, C, H, W); per-(sample,group) mean 0 / var 1, then per-channel affine.
template <typename T>
VarT<T> group_norm(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta, int groups, T eps = T(1e-5));
// x: (..., C) normalized over the last axis, then per-channel affine.
template <typename T>
VarT<T> layer_norm(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta, T eps = T(1e-5));

// ---- broadcast add for per-(batch,channel) bias onto (B, C, H, W) ----
template <typename T> VarT<T> add_channel_bias_bchw(const VarT<T>& x, const VarT<T>& v);

// ---- reductions ----
template <typename T> VarT<T> sum_all(const VarT<T>& a);
template <typename T> VarT<T> mean_all(const VarT<T>& a);
// mean((a-b)^2), composed from primitives
template <typename T> VarT<T> mse(const VarT<T>& a, const VarT<T>& b);

// ---- attention ----
// q: (B, h, Lq, d), k/v: (B, h, Lk, d) -> softmax(q k^T / sqrt(d)) v
template <typename T> VarT<T> attention(const VarT<T>& q, const VarT<T>& k, const VarT<T>& v);

// ---- selective scan core ----
// u: (B, L, C), delta: (B, L) positive, Bt/Ct: (B, L, N), A: (C, N) negative.
// h_t = exp(dA) h_{t-1} + phi(dA) B_t u_t,  y_t = <C_t, h_t>  per channel,
// phi = (exp(dA)-1)/A under exact zero-order hold, phi = delta otherwise.
template <typename T>
VarT<T> selective_scan_core(const VarT<T>& u, const VarT<T>& delta, const VarT<T>& Bt, const VarT<T>& Ct,
                            const VarT<T>& A, bool exact_zoh = true);

// ---- wavelet filter reconstruction loss ----
// r[k] = (a0*s0)[k] + (a1*s1)[k] over full correlation lags; loss compares r
// against a delta of height two at the center lag (per-lag), or the summed
// scalar variant when `literal` is set.
template <typename T>
VarT<T> filter_reconstruction_loss(const VarT<T>& a0, const VarT<T>& s0, const VarT<T>& a1, const VarT<T>& s1,
                                   bool literal = false);

}  // namespace ad
}  // namespace proll
