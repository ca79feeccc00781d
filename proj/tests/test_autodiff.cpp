#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "proll/autodiff.hpp"
#include "proll/gradcheck.hpp"
#include "proll/rng.hpp"

using namespace proll;
namespace pad = proll::ad;

namespace {

// Direct 7-loop convolution, the oracle the fast implementation must match.
TensorD conv2d_naive(const TensorD& x, const TensorD& w, const TensorD& b, int stride, int padding,
                     int groups) {
    int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Cout = w.dim(0), K = w.dim(2);
    int cg = Cin / groups, og = Cout / groups;
    int Ho = (H + 2 * padding - K) / stride + 1;
    int Wo = (W + 2 * padding - K) / stride + 1;
    TensorD y({B, Cout, Ho, Wo});
    for (int bb = 0; bb < B; ++bb)
        for (int oc = 0; oc < Cout; ++oc)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = b.empty() ? 0.0 : b[oc];
                    int g = oc / og;
                    for (int ic = 0; ic < cg; ++ic)
                        for (int kh = 0; kh < K; ++kh)
                            for (int kw = 0; kw < K; ++kw) {
                                int ih = oh * stride - padding + kh;
                                int iw = ow * stride - padding + kw;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x[((static_cast<size_t>(bb) * Cin + g * cg + ic) * H + ih) * W + iw] *
                                       w[((static_cast<size_t>(oc) * cg + ic) * K + kh) * K + kw];
                            }
                    y[((static_cast<size_t>(bb) * Cout + oc) * Ho + oh) * Wo + ow] = acc;
                }
    return y;
}

TensorD conv_transpose2d_naive(const TensorD& x, const TensorD& w, int stride, int padding, int groups) {
    int B = x.dim(0), Cin = x.dim(1), Hi = x.dim(2), Wi = x.dim(3);
    int og = w.dim(1), K = w.dim(2);
    int cg = Cin / groups, Cout = og * groups;
    int Ho = (Hi - 1) * stride + K - 2 * padding;
    int Wo = (Wi - 1) * stride + K - 2 * padding;
    TensorD y({B, Cout, Ho, Wo});
    for (int bb = 0; bb < B; ++bb)
        for (int ic = 0; ic < Cin; ++ic)
            for (int ih = 0; ih < Hi; ++ih)
                for (int iw = 0; iw < Wi; ++iw) {
                    double xv = x[((static_cast<size_t>(bb) * Cin + ic) * Hi + ih) * Wi + iw];
                    int g = ic / cg;
                    for (int ocl = 0; ocl < og; ++ocl)
                        for (int kh = 0; kh < K; ++kh)
                            for (int kw = 0; kw < K; ++kw) {
                                int oh = ih * stride + kh - padding;
                                int ow = iw * stride + kw - padding;
                                if (oh < 0 || oh >= Ho || ow < 0 || ow >= Wo) continue;
                                y[((static_cast<size_t>(bb) * Cout + g * og + ocl) * Ho + oh) * Wo + ow] +=
                                    xv * w[((static_cast<size_t>(ic) * og + ocl) * K + kh) * K + kw];
                            }
                }
    return y;
}

TensorD bmm_naive(const TensorD& a, const TensorD& b, bool ta, bool tb) {
    int B = a.dim(0);
    int M = ta ? a.dim(2) : a.dim(1), K = ta ? a.dim(1) : a.dim(2);
    int N = tb ? b.dim(1) : b.dim(2);
    TensorD y({B, M, N});
    for (int bb = 0; bb < B; ++bb)
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j) {
                double acc = 0;
                for (int k = 0; k < K; ++k) {
                    double av = ta ? a[(static_cast<size_t>(bb) * K + k) * M + i]
                                   : a[(static_cast<size_t>(bb) * M + i) * K + k];
                    double bv = tb ? b[(static_cast<size_t>(bb) * N + j) * K + k]
                                   : b[(static_cast<size_t>(bb) * K + k) * N + j];
                    acc += av * bv;
                }
                y[(static_cast<size_t>(bb) * M + i) * N + j] = acc;
            }
    return y;
}

TensorD attention_naive(const TensorD& q, const TensorD& k, const TensorD& v) {
    int B = q.dim(0), H = q.dim(1), Lq = q.dim(2), D = q.dim(3), Lk = k.dim(2);
    TensorD y(q.shape());
    double scale = 1.0 / std::sqrt(static_cast<double>(D));
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < H; ++h)
            for (int i = 0; i < Lq; ++i) {
                std::vector<double> s(Lk);
                double mx = -1e300;
                for (int j = 0; j < Lk; ++j) {
                    double acc = 0;
                    for (int d = 0; d < D; ++d)
                        acc += q[(((static_cast<size_t>(b) * H + h) * Lq + i) * D) + d] *
                               k[(((static_cast<size_t>(b) * H + h) * Lk + j) * D) + d];
                    s[j] = acc * scale;
                    mx = std::max(mx, s[j]);
                }
                double Z = 0;
                for (int j = 0; j < Lk; ++j) Z += std::exp(s[j] - mx);
                for (int d = 0; d < D; ++d) {
                    double acc = 0;
                    for (int j = 0; j < Lk; ++j)
                        acc += std::exp(s[j] - mx) / Z *
                               v[(((static_cast<size_t>(b) * H + h) * Lk + j) * D) + d];
                    y[(((static_cast<size_t>(b) * H + h) * Lq + i) * D) + d] = acc;
                }
            }
    return y;
}

// Literal per-timestep recurrence for the selective scan.
TensorD scan_naive(const TensorD& u, const TensorD& delta, const TensorD& Bt, const TensorD& Ct,
                   const TensorD& A, bool exact_zoh) {
    int B = u.dim(0), L = u.dim(1), C = u.dim(2), N = A.dim(1);
    TensorD y({B, L, C});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            std::vector<double> h(N, 0.0);
            for (int l = 0; l < L; ++l) {
                double d = delta[static_cast<size_t>(b) * L + l];
                double uv = u[(static_cast<size_t>(b) * L + l) * C + c];
                double acc = 0;
                for (int n = 0; n < N; ++n) {
                    double a = A[static_cast<size_t>(c) * N + n];
                    double abar = std::exp(d * a);
                    double phi = exact_zoh ? (std::abs(d * a) < 1e-5
                                                  ? d * (1.0 + d * a / 2.0 + d * a * d * a / 6.0)
                                                  : (abar - 1.0) / a)
                                           : d;
                    h[n] = abar * h[n] + phi * Bt[(static_cast<size_t>(b) * L + l) * N + n] * uv;
                    acc += Ct[(static_cast<size_t>(b) * L + l) * N + n] * h[n];
                }
                y[(static_cast<size_t>(b) * L + l) * C + c] = acc;
            }
        }
    return y;
}

ParamT<double> make_param(const std::string& name, std::vector<int> shape, Rng& rng, double scale = 1.0) {
    ParamT<double> p(name, TensorD(std::move(shape)));
    rng.fill_gaussian(p.value, 0.0, scale);
    return p;
}

}  // namespace

TEST_CASE("conv2d matches the naive convolution") {
    Rng rng(11);
    struct Case {
        int B, Cin, Cout, H, K, stride, pad, groups;
    };
    for (const Case& c : {Case{2, 3, 4, 7, 3, 1, 1, 1}, Case{1, 4, 6, 8, 3, 2, 1, 2},
                          Case{2, 4, 4, 6, 2, 2, 0, 4}, Case{1, 2, 2, 5, 1, 1, 0, 1},
                          Case{1, 3, 5, 9, 5, 1, 2, 1}}) {
        auto x = make_param("x", {c.B, c.Cin, c.H, c.H}, rng);
        auto w = make_param("w", {c.Cout, c.Cin / c.groups, c.K, c.K}, rng);
        auto b = make_param("b", {c.Cout}, rng);
        auto y = pad::conv2d(pad::leaf(x), pad::leaf(w), pad::leaf(b), c.stride, c.pad, c.groups);
        TensorD want = conv2d_naive(x.value, w.value, b.value, c.stride, c.pad, c.groups);
        REQUIRE(y->value.shape() == want.shape());
        CHECK(max_abs_diff(y->value, want) < 1e-12);
    }
}

TEST_CASE("conv2d rejects bad group counts") {
    Rng rng(3);
    auto x = make_param("x", {1, 3, 4, 4}, rng);
    auto w = make_param("w", {4, 1, 3, 3}, rng);
    CHECK_THROWS_AS(pad::conv2d(pad::leaf(x), pad::leaf(w), pad::VarT<double>{}, 1, 1, 2),
                    GroupsDontDivideChannels);
}

TEST_CASE("conv_transpose2d matches the naive scatter") {
    Rng rng(12);
    struct Case {
        int B, Cin, og, H, K, stride, pad, groups;
    };
    for (const Case& c :
         {Case{1, 2, 3, 4, 3, 2, 1, 1}, Case{2, 4, 1, 5, 2, 2, 0, 4}, Case{1, 4, 2, 3, 4, 2, 1, 2}}) {
        auto x = make_param("x", {c.B, c.Cin, c.H, c.H}, rng);
        auto w = make_param("w", {c.Cin, c.og, c.K, c.K}, rng);
        auto y = pad::conv_transpose2d(pad::leaf(x), pad::leaf(w), c.stride, c.pad, c.groups);
        TensorD want = conv_transpose2d_naive(x.value, w.value, c.stride, c.pad, c.groups);
        REQUIRE(y->value.shape() == want.shape());
        CHECK(max_abs_diff(y->value, want) < 1e-12);
    }
}

TEST_CASE("bmm matches naive for every transpose combination") {
    Rng rng(13);
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            auto a = make_param("a", ta ? std::vector<int>{2, 5, 3} : std::vector<int>{2, 3, 5}, rng);
            auto b = make_param("b", tb ? std::vector<int>{2, 4, 5} : std::vector<int>{2, 5, 4}, rng);
            auto y = pad::bmm(pad::leaf(a), pad::leaf(b), ta, tb);
            CHECK(max_abs_diff(y->value, bmm_naive(a.value, b.value, ta, tb)) < 1e-12);
        }
}

TEST_CASE("attention matches the explicit softmax oracle") {
    Rng rng(14);
    auto q = make_param("q", {2, 2, 5, 3}, rng);
    auto k = make_param("k", {2, 2, 7, 3}, rng);
    auto v = make_param("v", {2, 2, 7, 3}, rng);
    auto y = pad::attention(pad::leaf(q), pad::leaf(k), pad::leaf(v));
    CHECK(max_abs_diff(y->value, attention_naive(q.value, k.value, v.value)) < 1e-10);

    // single key/value token: softmax over one entry passes v through
    auto k1 = make_param("k1", {2, 2, 1, 3}, rng);
    auto v1 = make_param("v1", {2, 2, 1, 3}, rng);
    auto y1 = pad::attention(pad::leaf(q), pad::leaf(k1), pad::leaf(v1));
    for (int b = 0; b < 2; ++b)
        for (int h = 0; h < 2; ++h)
            for (int i = 0; i < 5; ++i)
                for (int d = 0; d < 3; ++d)
                    CHECK(y1->value[(((size_t)b * 2 + h) * 5 + i) * 3 + d] ==
                          doctest::Approx(v1.value[((size_t)b * 2 + h) * 3 + d]));
}

TEST_CASE("gradient accumulates across reused nodes") {
    ParamT<double> x("x", TensorD({3}, {1.0, -2.0, 0.5}));
    auto l = pad::leaf(x);
    auto y = pad::sum_all(pad::add(l, l));
    pad::backward(y);
    for (size_t i = 0; i < 3; ++i) CHECK(x.grad[i] == doctest::Approx(2.0));

    x.zero_grad();
    auto g = pad::tanh_of(pad::leaf(x));
    auto z = pad::sum_all(pad::mul(g, g));  // diamond: two paths through g
    pad::backward(z);
    for (size_t i = 0; i < 3; ++i) {
        double t = std::tanh(x.value[i]);
        CHECK(x.grad[i] == doctest::Approx(2.0 * t * (1.0 - t * t)));
    }
}

TEST_CASE("elementwise and reduction gradients") {
    Rng rng(15);
    auto a = make_param("a", {2, 3}, rng);
    auto b = make_param("b", {2, 3}, rng);

    auto f = [&] {
        auto la = pad::leaf(a), lb = pad::leaf(b);
        auto h = pad::add(pad::mul(la, lb), pad::scale(pad::sub(la, lb), 0.5));
        h = pad::add(h, pad::exp_of(pad::neg(la)));
        h = pad::add(h, pad::silu(lb));
        h = pad::add(h, pad::softplus(la));
        h = pad::add(h, pad::tanh_of(lb));
        return pad::mean_all(pad::mul(h, h));
    };
    CHECK(finite_diff_grad_check(f, {&a, &b}) < 1e-6);
}

TEST_CASE("softmax, norms and bias broadcast gradients") {
    Rng rng(16);
    auto x = make_param("x", {2, 4, 3, 3}, rng);
    auto gamma = make_param("gamma", {4}, rng, 0.3);
    auto beta = make_param("beta", {4}, rng, 0.3);
    auto bias = make_param("bias", {2, 4}, rng);

    auto f1 = [&] {
        auto h = pad::group_norm(pad::leaf(x), pad::leaf(gamma), pad::leaf(beta), 2);
        h = pad::add_channel_bias_bchw(h, pad::leaf(bias));
        return pad::sum_all(pad::mul(h, h));
    };
    CHECK(finite_diff_grad_check(f1, {&x, &gamma, &beta, &bias}) < 1e-6);

    auto y = make_param("y", {2, 5, 4}, rng);
    auto g2 = make_param("g2", {4}, rng, 0.3);
    auto b2 = make_param("b2", {4}, rng, 0.3);
    auto f2 = [&] {
        auto h = pad::layer_norm(pad::leaf(y), pad::leaf(g2), pad::leaf(b2));
        h = pad::softmax_lastdim(h);
        return pad::mse(h, pad::constant(TensorD({2, 5, 4})));
    };
    CHECK(finite_diff_grad_check(f2, {&y, &g2, &b2}) < 1e-6);
}

TEST_CASE("shape-op gradients flow through unchanged") {
    Rng rng(17);
    auto x = make_param("x", {2, 3, 4}, rng);
    auto f = [&] {
        auto h = pad::permute(pad::leaf(x), {2, 0, 1});        // (4,2,3)
        h = pad::reshape(h, {4, 6});                           //
        auto parts = pad::concat<double>({h, pad::scale(h, 2.0)}, 0);  // (8,6)
        auto s = pad::slice(parts, 0, 2, 5);                   // (5,6)
        auto r = pad::repeat_outer(s, 3);                      // (15,6)
        return pad::sum_all(pad::mul(r, r));
    };
    CHECK(finite_diff_grad_check(f, {&x}) < 1e-7);
}

TEST_CASE("matmul family gradients") {
    Rng rng(18);
    auto a = make_param("a", {2, 3, 5}, rng);
    auto b = make_param("b", {2, 5, 4}, rng);
    auto w = make_param("w", {6, 4}, rng);
    auto bias = make_param("bias", {6}, rng);
    auto u = make_param("u", {5}, rng);
    auto v = make_param("v", {7}, rng);
    auto d = make_param("d", {4}, rng);

    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            auto f = [&] {
                auto lhs = ta ? pad::permute(pad::leaf(a), {0, 2, 1}) : pad::leaf(a);
                auto rhs = tb ? pad::permute(pad::leaf(b), {0, 2, 1}) : pad::leaf(b);
                return pad::sum_all(pad::bmm(lhs, rhs, ta, tb));
            };
            CHECK(finite_diff_grad_check(f, {&a, &b}) < 1e-7);
        }

    auto f2 = [&] {
        auto h = pad::bmm(pad::leaf(a), pad::leaf(b));       // (2,3,4)
        h = pad::scale_lastdim(h, pad::leaf(d));             //
        h = pad::linear(h, pad::leaf(w), pad::leaf(bias));   // (2,3,6)
        return pad::mean_all(pad::mul(h, h));
    };
    CHECK(finite_diff_grad_check(f2, {&a, &b, &w, &bias, &d}) < 1e-6);

    auto f3 = [&] { return pad::sum_all(pad::outer(pad::leaf(u), pad::leaf(v))); };
    CHECK(finite_diff_grad_check(f3, {&u, &v}) < 1e-8);
}

TEST_CASE("conv, causal conv and upsample gradients") {
    Rng rng(19);
    auto x = make_param("x", {1, 4, 6, 6}, rng);
    auto w = make_param("w", {6, 2, 3, 3}, rng);
    auto b = make_param("b", {6}, rng);
    auto f = [&] {
        auto h = pad::conv2d(pad::leaf(x), pad::leaf(w), pad::leaf(b), 2, 1, 2);
        return pad::sum_all(pad::mul(h, h));
    };
    CHECK(finite_diff_grad_check(f, {&x, &w, &b}) < 1e-6);

    auto wt = make_param("wt", {4, 2, 2, 2}, rng);
    auto ft = [&] {
        auto h = pad::conv_transpose2d(pad::leaf(x), pad::leaf(wt), 2, 0, 2);
        return pad::sum_all(pad::mul(h, h));
    };
    CHECK(finite_diff_grad_check(ft, {&x, &wt}) < 1e-6);

    auto xc = make_param("xc", {2, 5, 3}, rng);  // (B,L,C)
    auto wc = make_param("wc", {3, 4}, rng);
    auto bc = make_param("bc", {3}, rng);
    auto fc = [&] {
        auto h = pad::dwconv1d_causal(pad::leaf(xc), pad::leaf(wc), pad::leaf(bc));
        return pad::sum_all(pad::mul(h, h));
    };
    CHECK(finite_diff_grad_check(fc, {&xc, &wc, &bc}) < 1e-6);

    auto fu = [&] {
        auto h = pad::upsample_nearest2x(pad::leaf(x));
        return pad::sum_all(pad::mul(h, h));
    };
    CHECK(finite_diff_grad_check(fu, {&x}) < 1e-7);
}

TEST_CASE("attention gradients") {
    Rng rng(20);
    auto q = make_param("q", {1, 2, 4, 3}, rng, 0.5);
    auto k = make_param("k", {1, 2, 5, 3}, rng, 0.5);
    auto v = make_param("v", {1, 2, 5, 3}, rng, 0.5);
    auto f = [&] {
        auto h = pad::attention(pad::leaf(q), pad::leaf(k), pad::leaf(v));
        return pad::sum_all(pad::mul(h, h));
    };
    CHECK(finite_diff_grad_check(f, {&q, &k, &v}) < 1e-6);
}

TEST_CASE("selective scan core matches the literal recurrence") {
    Rng rng(21);
    for (bool exact : {true, false}) {
        auto u = make_param("u", {2, 6, 3}, rng);
        auto delta = make_param("delta", {2, 6}, rng);
        for (size_t i = 0; i < delta.value.size(); ++i) delta.value[i] = 0.05 + std::abs(delta.value[i]);
        auto Bt = make_param("Bt", {2, 6, 4}, rng);
        auto Ct = make_param("Ct", {2, 6, 4}, rng);
        auto A = make_param("A", {3, 4}, rng);
        for (size_t i = 0; i < A.value.size(); ++i) A.value[i] = -std::abs(A.value[i]) - 0.1;

        auto y = pad::selective_scan_core(pad::leaf(u), pad::leaf(delta), pad::leaf(Bt), pad::leaf(Ct),
                                          pad::leaf(A), exact);
        CHECK(max_abs_diff(y->value, scan_naive(u.value, delta.value, Bt.value, Ct.value, A.value, exact)) <
              1e-12);
    }
}

TEST_CASE("selective scan rejects nonpositive delta") {
    Rng rng(22);
    auto u = make_param("u", {1, 3, 2}, rng);
    auto delta = make_param("delta", {1, 3}, rng);
    delta.value[1] = 0.0;
    auto Bt = make_param("Bt", {1, 3, 2}, rng);
    auto Ct = make_param("Ct", {1, 3, 2}, rng);
    auto A = make_param("A", {2, 2}, rng);
    CHECK_THROWS_AS(pad::selective_scan_core(pad::leaf(u), pad::leaf(delta), pad::leaf(Bt), pad::leaf(Ct),
                                             pad::leaf(A)),
                    NonpositiveDelta);
}

TEST_CASE("selective scan adjoint passes directional and coordinate checks") {
    Rng rng(23);
    for (bool exact : {true, false}) {
        auto u = make_param("u", {1, 5, 2}, rng, 0.8);
        auto delta_raw = make_param("delta_raw", {1, 5}, rng, 0.5);
        auto Bt = make_param("Bt", {1, 5, 3}, rng, 0.8);
        auto Ct = make_param("Ct", {1, 5, 3}, rng, 0.8);
        auto A_log = make_param("A_log", {2, 3}, rng, 0.4);

        TensorD wts({1, 5, 2});
        rng.fill_gaussian(wts);
        auto build = [&] {
            auto d = pad::softplus(pad::leaf(delta_raw));
            auto Aneg = pad::neg(pad::exp_of(pad::leaf(A_log)));
            auto y = pad::selective_scan_core(pad::leaf(u), d, pad::leaf(Bt), pad::leaf(Ct), Aneg, exact);
            return pad::sum_all(pad::mul(y, pad::constant(wts)));
        };

        // coordinate-level check of every input
        CHECK(finite_diff_grad_check(build, {&u, &delta_raw, &Bt, &Ct, &A_log}) < 1e-6);

        // directional check: <grad, v> equals the forward directional derivative
        std::vector<ParamT<double>*> inputs = {&u, &delta_raw, &Bt, &Ct, &A_log};
        std::vector<TensorD> dirs;
        for (auto* p : inputs) {
            TensorD d(p->value.shape());
            rng.fill_gaussian(d);
            dirs.push_back(d);
        }
        for (auto* p : inputs) p->zero_grad();
        pad::backward(build());
        double vjp = 0;
        for (size_t i = 0; i < inputs.size(); ++i)
            for (size_t j = 0; j < dirs[i].size(); ++j) vjp += inputs[i]->grad[j] * dirs[i][j];

        const double h = 1e-6;
        double fp, fm;
        for (size_t i = 0; i < inputs.size(); ++i)
            for (size_t j = 0; j < dirs[i].size(); ++j) inputs[i]->value[j] += h * dirs[i][j];
        fp = build()->value[0];
        for (size_t i = 0; i < inputs.size(); ++i)
            for (size_t j = 0; j < dirs[i].size(); ++j) inputs[i]->value[j] -= 2 * h * dirs[i][j];
        fm = build()->value[0];
        for (size_t i = 0; i < inputs.size(); ++i)
            for (size_t j = 0; j < dirs[i].size(); ++j) inputs[i]->value[j] += h * dirs[i][j];
        double jvp = (fp - fm) / (2 * h);
        CHECK(vjp == doctest::Approx(jvp).epsilon(1e-6));
    }
}

TEST_CASE("shape mismatches raise instead of corrupting memory") {
    Rng rng(24);
    auto a = make_param("a", {2, 3}, rng);
    auto b = make_param("b", {3, 2}, rng);
    CHECK_THROWS_AS(pad::add(pad::leaf(a), pad::leaf(b)), ShapeMismatch);
    CHECK_THROWS_AS(pad::mul(pad::leaf(a), pad::leaf(b)), ShapeMismatch);
    CHECK_THROWS_AS(pad::concat<double>({pad::leaf(a), pad::leaf(b)}, 0), ShapeMismatch);
    CHECK_THROWS_AS(pad::slice(pad::leaf(a), 0, 1, 5), ShapeMismatch);
}
