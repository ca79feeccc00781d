#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "proll/autodiff.hpp"
#include "proll/errors.hpp"
#include "proll/gradcheck.hpp"
#include "proll/nn.hpp"
#include "proll/rng.hpp"
#include "proll/ssm.hpp"

using namespace proll;
namespace pad = proll::ad;

namespace {

// Literal per-step recurrence through the full selective-scan module math:
// project delta/B/C from the input, discretize per step, accumulate h, add D*x.
template <typename T>
TensorT<T> module_scan_naive(const TensorT<T>& x, const SSMParamsT<T>& p) {
    int B = x.dim(0), L = x.dim(1), C = x.dim(2), N = p.state_dim;
    const T* wd = p.wdelta.w->value.data();
    const T* wb = p.wb.w->value.data();
    const T* wc = p.wc.w->value.data();
    TensorT<T> y({B, L, C});
    for (int bb = 0; bb < B; ++bb) {
        std::vector<T> h(static_cast<size_t>(C) * N, T(0));
        for (int t = 0; t < L; ++t) {
            const T* xr = x.data() + (static_cast<size_t>(bb) * L + t) * C;
            T draw = p.wdelta.b->value[0];
            for (int c = 0; c < C; ++c) draw += wd[c] * xr[c];
            T delta = std::log1p(std::exp(draw));
            std::vector<T> bt(N), ct(N);
            for (int n = 0; n < N; ++n) {
                bt[n] = p.wb.b->value[n];
                ct[n] = p.wc.b->value[n];
                for (int c = 0; c < C; ++c) {
                    bt[n] += wb[static_cast<size_t>(n) * C + c] * xr[c];
                    ct[n] += wc[static_cast<size_t>(n) * C + c] * xr[c];
                }
            }
            for (int c = 0; c < C; ++c) {
                T acc = 0;
                for (int n = 0; n < N; ++n) {
                    T a = -std::exp(p.A_log->value[static_cast<size_t>(c) * N + n]);
                    auto [abar, bbar] = discretize_scalar<T>(a, bt[n], delta, p.exact_zoh);
                    size_t hi = static_cast<size_t>(c) * N + n;
                    h[hi] = abar * h[hi] + bbar * xr[c];
                    acc += ct[n] * h[hi];
                }
                y[(static_cast<size_t>(bb) * L + t) * C + c] = acc + p.D->value[c] * xr[c];
            }
        }
    }
    return y;
}

template <typename T>
T max_abs(const TensorT<T>& t) {
    T m = 0;
    for (size_t i = 0; i < t.size(); ++i) m = std::max(m, std::abs(t[i]));
    return m;
}

}  // namespace

TEST_CASE("discretization: exact zero-order-hold hand values") {
    // A=-1, delta=ln 2: abar = 1/2 and bbar = (1/2)*b for any b
    auto [abar, bbar] = discretize_scalar<double>(-1.0, 3.0, std::log(2.0), true);
    CHECK(abar == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(bbar == doctest::Approx(1.5).epsilon(1e-12));

    auto [a2, b2] = discretize_scalar<double>(-2.0, 1.0, 1.0, true);
    CHECK(a2 == doctest::Approx(std::exp(-2.0)).epsilon(1e-12));
    CHECK(a2 == doctest::Approx(0.1353).epsilon(1e-3));
    CHECK(b2 == doctest::Approx((1.0 - std::exp(-2.0)) / 2.0).epsilon(1e-12));
    CHECK(b2 == doctest::Approx(0.4323).epsilon(1e-3));
}

TEST_CASE("discretization: tiny delta lands on the series branch") {
    auto [abar, bbar] = discretize_scalar<double>(-1.0, 7.0, 1e-12, true);
    CHECK(std::abs(abar - 1.0) < 1e-11);
    CHECK(bbar == doctest::Approx(7e-12).epsilon(1e-6));

    // series and closed form agree where they hand off
    for (double delta : {0.9e-5, 1.1e-5}) {
        auto [as, bs] = discretize_scalar<double>(-1.0, 1.0, delta, true);
        double exact = std::expm1(-delta) / -1.0;
        CHECK(as == doctest::Approx(std::exp(-delta)).epsilon(1e-14));
        CHECK(bs == doctest::Approx(exact).epsilon(1e-12));
    }
}

TEST_CASE("discretization: simplified rule and delta validation") {
    auto [abar, bbar] = discretize_scalar<double>(-1.5, 4.0, 0.25, false);
    CHECK(abar == doctest::Approx(std::exp(-0.375)).epsilon(1e-12));
    CHECK(bbar == 1.0);  // delta * b exactly

    CHECK_THROWS_AS(discretize_scalar<double>(-1.0, 1.0, 0.0, true), NonpositiveDelta);
    CHECK_THROWS_AS(discretize_scalar<double>(-1.0, 1.0, -0.5, true), NonpositiveDelta);
    CHECK_THROWS_AS(discretize_scalar<float>(-1.0f, 1.0f, -1e-3f, false), NonpositiveDelta);
}

TEST_CASE("kernel form: hand expansion and impulse response") {
    // single state: K = (c*bbar, c*abar*bbar, c*abar^2*bbar, ...)
    std::vector<double> abar{0.5}, bbar{2.0}, c{3.0};

    TensorD x2({1, 2, 1});
    x2[0] = 1.25;
    x2[1] = -0.5;
    auto y2 = ssm_kernel_conv(x2, abar, bbar, c);
    CHECK(y2[0] == doctest::Approx(6.0 * 1.25).epsilon(1e-12));
    CHECK(y2[1] == doctest::Approx(3.0 * 1.25 + 6.0 * -0.5).epsilon(1e-12));

    int L = 8;
    TensorD imp({1, L, 1});
    imp[0] = 1.0;
    auto y = ssm_kernel_conv(imp, abar, bbar, c);
    for (int t = 0; t < L; ++t)
        CHECK(y[t] == doctest::Approx(3.0 * std::pow(0.5, t) * 2.0).epsilon(1e-12));

    TensorD bad({1, 4, 2});
    CHECK_THROWS_AS(ssm_kernel_conv(bad, abar, bbar, c), ShapeMismatch);
}

TEST_CASE("time-invariant parameters: scan and kernel convolution agree") {
    Rng rng = rng_stream(11, "ssm.kernel", 0);
    float worst = 0;
    for (int rep = 0; rep < 50; ++rep) {
        int N = 1 + static_cast<int>(rng.below(8));
        int L = 1 + static_cast<int>(rng.below(64));
        int B = 1 + static_cast<int>(rng.below(2));
        float delta = 0.05f + 0.5f * static_cast<float>(rng.uniform());
        std::vector<float> a(N), b(N), c(N), abar(N), bbar(N);
        for (int n = 0; n < N; ++n) {
            a[n] = -0.1f - 2.0f * static_cast<float>(rng.uniform());
            b[n] = static_cast<float>(rng.gaussian());
            c[n] = static_cast<float>(rng.gaussian());
            std::tie(abar[n], bbar[n]) = discretize_scalar<float>(a[n], b[n], delta, true);
        }
        Tensor x({B, L, 1});
        rng.fill_gaussian(x);
        auto yk = ssm_kernel_conv(x, abar, bbar, c);

        Tensor dt({B, L}), bt({B, L, N}), ct({B, L, N}), at({1, N});
        dt.fill(delta);
        for (int i = 0; i < B * L; ++i)
            for (int n = 0; n < N; ++n) {
                bt[static_cast<size_t>(i) * N + n] = b[n];
                ct[static_cast<size_t>(i) * N + n] = c[n];
            }
        for (int n = 0; n < N; ++n) at[n] = a[n];
        auto ys = pad::selective_scan_core(pad::constant(x), pad::constant(dt), pad::constant(bt),
                                           pad::constant(ct), pad::constant(at), true);
        for (size_t i = 0; i < yk.size(); ++i)
            worst = std::max(worst, std::abs(yk[i] - ys->value[i]));
    }
    CHECK(worst < 1e-5f);
}

TEST_CASE("selective scan module matches the literal recurrence") {
    ParamStoreT<double> ps;
    Rng rng = rng_stream(3, "ssm.module", 0);
    SSMParamsT<double> p(ps, "s", 4, 8, rng);
    // break the uniform defaults so the oracle exercises real values
    rng.fill_gaussian(p.A_log->value);
    rng.fill_gaussian(p.D->value);
    rng.fill_gaussian(p.wb.b->value);
    rng.fill_gaussian(p.wc.b->value);

    TensorT<double> x({2, 16, 4});
    rng.fill_gaussian(x);
    auto y = selective_scan(pad::constant(x), p);
    auto ref = module_scan_naive(x, p);
    CHECK(y->value.shape() == std::vector<int>{2, 16, 4});
    CHECK(max_abs_diff(y->value, ref) < 1e-6);

    p.exact_zoh = false;
    auto y2 = selective_scan(pad::constant(x), p);
    auto ref2 = module_scan_naive(x, p);
    CHECK(max_abs_diff(y2->value, ref2) < 1e-6);
    CHECK(max_abs_diff(y->value, y2->value) > 1e-4);  // the rules genuinely differ
}

TEST_CASE("forgetting: very negative A reduces the scan to a gated passthrough") {
    ParamStoreT<double> ps;
    Rng rng = rng_stream(4, "ssm.memless", 0);
    SSMParamsT<double> p(ps, "s", 3, 4, rng);
    p.A_log->value.fill(20.0);  // abar = exp(-delta*e^20) ~ 0, phi ~ 1/e^20 ~ 0

    TensorT<double> x({1, 12, 3});
    rng.fill_gaussian(x);
    auto y = selective_scan(pad::constant(x), p);
    TensorT<double> dx({1, 12, 3});
    for (int t = 0; t < 12; ++t)
        for (int c = 0; c < 3; ++c)
            dx[static_cast<size_t>(t) * 3 + c] = p.D->value[c] * x[static_cast<size_t>(t) * 3 + c];
    CHECK(max_abs_diff(y->value, dx) < 1e-6);
}

TEST_CASE("causality: perturbing the future leaves the past untouched") {
    ParamStoreT<float> ps;
    Rng rng = rng_stream(5, "ssm.causal", 0);
    SSMParamsT<float> p(ps, "s", 4, 8, rng);

    Tensor x({1, 16, 4});
    rng.fill_gaussian(x);
    auto y0 = selective_scan(pad::constant(x), p);
    Tensor xp = x;
    for (int c = 0; c < 4; ++c) xp[static_cast<size_t>(8) * 4 + c] += 3.0f;
    auto y1 = selective_scan(pad::constant(xp), p);

    float before = 0, after = 0;
    for (int t = 0; t < 16; ++t)
        for (int c = 0; c < 4; ++c) {
            float d = std::abs(y0->value[static_cast<size_t>(t) * 4 + c] -
                               y1->value[static_cast<size_t>(t) * 4 + c]);
            (t < 8 ? before : after) = std::max(t < 8 ? before : after, d);
        }
    CHECK(before == 0.0f);
    CHECK(after > 1e-3f);
}

TEST_CASE("stability: long sequences stay bounded") {
    ParamStoreT<float> ps;
    Rng rng = rng_stream(6, "ssm.stable", 0);
    SSMParamsT<float> p(ps, "s", 2, 8, rng);

    Tensor x({1, 4096, 2});
    rng.fill_gaussian(x);
    auto y = selective_scan(pad::constant(x), p);
    CHECK(y->value.all_finite());
    CHECK(max_abs(y->value) < 1e4f);
}

TEST_CASE("mamba block: initialization contract") {
    ParamStoreT<float> ps;
    Rng rng = rng_stream(7, "ssm.block", 0);
    MambaBlockT<float> blk(ps, "m", 8, rng);

    auto* alog = ps.find("m.ssm.A_log");
    REQUIRE(alog != nullptr);
    CHECK(alog->value.shape() == std::vector<int>{16, 8});
    for (int n = 0; n < 8; ++n)
        CHECK(alog->value[n] == doctest::Approx(std::log(n + 1.0)).epsilon(1e-6));
    auto* d = ps.find("m.ssm.D");
    REQUIRE(d != nullptr);
    for (size_t i = 0; i < d->value.size(); ++i) CHECK(d->value[i] == 1.0f);
    auto* db = ps.find("m.ssm.wdelta.bias");
    REQUIRE(db != nullptr);
    CHECK(db->value[0] == -3.0f);
    auto* out = ps.find("m.out.weight");
    REQUIRE(out != nullptr);
    for (size_t i = 0; i < out->value.size(); ++i) CHECK(out->value[i] == 0.0f);
}

TEST_CASE("mamba block: shape preservation and zero fixed point") {
    ParamStoreT<float> ps;
    Rng rng = rng_stream(8, "ssm.block", 1);
    MambaBlockT<float> blk(ps, "m", 16, rng);

    Tensor x({2, 64, 16});
    rng.fill_gaussian(x);
    auto y = blk(pad::constant(x));
    CHECK(y->value.shape() == std::vector<int>{2, 64, 16});
    CHECK(y->value.all_finite());

    Tensor z({2, 64, 16});
    auto yz = blk(pad::constant(z));
    CHECK(max_abs(yz->value) == 0.0f);
}

TEST_CASE("mamba block: gradients match finite differences") {
    ParamStoreT<double> ps;
    Rng rng = rng_stream(9, "ssm.grad", 0);
    MambaBlockT<double> blk(ps, "m", 4, rng, 4, 2, 4);
    // zero-init output projection hides the upstream path; give it signal
    auto* out = ps.find("m.out.weight");
    rng.fill_gaussian(out->value);

    ParamT<double> x("x", TensorT<double>({1, 8, 4}));
    rng.fill_gaussian(x.value);
    ParamT<double> w("w", TensorT<double>({1, 8, 4}));
    rng.fill_gaussian(w.value);

    std::vector<ParamT<double>*> inputs{&x, &w};
    for (auto& pr : ps.all()) inputs.push_back(pr);
    auto f = [&]() { return pad::sum_all(pad::mul(blk(pad::leaf(x)), pad::leaf(w))); };
    CHECK(finite_diff_grad_check(f, inputs, 1e-5, 4) < 1e-4);
}
