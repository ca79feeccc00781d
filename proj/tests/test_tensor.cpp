#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "proll/rng.hpp"
#include "proll/tensor.hpp"

using namespace proll;

TEST_CASE("tensor shape and element accounting") {
    Tensor t({2, 3, 4});
    CHECK(t.size() == 24);
    CHECK(t.rank() == 3);
    CHECK(t[0] == 0.0f);
    t.fill(2.5f);
    CHECK(t[23] == 2.5f);

    CHECK_THROWS_AS(Tensor({2, 3}, {1.0f, 2.0f}), ShapeMismatch);
    CHECK_THROWS_AS(t.reshaped({5, 5}), ShapeMismatch);
    CHECK(t.reshaped({4, 6}).dim(1) == 6);
}

TEST_CASE("max_abs_diff and all_finite") {
    Tensor a({3}, {1.0f, 2.0f, 3.0f});
    Tensor b({3}, {1.0f, 2.5f, 3.0f});
    CHECK(max_abs_diff(a, b) == doctest::Approx(0.5));
    CHECK(a.all_finite());
    b[1] = std::numeric_limits<float>::infinity();
    CHECK(!b.all_finite());
}

TEST_CASE("rng streams are deterministic and independent") {
    Rng a = rng_stream(42, "noise", 7);
    Rng b = rng_stream(42, "noise", 7);
    for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());

    // a different stream name must not reproduce the same draws
    Rng c = rng_stream(42, "noise", 7);
    Rng d = rng_stream(42, "dropout", 7);
    int same = 0;
    for (int i = 0; i < 64; ++i) same += (c.next_u64() == d.next_u64());
    CHECK(same == 0);
}

TEST_CASE("gaussian draws have sane moments") {
    Rng r(9);
    double sum = 0, sumsq = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double g = r.gaussian();
        sum += g;
        sumsq += g * g;
    }
    double mean = sum / n, var = sumsq / n - mean * mean;
    CHECK(std::abs(mean) < 0.01);
    CHECK(std::abs(var - 1.0) < 0.02);
}
