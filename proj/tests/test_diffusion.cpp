#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <algorithm>
#include <sstream>
#include <vector>

#include "proll/diffusion.hpp"
#include "proll/errors.hpp"
#include "proll/pianoroll.hpp"
#include "proll/rng.hpp"

using namespace proll;

namespace {

UNetConfig tiny_config() {
    UNetConfig cfg;
    cfg.image_size = 16;
    cfg.base = 6;
    cfg.mults = {1, 2};
    cfg.attn_max_hw = 64;
    cfg.heads = 2;
    cfg.ssm_states = 2;
    cfg.temb_dim = 16;
    return cfg;
}

SegmentDataset tiny_dataset(int n_train, int n_val, int size) {
    SegmentDataset ds;
    ds.pitches = size;
    ds.frames = size;
    Rng rng = rng_stream(81, "diff.data", 0);
    for (int i = 0; i < n_train + n_val; ++i) {
        SegmentRecord rec;
        rec.roll = Tensor({2, size, size});
        for (size_t j = 0; j < rec.roll.size(); ++j) rec.roll[j] = rng.below(6) == 0 ? 1.0f : 0.0f;
        rec.chords = ChordSequence(kBeatsPerSegment);
        ChordLabel l;
        l.root = i % 12;
        l.bass = i % 12;
        l.chroma = static_cast<uint16_t>(0x91 << (i % 4));
        for (auto& b : rec.chords) b = encode_chord(l);
        rec.split = i < n_train ? Split::Train : Split::Val;
        ds.records.push_back(std::move(rec));
    }
    return ds;
}

}  // namespace

TEST_CASE("schedule: endpoints and cumulative products against a long-double oracle") {
    auto ns = make_schedule();
    REQUIRE(ns.steps == 1000);
    CHECK(ns.beta[0] == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(ns.beta[999] == doctest::Approx(0.02).epsilon(1e-12));
    CHECK(ns.alpha_bar[0] == doctest::Approx(0.9999).epsilon(1e-10));
    CHECK(ns.alpha_bar[999] == doctest::Approx(4.04e-5).epsilon(0.1));

    long double ab = 1.0L;
    for (int t = 1; t <= 1000; ++t) {
        long double beta = 1e-4L + (0.02L - 1e-4L) * (t - 1) / 999.0L;
        ab *= 1.0L - beta;
        CHECK(ns.beta[t - 1] == doctest::Approx(static_cast<double>(beta)).epsilon(1e-9));
        CHECK(ns.alpha[t - 1] == doctest::Approx(static_cast<double>(1.0L - beta)).epsilon(1e-12));
        CHECK(ns.alpha_bar[t - 1] == doctest::Approx(static_cast<double>(ab)).epsilon(1e-9));
    }

    CHECK_THROWS_AS(make_schedule(0), BadRange);
    CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), BadRange);
    CHECK_THROWS_AS(make_schedule(10, 0.02, 1e-4), BadRange);
    CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), BadRange);
}

TEST_CASE("forward noising: closed form and sampled moments") {
    auto ns = make_schedule();
    TensorT<double> x0({4});
    x0[0] = 1.0;
    x0[1] = -1.0;
    x0[2] = 0.5;
    x0[3] = 0.0;
    TensorT<double> zero({4});
    for (int t : {1, 500, 1000}) {
        auto xt = q_sample(x0, t, zero, ns);
        double s = std::sqrt(ns.alpha_bar[t - 1]);
        for (int i = 0; i < 4; ++i) CHECK(xt[i] == doctest::Approx(s * x0[i]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(q_sample(x0, 0, zero, ns), StepOutOfRange);
    CHECK_THROWS_AS(q_sample(x0, 1001, zero, ns), StepOutOfRange);

    // moments: mean -> sqrt(abar)*x0, var -> 1-abar
    const int n = 100000;
    TensorT<double> ones({n}), eps({n});
    ones.fill(1.0);
    Rng rng = rng_stream(82, "diff.mc", 0);
    rng.fill_gaussian(eps);
    for (int t : {1, 500, 1000}) {
        auto xt = q_sample(ones, t, eps, ns);
        double mean = 0;
        for (int i = 0; i < n; ++i) mean += xt[i];
        mean /= n;
        double var = 0;
        for (int i = 0; i < n; ++i) var += (xt[i] - mean) * (xt[i] - mean);
        var /= n - 1;
        CHECK(mean == doctest::Approx(std::sqrt(ns.alpha_bar[t - 1])).epsilon(0.01));
        CHECK(var == doctest::Approx(1.0 - ns.alpha_bar[t - 1]).epsilon(0.02));
    }
}

TEST_CASE("ancestral step: posterior mean algebra and variance") {
    auto ns = make_schedule();
    Rng rng = rng_stream(83, "diff.step", 0);
    const int n = 200000;
    TensorT<double> xt({n}), eh({n});
    rng.fill_gaussian(xt);
    rng.fill_gaussian(eh);

    // t=1 is deterministic: exactly the posterior mean
    auto x0 = ddpm_step(xt, 1, eh, ns, rng);
    double b = ns.beta[0], a = ns.alpha[0], ab = ns.alpha_bar[0];
    for (int i = 0; i < 1000; ++i) {
        double mu = (xt[i] - b / std::sqrt(1.0 - ab) * eh[i]) / std::sqrt(a);
        CHECK(x0[i] == doctest::Approx(mu).epsilon(1e-5));
    }

    // t>1 adds noise with the posterior variance
    int t = 600;
    auto prev = ddpm_step(xt, t, eh, ns, rng);
    b = ns.beta[t - 1];
    a = ns.alpha[t - 1];
    ab = ns.alpha_bar[t - 1];
    double ab_prev = ns.alpha_bar[t - 2];
    double want_var = (1.0 - ab_prev) / (1.0 - ab) * b;
    double mean_resid = 0, var = 0;
    std::vector<double> resid(n);
    for (int i = 0; i < n; ++i) {
        double mu = (xt[i] - b / std::sqrt(1.0 - ab) * eh[i]) / std::sqrt(a);
        resid[i] = prev[i] - mu;
        mean_resid += resid[i];
    }
    mean_resid /= n;
    for (int i = 0; i < n; ++i) var += (resid[i] - mean_resid) * (resid[i] - mean_resid);
    var /= n - 1;
    CHECK(std::abs(mean_resid) < 0.01);
    CHECK(var == doctest::Approx(want_var).epsilon(0.02));

    CHECK_THROWS_AS(ddpm_step(xt, 0, eh, ns, rng), StepOutOfRange);
}

TEST_CASE("guidance arithmetic and the omega-zero fast path") {
    TensorT<float> ec({3}), eu({3});
    ec[0] = 1.0f;
    eu[0] = 0.0f;
    ec[1] = -0.5f;
    eu[1] = 0.25f;
    ec[2] = 2.0f;
    eu[2] = 2.0f;
    auto g = combine_guidance(ec, eu, 5.0);
    CHECK(g[0] == 6.0f);  // (1+5)*1 - 5*0
    CHECK(g[1] == doctest::Approx(-0.5f * 6.0f - 5.0f * 0.25f).epsilon(1e-6));
    CHECK(g[2] == 2.0f);

    auto same = combine_guidance(ec, eu, 0.0);
    CHECK(max_abs_diff(same, ec) == 0.0f);

    // through the model: w=0 equals one conditional forward, bit for bit
    ModelT<float> model(tiny_config(), 7);
    Rng rng = rng_stream(84, "diff.guide", 0);
    Tensor x({1, 2, 16, 16});
    rng.fill_gaussian(x);
    auto ds = tiny_dataset(1, 0, 16);
    auto chords = chords_to_tensor({ds.records[0].chords});
    auto direct = model.eps(x, 400, &chords);
    auto guided0 = guided_eps(model, x, 400, chords, 0.0);
    CHECK(max_abs_diff(direct, guided0) == 0.0f);

    auto guided5 = guided_eps(model, x, 400, chords, 5.0);
    CHECK(guided5.shape() == direct.shape());
    CHECK(guided5.all_finite());
}

TEST_CASE("training loss: fresh model predicts zero so the loss is E[eps^2]") {
    ModelT<float> model(tiny_config(), 3);
    auto ns = make_schedule();
    TrainConfig cfg;
    cfg.batch = 4;
    cfg.lambda_wavelet = 0.0;
    auto ds = tiny_dataset(4, 0, 16);
    Tensor x0({4, 2, 16, 16});
    std::vector<ChordSequence> seqs;
    for (int i = 0; i < 4; ++i) {
        std::copy(ds.records[i].roll.data(), ds.records[i].roll.data() + ds.records[i].roll.size(),
                  x0.data() + static_cast<size_t>(i) * 2 * 16 * 16);
        seqs.push_back(ds.records[i].chords);
    }
    for (size_t i = 0; i < x0.size(); ++i) x0[i] = 2.0f * x0[i] - 1.0f;
    auto chords = chords_to_tensor(seqs);

    Rng rng = rng_stream(85, "diff.loss", 0);
    auto parts = training_loss(model, x0, chords, ns, cfg, rng);
    CHECK(parts.diffusion == doctest::Approx(1.0).epsilon(0.06));
    CHECK(parts.wavelet == 0.0);
    CHECK(parts.total->value[0] == doctest::Approx(parts.diffusion).epsilon(1e-6));

    TensorT<float> empty({0, 2, 16, 16});
    CHECK_THROWS_AS(training_loss(model, empty, chords, ns, cfg, rng), EmptyBatch);
}

TEST_CASE("wavelet term detaches at lambda zero") {
    ModelT<float> model(tiny_config(), 5);
    auto ns = make_schedule();
    auto ds = tiny_dataset(2, 0, 16);
    Tensor x0({2, 2, 16, 16});
    for (int i = 0; i < 2; ++i)
        std::copy(ds.records[i].roll.data(), ds.records[i].roll.data() + ds.records[i].roll.size(),
                  x0.data() + static_cast<size_t>(i) * 2 * 16 * 16);
    auto chords = chords_to_tensor({ds.records[0].chords, ds.records[1].chords});

    // knock a filter off its Haar minimum so the regularizer has gradient
    ParamT<float>* a0 = nullptr;
    for (auto* p : model.params.all())
        if (p->name.find("wtb0") != std::string::npos && p->name.find(".a0") != std::string::npos) a0 = p;
    REQUIRE(a0 != nullptr);
    a0->value[0] += 0.4f;

    TrainConfig cfg;
    cfg.batch = 2;
    for (double lambda : {0.0, 1.0}) {
        cfg.lambda_wavelet = lambda;
        for (auto* p : model.params.all()) p->grad.fill(0.0f);
        Rng rng = rng_stream(86, "diff.lambda", 0);
        auto parts = training_loss(model, x0, chords, ns, cfg, rng);
        ad::backward(parts.total);
        float g = 0;
        for (size_t i = 0; i < a0->grad.size(); ++i) g = std::max(g, std::abs(a0->grad[i]));
        if (lambda == 0.0) {
            CHECK(parts.wavelet == 0.0);
            CHECK(g == 0.0f);
        } else {
            CHECK(parts.wavelet > 1e-3);
            CHECK(g > 1e-4f);
        }
    }
}

TEST_CASE("sampling produces a binary roll of the right shape") {
    ModelT<float> model(tiny_config(), 11);
    auto ns = make_schedule(20, 1e-4, 0.02);  // short chain keeps this fast
    auto ds = tiny_dataset(1, 0, 16);
    Rng rng = rng_stream(87, "sample", 0);
    auto roll = sample(model, ds.records[0].chords, 5.0, ns, rng);
    CHECK(roll.shape() == std::vector<int>{2, 16, 16});
    for (size_t i = 0; i < roll.size(); ++i) CHECK((roll[i] == 0.0f || roll[i] == 1.0f));

    Rng rng2 = rng_stream(87, "sample", 0);
    auto again = sample(model, ds.records[0].chords, 5.0, ns, rng2);
    CHECK(max_abs_diff(roll, again) == 0.0f);
}

TEST_CASE("training loop: logging, checkpoint cadence, determinism") {
    auto ds = tiny_dataset(3, 1, 16);
    auto ns = make_schedule();
    TrainConfig cfg;
    cfg.batch = 2;
    cfg.max_steps = 4;
    cfg.checkpoint_every = 2;
    cfg.lr = 1e-3;
    cfg.seed = 13;

    auto run = [&](std::string& csv_out, std::vector<int>& ckpts) {
        ModelT<float> model(tiny_config(), cfg.seed);
        AdamT<float> opt(model.params.all(), static_cast<float>(cfg.lr));
        std::ostringstream csv;
        auto log = train_loop(ds, model, opt, cfg, ns, &csv, [&](int s) { ckpts.push_back(s); });
        csv_out = csv.str();
        REQUIRE(log.size() == 4);
        CHECK(log[0].step == 1);
        CHECK(log[3].step == 4);
        std::vector<float> flat;
        for (auto* p : model.params.all())
            for (size_t i = 0; i < p->value.size(); ++i) flat.push_back(p->value[i]);
        return flat;
    };

    std::string csv_a, csv_b;
    std::vector<int> ck_a, ck_b;
    auto pa = run(csv_a, ck_a);
    auto pb = run(csv_b, ck_b);
    CHECK(pa == pb);
    CHECK(csv_a == csv_b);
    CHECK(ck_a == std::vector<int>{2, 4});
    // one "step,diffusion,wavelet,lr" row per step; the CLI adds the header
    int rows = 0;
    std::istringstream lines(csv_a);
    std::string line;
    while (std::getline(lines, line)) {
        ++rows;
        CHECK(std::count(line.begin(), line.end(), ',') == 3);
    }
    CHECK(rows == 4);
    CHECK(csv_a.substr(0, 2) == "1,");

    SegmentDataset no_train;
    no_train.pitches = no_train.frames = 16;
    ModelT<float> model(tiny_config(), 1);
    AdamT<float> opt(model.params.all(), static_cast<float>(cfg.lr));
    CHECK_THROWS_AS(train_loop(no_train, model, opt, cfg, ns, nullptr), EmptyDataset);
}
