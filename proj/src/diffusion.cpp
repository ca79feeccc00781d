#include "proll/diffusion.hpp"

#include <cmath>
#include <cstdio>

#include "proll/errors.hpp"

namespace proll {

NoiseSchedule make_schedule(int steps, double beta1, double betaT) {
    if (steps < 2 || !(beta1 > 0.0) || !(beta1 < betaT) || !(betaT < 1.0))
        throw BadRange("schedule needs 0 < beta1 < betaT < 1 and steps >= 2");
    NoiseSchedule ns;
    ns.steps = steps;
    ns.beta.resize(steps);
    ns.alpha.resize(steps);
    ns.alpha_bar.resize(steps);
    double prod = 1.0;
    for (int t = 0; t < steps; ++t) {
        ns.beta[t] = beta1 + t * (betaT - beta1) / (steps - 1);
        ns.alpha[t] = 1.0 - ns.beta[t];
        prod *= ns.alpha[t];
        ns.alpha_bar[t] = prod;
    }
    return ns;
}

namespace {

void check_step(int t, const NoiseSchedule& ns) {
    if (t < 1 || t > ns.steps)
        throw StepOutOfRange("t=" + std::to_string(t) + " outside [1, " + std::to_string(ns.steps) + "]");
}

}  // namespace

template <typename T>
ModelT<T>::ModelT(const UNetConfig& cfg, uint64_t init_seed) {
    Rng rng = rng_stream(init_seed, "model.init", 0);
    unet = UNetT<T>(params, cfg, rng);
    chord_enc = ChordEncoderT<T>(params, "cond", rng);
}

TensorT<float> chords_to_tensor(const std::vector<ChordSequence>& seqs) {
    int B = static_cast<int>(seqs.size());
    TensorT<float> out({B, kBeatsPerSegment, kChordDim});
    for (int b = 0; b < B; ++b) {
        if (static_cast<int>(seqs[b].size()) != kBeatsPerSegment)
            throw LengthMismatch("chord sequence must cover 32 beats");
        for (int i = 0; i < kBeatsPerSegment; ++i)
            for (int j = 0; j < kChordDim; ++j)
                out[(static_cast<size_t>(b) * kBeatsPerSegment + i) * kChordDim + j] =
                    static_cast<float>(seqs[b][i][j]);
    }
    return out;
}

template <typename T>
ad::VarT<T> ModelT<T>::encode_chords(const TensorT<T>& chords) const {
    return chord_enc(ad::constant(chords));
}

template <typename T>
TensorT<T> ModelT<T>::eps(const TensorT<T>& x_t, int t, const TensorT<T>* chords) const {
    int B = x_t.shape()[0];
    auto cond = chords ? encode_chords(*chords) : unet.null_latent(B);
    auto out = unet(ad::constant(x_t), std::vector<int>(B, t - 1), cond);
    return out->value;
}

template <typename T>
TensorT<T> q_sample(const TensorT<T>& x0, int t, const TensorT<T>& eps, const NoiseSchedule& ns) {
    check_step(t, ns);
    if (x0.shape() != eps.shape()) throw ShapeMismatch("q_sample noise shape");
    double ab = ns.alpha_bar[t - 1];
    T c0 = static_cast<T>(std::sqrt(ab)), c1 = static_cast<T>(std::sqrt(1.0 - ab));
    TensorT<T> out(x0.shape());
    for (size_t i = 0; i < x0.size(); ++i) out[i] = c0 * x0[i] + c1 * eps[i];
    return out;
}

template <typename T>
LossParts<T> training_loss(const ModelT<T>& model, const TensorT<T>& x0, const TensorT<T>& chords,
                           const NoiseSchedule& ns, const TrainConfig& cfg, Rng& rng) {
    const auto& s = x0.shape();
    if (s.empty() || s[0] == 0) throw EmptyBatch("training_loss");
    int B = s[0];
    if (chords.shape() != std::vector<int>{B, kBeatsPerSegment, kChordDim})
        throw ShapeMismatch("chord batch");

    size_t item = x0.size() / B;
    TensorT<T> x_t(s), eps(s);
    std::vector<int> t0(B);  // 0-based model time
    for (int b = 0; b < B; ++b) {
        int t = 1 + static_cast<int>(rng.below(ns.steps));
        t0[b] = t - 1;
        double ab = ns.alpha_bar[t - 1];
        T c0 = static_cast<T>(std::sqrt(ab)), c1 = static_cast<T>(std::sqrt(1.0 - ab));
        for (size_t i = b * item; i < (b + 1) * item; ++i) {
            eps[i] = static_cast<T>(rng.gaussian());
            x_t[i] = c0 * x0[i] + c1 * eps[i];
        }
    }

    int D = model.unet.cfg.cond_dim;
    TensorT<T> keep({B, D}), drop({B, D});
    for (int b = 0; b < B; ++b) {
        bool k = rng.uniform() >= cfg.cond_dropout;
        for (int j = 0; j < D; ++j) {
            keep[static_cast<size_t>(b) * D + j] = k ? T(1) : T(0);
            drop[static_cast<size_t>(b) * D + j] = k ? T(0) : T(1);
        }
    }
    auto lat = model.encode_chords(chords);
    auto nul = model.unet.null_latent(B);
    auto cond = ad::add(ad::mul(lat, ad::constant(keep)), ad::mul(nul, ad::constant(drop)));

    auto eps_hat = model.unet(ad::constant(x_t), t0, cond);
    auto diff = ad::mse(eps_hat, ad::constant(eps));

    LossParts<T> parts;
    parts.diffusion = static_cast<double>(diff->value[0]);
    if (cfg.lambda_wavelet > 0.0) {
        auto wav = model.unet.wavelet_regularizer();
        parts.wavelet = static_cast<double>(wav->value[0]);
        parts.total = ad::add(diff, ad::scale(wav, static_cast<T>(cfg.lambda_wavelet)));
    } else {
        parts.wavelet = 0.0;
        parts.total = diff;
    }
    return parts;
}

template <typename T>
TensorT<T> ddpm_step(const TensorT<T>& x_t, int t, const TensorT<T>& eps_hat, const NoiseSchedule& ns,
                     Rng& rng) {
    check_step(t, ns);
    if (x_t.shape() != eps_hat.shape()) throw ShapeMismatch("ddpm_step eps shape");
    double beta = ns.beta[t - 1];
    double ab = ns.alpha_bar[t - 1];
    double ab_prev = (t == 1) ? 1.0 : ns.alpha_bar[t - 2];
    double inv_sqrt_a = 1.0 / std::sqrt(ns.alpha[t - 1]);
    double eps_coef = beta / std::sqrt(1.0 - ab);
    double var = (1.0 - ab_prev) / (1.0 - ab) * beta;  // zero at t=1
    double sigma = std::sqrt(var);

    TensorT<T> out(x_t.shape());
    for (size_t i = 0; i < x_t.size(); ++i) {
        double mu = inv_sqrt_a * (x_t[i] - eps_coef * eps_hat[i]);
        double z = (t == 1) ? 0.0 : rng.gaussian();
        out[i] = static_cast<T>(mu + sigma * z);
    }
    return out;
}

template <typename T>
TensorT<T> combine_guidance(const TensorT<T>& eps_cond, const TensorT<T>& eps_uncond, double omega) {
    if (eps_cond.shape() != eps_uncond.shape()) throw ShapeMismatch("guidance operand shapes");
    TensorT<T> out(eps_cond.shape());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>((1.0 + omega) * eps_cond[i] - omega * eps_uncond[i]);
    return out;
}

template <typename T>
TensorT<T> guided_eps(const ModelT<T>& model, const TensorT<T>& x_t, int t, const TensorT<T>& chords,
                      double omega) {
    auto eps_c = model.eps(x_t, t, &chords);
    if (omega == 0.0) return eps_c;
    return combine_guidance(eps_c, model.eps(x_t, t, nullptr), omega);
}

template <typename T>
TensorT<T> sample(const ModelT<T>& model, const std::vector<ChordSequence>& chords, double omega,
                  const NoiseSchedule& ns, Rng& rng) {
    if (chords.empty()) throw ShapeMismatch("sample needs at least one chord sequence");
    const auto& cfg = model.unet.cfg;
    int B = static_cast<int>(chords.size());
    TensorT<T> x({B, cfg.in_channels, cfg.image_size, cfg.image_size});
    rng.fill_gaussian(x);
    TensorT<float> cseq = chords_to_tensor(chords);
    TensorT<T> ct(cseq.shape());
    for (size_t i = 0; i < cseq.size(); ++i) ct[i] = static_cast<T>(cseq[i]);

    for (int t = ns.steps; t >= 1; --t) {
        auto eh = guided_eps(model, x, t, ct, omega);
        x = ddpm_step(x, t, eh, ns, rng);
    }

    for (size_t i = 0; i < x.size(); ++i) x[i] = x[i] > T(0) ? T(1) : T(0);
    return x;
}

template <typename T>
TensorT<T> sample(const ModelT<T>& model, const ChordSequence& chords, double omega,
                  const NoiseSchedule& ns, Rng& rng) {
    TensorT<T> batch = sample(model, std::vector<ChordSequence>{chords}, omega, ns, rng);
    const auto& cfg = model.unet.cfg;
    TensorT<T> roll({cfg.in_channels, cfg.image_size, cfg.image_size});
    for (size_t i = 0; i < roll.size(); ++i) roll[i] = batch[i];
    return roll;
}

template <typename T>
std::vector<TrainLogEntry> train_loop(const SegmentDataset& data, ModelT<T>& model, AdamT<T>& opt,
                                      const TrainConfig& cfg, const NoiseSchedule& ns, std::ostream* csv,
                                      const std::function<void(int)>& on_checkpoint, int start_step) {
    auto train_idx = data.indices(Split::Train);
    if (train_idx.empty()) throw EmptyDataset("no training segments");
    int P = data.pitches, F = data.frames;

    std::vector<TrainLogEntry> log;
    log.reserve(std::max(0, cfg.max_steps - start_step));
    for (int step = start_step + 1; step <= cfg.max_steps; ++step) {
        Rng rng = rng_stream(cfg.seed, "train.step", static_cast<uint64_t>(step));

        int B = cfg.batch;
        TensorT<T> x0({B, 2, P, F});
        std::vector<ChordSequence> seqs(B);
        for (int b = 0; b < B; ++b) {
            const auto& rec = data.records[train_idx[rng.below(train_idx.size())]];
            for (size_t i = 0; i < rec.roll.size(); ++i)
                x0[b * rec.roll.size() + i] = static_cast<T>(2.0f * rec.roll[i] - 1.0f);
            seqs[b] = rec.chords;
        }
        TensorT<float> cf = chords_to_tensor(seqs);
        TensorT<T> chords(cf.shape());
        for (size_t i = 0; i < cf.size(); ++i) chords[i] = static_cast<T>(cf[i]);

        auto parts = training_loss(model, x0, chords, ns, cfg, rng);
        ad::backward(parts.total);
        opt.step();

        log.push_back({step, parts.diffusion, parts.wavelet});
        if (csv) {
            char line[128];
            std::snprintf(line, sizeof line, "%d,%.8g,%.8g,%.8g\n", step, parts.diffusion, parts.wavelet,
                          cfg.lr);
            (*csv) << line;
        }
        if (on_checkpoint && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
            on_checkpoint(step);
    }
    return log;
}

#define PROLL_INSTANTIATE_DIFFUSION(T)                                                                      \
    template struct ModelT<T>;                                                                              \
    template TensorT<T> q_sample<T>(const TensorT<T>&, int, const TensorT<T>&, const NoiseSchedule&);       \
    template LossParts<T> training_loss<T>(const ModelT<T>&, const TensorT<T>&, const TensorT<T>&,          \
                                           const NoiseSchedule&, const TrainConfig&, Rng&);                 \
    template TensorT<T> ddpm_step<T>(const TensorT<T>&, int, const TensorT<T>&, const NoiseSchedule&,       \
                                     Rng&);                                                                 \
    template TensorT<T> combine_guidance<T>(const TensorT<T>&, const TensorT<T>&, double);                  \
    template TensorT<T> guided_eps<T>(const ModelT<T>&, const TensorT<T>&, int, const TensorT<T>&, double); \
    template TensorT<T> sample<T>(const ModelT<T>&, const std::vector<ChordSequence>&, double,              \
                                  const NoiseSchedule&, Rng&);                                              \
    template TensorT<T> sample<T>(const ModelT<T>&, const ChordSequence&, double, const NoiseSchedule&,     \
                                  Rng&);                                                                    \
    template std::vector<TrainLogEntry> train_loop<T>(const SegmentDataset&, ModelT<T>&, AdamT<T>&,         \
                                                      const TrainConfig&, const NoiseSchedule&,             \
                                                      std::ostream*, const std::function<void(int)>&, int);

PROLL_INSTANTIATE_DIFFUSION(float)
PROLL_INSTANTIATE_DIFFUSION(double)

}  // namespace proll
