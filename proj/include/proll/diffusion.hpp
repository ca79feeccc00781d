#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "proll/chord_encoder.hpp"
#include "proll/dataset.hpp"
#include "proll/unet.hpp"

namespace proll {

struct NoiseSchedule {
    int steps = 1000;
    std::vector<double> beta, alpha, alpha_bar;  // 0-indexed storage for 1-based t
};

// Linear beta schedule; BadRange unless 0 < beta1 < betaT < 1.
NoiseSchedule make_schedule(int steps = 1000, double beta1 = 1e-4, double betaT = 0.02);

struct TrainConfig {
    double lr = 5e-5;
    int batch = 16;
    double cond_dropout = 0.2;
    double guidance = 5.0;
    double lambda_wavelet = 1.0;
    uint64_t seed = 1;
    int max_steps = 1000;
    int checkpoint_every = 500;
};

// Denoiser plus chord conditioner sharing one parameter store.
template <typename T>
struct ModelT {
    ParamStoreT<T> params;
    UNetT<T> unet;
    ChordEncoderT<T> chord_enc;

    ModelT(const UNetConfig& cfg, uint64_t init_seed);

    ad::VarT<T> encode_chords(const TensorT<T>& chords) const;  // (B,32,36) -> (B,512)

    // epsilon prediction for sampling; t is the 1-based schedule step.
    TensorT<T> eps(const TensorT<T>& x_t, int t, const TensorT<T>* chords) const;
};

using Model = ModelT<float>;

TensorT<float> chords_to_tensor(const std::vector<ChordSequence>& seqs);  // (B,32,36)

// x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps, t in [1,steps].
template <typename T>
TensorT<T> q_sample(const TensorT<T>& x0, int t, const TensorT<T>& eps, const NoiseSchedule& ns);

template <typename T>
struct LossParts {
    ad::VarT<T> total;
    double diffusion = 0.0;
    double wavelet = 0.0;
};

// Samples one t and noise per item, drops conditioning with probability p,
// returns mean squared epsilon error plus the weighted wavelet regularizer.
template <typename T>
LossParts<T> training_loss(const ModelT<T>& model, const TensorT<T>& x0, const TensorT<T>& chords,
                           const NoiseSchedule& ns, const TrainConfig& cfg, Rng& rng);

// One ancestral step; deterministic at t=1.
template <typename T>
TensorT<T> ddpm_step(const TensorT<T>& x_t, int t, const TensorT<T>& eps_hat, const NoiseSchedule& ns,
                     Rng& rng);

// (1+w) * eps_cond - w * eps_uncond, elementwise.
template <typename T>
TensorT<T> combine_guidance(const TensorT<T>& eps_cond, const TensorT<T>& eps_uncond, double omega);

// Applies combine_guidance to the two forward passes; w=0 runs and returns
// only the conditional pass.
template <typename T>
TensorT<T> guided_eps(const ModelT<T>& model, const TensorT<T>& x_t, int t, const TensorT<T>& chords,
                      double omega);

// Full reverse process from pure noise; returns binary (B,2,H,W) rolls, one
// per chord sequence, denoised jointly as a batch.
template <typename T>
TensorT<T> sample(const ModelT<T>& model, const std::vector<ChordSequence>& chords, double omega,
                  const NoiseSchedule& ns, Rng& rng);

// Single-sequence convenience wrapper; returns a binary (2,H,W) roll.
template <typename T>
TensorT<T> sample(const ModelT<T>& model, const ChordSequence& chords, double omega,
                  const NoiseSchedule& ns, Rng& rng);

struct TrainLogEntry {
    int step = 0;
    double loss_diffusion = 0.0;
    double loss_wavelet = 0.0;
};

// Runs Adam over the train split with per-step RNG streams derived from the
// seed, covering steps (start_step, max_steps]. Writes
// "step,loss_diffusion,loss_wavelet,lr" lines to csv when given and invokes
// on_checkpoint every cfg.checkpoint_every steps.
template <typename T>
std::vector<TrainLogEntry> train_loop(const SegmentDataset& data, ModelT<T>& model, AdamT<T>& opt,
                                      const TrainConfig& cfg, const NoiseSchedule& ns, std::ostream* csv,
                                      const std::function<void(int)>& on_checkpoint = {},
                                      int start_step = 0);

}  // namespace proll
