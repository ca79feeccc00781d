#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "proll/autodiff.hpp"
#include "proll/rng.hpp"

namespace proll {

// Owns parameters and hands out stable pointers; registration order is the
// canonical order for optimizer state and checkpoints.
template <typename T>
class ParamStoreT {
  public:
    ParamT<T>& add(const std::string& name, std::vector<int> shape) {
        if (by_name_.count(name)) throw std::runtime_error("duplicate parameter: " + name);
        auto p = std::make_unique<ParamT<T>>();
        p->name = name;
        p->value = TensorT<T>(std::move(shape));
        p->grad = TensorT<T>(p->value.shape());
        ParamT<T>* raw = p.get();
        owned_.push_back(std::move(p));
        order_.push_back(raw);
        by_name_[name] = raw;
        return *raw;
    }

    ParamT<T>* find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    const std::vector<ParamT<T>*>& all() const { return order_; }

    size_t numel() const {
        size_t n = 0;
        for (auto* p : order_) n += p->value.size();
        return n;
    }

    void zero_grads() {
        for (auto* p : order_) p->zero_grad();
    }

  private:
    std::vector<std::unique_ptr<ParamT<T>>> owned_;
    std::vector<ParamT<T>*> order_;
    std::unordered_map<std::string, ParamT<T>*> by_name_;
};

using ParamStore = ParamStoreT<float>;

enum class Init { HeNormal, GlorotUniform, Zero };

template <typename T>
void init_he_normal(ParamT<T>& p, int fan_in, Rng& rng) {
    T std = std::sqrt(T(2) / static_cast<T>(fan_in));
    for (size_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(rng.gaussian()) * std;
}

template <typename T>
void init_glorot_uniform(ParamT<T>& p, int fan_in, int fan_out, Rng& rng) {
    T lim = std::sqrt(T(6) / static_cast<T>(fan_in + fan_out));
    for (size_t i = 0; i < p.value.size(); ++i) p.value[i] = static_cast<T>(rng.uniform(-lim, lim));
}

template <typename T>
void init_fill(ParamT<T>& p, T v) {
    p.value.fill(v);
}

// ---- layers -----------------------------------------------------------

template <typename T>
struct LinearT {
    ParamT<T>* w = nullptr;
    ParamT<T>* b = nullptr;

    LinearT() = default;
    LinearT(ParamStoreT<T>& ps, const std::string& prefix, int in, int out, Init init, Rng& rng,
            bool bias = true) {
        w = &ps.add(prefix + ".weight", {out, in});
        switch (init) {
            case Init::HeNormal: init_he_normal(*w, in, rng); break;
            case Init::GlorotUniform: init_glorot_uniform(*w, in, out, rng); break;
            case Init::Zero: break;
        }
        if (bias) b = &ps.add(prefix + ".bias", {out});
    }

    ad::VarT<T> operator()(const ad::VarT<T>& x) const {
        return ad::linear(x, ad::leaf(*w), b ? ad::leaf(*b) : ad::VarT<T>{});
    }
};

template <typename T>
struct Conv2dT {
    ParamT<T>* w = nullptr;
    ParamT<T>* b = nullptr;
    int stride = 1, padding = 0, groups = 1;

    Conv2dT() = default;
    Conv2dT(ParamStoreT<T>& ps, const std::string& prefix, int cin, int cout, int k, Init init, Rng& rng,
            int stride_ = 1, int padding_ = 0, int groups_ = 1, bool bias = true)
        : stride(stride_), padding(padding_), groups(groups_) {
        w = &ps.add(prefix + ".weight", {cout, cin / groups_, k, k});
        int fan_in = (cin / groups_) * k * k;
        switch (init) {
            case Init::HeNormal: init_he_normal(*w, fan_in, rng); break;
            case Init::GlorotUniform: init_glorot_uniform(*w, fan_in, cout * k * k / groups_, rng); break;
            case Init::Zero: break;
        }
        if (bias) b = &ps.add(prefix + ".bias", {cout});
    }

    ad::VarT<T> operator()(const ad::VarT<T>& x) const {
        return ad::conv2d(x, ad::leaf(*w), b ? ad::leaf(*b) : ad::VarT<T>{}, stride, padding, groups);
    }
};

template <typename T>
struct GroupNormT {
    ParamT<T>* gamma = nullptr;
    ParamT<T>* beta = nullptr;
    int groups = 8;

    GroupNormT() = default;
    GroupNormT(ParamStoreT<T>& ps, const std::string& prefix, int channels, int groups_ = 8)
        : groups(groups_) {
        gamma = &ps.add(prefix + ".gamma", {channels});
        beta = &ps.add(prefix + ".beta", {channels});
        gamma->value.fill(T(1));
    }

    ad::VarT<T> operator()(const ad::VarT<T>& x) const {
        return ad::group_norm(x, ad::leaf(*gamma), ad::leaf(*beta), groups);
    }
};

template <typename T>
struct LayerNormT {
    ParamT<T>* gamma = nullptr;
    ParamT<T>* beta = nullptr;

    LayerNormT() = default;
    LayerNormT(ParamStoreT<T>& ps, const std::string& prefix, int channels) {
        gamma = &ps.add(prefix + ".gamma", {channels});
        beta = &ps.add(prefix + ".beta", {channels});
        gamma->value.fill(T(1));
    }

    ad::VarT<T> operator()(const ad::VarT<T>& x) const {
        return ad::layer_norm(x, ad::leaf(*gamma), ad::leaf(*beta));
    }
};

template <typename T>
struct DWConv1dT {
    ParamT<T>* w = nullptr;
    ParamT<T>* b = nullptr;

    DWConv1dT() = default;
    DWConv1dT(ParamStoreT<T>& ps, const std::string& prefix, int channels, int width, Rng& rng) {
        w = &ps.add(prefix + ".weight", {channels, width});
        init_he_normal(*w, width, rng);
        b = &ps.add(prefix + ".bias", {channels});
    }

    ad::VarT<T> operator()(const ad::VarT<T>& x) const {
        return ad::dwconv1d_causal(x, ad::leaf(*w), ad::leaf(*b));
    }
};

// ---- optimizer ---------------------------------------------------------

template <typename T>
class AdamT {
  public:
    AdamT(std::vector<ParamT<T>*> params, T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8));

    // Bias-corrected update from accumulated grads; zeroes grads afterwards.
    void step();
    void zero_grad();

    long step_count() const { return step_count_; }
    const std::vector<ParamT<T>*>& params() const { return params_; }
    // Moment access for checkpointing, aligned with params() order.
    std::vector<TensorT<T>>& m() { return m_; }
    std::vector<TensorT<T>>& v() { return v_; }
    void set_step_count(long s) { step_count_ = s; }

  private:
    std::vector<ParamT<T>*> params_;
    std::vector<TensorT<T>> m_, v_;
    T lr_, beta1_, beta2_, eps_;
    long step_count_ = 0;
};

using Adam = AdamT<float>;

}  // namespace proll
