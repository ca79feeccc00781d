#include "proll/nn.hpp"

#include <cmath>

namespace proll {

template <typename T>
AdamT<T>::AdamT(std::vector<ParamT<T>*> params, T lr, T beta1, T beta2, T eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

template <typename T>
void AdamT<T>::step() {
    ++step_count_;
    T bc1 = T(1) - std::pow(beta1_, static_cast<T>(step_count_));
    T bc2 = T(1) - std::pow(beta2_, static_cast<T>(step_count_));
    for (size_t i = 0; i < params_.size(); ++i) {
        ParamT<T>& p = *params_[i];
        TensorT<T>& m = m_[i];
        TensorT<T>& v = v_[i];
        size_t n = p.value.size();
        for (size_t j = 0; j < n; ++j) {
            T g = p.grad[j];
            m[j] = beta1_ * m[j] + (T(1) - beta1_) * g;
            v[j] = beta2_ * v[j] + (T(1) - beta2_) * g * g;
            T mhat = m[j] / bc1;
            T vhat = v[j] / bc2;
            p.value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
        p.zero_grad();
    }
}

template <typename T>
void AdamT<T>::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

template class AdamT<float>;
template class AdamT<double>;

}  // namespace proll
