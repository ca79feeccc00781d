#include "proll/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "proll/errors.hpp"
#include "proll/rng.hpp"

namespace proll {

namespace {

double eval_scalar(const std::function<ad::VarT<double>()>& f) {
    auto root = f();
    if (root->value.size() != 1) throw ShapeMismatch("grad check target must be scalar");
    double v = root->value[0];
    if (!std::isfinite(v)) throw NonFiniteOutput("grad check function value");
    return v;
}

}  // namespace

double finite_diff_grad_check(const std::function<ad::VarT<double>()>& f,
                              const std::vector<ParamT<double>*>& inputs, double h,
                              int coords_per_input, uint64_t seed) {
    for (auto* p : inputs) p->zero_grad();
    auto root = f();
    if (root->value.size() != 1) throw ShapeMismatch("grad check target must be scalar");
    if (!std::isfinite(root->value[0])) throw NonFiniteOutput("grad check function value");
    ad::backward(root);
    std::vector<TensorT<double>> analytic;
    analytic.reserve(inputs.size());
    for (auto* p : inputs) analytic.push_back(p->grad);

    double worst = 0;
    Rng pick(seed);
    for (size_t pi = 0; pi < inputs.size(); ++pi) {
        ParamT<double>& p = *inputs[pi];
        size_t n = p.value.size();
        std::vector<size_t> coords;
        if (coords_per_input < 0 || static_cast<size_t>(coords_per_input) >= n) {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (int i = 0; i < coords_per_input; ++i) coords.push_back(pick.below(n));
        }
        for (size_t c : coords) {
            double saved = p.value[c];
            p.value[c] = saved + h;
            double fp = eval_scalar(f);
            p.value[c] = saved - h;
            double fm = eval_scalar(f);
            p.value[c] = saved;
            double numeric = (fp - fm) / (2 * h);
            double a = analytic[pi][c];
            double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    for (auto* p : inputs) p->zero_grad();
    return worst;
}

}  // namespace proll
