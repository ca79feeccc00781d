#pragma once

#include <functional>
#include <vector>

#include "proll/autodiff.hpp"

namespace proll {

// Central-difference check of reverse-mode gradients for a scalar function of
// the given parameters. `f` must rebuild its graph from the parameters'
// current values on every call (take leaves inside). Returns the maximum over
// checked coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// `coords_per_input` < 0 checks every coordinate; otherwise that many are
// sampled per parameter (deterministically from `seed`).
double finite_diff_grad_check(const std::function<ad::VarT<double>()>& f,
                              const std::vector<ParamT<double>*>& inputs, double h = 1e-4,
                              int coords_per_input = -1, uint64_t seed = 7);

}  // namespace proll
