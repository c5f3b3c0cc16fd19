// SPDX-License-Identifier: Apache-2.0
#ifndef CDFORMER_TESTS_GRAD_CHECK_HPP
#define CDFORMER_TESTS_GRAD_CHECK_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cdformer/autodiff.hpp"
#include "cdformer/nn.hpp"

namespace cdformer::testing {

/// Central finite difference vs analytic gradient for one parameter entry.
/// make_loss must rebuild the graph from current parameter values.
template <typename T, typename F>
double grad_check_entry(F&& make_loss, const ag::Var<T>& param, int64_t idx, T h) {
    ag::zero_grad(param);
    auto loss = make_loss();
    ag::backward(loss);
    const double analytic = param->grad.size() ? static_cast<double>(param->grad[idx]) : 0.0;

    const T saved = param->value[idx];
    param->value[idx] = saved + h;
    const double lp = static_cast<double>(make_loss()->value[0]);
    param->value[idx] = saved - h;
    const double lm = static_cast<double>(make_loss()->value[0]);
    param->value[idx] = saved;
    const double numeric = (lp - lm) / (2.0 * static_cast<double>(h));

    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

/// Worst relative error over `probes` randomly chosen entries of a parameter
/// list.
template <typename T, typename F>
double grad_check_params(F&& make_loss, const nn::ParamList<T>& params, int probes, Rng& rng, T h) {
    double worst = 0.0;
    std::vector<int64_t> sizes;
    int64_t total = 0;
    for (const auto& [name, p] : params) {
        sizes.push_back(p->value.size());
        total += p->value.size();
    }
    for (int i = 0; i < probes; ++i) {
        int64_t flat = static_cast<int64_t>(rng.uniform() * static_cast<double>(total));
        flat = std::min(flat, total - 1);
        size_t pi = 0;
        while (flat >= sizes[pi]) {
            flat -= sizes[pi];
            ++pi;
        }
        for (const auto& [name, p] : params) ag::zero_grad(p);
        worst = std::max(worst, grad_check_entry(make_loss, params[pi].second, flat, h));
    }
    return worst;
}

template <typename T>
Tensor<T> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(shape));
    rng.fill_uniform(t, lo, hi);
    return t;
}

} // namespace cdformer::testing

#endif
