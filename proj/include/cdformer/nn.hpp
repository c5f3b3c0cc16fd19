// SPDX-License-Identifier: Apache-2.0
#ifndef CDFORMER_NN_HPP
#define CDFORMER_NN_HPP

#include <string>
#include <utility>
#include <vector>

#include "cdformer/autodiff.hpp"
#include "cdformer/rng.hpp"

namespace cdformer {
namespace nn {

template <typename T>
using ParamList = std::vector<std::pair<std::string, ag::Var<T>>>;

template <typename T>
int64_t count_params(const ParamList<T>& params) {
    int64_t n = 0;
    for (const auto& [name, p] : params) n += p->value.size();
    return n;
}

template <typename T>
void set_requires_grad(ParamList<T>& params, bool flag) {
    for (auto& [name, p] : params) p->requires_grad = flag;
}

template <typename T>
void zero_grads(ParamList<T>& params) {
    for (auto& [name, p] : params) ag::zero_grad(p);
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight init.
template <typename T>
ag::Var<T> init_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
    Tensor<T> t(std::move(shape));
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    rng.fill_uniform(t, -bound, bound);
    return ag::parameter(std::move(t));
}

template <typename T>
ag::Var<T> init_zeros(std::vector<int> shape) {
    return ag::parameter(Tensor<T>(std::move(shape)));
}

template <typename T>
struct Linear {
    ag::Var<T> w, b;

    Linear() = default;
    Linear(int in, int out, bool bias, Rng& rng) {
        w = init_uniform<T>({in, out}, in, rng);
        if (bias) b = init_zeros<T>({out});
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::linear(x, w, b); }

    void collect(ParamList<T>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        if (b) out.emplace_back(prefix + ".b", b);
    }
};

template <typename T>
struct Conv2d {
    ag::Var<T> w, b;
    int pad = 0;

    Conv2d() = default;
    Conv2d(int in, int out, int k, Rng& rng, bool bias = true) : pad(k / 2) {
        w = init_uniform<T>({k, k, in, out}, k * k * in, rng);
        if (bias) b = init_zeros<T>({out});
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::conv2d(x, w, b, pad); }

    void collect(ParamList<T>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        if (b) out.emplace_back(prefix + ".b", b);
    }
};

template <typename T>
struct DwConv2d {
    ag::Var<T> w, b;
    int pad = 0;

    DwConv2d() = default;
    DwConv2d(int channels, int k, Rng& rng) : pad(k / 2) {
        w = init_uniform<T>({k, k, channels}, k * k, rng);
        b = init_zeros<T>({channels});
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const { return ag::dwconv2d(x, w, b, pad); }

    void collect(ParamList<T>& out, const std::string& prefix) const {
        out.emplace_back(prefix + ".w", w);
        out.emplace_back(prefix + ".b", b);
    }
};

/// conv -> lrelu -> conv with identity skip; the encoder trunk unit.
template <typename T>
struct ResBlock {
    Conv2d<T> conv1, conv2;

    ResBlock() = default;
    ResBlock(int channels, Rng& rng) : conv1(channels, channels, 3, rng), conv2(channels, channels, 3, rng) {}

    ag::Var<T> operator()(const ag::Var<T>& x) const {
        auto h = ag::leaky_relu(conv1(x), T(0.1));
        return ag::add(conv2(h), x);
    }

    void collect(ParamList<T>& out, const std::string& prefix) const {
        conv1.collect(out, prefix + ".conv1");
        conv2.collect(out, prefix + ".conv2");
    }
};

} // namespace nn
} // namespace cdformer

#endif
