// SPDX-License-Identifier: Apache-2.0
//
// The tiny diffusion estimator that recreates the prior vector from noise,
// conditioned on the LR-derived vector. Training differentiates through the
// complete T-step reverse chain, not a single-step noise regression.
#ifndef CDFORMER_DIFFUSION_HPP
#define CDFORMER_DIFFUSION_HPP

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "cdformer/config.hpp"
#include "cdformer/nn.hpp"

namespace cdformer {

/// Per-step noise schedule. Index convention: step t runs 1..T;
/// alpha_bar_at(0) == 1 (empty product).
template <typename T>
struct DiffusionSchedule {
    int steps = 0;
    // sigma_sq is stored as 1 - alpha (not sigma*sigma), which keeps the
    // identity sigma^2 + alpha == 1 exact in floating point.
    std::vector<T> alpha, alpha_bar, sigma_sq, sigma; // size == steps, index t-1

    static DiffusionSchedule linear_beta(int steps, double beta_min, double beta_max) {
        if (steps < 1) throw ConfigError("schedule: steps must be >= 1");
        if (!(beta_min > 0 && beta_min < 1 && beta_max > 0 && beta_max < 1 && beta_max >= beta_min))
            throw ConfigError("schedule: betas must satisfy 0 < beta_min <= beta_max < 1");
        std::vector<T> alphas;
        for (int t = 1; t <= steps; ++t) {
            const double frac = steps == 1 ? 1.0 : static_cast<double>(t - 1) / (steps - 1);
            alphas.push_back(static_cast<T>(1.0 - (beta_min + (beta_max - beta_min) * frac)));
        }
        return from_alphas(alphas);
    }

    static DiffusionSchedule from_alphas(const std::vector<T>& alphas) {
        DiffusionSchedule s;
        s.steps = static_cast<int>(alphas.size());
        T bar = T(1);
        for (T a : alphas) {
            bar *= a;
            const T ssq = T(1) - a;
            s.alpha.push_back(a);
            s.alpha_bar.push_back(bar);
            s.sigma_sq.push_back(ssq);
            s.sigma.push_back(std::sqrt(ssq));
        }
        s.check();
        return s;
    }

    static DiffusionSchedule from_config(const ModelConfig& cfg) {
        return linear_beta(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max);
    }

    T alpha_at(int t) const { return alpha[static_cast<size_t>(t - 1)]; }
    T alpha_bar_at(int t) const { return t == 0 ? T(1) : alpha_bar[static_cast<size_t>(t - 1)]; }
    T sigma_at(int t) const { return sigma[static_cast<size_t>(t - 1)]; }
    T sigma_sq_at(int t) const { return sigma_sq[static_cast<size_t>(t - 1)]; }

    void check() const {
        for (int t = 1; t <= steps; ++t) {
            if (!(alpha_at(t) > T(0) && alpha_at(t) < T(1)))
                throw NumericError("schedule: alpha out of (0,1) at step " + std::to_string(t));
            if (sigma_sq_at(t) + alpha_at(t) != T(1))
                throw NumericError("schedule: sigma^2 + alpha != 1 at step " + std::to_string(t));
            if (t > 1 && !(alpha_bar_at(t) < alpha_bar_at(t - 1)))
                throw NumericError("schedule: alpha_bar not strictly decreasing at step " + std::to_string(t));
        }
    }
};

/// z_T = sqrt(abar_T) z0 + sqrt(1 - abar_T) eps
template <typename T>
ag::Var<T> forward_diffuse(const ag::Var<T>& z0, const DiffusionSchedule<T>& sched, const Tensor<T>& eps) {
    if (eps.size() != z0->value.size())
        throw ConfigError("forward_diffuse: eps length mismatch");
    const T abar = sched.alpha_bar_at(sched.steps);
    return ag::axpby(std::sqrt(abar), z0, std::sqrt(T(1) - abar), ag::constant(eps));
}

template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, const DiffusionSchedule<T>& sched, const Tensor<T>& eps) {
    return forward_diffuse(ag::constant(z0), sched, eps)->value;
}

/// Iterates z_{t-1} = (z_t - (1-a_t)/sqrt(1-abar_t) * eps_theta(z_t, t)) / sqrt(a_t)
///                    + sigma_t * noise        for t = T..1,
/// with the stochastic term suppressed at t = 1 so the terminal step is
/// deterministic. eps_fn(z_t, t) supplies the noise prediction (the denoiser
/// module, or an oracle in tests); pass noise_rng = nullptr to suppress all
/// stochastic terms. Throws NumericError naming the step if a state goes
/// non-finite.
template <typename T, typename EpsFn>
ag::Var<T> reverse_chain(ag::Var<T> z_t, const DiffusionSchedule<T>& sched, EpsFn&& eps_fn, Rng* noise_rng) {
    for (int t = sched.steps; t >= 1; --t) {
        const T a = sched.alpha_at(t);
        const T abar = sched.alpha_bar_at(t);
        const T c1 = T(1) / std::sqrt(a);
        const T c2 = (T(1) - a) / std::sqrt(T(1) - abar);
        ag::Var<T> eps_hat = eps_fn(z_t, t);
        if (eps_hat->value.size() != z_t->value.size())
            throw ConfigError("reverse_chain: denoiser output length mismatch");
        z_t = ag::axpby(c1, z_t, -c1 * c2, eps_hat);
        if (t > 1 && noise_rng) {
            Tensor<T> noise(z_t->value.shape());
            noise_rng->fill_normal(noise);
            z_t = ag::axpby(T(1), z_t, sched.sigma_at(t), ag::constant(noise));
        }
        if (!ag::all_finite(z_t->value))
            throw NumericError("reverse_chain: non-finite state at step " + std::to_string(t));
    }
    return z_t;
}

/// L1 distance between teacher prior and the recreated one, mean-reduced.
template <typename T>
ag::Var<T> diffusion_loss(const ag::Var<T>& z0, const ag::Var<T>& z0_hat) {
    if (z0->value.size() != z0_hat->value.size())
        throw ConfigError("diffusion_loss: length mismatch");
    return ag::mean_abs_diff(z0, z0_hat);
}

/// Sinusoidal embedding of an integer step index.
template <typename T>
Tensor<T> time_embedding(int t, int dim) {
    if (dim % 2) throw ConfigError("time_embedding: dim must be even");
    Tensor<T> e({dim});
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * k / half);
        e[k] = static_cast<T>(std::sin(t * freq));
        e[half + k] = static_cast<T>(std::cos(t * freq));
    }
    return e;
}

/// Residual MLP noise predictor. Input: concat(z_t, c, time embedding);
/// the condition vector is re-concatenated at the input of every block.
template <typename T>
struct Denoiser {
    struct Block {
        nn::Linear<T> l1, l2;
        void collect(nn::ParamList<T>& out, const std::string& prefix) const {
            l1.collect(out, prefix + ".l1");
            l2.collect(out, prefix + ".l2");
        }
    };

    int time_dim = 64;
    nn::Linear<T> in_proj;
    std::vector<Block> blocks;
    nn::Linear<T> out_proj;

    Denoiser() = default;
    Denoiser(const ModelConfig& cfg, Rng& rng) : time_dim(cfg.time_embed_dim) {
        const int h = cfg.denoiser_hidden;
        in_proj = nn::Linear<T>(cfg.cz + cfg.cz + cfg.time_embed_dim, h, true, rng);
        blocks.resize(static_cast<size_t>(cfg.denoiser_blocks));
        for (auto& b : blocks) {
            b.l1 = nn::Linear<T>(h + cfg.cz, h, true, rng);
            b.l2 = nn::Linear<T>(h, h, true, rng);
        }
        out_proj = nn::Linear<T>(h, cfg.cz, true, rng);
    }

    ag::Var<T> operator()(const ag::Var<T>& z_t, int t, const ag::Var<T>& c) const {
        auto temb = ag::constant(time_embedding<T>(t, time_dim));
        auto h = ag::gelu(in_proj(ag::concat_last(ag::concat_last(z_t, c), temb)));
        for (const auto& b : blocks)
            h = ag::add(b.l2(ag::gelu(b.l1(ag::concat_last(h, c)))), h);
        return out_proj(h);
    }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        in_proj.collect(out, prefix + ".in");
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(out, prefix + ".block" + std::to_string(i));
        out_proj.collect(out, prefix + ".out");
    }
};

/// Inference-path prior sampling: z_T ~ N(0, I), condition from the LR
/// encoder, full reverse chain. Deterministic given the seed.
template <typename T, typename LrEnc>
Tensor<T> sample_prior(const Tensor<T>& lr, const LrEnc& lr_encoder, const DiffusionSchedule<T>& sched,
                       const Denoiser<T>& denoiser, uint64_t seed) {
    Rng rng(derive_seed(seed, "prior-sampling"));
    Tensor<T> z_t({static_cast<int>(lr_encoder.fc2.w->value.dim(1))});
    rng.fill_normal(z_t);
    auto c = lr_encoder(ag::constant(lr));
    auto z0 = reverse_chain(
        ag::constant(z_t), sched,
        [&](const ag::Var<T>& z, int t) { return denoiser(z, t, c); }, &rng);
    return z0->value;
}

} // namespace cdformer

#endif
