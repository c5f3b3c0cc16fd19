// SPDX-License-Identifier: Apache-2.0
//
// Prior encoders. The teacher encoder digests the HR/LR pair into a single
// C_z-dim vector (degradation branch: pixel-unshuffled HR concat LR;
// content branch: pixel-unshuffled HR); the LR encoder replicates the
// degradation branch alone and produces the diffusion condition vector.
// Both branches run at LR resolution: the HR image enters through a
// lossless space-to-depth stem.
#ifndef CDFORMER_ENCODERS_HPP
#define CDFORMER_ENCODERS_HPP

#include <string>
#include <vector>

#include "cdformer/config.hpp"
#include "cdformer/nn.hpp"

namespace cdformer {

/// conv stem -> 4 residual blocks -> global average pool; one encoder branch.
template <typename T>
struct BranchTrunk {
    nn::Conv2d<T> stem;
    std::vector<nn::ResBlock<T>> blocks;

    BranchTrunk() = default;
    BranchTrunk(int in_channels, int width, Rng& rng) : stem(in_channels, width, 3, rng) {
        blocks.reserve(4);
        for (int i = 0; i < 4; ++i) blocks.emplace_back(width, rng);
    }

    ag::Var<T> operator()(const ag::Var<T>& x) const {
        auto h = ag::leaky_relu(stem(x), T(0.1));
        for (const auto& b : blocks) h = b(h);
        return ag::global_avg_pool(h);
    }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        stem.collect(out, prefix + ".stem");
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(out, prefix + ".res" + std::to_string(i));
    }
};

template <typename T>
struct GtEncoder {
    PriorMode mode = PriorMode::full;
    int scale = 4;
    BranchTrunk<T> deg;     // input: pixel_unshuffle(HR, s) ++ LR = 3s^2+3 channels
    BranchTrunk<T> content; // input: pixel_unshuffle(HR, s) = 3s^2 channels
    nn::Linear<T> fc1, fc2;

    GtEncoder() = default;
    GtEncoder(const ModelConfig& cfg, Rng& rng) : mode(cfg.prior_mode), scale(cfg.scale) {
        if (mode == PriorMode::none) return;
        const int s2 = cfg.scale * cfg.scale;
        int fused = 0;
        if (mode != PriorMode::content) {
            deg = BranchTrunk<T>(3 * s2 + 3, cfg.enc_width, rng);
            fused += cfg.enc_width;
        }
        if (mode != PriorMode::degradation) {
            content = BranchTrunk<T>(3 * s2, cfg.enc_width, rng);
            fused += cfg.enc_width;
        }
        fc1 = nn::Linear<T>(fused, cfg.enc_mlp_hidden, true, rng);
        fc2 = nn::Linear<T>(cfg.enc_mlp_hidden, cfg.cz, true, rng);
    }

    /// hr: [H*s, W*s, 3], lr: [H, W, 3]. Returns the prior vector [cz].
    ag::Var<T> operator()(const ag::Var<T>& hr, const ag::Var<T>& lr) const {
        if (mode == PriorMode::none)
            throw ConfigError("GtEncoder: prior mode 'none' has no encoder");
        if (hr->value.dim(0) != lr->value.dim(0) * scale || hr->value.dim(1) != lr->value.dim(1) * scale)
            throw ConfigError("GtEncoder: HR dims must be scale x LR dims");
        auto hr_depth = ag::pixel_unshuffle(hr, scale);
        ag::Var<T> fused;
        if (mode == PriorMode::full) {
            fused = ag::concat_last(deg(ag::concat_last(hr_depth, lr)), content(hr_depth));
        } else if (mode == PriorMode::degradation) {
            fused = deg(ag::concat_last(hr_depth, lr));
        } else {
            fused = content(hr_depth);
        }
        return fc2(ag::leaky_relu(fc1(fused), T(0.1)));
    }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        if (mode == PriorMode::none) return;
        if (mode != PriorMode::content) deg.collect(out, prefix + ".deg");
        if (mode != PriorMode::degradation) content.collect(out, prefix + ".content");
        fc1.collect(out, prefix + ".fc1");
        fc2.collect(out, prefix + ".fc2");
    }
};

template <typename T>
struct LrEncoder {
    BranchTrunk<T> trunk; // 3 input channels: the LR image alone
    nn::Linear<T> fc1, fc2;

    LrEncoder() = default;
    LrEncoder(const ModelConfig& cfg, Rng& rng)
        : trunk(3, cfg.enc_width, rng),
          fc1(cfg.enc_width, cfg.enc_mlp_hidden, true, rng),
          fc2(cfg.enc_mlp_hidden, cfg.cz, true, rng) {}

    ag::Var<T> operator()(const ag::Var<T>& lr) const {
        return fc2(ag::leaky_relu(fc1(trunk(lr)), T(0.1)));
    }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        trunk.collect(out, prefix + ".trunk");
        fc1.collect(out, prefix + ".fc1");
        fc2.collect(out, prefix + ".fc2");
    }
};

} // namespace cdformer

#endif
