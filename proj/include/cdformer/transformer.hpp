// SPDX-License-Identifier: Apache-2.0
//
// The prior-guided SR network: shallow conv stem, residual groups of CDRBs
// (dual window/channel attention with conv interflow and per-stage prior
// injection), global residual, pixel-shuffle reconstruction head.
#ifndef CDFORMER_TRANSFORMER_HPP
#define CDFORMER_TRANSFORMER_HPP

#include <cmath>
#include <string>
#include <vector>

#include "cdformer/config.hpp"
#include "cdformer/nn.hpp"

namespace cdformer {

/// Content-degradation injection: F' = Linear1(z) * Norm(F) + Linear2(z).
/// Scale/shift heads start at identity (zero weights, scale bias 1) so an
/// untrained prior leaves features unchanged. With active=false the module
/// degrades to plain layer normalization and ignores z entirely.
template <typename T>
struct Cdim {
    nn::Linear<T> scale_head, shift_head;
    bool active = true;

    Cdim() = default;
    Cdim(int cz, int channels, bool enabled, Rng& rng) : active(enabled) {
        if (!active) return;
        (void)rng;
        scale_head.w = nn::init_zeros<T>({cz, channels});
        scale_head.b = ag::parameter(Tensor<T>::full({channels}, T(1)));
        shift_head.w = nn::init_zeros<T>({cz, channels});
        shift_head.b = nn::init_zeros<T>({channels});
    }

    ag::Var<T> operator()(const ag::Var<T>& f, const ag::Var<T>& z) const {
        auto normed = ag::layer_norm(f);
        if (!active) return normed;
        auto s = scale_head(z);
        auto t = shift_head(z);
        return ag::add_by_channel(ag::scale_by_channel(normed, s), t);
    }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        if (!active) return;
        scale_head.collect(out, prefix + ".scale");
        shift_head.collect(out, prefix + ".shift");
    }
};

/// Spatial window self-attention over non-overlapping windows; bias-free
/// Q/K/V/O projections, no positional bias, reflect padding to window
/// multiples (cropped back afterwards).
template <typename T>
struct WindowAttention {
    nn::Linear<T> wq, wk, wv, wo;
    int heads = 1, wh = 8, ww = 32;

    WindowAttention() = default;
    WindowAttention(int channels, int heads_, int wh_, int ww_, Rng& rng)
        : wq(channels, channels, false, rng),
          wk(channels, channels, false, rng),
          wv(channels, channels, false, rng),
          wo(channels, channels, false, rng),
          heads(heads_), wh(wh_), ww(ww_) {}

    ag::Var<T> operator()(const ag::Var<T>& f) const {
        const int H = f->value.dim(0), W = f->value.dim(1);
        const int ph = (wh - H % wh) % wh, pw = (ww - W % ww) % ww;
        auto x = f;
        if (ph || pw) x = ag::pad_reflect(f, 0, ph, 0, pw);
        const int Hp = H + ph, Wp = W + pw;
        auto q = ag::window_partition(wq(x), wh, ww);
        auto k = ag::window_partition(wk(x), wh, ww);
        auto v = ag::window_partition(wv(x), wh, ww);
        auto attn = ag::window_attention(q, k, v, heads);
        auto merged = ag::window_merge(attn, Hp, Wp, wh, ww);
        if (ph || pw) merged = ag::crop(merged, 0, 0, H, W);
        return wo(merged);
    }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        wq.collect(out, prefix + ".wq");
        wk.collect(out, prefix + ".wk");
        wv.collect(out, prefix + ".wv");
        wo.collect(out, prefix + ".wo");
    }
};

/// Channel-wise self-attention: per head a C/h x C/h affinity with learnable
/// temperature. The temperature parameter lives in log space and is scaled
/// by sqrt(HW) at call time so it stays positive and tracks the token count.
template <typename T>
struct ChannelAttention {
    nn::Linear<T> wq, wk, wv, wo;
    ag::Var<T> log_alpha; // [heads]
    int heads = 1;

    ChannelAttention() = default;
    ChannelAttention(int channels, int heads_, Rng& rng)
        : wq(channels, channels, false, rng),
          wk(channels, channels, false, rng),
          wv(channels, channels, false, rng),
          wo(channels, channels, false, rng),
          log_alpha(nn::init_zeros<T>({heads_})),
          heads(heads_) {}

    ag::Var<T> operator()(const ag::Var<T>& f) const {
        const int H = f->value.dim(0), W = f->value.dim(1), C = f->value.dim(2);
        const int64_t n = static_cast<int64_t>(H) * W;
        auto flat = ag::reshape(f, {static_cast<int>(n), C});
        auto q = wq(flat);
        auto k = wk(flat);
        auto v = wv(flat);
        auto alpha = ag::scale(ag::exp_of(log_alpha), static_cast<T>(std::sqrt(static_cast<double>(n))));
        auto attn = ag::channel_attention(q, k, v, heads, alpha);
        return ag::reshape(wo(attn), {H, W, C});
    }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        wq.collect(out, prefix + ".wq");
        wk.collect(out, prefix + ".wk");
        wv.collect(out, prefix + ".wv");
        wo.collect(out, prefix + ".wo");
        out.emplace_back(prefix + ".log_alpha", log_alpha);
    }
};

/// Channel distiller: global average pool -> 1x1 conv -> sigmoid, a [C]
/// gate. Final layer zero-init, so the gate starts flat at 0.5.
template <typename T>
struct ChannelDistiller {
    nn::Linear<T> fc;

    ChannelDistiller() = default;
    ChannelDistiller(int channels, Rng& rng) {
        (void)rng;
        fc.w = nn::init_zeros<T>({channels, channels});
        fc.b = nn::init_zeros<T>({channels});
    }

    ag::Var<T> operator()(const ag::Var<T>& f) const { return ag::sigmoid(fc(ag::global_avg_pool(f))); }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const { fc.collect(out, prefix + ".fc"); }
};

/// Spatial distiller: channel mean+max -> 7x7 conv -> sigmoid, an [H,W,1]
/// gate. Final layer zero-init.
template <typename T>
struct SpatialDistiller {
    nn::Conv2d<T> conv;

    SpatialDistiller() = default;
    SpatialDistiller(Rng& rng) {
        (void)rng;
        conv.w = nn::init_zeros<T>({7, 7, 2, 1});
        conv.b = nn::init_zeros<T>({1});
        conv.pad = 3;
    }

    ag::Var<T> operator()(const ag::Var<T>& f) const { return ag::sigmoid(conv(ag::channel_mean_max(f))); }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const { conv.collect(out, prefix + ".conv"); }
};

/// attn * S(conv) + conv * C(attn)
template <typename T>
ag::Var<T> interflow_spatial(const ag::Var<T>& f_attn, const ag::Var<T>& f_conv,
                             const SpatialDistiller<T>& sd, const ChannelDistiller<T>& cd) {
    return ag::add(ag::scale_by_map(f_attn, sd(f_conv)), ag::scale_by_channel(f_conv, cd(f_attn)));
}

/// attn * C(conv) + conv * S(attn); distiller roles swapped.
template <typename T>
ag::Var<T> interflow_channel(const ag::Var<T>& f_attn, const ag::Var<T>& f_conv,
                             const SpatialDistiller<T>& sd, const ChannelDistiller<T>& cd) {
    return ag::add(ag::scale_by_channel(f_attn, cd(f_conv)), ag::scale_by_map(f_conv, sd(f_attn)));
}

template <typename T>
struct Ffn {
    nn::Linear<T> fc1, fc2;

    Ffn() = default;
    Ffn(int channels, int expand, Rng& rng)
        : fc1(channels, channels * expand, true, rng), fc2(channels * expand, channels, true, rng) {}

    ag::Var<T> operator()(const ag::Var<T>& x) const { return fc2(ag::gelu(fc1(x))); }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        fc1.collect(out, prefix + ".fc1");
        fc2.collect(out, prefix + ".fc2");
    }
};

/// One refinement block:
///   CDIM1 -> {SW-SA || DConv} -> spatial interflow (+res)
///   CDIM2 -> FFN (+res)
///   CDIM3 -> {CW-SA || DConv} -> channel interflow (+res)
///   CDIM4 -> FFN (+res)
template <typename T>
struct Cdrb {
    Cdim<T> cdim1, cdim2, cdim3, cdim4;
    WindowAttention<T> swsa;
    ChannelAttention<T> cwsa;
    nn::DwConv2d<T> dconv1, dconv2;
    SpatialDistiller<T> sd1, sd2;
    ChannelDistiller<T> cd1, cd2;
    Ffn<T> ffn1, ffn2;

    Cdrb() = default;
    Cdrb(const ModelConfig& cfg, Rng& rng)
        : cdim1(cfg.cz, cfg.channels, cfg.prior_mode != PriorMode::none, rng),
          cdim2(cfg.cz, cfg.channels, cfg.prior_mode != PriorMode::none, rng),
          cdim3(cfg.cz, cfg.channels, cfg.prior_mode != PriorMode::none, rng),
          cdim4(cfg.cz, cfg.channels, cfg.prior_mode != PriorMode::none, rng),
          swsa(cfg.channels, cfg.heads, cfg.window_h, cfg.window_w, rng),
          cwsa(cfg.channels, cfg.heads, rng),
          dconv1(cfg.channels, 3, rng),
          dconv2(cfg.channels, 3, rng),
          sd1(rng), sd2(rng),
          cd1(cfg.channels, rng), cd2(cfg.channels, rng),
          ffn1(cfg.channels, cfg.ffn_expand, rng),
          ffn2(cfg.channels, cfg.ffn_expand, rng) {}

    ag::Var<T> operator()(const ag::Var<T>& f, const ag::Var<T>& z) const {
        auto fh1 = cdim1(f, z);
        auto f2 = ag::add(interflow_spatial(swsa(fh1), dconv1(fh1), sd1, cd1), f);
        auto f3 = ag::add(ffn1(cdim2(f2, z)), f2);
        auto fh3 = cdim3(f3, z);
        auto f4 = ag::add(interflow_channel(cwsa(fh3), dconv2(fh3), sd2, cd2), f3);
        return ag::add(ffn2(cdim4(f4, z)), f4);
    }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        cdim1.collect(out, prefix + ".cdim1");
        cdim2.collect(out, prefix + ".cdim2");
        cdim3.collect(out, prefix + ".cdim3");
        cdim4.collect(out, prefix + ".cdim4");
        swsa.collect(out, prefix + ".swsa");
        cwsa.collect(out, prefix + ".cwsa");
        dconv1.collect(out, prefix + ".dconv1");
        dconv2.collect(out, prefix + ".dconv2");
        sd1.collect(out, prefix + ".sd1");
        sd2.collect(out, prefix + ".sd2");
        cd1.collect(out, prefix + ".cd1");
        cd2.collect(out, prefix + ".cd2");
        ffn1.collect(out, prefix + ".ffn1");
        ffn2.collect(out, prefix + ".ffn2");
    }
};

template <typename T>
struct ResidualGroup {
    std::vector<Cdrb<T>> blocks;
    nn::Conv2d<T> conv;

    ResidualGroup() = default;
    ResidualGroup(const ModelConfig& cfg, Rng& rng) : conv(cfg.channels, cfg.channels, 3, rng) {
        blocks.reserve(static_cast<size_t>(cfg.blocks_per_group));
        for (int i = 0; i < cfg.blocks_per_group; ++i) blocks.emplace_back(cfg, rng);
    }

    ag::Var<T> operator()(const ag::Var<T>& f, const ag::Var<T>& z) const {
        auto x = f;
        for (const auto& b : blocks) x = b(x, z);
        return ag::add(conv(x), f);
    }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].collect(out, prefix + ".block" + std::to_string(i));
        conv.collect(out, prefix + ".conv");
    }
};

template <typename T>
struct SrNetwork {
    ModelConfig cfg;
    nn::Conv2d<T> stem;
    std::vector<ResidualGroup<T>> groups;
    nn::Conv2d<T> body_conv;
    nn::Conv2d<T> up_conv;  // C -> head_mid * s^2
    nn::Conv2d<T> out_conv; // head_mid -> 3

    SrNetwork() = default;
    SrNetwork(const ModelConfig& cfg_, Rng& rng)
        : cfg(cfg_),
          stem(3, cfg_.channels, 3, rng),
          body_conv(cfg_.channels, cfg_.channels, 3, rng),
          up_conv(cfg_.channels, cfg_.head_mid * cfg_.scale * cfg_.scale, 3, rng),
          out_conv(cfg_.head_mid, 3, 3, rng) {
        groups.reserve(static_cast<size_t>(cfg_.groups));
        for (int i = 0; i < cfg_.groups; ++i) groups.emplace_back(cfg_, rng);
    }

    /// lr: [H,W,3] in [0,1]; z: [cz]. Output [H*s, W*s, 3], unclamped.
    ag::Var<T> operator()(const ag::Var<T>& lr, const ag::Var<T>& z) const {
        auto f0 = stem(lr);
        auto x = f0;
        for (const auto& g : groups) x = g(x, z);
        auto f = ag::add(body_conv(x), f0);
        auto up = ag::pixel_shuffle(up_conv(f), cfg.scale);
        return out_conv(up);
    }

    void collect(nn::ParamList<T>& out, const std::string& prefix) const {
        stem.collect(out, prefix + ".stem");
        for (size_t i = 0; i < groups.size(); ++i)
            groups[i].collect(out, prefix + ".group" + std::to_string(i));
        body_conv.collect(out, prefix + ".body_conv");
        up_conv.collect(out, prefix + ".up_conv");
        out_conv.collect(out, prefix + ".out_conv");
    }
};

} // namespace cdformer

#endif
