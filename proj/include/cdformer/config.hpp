// SPDX-License-Identifier: Apache-2.0
#ifndef CDFORMER_CONFIG_HPP
#define CDFORMER_CONFIG_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdformer/rng.hpp"
#include "cdformer/tensor.hpp"

namespace cdformer {

/// Which parts of the content-degradation prior are wired in. Matches the
/// ablation variants: model1 = none, model2 = degradation, model3 = content,
/// model4 = full.
enum class PriorMode { none, degradation, content, full };

inline std::string prior_mode_name(PriorMode m) {
    switch (m) {
        case PriorMode::none: return "none";
        case PriorMode::degradation: return "degradation";
        case PriorMode::content: return "content";
        case PriorMode::full: return "full";
    }
    return "?";
}

inline PriorMode prior_mode_from(const std::string& s) {
    if (s == "none" || s == "model1") return PriorMode::none;
    if (s == "degradation" || s == "model2") return PriorMode::degradation;
    if (s == "content" || s == "model3") return PriorMode::content;
    if (s == "full" || s == "model4") return PriorMode::full;
    throw ConfigError("unknown prior mode: " + s);
}

struct ModelConfig {
    int scale = 4;
    // SR body
    int channels = 180;       // C
    int groups = 6;           // residual groups
    int blocks_per_group = 3; // CDRBs per group
    int window_h = 8;
    int window_w = 32;
    int heads = 6;
    int ffn_expand = 2;
    int head_mid = 64; // channels between pixel-shuffle and the final conv
    // prior
    int cz = 256; // CDP length
    int enc_width = 64;
    int enc_mlp_hidden = 256;
    PriorMode prior_mode = PriorMode::full;
    // diffusion estimator
    int denoiser_hidden = 512;
    int denoiser_blocks = 4;
    int time_embed_dim = 64;
    int diffusion_steps = 4;
    double beta_min = 0.1;
    double beta_max = 0.99;

    std::vector<std::string> validate() const {
        std::vector<std::string> errs;
        auto pos = [&](int v, const char* name) {
            if (v < 1) errs.push_back(std::string("model.") + name + ": must be >= 1");
        };
        pos(scale, "scale");
        pos(channels, "channels");
        pos(groups, "groups");
        pos(blocks_per_group, "blocks_per_group");
        pos(window_h, "window_h");
        pos(window_w, "window_w");
        pos(heads, "heads");
        pos(ffn_expand, "ffn_expand");
        pos(head_mid, "head_mid");
        pos(cz, "cz");
        pos(enc_width, "enc_width");
        pos(enc_mlp_hidden, "enc_mlp_hidden");
        pos(denoiser_hidden, "denoiser_hidden");
        pos(denoiser_blocks, "denoiser_blocks");
        pos(time_embed_dim, "time_embed_dim");
        pos(diffusion_steps, "diffusion_steps");
        if (channels % heads) errs.push_back("model.heads: channels must be divisible by heads");
        if (time_embed_dim % 2) errs.push_back("model.time_embed_dim: must be even");
        if (!(beta_min > 0.0 && beta_min < 1.0)) errs.push_back("model.beta_min: must be in (0,1)");
        if (!(beta_max > 0.0 && beta_max < 1.0)) errs.push_back("model.beta_max: must be in (0,1)");
        if (beta_max < beta_min) errs.push_back("model.beta_max: must be >= beta_min");
        return errs;
    }
};

/// Published baseline: 6 groups x 3 CDRBs, 8x32 windows, 180 channels,
/// 256-dim prior, 4 diffusion steps.
inline ModelConfig baseline_model() { return ModelConfig{}; }

/// Lightweight variant: 4x16 windows, 96 channels.
inline ModelConfig small_model() {
    ModelConfig m;
    m.channels = 96;
    m.window_h = 4;
    m.window_w = 16;
    m.heads = 4;
    return m;
}

/// Desk-scale profile used by the acceptance runs; every dimension shrunk.
inline ModelConfig toy_model() {
    ModelConfig m;
    m.channels = 32;
    m.groups = 1;
    m.blocks_per_group = 1;
    m.window_h = 4;
    m.window_w = 16;
    m.heads = 4;
    m.head_mid = 32;
    m.cz = 64;
    m.enc_width = 32;
    m.enc_mlp_hidden = 128;
    m.denoiser_hidden = 128;
    m.denoiser_blocks = 4;
    m.time_embed_dim = 32;
    return m;
}

struct TrainConfig {
    int stage = 1;
    int epochs = 300;
    int steps_per_epoch = 100;
    int batch_size = 4;
    double lr = 1e-4;
    int lr_halving_period = 125; // epochs
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.99;
    double adam_eps = 1e-8;
    double alpha_rec = 0.01; // stage-2 reconstruction weight
    int patch_size = 48;     // LR-space patch edge
    uint64_t seed = 0;
    double grad_clip = 1.0;
    bool freeze_egt = true; // stage 2: keep the teacher encoder fixed
    // degradation sampling: "fixed" pins one isotropic width, "isotropic"
    // samples width in [width_min, width_max], "general" samples anisotropic
    // kernels and noise in [0, noise_max].
    std::string degradation = "fixed";
    double width = 1.2;
    double width_min = 0.0;
    double width_max = 3.6;
    double noise_max = 0.0;
    std::string data_dir;     // HR PNG directory; empty = built-in probe set
    int probe_count = 8;      // size of the built-in probe set

    std::vector<std::string> validate() const {
        std::vector<std::string> errs;
        if (stage != 1 && stage != 2) errs.push_back("train.stage: must be 1 or 2");
        if (epochs < 1) errs.push_back("train.epochs: must be >= 1");
        if (steps_per_epoch < 1) errs.push_back("train.steps_per_epoch: must be >= 1");
        if (batch_size < 1) errs.push_back("train.batch_size: must be >= 1");
        if (!(lr > 0.0)) errs.push_back("train.lr: must be > 0");
        if (lr_halving_period < 1) errs.push_back("train.lr_halving_period: must be >= 1");
        if (!(alpha_rec > 0.0)) errs.push_back("train.alpha_rec: must be > 0");
        if (patch_size < 8) errs.push_back("train.patch_size: must be >= 8");
        if (grad_clip < 0.0) errs.push_back("train.grad_clip: must be >= 0");
        if (degradation != "fixed" && degradation != "isotropic" && degradation != "general")
            errs.push_back("train.degradation: must be fixed|isotropic|general");
        if (width < 0.0) errs.push_back("train.width: must be >= 0");
        if (width_min < 0.0 || width_max < width_min) errs.push_back("train.width_min/width_max: bad range");
        if (noise_max < 0.0) errs.push_back("train.noise_max: must be >= 0");
        if (probe_count < 1) errs.push_back("train.probe_count: must be >= 1");
        return errs;
    }
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

// --- JSON (de)serialization -------------------------------------------------

inline nlohmann::json to_json(const ModelConfig& m) {
    return {
        {"scale", m.scale},
        {"channels", m.channels},
        {"groups", m.groups},
        {"blocks_per_group", m.blocks_per_group},
        {"window_h", m.window_h},
        {"window_w", m.window_w},
        {"heads", m.heads},
        {"ffn_expand", m.ffn_expand},
        {"head_mid", m.head_mid},
        {"cz", m.cz},
        {"enc_width", m.enc_width},
        {"enc_mlp_hidden", m.enc_mlp_hidden},
        {"prior_mode", prior_mode_name(m.prior_mode)},
        {"denoiser_hidden", m.denoiser_hidden},
        {"denoiser_blocks", m.denoiser_blocks},
        {"time_embed_dim", m.time_embed_dim},
        {"diffusion_steps", m.diffusion_steps},
        {"beta_min", m.beta_min},
        {"beta_max", m.beta_max},
    };
}

inline nlohmann::json to_json(const TrainConfig& t) {
    return {
        {"stage", t.stage},
        {"epochs", t.epochs},
        {"steps_per_epoch", t.steps_per_epoch},
        {"batch_size", t.batch_size},
        {"lr", t.lr},
        {"lr_halving_period", t.lr_halving_period},
        {"adam_beta1", t.adam_beta1},
        {"adam_beta2", t.adam_beta2},
        {"adam_eps", t.adam_eps},
        {"alpha_rec", t.alpha_rec},
        {"patch_size", t.patch_size},
        {"seed", t.seed},
        {"grad_clip", t.grad_clip},
        {"freeze_egt", t.freeze_egt},
        {"degradation", t.degradation},
        {"width", t.width},
        {"width_min", t.width_min},
        {"width_max", t.width_max},
        {"noise_max", t.noise_max},
        {"data_dir", t.data_dir},
        {"probe_count", t.probe_count},
    };
}

inline nlohmann::json to_json(const RunConfig& c) {
    return {{"model", to_json(c.model)}, {"train", to_json(c.train)}};
}

namespace detail {
template <typename T>
void fetch(const nlohmann::json& j, const char* key, T& out, std::vector<std::string>& errs,
           const char* section) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        errs.push_back(std::string(section) + "." + key + ": wrong type");
    }
}
} // namespace detail

inline ModelConfig model_from_json(const nlohmann::json& j, std::vector<std::string>& errs) {
    ModelConfig m;
    using detail::fetch;
    fetch(j, "scale", m.scale, errs, "model");
    fetch(j, "channels", m.channels, errs, "model");
    fetch(j, "groups", m.groups, errs, "model");
    fetch(j, "blocks_per_group", m.blocks_per_group, errs, "model");
    fetch(j, "window_h", m.window_h, errs, "model");
    fetch(j, "window_w", m.window_w, errs, "model");
    fetch(j, "heads", m.heads, errs, "model");
    fetch(j, "ffn_expand", m.ffn_expand, errs, "model");
    fetch(j, "head_mid", m.head_mid, errs, "model");
    fetch(j, "cz", m.cz, errs, "model");
    fetch(j, "enc_width", m.enc_width, errs, "model");
    fetch(j, "enc_mlp_hidden", m.enc_mlp_hidden, errs, "model");
    fetch(j, "denoiser_hidden", m.denoiser_hidden, errs, "model");
    fetch(j, "denoiser_blocks", m.denoiser_blocks, errs, "model");
    fetch(j, "time_embed_dim", m.time_embed_dim, errs, "model");
    fetch(j, "diffusion_steps", m.diffusion_steps, errs, "model");
    fetch(j, "beta_min", m.beta_min, errs, "model");
    fetch(j, "beta_max", m.beta_max, errs, "model");
    if (j.contains("prior_mode")) {
        try {
            m.prior_mode = prior_mode_from(j.at("prior_mode").get<std::string>());
        } catch (const std::exception& e) {
            errs.push_back(std::string("model.prior_mode: ") + e.what());
        }
    }
    return m;
}

inline TrainConfig train_from_json(const nlohmann::json& j, std::vector<std::string>& errs) {
    TrainConfig t;
    using detail::fetch;
    fetch(j, "stage", t.stage, errs, "train");
    fetch(j, "epochs", t.epochs, errs, "train");
    fetch(j, "steps_per_epoch", t.steps_per_epoch, errs, "train");
    fetch(j, "batch_size", t.batch_size, errs, "train");
    fetch(j, "lr", t.lr, errs, "train");
    fetch(j, "lr_halving_period", t.lr_halving_period, errs, "train");
    fetch(j, "adam_beta1", t.adam_beta1, errs, "train");
    fetch(j, "adam_beta2", t.adam_beta2, errs, "train");
    fetch(j, "adam_eps", t.adam_eps, errs, "train");
    fetch(j, "alpha_rec", t.alpha_rec, errs, "train");
    fetch(j, "patch_size", t.patch_size, errs, "train");
    fetch(j, "seed", t.seed, errs, "train");
    fetch(j, "grad_clip", t.grad_clip, errs, "train");
    fetch(j, "freeze_egt", t.freeze_egt, errs, "train");
    fetch(j, "degradation", t.degradation, errs, "train");
    fetch(j, "width", t.width, errs, "train");
    fetch(j, "width_min", t.width_min, errs, "train");
    fetch(j, "width_max", t.width_max, errs, "train");
    fetch(j, "noise_max", t.noise_max, errs, "train");
    fetch(j, "data_dir", t.data_dir, errs, "train");
    fetch(j, "probe_count", t.probe_count, errs, "train");
    return t;
}

/// Parse and validate; on any problem throws ConfigError listing every bad
/// field, so misconfigurations surface before compute starts.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    std::vector<std::string> errs;
    RunConfig c;
    if (j.contains("model")) c.model = model_from_json(j.at("model"), errs);
    if (j.contains("train")) c.train = train_from_json(j.at("train"), errs);
    for (const auto& e : c.model.validate()) errs.push_back(e);
    for (const auto& e : c.train.validate()) errs.push_back(e);
    if (!errs.empty()) {
        std::string msg = "invalid config:";
        for (const auto& e : errs) msg += "\n  - " + e;
        throw ConfigError(msg);
    }
    return c;
}

/// Hash of the architecture-determining fields; checkpoints refuse to load
/// into a model with a different hash.
inline uint64_t arch_hash(const ModelConfig& m) {
    return hash_str64(to_json(m).dump());
}

} // namespace cdformer

#endif
