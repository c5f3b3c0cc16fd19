// SPDX-License-Identifier: Apache-2.0
//
// Two-stage optimization. Stage 1 trains the teacher encoder and SR net on
// reconstruction alone; stage 2 freezes the teacher and trains the LR
// encoder, the denoiser and the SR net through the full reverse chain on
// L_diff + alpha_rec * L_rec.
#ifndef CDFORMER_TRAINING_HPP
#define CDFORMER_TRAINING_HPP

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cdformer/checkpoint.hpp"
#include "cdformer/degradation.hpp"
#include "cdformer/diffusion.hpp"
#include "cdformer/encoders.hpp"
#include "cdformer/png_io.hpp"
#include "cdformer/synthetic.hpp"
#include "cdformer/transformer.hpp"

namespace cdformer {

/// lr0 halved every `period` epochs.
inline double lr_schedule(int epoch, double lr0 = 1e-4, int period = 125) {
    if (epoch < 0) throw ConfigError("lr_schedule: negative epoch");
    return std::ldexp(lr0, -(epoch / period));
}

/// All four parameter groups plus the shared noise schedule.
template <typename T>
struct System {
    ModelConfig cfg;
    DiffusionSchedule<T> schedule;
    GtEncoder<T> egt;
    LrEncoder<T> elr;
    Denoiser<T> denoiser;
    SrNetwork<T> sr;
    int32_t trained_stage = 0; // 0 = fresh, 1/2 = per checkpoint

    explicit System(const ModelConfig& cfg_, uint64_t seed = 0)
        : cfg(cfg_), schedule(DiffusionSchedule<T>::from_config(cfg_)) {
        auto errs = cfg_.validate();
        if (!errs.empty()) {
            std::string msg = "invalid model config:";
            for (const auto& e : errs) msg += "\n  - " + e;
            throw ConfigError(msg);
        }
        Rng r_egt(derive_seed(seed, "init/egt"));
        Rng r_elr(derive_seed(seed, "init/elr"));
        Rng r_den(derive_seed(seed, "init/denoiser"));
        Rng r_sr(derive_seed(seed, "init/sr"));
        egt = GtEncoder<T>(cfg_, r_egt);
        elr = LrEncoder<T>(cfg_, r_elr);
        denoiser = Denoiser<T>(cfg_, r_den);
        sr = SrNetwork<T>(cfg_, r_sr);
    }

    nn::ParamList<T> egt_params() const {
        nn::ParamList<T> p;
        egt.collect(p, "egt");
        return p;
    }
    nn::ParamList<T> elr_params() const {
        nn::ParamList<T> p;
        elr.collect(p, "elr");
        return p;
    }
    nn::ParamList<T> denoiser_params() const {
        nn::ParamList<T> p;
        denoiser.collect(p, "den");
        return p;
    }
    nn::ParamList<T> sr_params() const {
        nn::ParamList<T> p;
        sr.collect(p, "sr");
        return p;
    }
    nn::ParamList<T> all_params() const {
        nn::ParamList<T> p = egt_params();
        for (auto& e : elr_params()) p.push_back(e);
        for (auto& e : denoiser_params()) p.push_back(e);
        for (auto& e : sr_params()) p.push_back(e);
        return p;
    }

    bool has_prior() const { return cfg.prior_mode != PriorMode::none; }
};

template <typename T>
struct Adam {
    double beta1 = 0.9, beta2 = 0.99, eps = 1e-8, clip = 1.0;
    int64_t t = 0;
    std::vector<Tensor<T>> m, v;

    void init(const nn::ParamList<T>& params) {
        m.clear();
        v.clear();
        for (const auto& [name, p] : params) {
            m.emplace_back(p->value.shape());
            v.emplace_back(p->value.shape());
        }
    }

    void step(nn::ParamList<T>& params, double lr) {
        if (m.size() != params.size()) throw ConfigError("Adam: not initialized for this parameter list");
        double scale = 1.0;
        if (clip > 0.0) {
            double sq = 0.0;
            for (const auto& [name, p] : params) {
                if (p->grad.size() != p->value.size()) continue;
                for (int64_t i = 0; i < p->grad.size(); ++i) sq += double(p->grad[i]) * double(p->grad[i]);
            }
            const double norm = std::sqrt(sq);
            if (norm > clip) scale = clip / norm;
        }
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].second;
            if (p->grad.size() != p->value.size()) continue;
            Tensor<T>& mi = m[i];
            Tensor<T>& vi = v[i];
            for (int64_t j = 0; j < p->value.size(); ++j) {
                const double g = double(p->grad[j]) * scale;
                const double mn = beta1 * double(mi[j]) + (1.0 - beta1) * g;
                const double vn = beta2 * double(vi[j]) + (1.0 - beta2) * g * g;
                mi[j] = static_cast<T>(mn);
                vi[j] = static_cast<T>(vn);
                p->value[j] -= static_cast<T>(lr * (mn / bc1) / (std::sqrt(vn / bc2) + eps));
            }
        }
    }
};

struct StepStats {
    int64_t step = 0;
    int epoch = 0;
    int stage = 1;
    double l_rec = 0.0, l_diff = 0.0, total = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

inline void write_log_header(std::ostream& os) { os << "step,epoch,stage,l_rec,l_diff,total,lr,wall_ms\n"; }

inline void write_log_row(std::ostream& os, const StepStats& s) {
    os << s.step << ',' << s.epoch << ',' << s.stage << ',' << s.l_rec << ',' << s.l_diff << ',' << s.total
       << ',' << s.lr << ',' << s.wall_ms << '\n';
}

// ---------------------------------------------------------------------------
// data
// ---------------------------------------------------------------------------

/// HR patches for training (each patch_size*scale square, values in [0,1]).
template <typename T>
std::vector<ImageT<T>> probe_patch_set(int count, int hr_edge, uint64_t seed) {
    std::vector<ImageT<T>> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i)
        out.push_back(make_probe_image<T>(derive_seed(seed, "probe-set", static_cast<uint64_t>(i)), hr_edge, hr_edge));
    return out;
}

inline std::vector<std::string> list_pngs(const std::string& dir) {
    namespace fs = std::filesystem;
    std::vector<std::string> paths;
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") paths.push_back(e.path().string());
    std::sort(paths.begin(), paths.end());
    return paths;
}

/// Random HR crops from a PNG directory; images smaller than the patch are
/// skipped. Deterministic in (dir contents, seed).
template <typename T>
std::vector<ImageT<T>> load_patch_set(const std::string& dir, int count, int hr_edge, uint64_t seed) {
    auto paths = list_pngs(dir);
    if (paths.empty()) throw IoError("no .png files in " + dir);
    std::vector<ImageT<T>> images;
    for (const auto& p : paths) {
        auto img = read_png(p).template cast<T>();
        if (img.h >= hr_edge && img.w >= hr_edge) images.push_back(std::move(img));
    }
    if (images.empty()) throw IoError("no images large enough for patch size in " + dir);
    Rng rng(derive_seed(seed, "patch-crops"));
    std::vector<ImageT<T>> patches;
    patches.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        const auto& src = images[static_cast<size_t>(rng.uniform_int(static_cast<int>(images.size())))];
        const int top = src.h == hr_edge ? 0 : rng.uniform_int(src.h - hr_edge);
        const int left = src.w == hr_edge ? 0 : rng.uniform_int(src.w - hr_edge);
        patches.push_back(crop_image(src, top, left, hr_edge, hr_edge));
    }
    return patches;
}

/// Resolve the training patch set from the config: data_dir if given,
/// otherwise the built-in probe set.
template <typename T>
std::vector<ImageT<T>> resolve_patch_set(const ModelConfig& mc, const TrainConfig& tc) {
    const int hr_edge = tc.patch_size * mc.scale;
    if (tc.data_dir.empty()) return probe_patch_set<T>(tc.probe_count, hr_edge, derive_seed(tc.seed, "data"));
    return load_patch_set<T>(tc.data_dir, tc.probe_count, hr_edge, derive_seed(tc.seed, "data"));
}

/// One degradation spec per batch, per the sampling mode.
inline DegradationSpec sample_degradation(const TrainConfig& tc, int scale, Rng& rng) {
    DegradationSpec s;
    s.scale = scale;
    if (tc.degradation == "fixed") {
        s.kernel_type = KernelType::isotropic;
        s.width = tc.width;
    } else if (tc.degradation == "isotropic") {
        s.kernel_type = KernelType::isotropic;
        s.width = rng.uniform(tc.width_min, tc.width_max);
    } else { // general
        s.kernel_type = KernelType::anisotropic;
        s.sigma1 = rng.uniform(0.2, 4.0);
        s.sigma2 = rng.uniform(0.2, 4.0);
        s.theta = rng.uniform(0.0, 3.14159265358979323846);
        s.noise_level = rng.uniform(0.0, tc.noise_max);
    }
    return s;
}

// ---------------------------------------------------------------------------
// trainer
// ---------------------------------------------------------------------------

template <typename T>
nn::ParamList<T> trainable_params(const System<T>& sys, int stage, bool freeze_egt) {
    nn::ParamList<T> p;
    if (stage == 1) {
        p = sys.egt_params();
        for (auto& e : sys.sr_params()) p.push_back(e);
    } else {
        if (!freeze_egt)
            for (auto& e : sys.egt_params()) p.push_back(e);
        for (auto& e : sys.elr_params()) p.push_back(e);
        for (auto& e : sys.denoiser_params()) p.push_back(e);
        for (auto& e : sys.sr_params()) p.push_back(e);
    }
    return p;
}

template <typename T>
struct Trainer {
    System<T>& sys;
    TrainConfig tc;
    Adam<T> opt;
    nn::ParamList<T> trainable;
    int64_t step = 0; // global step counter, continues across resume
    std::function<void(const StepStats&)> on_step;

    Trainer(System<T>& sys_, const TrainConfig& tc_) : sys(sys_), tc(tc_) {
        auto errs = tc_.validate();
        if (!errs.empty()) {
            std::string msg = "invalid train config:";
            for (const auto& e : errs) msg += "\n  - " + e;
            throw ConfigError(msg);
        }
        if (tc.stage == 2 && sys.trained_stage < 1)
            throw ConfigError("stage 2 requires a stage-1 checkpoint (teacher encoder untrained)");
        if (tc.stage == 2 && !sys.has_prior())
            throw ConfigError("stage 2 is meaningless with prior_mode none (no prior to estimate)");
        if (tc.stage == 2) {
            auto egt = sys.egt_params();
            nn::set_requires_grad(egt, !tc.freeze_egt);
        }
        trainable = trainable_params(sys, tc.stage, tc.freeze_egt);
        opt.beta1 = tc.adam_beta1;
        opt.beta2 = tc.adam_beta2;
        opt.eps = tc.adam_eps;
        opt.clip = tc.grad_clip;
        opt.init(trainable);
    }

    int epoch_of_step(int64_t s) const { return static_cast<int>(s / tc.steps_per_epoch); }

    /// Run `steps` optimizer steps (defaults to epochs*steps_per_epoch).
    void run(const std::vector<ImageT<T>>& hr_patches, int64_t steps = -1) {
        if (hr_patches.empty()) throw ConfigError("training: empty patch set");
        const int64_t target = step + (steps < 0 ? static_cast<int64_t>(tc.epochs) * tc.steps_per_epoch : steps);
        while (step < target) run_step(hr_patches);
    }

    void run_step(const std::vector<ImageT<T>>& hr_patches) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng rng(derive_seed(tc.seed, "train/step", static_cast<uint64_t>(step)));

        // assemble the batch: one degradation spec per batch, per-sample noise
        DegradationSpec spec = sample_degradation(tc, sys.cfg.scale, rng);
        std::vector<int> ids(static_cast<size_t>(tc.batch_size));
        std::vector<ImageT<T>> hrs, lrs;
        for (int b = 0; b < tc.batch_size; ++b) {
            ids[static_cast<size_t>(b)] = rng.uniform_int(static_cast<int>(hr_patches.size()));
            const auto& hr = hr_patches[static_cast<size_t>(ids[static_cast<size_t>(b)])];
            DegradationSpec per = spec;
            per.rng_seed = derive_seed(tc.seed, "train/noise", static_cast<uint64_t>(step) * 1000 + b);
            hrs.push_back(hr);
            lrs.push_back(degrade(hr, per));
        }

        StepStats st;
        st.step = step + 1;
        st.epoch = epoch_of_step(step);
        st.stage = tc.stage;
        st.lr = lr_schedule(st.epoch, tc.lr, tc.lr_halving_period);

        ag::Var<T> total;
        double l_rec_acc = 0.0, l_diff_acc = 0.0;
        for (int b = 0; b < tc.batch_size; ++b) {
            auto hr_t = ag::constant(hrs[static_cast<size_t>(b)].to_tensor());
            auto lr_t = ag::constant(lrs[static_cast<size_t>(b)].to_tensor());
            ag::Var<T> sample_loss;
            if (tc.stage == 1) {
                auto z0 = sys.has_prior() ? sys.egt(hr_t, lr_t) : ag::constant(Tensor<T>({sys.cfg.cz}));
                auto l_rec = ag::mean_abs_diff(sys.sr(lr_t, z0), hr_t);
                l_rec_acc += static_cast<double>(l_rec->value[0]);
                sample_loss = l_rec;
            } else {
                auto z0 = sys.egt(hr_t, lr_t);
                if (tc.freeze_egt) z0 = ag::constant(z0->value); // detach the frozen teacher
                Tensor<T> eps(z0->value.shape());
                rng.fill_normal(eps);
                auto z_t = forward_diffuse(z0, sys.schedule, eps);
                auto c = sys.elr(lr_t);
                auto z0_hat = reverse_chain(
                    z_t, sys.schedule, [&](const ag::Var<T>& z, int t) { return sys.denoiser(z, t, c); }, &rng);
                auto l_diff = diffusion_loss(z0, z0_hat);
                auto l_rec = ag::mean_abs_diff(sys.sr(lr_t, z0_hat), hr_t);
                l_diff_acc += static_cast<double>(l_diff->value[0]);
                l_rec_acc += static_cast<double>(l_rec->value[0]);
                sample_loss = ag::axpby(T(1), l_diff, static_cast<T>(tc.alpha_rec), l_rec);
            }
            total = total ? ag::add(total, sample_loss) : sample_loss;
        }
        total = ag::scale(total, T(1) / static_cast<T>(tc.batch_size));

        st.l_rec = l_rec_acc / tc.batch_size;
        st.l_diff = l_diff_acc / tc.batch_size;
        st.total = static_cast<double>(total->value[0]);
        if (!std::isfinite(st.total)) {
            std::ostringstream os;
            os << "non-finite loss at step " << st.step << " (lr " << st.lr << ", batch ids";
            for (int id : ids) os << ' ' << id;
            os << ")";
            throw NumericError(os.str());
        }

        nn::zero_grads(trainable);
        ag::backward(total);
        opt.step(trainable, st.lr);
        nn::zero_grads(trainable);

        ++step;
        st.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (on_step) on_step(st);
    }

    Checkpoint make_checkpoint() const {
        Checkpoint ck;
        ck.arch = arch_hash(sys.cfg);
        ck.stage = std::max<int32_t>(sys.trained_stage, tc.stage);
        ck.epoch = epoch_of_step(step);
        ck.step = step;
        ck.model_json = to_json(sys.cfg).dump();
        ck.train_json = to_json(tc).dump();
        params_to_checkpoint(sys.all_params(), ck);
        ck.has_optimizer = true;
        ck.adam_t = opt.t;
        // optimizer state is stored for every parameter; frozen groups carry
        // zeros, which keeps the layout independent of the stage
        auto all = sys.all_params();
        std::map<std::string, const Tensor<T>*> ms, vs;
        for (size_t i = 0; i < trainable.size(); ++i) {
            ms[trainable[i].first] = &opt.m[i];
            vs[trainable[i].first] = &opt.v[i];
        }
        for (const auto& [name, p] : all) {
            Tensor<float> mt(p->value.shape()), vt(p->value.shape());
            if (auto it = ms.find(name); it != ms.end())
                for (int64_t j = 0; j < mt.size(); ++j) {
                    mt[j] = static_cast<float>((*it->second)[j]);
                    vt[j] = static_cast<float>((*vs[name])[j]);
                }
            ck.adam_m.push_back(std::move(mt));
            ck.adam_v.push_back(std::move(vt));
        }
        return ck;
    }

    /// Restore parameters, step counter and optimizer state.
    void resume_from(const Checkpoint& ck) {
        if (ck.arch != arch_hash(sys.cfg))
            throw ConfigError("checkpoint architecture hash mismatch; refusing to resume");
        auto all = sys.all_params();
        params_from_checkpoint(ck, all);
        sys.trained_stage = ck.stage;
        step = ck.step;
        if (ck.has_optimizer && ck.stage == tc.stage) {
            opt.t = ck.adam_t;
            std::map<std::string, size_t> pos;
            for (size_t i = 0; i < ck.params.size(); ++i) pos[ck.params[i].first] = i;
            for (size_t i = 0; i < trainable.size(); ++i) {
                auto it = pos.find(trainable[i].first);
                if (it == pos.end()) throw IoError("checkpoint missing optimizer state for " + trainable[i].first);
                const auto& mt = ck.adam_m[it->second];
                const auto& vt = ck.adam_v[it->second];
                for (int64_t j = 0; j < mt.size(); ++j) {
                    opt.m[i][j] = static_cast<T>(mt[j]);
                    opt.v[i][j] = static_cast<T>(vt[j]);
                }
            }
        }
    }
};

/// Load checkpoint weights into a freshly built system; verifies the
/// architecture hash.
template <typename T>
System<T> system_from_checkpoint(const Checkpoint& ck) {
    auto cfg = checkpoint_model_config(ck);
    System<T> sys(cfg, /*seed=*/0);
    if (ck.arch != arch_hash(cfg)) throw IoError("checkpoint architecture hash mismatch");
    auto all = sys.all_params();
    params_from_checkpoint(ck, all);
    sys.trained_stage = ck.stage;
    return sys;
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

/// Prior estimation from LR alone plus SR reconstruction. Requires a
/// stage-2 system unless the model has no prior path at all.
template <typename T>
ImageT<T> infer(const System<T>& sys, const ImageT<T>& lr, uint64_t seed) {
    Tensor<T> z({sys.cfg.cz});
    if (sys.has_prior()) {
        if (sys.trained_stage < 2)
            throw ConfigError(
                "inference needs a stage-2 checkpoint: LR encoder and denoiser are untrained in stage " +
                std::to_string(sys.trained_stage));
        z = sample_prior(lr.to_tensor(), sys.elr, sys.schedule, sys.denoiser, seed);
    }
    auto out = sys.sr(ag::constant(lr.to_tensor()), ag::constant(z));
    if (!ag::all_finite(out->value)) throw NumericError("inference produced non-finite pixels");
    auto img = ImageT<T>::from_tensor(out->value);
    img.clamp01();
    return img;
}

/// Teacher-path reconstruction (needs the HR image); used by the stage-1
/// ablation comparisons.
template <typename T>
ImageT<T> infer_with_teacher(const System<T>& sys, const ImageT<T>& hr, const ImageT<T>& lr) {
    Tensor<T> z({sys.cfg.cz});
    if (sys.has_prior()) z = sys.egt(ag::constant(hr.to_tensor()), ag::constant(lr.to_tensor()))->value;
    auto out = sys.sr(ag::constant(lr.to_tensor()), ag::constant(z));
    auto img = ImageT<T>::from_tensor(out->value);
    img.clamp01();
    return img;
}

} // namespace cdformer

#endif
