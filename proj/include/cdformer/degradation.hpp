// SPDX-License-Identifier: Apache-2.0
//
// LR synthesis: blur with an isotropic or anisotropic Gaussian, bicubic
// downsample, additive Gaussian noise, clamp. Pure functions over value
// inputs; RNG state is passed explicitly per call.
#ifndef CDFORMER_DEGRADATION_HPP
#define CDFORMER_DEGRADATION_HPP

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cdformer/image.hpp"
#include "cdformer/rng.hpp"
#include "cdformer/tensor.hpp"

namespace cdformer {

template <typename T>
struct BlurKernelT {
    int size = 0;
    Tensor<T> weights; // [size, size], non-negative, sums to 1

    T at(int y, int x) const { return weights[static_cast<int64_t>(y) * size + x]; }
};

using BlurKernel = BlurKernelT<float>;

enum class KernelType { none, isotropic, anisotropic };

inline std::string kernel_type_name(KernelType t) {
    switch (t) {
        case KernelType::none: return "none";
        case KernelType::isotropic: return "isotropic";
        case KernelType::anisotropic: return "anisotropic";
    }
    return "?";
}

inline KernelType kernel_type_from(const std::string& s) {
    if (s == "none") return KernelType::none;
    if (s == "isotropic") return KernelType::isotropic;
    if (s == "anisotropic") return KernelType::anisotropic;
    throw ConfigError("unknown kernel type: " + s);
}

/// Fully determines one LR synthesis. noise_level is the std of additive
/// Gaussian noise in 8-bit units (applied as noise_level/255 in [0,1] space).
struct DegradationSpec {
    KernelType kernel_type = KernelType::isotropic;
    double width = 0.0;           // isotropic sigma
    double sigma1 = 1.0, sigma2 = 1.0, theta = 0.0; // anisotropic covariance params
    int kernel_size = 21;
    int scale = 4;
    double noise_level = 0.0;
    uint64_t rng_seed = 0;

    void validate() const {
        if (scale < 1) throw ConfigError("degradation: scale must be >= 1");
        if (noise_level < 0) throw ConfigError("degradation: negative noise level");
        if (kernel_type == KernelType::isotropic && width < 0)
            throw ConfigError("degradation: negative kernel width");
        if (kernel_type == KernelType::anisotropic && (sigma1 <= 0 || sigma2 <= 0))
            throw ConfigError("degradation: anisotropic sigmas must be positive");
        if (kernel_size % 2 == 0) throw ConfigError("degradation: kernel size must be odd");
    }
};

/// Normalized 2-D Gaussian; width 0 gives the delta kernel (blur skipped).
template <typename T = float>
BlurKernelT<T> make_isotropic_kernel(double width, int size) {
    if (size < 1 || size % 2 == 0) throw ConfigError("isotropic kernel: size must be odd");
    if (width < 0) throw ConfigError("isotropic kernel: width must be >= 0");
    BlurKernelT<T> k;
    k.size = size;
    k.weights = Tensor<T>({size, size});
    const int c = size / 2;
    if (width == 0.0) {
        k.weights[static_cast<int64_t>(c) * size + c] = T(1);
        return k;
    }
    double sum = 0.0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dy = y - c, dx = x - c;
            const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * width * width));
            k.weights[static_cast<int64_t>(y) * size + x] = static_cast<T>(v);
            sum += v;
        }
    for (int64_t i = 0; i < k.weights.size(); ++i) k.weights[i] = static_cast<T>(k.weights[i] / sum);
    return k;
}

/// Normalized Gaussian with covariance R(theta) diag(s1^2, s2^2) R(theta)^T.
template <typename T = float>
BlurKernelT<T> make_anisotropic_kernel(double sigma1, double sigma2, double theta, int size) {
    if (size < 1 || size % 2 == 0) throw ConfigError("anisotropic kernel: size must be odd");
    if (sigma1 <= 0 || sigma2 <= 0) throw ConfigError("anisotropic kernel: sigmas must be positive");
    BlurKernelT<T> k;
    k.size = size;
    k.weights = Tensor<T>({size, size});
    const int c = size / 2;
    const double ct = std::cos(theta), st = std::sin(theta);
    // inverse covariance of R diag(s1^2, s2^2) R^T
    const double i1 = 1.0 / (sigma1 * sigma1), i2 = 1.0 / (sigma2 * sigma2);
    const double a = ct * ct * i1 + st * st * i2;
    const double b = ct * st * (i1 - i2);
    const double d = st * st * i1 + ct * ct * i2;
    double sum = 0.0;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double dy = y - c, dx = x - c;
            const double q = a * dx * dx + 2.0 * b * dx * dy + d * dy * dy;
            const double v = std::exp(-0.5 * q);
            k.weights[static_cast<int64_t>(y) * size + x] = static_cast<T>(v);
            sum += v;
        }
    for (int64_t i = 0; i < k.weights.size(); ++i) k.weights[i] = static_cast<T>(k.weights[i] / sum);
    return k;
}

template <typename T = float>
BlurKernelT<T> make_kernel(const DegradationSpec& spec) {
    switch (spec.kernel_type) {
        case KernelType::none: return make_isotropic_kernel<T>(0.0, spec.kernel_size);
        case KernelType::isotropic: return make_isotropic_kernel<T>(spec.width, spec.kernel_size);
        case KernelType::anisotropic:
            return make_anisotropic_kernel<T>(spec.sigma1, spec.sigma2, spec.theta, spec.kernel_size);
    }
    throw ConfigError("unreachable kernel type");
}

/// Per-channel convolution with reflect padding.
template <typename T>
ImageT<T> blur_image(const ImageT<T>& in, const BlurKernelT<T>& k) {
    ImageT<T> out(in.h, in.w);
    const int r = k.size / 2;
    auto reflect = [](int i, int n) {
        if (n == 1) return 0;
        const int period = 2 * (n - 1);
        i = ((i % period) + period) % period;
        return i < n ? i : period - i;
    };
    for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < in.w; ++x) {
            T acc[3] = {T(0), T(0), T(0)};
            for (int dy = -r; dy <= r; ++dy) {
                const int sy = reflect(y + dy, in.h);
                for (int dx = -r; dx <= r; ++dx) {
                    const int sx = reflect(x + dx, in.w);
                    const T wv = k.at(dy + r, dx + r);
                    if (wv == T(0)) continue;
                    for (int c = 0; c < 3; ++c) acc[c] += wv * in.at(sy, sx, c);
                }
            }
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = acc[c];
        }
    return out;
}

/// Eq-style LR synthesis: blur -> bicubic downsample -> additive noise,
/// clamped to [0,1]. HR dims are cropped (top-left) to multiples of scale.
/// A spec of {kernel none, scale 1, noise 0} is the exact identity.
template <typename T>
ImageT<T> degrade(const ImageT<T>& hr, const DegradationSpec& spec) {
    spec.validate();
    const int s = spec.scale;
    ImageT<T> work = hr;
    if (hr.h % s || hr.w % s) work = crop_image(hr, 0, 0, hr.h - hr.h % s, hr.w - hr.w % s);
    if (work.h < s || work.w < s) throw ConfigError("degrade: image smaller than scale");

    const bool skip_blur = spec.kernel_type == KernelType::none ||
                           (spec.kernel_type == KernelType::isotropic && spec.width == 0.0);
    if (!skip_blur) work = blur_image(work, make_kernel<T>(spec));

    if (s > 1) work = resize_bicubic(work, work.h / s, work.w / s);
    if (work.h * s != (hr.h - hr.h % s) || work.w * s != (hr.w - hr.w % s))
        throw NumericError("degrade: inconsistent LR dims");

    if (spec.noise_level > 0.0) {
        Rng rng(spec.rng_seed);
        const T n_std = static_cast<T>(spec.noise_level / 255.0);
        for (auto& v : work.px) v += n_std * static_cast<T>(rng.normal());
    }
    work.clamp01();
    return work;
}

// ---------------------------------------------------------------------------
// evaluation protocol grids
// ---------------------------------------------------------------------------

struct AnisoTriple {
    double sigma1, sigma2, theta;
};

/// All protocol constants in one place; configs/protocols.json carries the
/// same values in human-readable form and the eval CLI can load overrides.
struct ProtocolTable {
    std::vector<double> iso_widths_x2 = {0.0, 0.6, 1.2, 1.8};
    std::vector<double> iso_widths_x3 = {0.0, 0.8, 1.6, 2.4};
    std::vector<double> iso_widths_x4 = {0.0, 1.2, 2.4, 3.6};
    std::vector<AnisoTriple> aniso_kernels = {
        {0.6, 0.4, 0.0},    {1.0, 0.6, 0.7854}, {1.4, 0.8, 1.5708},
        {1.8, 1.0, 2.3562}, {2.2, 1.2, 0.3927}, {2.6, 1.4, 1.1781},
        {3.0, 1.6, 1.9635}, {3.4, 1.8, 2.7489}, {4.0, 2.0, 0.5890},
    };
    std::vector<double> noise_levels = {0.0, 5.0, 10.0};
    int kernel_size = 21;

    const std::vector<double>& iso_widths(int scale) const {
        switch (scale) {
            case 2: return iso_widths_x2;
            case 3: return iso_widths_x3;
            case 4: return iso_widths_x4;
        }
        throw ConfigError("isotropic protocol: unsupported scale " + std::to_string(scale));
    }
};

inline const ProtocolTable& default_protocol_table() {
    static const ProtocolTable table;
    return table;
}

/// "isotropic_noisefree": the per-scale width sweep. "general": 9 anisotropic
/// kernels x noise levels {0,5,10}.
inline std::vector<DegradationSpec> make_protocol_grid(const std::string& protocol, int scale,
                                                       const ProtocolTable& table = default_protocol_table()) {
    std::vector<DegradationSpec> grid;
    if (protocol == "isotropic_noisefree") {
        for (double w : table.iso_widths(scale)) {
            DegradationSpec s;
            s.kernel_type = KernelType::isotropic;
            s.width = w;
            s.kernel_size = table.kernel_size;
            s.scale = scale;
            grid.push_back(s);
        }
    } else if (protocol == "general") {
        for (const auto& k : table.aniso_kernels)
            for (double n : table.noise_levels) {
                DegradationSpec s;
                s.kernel_type = KernelType::anisotropic;
                s.sigma1 = k.sigma1;
                s.sigma2 = k.sigma2;
                s.theta = k.theta;
                s.kernel_size = table.kernel_size;
                s.scale = scale;
                s.noise_level = n;
                grid.push_back(s);
            }
    } else {
        throw ConfigError("unknown protocol: " + protocol);
    }
    return grid;
}

} // namespace cdformer

#endif
