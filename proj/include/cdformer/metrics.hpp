// SPDX-License-Identifier: Apache-2.0
//
// PSNR / SSIM. PSNR honors the configured color space (luminance by
// default, the SR-literature convention) and crops a border before scoring;
// SSIM is the original windowed formulation on the luminance channel.
#ifndef CDFORMER_METRICS_HPP
#define CDFORMER_METRICS_HPP

#include <cmath>
#include <string>
#include <vector>

#include "cdformer/image.hpp"

namespace cdformer {

enum class MetricSpace { y, rgb };

inline MetricSpace metric_space_from(const std::string& s) {
    if (s == "y") return MetricSpace::y;
    if (s == "rgb") return MetricSpace::rgb;
    throw ConfigError("metric space must be y|rgb, got " + s);
}

inline std::string metric_space_name(MetricSpace m) { return m == MetricSpace::y ? "y" : "rgb"; }

constexpr double kPsnrCap = 100.0; // identical images

/// 10*log10(1/MSE) over [0,1] data after cropping `border` pixels per side.
template <typename T>
double psnr(const ImageT<T>& a, const ImageT<T>& b, int border = 0, MetricSpace space = MetricSpace::y) {
    if (a.h != b.h || a.w != b.w) throw ConfigError("psnr: image dims differ");
    if (a.h <= 2 * border || a.w <= 2 * border) throw ConfigError("psnr: border crop leaves nothing");
    double mse = 0.0;
    int64_t n = 0;
    if (space == MetricSpace::rgb) {
        for (int y = border; y < a.h - border; ++y)
            for (int x = border; x < a.w - border; ++x)
                for (int c = 0; c < 3; ++c) {
                    const double d = double(a.at(y, x, c)) - double(b.at(y, x, c));
                    mse += d * d;
                    n += 1;
                }
    } else {
        auto ya = to_luma(a);
        auto yb = to_luma(b);
        for (int y = border; y < a.h - border; ++y)
            for (int x = border; x < a.w - border; ++x) {
                const double d = double(ya[static_cast<size_t>(y) * a.w + x]) -
                                 double(yb[static_cast<size_t>(y) * a.w + x]);
                mse += d * d;
                n += 1;
            }
    }
    mse /= static_cast<double>(n);
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline const std::vector<double>& ssim_window() {
    // 11x11 Gaussian, sigma 1.5, normalized
    static const std::vector<double> w = [] {
        std::vector<double> k(121);
        double sum = 0.0;
        for (int y = 0; y < 11; ++y)
            for (int x = 0; x < 11; ++x) {
                const double dy = y - 5, dx = x - 5;
                const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5));
                k[static_cast<size_t>(y) * 11 + x] = v;
                sum += v;
            }
        for (auto& v : k) v /= sum;
        return k;
    }();
    return w;
}

} // namespace detail

/// Classic single-scale SSIM on the luminance channel: 11x11 Gaussian
/// window (sigma 1.5), C1=(0.01)^2, C2=(0.03)^2 over [0,1] data, averaged
/// over valid window positions.
template <typename T>
double ssim(const ImageT<T>& a, const ImageT<T>& b) {
    if (a.h != b.h || a.w != b.w) throw ConfigError("ssim: image dims differ");
    if (a.h < 11 || a.w < 11) throw ConfigError("ssim: images smaller than the 11x11 window");
    const auto ya = to_luma(a);
    const auto yb = to_luma(b);
    const auto& win = detail::ssim_window();
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double acc = 0.0;
    int64_t count = 0;
    for (int y = 0; y + 11 <= a.h; ++y)
        for (int x = 0; x + 11 <= a.w; ++x) {
            double mu_a = 0, mu_b = 0;
            for (int dy = 0; dy < 11; ++dy)
                for (int dx = 0; dx < 11; ++dx) {
                    const double wv = win[static_cast<size_t>(dy) * 11 + dx];
                    mu_a += wv * ya[static_cast<size_t>(y + dy) * a.w + (x + dx)];
                    mu_b += wv * yb[static_cast<size_t>(y + dy) * a.w + (x + dx)];
                }
            double va = 0, vb = 0, cov = 0;
            for (int dy = 0; dy < 11; ++dy)
                for (int dx = 0; dx < 11; ++dx) {
                    const double wv = win[static_cast<size_t>(dy) * 11 + dx];
                    const double da = ya[static_cast<size_t>(y + dy) * a.w + (x + dx)] - mu_a;
                    const double db = yb[static_cast<size_t>(y + dy) * a.w + (x + dx)] - mu_b;
                    va += wv * da * da;
                    vb += wv * db * db;
                    cov += wv * da * db;
                }
            acc += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                   ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
            ++count;
        }
    return acc / static_cast<double>(count);
}

/// Cosine similarity of two flat vectors (prior diagnostics).
template <typename T>
double cosine_similarity(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.size() != b.size()) throw ConfigError("cosine_similarity: length mismatch");
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.size(); ++i) {
        dot += double(a[i]) * double(b[i]);
        na += double(a[i]) * double(a[i]);
        nb += double(b[i]) * double(b[i]);
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace cdformer

#endif
