// SPDX-License-Identifier: Apache-2.0
//
// Independent PSNR/SSIM implementations for cross-checking: separable
// window construction, plain accumulation loops, no shared code with the
// library's metric path.
#ifndef CDFORMER_TESTS_REFERENCE_METRICS_HPP
#define CDFORMER_TESTS_REFERENCE_METRICS_HPP

#include <cmath>
#include <vector>

#include "cdformer/image.hpp"

namespace cdformer::testing {

template <typename T>
std::vector<double> ref_luma(const ImageT<T>& img) {
    std::vector<double> y(static_cast<size_t>(img.h) * img.w);
    for (int i = 0; i < img.h * img.w; ++i) {
        const double r = img.px[static_cast<size_t>(i) * 3];
        const double g = img.px[static_cast<size_t>(i) * 3 + 1];
        const double b = img.px[static_cast<size_t>(i) * 3 + 2];
        y[static_cast<size_t>(i)] = (16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0;
    }
    return y;
}

template <typename T>
double ref_psnr(const ImageT<T>& a, const ImageT<T>& b, int border, bool rgb) {
    double se = 0.0;
    long n = 0;
    if (rgb) {
        for (int y = border; y < a.h - border; ++y)
            for (int x = border; x < a.w - border; ++x)
                for (int c = 0; c < 3; ++c) {
                    const double d = double(a.at(y, x, c)) - double(b.at(y, x, c));
                    se += d * d;
                    ++n;
                }
    } else {
        auto ya = ref_luma(a), yb = ref_luma(b);
        for (int y = border; y < a.h - border; ++y)
            for (int x = border; x < a.w - border; ++x) {
                const double d = ya[static_cast<size_t>(y) * a.w + x] - yb[static_cast<size_t>(y) * a.w + x];
                se += d * d;
                ++n;
            }
    }
    const double mse = se / n;
    if (mse <= 0.0) return 100.0;
    return std::min(100.0, -10.0 * std::log10(mse));
}

template <typename T>
double ref_ssim(const ImageT<T>& a, const ImageT<T>& b) {
    // separable 1-D Gaussian taps, sigma 1.5
    double g1[11];
    double s = 0;
    for (int i = 0; i < 11; ++i) {
        g1[i] = std::exp(-(i - 5.0) * (i - 5.0) / 4.5);
        s += g1[i];
    }
    for (double& v : g1) v /= s;
    auto ya = ref_luma(a), yb = ref_luma(b);
    const double C1 = 1e-4, C2 = 9e-4;
    double total = 0;
    long cnt = 0;
    for (int y = 0; y + 11 <= a.h; ++y)
        for (int x = 0; x + 11 <= a.w; ++x) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int dy = 0; dy < 11; ++dy)
                for (int dx = 0; dx < 11; ++dx) {
                    const double w = g1[dy] * g1[dx];
                    const double va = ya[static_cast<size_t>(y + dy) * a.w + x + dx];
                    const double vb = yb[static_cast<size_t>(y + dy) * a.w + x + dx];
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            const double var_a = saa - ma * ma;
            const double var_b = sbb - mb * mb;
            const double cov = sab - ma * mb;
            total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2));
            ++cnt;
        }
    return total / cnt;
}

} // namespace cdformer::testing

#endif
