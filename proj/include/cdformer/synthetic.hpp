// SPDX-License-Identifier: Apache-2.0
#ifndef CDFORMER_SYNTHETIC_HPP
#define CDFORMER_SYNTHETIC_HPP

#include <cmath>

#include "cdformer/image.hpp"
#include "cdformer/rng.hpp"

namespace cdformer {

/// Structured synthetic probe image: gradient background, a few sinusoidal
/// gratings and soft shapes. Compressible content that a small SR net can
/// memorize, with enough edges that plain bicubic stays mediocre. Used as
/// the built-in data source for desk-scale runs and tests.
template <typename T = float>
ImageT<T> make_probe_image(uint64_t seed, int h, int w) {
    Rng rng(derive_seed(seed, "probe-image"));
    ImageT<T> img(h, w);

    const double gx = rng.uniform(-0.3, 0.3), gy = rng.uniform(-0.3, 0.3);
    double base[3];
    for (auto& b : base) b = rng.uniform(0.25, 0.75);

    struct Grating {
        double fx, fy, phase, amp;
        int ch;
    };
    Grating gratings[3];
    for (auto& g : gratings) {
        const double freq = rng.uniform(0.04, 0.16); // cycles/px, below LR Nyquist at x4
        const double ang = rng.uniform(0.0, 3.14159);
        g = {freq * std::cos(ang), freq * std::sin(ang), rng.uniform(0.0, 6.28), rng.uniform(0.08, 0.2),
             rng.uniform_int(3)};
    }
    struct Disk {
        double cx, cy, r, soft, col[3];
    };
    Disk disks[4];
    for (auto& d : disks) {
        d.cx = rng.uniform(0.1, 0.9) * w;
        d.cy = rng.uniform(0.1, 0.9) * h;
        d.r = rng.uniform(0.08, 0.25) * std::min(h, w);
        d.soft = rng.uniform(0.8, 2.5);
        for (auto& c : d.col) c = rng.uniform(0.1, 0.9);
    }

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double px[3];
            for (int c = 0; c < 3; ++c) px[c] = base[c] + gx * (double(x) / w - 0.5) + gy * (double(y) / h - 0.5);
            for (const auto& g : gratings)
                px[g.ch] += g.amp * std::sin(6.28318530718 * (g.fx * x + g.fy * y) + g.phase);
            for (const auto& d : disks) {
                const double dist = std::hypot(x - d.cx, y - d.cy);
                const double m = 1.0 / (1.0 + std::exp((dist - d.r) / d.soft));
                for (int c = 0; c < 3; ++c) px[c] = (1.0 - 0.85 * m) * px[c] + 0.85 * m * d.col[c];
            }
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<T>(std::min(1.0, std::max(0.0, px[c])));
        }
    return img;
}

template <typename T = float>
ImageT<T> make_noise_image(uint64_t seed, int h, int w) {
    Rng rng(derive_seed(seed, "noise-image"));
    ImageT<T> img(h, w);
    for (auto& v : img.px) v = static_cast<T>(rng.uniform());
    return img;
}

} // namespace cdformer

#endif
