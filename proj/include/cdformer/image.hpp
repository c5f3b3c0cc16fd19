// SPDX-License-Identifier: Apache-2.0
#ifndef CDFORMER_IMAGE_HPP
#define CDFORMER_IMAGE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cdformer/tensor.hpp"

namespace cdformer {

/// RGB image with intensities in [0,1], row-major, channel interleaved.
template <typename T>
struct ImageT {
    int h = 0, w = 0;
    std::vector<T> px; // h*w*3

    ImageT() = default;
    ImageT(int height, int width) : h(height), w(width), px(static_cast<size_t>(height) * width * 3, T(0)) {}

    T& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
    const T& at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }

    int64_t size() const { return static_cast<int64_t>(px.size()); }

    void clamp01() {
        for (auto& v : px) v = std::min(T(1), std::max(T(0), v));
    }

    template <typename U>
    ImageT<U> cast() const {
        ImageT<U> out(h, w);
        for (size_t i = 0; i < px.size(); ++i) out.px[i] = static_cast<U>(px[i]);
        return out;
    }

    Tensor<T> to_tensor() const {
        Tensor<T> t({h, w, 3});
        std::copy(px.begin(), px.end(), t.data());
        return t;
    }

    static ImageT from_tensor(const Tensor<T>& t) {
        if (t.rank() != 3 || t.dim(2) != 3) throw ConfigError("from_tensor: want [H,W,3]");
        ImageT out(t.dim(0), t.dim(1));
        std::copy(t.data(), t.data() + t.size(), out.px.begin());
        return out;
    }
};

using Image = ImageT<float>;

namespace resample {

/// Catmull-Rom style cubic, a = -0.5 (the classic bicubic kernel).
template <typename T>
T cubic_weight(T x) {
    const T a = T(-0.5);
    x = std::abs(x);
    if (x <= T(1)) return ((a + T(2)) * x - (a + T(3))) * x * x + T(1);
    if (x < T(2)) return ((a * x - T(5) * a) * x + T(8) * a) * x - T(4) * a;
    return T(0);
}

/// Tap weights for one output coordinate. Convention: source position
/// src = (dst + 0.5) * (in/out) - 0.5; when shrinking, the kernel support is
/// widened by the scale ratio (antialiasing); taps clamp to the edge;
/// weights are normalized to sum to 1.
template <typename T>
void cubic_taps(int dst, int in_size, double ratio, std::vector<int>& idx, std::vector<T>& wts) {
    const double support_scale = std::max(1.0, ratio);
    const double center = (dst + 0.5) * ratio - 0.5;
    const int lo = static_cast<int>(std::floor(center - 2.0 * support_scale)) + 1;
    const int hi = static_cast<int>(std::floor(center + 2.0 * support_scale));
    idx.clear();
    wts.clear();
    T sum = T(0);
    for (int i = lo; i <= hi; ++i) {
        const T wv = cubic_weight(static_cast<T>((center - i) / support_scale));
        if (wv == T(0)) continue;
        idx.push_back(std::clamp(i, 0, in_size - 1));
        wts.push_back(wv);
        sum += wv;
    }
    for (auto& wv : wts) wv /= sum;
}

} // namespace resample

/// Bicubic resize to an arbitrary size, separable two-pass implementation.
template <typename T>
ImageT<T> resize_bicubic(const ImageT<T>& in, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw ConfigError("resize_bicubic: bad output size");
    const double rx = static_cast<double>(in.w) / out_w;
    const double ry = static_cast<double>(in.h) / out_h;

    // horizontal pass
    ImageT<T> mid(in.h, out_w);
    std::vector<int> idx;
    std::vector<T> wts;
    for (int x = 0; x < out_w; ++x) {
        resample::cubic_taps(x, in.w, rx, idx, wts);
        for (int y = 0; y < in.h; ++y)
            for (int c = 0; c < 3; ++c) {
                T acc = T(0);
                for (size_t k = 0; k < idx.size(); ++k) acc += wts[k] * in.at(y, idx[k], c);
                mid.at(y, x, c) = acc;
            }
    }
    // vertical pass
    ImageT<T> out(out_h, out_w);
    for (int y = 0; y < out_h; ++y) {
        resample::cubic_taps(y, in.h, ry, idx, wts);
        for (int x = 0; x < out_w; ++x)
            for (int c = 0; c < 3; ++c) {
                T acc = T(0);
                for (size_t k = 0; k < idx.size(); ++k) acc += wts[k] * mid.at(idx[k], x, c);
                out.at(y, x, c) = acc;
            }
    }
    return out;
}

template <typename T>
ImageT<T> resize_bicubic_scale(const ImageT<T>& in, double scale) {
    return resize_bicubic(in, static_cast<int>(std::lround(in.h * scale)), static_cast<int>(std::lround(in.w * scale)));
}

/// BT.601 luminance as used by the SR literature: for inputs in [0,1],
/// y = (65.481 r + 128.553 g + 24.966 b + 16) / 255.
template <typename T>
std::vector<T> to_luma(const ImageT<T>& img) {
    std::vector<T> y(static_cast<size_t>(img.h) * img.w);
    for (int i = 0; i < img.h * img.w; ++i) {
        const T r = img.px[static_cast<size_t>(i) * 3];
        const T g = img.px[static_cast<size_t>(i) * 3 + 1];
        const T b = img.px[static_cast<size_t>(i) * 3 + 2];
        y[static_cast<size_t>(i)] = (T(65.481) * r + T(128.553) * g + T(24.966) * b + T(16)) / T(255);
    }
    return y;
}

template <typename T>
ImageT<T> crop_image(const ImageT<T>& in, int top, int left, int oh, int ow) {
    if (top + oh > in.h || left + ow > in.w) throw ConfigError("crop_image: out of range");
    ImageT<T> out(oh, ow);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = in.at(top + y, left + x, c);
    return out;
}

} // namespace cdformer

#endif
