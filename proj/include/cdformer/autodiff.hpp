// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff on dense tensors. Ops build a dynamic graph of
// shared_ptr nodes; backward() walks it once in reverse topological order.
// Everything is templated on the scalar type so training runs in float and
// gradient checks run in double.
#ifndef CDFORMER_AUTODIFF_HPP
#define CDFORMER_AUTODIFF_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cdformer/tensor.hpp"

namespace cdformer {
namespace ag {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using CMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using StridedMap = Eigen::Map<Mat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const Mat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad; // allocated on demand during backward
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backprop;
    bool requires_grad = false;
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return n;
}

template <typename T>
Var<T> parameter(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return n;
}

template <typename T>
void ensure_grad(Node<T>& n) {
    if (n.grad.size() != n.value.size()) n.grad = Tensor<T>(n.value.shape());
}

template <typename T>
void zero_grad(const Var<T>& p) {
    p->grad = Tensor<T>();
}

namespace detail {

template <typename T>
Var<T> make(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> back) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) n->backprop = std::move(back);
    return n;
}

template <typename T>
void topo_order(const Var<T>& root, std::vector<Node<T>*>& order) {
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

} // namespace detail

/// Backpropagate from a scalar root. Gradients accumulate into .grad of every
/// node with requires_grad, including parameters from previous calls until
/// zero_grad is used.
template <typename T>
void backward(const Var<T>& root) {
    if (root->value.size() != 1)
        throw NumericError("backward: root must be scalar, got " + root->value.shape_str());
    if (!root->requires_grad) return;
    std::vector<Node<T>*> order;
    detail::topo_order(root, order);
    ensure_grad(*root);
    root->grad[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backprop) {
            ensure_grad(*n);
            n->backprop(*n);
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a->value, b->value, "add");
    Tensor<T> v(a->value.shape());
    for (int64_t i = 0; i < v.size(); ++i) v[i] = a->value[i] + b->value[i];
    return detail::make<T>(std::move(v), {a, b}, [](Node<T>& n) {
        for (int k = 0; k < 2; ++k) {
            auto& p = n.parents[k];
            if (!p->requires_grad) continue;
            ensure_grad(*p);
            for (int64_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a->value, b->value, "sub");
    Tensor<T> v(a->value.shape());
    for (int64_t i = 0; i < v.size(); ++i) v[i] = a->value[i] - b->value[i];
    return detail::make<T>(std::move(v), {a, b}, [](Node<T>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        if (a->requires_grad) {
            ensure_grad(*a);
            for (int64_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            for (int64_t i = 0; i < n.grad.size(); ++i) b->grad[i] -= n.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a->value, b->value, "mul");
    Tensor<T> v(a->value.shape());
    for (int64_t i = 0; i < v.size(); ++i) v[i] = a->value[i] * b->value[i];
    return detail::make<T>(std::move(v), {a, b}, [](Node<T>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        if (a->requires_grad) {
            ensure_grad(*a);
            for (int64_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            for (int64_t i = 0; i < n.grad.size(); ++i) b->grad[i] += n.grad[i] * a->value[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    Tensor<T> v(a->value.shape());
    for (int64_t i = 0; i < v.size(); ++i) v[i] = s * a->value[i];
    return detail::make<T>(std::move(v), {a}, [s](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int64_t i = 0; i < n.grad.size(); ++i) a->grad[i] += s * n.grad[i];
    });
}

/// sa*a + sb*b with constant coefficients; the workhorse of the reverse
/// diffusion chain.
template <typename T>
Var<T> axpby(T sa, const Var<T>& a, T sb, const Var<T>& b) {
    check_same_shape(a->value, b->value, "axpby");
    Tensor<T> v(a->value.shape());
    for (int64_t i = 0; i < v.size(); ++i) v[i] = sa * a->value[i] + sb * b->value[i];
    return detail::make<T>(std::move(v), {a, b}, [sa, sb](Node<T>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        if (a->requires_grad) {
            ensure_grad(*a);
            for (int64_t i = 0; i < n.grad.size(); ++i) a->grad[i] += sa * n.grad[i];
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            for (int64_t i = 0; i < n.grad.size(); ++i) b->grad[i] += sb * n.grad[i];
        }
    });
}

template <typename T>
Var<T> exp_of(const Var<T>& a) {
    Tensor<T> v(a->value.shape());
    for (int64_t i = 0; i < v.size(); ++i) v[i] = std::exp(a->value[i]);
    return detail::make<T>(std::move(v), {a}, [](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int64_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i] * n.value[i];
    });
}

template <typename T>
Var<T> gelu(const Var<T>& a) {
    Tensor<T> v(a->value.shape());
    const T inv_sqrt2 = T(0.7071067811865475244);
    for (int64_t i = 0; i < v.size(); ++i) {
        const T x = a->value[i];
        v[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    }
    return detail::make<T>(std::move(v), {a}, [inv_sqrt2](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        const T inv_sqrt2pi = T(0.3989422804014326779);
        for (int64_t i = 0; i < n.grad.size(); ++i) {
            const T x = a->value[i];
            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
            a->grad[i] += n.grad[i] * (cdf + x * pdf);
        }
    });
}

template <typename T>
Var<T> leaky_relu(const Var<T>& a, T slope) {
    Tensor<T> v(a->value.shape());
    for (int64_t i = 0; i < v.size(); ++i) {
        const T x = a->value[i];
        v[i] = x > T(0) ? x : slope * x;
    }
    return detail::make<T>(std::move(v), {a}, [slope](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int64_t i = 0; i < n.grad.size(); ++i)
            a->grad[i] += n.grad[i] * (a->value[i] > T(0) ? T(1) : slope);
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    Tensor<T> v(a->value.shape());
    for (int64_t i = 0; i < v.size(); ++i) v[i] = T(1) / (T(1) + std::exp(-a->value[i]));
    return detail::make<T>(std::move(v), {a}, [](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int64_t i = 0; i < n.grad.size(); ++i) {
            const T y = n.value[i];
            a->grad[i] += n.grad[i] * y * (T(1) - y);
        }
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, std::vector<int> shape) {
    if (Tensor<T>::count(shape) != a->value.size())
        throw ConfigError("reshape: size mismatch " + a->value.shape_str());
    Tensor<T> v(std::move(shape));
    std::copy(a->value.data(), a->value.data() + a->value.size(), v.data());
    return detail::make<T>(std::move(v), {a}, [](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int64_t i = 0; i < n.grad.size(); ++i) a->grad[i] += n.grad[i];
    });
}

template <typename T>
Var<T> concat_last(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a->value.shape();
    const auto& sb = b->value.shape();
    if (sa.size() != sb.size() || sa.empty())
        throw ConfigError("concat_last: rank mismatch");
    for (size_t i = 0; i + 1 < sa.size(); ++i)
        if (sa[i] != sb[i]) throw ConfigError("concat_last: leading dims mismatch");
    const int ca = sa.back(), cb = sb.back();
    std::vector<int> shape(sa);
    shape.back() = ca + cb;
    Tensor<T> v(shape);
    const int64_t rows = a->value.size() / ca;
    for (int64_t r = 0; r < rows; ++r) {
        std::copy(a->value.data() + r * ca, a->value.data() + (r + 1) * ca, v.data() + r * (ca + cb));
        std::copy(b->value.data() + r * cb, b->value.data() + (r + 1) * cb, v.data() + r * (ca + cb) + ca);
    }
    return detail::make<T>(std::move(v), {a, b}, [ca, cb, rows](Node<T>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        if (a->requires_grad) ensure_grad(*a);
        if (b->requires_grad) ensure_grad(*b);
        for (int64_t r = 0; r < rows; ++r) {
            const T* g = n.grad.data() + r * (ca + cb);
            if (a->requires_grad)
                for (int i = 0; i < ca; ++i) a->grad[r * ca + i] += g[i];
            if (b->requires_grad)
                for (int i = 0; i < cb; ++i) b->grad[r * cb + i] += g[ca + i];
        }
    });
}

/// [H,W,C] -> [H/s, W/s, C*s*s]; channel index c*s*s + dy*s + dx.
template <typename T>
Var<T> pixel_unshuffle(const Var<T>& a, int s) {
    const auto& sh = a->value.shape();
    if (sh.size() != 3) throw ConfigError("pixel_unshuffle: want rank-3, got " + a->value.shape_str());
    const int H = sh[0], W = sh[1], C = sh[2];
    if (s < 1 || H % s || W % s)
        throw ConfigError("pixel_unshuffle: dims not divisible by scale");
    const int oh = H / s, ow = W / s, oc = C * s * s;
    Tensor<T> v({oh, ow, oc});
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
            for (int c = 0; c < C; ++c)
                for (int dy = 0; dy < s; ++dy)
                    for (int dx = 0; dx < s; ++dx)
                        v.at(y, x, c * s * s + dy * s + dx) = a->value.at(y * s + dy, x * s + dx, c);
    return detail::make<T>(std::move(v), {a}, [s, oh, ow, C](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x)
                for (int c = 0; c < C; ++c)
                    for (int dy = 0; dy < s; ++dy)
                        for (int dx = 0; dx < s; ++dx)
                            a->grad.at(y * s + dy, x * s + dx, c) += n.grad.at(y, x, c * s * s + dy * s + dx);
    });
}

/// [H,W,C*s*s] -> [H*s, W*s, C]; inverse of pixel_unshuffle.
template <typename T>
Var<T> pixel_shuffle(const Var<T>& a, int s) {
    const auto& sh = a->value.shape();
    if (sh.size() != 3) throw ConfigError("pixel_shuffle: want rank-3");
    const int H = sh[0], W = sh[1], Cs = sh[2];
    if (s < 1 || Cs % (s * s)) throw ConfigError("pixel_shuffle: channels not divisible by s^2");
    const int C = Cs / (s * s);
    Tensor<T> v({H * s, W * s, C});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c)
                for (int dy = 0; dy < s; ++dy)
                    for (int dx = 0; dx < s; ++dx)
                        v.at(y * s + dy, x * s + dx, c) = a->value.at(y, x, c * s * s + dy * s + dx);
    return detail::make<T>(std::move(v), {a}, [s, H, W, C](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < C; ++c)
                    for (int dy = 0; dy < s; ++dy)
                        for (int dx = 0; dx < s; ++dx)
                            a->grad.at(y, x, c * s * s + dy * s + dx) += n.grad.at(y * s + dy, x * s + dx, c);
    });
}

namespace detail {
inline int reflect_index(int i, int n) {
    // np.pad 'reflect': ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i = ((i % period) + period) % period;
    return i < n ? i : period - i;
}
} // namespace detail

template <typename T>
Var<T> pad_reflect(const Var<T>& a, int top, int bottom, int left, int right) {
    const auto& sh = a->value.shape();
    if (sh.size() != 3) throw ConfigError("pad_reflect: want rank-3");
    const int H = sh[0], W = sh[1], C = sh[2];
    const int oh = H + top + bottom, ow = W + left + right;
    Tensor<T> v({oh, ow, C});
    for (int y = 0; y < oh; ++y) {
        const int sy = detail::reflect_index(y - top, H);
        for (int x = 0; x < ow; ++x) {
            const int sx = detail::reflect_index(x - left, W);
            for (int c = 0; c < C; ++c) v.at(y, x, c) = a->value.at(sy, sx, c);
        }
    }
    return detail::make<T>(std::move(v), {a}, [top, left, H, W, C, oh, ow](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int y = 0; y < oh; ++y) {
            const int sy = detail::reflect_index(y - top, H);
            for (int x = 0; x < ow; ++x) {
                const int sx = detail::reflect_index(x - left, W);
                for (int c = 0; c < C; ++c) a->grad.at(sy, sx, c) += n.grad.at(y, x, c);
            }
        }
    });
}

template <typename T>
Var<T> crop(const Var<T>& a, int top, int left, int oh, int ow) {
    const auto& sh = a->value.shape();
    if (sh.size() != 3) throw ConfigError("crop: want rank-3");
    const int C = sh[2];
    if (top + oh > sh[0] || left + ow > sh[1]) throw ConfigError("crop: out of range");
    Tensor<T> v({oh, ow, C});
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x)
            for (int c = 0; c < C; ++c) v.at(y, x, c) = a->value.at(top + y, left + x, c);
    return detail::make<T>(std::move(v), {a}, [top, left, oh, ow, C](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x)
                for (int c = 0; c < C; ++c) a->grad.at(top + y, left + x, c) += n.grad.at(y, x, c);
    });
}

/// [H,W,C] -> [nW, wh*ww, C] with windows in row-major block order and
/// tokens row-major inside each window. Dims must already be multiples.
template <typename T>
Var<T> window_partition(const Var<T>& a, int wh, int ww) {
    const auto& sh = a->value.shape();
    if (sh.size() != 3) throw ConfigError("window_partition: want rank-3");
    const int H = sh[0], W = sh[1], C = sh[2];
    if (H % wh || W % ww) throw ConfigError("window_partition: dims not multiples of window");
    const int by = H / wh, bx = W / ww, nw = by * bx, t = wh * ww;
    Tensor<T> v({nw, t, C});
    for (int w = 0; w < nw; ++w) {
        const int oy = (w / bx) * wh, ox = (w % bx) * ww;
        for (int ti = 0; ti < t; ++ti) {
            const int y = oy + ti / ww, x = ox + ti % ww;
            T* dst = v.data() + (static_cast<int64_t>(w) * t + ti) * C;
            const T* src = a->value.data() + (static_cast<int64_t>(y) * W + x) * C;
            std::copy(src, src + C, dst);
        }
    }
    return detail::make<T>(std::move(v), {a}, [wh, ww, W, bx, nw, t, C](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int w = 0; w < nw; ++w) {
            const int oy = (w / bx) * wh, ox = (w % bx) * ww;
            for (int ti = 0; ti < t; ++ti) {
                const int y = oy + ti / ww, x = ox + ti % ww;
                const T* g = n.grad.data() + (static_cast<int64_t>(w) * t + ti) * C;
                T* dst = a->grad.data() + (static_cast<int64_t>(y) * W + x) * C;
                for (int c = 0; c < C; ++c) dst[c] += g[c];
            }
        }
    });
}

template <typename T>
Var<T> window_merge(const Var<T>& a, int H, int W, int wh, int ww) {
    const auto& sh = a->value.shape();
    if (sh.size() != 3) throw ConfigError("window_merge: want rank-3");
    const int nw = sh[0], t = sh[1], C = sh[2];
    const int by = H / wh, bx = W / ww;
    if (H % wh || W % ww || nw != by * bx || t != wh * ww)
        throw ConfigError("window_merge: inconsistent dims");
    Tensor<T> v({H, W, C});
    for (int w = 0; w < nw; ++w) {
        const int oy = (w / bx) * wh, ox = (w % bx) * ww;
        for (int ti = 0; ti < t; ++ti) {
            const int y = oy + ti / ww, x = ox + ti % ww;
            const T* src = a->value.data() + (static_cast<int64_t>(w) * t + ti) * C;
            T* dst = v.data() + (static_cast<int64_t>(y) * W + x) * C;
            std::copy(src, src + C, dst);
        }
    }
    return detail::make<T>(std::move(v), {a}, [wh, ww, W, bx, nw, t, C](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        for (int w = 0; w < nw; ++w) {
            const int oy = (w / bx) * wh, ox = (w % bx) * ww;
            for (int ti = 0; ti < t; ++ti) {
                const int y = oy + ti / ww, x = ox + ti % ww;
                const T* g = n.grad.data() + (static_cast<int64_t>(y) * W + x) * C;
                T* dst = a->grad.data() + (static_cast<int64_t>(w) * t + ti) * C;
                for (int c = 0; c < C; ++c) dst[c] += g[c];
            }
        }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const auto& sa = a->value.shape();
    const auto& sb = b->value.shape();
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
        throw ConfigError("matmul: bad shapes " + a->value.shape_str() + " x " + b->value.shape_str());
    const int m = sa[0], k = sa[1], n = sb[1];
    Tensor<T> v({m, n});
    CMatMap<T>(a->value.data(), m, k);
    MatMap<T>(v.data(), m, n).noalias() =
        CMatMap<T>(a->value.data(), m, k) * CMatMap<T>(b->value.data(), k, n);
    return detail::make<T>(std::move(v), {a, b}, [m, k, n](Node<T>& node) {
        auto& a = node.parents[0];
        auto& b = node.parents[1];
        CMatMap<T> g(node.grad.data(), m, n);
        if (a->requires_grad) {
            ensure_grad(*a);
            MatMap<T>(a->grad.data(), m, k).noalias() += g * CMatMap<T>(b->value.data(), k, n).transpose();
        }
        if (b->requires_grad) {
            ensure_grad(*b);
            MatMap<T>(b->grad.data(), k, n).noalias() += CMatMap<T>(a->value.data(), m, k).transpose() * g;
        }
    });
}

/// x @ w (+ b). x may be any rank >= 1; all leading dims are treated as rows
/// and the last dim must equal w's input size. Pass b = nullptr for no bias.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const auto& sx = x->value.shape();
    const auto& sw = w->value.shape();
    if (sw.size() != 2 || sx.empty() || sx.back() != sw[0])
        throw ConfigError("linear: bad shapes " + x->value.shape_str() + " x " + w->value.shape_str());
    const int in = sw[0], out = sw[1];
    const int64_t rows = x->value.size() / in;
    std::vector<int> oshape(sx);
    oshape.back() = out;
    Tensor<T> v(oshape);
    MatMap<T> ov(v.data(), rows, out);
    ov.noalias() = CMatMap<T>(x->value.data(), rows, in) * CMatMap<T>(w->value.data(), in, out);
    if (b) {
        if (b->value.size() != out) throw ConfigError("linear: bias size mismatch");
        ov.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value.data(), out);
    }
    std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
    return detail::make<T>(std::move(v), std::move(parents), [rows, in, out](Node<T>& node) {
        auto& x = node.parents[0];
        auto& w = node.parents[1];
        CMatMap<T> g(node.grad.data(), rows, out);
        if (x->requires_grad) {
            ensure_grad(*x);
            MatMap<T>(x->grad.data(), rows, in).noalias() += g * CMatMap<T>(w->value.data(), in, out).transpose();
        }
        if (w->requires_grad) {
            ensure_grad(*w);
            MatMap<T>(w->grad.data(), in, out).noalias() += CMatMap<T>(x->value.data(), rows, in).transpose() * g;
        }
        if (node.parents.size() > 2 && node.parents[2]->requires_grad) {
            auto& b = node.parents[2];
            ensure_grad(*b);
            // fixed-order scalar reduction; vectorized column sums are
            // alignment-sensitive and would break bit-reproducibility
            for (int64_t r = 0; r < rows; ++r)
                for (int c = 0; c < out; ++c) b->grad[c] += node.grad[r * out + c];
        }
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
    return linear(x, w, Var<T>());
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

namespace detail {

// im2col with implicit zero padding; rows = output positions, cols indexed
// (dy, dx, ci) to match a [kh,kw,Ci,Co] weight flattened to [kh*kw*Ci, Co].
template <typename T>
void im2col(const Tensor<T>& in, int kh, int kw, int pad, Tensor<T>& patches) {
    const int H = in.dim(0), W = in.dim(1), C = in.dim(2);
    const int oh = H + 2 * pad - kh + 1, ow = W + 2 * pad - kw + 1;
    const int pc = kh * kw * C;
    if (patches.size() != static_cast<int64_t>(oh) * ow * pc) patches = Tensor<T>({oh * ow, pc});
    else patches.fill(T(0));
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            T* row = patches.data() + (static_cast<int64_t>(y) * ow + x) * pc;
            for (int dy = 0; dy < kh; ++dy) {
                const int sy = y + dy - pad;
                if (sy < 0 || sy >= H) continue;
                for (int dx = 0; dx < kw; ++dx) {
                    const int sx = x + dx - pad;
                    if (sx < 0 || sx >= W) continue;
                    const T* src = in.data() + (static_cast<int64_t>(sy) * W + sx) * C;
                    std::copy(src, src + C, row + (dy * kw + dx) * C);
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const Tensor<T>& dpatches, int H, int W, int C, int kh, int kw, int pad, Tensor<T>& din) {
    const int oh = H + 2 * pad - kh + 1, ow = W + 2 * pad - kw + 1;
    const int pc = kh * kw * C;
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            const T* row = dpatches.data() + (static_cast<int64_t>(y) * ow + x) * pc;
            for (int dy = 0; dy < kh; ++dy) {
                const int sy = y + dy - pad;
                if (sy < 0 || sy >= H) continue;
                for (int dx = 0; dx < kw; ++dx) {
                    const int sx = x + dx - pad;
                    if (sx < 0 || sx >= W) continue;
                    T* dst = din.data() + (static_cast<int64_t>(sy) * W + sx) * C;
                    const T* g = row + (dy * kw + dx) * C;
                    for (int c = 0; c < C; ++c) dst[c] += g[c];
                }
            }
        }
    }
}

} // namespace detail

/// 2-D convolution, stride 1, implicit zero padding. x: [H,W,Ci],
/// w: [kh,kw,Ci,Co], b: [Co] or null. Patches are recomputed in the backward
/// pass instead of cached, trading FLOPs for activation memory.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int pad) {
    const auto& sx = x->value.shape();
    const auto& sw = w->value.shape();
    if (sx.size() != 3 || sw.size() != 4 || sx[2] != sw[2])
        throw ConfigError("conv2d: bad shapes " + x->value.shape_str() + " * " + w->value.shape_str());
    const int H = sx[0], W = sx[1], Ci = sx[2];
    const int kh = sw[0], kw = sw[1], Co = sw[3];
    const int oh = H + 2 * pad - kh + 1, ow = W + 2 * pad - kw + 1;
    if (oh < 1 || ow < 1) throw ConfigError("conv2d: kernel larger than padded input");
    Tensor<T> patches;
    detail::im2col(x->value, kh, kw, pad, patches);
    Tensor<T> v({oh, ow, Co});
    MatMap<T> ov(v.data(), static_cast<int64_t>(oh) * ow, Co);
    ov.noalias() = CMatMap<T>(patches.data(), static_cast<int64_t>(oh) * ow, kh * kw * Ci) *
                   CMatMap<T>(w->value.data(), kh * kw * Ci, Co);
    if (b) {
        if (b->value.size() != Co) throw ConfigError("conv2d: bias size mismatch");
        ov.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->value.data(), Co);
    }
    std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
    return detail::make<T>(std::move(v), std::move(parents), [H, W, Ci, kh, kw, Co, pad, oh, ow](Node<T>& node) {
        auto& x = node.parents[0];
        auto& w = node.parents[1];
        const int64_t rows = static_cast<int64_t>(oh) * ow;
        const int pc = kh * kw * Ci;
        CMatMap<T> g(node.grad.data(), rows, Co);
        if (w->requires_grad) {
            Tensor<T> patches;
            detail::im2col(x->value, kh, kw, pad, patches);
            ensure_grad(*w);
            MatMap<T>(w->grad.data(), pc, Co).noalias() += CMatMap<T>(patches.data(), rows, pc).transpose() * g;
        }
        if (x->requires_grad) {
            Tensor<T> dpatches({static_cast<int>(rows), pc});
            MatMap<T>(dpatches.data(), rows, pc).noalias() = g * CMatMap<T>(w->value.data(), pc, Co).transpose();
            ensure_grad(*x);
            detail::col2im_add(dpatches, H, W, Ci, kh, kw, pad, x->grad);
        }
        if (node.parents.size() > 2 && node.parents[2]->requires_grad) {
            auto& b = node.parents[2];
            ensure_grad(*b);
            for (int64_t r = 0; r < rows; ++r)
                for (int c = 0; c < Co; ++c) b->grad[c] += node.grad[r * Co + c];
        }
    });
}

/// Depth-wise 2-D convolution, stride 1, zero padding. w: [kh,kw,C].
template <typename T>
Var<T> dwconv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int pad) {
    const auto& sx = x->value.shape();
    const auto& sw = w->value.shape();
    if (sx.size() != 3 || sw.size() != 3 || sx[2] != sw[2])
        throw ConfigError("dwconv2d: bad shapes");
    const int H = sx[0], W = sx[1], C = sx[2];
    const int kh = sw[0], kw = sw[1];
    const int oh = H + 2 * pad - kh + 1, ow = W + 2 * pad - kw + 1;
    Tensor<T> v({oh, ow, C});
    for (int y = 0; y < oh; ++y)
        for (int x2 = 0; x2 < ow; ++x2) {
            T* dst = v.data() + (static_cast<int64_t>(y) * ow + x2) * C;
            if (b) std::copy(b->value.data(), b->value.data() + C, dst);
            for (int dy = 0; dy < kh; ++dy) {
                const int sy = y + dy - pad;
                if (sy < 0 || sy >= H) continue;
                for (int dx = 0; dx < kw; ++dx) {
                    const int sx2 = x2 + dx - pad;
                    if (sx2 < 0 || sx2 >= W) continue;
                    const T* src = x->value.data() + (static_cast<int64_t>(sy) * W + sx2) * C;
                    const T* wk = w->value.data() + (static_cast<int64_t>(dy) * kw + dx) * C;
                    for (int c = 0; c < C; ++c) dst[c] += src[c] * wk[c];
                }
            }
        }
    std::vector<Var<T>> parents = b ? std::vector<Var<T>>{x, w, b} : std::vector<Var<T>>{x, w};
    return detail::make<T>(std::move(v), std::move(parents), [H, W, C, kh, kw, pad, oh, ow](Node<T>& node) {
        auto& x = node.parents[0];
        auto& w = node.parents[1];
        const bool gx = x->requires_grad, gw = w->requires_grad;
        if (gx) ensure_grad(*x);
        if (gw) ensure_grad(*w);
        for (int y = 0; y < oh; ++y)
            for (int x2 = 0; x2 < ow; ++x2) {
                const T* g = node.grad.data() + (static_cast<int64_t>(y) * ow + x2) * C;
                for (int dy = 0; dy < kh; ++dy) {
                    const int sy = y + dy - pad;
                    if (sy < 0 || sy >= H) continue;
                    for (int dx = 0; dx < kw; ++dx) {
                        const int sx2 = x2 + dx - pad;
                        if (sx2 < 0 || sx2 >= W) continue;
                        const int64_t off = (static_cast<int64_t>(sy) * W + sx2) * C;
                        const int64_t woff = (static_cast<int64_t>(dy) * kw + dx) * C;
                        if (gx) {
                            const T* wk = w->value.data() + woff;
                            for (int c = 0; c < C; ++c) x->grad[off + c] += g[c] * wk[c];
                        }
                        if (gw) {
                            const T* src = x->value.data() + off;
                            for (int c = 0; c < C; ++c) w->grad[woff + c] += g[c] * src[c];
                        }
                    }
                }
            }
        if (node.parents.size() > 2 && node.parents[2]->requires_grad) {
            auto& b = node.parents[2];
            ensure_grad(*b);
            const int64_t rows = static_cast<int64_t>(oh) * ow;
            for (int64_t r = 0; r < rows; ++r)
                for (int c = 0; c < C; ++c) b->grad[c] += node.grad[r * C + c];
        }
    });
}

// ---------------------------------------------------------------------------
// normalization / activations over rows
// ---------------------------------------------------------------------------

/// Layer normalization over the last dimension, no affine part (scale and
/// shift are supplied externally when needed, e.g. by the injection module).
template <typename T>
Var<T> layer_norm(const Var<T>& x, T eps = T(1e-6)) {
    const auto& sh = x->value.shape();
    if (sh.empty()) throw ConfigError("layer_norm: want rank >= 1");
    const int C = sh.back();
    const int64_t rows = x->value.size() / C;
    Tensor<T> v(sh);
    Tensor<T> inv_std({static_cast<int>(rows)});
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = x->value.data() + r * C;
        T mean = T(0);
        for (int c = 0; c < C; ++c) mean += src[c];
        mean /= T(C);
        T var = T(0);
        for (int c = 0; c < C; ++c) {
            const T d = src[c] - mean;
            var += d * d;
        }
        var /= T(C);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std[r] = inv;
        T* dst = v.data() + r * C;
        for (int c = 0; c < C; ++c) dst[c] = (src[c] - mean) * inv;
    }
    return detail::make<T>(std::move(v), {x}, [C, rows, inv_std = std::move(inv_std)](Node<T>& n) {
        auto& x = n.parents[0];
        ensure_grad(*x);
        for (int64_t r = 0; r < rows; ++r) {
            const T* g = n.grad.data() + r * C;
            const T* y = n.value.data() + r * C;
            T gm = T(0), gym = T(0);
            for (int c = 0; c < C; ++c) {
                gm += g[c];
                gym += g[c] * y[c];
            }
            gm /= T(C);
            gym /= T(C);
            const T inv = inv_std[r];
            T* dx = x->grad.data() + r * C;
            for (int c = 0; c < C; ++c) dx[c] += inv * (g[c] - gm - y[c] * gym);
        }
    });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
    const auto& sh = x->value.shape();
    if (sh.empty()) throw ConfigError("softmax: want rank >= 1");
    const int C = sh.back();
    const int64_t rows = x->value.size() / C;
    Tensor<T> v(sh);
    for (int64_t r = 0; r < rows; ++r) {
        const T* src = x->value.data() + r * C;
        T* dst = v.data() + r * C;
        T mx = src[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, src[c]);
        T sum = T(0);
        for (int c = 0; c < C; ++c) {
            dst[c] = std::exp(src[c] - mx);
            sum += dst[c];
        }
        const T inv = T(1) / sum;
        for (int c = 0; c < C; ++c) dst[c] *= inv;
    }
    return detail::make<T>(std::move(v), {x}, [C, rows](Node<T>& n) {
        auto& x = n.parents[0];
        ensure_grad(*x);
        for (int64_t r = 0; r < rows; ++r) {
            const T* g = n.grad.data() + r * C;
            const T* y = n.value.data() + r * C;
            T dot = T(0);
            for (int c = 0; c < C; ++c) dot += g[c] * y[c];
            T* dx = x->grad.data() + r * C;
            for (int c = 0; c < C; ++c) dx[c] += y[c] * (g[c] - dot);
        }
    });
}

// ---------------------------------------------------------------------------
// pooling / gating
// ---------------------------------------------------------------------------

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    const auto& sh = x->value.shape();
    if (sh.size() != 3) throw ConfigError("global_avg_pool: want rank-3");
    const int H = sh[0], W = sh[1], C = sh[2];
    const int64_t hw = static_cast<int64_t>(H) * W;
    Tensor<T> v({C});
    for (int64_t p = 0; p < hw; ++p) {
        const T* src = x->value.data() + p * C;
        for (int c = 0; c < C; ++c) v[c] += src[c];
    }
    const T inv = T(1) / static_cast<T>(hw);
    for (int c = 0; c < C; ++c) v[c] *= inv;
    return detail::make<T>(std::move(v), {x}, [hw, C, inv](Node<T>& n) {
        auto& x = n.parents[0];
        ensure_grad(*x);
        for (int64_t p = 0; p < hw; ++p) {
            T* dst = x->grad.data() + p * C;
            for (int c = 0; c < C; ++c) dst[c] += n.grad[c] * inv;
        }
    });
}

/// Per-position channel statistics: [H,W,C] -> [H,W,2] with channel mean in
/// plane 0 and channel max in plane 1.
template <typename T>
Var<T> channel_mean_max(const Var<T>& x) {
    const auto& sh = x->value.shape();
    if (sh.size() != 3) throw ConfigError("channel_mean_max: want rank-3");
    const int H = sh[0], W = sh[1], C = sh[2];
    const int64_t hw = static_cast<int64_t>(H) * W;
    Tensor<T> v({H, W, 2});
    std::vector<int> argmax(static_cast<size_t>(hw));
    for (int64_t p = 0; p < hw; ++p) {
        const T* src = x->value.data() + p * C;
        T sum = src[0], mx = src[0];
        int ai = 0;
        for (int c = 1; c < C; ++c) {
            sum += src[c];
            if (src[c] > mx) {
                mx = src[c];
                ai = c;
            }
        }
        v[p * 2] = sum / T(C);
        v[p * 2 + 1] = mx;
        argmax[static_cast<size_t>(p)] = ai;
    }
    return detail::make<T>(std::move(v), {x}, [hw, C, argmax = std::move(argmax)](Node<T>& n) {
        auto& x = n.parents[0];
        ensure_grad(*x);
        const T inv = T(1) / T(C);
        for (int64_t p = 0; p < hw; ++p) {
            T* dst = x->grad.data() + p * C;
            const T gmean = n.grad[p * 2] * inv;
            for (int c = 0; c < C; ++c) dst[c] += gmean;
            dst[argmax[static_cast<size_t>(p)]] += n.grad[p * 2 + 1];
        }
    });
}

/// x [H,W,C] * gate [C], gate broadcast over positions.
template <typename T>
Var<T> scale_by_channel(const Var<T>& x, const Var<T>& gate) {
    const auto& sh = x->value.shape();
    if (sh.size() != 3 || gate->value.size() != sh[2])
        throw ConfigError("scale_by_channel: bad shapes");
    const int C = sh[2];
    const int64_t hw = x->value.size() / C;
    Tensor<T> v(sh);
    for (int64_t p = 0; p < hw; ++p)
        for (int c = 0; c < C; ++c) v[p * C + c] = x->value[p * C + c] * gate->value[c];
    return detail::make<T>(std::move(v), {x, gate}, [hw, C](Node<T>& n) {
        auto& x = n.parents[0];
        auto& gate = n.parents[1];
        if (x->requires_grad) {
            ensure_grad(*x);
            for (int64_t p = 0; p < hw; ++p)
                for (int c = 0; c < C; ++c) x->grad[p * C + c] += n.grad[p * C + c] * gate->value[c];
        }
        if (gate->requires_grad) {
            ensure_grad(*gate);
            for (int64_t p = 0; p < hw; ++p)
                for (int c = 0; c < C; ++c) gate->grad[c] += n.grad[p * C + c] * x->value[p * C + c];
        }
    });
}

/// x [H,W,C] + bias [C], bias broadcast over positions.
template <typename T>
Var<T> add_by_channel(const Var<T>& x, const Var<T>& bias) {
    const auto& sh = x->value.shape();
    if (sh.size() != 3 || bias->value.size() != sh[2])
        throw ConfigError("add_by_channel: bad shapes");
    const int C = sh[2];
    const int64_t hw = x->value.size() / C;
    Tensor<T> v(sh);
    for (int64_t p = 0; p < hw; ++p)
        for (int c = 0; c < C; ++c) v[p * C + c] = x->value[p * C + c] + bias->value[c];
    return detail::make<T>(std::move(v), {x, bias}, [hw, C](Node<T>& n) {
        auto& x = n.parents[0];
        auto& bias = n.parents[1];
        if (x->requires_grad) {
            ensure_grad(*x);
            for (int64_t i = 0; i < n.grad.size(); ++i) x->grad[i] += n.grad[i];
        }
        if (bias->requires_grad) {
            ensure_grad(*bias);
            for (int64_t p = 0; p < hw; ++p)
                for (int c = 0; c < C; ++c) bias->grad[c] += n.grad[p * C + c];
        }
    });
}

/// x [H,W,C] * gate [H,W,1], gate broadcast over channels.
template <typename T>
Var<T> scale_by_map(const Var<T>& x, const Var<T>& gate) {
    const auto& sh = x->value.shape();
    const auto& sg = gate->value.shape();
    if (sh.size() != 3 || sg.size() != 3 || sg[0] != sh[0] || sg[1] != sh[1] || sg[2] != 1)
        throw ConfigError("scale_by_map: bad shapes");
    const int C = sh[2];
    const int64_t hw = x->value.size() / C;
    Tensor<T> v(sh);
    for (int64_t p = 0; p < hw; ++p) {
        const T g = gate->value[p];
        for (int c = 0; c < C; ++c) v[p * C + c] = x->value[p * C + c] * g;
    }
    return detail::make<T>(std::move(v), {x, gate}, [hw, C](Node<T>& n) {
        auto& x = n.parents[0];
        auto& gate = n.parents[1];
        if (x->requires_grad) {
            ensure_grad(*x);
            for (int64_t p = 0; p < hw; ++p) {
                const T g = gate->value[p];
                for (int c = 0; c < C; ++c) x->grad[p * C + c] += n.grad[p * C + c] * g;
            }
        }
        if (gate->requires_grad) {
            ensure_grad(*gate);
            for (int64_t p = 0; p < hw; ++p) {
                T acc = T(0);
                for (int c = 0; c < C; ++c) acc += n.grad[p * C + c] * x->value[p * C + c];
                gate->grad[p] += acc;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// attention (fused, with cached softmax for the backward pass)
// ---------------------------------------------------------------------------

/// Multi-head attention inside non-overlapping windows. q,k,v: [nW, t, C];
/// per window and head computes softmax(Q K^T / sqrt(d)) V with d = C/heads.
template <typename T>
Var<T> window_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
    const auto& sh = q->value.shape();
    check_same_shape(q->value, k->value, "window_attention");
    check_same_shape(q->value, v->value, "window_attention");
    if (sh.size() != 3) throw ConfigError("window_attention: want [nW, t, C]");
    const int nw = sh[0], t = sh[1], C = sh[2];
    if (heads < 1 || C % heads) throw ConfigError("window_attention: channels not divisible by heads");
    const int d = C / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(d));
    Tensor<T> out(sh);
    Tensor<T> attn({nw, heads, t, t});
    Mat<T> s(t, t);
    for (int w = 0; w < nw; ++w) {
        const int64_t base = static_cast<int64_t>(w) * t * C;
        for (int h = 0; h < heads; ++h) {
            CStridedMap<T> Q(q->value.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
            CStridedMap<T> K(k->value.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
            CStridedMap<T> V(v->value.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
            s.noalias() = Q * K.transpose();
            s *= scale;
            MatMap<T> A(attn.data() + ((static_cast<int64_t>(w) * heads + h) * t) * t, t, t);
            for (int i = 0; i < t; ++i) {
                const T mx = s.row(i).maxCoeff();
                A.row(i) = (s.row(i).array() - mx).exp();
                A.row(i) /= A.row(i).sum();
            }
            StridedMap<T> O(out.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
            O.noalias() = A * V;
        }
    }
    return detail::make<T>(std::move(out), {q, k, v},
                           [nw, t, C, heads, d, scale, attn = std::move(attn)](Node<T>& n) {
        auto& q = n.parents[0];
        auto& k = n.parents[1];
        auto& v = n.parents[2];
        if (q->requires_grad) ensure_grad(*q);
        if (k->requires_grad) ensure_grad(*k);
        if (v->requires_grad) ensure_grad(*v);
        Mat<T> dA(t, t), dS(t, t);
        for (int w = 0; w < nw; ++w) {
            const int64_t base = static_cast<int64_t>(w) * t * C;
            for (int h = 0; h < heads; ++h) {
                CMatMap<T> A(attn.data() + ((static_cast<int64_t>(w) * heads + h) * t) * t, t, t);
                CStridedMap<T> G(n.grad.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
                CStridedMap<T> Q(q->value.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
                CStridedMap<T> K(k->value.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
                CStridedMap<T> V(v->value.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
                if (v->requires_grad) {
                    StridedMap<T> dV(v->grad.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
                    dV.noalias() += A.transpose() * G;
                }
                if (q->requires_grad || k->requires_grad) {
                    dA.noalias() = G * V.transpose();
                    for (int i = 0; i < t; ++i) {
                        const T dot = dA.row(i).cwiseProduct(A.row(i)).sum();
                        dS.row(i).array() = A.row(i).array() * (dA.row(i).array() - dot);
                    }
                    dS *= scale;
                    if (q->requires_grad) {
                        StridedMap<T> dQ(q->grad.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
                        dQ.noalias() += dS * K;
                    }
                    if (k->requires_grad) {
                        StridedMap<T> dK(k->grad.data() + base + h * d, t, d, Eigen::OuterStride<>(C));
                        dK.noalias() += dS.transpose() * Q;
                    }
                }
            }
        }
    });
}

/// Channel-wise attention: q,k,v: [N, C] with N spatial tokens. Per head the
/// C/heads x C/heads affinity softmax(Q^T K / alpha) mixes V's channels.
/// alpha: [heads] variable of positive temperatures (learnable upstream).
template <typename T>
Var<T> channel_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads, const Var<T>& alpha) {
    const auto& sh = q->value.shape();
    check_same_shape(q->value, k->value, "channel_attention");
    check_same_shape(q->value, v->value, "channel_attention");
    if (sh.size() != 2) throw ConfigError("channel_attention: want [N, C]");
    const int N = sh[0], C = sh[1];
    if (heads < 1 || C % heads) throw ConfigError("channel_attention: channels not divisible by heads");
    if (alpha->value.size() != heads) throw ConfigError("channel_attention: alpha size != heads");
    for (int h = 0; h < heads; ++h)
        if (alpha->value[h] == T(0)) throw NumericError("channel_attention: zero temperature");
    const int d = C / heads;
    Tensor<T> out(sh);
    Tensor<T> attn({heads, d, d});
    Tensor<T> logits({heads, d, d});
    for (int h = 0; h < heads; ++h) {
        CStridedMap<T> Q(q->value.data() + h * d, N, d, Eigen::OuterStride<>(C));
        CStridedMap<T> K(k->value.data() + h * d, N, d, Eigen::OuterStride<>(C));
        CStridedMap<T> V(v->value.data() + h * d, N, d, Eigen::OuterStride<>(C));
        MatMap<T> M(logits.data() + static_cast<int64_t>(h) * d * d, d, d);
        M.noalias() = Q.transpose() * K;
        M /= alpha->value[h];
        MatMap<T> A(attn.data() + static_cast<int64_t>(h) * d * d, d, d);
        for (int i = 0; i < d; ++i) {
            const T mx = M.row(i).maxCoeff();
            A.row(i) = (M.row(i).array() - mx).exp();
            A.row(i) /= A.row(i).sum();
        }
        StridedMap<T> O(out.data() + h * d, N, d, Eigen::OuterStride<>(C));
        O.noalias() = V * A.transpose();
    }
    return detail::make<T>(std::move(out), {q, k, v, alpha},
                           [N, C, heads, d, attn = std::move(attn), logits = std::move(logits)](Node<T>& n) {
        auto& q = n.parents[0];
        auto& k = n.parents[1];
        auto& v = n.parents[2];
        auto& alpha = n.parents[3];
        if (q->requires_grad) ensure_grad(*q);
        if (k->requires_grad) ensure_grad(*k);
        if (v->requires_grad) ensure_grad(*v);
        if (alpha->requires_grad) ensure_grad(*alpha);
        Mat<T> dA(d, d), dM(d, d);
        for (int h = 0; h < heads; ++h) {
            const T a = alpha->value[h];
            CMatMap<T> A(attn.data() + static_cast<int64_t>(h) * d * d, d, d);
            CMatMap<T> M(logits.data() + static_cast<int64_t>(h) * d * d, d, d);
            CStridedMap<T> G(n.grad.data() + h * d, N, d, Eigen::OuterStride<>(C));
            CStridedMap<T> Q(q->value.data() + h * d, N, d, Eigen::OuterStride<>(C));
            CStridedMap<T> K(k->value.data() + h * d, N, d, Eigen::OuterStride<>(C));
            CStridedMap<T> V(v->value.data() + h * d, N, d, Eigen::OuterStride<>(C));
            if (v->requires_grad) {
                StridedMap<T> dV(v->grad.data() + h * d, N, d, Eigen::OuterStride<>(C));
                dV.noalias() += G * A;
            }
            dA.noalias() = G.transpose() * V;
            for (int i = 0; i < d; ++i) {
                const T dot = dA.row(i).cwiseProduct(A.row(i)).sum();
                dM.row(i).array() = A.row(i).array() * (dA.row(i).array() - dot);
            }
            if (alpha->requires_grad)
                alpha->grad[h] += -dM.cwiseProduct(M).sum() / a;
            dM /= a;
            if (q->requires_grad) {
                StridedMap<T> dQ(q->grad.data() + h * d, N, d, Eigen::OuterStride<>(C));
                dQ.noalias() += K * dM.transpose();
            }
            if (k->requires_grad) {
                StridedMap<T> dK(k->grad.data() + h * d, N, d, Eigen::OuterStride<>(C));
                dK.noalias() += Q * dM;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> mean_abs_diff(const Var<T>& a, const Var<T>& b) {
    check_same_shape(a->value, b->value, "mean_abs_diff");
    const int64_t nel = a->value.size();
    T acc = T(0);
    for (int64_t i = 0; i < nel; ++i) acc += std::abs(a->value[i] - b->value[i]);
    Tensor<T> v = Tensor<T>::scalar(acc / static_cast<T>(nel));
    return detail::make<T>(std::move(v), {a, b}, [nel](Node<T>& n) {
        auto& a = n.parents[0];
        auto& b = n.parents[1];
        const T g = n.grad[0] / static_cast<T>(nel);
        if (a->requires_grad) ensure_grad(*a);
        if (b->requires_grad) ensure_grad(*b);
        for (int64_t i = 0; i < nel; ++i) {
            const T d = a->value[i] - b->value[i];
            const T s = d > T(0) ? g : (d < T(0) ? -g : T(0));
            if (a->requires_grad) a->grad[i] += s;
            if (b->requires_grad) b->grad[i] -= s;
        }
    });
}

template <typename T>
Var<T> mean_abs(const Var<T>& a) {
    const int64_t nel = a->value.size();
    T acc = T(0);
    for (int64_t i = 0; i < nel; ++i) acc += std::abs(a->value[i]);
    Tensor<T> v = Tensor<T>::scalar(acc / static_cast<T>(nel));
    return detail::make<T>(std::move(v), {a}, [nel](Node<T>& n) {
        auto& a = n.parents[0];
        ensure_grad(*a);
        const T g = n.grad[0] / static_cast<T>(nel);
        for (int64_t i = 0; i < nel; ++i) {
            const T x = a->value[i];
            a->grad[i] += x > T(0) ? g : (x < T(0) ? -g : T(0));
        }
    });
}

/// <x, r> with a constant probe tensor; a smooth scalar functional for
/// gradient checks.
template <typename T>
Var<T> dot_with(const Var<T>& x, Tensor<T> r) {
    check_same_shape(x->value, r, "dot_with");
    T acc = T(0);
    for (int64_t i = 0; i < x->value.size(); ++i) acc += x->value[i] * r[i];
    return detail::make<T>(Tensor<T>::scalar(acc), {x}, [r = std::move(r)](Node<T>& n) {
        auto& x = n.parents[0];
        ensure_grad(*x);
        const T g = n.grad[0];
        for (int64_t i = 0; i < r.size(); ++i) x->grad[i] += g * r[i];
    });
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (int64_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t[i])) return false;
    return true;
}

} // namespace ag
} // namespace cdformer

#endif
