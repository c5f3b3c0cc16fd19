// SPDX-License-Identifier: Apache-2.0
//
// Tensor, RNG and autodiff primitives: shape plumbing, determinism, and
// finite-difference checks for every op's backward pass.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cdformer/autodiff.hpp"
#include "cdformer/nn.hpp"
#include "cdformer/rng.hpp"
#include "support/grad_check.hpp"

using namespace cdformer;
namespace agd = cdformer::ag;
using cdformer::testing::grad_check_entry;
using cdformer::testing::random_tensor;

namespace {

using D = double;
constexpr double kH = 1e-6;
constexpr double kTol = 1e-6; // primitives in double are much tighter than the 1e-3 contract

agd::Var<D> param(Tensor<D> t) { return agd::parameter(std::move(t)); }

} // namespace

TEST_CASE("tensor basics") {
    Tensor<float> t({2, 3, 4});
    REQUIRE(t.size() == 24);
    REQUIRE(t.rank() == 3);
    t.at(1, 2, 3) = 5.f;
    REQUIRE(t[23] == 5.f);
    REQUIRE(t.shape_str() == "[2,3,4]");
    REQUIRE_THROWS_AS(Tensor<float>::count({2, -1}), ConfigError);
}

TEST_CASE("rng determinism and state round-trip") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) REQUIRE(a.normal() == b.normal());

    const std::string s = a.state();
    const double x1 = a.normal(), x2 = a.normal();
    Rng c(0);
    c.restore(s);
    REQUIRE(c.normal() == x1);
    REQUIRE(c.normal() == x2);

    REQUIRE(derive_seed(1, "data") != derive_seed(1, "init"));
    REQUIRE(derive_seed(1, "data") == derive_seed(1, "data"));
    REQUIRE(derive_seed(1, "data", 3) != derive_seed(1, "data", 4));
}

TEST_CASE("rng normal moments") {
    Rng rng(7);
    double sum = 0, sq = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    REQUIRE(std::abs(sum / n) < 0.02);
    REQUIRE(std::abs(sq / n - 1.0) < 0.02);
}

TEST_CASE("elementwise op gradients") {
    Rng rng(1);
    auto a = param(random_tensor<D>({3, 4}, rng));
    auto b = param(random_tensor<D>({3, 4}, rng));
    Tensor<D> probe = random_tensor<D>({3, 4}, rng);

    auto check = [&](auto make) {
        for (auto& p : {a, b})
            for (int64_t i : {int64_t(0), int64_t(5), int64_t(11)})
                REQUIRE(grad_check_entry<D>(make, p, i, kH) < kTol);
    };

    SECTION("add") { check([&] { return agd::dot_with(agd::add(a, b), probe); }); }
    SECTION("sub") { check([&] { return agd::dot_with(agd::sub(a, b), probe); }); }
    SECTION("mul") { check([&] { return agd::dot_with(agd::mul(a, b), probe); }); }
    SECTION("axpby") { check([&] { return agd::dot_with(agd::axpby(D(0.3), a, D(-1.7), b), probe); }); }
    SECTION("scale") { check([&] { return agd::dot_with(agd::scale(a, D(2.5)), probe); }); }
    SECTION("exp") { check([&] { return agd::dot_with(agd::exp_of(a), probe); }); }
    SECTION("gelu") { check([&] { return agd::dot_with(agd::gelu(a), probe); }); }
    SECTION("leaky_relu") { check([&] { return agd::dot_with(agd::leaky_relu(a, D(0.1)), probe); }); }
    SECTION("sigmoid") { check([&] { return agd::dot_with(agd::sigmoid(a), probe); }); }
    SECTION("mean_abs_diff") { check([&] { return agd::mean_abs_diff(a, b); }); }
    SECTION("mean_abs") { check([&] { return agd::mean_abs(agd::mul(a, b)); }); }
}

TEST_CASE("linear and matmul gradients") {
    Rng rng(2);
    auto x = param(random_tensor<D>({5, 4}, rng));
    auto w = param(random_tensor<D>({4, 3}, rng));
    auto b = param(random_tensor<D>({3}, rng));
    Tensor<D> probe = random_tensor<D>({5, 3}, rng);

    auto make = [&] { return agd::dot_with(agd::linear(x, w, b), probe); };
    for (auto& p : {x, w, b})
        for (int64_t i = 0; i < std::min<int64_t>(p->value.size(), 6); ++i)
            REQUIRE(grad_check_entry<D>(make, p, i, kH) < kTol);

    auto make2 = [&] { return agd::dot_with(agd::matmul(x, w), probe); };
    REQUIRE(grad_check_entry<D>(make2, x, 3, kH) < kTol);
    REQUIRE(grad_check_entry<D>(make2, w, 7, kH) < kTol);

    // rank-1 input path
    auto v = param(random_tensor<D>({4}, rng));
    Tensor<D> probe1 = random_tensor<D>({3}, rng);
    auto make3 = [&] { return agd::dot_with(agd::linear(v, w, b), probe1); };
    REQUIRE(grad_check_entry<D>(make3, v, 2, kH) < kTol);
    REQUIRE(grad_check_entry<D>(make3, w, 5, kH) < kTol);
}

TEST_CASE("conv2d matches direct evaluation and gradients") {
    Rng rng(3);
    auto x = param(random_tensor<D>({5, 6, 3}, rng));
    auto w = param(random_tensor<D>({3, 3, 3, 2}, rng));
    auto b = param(random_tensor<D>({2}, rng));

    auto out = agd::conv2d(x, w, b, 1);
    REQUIRE(out->value.shape() == std::vector<int>{5, 6, 2});

    // direct loop oracle
    for (int y : {0, 2, 4})
        for (int xx : {0, 3, 5})
            for (int co = 0; co < 2; ++co) {
                double acc = b->value[co];
                for (int dy = 0; dy < 3; ++dy)
                    for (int dx = 0; dx < 3; ++dx) {
                        const int sy = y + dy - 1, sx = xx + dx - 1;
                        if (sy < 0 || sy >= 5 || sx < 0 || sx >= 6) continue;
                        for (int ci = 0; ci < 3; ++ci)
                            acc += x->value.at(sy, sx, ci) * w->value[(((dy * 3 + dx) * 3) + ci) * 2 + co];
                    }
                REQUIRE_THAT(out->value.at(y, xx, co), Catch::Matchers::WithinAbs(acc, 1e-12));
            }

    Tensor<D> probe = random_tensor<D>({5, 6, 2}, rng);
    auto make = [&] { return agd::dot_with(agd::conv2d(x, w, b, 1), probe); };
    for (auto& p : {x, w, b})
        for (int64_t i = 0; i < std::min<int64_t>(p->value.size(), 8); ++i)
            REQUIRE(grad_check_entry<D>(make, p, i, kH) < kTol);
}

TEST_CASE("dwconv2d gradients") {
    Rng rng(4);
    auto x = param(random_tensor<D>({4, 5, 3}, rng));
    auto w = param(random_tensor<D>({3, 3, 3}, rng));
    auto b = param(random_tensor<D>({3}, rng));
    Tensor<D> probe = random_tensor<D>({4, 5, 3}, rng);
    auto make = [&] { return agd::dot_with(agd::dwconv2d(x, w, b, 1), probe); };
    for (auto& p : {x, w, b})
        for (int64_t i = 0; i < std::min<int64_t>(p->value.size(), 8); ++i)
            REQUIRE(grad_check_entry<D>(make, p, i, kH) < kTol);
}

TEST_CASE("layer_norm normalizes and gradients") {
    Rng rng(5);
    auto x = param(random_tensor<D>({3, 8}, rng));
    auto y = agd::layer_norm(x);
    for (int r = 0; r < 3; ++r) {
        double mean = 0, var = 0;
        for (int c = 0; c < 8; ++c) mean += y->value.at(r, c);
        mean /= 8;
        for (int c = 0; c < 8; ++c) var += (y->value.at(r, c) - mean) * (y->value.at(r, c) - mean);
        var /= 8;
        REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-12));
        REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-5));
    }
    Tensor<D> probe = random_tensor<D>({3, 8}, rng);
    auto make = [&] { return agd::dot_with(agd::layer_norm(x), probe); };
    for (int64_t i = 0; i < 10; ++i) REQUIRE(grad_check_entry<D>(make, x, i, kH) < kTol);
}

TEST_CASE("softmax rows and gradients") {
    Rng rng(6);
    auto x = param(random_tensor<D>({4, 5}, rng));
    auto y = agd::softmax(x);
    for (int r = 0; r < 4; ++r) {
        double s = 0;
        for (int c = 0; c < 5; ++c) s += y->value.at(r, c);
        REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }
    Tensor<D> probe = random_tensor<D>({4, 5}, rng);
    auto make = [&] { return agd::dot_with(agd::softmax(x), probe); };
    for (int64_t i = 0; i < 10; ++i) REQUIRE(grad_check_entry<D>(make, x, i, kH) < kTol);
}

TEST_CASE("pooling and gating gradients") {
    Rng rng(7);
    auto x = param(random_tensor<D>({4, 4, 6}, rng));
    auto gate_c = param(random_tensor<D>({6}, rng));
    auto gate_s = param(random_tensor<D>({4, 4, 1}, rng));

    SECTION("global_avg_pool") {
        Tensor<D> probe = random_tensor<D>({6}, rng);
        auto make = [&] { return agd::dot_with(agd::global_avg_pool(x), probe); };
        for (int64_t i = 0; i < 8; ++i) REQUIRE(grad_check_entry<D>(make, x, i * 7, kH) < kTol);
    }
    SECTION("channel_mean_max") {
        Tensor<D> probe = random_tensor<D>({4, 4, 2}, rng);
        auto make = [&] { return agd::dot_with(agd::channel_mean_max(x), probe); };
        for (int64_t i = 0; i < 12; ++i) REQUIRE(grad_check_entry<D>(make, x, i * 5, kH) < kTol);
    }
    SECTION("scale_by_channel") {
        Tensor<D> probe = random_tensor<D>({4, 4, 6}, rng);
        auto make = [&] { return agd::dot_with(agd::scale_by_channel(x, gate_c), probe); };
        REQUIRE(grad_check_entry<D>(make, x, 13, kH) < kTol);
        REQUIRE(grad_check_entry<D>(make, gate_c, 2, kH) < kTol);
    }
    SECTION("scale_by_map") {
        Tensor<D> probe = random_tensor<D>({4, 4, 6}, rng);
        auto make = [&] { return agd::dot_with(agd::scale_by_map(x, gate_s), probe); };
        REQUIRE(grad_check_entry<D>(make, x, 13, kH) < kTol);
        REQUIRE(grad_check_entry<D>(make, gate_s, 5, kH) < kTol);
    }
}

TEST_CASE("pixel shuffle round-trips") {
    Rng rng(8);
    auto x = param(random_tensor<D>({4, 4, 3}, rng));

    // s=1 is the identity
    auto id = agd::pixel_unshuffle(x, 1);
    for (int64_t i = 0; i < x->value.size(); ++i) REQUIRE(id->value[i] == x->value[i]);

    // s=2 on 4x4x3 -> 2x2x12 and back, exact
    auto down = agd::pixel_unshuffle(x, 2);
    REQUIRE(down->value.shape() == std::vector<int>{2, 2, 12});
    auto back = agd::pixel_shuffle(down, 2);
    for (int64_t i = 0; i < x->value.size(); ++i) REQUIRE(back->value[i] == x->value[i]);

    Tensor<D> probe = random_tensor<D>({2, 2, 12}, rng);
    auto make = [&] { return agd::dot_with(agd::pixel_unshuffle(x, 2), probe); };
    for (int64_t i = 0; i < 10; ++i) REQUIRE(grad_check_entry<D>(make, x, i * 4, kH) < kTol);

    REQUIRE_THROWS_AS(agd::pixel_unshuffle(param(Tensor<D>({3, 4, 3})), 2), ConfigError);
}

TEST_CASE("pad_reflect, crop, concat gradients") {
    Rng rng(9);
    auto x = param(random_tensor<D>({3, 4, 2}, rng));
    auto y = param(random_tensor<D>({3, 4, 5}, rng));

    SECTION("pad values reflect without edge repeat") {
        auto p = agd::pad_reflect(x, 2, 1, 1, 2);
        REQUIRE(p->value.shape() == std::vector<int>{6, 7, 2});
        REQUIRE(p->value.at(0, 1, 0) == x->value.at(2, 0, 0));
        REQUIRE(p->value.at(2, 0, 1) == x->value.at(0, 1, 1));
        REQUIRE(p->value.at(2, 5, 0) == x->value.at(0, 2, 0)); // col 5 -> src col 4 -> reflect 2
    }
    SECTION("pad gradient") {
        Tensor<D> probe = random_tensor<D>({6, 7, 2}, rng);
        auto make = [&] { return agd::dot_with(agd::pad_reflect(x, 2, 1, 1, 2), probe); };
        for (int64_t i = 0; i < 12; ++i) REQUIRE(grad_check_entry<D>(make, x, i * 2, kH) < kTol);
    }
    SECTION("crop gradient") {
        Tensor<D> probe = random_tensor<D>({2, 2, 2}, rng);
        auto make = [&] { return agd::dot_with(agd::crop(x, 1, 1, 2, 2), probe); };
        for (int64_t i = 0; i < 12; ++i) REQUIRE(grad_check_entry<D>(make, x, i * 2, kH) < kTol);
    }
    SECTION("concat gradient") {
        Tensor<D> probe = random_tensor<D>({3, 4, 7}, rng);
        auto make = [&] { return agd::dot_with(agd::concat_last(x, y), probe); };
        REQUIRE(grad_check_entry<D>(make, x, 3, kH) < kTol);
        REQUIRE(grad_check_entry<D>(make, y, 11, kH) < kTol);
    }
}

TEST_CASE("window partition/merge round-trip is the identity") {
    Rng rng(10);
    auto x = param(random_tensor<D>({8, 12, 5}, rng));
    auto parts = agd::window_partition(x, 4, 6);
    REQUIRE(parts->value.shape() == std::vector<int>{4, 24, 5});
    auto merged = agd::window_merge(parts, 8, 12, 4, 6);
    for (int64_t i = 0; i < x->value.size(); ++i) REQUIRE(merged->value[i] == x->value[i]);

    Tensor<D> probe = random_tensor<D>({4, 24, 5}, rng);
    auto make = [&] { return agd::dot_with(agd::window_partition(x, 4, 6), probe); };
    for (int64_t i = 0; i < 10; ++i) REQUIRE(grad_check_entry<D>(make, x, i * 11, kH) < kTol);
}

TEST_CASE("window_attention gradients") {
    Rng rng(11);
    auto q = param(random_tensor<D>({2, 6, 4}, rng));
    auto k = param(random_tensor<D>({2, 6, 4}, rng));
    auto v = param(random_tensor<D>({2, 6, 4}, rng));
    Tensor<D> probe = random_tensor<D>({2, 6, 4}, rng);
    auto make = [&] { return agd::dot_with(agd::window_attention(q, k, v, 2), probe); };
    for (auto& p : {q, k, v})
        for (int64_t i = 0; i < 10; ++i)
            REQUIRE(grad_check_entry<D>(make, p, i * 4 % p->value.size(), kH) < 1e-5);
}

TEST_CASE("channel_attention gradients incl. temperature") {
    Rng rng(12);
    auto q = param(random_tensor<D>({7, 6, 1}, rng));
    q = param(random_tensor<D>({7, 6}, rng));
    auto k = param(random_tensor<D>({7, 6}, rng));
    auto v = param(random_tensor<D>({7, 6}, rng));
    auto alpha = param(Tensor<D>::full({2}, 1.3));
    Tensor<D> probe = random_tensor<D>({7, 6}, rng);
    auto make = [&] { return agd::dot_with(agd::channel_attention(q, k, v, 2, alpha), probe); };
    for (auto& p : {q, k, v})
        for (int64_t i = 0; i < 10; ++i)
            REQUIRE(grad_check_entry<D>(make, p, (i * 5) % p->value.size(), kH) < 1e-5);
    REQUIRE(grad_check_entry<D>(make, alpha, 0, kH) < 1e-5);
    REQUIRE(grad_check_entry<D>(make, alpha, 1, kH) < 1e-5);

    auto zero_alpha = param(Tensor<D>({2}));
    REQUIRE_THROWS_AS(agd::channel_attention(q, k, v, 2, zero_alpha), NumericError);
}

TEST_CASE("requires_grad gating skips frozen subgraphs") {
    Rng rng(13);
    auto frozen = agd::constant(random_tensor<D>({3, 3}, rng));
    auto live = param(random_tensor<D>({3, 3}, rng));
    auto out = agd::mean_abs(agd::mul(frozen, live));
    agd::backward(out);
    REQUIRE(frozen->grad.size() == 0);
    REQUIRE(live->grad.size() == 9);
}
