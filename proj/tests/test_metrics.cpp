// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cdformer/metrics.hpp"
#include "support/reference_metrics.hpp"
#include "support/test_images.hpp"

using namespace cdformer;
using namespace cdformer::testing;

TEST_CASE("psnr basics") {
    auto img = make_probe_image<float>(40, 24, 24);

    SECTION("identical images hit the 100 dB cap") {
        REQUIRE(psnr(img, img, 0, MetricSpace::rgb) == 100.0);
        REQUIRE(psnr(img, img, 0, MetricSpace::y) == 100.0);
    }
    SECTION("constant offset matches the closed form") {
        ImageT<float> a(16, 16), b(16, 16);
        for (auto& v : b.px) v = 16.f / 255.f;
        const double expect = 10.0 * std::log10(255.0 * 255.0 / (16.0 * 16.0));
        // 1e-5 dB headroom for the float32 pixel representation of 16/255
        REQUIRE_THAT(psnr(a, b, 0, MetricSpace::rgb), Catch::Matchers::WithinAbs(expect, 1e-5));
    }
    SECTION("symmetry") {
        auto other = make_probe_image<float>(41, 24, 24);
        REQUIRE(psnr(img, other, 0, MetricSpace::y) == psnr(other, img, 0, MetricSpace::y));
        REQUIRE(ssim(img, other) == ssim(other, img));
    }
    SECTION("border crop equals pre-cropped input") {
        auto other = make_probe_image<float>(42, 24, 24);
        const int c = 4;
        auto ic = crop_image(img, c, c, 24 - 2 * c, 24 - 2 * c);
        auto oc = crop_image(other, c, c, 24 - 2 * c, 24 - 2 * c);
        REQUIRE_THAT(psnr(img, other, c, MetricSpace::y),
                     Catch::Matchers::WithinAbs(psnr(ic, oc, 0, MetricSpace::y), 1e-12));
    }
    SECTION("dim mismatch rejected") {
        ImageT<float> small(8, 8);
        REQUIRE_THROWS_AS(psnr(img, small, 0, MetricSpace::y), ConfigError);
    }
    SECTION("monotonic decrease with added noise") {
        Rng rng(7);
        double prev = 1e9;
        for (double lvl : {0.002, 0.01, 0.05}) {
            double avg = 0;
            for (int s = 0; s < 3; ++s) {
                auto noisy = img;
                Rng nr(derive_seed(100 + static_cast<uint64_t>(s), "noise"));
                for (auto& v : noisy.px) v = std::min(1.0, std::max(0.0, v + lvl * nr.normal()));
                avg += psnr(img, noisy, 0, MetricSpace::y);
            }
            avg /= 3;
            REQUIRE(avg < prev);
            prev = avg;
        }
    }
}

TEST_CASE("ssim basics") {
    auto img = make_probe_image<float>(50, 32, 32);
    SECTION("identical -> 1") { REQUIRE_THAT(ssim(img, img), Catch::Matchers::WithinAbs(1.0, 1e-12)); }
    SECTION("negative image scores low") {
        auto neg = img;
        for (auto& v : neg.px) v = 1.f - v;
        REQUIRE(ssim(img, neg) < 0.5);
    }
    SECTION("bounded in [-1, 1]") {
        auto other = make_noise_image<float>(51, 32, 32);
        const double v = ssim(img, other);
        REQUIRE(v >= -1.0);
        REQUIRE(v <= 1.0);
    }
}

TEST_CASE("metrics match the independent reference implementation") {
    for (int pair = 0; pair < 6; ++pair) {
        auto a = make_probe_image<float>(60 + static_cast<uint64_t>(pair), 28, 28);
        auto b = pair % 2 ? make_probe_image<float>(70 + static_cast<uint64_t>(pair), 28, 28)
                          : make_noise_image<float>(80 + static_cast<uint64_t>(pair), 28, 28);
        INFO("pair " << pair);
        REQUIRE_THAT(psnr(a, b, 2, MetricSpace::y), Catch::Matchers::WithinAbs(ref_psnr(a, b, 2, false), 0.01));
        REQUIRE_THAT(psnr(a, b, 0, MetricSpace::rgb), Catch::Matchers::WithinAbs(ref_psnr(a, b, 0, true), 0.01));
        REQUIRE_THAT(ssim(a, b), Catch::Matchers::WithinAbs(ref_ssim(a, b), 1e-4));
    }
}

TEST_CASE("cosine similarity") {
    Tensor<float> a({3}), b({3});
    a[0] = 1;
    b[0] = 1;
    REQUIRE_THAT(cosine_similarity(a, b), Catch::Matchers::WithinAbs(1.0, 1e-12));
    b[0] = -1;
    REQUIRE_THAT(cosine_similarity(a, b), Catch::Matchers::WithinAbs(-1.0, 1e-12));
    b[0] = 0;
    b[1] = 1;
    REQUIRE_THAT(cosine_similarity(a, b), Catch::Matchers::WithinAbs(0.0, 1e-12));
}
