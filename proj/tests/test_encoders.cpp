// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "cdformer/encoders.hpp"
#include "support/grad_check.hpp"
#include "support/module_helpers.hpp"
#include "support/test_images.hpp"

using namespace cdformer;
namespace agd = cdformer::ag;
using cdformer::testing::grad_check_params;
using cdformer::testing::params_of;
using cdformer::testing::random_tensor;
using cdformer::testing::zero_all;

using D = double;

namespace {

ModelConfig enc_cfg() {
    ModelConfig m = toy_model();
    m.scale = 2;
    m.cz = 16;
    m.enc_width = 8;
    m.enc_mlp_hidden = 12;
    return m;
}

} // namespace

TEST_CASE("gt encoder output shape and determinism") {
    Rng rng(31);
    ModelConfig cfg = enc_cfg();
    GtEncoder<D> enc(cfg, rng);
    auto hr = agd::constant(cdformer::testing::make_probe_image<D>(3, 8, 8).to_tensor());
    auto lr = agd::constant(cdformer::testing::make_probe_image<D>(4, 4, 4).to_tensor());

    auto z1 = enc(hr, lr);
    auto z2 = enc(hr, lr);
    REQUIRE(z1->value.shape() == std::vector<int>{cfg.cz});
    REQUIRE(agd::all_finite(z1->value));
    for (int64_t i = 0; i < z1->value.size(); ++i) REQUIRE(z1->value[i] == z2->value[i]);
}

TEST_CASE("gt encoder rejects mismatched dims") {
    Rng rng(32);
    ModelConfig cfg = enc_cfg();
    GtEncoder<D> enc(cfg, rng);
    auto hr = agd::constant(Tensor<D>({8, 8, 3}));
    auto lr = agd::constant(Tensor<D>({5, 4, 3}));
    REQUIRE_THROWS_AS(enc(hr, lr), ConfigError);
}

TEST_CASE("zeroed encoder weights give the zero vector") {
    Rng rng(33);
    ModelConfig cfg = enc_cfg();
    SECTION("gt encoder") {
        GtEncoder<D> enc(cfg, rng);
        auto plist = params_of<D>(enc);
        zero_all(plist);
        auto z = enc(agd::constant(cdformer::testing::make_probe_image<D>(5, 8, 8).to_tensor()),
                     agd::constant(cdformer::testing::make_probe_image<D>(6, 4, 4).to_tensor()));
        for (int64_t i = 0; i < z->value.size(); ++i) REQUIRE(z->value[i] == 0.0);
    }
    SECTION("lr encoder") {
        LrEncoder<D> enc(cfg, rng);
        auto plist = params_of<D>(enc);
        zero_all(plist);
        auto z = enc(agd::constant(cdformer::testing::make_probe_image<D>(7, 4, 4).to_tensor()));
        REQUIRE(z->value.shape() == std::vector<int>{cfg.cz});
        for (int64_t i = 0; i < z->value.size(); ++i) REQUIRE(z->value[i] == 0.0);
    }
}

TEST_CASE("ablation branch wiring") {
    Rng rng(34);
    ModelConfig cfg = enc_cfg();
    auto hr = agd::constant(cdformer::testing::make_probe_image<D>(8, 8, 8).to_tensor());
    auto lr1 = agd::constant(cdformer::testing::make_probe_image<D>(9, 4, 4).to_tensor());
    auto lr2 = agd::constant(cdformer::testing::make_probe_image<D>(10, 4, 4).to_tensor());

    SECTION("content-only encoder ignores the LR image") {
        cfg.prior_mode = PriorMode::content;
        GtEncoder<D> enc(cfg, rng);
        auto za = enc(hr, lr1);
        auto zb = enc(hr, lr2);
        for (int64_t i = 0; i < za->value.size(); ++i) REQUIRE(za->value[i] == zb->value[i]);
    }
    SECTION("degradation-only encoder depends on the LR image") {
        cfg.prior_mode = PriorMode::degradation;
        GtEncoder<D> enc(cfg, rng);
        auto za = enc(hr, lr1);
        auto zb = enc(hr, lr2);
        bool differs = false;
        for (int64_t i = 0; i < za->value.size(); ++i) differs = differs || za->value[i] != zb->value[i];
        REQUIRE(differs);
    }
    SECTION("prior mode none has no encoder") {
        cfg.prior_mode = PriorMode::none;
        GtEncoder<D> enc(cfg, rng);
        REQUIRE_THROWS_AS(enc(hr, lr1), ConfigError);
        auto plist = params_of<D>(enc);
        REQUIRE(plist.empty());
    }
}

TEST_CASE("lr encoder is a function of the LR image alone") {
    Rng rng(35);
    ModelConfig cfg = enc_cfg();
    LrEncoder<D> enc(cfg, rng);
    auto lr = agd::constant(cdformer::testing::make_probe_image<D>(11, 4, 4).to_tensor());
    auto z1 = enc(lr);
    auto z2 = enc(lr);
    for (int64_t i = 0; i < z1->value.size(); ++i) REQUIRE(z1->value[i] == z2->value[i]);
    REQUIRE(agd::all_finite(z1->value));
}

TEST_CASE("encoder gradients match finite differences") {
    Rng rng(36);
    ModelConfig cfg = enc_cfg();
    cfg.enc_width = 6;
    cfg.enc_mlp_hidden = 8;
    cfg.cz = 6;
    GtEncoder<D> enc(cfg, rng);
    auto hr = agd::constant(cdformer::testing::make_probe_image<D>(12, 6, 6).to_tensor());
    auto lr = agd::constant(cdformer::testing::make_probe_image<D>(13, 3, 3).to_tensor());
    Tensor<D> probe = random_tensor<D>({cfg.cz}, rng);
    auto make = [&] { return agd::dot_with(enc(hr, lr), probe); };
    auto plist = params_of<D>(enc);
    Rng prng(17);
    REQUIRE(grad_check_params<D>(make, plist, 10, prng, 1e-6) < 1e-3);
}
