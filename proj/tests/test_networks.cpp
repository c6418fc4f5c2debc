#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "maskdiff/core/rng.hpp"
#include "maskdiff/networks.hpp"

using namespace maskdiff;
using nn::Var;

namespace {

// small config so forward/backward stays fast in unit tests
ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.atcn.stage_channels = {8, 16, 24, 32};
    cfg.atcn.stage_depths = {1, 1, 1, 1};
    cfg.atcn.attention_reduction = {8, 4, 2, 1};
    cfg.atcn.num_heads = {1, 2, 4, 4};
    cfg.atcn.mlp_ratio = 2;
    cfg.dn.base_channels = 8;
    cfg.dn.depth = 3;
    cfg.dn.time_embed_dim = 32;
    return cfg;
}

Tensor randn(Rng& rng, std::vector<int> shape, float scale = 1.0f) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal()) * scale;
    return t;
}

}  // namespace

TEST_CASE("pyramid shapes follow the stride chain", "[networks]") {
    Model model(tiny_config(), 1);
    Rng rng(3);
    Var image = Var::leaf(randn(rng, {1, 3, 64, 64}));
    Var x_t = Var::leaf(randn(rng, {1, 1, 64, 64}));
    nn::NoGradGuard ng;
    FeaturePyramid pyr = model.atcn_forward(image, x_t, {5}, 10);
    const int sizes[4] = {16, 8, 4, 2};
    for (int i = 0; i < 4; ++i) {
        REQUIRE(pyr.f[i].value().dim(2) == sizes[i]);
        REQUIRE(pyr.f[i].value().dim(3) == sizes[i]);
        REQUIRE(pyr.f[i].value().dim(1) == tiny_config().atcn.stage_channels[i]);
        for (int64_t j = 0; j < pyr.f[i].value().numel(); ++j)
            REQUIRE(std::isfinite(pyr.f[i].value()[j]));
    }
}

TEST_CASE("zoe embedding ignores the noised mask at initialization", "[networks]") {
    Model model(tiny_config(), 7);
    Rng rng(5);
    Var image = Var::leaf(randn(rng, {2, 3, 64, 64}));
    Var xa = Var::leaf(randn(rng, {2, 1, 64, 64}));
    Var xb = Var::leaf(randn(rng, {2, 1, 64, 64}));
    nn::NoGradGuard ng;

    Var ta = model.zoe_embed(image, xa);
    Var tb = model.zoe_embed(image, xb);
    REQUIRE(ta.value().dim(1) == 256);  // 64/4 squared
    REQUIRE(max_abs_diff(ta.value(), tb.value()) < 1e-6f);

    FeaturePyramid pa = model.atcn_forward(image, xa, {3, 9}, 10);
    FeaturePyramid pb = model.atcn_forward(image, xb, {3, 9}, 10);
    for (int i = 0; i < 4; ++i)
        REQUIRE(max_abs_diff(pa.f[i].value(), pb.f[i].value()) < 1e-5f);
}

TEST_CASE("one training step makes zoe sensitive to the mask", "[networks]") {
    Model model(tiny_config(), 9);
    Rng rng(7);
    Var image = Var::leaf(randn(rng, {1, 3, 32, 32}));
    Tensor xa = randn(rng, {1, 1, 32, 32});
    Tensor xb = randn(rng, {1, 1, 32, 32});

    // gradient step on a probe loss that depends on x_t through the embedding
    Var tokens = model.zoe_embed(image, Var::leaf(xa, true));
    Tensor seed(tokens.value().shape());
    rng.fill_normal(seed);
    nn::backward(tokens, seed);
    for (auto& p : model.parameters()) {
        if (p.n->grad.numel() == 0) continue;
        for (int64_t i = 0; i < p.value().numel(); ++i) p.n->value[i] -= 0.1f * p.n->grad[i];
    }

    nn::NoGradGuard ng;
    Var ta = model.zoe_embed(image, Var::leaf(xa));
    Var tb = model.zoe_embed(image, Var::leaf(xb));
    REQUIRE(max_abs_diff(ta.value(), tb.value()) > 1e-4f);
}

TEST_CASE("time tokens are deterministic and depend on t", "[networks]") {
    Model model(tiny_config(), 11);
    Var a = model.time_token({1}, 10, 0);
    Var b = model.time_token({1}, 10, 0);
    REQUIRE(max_abs_diff(a.value(), b.value()) == 0.0f);

    Var c = model.time_token({10}, 10, 0);
    double l2 = 0;
    for (int64_t i = 0; i < a.value().numel(); ++i) {
        double d = a.value()[i] - c.value()[i];
        l2 += d * d;
    }
    REQUIRE(l2 > 0.0);
}

TEST_CASE("local emphasis upsamples to the quarter grid and stays non-negative", "[networks]") {
    Model model(tiny_config(), 13);
    Rng rng(11);
    nn::NoGradGuard ng;
    Var f4 = Var::leaf(randn(rng, {1, 32, 2, 2}));
    Var up = model.le(f4, 3, 16, 16);
    REQUIRE(up.value().dim(2) == 16);
    REQUIRE(up.value().dim(3) == 16);
    for (int64_t i = 0; i < up.value().numel(); ++i) REQUIRE(up.value()[i] >= 0.0f);
}

TEST_CASE("bilinear upsampling preserves constant maps", "[networks]") {
    Var c = Var::leaf(Tensor({1, 2, 3, 3}, 1.75f));
    nn::NoGradGuard ng;
    Var up = nn::upsample_bilinear(c, 9, 7);
    for (int64_t i = 0; i < up.value().numel(); ++i) REQUIRE(up.value()[i] == 1.75f);
}

TEST_CASE("pyramid fusion runs coarse to fine", "[networks]") {
    Model model(tiny_config(), 17);
    Rng rng(13);
    nn::NoGradGuard ng;
    std::array<Var, 4> fup;
    for (int i = 0; i < 4; ++i) fup[i] = Var::leaf(randn(rng, {1, 8, 16, 16}));
    auto z = model.fuse_pyramid_all(fup);
    REQUIRE(z[0].value().dim(1) == 8);
    REQUIRE(z[0].value().dim(2) == 16);

    // changing F1 only moves Z1
    std::array<Var, 4> mod = fup;
    mod[0] = Var::leaf(randn(rng, {1, 8, 16, 16}));
    auto z_f1 = model.fuse_pyramid_all(mod);
    REQUIRE(max_abs_diff(z_f1[0].value(), z[0].value()) > 0.0f);
    for (int i = 1; i < 4; ++i) REQUIRE(max_abs_diff(z_f1[i].value(), z[i].value()) == 0.0f);

    // changing F4 moves every Z
    mod = fup;
    mod[3] = Var::leaf(randn(rng, {1, 8, 16, 16}));
    auto z_f4 = model.fuse_pyramid_all(mod);
    for (int i = 0; i < 4; ++i) REQUIRE(max_abs_diff(z_f4[i].value(), z[i].value()) > 0.0f);

    for (int64_t i = 0; i < z[0].value().numel(); ++i) REQUIRE(std::isfinite(z[0].value()[i]));
}

TEST_CASE("denoiser output is mask-shaped and clamped", "[networks]") {
    Model model(tiny_config(), 19);
    Rng rng(17);
    nn::NoGradGuard ng;
    Var x_t = Var::leaf(randn(rng, {2, 1, 32, 32}));
    Var z1 = Var::leaf(randn(rng, {2, 8, 8, 8}));
    Var out = model.dn_forward(x_t, z1, {2, 8}, 10);
    REQUIRE(out.value().same_shape(x_t.value()));
    for (int64_t i = 0; i < out.value().numel(); ++i) {
        REQUIRE(out.value()[i] >= -1.0f);
        REQUIRE(out.value()[i] <= 1.0f);
    }

    // the step index modulates the denoiser through AdaGN
    Var o1 = model.dn_forward(x_t, z1, {1, 1}, 10);
    Var o2 = model.dn_forward(x_t, z1, {9, 9}, 10);
    REQUIRE(max_abs_diff(o1.value(), o2.value()) > 0.0f);
}

TEST_CASE("full forward reaches every parameter", "[networks]") {
    Model model(tiny_config(), 23);
    Rng rng(19);
    Var image = Var::leaf(randn(rng, {2, 3, 32, 32}));
    Var x_t = Var::leaf(randn(rng, {2, 1, 32, 32}));
    Var out = model.forward(image, x_t, {3, 7}, 10);
    Tensor seed(out.value().shape());
    rng.fill_normal(seed);
    nn::backward(out, seed);
    for (auto& p : model.parameters()) {
        INFO("parameter " << p.n->name);
        REQUIRE(p.n->grad.numel() == p.value().numel());
        bool nonzero = false;
        for (int64_t i = 0; i < p.n->grad.numel(); ++i)
            if (p.n->grad[i] != 0.0f) {
                nonzero = true;
                break;
            }
        REQUIRE(nonzero);
    }
}

TEST_CASE("batch elements are processed independently", "[networks]") {
    Model model(tiny_config(), 29);
    Rng rng(23);
    nn::NoGradGuard ng;
    Tensor img = randn(rng, {2, 3, 32, 32});
    Tensor xt = randn(rng, {2, 1, 32, 32});
    Var batched = model.forward(Var::leaf(img), Var::leaf(xt), {4, 8}, 10);

    for (int n = 0; n < 2; ++n) {
        Tensor i1({1, 3, 32, 32}), x1({1, 1, 32, 32});
        std::copy(img.data() + n * 3 * 32 * 32, img.data() + (n + 1) * 3 * 32 * 32, i1.data());
        std::copy(xt.data() + n * 32 * 32, xt.data() + (n + 1) * 32 * 32, x1.data());
        Var single = model.forward(Var::leaf(i1), Var::leaf(x1), {n == 0 ? 4 : 8}, 10);
        float md = 0;
        for (int64_t i = 0; i < single.value().numel(); ++i)
            md = std::max(md, std::fabs(single.value()[i] - batched.value()[n * 32 * 32 + i]));
        REQUIRE(md < 1e-5f);
    }
}

TEST_CASE("forward is deterministic in evaluation mode", "[networks]") {
    Model model(tiny_config(), 31);
    Rng rng(29);
    nn::NoGradGuard ng;
    Var image = Var::leaf(randn(rng, {1, 3, 32, 32}));
    Var x_t = Var::leaf(randn(rng, {1, 1, 32, 32}));
    Var a = model.forward(image, x_t, {5}, 10);
    Var b = model.forward(image, x_t, {5}, 10);
    REQUIRE(max_abs_diff(a.value(), b.value()) == 0.0f);
}

TEST_CASE("desk-scale default stays under ten million parameters", "[networks]") {
    Model model(ModelConfig{}, 1);
    REQUIRE(model.num_params() < 10'000'000);
    REQUIRE(model.num_params() > 100'000);
}

TEST_CASE("config validation", "[networks]") {
    ModelConfig bad = tiny_config();
    bad.atcn.stage_channels[1] = 15;  // not divisible by heads
    REQUIRE_THROWS_AS(Model(bad, 1), std::invalid_argument);

    ModelConfig bad2 = tiny_config();
    bad2.dn.base_channels = 0;
    REQUIRE_THROWS_AS(Model(bad2, 1), std::invalid_argument);

    Model model(tiny_config(), 1);
    Rng rng(31);
    Var image = Var::leaf(randn(rng, {1, 3, 30, 30}));  // not divisible by 4
    Var x_t = Var::leaf(randn(rng, {1, 1, 30, 30}));
    REQUIRE_THROWS_AS(model.forward(image, x_t, {1}, 10), std::invalid_argument);
}
