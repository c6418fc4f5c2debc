#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "maskdiff/core/rng.hpp"
#include "maskdiff/losses.hpp"
#include "oracles.hpp"

using namespace maskdiff;

namespace {

std::vector<double> random_pred(Rng& rng, size_t n) {
    std::vector<double> p(n);
    for (auto& v : p) v = rng.uniform(0.05, 0.95);
    return p;
}

std::vector<double> random_gt(Rng& rng, size_t n) {
    std::vector<double> g(n);
    for (auto& v : g) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    return g;
}

}  // namespace

TEST_CASE("boundary weights are one on constant masks", "[losses]") {
    for (double c : {0.0, 1.0}) {
        std::vector<double> gt(8 * 8, c);
        auto w = boundary_weights(gt, 8, 8);
        for (double v : w) REQUIRE(v == 1.0);
    }
}

TEST_CASE("boundary weights stay in [1,6] and match direct pooling", "[losses]") {
    Rng rng(11);
    for (int rep = 0; rep < 5; ++rep) {
        int h = 8, w = 8;
        auto gt = random_gt(rng, static_cast<size_t>(h) * w);
        auto wts = boundary_weights(gt, h, w);
        auto pooled = oracle::meanpool_symmetric(gt, h, w, 31);
        for (size_t i = 0; i < wts.size(); ++i) {
            REQUIRE(wts[i] >= 1.0);
            REQUIRE(wts[i] <= 6.0);
            REQUIRE(std::fabs(wts[i] - (1.0 + 5.0 * std::fabs(pooled[i] - gt[i]))) < 1e-12);
        }
    }
}

TEST_CASE("boundary weights peak next to the contour", "[losses]") {
    // 8x8 step mask: left half background, right half foreground. A window
    // matched to the image makes the peak location unambiguous.
    int h = 8, w = 8;
    std::vector<double> gt(static_cast<size_t>(h) * w, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 4; x < w; ++x) gt[static_cast<size_t>(y) * w + x] = 1.0;
    auto wts = boundary_weights(gt, h, w, 5);
    auto pooled = oracle::meanpool_symmetric(gt, h, w, 5);
    double best = 0.0;
    for (size_t i = 0; i < wts.size(); ++i) {
        REQUIRE(std::fabs(wts[i] - (1.0 + 5.0 * std::fabs(pooled[i] - gt[i]))) < 1e-12);
        best = std::max(best, wts[i]);
    }
    for (size_t i = 0; i < wts.size(); ++i) {
        int x = static_cast<int>(i) % w;
        if (wts[i] == best) REQUIRE((x == 3 || x == 4));  // adjacent to the step
    }
}

TEST_CASE("boundary weights reject non-binary masks", "[losses]") {
    REQUIRE_THROWS_AS(boundary_weights(std::vector<double>(64, 0.5), 8, 8), std::invalid_argument);
}

TEST_CASE("weighted bce basics", "[losses]") {
    Rng rng(3);
    auto gt = random_gt(rng, 16);
    std::vector<double> w(16, 1.0);

    SECTION("perfect prediction costs only the clip") {
        double l = weighted_bce(gt, gt, w);
        REQUIRE(l >= 0.0);
        REQUIRE(l < 1.1e-7);
    }

    SECTION("unit weights reduce to plain mean bce") {
        auto p = random_pred(rng, 16);
        double mean = 0.0;
        for (size_t i = 0; i < p.size(); ++i)
            mean += -gt[i] * std::log(p[i]) - (1.0 - gt[i]) * std::log(1.0 - p[i]);
        mean /= 16.0;
        REQUIRE(std::fabs(weighted_bce(p, gt, w) - mean) < 1e-12);
    }

    SECTION("shape mismatch throws") {
        REQUIRE_THROWS_AS(weighted_bce(std::vector<double>(4, 0.5), gt, w), std::invalid_argument);
    }
}

TEST_CASE("weighted iou basics", "[losses]") {
    SECTION("perfect binary prediction has zero loss") {
        std::vector<double> gt = {1, 0, 1, 1, 0, 0, 1, 0};
        std::vector<double> w = {1.5, 1, 2, 1, 1, 3, 1, 1};
        REQUIRE(weighted_iou(gt, gt, w) == 0.0);
    }

    SECTION("inverted prediction on a half-ones 2x2 mask is near one") {
        std::vector<double> gt = {1, 1, 0, 0};
        std::vector<double> pred = {0, 0, 1, 1};
        auto w = boundary_weights(gt, 2, 2);
        // direct evaluation of the loss formula
        double inter = 0.0, uni = 0.0;
        for (size_t i = 0; i < 4; ++i) {
            inter += w[i] * pred[i] * gt[i];
            uni += w[i] * (pred[i] + gt[i] - pred[i] * gt[i]);
        }
        double expect = 1.0 - (inter + 1.0) / (uni + 1.0);
        double got = weighted_iou(pred, gt, w);
        REQUIRE(std::fabs(got - expect) < 1e-12);
        REQUIRE(got > 0.8);
    }
}

TEST_CASE("loss gradients match central finite differences", "[losses]") {
    Rng rng(17);
    const double h = 1e-4;
    for (int rep = 0; rep < 20; ++rep) {
        auto gt = random_gt(rng, 16);
        auto pred = random_pred(rng, 16);
        auto w = boundary_weights(gt, 4, 4);

        std::vector<double> gb, gi;
        weighted_bce(pred, gt, w, &gb);
        weighted_iou(pred, gt, w, &gi);

        for (size_t i = 0; i < pred.size(); ++i) {
            double fb = oracle::fd_partial(
                [&](const std::vector<double>& p) { return weighted_bce(p, gt, w); }, pred, i, h);
            double fi = oracle::fd_partial(
                [&](const std::vector<double>& p) { return weighted_iou(p, gt, w); }, pred, i, h);
            REQUIRE(oracle::rel_err(gb[i], fb) < 1e-3);
            REQUIRE(oracle::rel_err(gi[i], fi) < 1e-3);
        }
    }
}

TEST_CASE("total loss composition", "[losses]") {
    Rng rng(23);
    int h = 6, w = 6;
    std::vector<double> x0(static_cast<size_t>(h) * w);
    for (auto& v : x0) v = rng.uniform() < 0.5 ? -1.0 : 1.0;

    SECTION("perfect reconstruction is tiny and non-negative") {
        LossBreakdown lb = total_loss(x0, x0, h, w);
        REQUIRE(lb.total >= 0.0);
        REQUIRE(lb.total < 1e-6);
        REQUIRE(lb.total == lb.w_bce + lb.w_iou);
    }

    SECTION("matches the two sub-losses computed separately") {
        std::vector<double> xhat(x0.size());
        for (auto& v : xhat) v = rng.uniform(-0.9, 0.9);
        LossBreakdown lb = total_loss(xhat, x0, h, w);
        std::vector<double> p(xhat.size()), g(x0.size());
        for (size_t i = 0; i < xhat.size(); ++i) {
            p[i] = (xhat[i] + 1.0) / 2.0;
            g[i] = (x0[i] + 1.0) / 2.0;
        }
        auto wts = boundary_weights(g, h, w);
        REQUIRE(std::fabs(lb.w_bce - weighted_bce(p, g, wts)) < 1e-12);
        REQUIRE(std::fabs(lb.w_iou - weighted_iou(p, g, wts)) < 1e-12);
        REQUIRE(lb.total >= 0.0);
    }

    SECTION("gradient chain matches finite differences") {
        std::vector<double> xhat(x0.size());
        for (auto& v : xhat) v = rng.uniform(-0.9, 0.9);
        std::vector<double> grad;
        total_loss(xhat, x0, h, w, &grad);
        for (size_t i = 0; i < 8; ++i) {
            double fd = oracle::fd_partial(
                [&](const std::vector<double>& p) { return total_loss(p, x0, h, w).total; }, xhat, i,
                1e-4);
            REQUIRE(oracle::rel_err(grad[i], fd) < 1e-3);
        }
    }

    SECTION("non-binary x0 is rejected") {
        std::vector<double> bad(x0.size(), 0.25);
        REQUIRE_THROWS_AS(total_loss(bad, bad, h, w), std::invalid_argument);
    }
}

TEST_CASE("losses are permutation equivariant", "[losses]") {
    Rng rng(31);
    auto gt = random_gt(rng, 16);
    auto pred = random_pred(rng, 16);
    std::vector<double> w(16);
    for (auto& v : w) v = rng.uniform(1.0, 6.0);

    std::vector<size_t> perm(16);
    for (size_t i = 0; i < 16; ++i) perm[i] = i;
    for (size_t i = 15; i > 0; --i) std::swap(perm[i], perm[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(i)))]);

    std::vector<double> pp(16), pg(16), pw(16);
    for (size_t i = 0; i < 16; ++i) {
        pp[i] = pred[perm[i]];
        pg[i] = gt[perm[i]];
        pw[i] = w[perm[i]];
    }
    REQUIRE(std::fabs(weighted_bce(pred, gt, w) - weighted_bce(pp, pg, pw)) < 1e-12);
    REQUIRE(std::fabs(weighted_iou(pred, gt, w) - weighted_iou(pp, pg, pw)) < 1e-12);
}
