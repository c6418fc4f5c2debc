#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "maskdiff/sampler.hpp"

using namespace maskdiff;

namespace {

Tensor blob(int n, float r) {
    Tensor m({n, n}, -1.0f);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            if ((y - n / 2.0f) * (y - n / 2.0f) + (x - n / 2.0f) * (x - n / 2.0f) <= r * r)
                m.at(y, x) = 1.0f;
    return m;
}

}  // namespace

TEST_CASE("ddpm_step final step is deterministic copy of x0_hat", "[sampler]") {
    NoiseSchedule s = make_snr_schedule(10, 0.0);
    Rng rng(3);
    Tensor x_t = rng.normal_tensor({8, 8});
    Tensor x0 = blob(8, 3.0f);
    Tensor out = ddpm_step(x_t, x0, 1, s, nullptr);
    REQUIRE(max_abs_diff(out, x0) == 0.0f);

    Tensor z({8, 8}, 0.5f);
    REQUIRE_THROWS_AS(ddpm_step(x_t, x0, 1, s, &z), std::invalid_argument);
}

TEST_CASE("ddpm_step posterior identity", "[sampler]") {
    NoiseSchedule s = make_snr_schedule(10, 0.0);
    Tensor x0 = blob(8, 2.5f);
    for (int t = 2; t <= 10; ++t) {
        auto [a, b] = forward_marginal_params(s, t);
        Tensor x_t(x0.shape());
        for (int64_t i = 0; i < x0.numel(); ++i) x_t[i] = static_cast<float>(a) * x0[i];
        Tensor z(x0.shape(), 0.0f);
        Tensor out = ddpm_step(x_t, x0, t, s, &z);
        double ap = std::sqrt(s.alpha_bar[t - 1]);
        for (int64_t i = 0; i < out.numel(); ++i)
            REQUIRE(std::fabs(out[i] - ap * x0[i]) < 1e-5);
    }
}

TEST_CASE("ddpm_step matches direct coefficient evaluation", "[sampler]") {
    NoiseSchedule s = make_snr_schedule(10, 0.0);
    Rng rng(5);
    Tensor x_t = rng.normal_tensor({4, 4});
    Tensor x0 = blob(4, 1.4f);
    Tensor z = rng.normal_tensor({4, 4});
    int t = 7;
    Tensor out = ddpm_step(x_t, x0, t, s, &z);
    double ab_t = s.alpha_bar[t], ab_p = s.alpha_bar[t - 1];
    double beta = 1.0 - ab_t / ab_p;
    double cxt = std::sqrt(ab_t / ab_p) * (1.0 - ab_p) / (1.0 - ab_t);
    double cx0 = std::sqrt(ab_p) * beta / (1.0 - ab_t);
    double sg = std::sqrt((1.0 - ab_p) / (1.0 - ab_t) * beta);
    for (int64_t i = 0; i < out.numel(); ++i)
        REQUIRE(std::fabs(out[i] - (cxt * x_t[i] + cx0 * x0[i] + sg * z[i])) < 1e-5);
}

TEST_CASE("ddpm_step validates inputs", "[sampler]") {
    NoiseSchedule s = make_snr_schedule(10, 0.0);
    Tensor x_t({4, 4}, 0.0f);
    Tensor bad({4, 4}, 1.5f);  // outside [-1,1]
    REQUIRE_THROWS_AS(ddpm_step(x_t, bad, 5, s, nullptr), std::invalid_argument);
    Tensor x0({2, 2}, 0.0f);
    REQUIRE_THROWS_AS(ddpm_step(x_t, x0, 5, s, nullptr), std::invalid_argument);
    Tensor ok({4, 4}, 0.0f);
    REQUIRE_THROWS_AS(ddpm_step(x_t, ok, 0, s, nullptr), std::out_of_range);
}

TEST_CASE("oracle denoiser recovers the truth exactly", "[sampler]") {
    NoiseSchedule s = make_snr_schedule(10, 0.0);
    Tensor truth = blob(16, 5.0f);
    DenoiseFn oracle = [&truth](const Tensor&, int) { return truth; };
    PredictionHistory hist = sample_chain(oracle, 16, 16, s, 99);
    REQUIRE(hist.preds.size() == 10);
    // final x0_hat equals the truth in probability space
    const Tensor& last = hist.preds.back();
    for (int64_t i = 0; i < last.numel(); ++i)
        REQUIRE(std::fabs(last[i] - (truth[i] + 1.0f) * 0.5f) < 1e-6f);
    for (const auto& p : hist.preds)
        for (int64_t i = 0; i < p.numel(); ++i) {
            REQUIRE(p[i] >= 0.0f);
            REQUIRE(p[i] <= 1.0f);
        }
}

TEST_CASE("chains are reproducible under a fixed seed", "[sampler]") {
    NoiseSchedule s = make_snr_schedule(10, 0.0);
    Tensor truth = blob(12, 4.0f);
    // denoiser that depends on its input so the chain state matters
    DenoiseFn f = [&truth](const Tensor& x, int) {
        Tensor out(truth.shape());
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = std::min(1.0f, std::max(-1.0f, 0.8f * truth[i] + 0.1f * x[i]));
        return out;
    };
    PredictionHistory a = sample_chain(f, 12, 12, s, 1234);
    PredictionHistory b = sample_chain(f, 12, 12, s, 1234);
    REQUIRE(a.preds.size() == b.preds.size());
    for (size_t i = 0; i < a.preds.size(); ++i)
        REQUIRE(max_abs_diff(a.preds[i], b.preds[i]) == 0.0f);

    PredictionHistory c = sample_chain(f, 12, 12, s, 1235);
    REQUIRE(max_abs_diff(a.preds[0], c.preds[0]) > 0.0f);
}

TEST_CASE("adaptive threshold rules", "[sampler]") {
    SECTION("all-zero map stays all-zero") {
        Tensor p({4, 4}, 0.0f);
        Tensor b = adaptive_threshold(p);
        for (int64_t i = 0; i < b.numel(); ++i) REQUIRE(b[i] == 0.0f);
    }

    SECTION("binary map with mean one half maps to itself") {
        Tensor p({2, 2});
        p[0] = p[1] = 1.0f;
        p[2] = p[3] = 0.0f;
        Tensor b = adaptive_threshold(p);
        REQUIRE(max_abs_diff(b, p) == 0.0f);
    }

    SECTION("with the threshold held fixed, binarization is monotone") {
        Rng rng(7);
        Tensor p({4, 4});
        for (int64_t i = 0; i < p.numel(); ++i) p[i] = static_cast<float>(rng.uniform());
        double mean = 0;
        for (int64_t i = 0; i < p.numel(); ++i) mean += p[i];
        mean /= p.numel();
        float tau = static_cast<float>(std::min(2.0 * mean, 1.0 - 1e-6));
        Tensor before(p.shape());
        for (int64_t i = 0; i < p.numel(); ++i) before[i] = p[i] >= tau ? 1.0f : 0.0f;
        Tensor raised = p;
        raised[5] = std::min(1.0f, raised[5] + 0.3f);
        for (int64_t i = 0; i < p.numel(); ++i) {
            float after = raised[i] >= tau ? 1.0f : 0.0f;
            REQUIRE(after >= before[i]);
        }
    }

    SECTION("out-of-range values rejected") {
        Tensor p({2, 2}, 1.5f);
        REQUIRE_THROWS_AS(adaptive_threshold(p), std::invalid_argument);
    }
}

TEST_CASE("consensus ensemble hand cases", "[sampler]") {
    auto single = [](std::initializer_list<float> vals) {
        PredictionHistory h;
        Tensor p({2, 2});
        int i = 0;
        for (float v : vals) p[i++] = v;
        h.preds.push_back(p);
        return h;
    };

    SECTION("votes {1,1,0} with values {0.8,0.7,0.3} give 0.6") {
        // maps built so pixel 0 binarizes to 1,1,0 under the adaptive rule
        std::vector<PredictionHistory> hs = {single({0.8f, 0.2f, 0.2f, 0.2f}),
                                             single({0.7f, 0.1f, 0.1f, 0.1f}),
                                             single({0.3f, 0.9f, 0.9f, 0.9f})};
        REQUIRE(adaptive_threshold(hs[0].preds[0])[0] == 1.0f);
        REQUIRE(adaptive_threshold(hs[1].preds[0])[0] == 1.0f);
        REQUIRE(adaptive_threshold(hs[2].preds[0])[0] == 0.0f);
        EnsembleResult r = cte(hs);
        REQUIRE(std::fabs(r.mask[0] - 0.6f) < 1e-6f);
    }

    SECTION("votes {1,0,0} suppress the pixel entirely") {
        std::vector<PredictionHistory> hs = {single({0.8f, 0.2f, 0.2f, 0.2f}),
                                             single({0.2f, 0.8f, 0.8f, 0.8f}),
                                             single({0.3f, 0.9f, 0.9f, 0.9f})};
        REQUIRE(adaptive_threshold(hs[0].preds[0])[0] == 1.0f);
        REQUIRE(adaptive_threshold(hs[1].preds[0])[0] == 0.0f);
        REQUIRE(adaptive_threshold(hs[2].preds[0])[0] == 0.0f);
        EnsembleResult r = cte(hs);
        REQUIRE(r.mask[0] == 0.0f);
    }

    SECTION("unanimous predictions give binarization times the map") {
        Tensor p({2, 2});
        p[0] = 0.9f;
        p[1] = 0.1f;
        p[2] = 0.2f;
        p[3] = 0.1f;
        Tensor b = adaptive_threshold(p);
        std::vector<PredictionHistory> hs(4);
        for (auto& h : hs) h.preds.push_back(p);
        EnsembleResult r = cte(hs);
        for (int64_t i = 0; i < p.numel(); ++i)
            REQUIRE(std::fabs(r.mask[i] - b[i] * p[i]) < 1e-6f);
    }

    SECTION("empty input throws") {
        REQUIRE_THROWS_AS(cte({}), std::invalid_argument);
    }
}

TEST_CASE("floor vote equals strict majority with ties to one", "[sampler]") {
    for (int n = 1; n <= 30; ++n)
        for (int k = 0; k <= n; ++k) {
            float vote = std::floor(static_cast<float>(k) / n + 0.5f);
            float expect = (2 * k >= n) ? 1.0f : 0.0f;
            REQUIRE(std::min(1.0f, vote) == expect);
        }
}

TEST_CASE("consensus is invariant to prediction order", "[sampler]") {
    Rng rng(11);
    std::vector<PredictionHistory> hs(3);
    for (auto& h : hs)
        for (int r = 0; r < 4; ++r) {
            Tensor p({3, 3});
            for (int64_t i = 0; i < p.numel(); ++i) p[i] = static_cast<float>(rng.uniform());
            h.preds.push_back(p);
        }
    EnsembleResult a = cte(hs);
    std::swap(hs[0], hs[2]);
    std::reverse(hs[1].preds.begin(), hs[1].preds.end());
    EnsembleResult b = cte(hs);
    REQUIRE(max_abs_diff(a.mask, b.mask) == 0.0f);
}

TEST_CASE("predict pools chains correctly", "[sampler]") {
    NoiseSchedule s = make_snr_schedule(5, 0.0);
    Tensor truth = blob(8, 2.5f);
    DenoiseFn f = [&truth](const Tensor& x, int) {
        Tensor out(truth.shape());
        for (int64_t i = 0; i < out.numel(); ++i)
            out[i] = std::min(1.0f, std::max(-1.0f, 0.9f * truth[i] + 0.05f * x[i]));
        return out;
    };

    SECTION("ensemble3 equals consensus over three seeded chains") {
        uint64_t seed = 77;
        EnsembleResult r = predict(f, 8, 8, s, PredictMode::ensemble3, seed);
        REQUIRE(r.per_chain_final.size() == 3);
        std::vector<PredictionHistory> hs;
        for (int c = 0; c < 3; ++c)
            hs.push_back(sample_chain(f, 8, 8, s, mix_seed(seed, static_cast<uint64_t>(c))));
        size_t total = 0;
        for (auto& h : hs) total += h.preds.size();
        REQUIRE(total == 15);  // 3T pooled predictions
        EnsembleResult ref = cte(hs);
        REQUIRE(max_abs_diff(r.mask, ref.mask) == 0.0f);
    }

    SECTION("single mode with the oracle denoiser returns the truth") {
        DenoiseFn oracle = [&truth](const Tensor&, int) { return truth; };
        EnsembleResult r = predict(oracle, 8, 8, s, PredictMode::single, 5);
        REQUIRE(r.per_chain_final.size() == 1);
        for (int64_t i = 0; i < truth.numel(); ++i) {
            REQUIRE(r.mask[i] == (truth[i] > 0 ? 1.0f : 0.0f));
            REQUIRE(r.mask[i] >= 0.0f);
            REQUIRE(r.mask[i] <= 1.0f);
        }
    }

    SECTION("same seed gives bitwise-identical predictions") {
        EnsembleResult a = predict(f, 8, 8, s, PredictMode::ensemble3, 31);
        EnsembleResult b = predict(f, 8, 8, s, PredictMode::ensemble3, 31);
        REQUIRE(max_abs_diff(a.mask, b.mask) == 0.0f);
    }
}
