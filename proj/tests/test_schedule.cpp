#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "maskdiff/schedule.hpp"

using namespace maskdiff;

namespace {
const double kShiftOpt = -2.0 * std::log(5.5);
}

TEST_CASE("snr schedule hits the symmetry point", "[schedule]") {
    NoiseSchedule s = make_snr_schedule(10, 0.0);
    // t = 0.5 is on-grid for even T; tan(pi/4) = 1 so alpha_bar = sigmoid(0)
    REQUIRE(std::fabs(s.alpha_bar[5] - 0.5) < 1e-9);

    NoiseSchedule s1000 = make_snr_schedule(1000, 0.0);
    REQUIRE(std::fabs(s1000.alpha_bar[500] - 0.5) < 1e-9);
}

TEST_CASE("snr schedule with the tuned shift", "[schedule]") {
    NoiseSchedule s = make_snr_schedule(10, kShiftOpt);
    // sigmoid(-2 ln 5.5) = 1 / (1 + 5.5^2) = 0.032 exactly
    REQUIRE(std::fabs(s.alpha_bar[5] - 0.032) < 1e-12);
}

TEST_CASE("alpha_bar is strictly decreasing with alpha_bar[0] = 1", "[schedule]") {
    for (int T : {1, 7, 10, 1000}) {
        for (double shift : {0.0, kShiftOpt, 1.5}) {
            NoiseSchedule s = make_snr_schedule(T, shift);
            REQUIRE(s.alpha_bar[0] == 1.0);
            for (int t = 1; t <= T; ++t) {
                REQUIRE(s.alpha_bar[t] < s.alpha_bar[t - 1]);
                REQUIRE(s.alpha_bar[t] > 0.0);
                REQUIRE(s.alpha_bar[t] < 1.0);
                REQUIRE(s.beta[t - 1] > 0.0);
                REQUIRE(s.beta[t - 1] < 1.0);
            }
        }
    }
}

TEST_CASE("schedule construction rejects bad arguments", "[schedule]") {
    REQUIRE_THROWS_AS(make_snr_schedule(0, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(make_snr_schedule(-3, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(make_snr_schedule(10, std::nan("")), std::invalid_argument);
    REQUIRE_THROWS_AS(make_snr_schedule(10, INFINITY), std::invalid_argument);
    REQUIRE_THROWS_AS(make_cosine_schedule(0), std::invalid_argument);
}

TEST_CASE("log snr matches alpha_bar", "[schedule]") {
    for (const NoiseSchedule& s :
         {make_snr_schedule(10, 0.0), make_snr_schedule(50, kShiftOpt), make_cosine_schedule(25)}) {
        for (int t = 1; t <= s.num_steps; ++t) {
            double snr = s.alpha_bar[t] / (1.0 - s.alpha_bar[t]);
            REQUIRE(std::fabs(std::exp(s.log_snr(t)) - snr) <= 1e-9 * snr);
        }
    }
}

TEST_CASE("larger shift keeps more signal everywhere", "[schedule]") {
    NoiseSchedule lo = make_snr_schedule(40, -1.0);
    NoiseSchedule mid = make_snr_schedule(40, 0.0);
    NoiseSchedule hi = make_snr_schedule(40, 0.5);
    for (int t = 1; t <= 40; ++t) {
        REQUIRE(lo.alpha_bar[t] < mid.alpha_bar[t]);
        REQUIRE(mid.alpha_bar[t] < hi.alpha_bar[t]);
    }
}

TEST_CASE("cosine schedule basics", "[schedule]") {
    NoiseSchedule s = make_cosine_schedule(10);
    REQUIRE(s.alpha_bar[0] == 1.0);
    for (int t = 1; t <= 10; ++t) {
        REQUIRE(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        REQUIRE(s.beta[t - 1] <= 0.999);
        REQUIRE(s.beta[t - 1] > 0.0);
    }
    // the final ratio is exactly the clip
    REQUIRE(std::fabs(s.beta[9] - 0.999) < 1e-12);
}

TEST_CASE("forward marginal params", "[schedule]") {
    NoiseSchedule s = make_snr_schedule(10, 0.0);
    auto [a5, b5] = forward_marginal_params(s, 5);
    REQUIRE(std::fabs(a5 - 0.7071) < 1e-4);
    REQUIRE(std::fabs(b5 - 0.7071) < 1e-4);

    for (int T : {10, 1000}) {
        for (double shift : {0.0, kShiftOpt}) {
            NoiseSchedule sc = make_snr_schedule(T, shift);
            for (int t = 1; t <= T; ++t) {
                auto [a, b] = forward_marginal_params(sc, t);
                REQUIRE(std::fabs(a * a + b * b - 1.0) < 1e-12);
            }
        }
    }
    REQUIRE_THROWS_AS(forward_marginal_params(s, 0), std::out_of_range);
    REQUIRE_THROWS_AS(forward_marginal_params(s, 11), std::out_of_range);
}

TEST_CASE("posterior coefficients", "[schedule]") {
    NoiseSchedule s = make_snr_schedule(10, 0.0);

    SECTION("final reverse step is deterministic") {
        PosteriorCoeffs c = posterior_coeffs(s, 1);
        REQUIRE(c.c_xt == 0.0);
        REQUIRE(c.c_x0 == 1.0);
        REQUIRE(c.sigma == 0.0);
    }

    SECTION("mean identity holds for every step") {
        for (int T : {10, 1000}) {
            for (double shift : {0.0, kShiftOpt}) {
                NoiseSchedule sc = make_snr_schedule(T, shift);
                for (int t = 1; t <= T; ++t) {
                    PosteriorCoeffs c = posterior_coeffs(sc, t);
                    double lhs = c.c_xt * std::sqrt(sc.alpha_bar[t]) + c.c_x0;
                    REQUIRE(std::fabs(lhs - std::sqrt(sc.alpha_bar[t - 1])) < 1e-9);
                }
            }
        }
    }

    SECTION("coefficients match direct recomputation from the alpha_bar array") {
        for (int t : {2, 5, 10}) {
            PosteriorCoeffs c = posterior_coeffs(s, t);
            double ab_t = s.alpha_bar[t], ab_p = s.alpha_bar[t - 1];
            double beta = 1.0 - ab_t / ab_p;
            double alpha = ab_t / ab_p;
            REQUIRE(std::fabs(c.c_xt - std::sqrt(alpha) * (1.0 - ab_p) / (1.0 - ab_t)) < 1e-12);
            REQUIRE(std::fabs(c.c_x0 - std::sqrt(ab_p) * beta / (1.0 - ab_t)) < 1e-12);
            double sig2 = (1.0 - ab_p) / (1.0 - ab_t) * beta;
            REQUIRE(std::fabs(c.sigma - std::sqrt(sig2)) < 1e-12);
        }
    }

    SECTION("out-of-range step throws") {
        REQUIRE_THROWS_AS(posterior_coeffs(s, 0), std::out_of_range);
        REQUIRE_THROWS_AS(posterior_coeffs(s, 11), std::out_of_range);
    }
}

TEST_CASE("very fine grids stay strictly monotone", "[schedule]") {
    // the endpoint clip scales with T, so no two grid points collapse
    NoiseSchedule s = make_snr_schedule(5000, 0.0);
    for (int t = 1; t <= 5000; ++t) REQUIRE(s.alpha_bar[t] < s.alpha_bar[t - 1]);
}
