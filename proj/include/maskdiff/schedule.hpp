#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace maskdiff {

enum class ScheduleKind { snr_shifted, cosine };

inline const char* to_string(ScheduleKind k) {
    return k == ScheduleKind::snr_shifted ? "snr_shifted" : "cosine";
}

// Discrete diffusion timetable on the grid t_i = i/T with endpoints clipped to
// (kGridEps, 1-kGridEps). alpha_bar[0] = 1 by convention, which makes the last
// reverse step deterministic (sigma_1 = 0).
struct NoiseSchedule {
    int num_steps = 0;
    ScheduleKind kind = ScheduleKind::snr_shifted;
    double shift = 0.0;
    std::vector<double> alpha_bar;  // T+1 entries, index 0..T
    std::vector<double> beta;       // beta[t-1] is beta_t, t = 1..T
    std::vector<double> sigma;      // sigma[t-1] is sigma_t

    // endpoint clip; shrinks with T so the clipped endpoint never collides
    // with an interior grid point
    double grid_eps() const { return std::min(1e-3, 0.5 / num_steps); }

    double grid_t(int i) const {
        double t = static_cast<double>(i) / num_steps;
        double eps = grid_eps();
        return std::min(std::max(t, eps), 1.0 - eps);
    }

    // log(alpha_bar_t / (1 - alpha_bar_t)); analytic for the SNR kind
    double log_snr(int t) const {
        check_step(t);
        if (kind == ScheduleKind::snr_shifted)
            return -2.0 * std::log(std::tan(1.5707963267948966 * grid_t(t))) + shift;
        return std::log(alpha_bar[t] / (1.0 - alpha_bar[t]));
    }

    void check_step(int t) const {
        if (t < 1 || t > num_steps)
            throw std::out_of_range("schedule: step index " + std::to_string(t) +
                                    " outside 1.." + std::to_string(num_steps));
    }
};

namespace detail {

inline void finish_schedule(NoiseSchedule& s) {
    int T = s.num_steps;
    s.beta.resize(T);
    s.sigma.resize(T);
    for (int t = 1; t <= T; ++t) {
        if (!(s.alpha_bar[t] > 0.0 && s.alpha_bar[t] < 1.0))
            throw std::runtime_error("schedule: alpha_bar out of (0,1) at t=" + std::to_string(t));
        if (!(s.alpha_bar[t] < s.alpha_bar[t - 1]))
            throw std::runtime_error("schedule: alpha_bar not strictly decreasing at t=" +
                                     std::to_string(t));
        s.beta[t - 1] = 1.0 - s.alpha_bar[t] / s.alpha_bar[t - 1];
        double prev_var = 1.0 - s.alpha_bar[t - 1];
        s.sigma[t - 1] =
            t == 1 ? 0.0 : std::sqrt(prev_var / (1.0 - s.alpha_bar[t]) * s.beta[t - 1]);
    }
}

}  // namespace detail

// alpha_bar_t = sigmoid(-2 log tan(pi t/2) + shift); shift moves the log-SNR
// curve, larger shift keeps more signal at the same step.
inline NoiseSchedule make_snr_schedule(int num_steps, double shift) {
    if (num_steps < 1) throw std::invalid_argument("make_snr_schedule: num_steps must be >= 1");
    if (!std::isfinite(shift)) throw std::invalid_argument("make_snr_schedule: shift must be finite");
    NoiseSchedule s;
    s.num_steps = num_steps;
    s.kind = ScheduleKind::snr_shifted;
    s.shift = shift;
    s.alpha_bar.resize(num_steps + 1);
    s.alpha_bar[0] = 1.0;
    for (int i = 1; i <= num_steps; ++i) {
        double lsnr = -2.0 * std::log(std::tan(1.5707963267948966 * s.grid_t(i))) + shift;
        s.alpha_bar[i] = 1.0 / (1.0 + std::exp(-lsnr));
    }
    detail::finish_schedule(s);
    return s;
}

inline NoiseSchedule make_cosine_schedule(int num_steps) {
    if (num_steps < 1) throw std::invalid_argument("make_cosine_schedule: num_steps must be >= 1");
    constexpr double kOffset = 0.008;
    NoiseSchedule s;
    s.num_steps = num_steps;
    s.kind = ScheduleKind::cosine;
    s.shift = 0.0;
    s.alpha_bar.resize(num_steps + 1);
    s.alpha_bar[0] = 1.0;
    auto f = [](double t) {
        double c = std::cos((t + kOffset) / (1.0 + kOffset) * 1.5707963267948966);
        return c * c;
    };
    double f0 = f(0.0);
    // beta clipped at 0.999, then alpha_bar rebuilt from the clipped ratios so
    // the posterior identities stay exact
    for (int i = 1; i <= num_steps; ++i) {
        double raw = f(s.grid_t(i)) / f0;
        double beta = 1.0 - raw / s.alpha_bar[i - 1];
        beta = std::min(beta, 0.999);
        s.alpha_bar[i] = s.alpha_bar[i - 1] * (1.0 - beta);
    }
    detail::finish_schedule(s);
    return s;
}

inline NoiseSchedule make_schedule(ScheduleKind kind, int num_steps, double shift) {
    return kind == ScheduleKind::snr_shifted ? make_snr_schedule(num_steps, shift)
                                             : make_cosine_schedule(num_steps);
}

// (sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)): coefficients of the forward marginal
inline std::pair<double, double> forward_marginal_params(const NoiseSchedule& s, int t) {
    s.check_step(t);
    return {std::sqrt(s.alpha_bar[t]), std::sqrt(1.0 - s.alpha_bar[t])};
}

struct PosteriorCoeffs {
    double c_xt = 0.0;
    double c_x0 = 0.0;
    double sigma = 0.0;
};

// reverse-posterior mean coefficients: mu = c_xt * x_t + c_x0 * x0_hat
inline PosteriorCoeffs posterior_coeffs(const NoiseSchedule& s, int t) {
    s.check_step(t);
    double ab_t = s.alpha_bar[t];
    double ab_p = s.alpha_bar[t - 1];
    double beta = s.beta[t - 1];
    double alpha = 1.0 - beta;
    PosteriorCoeffs c;
    c.c_xt = std::sqrt(alpha) * (1.0 - ab_p) / (1.0 - ab_t);
    c.c_x0 = std::sqrt(ab_p) * beta / (1.0 - ab_t);
    c.sigma = s.sigma[t - 1];
    return c;
}

}  // namespace maskdiff
