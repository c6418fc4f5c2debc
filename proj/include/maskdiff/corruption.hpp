#pragma once

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "maskdiff/core/rng.hpp"
#include "maskdiff/core/tensor.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

struct CorruptionConfig {
    double apply_prob = 0.5;
    int boundary_radius = 3;
    int block_size = 16;
    double block_flip_prob = 0.3;

    void validate() const {
        if (apply_prob < 0.0 || apply_prob > 1.0 || block_flip_prob < 0.0 || block_flip_prob > 1.0)
            throw std::invalid_argument("CorruptionConfig: probabilities must lie in [0,1]");
        if (boundary_radius < 1 || block_size < 1)
            throw std::invalid_argument("CorruptionConfig: radius and block size must be >= 1");
    }
};

namespace detail {

inline void check_pm1(const Tensor& mask) {
    if (mask.ndim() != 2) throw std::invalid_argument("mask must be a {H,W} map");
    for (int64_t i = 0; i < mask.numel(); ++i)
        if (mask[i] != 1.0f && mask[i] != -1.0f)
            throw std::invalid_argument("mask must be exactly +/-1 valued");
}

// separable sliding window extremum over a Chebyshev ball of the given radius
template <typename Cmp>
inline Tensor window_extremum(const Tensor& m, int radius, Cmp cmp) {
    int h = m.dim(0), w = m.dim(1);
    Tensor pass1({h, w}), out({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float best = m.at(y, x);
            for (int dx = -radius; dx <= radius; ++dx) {
                int xx = std::clamp(x + dx, 0, w - 1);
                if (cmp(m.at(y, xx), best)) best = m.at(y, xx);
            }
            pass1.at(y, x) = best;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            float best = pass1.at(y, x);
            for (int dy = -radius; dy <= radius; ++dy) {
                int yy = std::clamp(y + dy, 0, h - 1);
                if (cmp(pass1.at(yy, x), best)) best = pass1.at(yy, x);
            }
            out.at(y, x) = best;
        }
    return out;
}

}  // namespace detail

// Pixels whose (2r+1)^2 Chebyshev window contains both classes. Window values
// beyond the border replicate the edge, so a one-class mask yields an empty band.
inline std::vector<uint8_t> contour_band(const Tensor& mask, int radius) {
    Tensor mx = detail::window_extremum(mask, radius, std::greater<float>());
    Tensor mn = detail::window_extremum(mask, radius, std::less<float>());
    std::vector<uint8_t> band(static_cast<size_t>(mask.numel()));
    for (int64_t i = 0; i < mask.numel(); ++i) band[i] = mx[i] > 0.0f && mn[i] < 0.0f;
    return band;
}

// Training-time contour destruction: blocks that touch the contour band are,
// with probability block_flip_prob, replaced from a 3x3 dilation or erosion of
// the mask. Pixels outside the band never change.
inline Tensor structure_corrupt(const Tensor& mask, const CorruptionConfig& cfg, Rng& rng) {
    cfg.validate();
    detail::check_pm1(mask);
    if (rng.uniform() >= cfg.apply_prob) return mask;

    int h = mask.dim(0), w = mask.dim(1);
    std::vector<uint8_t> band = contour_band(mask, cfg.boundary_radius);
    bool any = false;
    for (uint8_t b : band)
        if (b) { any = true; break; }
    if (!any) return mask;

    Tensor dilated = detail::window_extremum(mask, 1, std::greater<float>());
    Tensor eroded = detail::window_extremum(mask, 1, std::less<float>());

    Tensor out = mask;
    int bs = cfg.block_size;
    for (int by = 0; by < h; by += bs) {
        for (int bx = 0; bx < w; bx += bs) {
            int y1 = std::min(by + bs, h), x1 = std::min(bx + bs, w);
            bool touches = false;
            for (int y = by; y < y1 && !touches; ++y)
                for (int x = bx; x < x1; ++x)
                    if (band[static_cast<size_t>(y) * w + x]) { touches = true; break; }
            if (!touches) continue;
            if (rng.uniform() >= cfg.block_flip_prob) continue;
            const Tensor& src = rng.uniform() < 0.5 ? dilated : eroded;
            for (int y = by; y < y1; ++y)
                for (int x = bx; x < x1; ++x) out.at(y, x) = src.at(y, x);
        }
    }
    return out;
}

// forward marginal draw: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise
inline Tensor q_sample(const NoiseSchedule& s, const Tensor& x0, int t, const Tensor& noise) {
    s.check_step(t);
    if (!x0.same_shape(noise)) throw std::invalid_argument("q_sample: noise shape mismatch");
    auto [a, b] = forward_marginal_params(s, t);
    Tensor y(x0.shape());
    float af = static_cast<float>(a), bf = static_cast<float>(b);
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = af * x0[i] + bf * noise[i];
    return y;
}

}  // namespace maskdiff
