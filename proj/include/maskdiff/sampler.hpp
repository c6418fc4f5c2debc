#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "maskdiff/core/rng.hpp"
#include "maskdiff/core/tensor.hpp"
#include "maskdiff/data.hpp"
#include "maskdiff/networks.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

// x0_hat predictions collected along one reverse chain, probability space,
// earliest step (t = T) first
struct PredictionHistory {
    std::vector<Tensor> preds;
};

struct EnsembleResult {
    Tensor mask;  // combined prediction in [0,1]
    std::vector<Tensor> per_chain_final;
};

// denoiser interface: maps (x_t {H,W}, step index) to x0_hat in [-1,1]
using DenoiseFn = std::function<Tensor(const Tensor& x_t, int t)>;

// one ancestral reverse step: x_{t-1} = c_xt * x_t + c_x0 * x0_hat + sigma * z
inline Tensor ddpm_step(const Tensor& x_t, const Tensor& xhat0, int t, const NoiseSchedule& s,
                        const Tensor* z) {
    s.check_step(t);
    if (!x_t.same_shape(xhat0)) throw std::invalid_argument("ddpm_step: shape mismatch");
    for (int64_t i = 0; i < xhat0.numel(); ++i)
        if (xhat0[i] < -1.0f || xhat0[i] > 1.0f)
            throw std::invalid_argument("ddpm_step: x0_hat must lie in [-1,1]");
    if (z) {
        if (!z->same_shape(x_t)) throw std::invalid_argument("ddpm_step: noise shape mismatch");
        if (t == 1)
            for (int64_t i = 0; i < z->numel(); ++i)
                if ((*z)[i] != 0.0f)
                    throw std::invalid_argument("ddpm_step: noise must be zero at the final step");
    }
    PosteriorCoeffs c = posterior_coeffs(s, t);
    Tensor out(x_t.shape());
    float cxt = static_cast<float>(c.c_xt), cx0 = static_cast<float>(c.c_x0);
    float sg = static_cast<float>(c.sigma);
    for (int64_t i = 0; i < out.numel(); ++i) {
        out[i] = cxt * x_t[i] + cx0 * xhat0[i];
        if (z) out[i] += sg * (*z)[i];
    }
    return out;
}

// runs the full reverse chain from a standard-normal draw, recording each
// x0_hat in probability space
inline PredictionHistory sample_chain(const DenoiseFn& denoise, int h, int w,
                                      const NoiseSchedule& s, uint64_t seed) {
    Rng rng(mix_seed(seed, 0x5a3c31ULL));
    Tensor x = rng.normal_tensor({h, w});
    PredictionHistory hist;
    hist.preds.reserve(static_cast<size_t>(s.num_steps));
    for (int t = s.num_steps; t >= 1; --t) {
        Tensor xhat = denoise(x, t);
        if (!xhat.same_shape(x)) throw std::runtime_error("sample_chain: denoiser shape mismatch");
        Tensor prob(xhat.shape());
        for (int64_t i = 0; i < prob.numel(); ++i)
            prob[i] = std::min(1.0f, std::max(0.0f, (xhat[i] + 1.0f) * 0.5f));
        hist.preds.push_back(prob);
        if (t > 1) {
            Tensor z = rng.normal_tensor({h, w});
            x = ddpm_step(x, xhat, t, s, &z);
        } else {
            x = ddpm_step(x, xhat, t, s, nullptr);
        }
    }
    return hist;
}

// threshold at twice the mean (clipped just below one); an all-zero map stays
// all-zero
inline Tensor adaptive_threshold(const Tensor& p) {
    double mean = 0.0;
    for (int64_t i = 0; i < p.numel(); ++i) {
        if (p[i] < 0.0f || p[i] > 1.0f)
            throw std::invalid_argument("adaptive_threshold: values must lie in [0,1]");
        mean += p[i];
    }
    mean /= static_cast<double>(p.numel());
    Tensor out(p.shape());
    if (mean == 0.0) return out;
    float tau = static_cast<float>(std::min(2.0 * mean, 1.0 - 1e-6));
    for (int64_t i = 0; i < p.numel(); ++i) out[i] = p[i] >= tau ? 1.0f : 0.0f;
    return out;
}

// Consensus over binarized predictions scaled by the pixelwise mean:
// floor(sum(binarized)/N + 1/2) * mean(preds). Majority vote with ties
// going to one.
inline EnsembleResult cte(const std::vector<PredictionHistory>& histories) {
    size_t total = 0;
    for (const auto& h : histories) total += h.preds.size();
    if (total == 0) throw std::invalid_argument("cte: no predictions");

    const Tensor& first = histories.front().preds.front();
    Tensor votes(first.shape()), mean(first.shape());
    for (const auto& h : histories) {
        for (const auto& p : h.preds) {
            if (!p.same_shape(first)) throw std::invalid_argument("cte: prediction shape mismatch");
            Tensor b = adaptive_threshold(p);
            for (int64_t i = 0; i < p.numel(); ++i) {
                votes[i] += b[i];
                mean[i] += p[i];
            }
        }
    }
    EnsembleResult res;
    res.mask = Tensor(first.shape());
    float n = static_cast<float>(total);
    for (int64_t i = 0; i < votes.numel(); ++i) {
        float vote = std::floor(votes[i] / n + 0.5f);
        res.mask[i] = std::min(1.0f, vote) * (mean[i] / n);
    }
    for (const auto& h : histories) res.per_chain_final.push_back(h.preds.back());
    return res;
}

enum class PredictMode { single, ensemble3 };

// single: consensus over one chain's T predictions; ensemble3: three chains
// with distinct sub-seeds pooled into one consensus over 3T predictions
inline EnsembleResult predict(const DenoiseFn& denoise, int h, int w, const NoiseSchedule& s,
                              PredictMode mode, uint64_t seed) {
    std::vector<PredictionHistory> hist;
    int chains = mode == PredictMode::single ? 1 : 3;
    for (int c = 0; c < chains; ++c)
        hist.push_back(sample_chain(denoise, h, w, s, mix_seed(seed, static_cast<uint64_t>(c))));
    return cte(hist);
}

// adapts a trained model to the per-image denoiser interface
inline DenoiseFn make_model_denoiser(const Model& model, const Tensor& image_norm, int num_steps) {
    if (image_norm.ndim() != 3 || image_norm.dim(0) != 3)
        throw std::invalid_argument("make_model_denoiser: image must be {3,H,W}");
    int h = image_norm.dim(1), w = image_norm.dim(2);
    Tensor img({1, 3, h, w});
    std::copy(image_norm.data(), image_norm.data() + image_norm.numel(), img.data());
    return [&model, img, num_steps, h, w](const Tensor& x_t, int t) {
        nn::NoGradGuard ng;
        Tensor xt4({1, 1, h, w});
        std::copy(x_t.data(), x_t.data() + x_t.numel(), xt4.data());
        nn::Var out = model.forward(nn::Var::leaf(img), nn::Var::leaf(xt4), {t}, num_steps);
        Tensor res({h, w});
        std::copy(out.value().data(), out.value().data() + res.numel(), res.data());
        return res;
    };
}

}  // namespace maskdiff
