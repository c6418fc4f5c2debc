#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "maskdiff/nn/graph.hpp"

namespace maskdiff::nn {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;
};

// decoupled weight decay; moments are float to keep checkpoints compact
class AdamW {
public:
    AdamW(std::vector<Var>& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
        for (auto& p : params) {
            m_.emplace_back(p.value().shape());
            v_.emplace_back(p.value().shape());
        }
    }

    // global-norm gradient clipping; returns the pre-clip norm
    double clip_grad_norm(double max_norm) {
        double sq = 0.0;
        for (auto& p : *params_) {
            if (p.n->grad.numel() == 0) continue;
            for (int64_t i = 0; i < p.n->grad.numel(); ++i)
                sq += static_cast<double>(p.n->grad[i]) * p.n->grad[i];
        }
        double norm = std::sqrt(sq);
        if (max_norm > 0.0 && norm > max_norm) {
            float s = static_cast<float>(max_norm / (norm + 1e-12));
            for (auto& p : *params_)
                for (int64_t i = 0; i < p.n->grad.numel(); ++i) p.n->grad[i] *= s;
        }
        return norm;
    }

    void step(double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (size_t k = 0; k < params_->size(); ++k) {
            Var& p = (*params_)[k];
            if (p.n->grad.numel() == 0) continue;
            float* w = p.n->value.data();
            const float* g = p.n->grad.data();
            float* m = m_[k].data();
            float* v = v_[k].data();
            for (int64_t i = 0; i < p.value().numel(); ++i) {
                m[i] = static_cast<float>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
                v[i] = static_cast<float>(cfg_.beta2 * v[i] +
                                          (1.0 - cfg_.beta2) * static_cast<double>(g[i]) * g[i]);
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                w[i] = static_cast<float>(w[i] - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                                       cfg_.weight_decay * w[i]));
            }
        }
    }

    void zero_grad() {
        for (auto& p : *params_) p.n->zero_grad();
    }

    int64_t step_count() const { return t_; }
    std::vector<Tensor>& moment1() { return m_; }
    std::vector<Tensor>& moment2() { return v_; }
    void set_step_count(int64_t t) { t_ = t; }
    const AdamWConfig& config() const { return cfg_; }

private:
    std::vector<Var>* params_;
    AdamWConfig cfg_;
    std::vector<Tensor> m_, v_;
    int64_t t_ = 0;
};

// half-cosine decay to zero over the planned number of steps
inline double cosine_lr(double base_lr, int64_t step, int64_t total_steps) {
    if (total_steps <= 0) return base_lr;
    double p = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return base_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * p));
}

}  // namespace maskdiff::nn
