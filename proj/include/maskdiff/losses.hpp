#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "maskdiff/core/tensor.hpp"

namespace maskdiff {

// Mask losses run in double precision with hand-written gradients; the trainer
// seeds the float autodiff graph with the result.

struct LossBreakdown {
    double total = 0.0;
    double w_bce = 0.0;
    double w_iou = 0.0;
};

namespace detail {

inline int sym_index(int i, int n) {
    int period = 2 * n;
    int m = ((i % period) + period) % period;
    return m < n ? m : period - 1 - m;
}

inline void check_binary01(const std::vector<double>& gt) {
    for (double g : gt)
        if (g != 0.0 && g != 1.0) throw std::invalid_argument("ground truth must be {0,1} valued");
}

}  // namespace detail

// w = 1 + 5*|meanpool_{window x window}(gt) - gt|, stride 1, symmetric padding.
// Emphasizes pixels near the mask contour; constant masks give w == 1 exactly.
inline std::vector<double> boundary_weights(const std::vector<double>& gt, int h, int w,
                                            int window = 31) {
    if (static_cast<int>(gt.size()) != h * w) throw std::invalid_argument("boundary_weights: size");
    if (window < 1 || window % 2 == 0)
        throw std::invalid_argument("boundary_weights: window must be odd and positive");
    detail::check_binary01(gt);
    int r = window / 2;
    std::vector<double> rows(gt.size(), 0.0), pooled(gt.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int dx = -r; dx <= r; ++dx) s += gt[static_cast<size_t>(y) * w + detail::sym_index(x + dx, w)];
            rows[static_cast<size_t>(y) * w + x] = s;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int dy = -r; dy <= r; ++dy) s += rows[static_cast<size_t>(detail::sym_index(y + dy, h)) * w + x];
            pooled[static_cast<size_t>(y) * w + x] = s / (static_cast<double>(window) * window);
        }
    std::vector<double> wts(gt.size());
    for (size_t i = 0; i < gt.size(); ++i) wts[i] = 1.0 + 5.0 * std::fabs(pooled[i] - gt[i]);
    return wts;
}

// sum(w * ce) / sum(w) with predictions clipped to [eps, 1-eps], eps = 1e-7.
// grad_pred, when given, receives d/dpred (zero where the clip is active).
inline double weighted_bce(const std::vector<double>& pred, const std::vector<double>& gt,
                           const std::vector<double>& w, std::vector<double>* grad_pred = nullptr) {
    if (pred.size() != gt.size() || pred.size() != w.size())
        throw std::invalid_argument("weighted_bce: shape mismatch");
    constexpr double kEps = 1e-7;
    double wsum = 0.0, loss = 0.0;
    for (double wi : w) wsum += wi;
    if (grad_pred) grad_pred->assign(pred.size(), 0.0);
    for (size_t i = 0; i < pred.size(); ++i) {
        double p = std::min(std::max(pred[i], kEps), 1.0 - kEps);
        loss += w[i] * (-gt[i] * std::log(p) - (1.0 - gt[i]) * std::log(1.0 - p));
        if (grad_pred && pred[i] > kEps && pred[i] < 1.0 - kEps)
            (*grad_pred)[i] = w[i] * (-gt[i] / p + (1.0 - gt[i]) / (1.0 - p)) / wsum;
    }
    return loss / wsum;
}

// 1 - (sum(w*p*g) + s) / (sum(w*(p + g - p*g)) + s), smoothing s = 1
inline double weighted_iou(const std::vector<double>& pred, const std::vector<double>& gt,
                           const std::vector<double>& w, std::vector<double>* grad_pred = nullptr) {
    if (pred.size() != gt.size() || pred.size() != w.size())
        throw std::invalid_argument("weighted_iou: shape mismatch");
    constexpr double kSmooth = 1.0;
    double inter = 0.0, uni = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        inter += w[i] * pred[i] * gt[i];
        uni += w[i] * (pred[i] + gt[i] - pred[i] * gt[i]);
    }
    double a = inter + kSmooth, b = uni + kSmooth;
    if (grad_pred) {
        grad_pred->assign(pred.size(), 0.0);
        for (size_t i = 0; i < pred.size(); ++i) {
            double da = w[i] * gt[i];
            double db = w[i] * (1.0 - gt[i]);
            (*grad_pred)[i] = (a * db - da * b) / (b * b);
        }
    }
    return 1.0 - a / b;
}

// xhat in [-1,1], x0 in {-1,+1}; both are mapped to probability space
// p = (x+1)/2 and the two weighted losses are summed.
inline LossBreakdown total_loss(const std::vector<double>& xhat, const std::vector<double>& x0,
                                int h, int w, std::vector<double>* grad_xhat = nullptr) {
    if (xhat.size() != x0.size() || static_cast<int>(xhat.size()) != h * w)
        throw std::invalid_argument("total_loss: shape mismatch");
    std::vector<double> p(xhat.size()), g(x0.size());
    for (size_t i = 0; i < xhat.size(); ++i) {
        if (x0[i] != 1.0 && x0[i] != -1.0)
            throw std::invalid_argument("total_loss: x0 must be +/-1 valued");
        p[i] = (xhat[i] + 1.0) * 0.5;
        g[i] = (x0[i] + 1.0) * 0.5;
    }
    std::vector<double> wts = boundary_weights(g, h, w);
    LossBreakdown out;
    std::vector<double> gb, gi;
    out.w_bce = weighted_bce(p, g, wts, grad_xhat ? &gb : nullptr);
    out.w_iou = weighted_iou(p, g, wts, grad_xhat ? &gi : nullptr);
    out.total = out.w_bce + out.w_iou;
    if (grad_xhat) {
        grad_xhat->resize(xhat.size());
        for (size_t i = 0; i < xhat.size(); ++i) (*grad_xhat)[i] = 0.5 * (gb[i] + gi[i]);
    }
    return out;
}

inline std::vector<double> to_double(const Tensor& t) {
    std::vector<double> v(static_cast<size_t>(t.numel()));
    for (int64_t i = 0; i < t.numel(); ++i) v[static_cast<size_t>(i)] = t[i];
    return v;
}

}  // namespace maskdiff
