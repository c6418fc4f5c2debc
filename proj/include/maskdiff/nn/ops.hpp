#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

#include "maskdiff/nn/graph.hpp"

namespace maskdiff::nn {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

namespace detail {

inline Var make_node(Tensor value, std::vector<NodeRef> inputs, std::function<void(Node&)> bwd) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool rg = grad_mode();
    if (rg) {
        rg = false;
        for (const auto& in : inputs)
            if (in->requires_grad) { rg = true; break; }
    }
    node->requires_grad = rg;
    if (rg) {
        node->inputs = std::move(inputs);
        node->backward_fn = std::move(bwd);
    }
    return Var(node);
}

inline void accum(const NodeRef& n, const float* g, int64_t count) {
    if (!n->requires_grad) return;
    n->ensure_grad();
    float* dst = n->grad.data();
    for (int64_t i = 0; i < count; ++i) dst[i] += g[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value())) throw std::invalid_argument("add: shape mismatch");
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] += bv[i];
    NodeRef an = a.n, bn = b.n;
    return detail::make_node(std::move(y), {an, bn}, [an, bn](Node& self) {
        detail::accum(an, self.grad.data(), self.grad.numel());
        detail::accum(bn, self.grad.data(), self.grad.numel());
    });
}

inline Var scale(const Var& a, float s) {
    Tensor y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] *= s;
    NodeRef an = a.n;
    return detail::make_node(std::move(y), {an}, [an, s](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) an->grad[i] += s * self.grad[i];
    });
}

inline Var relu(const Var& a) {
    Tensor y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::max(0.0f, y[i]);
    NodeRef an = a.n;
    return detail::make_node(std::move(y), {an}, [an](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const Tensor& x = an->value;
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            if (x[i] > 0.0f) an->grad[i] += self.grad[i];
    });
}

inline Var silu(const Var& a) {
    Tensor y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) {
        float s = 1.0f / (1.0f + std::exp(-y[i]));
        y[i] *= s;
    }
    NodeRef an = a.n;
    return detail::make_node(std::move(y), {an}, [an](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const Tensor& x = an->value;
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            float s = 1.0f / (1.0f + std::exp(-x[i]));
            an->grad[i] += self.grad[i] * s * (1.0f + x[i] * (1.0f - s));
        }
    });
}

inline Var gelu(const Var& a) {
    Tensor y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) {
        float x = y[i];
        y[i] = 0.5f * x * (1.0f + std::erf(x * 0.70710678f));
    }
    NodeRef an = a.n;
    return detail::make_node(std::move(y), {an}, [an](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const Tensor& x = an->value;
        for (int64_t i = 0; i < self.grad.numel(); ++i) {
            float xi = x[i];
            float cdf = 0.5f * (1.0f + std::erf(xi * 0.70710678f));
            float pdf = 0.39894228f * std::exp(-0.5f * xi * xi);
            an->grad[i] += self.grad[i] * (cdf + xi * pdf);
        }
    });
}

inline Var clamp(const Var& a, float lo, float hi) {
    Tensor y = a.value();
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = std::min(hi, std::max(lo, y[i]));
    NodeRef an = a.n;
    return detail::make_node(std::move(y), {an}, [an, lo, hi](Node& self) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        const Tensor& x = an->value;
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            if (x[i] > lo && x[i] < hi) an->grad[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// linear: x {...,Cin} -> {...,Cout}, w {Cout,Cin}, b {Cout}
// ---------------------------------------------------------------------------

inline Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    int cin = xv.dim(xv.ndim() - 1);
    if (wv.ndim() != 2 || wv.dim(1) != cin) throw std::invalid_argument("linear: weight shape mismatch");
    int cout = wv.dim(0);
    if (bv.numel() != cout) throw std::invalid_argument("linear: bias shape mismatch");
    int64_t rows = xv.numel() / cin;

    std::vector<int> oshape = xv.shape();
    oshape.back() = cout;
    Tensor y(oshape);
    {
        CMapRM X(xv.data(), rows, cin), W(wv.data(), cout, cin);
        MapRM Y(y.data(), rows, cout);
        Y.noalias() = X * W.transpose();
        Eigen::Map<const Eigen::VectorXf> B(bv.data(), cout);
        Y.rowwise() += B.transpose();
    }
    NodeRef xn = x.n, wn = w.n, bn = b.n;
    return detail::make_node(std::move(y), {xn, wn, bn}, [xn, wn, bn, rows, cin, cout](Node& self) {
        CMapRM G(self.grad.data(), rows, cout);
        if (xn->requires_grad) {
            xn->ensure_grad();
            MapRM dX(xn->grad.data(), rows, cin);
            CMapRM W(wn->value.data(), cout, cin);
            dX.noalias() += G * W;
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            MapRM dW(wn->grad.data(), cout, cin);
            CMapRM X(xn->value.data(), rows, cin);
            dW.noalias() += G.transpose() * X;
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            // explicit loop: Eigen reductions vary summation order with the
            // heap alignment of the mapped buffer, breaking bit reproducibility
            const float* g = self.grad.data();
            for (int64_t r = 0; r < rows; ++r)
                for (int c = 0; c < cout; ++c) bn->grad[c] += g[r * cout + c];
        }
    });
}

// ---------------------------------------------------------------------------
// conv2d: x {N,Cin,H,W}, w {Cout,Cin,kh,kw}, b {Cout} (may be empty)
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const Tensor& x, int n, int kh, int kw, int stride, int pad,
                   int ho, int wo, float* col) {
    int cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    // col is {cin*kh*kw, ho*wo} row-major
    for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                float* row = col + (static_cast<int64_t>(c) * kh * kw + ky * kw + kx) *
                                       static_cast<int64_t>(ho) * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) {
                        std::fill(row + static_cast<int64_t>(oy) * wo,
                                  row + static_cast<int64_t>(oy + 1) * wo, 0.0f);
                        continue;
                    }
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        row[static_cast<int64_t>(oy) * wo + ox] =
                            (ix >= 0 && ix < w) ? x.at(n, c, iy, ix) : 0.0f;
                    }
                }
            }
        }
    }
}

inline void col2im_accum(const float* col, int n, int kh, int kw, int stride, int pad,
                         int ho, int wo, Tensor& dx) {
    int cin = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
    for (int c = 0; c < cin; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const float* row = col + (static_cast<int64_t>(c) * kh * kw + ky * kw + kx) *
                                             static_cast<int64_t>(ho) * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int ox = 0; ox < wo; ++ox) {
                        int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < w)
                            dx.at(n, c, iy, ix) += row[static_cast<int64_t>(oy) * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.ndim() != 4 || wv.ndim() != 4) throw std::invalid_argument("conv2d: expects 4D tensors");
    int n = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
    int cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != cin) throw std::invalid_argument("conv2d: channel mismatch");
    bool has_bias = b.defined() && b.value().numel() > 0;
    if (has_bias && b.value().numel() != cout) throw std::invalid_argument("conv2d: bias mismatch");
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");

    Tensor y({n, cout, ho, wo});
    int64_t k = static_cast<int64_t>(cin) * kh * kw;
    int64_t area = static_cast<int64_t>(ho) * wo;

#pragma omp parallel
    {
        std::vector<float> col(static_cast<size_t>(k * area));
#pragma omp for schedule(static)
        for (int i = 0; i < n; ++i) {
            detail::im2col(xv, i, kh, kw, stride, pad, ho, wo, col.data());
            CMapRM W(wv.data(), cout, k), C(col.data(), k, area);
            MapRM Y(y.data() + static_cast<int64_t>(i) * cout * area, cout, area);
            Y.noalias() = W * C;
            if (has_bias) {
                Eigen::Map<const Eigen::VectorXf> B(b.value().data(), cout);
                Y.colwise() += B;
            }
        }
    }

    NodeRef xn = x.n, wn = w.n;
    NodeRef bn = has_bias ? b.n : nullptr;
    std::vector<NodeRef> ins = {xn, wn};
    if (bn) ins.push_back(bn);
    return detail::make_node(
        std::move(y), std::move(ins), [xn, wn, bn, stride, pad, kh, kw, ho, wo](Node& self) {
            const Tensor& xv = xn->value;
            const Tensor& wv = wn->value;
            int n = xv.dim(0), cin = xv.dim(1);
            int cout = wv.dim(0);
            int64_t k = static_cast<int64_t>(cin) * kh * kw;
            int64_t area = static_cast<int64_t>(ho) * wo;

            bool need_dx = xn->requires_grad;
            bool need_dw = wn->requires_grad;
            bool need_db = bn && bn->requires_grad;
            if (need_dx) xn->ensure_grad();

            std::vector<Tensor> dw_per(need_dw ? n : 0);
            std::vector<Tensor> db_per(need_db ? n : 0);

#pragma omp parallel
            {
                std::vector<float> col(static_cast<size_t>(k * area));
                std::vector<float> dcol(need_dx ? static_cast<size_t>(k * area) : 0);
#pragma omp for schedule(static)
                for (int i = 0; i < n; ++i) {
                    CMapRM G(self.grad.data() + static_cast<int64_t>(i) * cout * area, cout, area);
                    if (need_dw || need_dx)
                        detail::im2col(xv, i, kh, kw, stride, pad, ho, wo, col.data());
                    if (need_dw) {
                        dw_per[i] = Tensor(wv.shape());
                        MapRM dW(dw_per[i].data(), cout, k);
                        CMapRM C(col.data(), k, area);
                        dW.noalias() = G * C.transpose();
                    }
                    if (need_db) {
                        db_per[i] = Tensor({cout});
                        const float* g = self.grad.data() + static_cast<int64_t>(i) * cout * area;
                        for (int c = 0; c < cout; ++c) {
                            float s = 0.0f;
                            for (int64_t a = 0; a < area; ++a) s += g[c * area + a];
                            db_per[i][c] = s;
                        }
                    }
                    if (need_dx) {
                        CMapRM W(wv.data(), cout, k);
                        MapRM dC(dcol.data(), k, area);
                        dC.noalias() = W.transpose() * G;
                        detail::col2im_accum(dcol.data(), i, kh, kw, stride, pad, ho, wo, xn->grad);
                    }
                }
            }
            if (need_dw) {
                wn->ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int64_t j = 0; j < wn->grad.numel(); ++j) wn->grad[j] += dw_per[i][j];
            }
            if (need_db) {
                bn->ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int64_t j = 0; j < bn->grad.numel(); ++j) bn->grad[j] += db_per[i][j];
            }
        });
}

// ---------------------------------------------------------------------------
// layer_norm over the last dimension, with affine weights
// ---------------------------------------------------------------------------

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f) {
    const Tensor& xv = x.value();
    int c = xv.dim(xv.ndim() - 1);
    if (gamma.value().numel() != c || beta.value().numel() != c)
        throw std::invalid_argument("layer_norm: affine shape mismatch");
    int64_t rows = xv.numel() / c;

    Tensor y(xv.shape());
    const float* g = gamma.value().data();
    const float* bt = beta.value().data();
    for (int64_t r = 0; r < rows; ++r) {
        const float* xr = xv.data() + r * c;
        float* yr = y.data() + r * c;
        float mean = 0.0f, var = 0.0f;
        for (int i = 0; i < c; ++i) mean += xr[i];
        mean /= static_cast<float>(c);
        for (int i = 0; i < c; ++i) {
            float d = xr[i] - mean;
            var += d * d;
        }
        var /= static_cast<float>(c);
        float inv = 1.0f / std::sqrt(var + eps);
        for (int i = 0; i < c; ++i) yr[i] = (xr[i] - mean) * inv * g[i] + bt[i];
    }

    NodeRef xn = x.n, gn = gamma.n, bn = beta.n;
    return detail::make_node(std::move(y), {xn, gn, bn}, [xn, gn, bn, rows, c, eps](Node& self) {
        bool need_dx = xn->requires_grad, need_dg = gn->requires_grad, need_db = bn->requires_grad;
        if (need_dx) xn->ensure_grad();
        if (need_dg) gn->ensure_grad();
        if (need_db) bn->ensure_grad();
        const float* gam = gn->value.data();
        std::vector<float> xhat(static_cast<size_t>(c));
        for (int64_t r = 0; r < rows; ++r) {
            const float* xr = xn->value.data() + r * c;
            const float* gr = self.grad.data() + r * c;
            float mean = 0.0f, var = 0.0f;
            for (int i = 0; i < c; ++i) mean += xr[i];
            mean /= static_cast<float>(c);
            for (int i = 0; i < c; ++i) {
                float d = xr[i] - mean;
                var += d * d;
            }
            var /= static_cast<float>(c);
            float inv = 1.0f / std::sqrt(var + eps);
            for (int i = 0; i < c; ++i) xhat[i] = (xr[i] - mean) * inv;
            if (need_dg)
                for (int i = 0; i < c; ++i) gn->grad[i] += gr[i] * xhat[i];
            if (need_db)
                for (int i = 0; i < c; ++i) bn->grad[i] += gr[i];
            if (need_dx) {
                float mh = 0.0f, mhx = 0.0f;
                for (int i = 0; i < c; ++i) {
                    float h = gr[i] * gam[i];
                    mh += h;
                    mhx += h * xhat[i];
                }
                mh /= static_cast<float>(c);
                mhx /= static_cast<float>(c);
                float* dxr = xn->grad.data() + r * c;
                for (int i = 0; i < c; ++i) {
                    float h = gr[i] * gam[i];
                    dxr[i] += inv * (h - mh - xhat[i] * mhx);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// group_norm without affine: x {N,C,H,W}
// ---------------------------------------------------------------------------

inline Var group_norm(const Var& x, int groups, float eps = 1e-5f) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 4) throw std::invalid_argument("group_norm: expects 4D");
    int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (c % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
    int cg = c / groups;
    int64_t gsize = static_cast<int64_t>(cg) * h * w;

    Tensor y(xv.shape());
#pragma omp parallel for schedule(static) collapse(2)
    for (int i = 0; i < n; ++i) {
        for (int g = 0; g < groups; ++g) {
            const float* xs = xv.data() + (static_cast<int64_t>(i) * c + g * cg) * h * w;
            float* ys = y.data() + (static_cast<int64_t>(i) * c + g * cg) * h * w;
            double mean = 0.0, var = 0.0;
            for (int64_t j = 0; j < gsize; ++j) mean += xs[j];
            mean /= static_cast<double>(gsize);
            for (int64_t j = 0; j < gsize; ++j) {
                double d = xs[j] - mean;
                var += d * d;
            }
            var /= static_cast<double>(gsize);
            float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
            float mu = static_cast<float>(mean);
            for (int64_t j = 0; j < gsize; ++j) ys[j] = (xs[j] - mu) * inv;
        }
    }

    NodeRef xn = x.n;
    return detail::make_node(std::move(y), {xn}, [xn, groups, eps](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const Tensor& xv = xn->value;
        int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        int cg = c / groups;
        int64_t gsize = static_cast<int64_t>(cg) * h * w;
#pragma omp parallel for schedule(static) collapse(2)
        for (int i = 0; i < n; ++i) {
            for (int g = 0; g < groups; ++g) {
                int64_t off = (static_cast<int64_t>(i) * c + g * cg) * h * w;
                const float* xs = xv.data() + off;
                const float* gs = self.grad.data() + off;
                float* dxs = xn->grad.data() + off;
                double mean = 0.0, var = 0.0;
                for (int64_t j = 0; j < gsize; ++j) mean += xs[j];
                mean /= static_cast<double>(gsize);
                for (int64_t j = 0; j < gsize; ++j) {
                    double d = xs[j] - mean;
                    var += d * d;
                }
                var /= static_cast<double>(gsize);
                double inv = 1.0 / std::sqrt(var + eps);
                double mh = 0.0, mhx = 0.0;
                for (int64_t j = 0; j < gsize; ++j) {
                    double xh = (xs[j] - mean) * inv;
                    mh += gs[j];
                    mhx += gs[j] * xh;
                }
                mh /= static_cast<double>(gsize);
                mhx /= static_cast<double>(gsize);
                for (int64_t j = 0; j < gsize; ++j) {
                    double xh = (xs[j] - mean) * inv;
                    dxs[j] += static_cast<float>(inv * (gs[j] - mh - xh * mhx));
                }
            }
        }
    });
}

// FiLM-style conditioning: x {N,C,H,W}, ss {N,2C} -> x*(1+scale) + shift
inline Var film(const Var& x, const Var& ss) {
    const Tensor& xv = x.value();
    const Tensor& sv = ss.value();
    int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    if (sv.ndim() != 2 || sv.dim(0) != n || sv.dim(1) != 2 * c)
        throw std::invalid_argument("film: conditioning shape mismatch");
    int64_t hw = static_cast<int64_t>(h) * w;

    Tensor y(xv.shape());
    for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < c; ++ch) {
            float s = 1.0f + sv.at(i, ch);
            float t = sv.at(i, c + ch);
            const float* xs = xv.data() + (static_cast<int64_t>(i) * c + ch) * hw;
            float* ys = y.data() + (static_cast<int64_t>(i) * c + ch) * hw;
            for (int64_t j = 0; j < hw; ++j) ys[j] = xs[j] * s + t;
        }
    }
    NodeRef xn = x.n, sn = ss.n;
    return detail::make_node(std::move(y), {xn, sn}, [xn, sn](Node& self) {
        const Tensor& xv = xn->value;
        const Tensor& sv = sn->value;
        int n = xv.dim(0), c = xv.dim(1);
        int64_t hw = static_cast<int64_t>(xv.dim(2)) * xv.dim(3);
        if (xn->requires_grad) xn->ensure_grad();
        if (sn->requires_grad) sn->ensure_grad();
        for (int i = 0; i < n; ++i) {
            for (int ch = 0; ch < c; ++ch) {
                int64_t off = (static_cast<int64_t>(i) * c + ch) * hw;
                const float* gs = self.grad.data() + off;
                if (xn->requires_grad) {
                    float s = 1.0f + sv.at(i, ch);
                    float* dxs = xn->grad.data() + off;
                    for (int64_t j = 0; j < hw; ++j) dxs[j] += gs[j] * s;
                }
                if (sn->requires_grad) {
                    const float* xs = xv.data() + off;
                    double dscale = 0.0, dshift = 0.0;
                    for (int64_t j = 0; j < hw; ++j) {
                        dscale += static_cast<double>(gs[j]) * xs[j];
                        dshift += gs[j];
                    }
                    sn->grad.at(i, ch) += static_cast<float>(dscale);
                    sn->grad.at(i, c + ch) += static_cast<float>(dshift);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// multi-head attention; q {N,Lq,C}, k/v {N,Lk,C}
// ---------------------------------------------------------------------------

inline Var attention(const Var& q, const Var& k, const Var& v, int heads) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    int n = qv.dim(0), lq = qv.dim(1), c = qv.dim(2);
    int lk = kv.dim(1);
    if (kv.dim(0) != n || vv.dim(0) != n || kv.dim(2) != c || vv.dim(2) != c || vv.dim(1) != lk)
        throw std::invalid_argument("attention: shape mismatch");
    if (c % heads != 0) throw std::invalid_argument("attention: heads must divide channels");
    int dh = c / heads;
    float sc = 1.0f / std::sqrt(static_cast<float>(dh));

    auto attw = std::make_shared<Tensor>(std::vector<int>{n, heads, lq, lk});
    Tensor y({n, lq, c});

    auto gather = [&](const Tensor& src, int i, int hd, int len, MatRM& dst) {
        dst.resize(len, dh);
        for (int l = 0; l < len; ++l)
            for (int d = 0; d < dh; ++d) dst(l, d) = src.at(i, l, hd * dh + d);
    };

    MatRM Q, K, V;
    for (int i = 0; i < n; ++i) {
        for (int hd = 0; hd < heads; ++hd) {
            gather(qv, i, hd, lq, Q);
            gather(kv, i, hd, lk, K);
            gather(vv, i, hd, lk, V);
            MatRM S = sc * (Q * K.transpose());
            for (int r = 0; r < lq; ++r) {
                float mx = S.row(r).maxCoeff();
                float sum = 0.0f;
                for (int j = 0; j < lk; ++j) {
                    float e = std::exp(S(r, j) - mx);
                    S(r, j) = e;
                    sum += e;
                }
                for (int j = 0; j < lk; ++j) {
                    S(r, j) /= sum;
                    attw->at(i, hd, r, j) = S(r, j);
                }
            }
            MatRM O = S * V;
            for (int l = 0; l < lq; ++l)
                for (int d = 0; d < dh; ++d) y.at(i, l, hd * dh + d) = O(l, d);
        }
    }

    NodeRef qn = q.n, kn = k.n, vn = v.n;
    return detail::make_node(std::move(y), {qn, kn, vn}, [qn, kn, vn, attw, heads, sc](Node& self) {
        const Tensor& qv = qn->value;
        const Tensor& kv = kn->value;
        const Tensor& vv = vn->value;
        int n = qv.dim(0), lq = qv.dim(1), c = qv.dim(2), lk = kv.dim(1);
        int dh = c / heads;
        if (qn->requires_grad) qn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        if (vn->requires_grad) vn->ensure_grad();

        MatRM Q(lq, dh), K(lk, dh), V(lk, dh), G(lq, dh), A(lq, lk);
        for (int i = 0; i < n; ++i) {
            for (int hd = 0; hd < heads; ++hd) {
                for (int l = 0; l < lq; ++l)
                    for (int d = 0; d < dh; ++d) {
                        Q(l, d) = qv.at(i, l, hd * dh + d);
                        G(l, d) = self.grad.at(i, l, hd * dh + d);
                    }
                for (int l = 0; l < lk; ++l)
                    for (int d = 0; d < dh; ++d) {
                        K(l, d) = kv.at(i, l, hd * dh + d);
                        V(l, d) = vv.at(i, l, hd * dh + d);
                    }
                for (int r = 0; r < lq; ++r)
                    for (int j = 0; j < lk; ++j) A(r, j) = attw->at(i, hd, r, j);

                if (vn->requires_grad) {
                    MatRM dV = A.transpose() * G;
                    for (int l = 0; l < lk; ++l)
                        for (int d = 0; d < dh; ++d) vn->grad.at(i, l, hd * dh + d) += dV(l, d);
                }
                MatRM dA = G * V.transpose();
                // softmax backward, rowwise
                MatRM dS(lq, lk);
                for (int r = 0; r < lq; ++r) {
                    float dot = 0.0f;
                    for (int j = 0; j < lk; ++j) dot += dA(r, j) * A(r, j);
                    for (int j = 0; j < lk; ++j) dS(r, j) = A(r, j) * (dA(r, j) - dot);
                }
                if (qn->requires_grad) {
                    MatRM dQ = sc * (dS * K);
                    for (int l = 0; l < lq; ++l)
                        for (int d = 0; d < dh; ++d) qn->grad.at(i, l, hd * dh + d) += dQ(l, d);
                }
                if (kn->requires_grad) {
                    MatRM dK = sc * (dS.transpose() * Q);
                    for (int l = 0; l < lk; ++l)
                        for (int d = 0; d < dh; ++d) kn->grad.at(i, l, hd * dh + d) += dK(l, d);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// shape plumbing
// ---------------------------------------------------------------------------

// {N,C,H,W} -> {N,H*W,C}
inline Var map_to_tokens(const Var& x) {
    const Tensor& xv = x.value();
    int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor y({n, h * w, c});
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < h * w; ++p) y.at(i, p, ch) = xv[((static_cast<int64_t>(i) * c + ch) * h * w) + p];
    NodeRef xn = x.n;
    return detail::make_node(std::move(y), {xn}, [xn](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const Tensor& xv = xn->value;
        int n = xv.dim(0), c = xv.dim(1);
        int hw = xv.dim(2) * xv.dim(3);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < hw; ++p)
                    xn->grad[(static_cast<int64_t>(i) * c + ch) * hw + p] += self.grad.at(i, p, ch);
    });
}

// {N,L,C} -> {N,C,H,W} with L == H*W
inline Var tokens_to_map(const Var& x, int h, int w) {
    const Tensor& xv = x.value();
    int n = xv.dim(0), l = xv.dim(1), c = xv.dim(2);
    if (l != h * w) throw std::invalid_argument("tokens_to_map: token count mismatch");
    Tensor y({n, c, h, w});
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < l; ++p) y[(static_cast<int64_t>(i) * c + ch) * l + p] = xv.at(i, p, ch);
    NodeRef xn = x.n;
    return detail::make_node(std::move(y), {xn}, [xn, h, w](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const Tensor& xv = xn->value;
        int n = xv.dim(0), l = xv.dim(1), c = xv.dim(2);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < l; ++p)
                    xn->grad.at(i, p, ch) += self.grad[(static_cast<int64_t>(i) * c + ch) * l + p];
    });
}

// concatenate along dim 1 for 3D token tensors ({N,L,C}) or 4D maps ({N,C,H,W})
inline Var concat_dim1(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_dim1: empty input");
    const Tensor& first = xs[0].value();
    int nd = first.ndim();
    int n = first.dim(0);
    int64_t inner = 1;
    for (int d = 2; d < nd; ++d) inner *= first.dim(d);
    int total = 0;
    for (const auto& x : xs) {
        const Tensor& t = x.value();
        if (t.ndim() != nd || t.dim(0) != n) throw std::invalid_argument("concat_dim1: rank/batch mismatch");
        int64_t in2 = 1;
        for (int d = 2; d < nd; ++d) in2 *= t.dim(d);
        if (in2 != inner) throw std::invalid_argument("concat_dim1: inner shape mismatch");
        total += t.dim(1);
    }
    std::vector<int> oshape = first.shape();
    oshape[1] = total;
    Tensor y(oshape);
    int64_t row = inner;
    for (int i = 0; i < n; ++i) {
        int64_t off = static_cast<int64_t>(i) * total * row;
        for (const auto& x : xs) {
            const Tensor& t = x.value();
            int64_t chunk = static_cast<int64_t>(t.dim(1)) * row;
            std::copy(t.data() + static_cast<int64_t>(i) * chunk,
                      t.data() + static_cast<int64_t>(i + 1) * chunk, y.data() + off);
            off += chunk;
        }
    }
    std::vector<NodeRef> ins;
    for (const auto& x : xs) ins.push_back(x.n);
    return detail::make_node(std::move(y), ins, [ins, n, row, total](Node& self) {
        for (int i = 0; i < n; ++i) {
            int64_t off = static_cast<int64_t>(i) * total * row;
            for (const auto& in : ins) {
                int64_t chunk = static_cast<int64_t>(in->value.dim(1)) * row;
                if (in->requires_grad) {
                    in->ensure_grad();
                    float* dst = in->grad.data() + static_cast<int64_t>(i) * chunk;
                    const float* src = self.grad.data() + off;
                    for (int64_t j = 0; j < chunk; ++j) dst[j] += src[j];
                }
                off += chunk;
            }
        }
    });
}

// slice along dim 1 (tokens or channels): [start, start+len)
inline Var slice_dim1(const Var& x, int start, int len) {
    const Tensor& xv = x.value();
    int nd = xv.ndim();
    int n = xv.dim(0), d1 = xv.dim(1);
    if (start < 0 || len <= 0 || start + len > d1) throw std::invalid_argument("slice_dim1: bad range");
    int64_t inner = 1;
    for (int d = 2; d < nd; ++d) inner *= xv.dim(d);
    std::vector<int> oshape = xv.shape();
    oshape[1] = len;
    Tensor y(oshape);
    for (int i = 0; i < n; ++i)
        std::copy(xv.data() + (static_cast<int64_t>(i) * d1 + start) * inner,
                  xv.data() + (static_cast<int64_t>(i) * d1 + start + len) * inner,
                  y.data() + static_cast<int64_t>(i) * len * inner);
    NodeRef xn = x.n;
    return detail::make_node(std::move(y), {xn}, [xn, start, len, inner](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        int n = xn->value.dim(0), d1 = xn->value.dim(1);
        for (int i = 0; i < n; ++i) {
            float* dst = xn->grad.data() + (static_cast<int64_t>(i) * d1 + start) * inner;
            const float* src = self.grad.data() + static_cast<int64_t>(i) * len * inner;
            for (int64_t j = 0; j < static_cast<int64_t>(len) * inner; ++j) dst[j] += src[j];
        }
    });
}

// contiguous reshape (same element order)
inline Var reshape(const Var& x, std::vector<int> shape) {
    if (Tensor::checked_numel(shape) != x.value().numel())
        throw std::invalid_argument("reshape: numel mismatch");
    Tensor y = x.value().reshaped(shape);
    NodeRef xn = x.n;
    return detail::make_node(std::move(y), {xn}, [xn](Node& self) {
        detail::accum(xn, self.grad.data(), self.grad.numel());
    });
}

// ---------------------------------------------------------------------------
// bilinear upsample (half-pixel centers), x {N,C,H,W} -> {N,C,OH,OW}
// ---------------------------------------------------------------------------

inline Var upsample_bilinear(const Var& x, int oh, int ow) {
    const Tensor& xv = x.value();
    int n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    Tensor y({n, c, oh, ow});
    float sy = static_cast<float>(h) / oh, sx = static_cast<float>(w) / ow;

    std::vector<int> y0s(oh), y1s(oh);
    std::vector<float> fys(oh);
    for (int oy = 0; oy < oh; ++oy) {
        float p = std::min(std::max((oy + 0.5f) * sy - 0.5f, 0.0f), static_cast<float>(h - 1));
        int y0 = static_cast<int>(p);
        y0s[oy] = y0;
        y1s[oy] = std::min(y0 + 1, h - 1);
        fys[oy] = p - y0;
    }
    std::vector<int> x0s(ow), x1s(ow);
    std::vector<float> fxs(ow);
    for (int ox = 0; ox < ow; ++ox) {
        float p = std::min(std::max((ox + 0.5f) * sx - 0.5f, 0.0f), static_cast<float>(w - 1));
        int x0 = static_cast<int>(p);
        x0s[ox] = x0;
        x1s[ox] = std::min(x0 + 1, w - 1);
        fxs[ox] = p - x0;
    }

#pragma omp parallel for schedule(static) collapse(2)
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    float fy = fys[oy], fx = fxs[ox];
                    y.at(i, ch, oy, ox) =
                        (1 - fy) * ((1 - fx) * xv.at(i, ch, y0s[oy], x0s[ox]) +
                                    fx * xv.at(i, ch, y0s[oy], x1s[ox])) +
                        fy * ((1 - fx) * xv.at(i, ch, y1s[oy], x0s[ox]) +
                              fx * xv.at(i, ch, y1s[oy], x1s[ox]));
                }

    NodeRef xn = x.n;
    return detail::make_node(std::move(y), {xn}, [xn, oh, ow, y0s, y1s, fys, x0s, x1s, fxs](Node& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        int n = xn->value.dim(0), c = xn->value.dim(1);
#pragma omp parallel for schedule(static) collapse(2)
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int oy = 0; oy < oh; ++oy)
                    for (int ox = 0; ox < ow; ++ox) {
                        float g = self.grad.at(i, ch, oy, ox);
                        float fy = fys[oy], fx = fxs[ox];
                        xn->grad.at(i, ch, y0s[oy], x0s[ox]) += g * (1 - fy) * (1 - fx);
                        xn->grad.at(i, ch, y0s[oy], x1s[ox]) += g * (1 - fy) * fx;
                        xn->grad.at(i, ch, y1s[oy], x0s[ox]) += g * fy * (1 - fx);
                        xn->grad.at(i, ch, y1s[oy], x1s[ox]) += g * fy * fx;
                    }
    });
}

}  // namespace maskdiff::nn
