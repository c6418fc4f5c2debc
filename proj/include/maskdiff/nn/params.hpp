#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "maskdiff/core/rng.hpp"
#include "maskdiff/nn/graph.hpp"

namespace maskdiff::nn {

// Owns the trainable leaves. Construction order fixes both the optimizer
// slot order and the checkpoint layout.
class ParamStore {
public:
    Var add(const std::string& name, Tensor init) {
        Var p = Var::leaf(std::move(init), true);
        p.n->name = name;
        params_.push_back(p);
        return p;
    }

    std::vector<Var>& all() { return params_; }
    const std::vector<Var>& all() const { return params_; }

    int64_t count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.value().numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.n->zero_grad();
    }

private:
    std::vector<Var> params_;
};

inline Tensor uniform_init(std::vector<int> shape, float bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(rng.uniform(-bound, bound));
    return t;
}

// fan-in scaled uniform, the usual default for conv/linear layers
inline Tensor fanin_init(std::vector<int> shape, int fan_in, Rng& rng) {
    return uniform_init(std::move(shape), 1.0f / std::sqrt(static_cast<float>(fan_in)), rng);
}

struct LinearLayer {
    Var w, b;
    LinearLayer() = default;
    LinearLayer(ParamStore& ps, const std::string& name, int cin, int cout, Rng& rng) {
        w = ps.add(name + ".w", fanin_init({cout, cin}, cin, rng));
        b = ps.add(name + ".b", fanin_init({cout}, cin, rng));
    }
    Var operator()(const Var& x) const { return linear(x, w, b); }
};

struct ConvLayer {
    Var w, b;
    int stride = 1, pad = 0;
    ConvLayer() = default;
    ConvLayer(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride_,
              int pad_, Rng& rng, bool zero_init = false)
        : stride(stride_), pad(pad_) {
        if (zero_init) {
            w = ps.add(name + ".w", Tensor({cout, cin, k, k}));
            b = ps.add(name + ".b", Tensor({cout}));
        } else {
            int fan_in = cin * k * k;
            w = ps.add(name + ".w", fanin_init({cout, cin, k, k}, fan_in, rng));
            b = ps.add(name + ".b", fanin_init({cout}, fan_in, rng));
        }
    }
    Var operator()(const Var& x) const { return conv2d(x, w, b, stride, pad); }
};

struct LayerNormLayer {
    Var g, b;
    LayerNormLayer() = default;
    LayerNormLayer(ParamStore& ps, const std::string& name, int c) {
        g = ps.add(name + ".g", Tensor({c}, 1.0f));
        b = ps.add(name + ".b", Tensor({c}));
    }
    Var operator()(const Var& x) const { return layer_norm(x, g, b); }
};

}  // namespace maskdiff::nn
