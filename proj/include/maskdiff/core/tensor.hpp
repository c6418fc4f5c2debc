#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskdiff {

// Dense row-major float tensor. Shapes are small vectors of ints; the usual
// layouts here are {H,W} maps, {N,L,C} token sequences and {N,C,H,W} feature maps.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), v_(static_cast<size_t>(checked_numel(shape_)), 0.0f) {}

    Tensor(std::vector<int> shape, float fill)
        : shape_(std::move(shape)), v_(static_cast<size_t>(checked_numel(shape_)), fill) {}

    Tensor(std::vector<int> shape, std::vector<float> data)
        : shape_(std::move(shape)), v_(std::move(data)) {
        if (static_cast<int64_t>(v_.size()) != checked_numel(shape_))
            throw std::invalid_argument("Tensor: data size does not match shape");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, float fill) { return Tensor(std::move(shape), fill); }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
    int64_t numel() const { return static_cast<int64_t>(v_.size()); }
    bool empty() const { return v_.empty(); }

    float* data() { return v_.data(); }
    const float* data() const { return v_.data(); }
    std::vector<float>& raw() { return v_; }
    const std::vector<float>& raw() const { return v_; }

    float& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

    // 2D {H,W}
    float& at(int y, int x) { return v_[static_cast<size_t>(y) * shape_[1] + x]; }
    float at(int y, int x) const { return v_[static_cast<size_t>(y) * shape_[1] + x]; }

    // 3D {N,L,C}
    float& at(int n, int l, int c) {
        return v_[(static_cast<size_t>(n) * shape_[1] + l) * shape_[2] + c];
    }
    float at(int n, int l, int c) const {
        return v_[(static_cast<size_t>(n) * shape_[1] + l) * shape_[2] + c];
    }

    // 4D {N,C,H,W}
    float& at(int n, int c, int h, int w) {
        return v_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    float at(int n, int c, int h, int w) const {
        return v_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(float x) { std::fill(v_.begin(), v_.end(), x); }

    Tensor reshaped(std::vector<int> shape) const {
        Tensor t(std::move(shape), v_);
        return t;
    }

    std::string shape_str() const {
        std::string s = "{";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + "}";
    }

    static int64_t checked_numel(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<float> v_;
};

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
    float m = 0.0f;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace maskdiff
