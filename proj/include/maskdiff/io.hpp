#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <stdexcept>
#include <string>

#include "maskdiff/core/tensor.hpp"

namespace maskdiff::io {

// {3,H,W} RGB in [0,1]
inline Tensor imread_rgb01(const std::string& path) {
    cv::Mat img = cv::imread(path, cv::IMREAD_COLOR);
    if (img.empty()) throw std::runtime_error("failed to read image: " + path);
    Tensor t({3, img.rows, img.cols});
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) {
            cv::Vec3b bgr = img.at<cv::Vec3b>(y, x);
            t.at(0, y, x) = bgr[2] / 255.0f;
            t.at(1, y, x) = bgr[1] / 255.0f;
            t.at(2, y, x) = bgr[0] / 255.0f;
        }
    return t;
}

// {H,W} grayscale in [0,1]
inline Tensor imread_gray01(const std::string& path) {
    cv::Mat img = cv::imread(path, cv::IMREAD_GRAYSCALE);
    if (img.empty()) throw std::runtime_error("failed to read image: " + path);
    Tensor t({img.rows, img.cols});
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) t.at(y, x) = img.at<uint8_t>(y, x) / 255.0f;
    return t;
}

// writes round(255 * v) as 8-bit grayscale
inline void imwrite_gray(const std::string& path, const Tensor& t) {
    if (t.ndim() != 2) throw std::invalid_argument("imwrite_gray: expects {H,W}");
    cv::Mat img(t.dim(0), t.dim(1), CV_8UC1);
    for (int y = 0; y < t.dim(0); ++y)
        for (int x = 0; x < t.dim(1); ++x) {
            float v = std::min(1.0f, std::max(0.0f, t.at(y, x)));
            img.at<uint8_t>(y, x) = static_cast<uint8_t>(std::lround(255.0f * v));
        }
    if (!cv::imwrite(path, img)) throw std::runtime_error("failed to write image: " + path);
}

inline Tensor resize_bilinear_hw(const Tensor& t, int oh, int ow) {
    if (t.ndim() != 2) throw std::invalid_argument("resize_bilinear_hw: expects {H,W}");
    if (t.dim(0) == oh && t.dim(1) == ow) return t;
    cv::Mat src(t.dim(0), t.dim(1), CV_32FC1, const_cast<float*>(t.data()));
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(ow, oh), 0, 0, cv::INTER_LINEAR);
    Tensor out({oh, ow});
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) out.at(y, x) = dst.at<float>(y, x);
    return out;
}

inline Tensor resize_nearest_hw(const Tensor& t, int oh, int ow) {
    if (t.ndim() != 2) throw std::invalid_argument("resize_nearest_hw: expects {H,W}");
    if (t.dim(0) == oh && t.dim(1) == ow) return t;
    cv::Mat src(t.dim(0), t.dim(1), CV_32FC1, const_cast<float*>(t.data()));
    cv::Mat dst;
    cv::resize(src, dst, cv::Size(ow, oh), 0, 0, cv::INTER_NEAREST);
    Tensor out({oh, ow});
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) out.at(y, x) = dst.at<float>(y, x);
    return out;
}

inline Tensor resize_rgb_bilinear(const Tensor& t, int oh, int ow) {
    if (t.ndim() != 3 || t.dim(0) != 3) throw std::invalid_argument("resize_rgb_bilinear: expects {3,H,W}");
    if (t.dim(1) == oh && t.dim(2) == ow) return t;
    Tensor out({3, oh, ow});
    for (int c = 0; c < 3; ++c) {
        Tensor plane({t.dim(1), t.dim(2)});
        std::copy(t.data() + static_cast<int64_t>(c) * t.dim(1) * t.dim(2),
                  t.data() + static_cast<int64_t>(c + 1) * t.dim(1) * t.dim(2), plane.data());
        Tensor rp = resize_bilinear_hw(plane, oh, ow);
        std::copy(rp.data(), rp.data() + rp.numel(),
                  out.data() + static_cast<int64_t>(c) * oh * ow);
    }
    return out;
}

}  // namespace maskdiff::io
