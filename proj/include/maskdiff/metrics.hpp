#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <vector>

#include "maskdiff/core/tensor.hpp"
#include "maskdiff/io.hpp"

namespace maskdiff {

// Mask-quality measures. pred is a {H,W} map in [0,1], gt a {H,W} map in {0,1}.
// Formulas follow the measures' defining papers; the test suite checks them
// against brute-force references.

namespace metric_detail {

constexpr double kEps = 2.220446049250313e-16;

inline void check_pair(const Tensor& pred, const Tensor& gt) {
    if (pred.ndim() != 2 || gt.ndim() != 2 || !pred.same_shape(gt))
        throw std::invalid_argument("metrics: prediction and GT must be equal-size {H,W} maps");
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

inline double var_unbiased(const std::vector<double>& v, double mean) {
    if (v.size() < 2) return 0.0;
    double s = 0.0;
    for (double x : v) s += (x - mean) * (x - mean);
    return s / static_cast<double>(v.size() - 1);
}

// ---- exact Euclidean distance transform with nearest-site tracking ----
// Column pass finds the nearest foreground row per column, then a rowwise
// lower-envelope pass (Felzenszwalb & Huttenlocher) completes the 2D result.
struct DistanceField {
    std::vector<double> dist;   // Euclidean distance to the nearest gt==1 pixel
    std::vector<int64_t> site;  // linear index of that pixel (-1 when gt is empty)
};

inline DistanceField edt_with_sites(const Tensor& gt) {
    int h = gt.dim(0), w = gt.dim(1);
    const double kInf = 1e18;
    DistanceField out;
    out.dist.assign(static_cast<size_t>(h) * w, kInf);
    out.site.assign(static_cast<size_t>(h) * w, -1);

    // nearest foreground row per column (1D pass up + down)
    std::vector<int> near_row(static_cast<size_t>(h) * w, -1);
    for (int x = 0; x < w; ++x) {
        int last = -1;
        for (int y = 0; y < h; ++y) {
            if (gt.at(y, x) > 0.5f) last = y;
            near_row[static_cast<size_t>(y) * w + x] = last;
        }
        last = -1;
        for (int y = h - 1; y >= 0; --y) {
            if (gt.at(y, x) > 0.5f) last = y;
            int& cur = near_row[static_cast<size_t>(y) * w + x];
            if (last >= 0 && (cur < 0 || std::abs(last - y) < std::abs(cur - y))) cur = last;
        }
    }

    std::vector<double> f(w), dcol(w);
    std::vector<int> vx(w), best_col(w);
    std::vector<double> z(w + 1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int r = near_row[static_cast<size_t>(y) * w + x];
            f[x] = r < 0 ? kInf : static_cast<double>(r - y) * (r - y);
        }
        // lower envelope of parabolas x' -> f[x'] + (x - x')^2
        int k = 0;
        vx[0] = 0;
        z[0] = -kInf;
        z[1] = kInf;
        for (int q = 1; q < w; ++q) {
            if (f[q] >= kInf) continue;
            double s;
            while (true) {
                int p = vx[k];
                if (f[p] >= kInf) {
                    // drop unreachable parabola
                    if (k == 0) {
                        vx[0] = q;
                        z[0] = -kInf;
                        z[1] = kInf;
                        s = -kInf;
                        break;
                    }
                    --k;
                    continue;
                }
                s = ((f[q] + q * q) - (f[p] + p * p)) / (2.0 * q - 2.0 * p);
                if (s <= z[k]) {
                    if (k == 0) {
                        vx[0] = q;
                        z[1] = kInf;
                        s = -kInf;
                        break;
                    }
                    --k;
                } else
                    break;
            }
            if (vx[k] != q) {
                ++k;
                vx[k] = q;
                z[k] = s;
                z[k + 1] = kInf;
            }
        }
        int kk = 0;
        for (int x = 0; x < w; ++x) {
            while (z[kk + 1] < x) ++kk;
            int p = vx[kk];
            if (f[p] >= kInf) {
                dcol[x] = kInf;
                best_col[x] = -1;
            } else {
                dcol[x] = f[p] + static_cast<double>(x - p) * (x - p);
                best_col[x] = p;
            }
        }
        for (int x = 0; x < w; ++x) {
            size_t idx = static_cast<size_t>(y) * w + x;
            if (best_col[x] >= 0) {
                out.dist[idx] = std::sqrt(dcol[x]);
                int sx = best_col[x];
                out.site[idx] = static_cast<int64_t>(near_row[static_cast<size_t>(y) * w + sx]) * w + sx;
            }
        }
    }
    return out;
}

// 2D correlation with zero padding
inline std::vector<double> filter_zero_pad(const std::vector<double>& img, int h, int w,
                                           const std::vector<double>& kernel, int k) {
    int r = k / 2;
    std::vector<double> out(img.size(), 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double s = 0.0;
            for (int dy = -r; dy <= r; ++dy)
                for (int dx = -r; dx <= r; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                    s += img[static_cast<size_t>(yy) * w + xx] *
                         kernel[static_cast<size_t>(dy + r) * k + (dx + r)];
                }
            out[static_cast<size_t>(y) * w + x] = s;
        }
    return out;
}

inline std::vector<double> gaussian_kernel(int k, double sigma) {
    std::vector<double> ker(static_cast<size_t>(k) * k);
    int r = k / 2;
    double sum = 0.0;
    for (int y = -r; y <= r; ++y)
        for (int x = -r; x <= r; ++x) {
            double v = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
            ker[static_cast<size_t>(y + r) * k + (x + r)] = v;
            sum += v;
        }
    for (auto& v : ker) v /= sum;
    return ker;
}

// region similarity used by the structure measure
inline double region_ssim(const std::vector<double>& p, const std::vector<double>& g) {
    double x = mean_of(p), y = mean_of(g);
    double sx = var_unbiased(p, x), sy = var_unbiased(g, y);
    double sxy = 0.0;
    if (p.size() >= 2)
        for (size_t i = 0; i < p.size(); ++i) sxy += (p[i] - x) * (g[i] - y);
    if (p.size() >= 2) sxy /= static_cast<double>(p.size() - 1);
    double alpha = 4.0 * x * y * sxy;
    double beta = (x * x + y * y) * (sx + sy);
    if (alpha != 0.0) return alpha / (beta + kEps);
    return beta == 0.0 ? 1.0 : 0.0;
}

inline double object_score(const std::vector<double>& vals) {
    double x = mean_of(vals);
    double mu = x;
    double sd = 0.0;
    if (vals.size() >= 2) {
        double s = 0.0;
        for (double v : vals) s += (v - mu) * (v - mu);
        sd = std::sqrt(s / static_cast<double>(vals.size() - 1));
    }
    return 2.0 * x / (x * x + 1.0 + sd + kEps);
}

}  // namespace metric_detail

inline double mae(const Tensor& pred, const Tensor& gt) {
    metric_detail::check_pair(pred, gt);
    double s = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) s += std::fabs(static_cast<double>(pred[i]) - gt[i]);
    return s / static_cast<double>(pred.numel());
}

// structure measure: alpha * S_object + (1-alpha) * S_region, alpha = 0.5
inline double s_measure(const Tensor& pred, const Tensor& gt) {
    using namespace metric_detail;
    check_pair(pred, gt);
    int h = gt.dim(0), w = gt.dim(1);
    int64_t n = gt.numel();
    double y = 0.0;
    for (int64_t i = 0; i < n; ++i) y += gt[i];
    y /= static_cast<double>(n);

    double predmean = 0.0;
    for (int64_t i = 0; i < n; ++i) predmean += pred[i];
    predmean /= static_cast<double>(n);

    if (y == 0.0) return 1.0 - predmean;  // degenerate all-background rule
    if (y == 1.0) return predmean;

    // object part
    std::vector<double> fg, bg;
    for (int64_t i = 0; i < n; ++i) {
        if (gt[i] > 0.5f)
            fg.push_back(pred[i]);
        else
            bg.push_back(1.0 - pred[i]);
    }
    double s_obj = y * object_score(fg) + (1.0 - y) * object_score(bg);

    // region part: split at the GT centroid (1-indexed, as in the reference)
    double total = y * static_cast<double>(n);
    double cx = 0.0, cy = 0.0;
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx)
            if (gt.at(yy, xx) > 0.5f) {
                cy += yy + 1;
                cx += xx + 1;
            }
    int X = static_cast<int>(std::lround(cx / total));
    int Y = static_cast<int>(std::lround(cy / total));

    auto collect = [&](const Tensor& m, int y0, int y1, int x0, int x1) {
        std::vector<double> v;
        v.reserve(static_cast<size_t>(std::max(0, y1 - y0)) * std::max(0, x1 - x0));
        for (int yy = y0; yy < y1; ++yy)
            for (int xx = x0; xx < x1; ++xx) v.push_back(m.at(yy, xx));
        return v;
    };
    double s_reg = 0.0;
    const int xs[3] = {0, X, w}, ys[3] = {0, Y, h};
    for (int qy = 0; qy < 2; ++qy)
        for (int qx = 0; qx < 2; ++qx) {
            auto pv = collect(pred, ys[qy], ys[qy + 1], xs[qx], xs[qx + 1]);
            auto gv = collect(gt, ys[qy], ys[qy + 1], xs[qx], xs[qx + 1]);
            double weight = static_cast<double>(pv.size()) / static_cast<double>(n);
            s_reg += weight * region_ssim(pv, gv);
        }

    double q = 0.5 * s_obj + 0.5 * s_reg;
    return std::max(0.0, q);
}

// dependency-weighted F-measure with beta^2 = 1
inline double weighted_f_measure(const Tensor& pred, const Tensor& gt) {
    using namespace metric_detail;
    check_pair(pred, gt);
    int h = gt.dim(0), w = gt.dim(1);
    int64_t n = gt.numel();
    int64_t fg_count = 0;
    for (int64_t i = 0; i < n; ++i)
        if (gt[i] > 0.5f) ++fg_count;
    if (fg_count == 0) {
        for (int64_t i = 0; i < n; ++i)
            if (pred[i] > 0.0f) return 0.0;
        return 1.0;
    }

    DistanceField df = edt_with_sites(gt);
    std::vector<double> e(static_cast<size_t>(n)), et(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) e[static_cast<size_t>(i)] = std::fabs(pred[i] - gt[i]);
    for (int64_t i = 0; i < n; ++i)
        et[static_cast<size_t>(i)] =
            gt[i] > 0.5f ? e[static_cast<size_t>(i)] : e[static_cast<size_t>(df.site[static_cast<size_t>(i)])];

    std::vector<double> ea = filter_zero_pad(et, h, w, gaussian_kernel(7, 5.0), 7);
    std::vector<double> min_e_ea = e;
    for (int64_t i = 0; i < n; ++i)
        if (gt[i] > 0.5f && ea[static_cast<size_t>(i)] < e[static_cast<size_t>(i)])
            min_e_ea[static_cast<size_t>(i)] = ea[static_cast<size_t>(i)];

    const double decay = std::log(0.5) / 5.0;
    double ew_fg = 0.0, ew_bg = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (gt[i] > 0.5f)
            ew_fg += min_e_ea[static_cast<size_t>(i)];
        else
            ew_bg += min_e_ea[static_cast<size_t>(i)] *
                     (2.0 - std::exp(decay * df.dist[static_cast<size_t>(i)]));
    }
    double tpw = static_cast<double>(fg_count) - ew_fg;
    double fpw = ew_bg;
    double recall = 1.0 - ew_fg / static_cast<double>(fg_count);
    double precision = tpw / (kEps + tpw + fpw);
    return 2.0 * recall * precision / (kEps + recall + precision);
}

// enhanced-alignment measure at one binarization threshold
inline double e_measure_binary(const Tensor& fm, const Tensor& gt) {
    using namespace metric_detail;
    check_pair(fm, gt);
    int64_t n = gt.numel();
    double sum_gt = 0.0;
    for (int64_t i = 0; i < n; ++i) sum_gt += gt[i];
    double score = 0.0;
    if (sum_gt == 0.0) {
        for (int64_t i = 0; i < n; ++i) score += 1.0 - fm[i];
    } else if (sum_gt == static_cast<double>(n)) {
        for (int64_t i = 0; i < n; ++i) score += fm[i];
    } else {
        double mu_f = 0.0, mu_g = sum_gt / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) mu_f += fm[i];
        mu_f /= static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
            double af = fm[i] - mu_f, ag = gt[i] - mu_g;
            double align = 2.0 * ag * af / (ag * ag + af * af + kEps);
            score += (align + 1.0) * (align + 1.0) / 4.0;
        }
    }
    return score / static_cast<double>(n);
}

// mean over 256 binarization thresholds in (0,1]
inline double e_measure(const Tensor& pred, const Tensor& gt) {
    metric_detail::check_pair(pred, gt);
    double acc = 0.0;
    Tensor fm(pred.shape());
    for (int i = 0; i < 256; ++i) {
        float th = static_cast<float>(i + 1) / 256.0f;
        for (int64_t j = 0; j < pred.numel(); ++j) fm[j] = pred[j] >= th ? 1.0f : 0.0f;
        acc += e_measure_binary(fm, gt);
    }
    return acc / 256.0;
}

struct MetricReport {
    double mae = 0.0;
    double s_alpha = 0.0;
    double f_beta_w = 0.0;
    double e_phi = 0.0;
    int n_images = 0;
};

struct ImageScore {
    std::string id;
    double mae = 0.0, s_alpha = 0.0, f_beta_w = 0.0, e_phi = 0.0;
};

inline ImageScore score_pair(const Tensor& pred_raw, const Tensor& gt01, const std::string& id) {
    Tensor pred = pred_raw;
    if (!pred.same_shape(gt01)) pred = io::resize_bilinear_hw(pred, gt01.dim(0), gt01.dim(1));
    ImageScore s;
    s.id = id;
    s.mae = mae(pred, gt01);
    s.s_alpha = s_measure(pred, gt01);
    s.f_beta_w = weighted_f_measure(pred, gt01);
    s.e_phi = e_measure(pred, gt01);
    return s;
}

// Scores matching stems between pred_dir and gt_dir. Predictions are resized
// to the GT size before scoring; missing pairs are listed and skipped.
inline MetricReport evaluate_dir(const std::string& pred_dir, const std::string& gt_dir,
                                 std::vector<ImageScore>* per_image = nullptr,
                                 std::ostream& log = std::cerr) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(pred_dir) || !fs::is_directory(gt_dir))
        throw std::runtime_error("evaluate_dir: both directories must exist");
    std::vector<std::string> stems;
    for (const auto& e : fs::directory_iterator(gt_dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
            stems.push_back(e.path().stem().string());
    std::sort(stems.begin(), stems.end());

    MetricReport rep;
    for (const auto& stem : stems) {
        fs::path pp = fs::path(pred_dir) / (stem + ".png");
        if (!fs::exists(pp)) {
            log << "warning: no prediction for " << stem << ", skipping\n";
            continue;
        }
        Tensor pred = io::imread_gray01(pp.string());
        Tensor gt = io::imread_gray01((fs::path(gt_dir) / (stem + ".png")).string());
        for (int64_t i = 0; i < gt.numel(); ++i) gt[i] = gt[i] >= 0.5f ? 1.0f : 0.0f;
        ImageScore s = score_pair(pred, gt, stem);
        if (per_image) per_image->push_back(s);
        rep.mae += s.mae;
        rep.s_alpha += s.s_alpha;
        rep.f_beta_w += s.f_beta_w;
        rep.e_phi += s.e_phi;
        rep.n_images += 1;
    }
    if (rep.n_images == 0) throw std::runtime_error("evaluate_dir: no matching image pairs");
    rep.mae /= rep.n_images;
    rep.s_alpha /= rep.n_images;
    rep.f_beta_w /= rep.n_images;
    rep.e_phi /= rep.n_images;
    return rep;
}

inline void print_report_table(const MetricReport& r, std::ostream& os) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-8s %8s %8s %8s %8s\n", "images", "MAE", "S", "Fw", "E");
    os << buf;
    std::snprintf(buf, sizeof(buf), "%-8d %8.4f %8.4f %8.4f %8.4f\n", r.n_images, r.mae, r.s_alpha,
                  r.f_beta_w, r.e_phi);
    os << buf;
}

inline void write_report_csv(const std::string& path, const MetricReport& rep,
                             const std::vector<ImageScore>& per_image) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write report: " + path);
    os << "id,mae,s_alpha,f_beta_w,e_phi\n";
    char buf[256];
    for (const auto& s : per_image) {
        std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f\n", s.id.c_str(), s.mae, s.s_alpha,
                      s.f_beta_w, s.e_phi);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "aggregate,%.6f,%.6f,%.6f,%.6f\n", rep.mae, rep.s_alpha,
                  rep.f_beta_w, rep.e_phi);
    os << buf;
}

}  // namespace maskdiff
