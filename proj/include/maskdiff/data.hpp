#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "maskdiff/core/rng.hpp"
#include "maskdiff/core/tensor.hpp"
#include "maskdiff/io.hpp"

namespace maskdiff {

// image: {3,H,W} in [0,1] (normalization happens at the model boundary);
// mask: {H,W} strictly +/-1
struct DatasetSample {
    Tensor image;
    Tensor mask;
    std::string id;
};

inline Tensor binarize_to_pm1(const Tensor& gray01) {
    Tensor m(gray01.shape());
    for (int64_t i = 0; i < m.numel(); ++i) m[i] = gray01[i] >= 0.5f ? 1.0f : -1.0f;
    return m;
}

class Dataset {
public:
    virtual ~Dataset() = default;
    virtual size_t size() const = 0;
    virtual DatasetSample get(size_t index, int resolution) const = 0;
};

// <root>/Imgs/<stem>.{jpg,png} paired with <root>/GT/<stem>.png, sorted by stem.
// Images are bilinearly resized; masks nearest-neighbour resized and binarized.
class FolderDataset : public Dataset {
public:
    explicit FolderDataset(const std::string& root) : root_(root) {
        namespace fs = std::filesystem;
        fs::path imgs = fs::path(root) / "Imgs";
        fs::path gts = fs::path(root) / "GT";
        if (!fs::is_directory(imgs) || !fs::is_directory(gts))
            throw std::runtime_error("dataset root must contain Imgs/ and GT/: " + root);
        for (const auto& e : fs::directory_iterator(imgs)) {
            if (!e.is_regular_file()) continue;
            std::string ext = e.path().extension().string();
            if (ext != ".jpg" && ext != ".jpeg" && ext != ".png") continue;
            std::string stem = e.path().stem().string();
            fs::path gt = gts / (stem + ".png");
            if (!fs::exists(gt)) {
                std::cerr << "warning: no GT mask for " << e.path().filename().string()
                          << ", skipping\n";
                continue;
            }
            entries_.push_back({stem, e.path().string(), gt.string()});
        }
        std::sort(entries_.begin(), entries_.end(),
                  [](const Entry& a, const Entry& b) { return a.stem < b.stem; });
        if (entries_.empty()) std::cerr << "warning: dataset at " << root << " is empty\n";
    }

    size_t size() const override { return entries_.size(); }

    DatasetSample get(size_t index, int resolution) const override {
        const Entry& e = entries_.at(index);
        DatasetSample s;
        s.id = e.stem;
        s.image = io::resize_rgb_bilinear(io::imread_rgb01(e.img_path), resolution, resolution);
        Tensor gray = io::resize_nearest_hw(io::imread_gray01(e.gt_path), resolution, resolution);
        s.mask = binarize_to_pm1(gray);
        return s;
    }

private:
    struct Entry {
        std::string stem, img_path, gt_path;
    };
    std::string root_;
    std::vector<Entry> entries_;
};

enum class SynthShape { blob, ring, multi };

struct SynthConfig {
    int n_images = 8;
    int size = 64;
    uint64_t seed = 7;
    int texture_octaves = 4;
    SynthShape shape = SynthShape::blob;

    void validate() const {
        if (n_images < 1) throw std::invalid_argument("SynthConfig: n_images must be >= 1");
        if (size < 32) throw std::invalid_argument("SynthConfig: size must be >= 32");
        if (texture_octaves < 1 || texture_octaves > 8)
            throw std::invalid_argument("SynthConfig: texture_octaves must be in 1..8");
    }
};

namespace detail {

inline double hash01(uint64_t seed, int64_t x, int64_t y) {
    uint64_t h = mix_seed(seed, static_cast<uint64_t>(x) * 0x9ddfea08eb382d69ULL +
                                    static_cast<uint64_t>(y));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// value noise on an integer lattice, bilinear with smoothstep easing
inline double value_noise(uint64_t seed, double u, double v) {
    double fx = std::floor(u), fy = std::floor(v);
    int64_t x0 = static_cast<int64_t>(fx), y0 = static_cast<int64_t>(fy);
    double tx = smoothstep(u - fx), ty = smoothstep(v - fy);
    double a = hash01(seed, x0, y0), b = hash01(seed, x0 + 1, y0);
    double c = hash01(seed, x0, y0 + 1), d = hash01(seed, x0 + 1, y0 + 1);
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

inline double fbm(uint64_t seed, double u, double v, int octaves) {
    double sum = 0.0, amp = 1.0, norm = 0.0, freq = 4.0;
    for (int o = 0; o < octaves; ++o) {
        sum += amp * value_noise(mix_seed(seed, static_cast<uint64_t>(o)), u * freq, v * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    return sum / norm;
}

struct Blob {
    double cy, cx, r0;
    std::array<double, 4> amp{}, phase{};  // harmonics k = 2..5

    bool contains(double y, double x) const {
        double dy = y - cy, dx = x - cx;
        double rad = std::sqrt(dy * dy + dx * dx);
        double th = std::atan2(dy, dx);
        double r = r0;
        for (int k = 0; k < 4; ++k) r += r0 * amp[k] * std::sin((k + 2) * th + phase[k]);
        return rad <= r;
    }
};

struct Scene {
    std::vector<Blob> blobs;
    double ring_inner = 0.0;  // >0 marks the ring variant
    uint64_t tex_seed = 0;
    double fg_du = 0.0, fg_dv = 0.0, fg_delta = 0.0;
    int octaves = 4;

    bool inside(double y, double x) const {
        if (ring_inner > 0.0) {
            const Blob& b = blobs[0];
            double rad = std::hypot(y - b.cy, x - b.cx);
            return b.contains(y, x) && rad > ring_inner * b.r0;
        }
        for (const auto& b : blobs)
            if (b.contains(y, x)) return true;
        return false;
    }

    double mask_area() const {  // fixed internal raster so it never depends on output size
        const int n = 128;
        int cnt = 0;
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x)
                if (inside((y + 0.5) / n, (x + 0.5) / n)) ++cnt;
        return static_cast<double>(cnt) / (n * n);
    }
};

inline Blob random_blob(Rng& rng, double rlo, double rhi) {
    Blob b;
    b.cy = rng.uniform(0.35, 0.65);
    b.cx = rng.uniform(0.35, 0.65);
    b.r0 = rng.uniform(rlo, rhi);
    for (int k = 0; k < 4; ++k) {
        b.amp[k] = rng.uniform(-0.16, 0.16);
        b.phase[k] = rng.uniform(0.0, 6.283185307179586);
    }
    return b;
}

inline Scene make_scene(const SynthConfig& cfg, size_t index) {
    Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(index), 0xDA7AULL));
    Scene sc;
    sc.tex_seed = rng.u64();
    sc.fg_du = rng.uniform(7.0, 23.0);
    sc.fg_dv = rng.uniform(7.0, 23.0);
    sc.fg_delta = rng.uniform(-0.06, 0.06);
    sc.octaves = cfg.texture_octaves;
    for (int attempt = 0; attempt < 64; ++attempt) {
        sc.blobs.clear();
        sc.ring_inner = 0.0;
        switch (cfg.shape) {
            case SynthShape::blob:
                sc.blobs.push_back(random_blob(rng, 0.18, 0.30));
                break;
            case SynthShape::ring:
                sc.blobs.push_back(random_blob(rng, 0.24, 0.34));
                sc.ring_inner = rng.uniform(0.40, 0.55);
                break;
            case SynthShape::multi: {
                int k = rng.uniform_int(2, 3);
                for (int i = 0; i < k; ++i) {
                    Blob b = random_blob(rng, 0.12, 0.20);
                    b.cy = rng.uniform(0.22, 0.78);
                    b.cx = rng.uniform(0.22, 0.78);
                    sc.blobs.push_back(b);
                }
                break;
            }
        }
        double area = sc.mask_area();
        if (area >= 0.05 && area <= 0.60) break;
    }
    return sc;
}

inline DatasetSample render_scene(const Scene& sc, size_t index, int res) {
    DatasetSample s;
    s.id = "synth_" + std::to_string(1000 + index).substr(1);
    s.mask = Tensor({res, res});
    s.image = Tensor({3, res, res});
    for (int y = 0; y < res; ++y) {
        for (int x = 0; x < res; ++x) {
            double v = (y + 0.5) / res, u = (x + 0.5) / res;
            bool fg = sc.inside(v, u);
            s.mask.at(y, x) = fg ? 1.0f : -1.0f;
            for (int c = 0; c < 3; ++c) {
                uint64_t cs = mix_seed(sc.tex_seed, static_cast<uint64_t>(c));
                double t = fg ? fbm(cs, u + sc.fg_du, v + sc.fg_dv, sc.octaves) + sc.fg_delta
                              : fbm(cs, u, v, sc.octaves);
                // muted palette keeps the three channels correlated
                double base = 0.25 + 0.5 * t;
                s.image.at(c, y, x) =
                    static_cast<float>(std::min(1.0, std::max(0.0, base + 0.05 * c)));
            }
        }
    }
    return s;
}

}  // namespace detail

// Procedurally textured backgrounds with a same-texture foreground shape; the
// scene parameters depend only on (seed, index), so any resolution renders the
// same scene.
class SyntheticDataset : public Dataset {
public:
    explicit SyntheticDataset(const SynthConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

    size_t size() const override { return static_cast<size_t>(cfg_.n_images); }

    DatasetSample get(size_t index, int resolution) const override {
        if (index >= size()) throw std::out_of_range("SyntheticDataset: index");
        return detail::render_scene(detail::make_scene(cfg_, index), index, resolution);
    }

    const SynthConfig& config() const { return cfg_; }

private:
    SynthConfig cfg_;
};

inline std::vector<DatasetSample> load_dataset(const std::string& root, int resolution) {
    FolderDataset ds(root);
    std::vector<DatasetSample> out;
    out.reserve(ds.size());
    for (size_t i = 0; i < ds.size(); ++i) out.push_back(ds.get(i, resolution));
    return out;
}

inline std::vector<DatasetSample> make_synthetic(const SynthConfig& cfg) {
    SyntheticDataset ds(cfg);
    std::vector<DatasetSample> out;
    out.reserve(ds.size());
    for (size_t i = 0; i < ds.size(); ++i) out.push_back(ds.get(i, cfg.size));
    return out;
}

// materializes samples in the Imgs/ + GT/ folder layout
inline void write_dataset(const std::vector<DatasetSample>& samples, const std::string& root) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(root) / "Imgs");
    fs::create_directories(fs::path(root) / "GT");
    for (const auto& s : samples) {
        Tensor gray({s.image.dim(1), s.image.dim(2)});
        cv::Mat img(s.image.dim(1), s.image.dim(2), CV_8UC3);
        for (int y = 0; y < s.image.dim(1); ++y)
            for (int x = 0; x < s.image.dim(2); ++x)
                img.at<cv::Vec3b>(y, x) =
                    cv::Vec3b(static_cast<uint8_t>(std::lround(255 * s.image.at(2, y, x))),
                              static_cast<uint8_t>(std::lround(255 * s.image.at(1, y, x))),
                              static_cast<uint8_t>(std::lround(255 * s.image.at(0, y, x))));
        cv::imwrite((fs::path(root) / "Imgs" / (s.id + ".png")).string(), img);
        for (int y = 0; y < s.mask.dim(0); ++y)
            for (int x = 0; x < s.mask.dim(1); ++x) gray.at(y, x) = s.mask.at(y, x) > 0 ? 1.0f : 0.0f;
        io::imwrite_gray((fs::path(root) / "GT" / (s.id + ".png")).string(), gray);
    }
}

// conventional per-channel whitening applied at the model boundary
inline Tensor normalize_image(const Tensor& img, const std::array<float, 3>& mean,
                              const std::array<float, 3>& stdev) {
    Tensor out(img.shape());
    int64_t hw = static_cast<int64_t>(img.dim(1)) * img.dim(2);
    for (int c = 0; c < 3; ++c)
        for (int64_t i = 0; i < hw; ++i)
            out[c * hw + i] = (img[c * hw + i] - mean[c]) / stdev[c];
    return out;
}

}  // namespace maskdiff
