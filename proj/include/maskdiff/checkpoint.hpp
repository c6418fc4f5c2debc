#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "maskdiff/core/tensor.hpp"

namespace maskdiff {

// Single-file binary archive: format version, RunConfig snapshot (JSON text),
// progress counters, named parameter tensors and the optimizer moments.
// Loading and re-saving reproduces the bytes exactly.
struct Checkpoint {
    static constexpr uint32_t kMagic = 0x4b43444dU;  // "MDCK"
    static constexpr uint32_t kVersion = 1;

    std::string config_json;
    int64_t epoch = 0;
    int64_t global_step = 0;
    uint8_t phase = 0;  // 0 = base_res, 1 = finetune_res
    uint64_t seed = 0;
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<Tensor> opt_m, opt_v;
    int64_t opt_step = 0;

    std::map<std::string, Tensor> param_map() const {
        std::map<std::string, Tensor> m;
        for (const auto& [k, v] : params) m.emplace(k, v);
        return m;
    }
};

namespace ckpt_detail {

template <typename T>
void put(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

inline void put_string(std::ostream& os, const std::string& s) {
    put<uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string take_string(std::istream& is) {
    uint64_t n = take<uint64_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw std::runtime_error("checkpoint: truncated string");
    return s;
}

inline void put_tensor(std::ostream& os, const Tensor& t) {
    put<uint32_t>(os, static_cast<uint32_t>(t.ndim()));
    for (int d : t.shape()) put<int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

inline Tensor take_tensor(std::istream& is) {
    uint32_t nd = take<uint32_t>(is);
    if (nd > 8) throw std::runtime_error("checkpoint: implausible tensor rank");
    std::vector<int> shape(nd);
    for (auto& d : shape) d = take<int32_t>(is);
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!is) throw std::runtime_error("checkpoint: truncated tensor");
    return t;
}

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
    using namespace ckpt_detail;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
    put<uint32_t>(os, Checkpoint::kMagic);
    put<uint32_t>(os, Checkpoint::kVersion);
    put_string(os, c.config_json);
    put<int64_t>(os, c.epoch);
    put<int64_t>(os, c.global_step);
    put<uint8_t>(os, c.phase);
    put<uint64_t>(os, c.seed);
    put<uint64_t>(os, c.params.size());
    for (const auto& [name, t] : c.params) {
        put_string(os, name);
        put_tensor(os, t);
    }
    put<int64_t>(os, c.opt_step);
    put<uint64_t>(os, c.opt_m.size());
    for (const auto& t : c.opt_m) put_tensor(os, t);
    for (const auto& t : c.opt_v) put_tensor(os, t);
    if (!os) throw std::runtime_error("checkpoint write failed (disk full?): " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    using namespace ckpt_detail;
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    if (take<uint32_t>(is) != Checkpoint::kMagic)
        throw std::runtime_error("not a checkpoint file: " + path);
    uint32_t version = take<uint32_t>(is);
    if (version != Checkpoint::kVersion)
        throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    c.config_json = take_string(is);
    c.epoch = take<int64_t>(is);
    c.global_step = take<int64_t>(is);
    c.phase = take<uint8_t>(is);
    c.seed = take<uint64_t>(is);
    uint64_t n = take<uint64_t>(is);
    c.params.reserve(n);
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = take_string(is);
        c.params.emplace_back(std::move(name), take_tensor(is));
    }
    c.opt_step = take<int64_t>(is);
    uint64_t m = take<uint64_t>(is);
    c.opt_m.reserve(m);
    c.opt_v.reserve(m);
    for (uint64_t i = 0; i < m; ++i) c.opt_m.push_back(take_tensor(is));
    for (uint64_t i = 0; i < m; ++i) c.opt_v.push_back(take_tensor(is));
    return c;
}

}  // namespace maskdiff
