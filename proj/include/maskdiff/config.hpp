#pragma once

#include <array>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "maskdiff/corruption.hpp"
#include "maskdiff/data.hpp"
#include "maskdiff/networks.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

struct DataConfig {
    std::string type = "synthetic";  // synthetic | folder
    std::string root;
    int resolution = 64;
    bool hflip = true;
    std::array<float, 3> normalize_mean{0.485f, 0.456f, 0.406f};
    std::array<float, 3> normalize_std{0.229f, 0.224f, 0.225f};
    SynthConfig synthetic;
};

struct ScheduleConfig {
    ScheduleKind kind = ScheduleKind::snr_shifted;
    int num_steps = 10;
    double shift = -3.4094961844768505;  // -2 ln 5.5
};

struct OptimizerConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double grad_clip = 1.0;
};

struct TrainerConfig {
    int epochs = 300;
    int finetune_epochs = 0;
    int finetune_resolution = 96;
    int batch_size = 8;
    uint64_t seed = 0;
    int checkpoint_every = 100;
    double early_stop_loss = 0.0;  // 0 disables
    std::string out_dir = "runs/desk";
};

struct SamplerRunConfig {
    std::string mode = "single";  // single | ensemble3
    bool dump_steps = false;
    bool resize_inputs = false;
};

struct OutputConfig {
    std::string dir = "out";
};

// Whole-experiment description; a snapshot is embedded in every checkpoint.
struct RunConfig {
    DataConfig data;
    ScheduleConfig schedule;
    CorruptionConfig corruption;
    ModelConfig model;
    std::string backbone_weights;
    OptimizerConfig optimizer;
    TrainerConfig trainer;
    SamplerRunConfig sampler;
    OutputConfig output;

    NoiseSchedule make_noise_schedule() const {
        return make_schedule(schedule.kind, schedule.num_steps, schedule.shift);
    }
    void validate() const;
};

namespace cfg_detail {

using nlohmann::json;

inline void collect_unknown(const json& j, const std::vector<std::string>& known,
                            const std::string& where, std::vector<std::string>& errors) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known)
            if (it.key() == k) { ok = true; break; }
        if (!ok) errors.push_back("unknown key '" + where + it.key() + "'");
    }
}

template <typename T>
void get_to(const json& j, const char* key, T& out, const std::string& where,
            std::vector<std::string>& errors) {
    if (!j.contains(key)) return;
    try {
        j.at(key).get_to(out);
    } catch (const std::exception& e) {
        errors.push_back("bad value for '" + where + key + "': " + e.what());
    }
}

template <typename T, size_t N>
void get_arr(const json& j, const char* key, std::array<T, N>& out, const std::string& where,
             std::vector<std::string>& errors) {
    if (!j.contains(key)) return;
    try {
        auto v = j.at(key).get<std::vector<T>>();
        if (v.size() != N) throw std::runtime_error("expected " + std::to_string(N) + " entries");
        for (size_t i = 0; i < N; ++i) out[i] = v[i];
    } catch (const std::exception& e) {
        errors.push_back("bad value for '" + where + key + "': " + e.what());
    }
}

}  // namespace cfg_detail

inline void RunConfig::validate() const {
    std::vector<std::string> errors;
    if (data.type != "synthetic" && data.type != "folder")
        errors.push_back("data.type must be 'synthetic' or 'folder'");
    if (data.type == "folder" && data.root.empty()) errors.push_back("data.root required for folder data");
    if (data.resolution < 32 || data.resolution % 4 != 0)
        errors.push_back("data.resolution must be >= 32 and divisible by 4");
    if (schedule.num_steps < 1) errors.push_back("schedule.num_steps must be >= 1");
    if (!std::isfinite(schedule.shift)) errors.push_back("schedule.shift must be finite");
    if (trainer.epochs < 0 || trainer.finetune_epochs < 0) errors.push_back("trainer epochs must be >= 0");
    if (trainer.batch_size < 1) errors.push_back("trainer.batch_size must be >= 1");
    if (trainer.finetune_epochs > 0 &&
        (trainer.finetune_resolution < 32 || trainer.finetune_resolution % 4 != 0))
        errors.push_back("trainer.finetune_resolution must be >= 32 and divisible by 4");
    if (optimizer.lr <= 0.0) errors.push_back("optimizer.lr must be positive");
    if (sampler.mode != "single" && sampler.mode != "ensemble3")
        errors.push_back("sampler.mode must be 'single' or 'ensemble3'");
    try {
        corruption.validate();
    } catch (const std::exception& e) {
        errors.push_back(std::string("corruption: ") + e.what());
    }
    try {
        model.validate();
    } catch (const std::exception& e) {
        errors.push_back(std::string("model: ") + e.what());
    }
    try {
        data.synthetic.validate();
    } catch (const std::exception& e) {
        errors.push_back(std::string("data.synthetic: ") + e.what());
    }
    if (!errors.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& e : errors) msg += "\n  - " + e;
        throw std::invalid_argument(msg);
    }
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
    using cfg_detail::collect_unknown;
    using cfg_detail::get_arr;
    using cfg_detail::get_to;
    std::vector<std::string> errors;
    RunConfig c;

    collect_unknown(j, {"data", "schedule", "corruption", "model", "optimizer", "trainer",
                        "sampler", "output"},
                    "", errors);

    if (j.contains("data")) {
        const auto& d = j.at("data");
        collect_unknown(d, {"type", "root", "resolution", "hflip", "normalize_mean",
                            "normalize_std", "synthetic"},
                        "data.", errors);
        get_to(d, "type", c.data.type, "data.", errors);
        get_to(d, "root", c.data.root, "data.", errors);
        get_to(d, "resolution", c.data.resolution, "data.", errors);
        get_to(d, "hflip", c.data.hflip, "data.", errors);
        get_arr(d, "normalize_mean", c.data.normalize_mean, "data.", errors);
        get_arr(d, "normalize_std", c.data.normalize_std, "data.", errors);
        if (d.contains("synthetic")) {
            const auto& s = d.at("synthetic");
            collect_unknown(s, {"n_images", "size", "seed", "texture_octaves", "shape"},
                            "data.synthetic.", errors);
            get_to(s, "n_images", c.data.synthetic.n_images, "data.synthetic.", errors);
            get_to(s, "size", c.data.synthetic.size, "data.synthetic.", errors);
            get_to(s, "seed", c.data.synthetic.seed, "data.synthetic.", errors);
            get_to(s, "texture_octaves", c.data.synthetic.texture_octaves, "data.synthetic.", errors);
            std::string shape = "blob";
            get_to(s, "shape", shape, "data.synthetic.", errors);
            if (shape == "blob")
                c.data.synthetic.shape = SynthShape::blob;
            else if (shape == "ring")
                c.data.synthetic.shape = SynthShape::ring;
            else if (shape == "multi")
                c.data.synthetic.shape = SynthShape::multi;
            else
                errors.push_back("data.synthetic.shape must be blob|ring|multi");
        }
    }

    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        collect_unknown(s, {"kind", "num_steps", "shift"}, "schedule.", errors);
        std::string kind = "snr_shifted";
        get_to(s, "kind", kind, "schedule.", errors);
        if (kind == "snr_shifted")
            c.schedule.kind = ScheduleKind::snr_shifted;
        else if (kind == "cosine")
            c.schedule.kind = ScheduleKind::cosine;
        else
            errors.push_back("schedule.kind must be snr_shifted|cosine");
        get_to(s, "num_steps", c.schedule.num_steps, "schedule.", errors);
        get_to(s, "shift", c.schedule.shift, "schedule.", errors);
    }

    if (j.contains("corruption")) {
        const auto& s = j.at("corruption");
        collect_unknown(s, {"apply_prob", "boundary_radius", "block_size", "block_flip_prob"},
                        "corruption.", errors);
        get_to(s, "apply_prob", c.corruption.apply_prob, "corruption.", errors);
        get_to(s, "boundary_radius", c.corruption.boundary_radius, "corruption.", errors);
        get_to(s, "block_size", c.corruption.block_size, "corruption.", errors);
        get_to(s, "block_flip_prob", c.corruption.block_flip_prob, "corruption.", errors);
    }

    if (j.contains("model")) {
        const auto& m = j.at("model");
        collect_unknown(m, {"atcn", "dn", "backbone_weights"}, "model.", errors);
        if (m.contains("atcn")) {
            const auto& a = m.at("atcn");
            collect_unknown(a, {"stage_channels", "stage_depths", "patch_strides",
                                "attention_reduction", "num_heads", "mlp_ratio"},
                            "model.atcn.", errors);
            get_arr(a, "stage_channels", c.model.atcn.stage_channels, "model.atcn.", errors);
            get_arr(a, "stage_depths", c.model.atcn.stage_depths, "model.atcn.", errors);
            get_arr(a, "patch_strides", c.model.atcn.patch_strides, "model.atcn.", errors);
            get_arr(a, "attention_reduction", c.model.atcn.attention_reduction, "model.atcn.", errors);
            get_arr(a, "num_heads", c.model.atcn.num_heads, "model.atcn.", errors);
            get_to(a, "mlp_ratio", c.model.atcn.mlp_ratio, "model.atcn.", errors);
        }
        if (m.contains("dn")) {
            const auto& d = m.at("dn");
            collect_unknown(d, {"base_channels", "depth", "time_embed_dim"}, "model.dn.", errors);
            get_to(d, "base_channels", c.model.dn.base_channels, "model.dn.", errors);
            get_to(d, "depth", c.model.dn.depth, "model.dn.", errors);
            get_to(d, "time_embed_dim", c.model.dn.time_embed_dim, "model.dn.", errors);
        }
        get_to(m, "backbone_weights", c.backbone_weights, "model.", errors);
    }

    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        collect_unknown(o, {"lr", "weight_decay", "beta1", "beta2", "grad_clip"}, "optimizer.",
                        errors);
        get_to(o, "lr", c.optimizer.lr, "optimizer.", errors);
        get_to(o, "weight_decay", c.optimizer.weight_decay, "optimizer.", errors);
        get_to(o, "beta1", c.optimizer.beta1, "optimizer.", errors);
        get_to(o, "beta2", c.optimizer.beta2, "optimizer.", errors);
        get_to(o, "grad_clip", c.optimizer.grad_clip, "optimizer.", errors);
    }

    if (j.contains("trainer")) {
        const auto& t = j.at("trainer");
        collect_unknown(t, {"epochs", "finetune_epochs", "finetune_resolution", "batch_size",
                            "seed", "checkpoint_every", "early_stop_loss", "out_dir"},
                        "trainer.", errors);
        get_to(t, "epochs", c.trainer.epochs, "trainer.", errors);
        get_to(t, "finetune_epochs", c.trainer.finetune_epochs, "trainer.", errors);
        get_to(t, "finetune_resolution", c.trainer.finetune_resolution, "trainer.", errors);
        get_to(t, "batch_size", c.trainer.batch_size, "trainer.", errors);
        get_to(t, "seed", c.trainer.seed, "trainer.", errors);
        get_to(t, "checkpoint_every", c.trainer.checkpoint_every, "trainer.", errors);
        get_to(t, "early_stop_loss", c.trainer.early_stop_loss, "trainer.", errors);
        get_to(t, "out_dir", c.trainer.out_dir, "trainer.", errors);
    }

    if (j.contains("sampler")) {
        const auto& s = j.at("sampler");
        collect_unknown(s, {"mode", "dump_steps", "resize_inputs"}, "sampler.", errors);
        get_to(s, "mode", c.sampler.mode, "sampler.", errors);
        get_to(s, "dump_steps", c.sampler.dump_steps, "sampler.", errors);
        get_to(s, "resize_inputs", c.sampler.resize_inputs, "sampler.", errors);
    }

    if (j.contains("output")) {
        const auto& o = j.at("output");
        collect_unknown(o, {"dir"}, "output.", errors);
        get_to(o, "dir", c.output.dir, "output.", errors);
    }

    if (!errors.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& e : errors) msg += "\n  - " + e;
        throw std::invalid_argument(msg);
    }
    c.validate();
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw std::invalid_argument("config parse error in " + path + ": " + e.what());
    }
    return parse_run_config(j);
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["data"] = {
        {"type", c.data.type},
        {"root", c.data.root},
        {"resolution", c.data.resolution},
        {"hflip", c.data.hflip},
        {"normalize_mean", std::vector<float>(c.data.normalize_mean.begin(), c.data.normalize_mean.end())},
        {"normalize_std", std::vector<float>(c.data.normalize_std.begin(), c.data.normalize_std.end())},
        {"synthetic",
         {{"n_images", c.data.synthetic.n_images},
          {"size", c.data.synthetic.size},
          {"seed", c.data.synthetic.seed},
          {"texture_octaves", c.data.synthetic.texture_octaves},
          {"shape", c.data.synthetic.shape == SynthShape::blob
                        ? "blob"
                        : (c.data.synthetic.shape == SynthShape::ring ? "ring" : "multi")}}}};
    j["schedule"] = {{"kind", to_string(c.schedule.kind)},
                     {"num_steps", c.schedule.num_steps},
                     {"shift", c.schedule.shift}};
    j["corruption"] = {{"apply_prob", c.corruption.apply_prob},
                       {"boundary_radius", c.corruption.boundary_radius},
                       {"block_size", c.corruption.block_size},
                       {"block_flip_prob", c.corruption.block_flip_prob}};
    j["model"] = {
        {"atcn",
         {{"stage_channels", std::vector<int>(c.model.atcn.stage_channels.begin(), c.model.atcn.stage_channels.end())},
          {"stage_depths", std::vector<int>(c.model.atcn.stage_depths.begin(), c.model.atcn.stage_depths.end())},
          {"patch_strides", std::vector<int>(c.model.atcn.patch_strides.begin(), c.model.atcn.patch_strides.end())},
          {"attention_reduction", std::vector<int>(c.model.atcn.attention_reduction.begin(), c.model.atcn.attention_reduction.end())},
          {"num_heads", std::vector<int>(c.model.atcn.num_heads.begin(), c.model.atcn.num_heads.end())},
          {"mlp_ratio", c.model.atcn.mlp_ratio}}},
        {"dn",
         {{"base_channels", c.model.dn.base_channels},
          {"depth", c.model.dn.depth},
          {"time_embed_dim", c.model.dn.time_embed_dim}}},
        {"backbone_weights", c.backbone_weights}};
    j["optimizer"] = {{"lr", c.optimizer.lr},
                      {"weight_decay", c.optimizer.weight_decay},
                      {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},
                      {"grad_clip", c.optimizer.grad_clip}};
    j["trainer"] = {{"epochs", c.trainer.epochs},
                    {"finetune_epochs", c.trainer.finetune_epochs},
                    {"finetune_resolution", c.trainer.finetune_resolution},
                    {"batch_size", c.trainer.batch_size},
                    {"seed", c.trainer.seed},
                    {"checkpoint_every", c.trainer.checkpoint_every},
                    {"early_stop_loss", c.trainer.early_stop_loss},
                    {"out_dir", c.trainer.out_dir}};
    j["sampler"] = {{"mode", c.sampler.mode},
                    {"dump_steps", c.sampler.dump_steps},
                    {"resize_inputs", c.sampler.resize_inputs}};
    j["output"] = {{"dir", c.output.dir}};
    return j;
}

inline std::string run_config_to_string(const RunConfig& c) { return run_config_to_json(c).dump(2); }

}  // namespace maskdiff
