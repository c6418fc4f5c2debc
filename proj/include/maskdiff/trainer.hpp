#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/config.hpp"
#include "maskdiff/corruption.hpp"
#include "maskdiff/data.hpp"
#include "maskdiff/losses.hpp"
#include "maskdiff/networks.hpp"
#include "maskdiff/nn/optimizer.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

enum class TrainPhase : uint8_t { base_res = 0, finetune_res = 1 };

// Owns everything a training run needs. Per-step randomness is derived from
// (seed, global_step), so resuming from a checkpoint replays the exact stream.
struct TrainState {
    RunConfig cfg;
    NoiseSchedule schedule;
    std::unique_ptr<Model> model;
    std::unique_ptr<nn::AdamW> opt;
    int epoch = 0;
    int64_t global_step = 0;
    TrainPhase phase = TrainPhase::base_res;
    uint64_t seed = 0;
    int64_t total_steps = 1;  // for the cosine decay
};

inline int64_t planned_steps(const RunConfig& cfg, size_t dataset_size) {
    int64_t per_epoch =
        (static_cast<int64_t>(dataset_size) + cfg.trainer.batch_size - 1) / cfg.trainer.batch_size;
    per_epoch = std::max<int64_t>(1, per_epoch);
    return per_epoch * (cfg.trainer.epochs + cfg.trainer.finetune_epochs);
}

inline TrainState make_train_state(const RunConfig& cfg, size_t dataset_size) {
    cfg.validate();
    TrainState st;
    st.cfg = cfg;
    st.schedule = cfg.make_noise_schedule();
    st.seed = cfg.trainer.seed;
    st.model = std::make_unique<Model>(cfg.model, st.seed);
    if (!cfg.backbone_weights.empty()) {
        Checkpoint bk = load_checkpoint(cfg.backbone_weights);
        int applied = st.model->load_named_tensors(bk.param_map());
        std::cerr << "loaded " << applied << " backbone tensors from " << cfg.backbone_weights
                  << "\n";
    }
    nn::AdamWConfig oc;
    oc.lr = cfg.optimizer.lr;
    oc.beta1 = cfg.optimizer.beta1;
    oc.beta2 = cfg.optimizer.beta2;
    oc.weight_decay = cfg.optimizer.weight_decay;
    st.opt = std::make_unique<nn::AdamW>(st.model->parameters(), oc);
    st.total_steps = planned_steps(cfg, dataset_size);
    return st;
}

struct StepResult {
    LossBreakdown loss;
    double lr = 0.0;
    double grad_norm = 0.0;
    std::vector<int> ts;  // per-sample step indices drawn this step
};

// Algorithm: per sample draw t ~ U{1..T} and Gaussian noise, corrupt the GT
// contour, form x_t from the forward marginal, predict x0_hat conditioned on
// the image, and take one optimizer step on the mask loss against the clean GT.
inline StepResult train_step(TrainState& st, const std::vector<DatasetSample>& batch) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    int n = static_cast<int>(batch.size());
    int h = batch[0].mask.dim(0), w = batch[0].mask.dim(1);
    int T = st.schedule.num_steps;

    Tensor images({n, 3, h, w});
    Tensor x_t({n, 1, h, w});
    std::vector<Tensor> x0_clean(n);
    std::vector<int> ts(n);

    for (int i = 0; i < n; ++i) {
        const DatasetSample& s = batch[i];
        if (s.mask.dim(0) != h || s.mask.dim(1) != w)
            throw std::invalid_argument("train_step: inconsistent batch resolutions");
        Rng rng(mix_seed(st.seed, static_cast<uint64_t>(st.global_step), static_cast<uint64_t>(i)));

        Tensor img = normalize_image(s.image, st.cfg.data.normalize_mean, st.cfg.data.normalize_std);
        Tensor mask = s.mask;
        if (st.cfg.data.hflip && rng.uniform() < 0.5) {
            Tensor fi(img.shape()), fm(mask.shape());
            for (int c = 0; c < 3; ++c)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) fi.at(c, y, x) = img.at(c, y, w - 1 - x);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) fm.at(y, x) = mask.at(y, w - 1 - x);
            img = fi;
            mask = fm;
        }

        ts[i] = rng.uniform_int(1, T);
        Tensor corrupted = structure_corrupt(mask, st.cfg.corruption, rng);
        Tensor noise = rng.normal_tensor({h, w});
        Tensor noised = q_sample(st.schedule, corrupted, ts[i], noise);

        std::copy(img.data(), img.data() + img.numel(), images.data() + static_cast<int64_t>(i) * 3 * h * w);
        std::copy(noised.data(), noised.data() + noised.numel(),
                  x_t.data() + static_cast<int64_t>(i) * h * w);
        x0_clean[i] = mask;
    }

    nn::Var out = st.model->forward(nn::Var::leaf(images), nn::Var::leaf(x_t), ts, T);

    // loss and its gradient run in double outside the graph; the gradient
    // seeds the float backward pass
    Tensor seed_grad(out.value().shape());
    LossBreakdown mean_loss;
    for (int i = 0; i < n; ++i) {
        std::vector<double> xhat(static_cast<size_t>(h) * w);
        for (int64_t j = 0; j < static_cast<int64_t>(xhat.size()); ++j)
            xhat[static_cast<size_t>(j)] = out.value()[static_cast<int64_t>(i) * h * w + j];
        std::vector<double> grad;
        LossBreakdown lb = total_loss(xhat, to_double(x0_clean[i]), h, w, &grad);
        if (!std::isfinite(lb.total))
            throw std::runtime_error("train_step: non-finite loss at step " +
                                     std::to_string(st.global_step) + " (t=" + std::to_string(ts[i]) +
                                     ", bce=" + std::to_string(lb.w_bce) +
                                     ", iou=" + std::to_string(lb.w_iou) + ")");
        mean_loss.total += lb.total / n;
        mean_loss.w_bce += lb.w_bce / n;
        mean_loss.w_iou += lb.w_iou / n;
        for (int64_t j = 0; j < static_cast<int64_t>(grad.size()); ++j)
            seed_grad[static_cast<int64_t>(i) * h * w + j] =
                static_cast<float>(grad[static_cast<size_t>(j)] / n);
    }

    st.model->zero_grad();
    nn::backward(out, seed_grad);

    StepResult res;
    res.loss = mean_loss;
    res.ts = ts;
    res.grad_norm = st.opt->clip_grad_norm(st.cfg.optimizer.grad_clip);
    res.lr = nn::cosine_lr(st.cfg.optimizer.lr, st.global_step, st.total_steps);
    st.opt->step(res.lr);
    st.global_step += 1;
    return res;
}

inline Checkpoint snapshot(const TrainState& st) {
    Checkpoint c;
    c.config_json = run_config_to_string(st.cfg);
    c.epoch = st.epoch;
    c.global_step = st.global_step;
    c.phase = static_cast<uint8_t>(st.phase);
    c.seed = st.seed;
    for (const auto& p : st.model->parameters()) c.params.emplace_back(p.n->name, p.value());
    c.opt_step = st.opt->step_count();
    c.opt_m = st.opt->moment1();
    c.opt_v = st.opt->moment2();
    return c;
}

inline void restore(TrainState& st, const Checkpoint& c) {
    st.model->load_named_tensors(c.param_map());
    st.opt->set_step_count(c.opt_step);
    if (c.opt_m.size() != st.opt->moment1().size())
        throw std::runtime_error("checkpoint optimizer state does not match the model");
    st.opt->moment1() = c.opt_m;
    st.opt->moment2() = c.opt_v;
    st.epoch = static_cast<int>(c.epoch);
    st.global_step = c.global_step;
    st.phase = static_cast<TrainPhase>(c.phase);
    st.seed = c.seed;
}

namespace trainer_detail {

inline std::string ckpt_name(int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_%04d.bin", epoch);
    return buf;
}

inline std::string write_ckpt(const TrainState& st, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::string name = ckpt_name(st.epoch);
    std::string path = (fs::path(out_dir) / name).string();
    save_checkpoint(path, snapshot(st));
    std::ofstream latest(fs::path(out_dir) / "latest");
    latest << name << "\n";
    return path;
}

}  // namespace trainer_detail

// rebuilds a model from the checkpoint's own config snapshot
inline std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ckpt, RunConfig* cfg_out = nullptr) {
    RunConfig cfg = parse_run_config(nlohmann::json::parse(ckpt.config_json));
    auto model = std::make_unique<Model>(cfg.model, ckpt.seed);
    model->load_named_tensors(ckpt.param_map());
    if (cfg_out) *cfg_out = cfg;
    return model;
}

inline std::string resolve_latest(const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::ifstream is(fs::path(out_dir) / "latest");
    if (!is) throw std::runtime_error("no latest pointer in " + out_dir);
    std::string name;
    is >> name;
    return (fs::path(out_dir) / name).string();
}

// Two-phase loop: trainer.epochs at data.resolution, then finetune_epochs at
// finetune_resolution. Writes periodic checkpoints, a latest pointer and a
// step-level metrics log. Returns the final checkpoint path.
inline std::string train_loop(const RunConfig& cfg, std::ostream& log = std::cerr,
                              const std::string& resume_from = "") {
    namespace fs = std::filesystem;
    cfg.validate();

    std::unique_ptr<Dataset> dataset;
    if (cfg.data.type == "synthetic")
        dataset = std::make_unique<SyntheticDataset>(cfg.data.synthetic);
    else
        dataset = std::make_unique<FolderDataset>(cfg.data.root);
    if (dataset->size() == 0) throw std::runtime_error("train_loop: dataset is empty");

    TrainState st = make_train_state(cfg, dataset->size());
    if (!resume_from.empty()) restore(st, load_checkpoint(resume_from));

    fs::create_directories(cfg.trainer.out_dir);
    std::ofstream metrics(fs::path(cfg.trainer.out_dir) / "metrics.csv",
                          resume_from.empty() ? std::ios::trunc : std::ios::app);
    if (resume_from.empty()) metrics << "step,epoch,total,w_bce,w_iou,lr\n";

    std::string last_path = trainer_detail::write_ckpt(st, cfg.trainer.out_dir);
    int total_epochs = cfg.trainer.epochs + cfg.trainer.finetune_epochs;

    while (st.epoch < total_epochs) {
        bool finetune = st.epoch >= cfg.trainer.epochs;
        st.phase = finetune ? TrainPhase::finetune_res : TrainPhase::base_res;
        int res = finetune ? cfg.trainer.finetune_resolution : cfg.data.resolution;

        std::vector<size_t> order(dataset->size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(mix_seed(st.seed, 0xE70C4ULL, static_cast<uint64_t>(st.epoch)));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int>(i) - 1))]);

        double epoch_loss = 0.0;
        int batches = 0;
        for (size_t start = 0; start < order.size(); start += cfg.trainer.batch_size) {
            std::vector<DatasetSample> batch;
            for (size_t k = start; k < std::min(order.size(), start + cfg.trainer.batch_size); ++k)
                batch.push_back(dataset->get(order[k], res));
            StepResult r = train_step(st, batch);
            epoch_loss += r.loss.total;
            ++batches;
            metrics << st.global_step << "," << st.epoch << "," << r.loss.total << ","
                    << r.loss.w_bce << "," << r.loss.w_iou << "," << r.lr << "\n";
        }
        metrics.flush();
        st.epoch += 1;
        epoch_loss /= std::max(1, batches);
        if (st.epoch % 25 == 0 || st.epoch == total_epochs)
            log << "epoch " << st.epoch << "/" << total_epochs << " loss " << epoch_loss
                << (finetune ? " (finetune)" : "") << "\n";

        bool stop = cfg.trainer.early_stop_loss > 0.0 && epoch_loss < cfg.trainer.early_stop_loss;
        if (st.epoch % std::max(1, cfg.trainer.checkpoint_every) == 0 || st.epoch == total_epochs ||
            stop)
            last_path = trainer_detail::write_ckpt(st, cfg.trainer.out_dir);
        if (stop) {
            log << "early stop at epoch " << st.epoch << " (loss " << epoch_loss << ")\n";
            break;
        }
    }
    return last_path;
}

}  // namespace maskdiff
