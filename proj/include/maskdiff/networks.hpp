#pragma once

#include <array>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskdiff/nn/ops.hpp"
#include "maskdiff/nn/params.hpp"

namespace maskdiff {

using nn::Var;

// Pyramid transformer that conditions on the image, the noised mask and the
// step index. Stage 1 injects the noised mask through a zero-initialized
// patch convolution so the pyramid ignores it until training moves the weights.
struct ATCNConfig {
    std::array<int, 4> stage_channels{32, 64, 128, 160};
    std::array<int, 4> stage_depths{2, 2, 2, 2};
    std::array<int, 4> patch_strides{4, 2, 2, 2};
    std::array<int, 4> attention_reduction{8, 4, 2, 1};
    std::array<int, 4> num_heads{1, 2, 4, 8};
    int mlp_ratio = 4;

    void validate() const {
        for (int i = 0; i < 4; ++i) {
            if (stage_channels[i] <= 0 || stage_depths[i] <= 0 || num_heads[i] <= 0 ||
                attention_reduction[i] <= 0)
                throw std::invalid_argument("ATCNConfig: all stage parameters must be positive");
            if (stage_channels[i] % num_heads[i] != 0)
                throw std::invalid_argument("ATCNConfig: channels must be divisible by heads");
        }
        if (patch_strides != std::array<int, 4>{4, 2, 2, 2})
            throw std::invalid_argument("ATCNConfig: patch strides are fixed at {4,2,2,2}");
    }
};

struct DNConfig {
    int base_channels = 32;
    int depth = 3;
    int time_embed_dim = 128;

    void validate() const {
        if (base_channels <= 0 || depth < 2 || time_embed_dim <= 0)
            throw std::invalid_argument("DNConfig: invalid dimensions");
        if (time_embed_dim % 2 != 0)
            throw std::invalid_argument("DNConfig: time_embed_dim must be even");
    }
};

struct ModelConfig {
    ATCNConfig atcn;
    DNConfig dn;
    void validate() const {
        atcn.validate();
        dn.validate();
    }
};

struct FeaturePyramid {
    std::array<Var, 4> f;  // scales H/4, H/8, H/16, H/32
};

namespace detail {

inline int gn_groups(int channels) { return channels % 8 == 0 ? 8 : 1; }

struct TransformerBlock {
    nn::LayerNormLayer ln1, ln2;
    nn::LinearLayer wq, wk, wv, wo, fc1, fc2;
    nn::ConvLayer sr;
    nn::LayerNormLayer sr_ln;
    int heads = 1, reduction = 1;

    TransformerBlock() = default;
    TransformerBlock(nn::ParamStore& ps, const std::string& name, int c, int heads_, int reduction_,
                     int mlp_ratio, Rng& rng)
        : ln1(ps, name + ".ln1", c),
          ln2(ps, name + ".ln2", c),
          wq(ps, name + ".q", c, c, rng),
          wk(ps, name + ".k", c, c, rng),
          wv(ps, name + ".v", c, c, rng),
          wo(ps, name + ".o", c, c, rng),
          fc1(ps, name + ".fc1", c, c * mlp_ratio, rng),
          fc2(ps, name + ".fc2", c * mlp_ratio, c, rng),
          heads(heads_),
          reduction(reduction_) {
        if (reduction > 1) {
            sr = nn::ConvLayer(ps, name + ".sr", c, c, reduction, reduction, 0, rng);
            sr_ln = nn::LayerNormLayer(ps, name + ".sr_ln", c);
        }
    }

    // x: {N, 1+h*w, C}; token 0 carries the step embedding
    Var operator()(const Var& x, int h, int w) const {
        Var t0 = ln1(x);
        Var q = wq(t0);
        Var kv_src = t0;
        if (reduction > 1 && h >= reduction && w >= reduction) {
            Var patches = nn::slice_dim1(t0, 1, h * w);
            Var reduced = sr(nn::tokens_to_map(patches, h, w));
            Var rt = sr_ln(nn::map_to_tokens(reduced));
            kv_src = nn::concat_dim1({nn::slice_dim1(t0, 0, 1), rt});
        }
        Var att = nn::attention(q, wk(kv_src), wv(kv_src), heads);
        Var x1 = nn::add(x, wo(att));
        Var u = ln2(x1);
        u = fc2(nn::gelu(fc1(u)));
        return nn::add(x1, u);
    }
};

struct PvtStage {
    nn::ConvLayer patch_img;   // stage 1 only
    nn::ConvLayer patch_mask;  // stage 1 only, zero-initialized
    nn::ConvLayer patch;       // stages 2..4
    nn::LayerNormLayer embed_ln, final_ln;
    nn::LinearLayer time_proj;
    std::vector<TransformerBlock> blocks;
    int index = 0, stride = 1;

    PvtStage() = default;
    PvtStage(nn::ParamStore& ps, const std::string& name, int idx, int cin, int cout, int depth,
             int heads, int reduction, int stride_, int mlp_ratio, int time_dim, Rng& rng)
        : embed_ln(ps, name + ".embed_ln", cout),
          final_ln(ps, name + ".final_ln", cout),
          time_proj(ps, name + ".time_proj", time_dim, cout, rng),
          index(idx),
          stride(stride_) {
        if (idx == 0) {
            int k = 7, pad = 3;
            patch_img = nn::ConvLayer(ps, name + ".patch_img", 3, cout, k, stride_, pad, rng);
            patch_mask = nn::ConvLayer(ps, name + ".patch_mask", 1, cout, k, stride_, pad, rng,
                                       /*zero_init=*/true);
        } else {
            patch = nn::ConvLayer(ps, name + ".patch", cin, cout, 3, stride_, 1, rng);
        }
        for (int b = 0; b < depth; ++b)
            blocks.emplace_back(ps, name + ".blk" + std::to_string(b), cout, heads, reduction,
                                mlp_ratio, rng);
    }

    Var embed(const Var& image, const Var& x_t) const {
        Var m = nn::add(patch_img(image), patch_mask(x_t));
        return embed_ln(nn::map_to_tokens(m));
    }

    Var forward(const Var& input_map, const Var& x_t, const Var& temb, int& h, int& w) const {
        Var tokens;
        if (index == 0) {
            tokens = embed(input_map, x_t);
        } else {
            tokens = embed_ln(nn::map_to_tokens(patch(input_map)));
        }
        h = (h + 2 * (index == 0 ? 3 : 1) - (index == 0 ? 7 : 3)) / stride + 1;
        w = (w + 2 * (index == 0 ? 3 : 1) - (index == 0 ? 7 : 3)) / stride + 1;
        int c = tokens.value().dim(2);
        Var tt = nn::reshape(time_proj(temb), {temb.value().dim(0), 1, c});
        Var seq = nn::concat_dim1({tt, tokens});
        for (const auto& blk : blocks) seq = blk(seq, h, w);
        seq = final_ln(seq);
        return nn::tokens_to_map(nn::slice_dim1(seq, 1, h * w), h, w);
    }
};

// conv+ReLU twice, then bilinear resize to the H/4 grid
struct LocalEmphasis {
    nn::ConvLayer c1, c2;
    LocalEmphasis() = default;
    LocalEmphasis(nn::ParamStore& ps, const std::string& name, int cin, int cout, Rng& rng)
        : c1(ps, name + ".c1", cin, cout, 3, 1, 1, rng), c2(ps, name + ".c2", cout, cout, 3, 1, 1, rng) {}
    Var operator()(const Var& x, int oh, int ow) const {
        Var y = nn::relu(c2(nn::relu(c1(x))));
        if (y.value().dim(2) == oh && y.value().dim(3) == ow) return y;
        return nn::upsample_bilinear(y, oh, ow);
    }
};

struct ResBlock {
    nn::ConvLayer conv1, conv2, shortcut;
    nn::LinearLayer film1, film2;
    bool has_shortcut = false;
    int groups = 8;

    ResBlock() = default;
    ResBlock(nn::ParamStore& ps, const std::string& name, int cin, int cout, int time_dim, Rng& rng)
        : conv1(ps, name + ".conv1", cin, cout, 3, 1, 1, rng),
          conv2(ps, name + ".conv2", cout, cout, 3, 1, 1, rng),
          film1(ps, name + ".film1", time_dim, 2 * cout, rng),
          film2(ps, name + ".film2", time_dim, 2 * cout, rng),
          groups(gn_groups(cout)) {
        if (cin != cout) {
            shortcut = nn::ConvLayer(ps, name + ".shortcut", cin, cout, 1, 1, 0, rng);
            has_shortcut = true;
        }
    }

    Var operator()(const Var& x, const Var& temb) const {
        Var h = nn::silu(nn::film(nn::group_norm(conv1(x), groups), film1(temb)));
        h = nn::silu(nn::film(nn::group_norm(conv2(h), groups), film2(temb)));
        return nn::add(h, has_shortcut ? shortcut(x) : x);
    }
};

}  // namespace detail

class Model {
public:
    Model(const ModelConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(mix_seed(init_seed, 0x6d6f64656cULL));
        const auto& a = cfg_.atcn;
        int td = cfg_.dn.time_embed_dim;

        time_fc1_ = nn::LinearLayer(ps_, "time.fc1", td, td, rng);
        time_fc2_ = nn::LinearLayer(ps_, "time.fc2", td, td, rng);

        for (int i = 0; i < 4; ++i) {
            int cin = i == 0 ? 3 : a.stage_channels[i - 1];
            stages_[i] = detail::PvtStage(ps_, "atcn.stage" + std::to_string(i + 1), i, cin,
                                          a.stage_channels[i], a.stage_depths[i], a.num_heads[i],
                                          a.attention_reduction[i], a.patch_strides[i], a.mlp_ratio,
                                          td, rng);
        }

        fusion_c_ = a.stage_channels[0];
        for (int i = 0; i < 4; ++i)
            le_[i] = detail::LocalEmphasis(ps_, "le" + std::to_string(i + 1), a.stage_channels[i],
                                           fusion_c_, rng);
        for (int i = 0; i < 3; ++i)
            fuse_[i] = nn::ConvLayer(ps_, "fuse" + std::to_string(i + 1), 2 * fusion_c_, fusion_c_, 3,
                                     1, 1, rng);

        // denoiser
        int d = cfg_.dn.depth;
        lvl_ch_.resize(d);
        for (int l = 0; l < d; ++l) lvl_ch_[l] = cfg_.dn.base_channels << l;
        stem_ = nn::ConvLayer(ps_, "dn.stem", 1, lvl_ch_[0], 3, 1, 1, rng);
        for (int l = 0; l + 1 < d; ++l) {
            enc_.emplace_back(ps_, "dn.enc" + std::to_string(l), lvl_ch_[l], lvl_ch_[l], td, rng);
            down_.emplace_back(ps_, "dn.down" + std::to_string(l), lvl_ch_[l], lvl_ch_[l + 1], 3, 2, 1,
                               rng);
        }
        int cb = lvl_ch_[d - 1];
        cond_merge_ = nn::ConvLayer(ps_, "dn.cond_merge", cb + fusion_c_, cb, 1, 1, 0, rng);
        mid_ = detail::ResBlock(ps_, "dn.mid", cb, cb, td, rng);
        for (int l = d - 2; l >= 0; --l) {
            up_.emplace_back(ps_, "dn.up" + std::to_string(l), lvl_ch_[l + 1], lvl_ch_[l], 3, 1, 1,
                             rng);
            dec_.emplace_back(ps_, "dn.dec" + std::to_string(l), 2 * lvl_ch_[l], lvl_ch_[l], td, rng);
        }
        head_ = nn::ConvLayer(ps_, "dn.head", lvl_ch_[0], 1, 3, 1, 1, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    std::vector<Var>& parameters() { return ps_.all(); }
    const std::vector<Var>& parameters() const { return ps_.all(); }
    int64_t num_params() const { return ps_.count(); }
    void zero_grad() { ps_.zero_grad(); }

    // sinusoidal features of t/T; constant leaf (no gradient into t)
    Tensor time_features(const std::vector<int>& ts, int num_steps) const {
        int d = cfg_.dn.time_embed_dim, half = d / 2;
        Tensor f({static_cast<int>(ts.size()), d});
        for (size_t i = 0; i < ts.size(); ++i) {
            double pos = static_cast<double>(ts[i]) / static_cast<double>(num_steps);
            for (int j = 0; j < half; ++j) {
                double freq = std::exp(static_cast<double>(j) / std::max(1, half - 1) * std::log(10000.0));
                f.at(static_cast<int>(i), j) = static_cast<float>(std::sin(pos * freq));
                f.at(static_cast<int>(i), half + j) = static_cast<float>(std::cos(pos * freq));
            }
        }
        return f;
    }

    Var time_embed(const std::vector<int>& ts, int num_steps) const {
        Var base = Var::leaf(time_features(ts, num_steps));
        return time_fc2_(nn::silu(time_fc1_(base)));
    }

    // the step token a stage prepends to its patch sequence
    Var time_token(const std::vector<int>& ts, int num_steps, int stage) const {
        if (stage < 0 || stage >= 4) throw std::invalid_argument("time_token: bad stage");
        Var temb = time_embed(ts, num_steps);
        int n = temb.value().dim(0);
        return nn::reshape(stages_[stage].time_proj(temb), {n, 1, cfg_.atcn.stage_channels[stage]});
    }

    // stage-1 token sequence; independent of x_t at initialization
    Var zoe_embed(const Var& image, const Var& x_t) const {
        check_spatial(image, x_t);
        return stages_[0].embed(image, x_t);
    }

    FeaturePyramid atcn_forward(const Var& image, const Var& x_t, const std::vector<int>& ts,
                                int num_steps) const {
        check_spatial(image, x_t);
        Var temb = time_embed(ts, num_steps);
        return atcn_forward(image, x_t, temb);
    }

    Var le(const Var& fi, int stage, int oh, int ow) const { return le_[stage](fi, oh, ow); }

    // returns {Z1,Z2,Z3,Z4}; fusion runs coarse to fine (Z4 -> Z1)
    std::array<Var, 4> fuse_pyramid_all(const std::array<Var, 4>& fup) const {
        std::array<Var, 4> z;
        z[3] = fup[3];
        for (int i = 2; i >= 0; --i) z[i] = fuse_[i](nn::concat_dim1({z[i + 1], fup[i]}));
        return z;
    }

    Var fuse_pyramid(const std::array<Var, 4>& fup) const { return fuse_pyramid_all(fup)[0]; }

    Var dn_forward(const Var& x_t, const Var& z1, const std::vector<int>& ts, int num_steps) const {
        return dn_forward(x_t, z1, time_embed(ts, num_steps));
    }

    Var forward(const Var& image, const Var& x_t, const std::vector<int>& ts, int num_steps) const {
        check_spatial(image, x_t);
        if (static_cast<int>(ts.size()) != x_t.value().dim(0))
            throw std::invalid_argument("forward: one step index per batch element");
        Var temb = time_embed(ts, num_steps);
        FeaturePyramid pyr = atcn_forward(image, x_t, temb);
        int oh = pyr.f[0].value().dim(2), ow = pyr.f[0].value().dim(3);
        std::array<Var, 4> fup;
        for (int i = 0; i < 4; ++i) fup[i] = le_[i](pyr.f[i], oh, ow);
        Var z1 = fuse_pyramid(fup);
        return dn_forward(x_t, z1, temb);
    }

    // non-strict named-tensor import; returns the number of tensors applied
    int load_named_tensors(const std::map<std::string, Tensor>& tensors) {
        int applied = 0;
        for (auto& p : ps_.all()) {
            auto it = tensors.find(p.n->name);
            if (it == tensors.end()) continue;
            if (!p.value().same_shape(it->second))
                throw std::runtime_error("parameter shape mismatch for " + p.n->name);
            p.n->value = it->second;
            ++applied;
        }
        return applied;
    }

private:
    FeaturePyramid atcn_forward(const Var& image, const Var& x_t, const Var& temb) const {
        FeaturePyramid pyr;
        int h = image.value().dim(2), w = image.value().dim(3);
        Var cur = image;
        for (int i = 0; i < 4; ++i) {
            cur = stages_[i].forward(cur, x_t, temb, h, w);
            pyr.f[i] = cur;
        }
        return pyr;
    }

    Var dn_forward(const Var& x_t, const Var& z1, const Var& temb) const {
        Var h = stem_(x_t);
        std::vector<Var> skips;
        for (size_t l = 0; l < enc_.size(); ++l) {
            h = enc_[l](h, temb);
            skips.push_back(h);
            h = down_[l](h);
        }
        Var cond = z1;
        if (cond.value().dim(2) != h.value().dim(2) || cond.value().dim(3) != h.value().dim(3))
            cond = nn::upsample_bilinear(cond, h.value().dim(2), h.value().dim(3));
        h = cond_merge_(nn::concat_dim1({h, cond}));
        h = mid_(h, temb);
        for (size_t l = 0; l < up_.size(); ++l) {
            const Var& skip = skips[skips.size() - 1 - l];
            h = up_[l](nn::upsample_bilinear(h, skip.value().dim(2), skip.value().dim(3)));
            h = dec_[l](nn::concat_dim1({h, skip}), temb);
        }
        return nn::clamp(head_(h), -1.0f, 1.0f);
    }

    static void check_spatial(const Var& image, const Var& x_t) {
        const Tensor& iv = image.value();
        const Tensor& xv = x_t.value();
        if (iv.ndim() != 4 || xv.ndim() != 4 || iv.dim(1) != 3 || xv.dim(1) != 1)
            throw std::invalid_argument("networks: image must be {N,3,H,W}, mask {N,1,H,W}");
        if (iv.dim(0) != xv.dim(0) || iv.dim(2) != xv.dim(2) || iv.dim(3) != xv.dim(3))
            throw std::invalid_argument("networks: image and mask sizes differ");
        if (iv.dim(2) % 4 != 0 || iv.dim(3) % 4 != 0)
            throw std::invalid_argument("networks: spatial size must be divisible by 4");
    }

    ModelConfig cfg_;
    nn::ParamStore ps_;
    nn::LinearLayer time_fc1_, time_fc2_;
    std::array<detail::PvtStage, 4> stages_;
    std::array<detail::LocalEmphasis, 4> le_;
    std::array<nn::ConvLayer, 3> fuse_;
    std::vector<int> lvl_ch_;
    int fusion_c_ = 32;
    nn::ConvLayer stem_, cond_merge_, head_;
    std::vector<detail::ResBlock> enc_;
    std::vector<nn::ConvLayer> down_;
    detail::ResBlock mid_;
    std::vector<nn::ConvLayer> up_;
    std::vector<detail::ResBlock> dec_;
};

}  // namespace maskdiff
