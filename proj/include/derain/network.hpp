#pragma once

#include <functional>
#include <string>
#include <vector>

#include "derain/biscsm.hpp"
#include "derain/common.hpp"
#include "derain/params.hpp"
#include "derain/tensor.hpp"

namespace derain {

// Model-level switches: sub-network presence, cascaded single-stream mode,
// and which scale constraint heads exist.
struct ModelConfig {
    int channels = 20;
    int train_res = 128;  // spatial size the positional grids are sized for
    bool use_m = true;
    bool use_t = true;
    bool cascaded = false;
    bool mscc_half = true;
    bool mscc_quarter = true;
    BiscsmConfig biscsm;

    void validate() const {
        if (channels < 1) fail("bad-config", "channels must be >= 1");
        if (train_res % 8 != 0 || train_res < 24)
            fail("bad-config", "train_res must be a multiple of 8 and at least 24");
        if (cascaded && (!use_m || !use_t))
            fail("bad-config", "cascaded mode uses all six modules; enable m and t");
        biscsm.validate();
    }
};

template <typename T>
struct ConvLayer {
    ParamPtr<T> w, b;
};

// Two-level encoder-decoder: 3x3 conv pairs with leaky-relu, 2x down per
// level, mining at the coarsest scale, mirror decoder with skip fusion.
template <typename T>
struct EncDec {
    ConvLayer<T> enc1a, enc1b, enc2a, enc2b;
    BiscsmModule<T> biscsm;
    ConvLayer<T> dec2fuse, dec2a, dec2b;
    ConvLayer<T> dec1fuse, dec1a, dec1b;
};

template <typename T>
struct SubNetwork {
    ConvLayer<T> stem;              // 3x3, 3 -> C
    std::vector<EncDec<T>> modules;
    ConvLayer<T> head;              // 3x3, C -> 3, no activation
};

template <typename T>
struct ScaleHead {
    ConvLayer<T> conv;  // 3x3, C -> 3 after the downsamples
    int downs = 1;
};

// Called with (site, after_mining, features) at every BiSCSM bottleneck.
template <typename T>
using InspectSink = std::function<void(const std::string&, bool, const Tensor<T>&)>;

template <typename T>
struct CollaborativeModel {
    ModelConfig cfg;
    ParamStore<T> store;
    SubNetwork<T> b, m, t;
    ConvLayer<T> bridge_bm, bridge_tm, bridge_mb;  // 1x1, 2C -> C
    ScaleHead<T> shead_n11, shead_n21, shead_n12;
};

template <typename T>
struct ModelOutput {
    std::vector<Tensor<T>> b_hats;        // index 0 from B, then M, then T
    std::vector<Tensor<T>> half_preds;    // from N_11 and (if present) N_21
    std::vector<Tensor<T>> quarter_preds; // from N_12
};

inline constexpr double kLeakySlope = 0.2;

namespace detail {

template <typename T>
ConvLayer<T> make_conv(ParamStore<T>& store, const std::string& name, int cout, int cin,
                       int k, Rng& rng) {
    ConvLayer<T> layer;
    layer.w = store.create(name + ".w", {cout, cin, k, k});
    layer.b = store.create(name + ".b", {1, cout, 1, 1});
    kaiming_init(*layer.w, rng);
    return layer;
}

template <typename T>
Tensor<T> conv_act(const Tensor<T>& x, const ConvLayer<T>& layer, ForwardContext<T>& ctx,
                   int padding) {
    Tensor<T> b = ctx.use(layer.b);
    return leaky_relu(conv2d(x, ctx.use(layer.w), &b, 1, padding), kLeakySlope);
}

template <typename T>
Tensor<T> conv_plain(const Tensor<T>& x, const ConvLayer<T>& layer, ForwardContext<T>& ctx,
                     int padding) {
    Tensor<T> b = ctx.use(layer.b);
    return conv2d(x, ctx.use(layer.w), &b, 1, padding);
}

template <typename T>
EncDec<T> make_encdec(ParamStore<T>& store, const std::string& prefix, const ModelConfig& cfg,
                      Rng& rng) {
    const int c = cfg.channels;
    EncDec<T> e;
    e.enc1a = make_conv(store, prefix + ".enc1a", c, c, 3, rng);
    e.enc1b = make_conv(store, prefix + ".enc1b", c, c, 3, rng);
    e.enc2a = make_conv(store, prefix + ".enc2a", c, c, 3, rng);
    e.enc2b = make_conv(store, prefix + ".enc2b", c, c, 3, rng);
    e.biscsm = make_biscsm(store, prefix + ".biscsm", c, cfg.train_res / 4,
                           cfg.train_res / 4, cfg.biscsm, rng);
    e.dec2fuse = make_conv(store, prefix + ".dec2fuse", c, 2 * c, 1, rng);
    e.dec2a = make_conv(store, prefix + ".dec2a", c, c, 3, rng);
    e.dec2b = make_conv(store, prefix + ".dec2b", c, c, 3, rng);
    e.dec1fuse = make_conv(store, prefix + ".dec1fuse", c, 2 * c, 1, rng);
    e.dec1a = make_conv(store, prefix + ".dec1a", c, c, 3, rng);
    e.dec1b = make_conv(store, prefix + ".dec1b", c, c, 3, rng);
    return e;
}

template <typename T>
Tensor<T> encdec_forward(const Tensor<T>& x, const EncDec<T>& e, const std::string& site,
                         ForwardContext<T>& ctx, const InspectSink<T>* sink) {
    Tensor<T> e1 = conv_act(conv_act(x, e.enc1a, ctx, 1), e.enc1b, ctx, 1);
    Tensor<T> e2 = conv_act(conv_act(down2x_avg(e1), e.enc2a, ctx, 1), e.enc2b, ctx, 1);
    Tensor<T> bottom = down2x_avg(e2);
    if (sink) (*sink)(site, false, bottom);
    Tensor<T> mined = biscsm_forward(bottom, e.biscsm, ctx);
    if (sink) (*sink)(site, true, mined);
    Tensor<T> d2 = conv_act(
        conv_act(conv_plain(concat_channels(up2x_bilinear(mined), e2), e.dec2fuse, ctx, 0),
                 e.dec2a, ctx, 1),
        e.dec2b, ctx, 1);
    return conv_act(
        conv_act(conv_plain(concat_channels(up2x_bilinear(d2), e1), e.dec1fuse, ctx, 0),
                 e.dec1a, ctx, 1),
        e.dec1b, ctx, 1);
}

// Bridge fusion: concatenate destination-stream features with transferred
// features and project back to C channels.
template <typename T>
Tensor<T> fuse_bridge(const Tensor<T>& own, const Tensor<T>& transferred,
                      const ConvLayer<T>& bridge, ForwardContext<T>& ctx) {
    return conv_plain(concat_channels(own, transferred), bridge, ctx, 0);
}

template <typename T>
Tensor<T> scale_head_forward(const Tensor<T>& feats, const ScaleHead<T>& head,
                             ForwardContext<T>& ctx) {
    Tensor<T> cur = feats;
    for (int i = 0; i < head.downs; ++i) cur = down2x_avg(cur);
    return conv_plain(cur, head.conv, ctx, 1);
}

}  // namespace detail

template <typename T>
CollaborativeModel<T> model_init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    CollaborativeModel<T> model;
    model.cfg = cfg;
    Rng rng(seed);
    const int c = cfg.channels;
    auto& store = model.store;

    model.b.stem = detail::make_conv(store, "b.stem", c, 3, 3, rng);
    model.b.modules.push_back(detail::make_encdec(store, "b.n11", cfg, rng));
    model.b.modules.push_back(detail::make_encdec(store, "b.n12", cfg, rng));
    model.b.modules.push_back(detail::make_encdec(store, "b.n13", cfg, rng));
    model.b.head = detail::make_conv(store, "b.head", 3, c, 3, rng);

    if (cfg.use_m) {
        if (!cfg.cascaded) model.m.stem = detail::make_conv(store, "m.stem", c, 3, 3, rng);
        model.m.modules.push_back(detail::make_encdec(store, "m.n21", cfg, rng));
        model.m.modules.push_back(detail::make_encdec(store, "m.n22", cfg, rng));
        if (!cfg.cascaded) model.m.head = detail::make_conv(store, "m.head", 3, c, 3, rng);
    }
    if (cfg.use_t) {
        if (!cfg.cascaded) model.t.stem = detail::make_conv(store, "t.stem", c, 3, 3, rng);
        model.t.modules.push_back(detail::make_encdec(store, "t.n31", cfg, rng));
        if (!cfg.cascaded) model.t.head = detail::make_conv(store, "t.head", 3, c, 3, rng);
    }
    if (!cfg.cascaded) {
        if (cfg.use_m) model.bridge_bm = detail::make_conv(store, "bridge.bm", c, 2 * c, 1, rng);
        if (cfg.use_m && cfg.use_t)
            model.bridge_tm = detail::make_conv(store, "bridge.tm", c, 2 * c, 1, rng);
        if (cfg.use_m) model.bridge_mb = detail::make_conv(store, "bridge.mb", c, 2 * c, 1, rng);
    }
    if (cfg.mscc_half) {
        model.shead_n11 = {detail::make_conv(store, "shead.n11", 3, c, 3, rng), 1};
        if (cfg.use_m)
            model.shead_n21 = {detail::make_conv(store, "shead.n21", 3, c, 3, rng), 1};
    }
    if (cfg.mscc_quarter)
        model.shead_n12 = {detail::make_conv(store, "shead.n12", 3, c, 3, rng), 2};
    return model;
}

template <typename T>
ModelOutput<T> model_forward(const CollaborativeModel<T>& model, const Tensor<T>& o,
                             ForwardContext<T>& ctx, const InspectSink<T>* sink = nullptr) {
    const Shape4 s = o.shape();
    if (s.c != 3) fail("shape-mismatch", "model input must have 3 channels, got " + s.str());
    if (s.h % 8 != 0 || s.w % 8 != 0)
        fail("bad-dimension", "model input dims must be divisible by 8, got " + s.str());
    if (s.h < 24 || s.w < 24)
        fail("bad-dimension",
             "model input must be at least 24x24 so the bottleneck has patches to mine");

    const ModelConfig& cfg = model.cfg;
    using detail::conv_act;
    using detail::conv_plain;
    using detail::encdec_forward;
    ModelOutput<T> out;

    if (cfg.cascaded) {
        Tensor<T> cur = conv_act(o, model.b.stem, ctx, 1);
        cur = encdec_forward(cur, model.b.modules[0], "b.n11", ctx, sink);
        if (cfg.mscc_half)
            out.half_preds.push_back(detail::scale_head_forward(cur, model.shead_n11, ctx));
        cur = encdec_forward(cur, model.b.modules[1], "b.n12", ctx, sink);
        if (cfg.mscc_quarter)
            out.quarter_preds.push_back(detail::scale_head_forward(cur, model.shead_n12, ctx));
        cur = encdec_forward(cur, model.b.modules[2], "b.n13", ctx, sink);
        cur = encdec_forward(cur, model.m.modules[0], "m.n21", ctx, sink);
        if (cfg.mscc_half)
            out.half_preds.push_back(detail::scale_head_forward(cur, model.shead_n21, ctx));
        cur = encdec_forward(cur, model.m.modules[1], "m.n22", ctx, sink);
        cur = encdec_forward(cur, model.t.modules[0], "t.n31", ctx, sink);
        out.b_hats.push_back(sub(o, conv_plain(cur, model.b.head, ctx, 1)));
        return out;
    }

    // evaluation order N_11, N_31, N_21, N_22, N_12, N_13 keeps the
    // cross-network transfers acyclic
    Tensor<T> f11 = encdec_forward(conv_act(o, model.b.stem, ctx, 1), model.b.modules[0],
                                   "b.n11", ctx, sink);
    if (cfg.mscc_half)
        out.half_preds.push_back(detail::scale_head_forward(f11, model.shead_n11, ctx));

    Tensor<T> f31, f21, f22;
    if (cfg.use_t) {
        f31 = encdec_forward(conv_act(o, model.t.stem, ctx, 1), model.t.modules[0], "t.n31",
                             ctx, sink);
    }
    if (cfg.use_m) {
        Tensor<T> m_in = detail::fuse_bridge(conv_act(o, model.m.stem, ctx, 1), f11,
                                             model.bridge_bm, ctx);
        f21 = encdec_forward(m_in, model.m.modules[0], "m.n21", ctx, sink);
        if (cfg.mscc_half)
            out.half_preds.push_back(detail::scale_head_forward(f21, model.shead_n21, ctx));
        Tensor<T> m2_in =
            cfg.use_t ? detail::fuse_bridge(f21, f31, model.bridge_tm, ctx) : f21;
        f22 = encdec_forward(m2_in, model.m.modules[1], "m.n22", ctx, sink);
    }

    Tensor<T> f12 = encdec_forward(f11, model.b.modules[1], "b.n12", ctx, sink);
    if (cfg.mscc_quarter)
        out.quarter_preds.push_back(detail::scale_head_forward(f12, model.shead_n12, ctx));
    Tensor<T> b3_in = cfg.use_m ? detail::fuse_bridge(f12, f22, model.bridge_mb, ctx) : f12;
    Tensor<T> f13 = encdec_forward(b3_in, model.b.modules[2], "b.n13", ctx, sink);

    out.b_hats.push_back(sub(o, conv_plain(f13, model.b.head, ctx, 1)));
    if (cfg.use_m) out.b_hats.push_back(sub(o, conv_plain(f22, model.m.head, ctx, 1)));
    if (cfg.use_t) out.b_hats.push_back(sub(o, conv_plain(f31, model.t.head, ctx, 1)));
    return out;
}

// The per-output loss weights that apply to this configuration, in the
// same order model_forward emits b_hats.
inline std::vector<double> active_alphas(const ModelConfig& cfg, double a1, double a2,
                                         double a3) {
    std::vector<double> alphas = {a1};
    if (!cfg.cascaded && cfg.use_m) alphas.push_back(a2);
    if (!cfg.cascaded && cfg.use_t) alphas.push_back(a3);
    return alphas;
}

inline std::vector<std::string> biscsm_sites(const ModelConfig& cfg) {
    std::vector<std::string> sites = {"b.n11", "b.n12", "b.n13"};
    if (cfg.use_m) {
        sites.push_back("m.n21");
        sites.push_back("m.n22");
    }
    if (cfg.use_t) sites.push_back("t.n31");
    return sites;
}

}  // namespace derain
