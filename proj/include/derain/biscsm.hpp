#pragma once

#include <string>
#include <utility>

#include "derain/common.hpp"
#include "derain/params.hpp"
#include "derain/tensor.hpp"

namespace derain {

struct BiscsmConfig {
    int patch = 3;
    bool up_to_down = true;
    bool down_to_up = true;
    bool position = true;

    void validate() const {
        if (patch < 1) fail("bad-config", "patch size must be >= 1");
        if (!up_to_down && !down_to_up)
            fail("bad-config", "at least one mining direction must be enabled");
    }
};

// One set of 1x1 projection kernels for a mining direction.
template <typename T>
struct MiningWeights {
    ParamPtr<T> wf, wg, wtheta;
};

namespace detail {

// Reflect-pads spatial dims up to a multiple of m, remembering how to undo
// it. Padding is split as evenly as possible.
template <typename T>
struct Padded {
    Tensor<T> t;
    int top, left, h, w;

    Tensor<T> restore(const Tensor<T>& y) const {
        if (y.shape().h == h && y.shape().w == w) return y;
        return crop(y, top, left, h, w);
    }
};

template <typename T>
Padded<T> pad_to_multiple(const Tensor<T>& x, int m) {
    const Shape4 s = x.shape();
    const int ph = (m - s.h % m) % m;
    const int pw = (m - s.w % m) % m;
    Padded<T> p{x, ph / 2, pw / 2, s.h, s.w};
    if (ph || pw) p.t = pad_reflect(x, ph / 2, ph - ph / 2, pw / 2, pw - pw / 2);
    return p;
}

template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w) {
    return conv2d<T>(x, w, nullptr);
}

}  // namespace detail

// Fine-scale patches query coarse-scale patches; the attended coarse
// content is folded back at fine resolution and added residually.
template <typename T>
Tensor<T> up_to_down_mine(const Tensor<T>& x_fine, const Tensor<T>& wf, const Tensor<T>& wg,
                          const Tensor<T>& wtheta, int p) {
    const Shape4 s = x_fine.shape();
    if (s.h < 2 * p || s.w < 2 * p)
        fail("bad-dimension", "mining needs spatial extent of at least " +
                                  std::to_string(2 * p) + ", got " + s.str());
    auto padded = detail::pad_to_multiple(x_fine, 2 * p);
    Tensor<T> x = padded.t;
    Tensor<T> z = down2x_avg(x);
    Tensor<T> q = unfold_patches(detail::project(x, wf), p, p);
    Tensor<T> k = unfold_patches(detail::project(z, wg), p, p);
    Tensor<T> v = unfold_patches(detail::project(z, wtheta), p, p);
    Tensor<T> mined = fold_patches(matmul_softmax_attend(q, k, v), x.shape(), p, p);
    return padded.restore(add(x, mined));
}

// Mirror direction: coarse patches query fine patches; the attended output
// lives at coarse resolution, is upsampled, and added residually.
template <typename T>
Tensor<T> down_to_up_mine(const Tensor<T>& x_fine, const Tensor<T>& wf, const Tensor<T>& wg,
                          const Tensor<T>& wtheta, int p) {
    const Shape4 s = x_fine.shape();
    if (s.h < 2 * p || s.w < 2 * p)
        fail("bad-dimension", "mining needs spatial extent of at least " +
                                  std::to_string(2 * p) + ", got " + s.str());
    auto padded = detail::pad_to_multiple(x_fine, 2 * p);
    Tensor<T> x = padded.t;
    Tensor<T> z = down2x_avg(x);
    Tensor<T> q = unfold_patches(detail::project(z, wf), p, p);
    Tensor<T> k = unfold_patches(detail::project(x, wg), p, p);
    Tensor<T> v = unfold_patches(detail::project(x, wtheta), p, p);
    Tensor<T> mined = fold_patches(matmul_softmax_attend(q, k, v), z.shape(), p, p);
    return padded.restore(add(x, up2x_bilinear(mined)));
}

// Learnable pieces of one BiSCSM site. Direction weights exist only for
// enabled directions, the fusion conv only when both are enabled, and the
// positional grid only when position is on.
template <typename T>
struct BiscsmModule {
    BiscsmConfig cfg;
    MiningWeights<T> u2d, d2u;
    ParamPtr<T> pos;
    ParamPtr<T> fuse_w, fuse_b;
};

template <typename T>
BiscsmModule<T> make_biscsm(ParamStore<T>& store, const std::string& prefix, int channels,
                            int pos_h, int pos_w, const BiscsmConfig& cfg, Rng& rng) {
    cfg.validate();
    BiscsmModule<T> m;
    m.cfg = cfg;
    const Shape4 proj{channels, channels, 1, 1};
    auto make_dir = [&](const char* dir) {
        MiningWeights<T> w;
        w.wf = store.create(prefix + "." + dir + ".wf", proj);
        w.wg = store.create(prefix + "." + dir + ".wg", proj);
        w.wtheta = store.create(prefix + "." + dir + ".wtheta", proj);
        kaiming_init(*w.wf, rng);
        kaiming_init(*w.wg, rng);
        kaiming_init(*w.wtheta, rng);
        return w;
    };
    if (cfg.up_to_down) m.u2d = make_dir("u2d");
    if (cfg.down_to_up) m.d2u = make_dir("d2u");
    if (cfg.position)
        m.pos = store.create(prefix + ".pos", {1, channels, pos_h, pos_w});  // zero init
    if (cfg.up_to_down && cfg.down_to_up) {
        m.fuse_w = store.create(prefix + ".fuse.w", {channels, 2 * channels, 1, 1});
        m.fuse_b = store.create(prefix + ".fuse.b", {1, channels, 1, 1});
        // identity at init: each output channel averages its two copies
        auto& w = *m.fuse_w->value;
        for (int c = 0; c < channels; ++c) {
            w[static_cast<size_t>(c) * 2 * channels + c] = T(0.5);
            w[static_cast<size_t>(c) * 2 * channels + channels + c] = T(0.5);
        }
    }
    return m;
}

template <typename T>
Tensor<T> biscsm_forward(const Tensor<T>& x, const BiscsmModule<T>& m, ForwardContext<T>& ctx) {
    m.cfg.validate();
    Tensor<T> cur = x;
    if (m.cfg.position) {
        Tensor<T> pos = ctx.use(m.pos);
        if (pos.shape().h != x.shape().h || pos.shape().w != x.shape().w)
            pos = resize_bilinear(pos, x.shape().h, x.shape().w);
        if (x.shape().n > 1) pos = broadcast_batch(pos, x.shape().n);
        cur = add(cur, pos);
    }
    const int p = m.cfg.patch;
    if (m.cfg.up_to_down && m.cfg.down_to_up) {
        Tensor<T> u = up_to_down_mine(cur, ctx.use(m.u2d.wf), ctx.use(m.u2d.wg),
                                      ctx.use(m.u2d.wtheta), p);
        Tensor<T> d = down_to_up_mine(u, ctx.use(m.d2u.wf), ctx.use(m.d2u.wg),
                                      ctx.use(m.d2u.wtheta), p);
        Tensor<T> bias = ctx.use(m.fuse_b);
        return conv2d(concat_channels(u, d), ctx.use(m.fuse_w), &bias);
    }
    if (m.cfg.up_to_down)
        return up_to_down_mine(cur, ctx.use(m.u2d.wf), ctx.use(m.u2d.wg),
                               ctx.use(m.u2d.wtheta), p);
    return down_to_up_mine(cur, ctx.use(m.d2u.wf), ctx.use(m.d2u.wg), ctx.use(m.d2u.wtheta),
                           p);
}

}  // namespace derain
