#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "derain/biscsm.hpp"
#include "derain/rng.hpp"
#include "gradcheck.hpp"

using namespace derain;
using derain::testing::check_gradients;
using derain::testing::random_values;

namespace {

Tensor<double> rand_tensor(Shape4 s, uint64_t seed, double lo = -1, double hi = 1) {
    Rng rng(seed);
    std::vector<double> v(s.numel());
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<double>::from_vector(s, std::move(v));
}

Tensor<double> identity_1x1(int c) {
    std::vector<double> v(static_cast<size_t>(c) * c, 0.0);
    for (int i = 0; i < c; ++i) v[static_cast<size_t>(i) * c + i] = 1.0;
    return Tensor<double>::from_vector({c, c, 1, 1}, std::move(v));
}

// Straight-line reimplementation of the fine-queries-coarse direction:
// explicit loops, no tensor ops, no shared code with the library path.
Tensor<double> u2d_oracle(const Tensor<double>& x, const Tensor<double>& wf,
                          const Tensor<double>& wg, const Tensor<double>& wt, int p) {
    const Shape4 s = x.shape();
    REQUIRE(s.n == 1);
    REQUIRE(s.h % (2 * p) == 0);
    REQUIRE(s.w % (2 * p) == 0);
    const int C = s.c, H = s.h, W = s.w, Hz = H / 2, Wz = W / 2;

    auto project_px = [&](const std::vector<double>& img, int h, int w,
                          const Tensor<double>& kernel, int c, int y, int xx) {
        (void)h;
        double acc = 0;
        for (int ci = 0; ci < C; ++ci)
            acc += kernel.at(c, ci, 0, 0) *
                   img[(static_cast<size_t>(ci) * (size_t)h + y) * w + xx];
        return acc;
    };

    std::vector<double> z(static_cast<size_t>(C) * Hz * Wz);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < Hz; ++y)
            for (int xx = 0; xx < Wz; ++xx)
                z[(static_cast<size_t>(c) * Hz + y) * Wz + xx] =
                    0.25 * (x.at(0, c, 2 * y, 2 * xx) + x.at(0, c, 2 * y, 2 * xx + 1) +
                            x.at(0, c, 2 * y + 1, 2 * xx) + x.at(0, c, 2 * y + 1, 2 * xx + 1));

    const std::vector<double>& xv = x.data();
    const int nfy = H / p, nfx = W / p, ncy = Hz / p, ncx = Wz / p;
    const int d = C * p * p;

    auto patch_vec = [&](const std::vector<double>& img, int h, int w,
                         const Tensor<double>& kernel, int by, int bx) {
        std::vector<double> out(d);
        for (int c = 0; c < C; ++c)
            for (int py = 0; py < p; ++py)
                for (int px = 0; px < p; ++px)
                    out[(c * p + py) * p + px] =
                        project_px(img, h, w, kernel, c, by * p + py, bx * p + px);
        return out;
    };

    std::vector<double> out = xv;
    for (int by = 0; by < nfy; ++by)
        for (int bx = 0; bx < nfx; ++bx) {
            std::vector<double> q = patch_vec(xv, H, W, wf, by, bx);
            std::vector<double> scores(ncy * ncx);
            double maxs = -1e300;
            for (int cy = 0; cy < ncy; ++cy)
                for (int cx = 0; cx < ncx; ++cx) {
                    std::vector<double> k = patch_vec(z, Hz, Wz, wg, cy, cx);
                    double sdot = 0;
                    for (int j = 0; j < d; ++j) sdot += q[j] * k[j];
                    scores[cy * ncx + cx] = sdot;
                    maxs = std::max(maxs, sdot);
                }
            double denom = 0;
            for (auto& sc : scores) {
                sc = std::exp(sc - maxs);
                denom += sc;
            }
            std::vector<double> mined(d, 0.0);
            for (int cy = 0; cy < ncy; ++cy)
                for (int cx = 0; cx < ncx; ++cx) {
                    std::vector<double> v = patch_vec(z, Hz, Wz, wt, cy, cx);
                    const double a = scores[cy * ncx + cx] / denom;
                    for (int j = 0; j < d; ++j) mined[j] += a * v[j];
                }
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < p; ++py)
                    for (int px = 0; px < p; ++px)
                        out[(static_cast<size_t>(c) * H + by * p + py) * W + bx * p + px] +=
                            mined[(c * p + py) * p + px];
        }
    return Tensor<double>::from_vector(s, std::move(out));
}

BiscsmModule<double> build_module(ParamStore<double>& store, int channels, int h, int w,
                                  BiscsmConfig cfg, uint64_t seed) {
    Rng rng(seed);
    return make_biscsm(store, "test", channels, h, w, cfg, rng);
}

Tensor<double> cyclic_shift(const Tensor<double>& x, int dy, int dx) {
    const Shape4 s = x.shape();
    std::vector<double> out(x.data().size());
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
                for (int xx = 0; xx < s.w; ++xx)
                    out[((static_cast<size_t>(n) * s.c + c) * s.h + (y + dy) % s.h) * s.w +
                        (xx + dx) % s.w] = x.at(n, c, y, xx);
    return Tensor<double>::from_vector(s, std::move(out));
}

}  // namespace

TEST_CASE("zero value projection leaves the input untouched") {
    auto x = rand_tensor({1, 2, 6, 6}, 1);
    auto wf = rand_tensor({2, 2, 1, 1}, 2);
    auto wg = rand_tensor({2, 2, 1, 1}, 3);
    auto wt = Tensor<double>::zeros({2, 2, 1, 1});
    CHECK(up_to_down_mine(x, wf, wg, wt, 3).data() == x.data());
    CHECK(down_to_up_mine(x, wf, wg, wt, 3).data() == x.data());
}

TEST_CASE("constant input yields uniform attention and a constant shift") {
    // x constant per channel: every query matches every key equally, so the
    // mined patch is the theta-projection of the constant coarse value
    const double c0 = 0.3, c1 = -0.7;
    std::vector<double> xv;
    for (int i = 0; i < 36; ++i) xv.push_back(c0);
    for (int i = 0; i < 36; ++i) xv.push_back(c1);
    auto x = Tensor<double>::from_vector({1, 2, 6, 6}, xv);
    auto wf = rand_tensor({2, 2, 1, 1}, 4);
    auto wg = rand_tensor({2, 2, 1, 1}, 5);
    auto wt = rand_tensor({2, 2, 1, 1}, 6);

    const double t0 = wt.at(0, 0, 0, 0) * c0 + wt.at(0, 1, 0, 0) * c1;
    const double t1 = wt.at(1, 0, 0, 0) * c0 + wt.at(1, 1, 0, 0) * c1;

    auto up = up_to_down_mine(x, wf, wg, wt, 3);
    for (int y = 0; y < 6; ++y)
        for (int xx = 0; xx < 6; ++xx) {
            CHECK(up.at(0, 0, y, xx) == doctest::Approx(c0 + t0).epsilon(1e-12));
            CHECK(up.at(0, 1, y, xx) == doctest::Approx(c1 + t1).epsilon(1e-12));
        }
    auto down = down_to_up_mine(x, wf, wg, wt, 3);
    for (int y = 0; y < 6; ++y)
        for (int xx = 0; xx < 6; ++xx) {
            CHECK(down.at(0, 0, y, xx) == doctest::Approx(c0 + t0).epsilon(1e-12));
            CHECK(down.at(0, 1, y, xx) == doctest::Approx(c1 + t1).epsilon(1e-12));
        }
}

TEST_CASE("fine-to-coarse mining matches the brute-force oracle") {
    for (uint64_t seed = 0; seed < 3; ++seed) {
        auto x = rand_tensor({1, 2, 12, 12}, 10 + seed);
        auto wf = rand_tensor({2, 2, 1, 1}, 20 + seed);
        auto wg = rand_tensor({2, 2, 1, 1}, 30 + seed);
        auto wt = rand_tensor({2, 2, 1, 1}, 40 + seed);
        auto lib = up_to_down_mine(x, wf, wg, wt, 3);
        auto ora = u2d_oracle(x, wf, wg, wt, 3);
        for (size_t i = 0; i < lib.data().size(); ++i)
            CHECK(lib.data()[i] == doctest::Approx(ora.data()[i]).epsilon(1e-10));
    }
}

TEST_CASE("a dominant coarse patch wins sharp attention") {
    // low-amplitude noise plus one bright 6x6 corner block: the bright
    // fine patches and the bright coarse patch align with a huge margin
    Rng rng(50);
    std::vector<double> xv(144);
    for (auto& v : xv) v = rng.uniform(0.0, 0.1);
    auto fill_block = [&](int c) {
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) xv[(static_cast<size_t>(c) * 12 + y) * 12 + x] = 10.0;
    };
    fill_block(0);
    auto x = Tensor<double>::from_vector({1, 1, 12, 12}, xv);
    auto wi = identity_1x1(1);

    // brute-force weights for the fine patch at (0,0): verify margin and
    // near-total mass on the bright coarse patch (index 0)
    auto z = down2x_avg(x);
    auto q = unfold_patches(conv2d<double>(x, wi, nullptr), 3, 3);
    auto k = unfold_patches(conv2d<double>(z, wi, nullptr), 3, 3);
    auto weights = attention_weights(q, k);
    const int M = k.shape().c;
    double best = weights[0];
    CHECK(best > 1.0 - 1e-8);

    // score margin: recompute raw scores directly
    std::vector<double> scores(M, 0.0);
    for (int m = 0; m < M; ++m)
        for (int j = 0; j < 9; ++j)
            scores[m] += q.data()[j] * k.data()[static_cast<size_t>(m) * 9 + j];
    double second = -1e300;
    for (int m = 1; m < M; ++m) second = std::max(second, scores[m]);
    CHECK(scores[0] - second >= 50.0);

    // the mined patch therefore equals the bright coarse patch's values
    auto out = up_to_down_mine(x, wi, wi, wi, 3);
    auto v = unfold_patches(conv2d<double>(z, wi, nullptr), 3, 3);
    for (int j = 0; j < 9; ++j) {
        const int py = j / 3, px = j % 3;
        const double expect = x.at(0, 0, py, px) + v.data()[j];
        CHECK(std::fabs(out.at(0, 0, py, px) - expect) < 1e-6);
    }
}

TEST_CASE("module forward keeps shape and validates config") {
    ParamStore<double> store;
    BiscsmConfig cfg;
    auto m = build_module(store, 2, 6, 6, cfg, 7);
    ForwardContext<double> ctx(nullptr);

    for (Shape4 s : {Shape4{1, 2, 6, 6}, Shape4{2, 2, 8, 10}, Shape4{1, 2, 12, 12}}) {
        auto y = biscsm_forward(rand_tensor(s, 60), m, ctx);
        CHECK(y.shape() == s);
    }

    BiscsmConfig off;
    off.up_to_down = false;
    off.down_to_up = false;
    CHECK_THROWS_WITH_AS(off.validate(), doctest::Contains("bad-config"),
                         std::runtime_error);

    // single-direction variants work and keep shape
    for (bool u2d : {true, false}) {
        ParamStore<double> st2;
        BiscsmConfig one;
        one.up_to_down = u2d;
        one.down_to_up = !u2d;
        one.position = false;
        auto m2 = build_module(st2, 2, 6, 6, one, 8);
        ForwardContext<double> ctx2(nullptr);
        auto y = biscsm_forward(rand_tensor({1, 2, 6, 6}, 61), m2, ctx2);
        CHECK(y.shape() == Shape4{1, 2, 6, 6});
    }

    auto tiny = rand_tensor({1, 2, 4, 4}, 62);
    CHECK_THROWS_WITH_AS(biscsm_forward(tiny, m, ctx), doctest::Contains("bad-dimension"),
                         std::runtime_error);
}

TEST_CASE("residual identity at init with zeroed value projections") {
    ParamStore<double> store;
    BiscsmConfig cfg;  // both directions + position + fusion
    auto m = build_module(store, 3, 6, 6, cfg, 9);
    std::fill(m.u2d.wtheta->value->begin(), m.u2d.wtheta->value->end(), 0.0);
    std::fill(m.d2u.wtheta->value->begin(), m.d2u.wtheta->value->end(), 0.0);
    // position grid is zero-initialized already; fusion conv is identity at init
    ForwardContext<double> ctx(nullptr);
    auto x = rand_tensor({2, 3, 6, 6}, 70);
    auto y = biscsm_forward(x, m, ctx);
    CHECK(y.data() == x.data());
}

TEST_CASE("patch-grid translation equivariance without position, broken with it") {
    // fine-queries-coarse only: cyclic shift by one coarse patch (2p pixels)
    // permutes both patch grids, so outputs shift identically
    ParamStore<double> store;
    BiscsmConfig cfg;
    cfg.down_to_up = false;
    cfg.position = false;
    auto m = build_module(store, 2, 12, 12, cfg, 11);
    ForwardContext<double> ctx(nullptr);

    auto x = rand_tensor({1, 2, 12, 12}, 71);
    auto shifted = cyclic_shift(x, 6, 6);
    auto y = biscsm_forward(x, m, ctx);
    auto y_shifted = biscsm_forward(shifted, m, ctx);
    auto expected = cyclic_shift(y, 6, 6);
    double worst = 0;
    for (size_t i = 0; i < expected.data().size(); ++i)
        worst = std::max(worst, std::fabs(expected.data()[i] - y_shifted.data()[i]));
    CHECK(worst < 1e-12);

    // a nonzero positional grid pins content to absolute locations
    ParamStore<double> store2;
    BiscsmConfig cfg2 = cfg;
    cfg2.position = true;
    auto m2 = build_module(store2, 2, 12, 12, cfg2, 12);
    Rng prng(13);
    for (auto& v : *m2.pos->value) v = prng.uniform(-0.5, 0.5);
    auto y2 = biscsm_forward(x, m2, ctx);
    auto y2_shifted = biscsm_forward(shifted, m2, ctx);
    auto expected2 = cyclic_shift(y2, 6, 6);
    double diff = 0;
    for (size_t i = 0; i < expected2.data().size(); ++i)
        diff = std::max(diff, std::fabs(expected2.data()[i] - y2_shifted.data()[i]));
    CHECK(diff > 1e-6);
}

TEST_CASE("positional grid resizes to off-resolution inputs") {
    ParamStore<double> store;
    BiscsmConfig cfg;
    auto m = build_module(store, 2, 6, 6, cfg, 14);
    Rng prng(15);
    for (auto& v : *m.pos->value) v = prng.uniform(-0.1, 0.1);
    ForwardContext<double> ctx(nullptr);
    auto y = biscsm_forward(rand_tensor({1, 2, 12, 12}, 72), m, ctx);
    CHECK(y.shape() == Shape4{1, 2, 12, 12});
}

TEST_CASE("gradients flow through both mining directions") {
    Rng rng(80);
    Shape4 xs{1, 2, 6, 6};
    Shape4 ws{2, 2, 1, 1};
    for (bool up : {true, false}) {
        auto res = check_gradients(
            [up](Tape<double>&, const std::vector<Tensor<double>>& in) {
                auto y = up ? up_to_down_mine(in[0], in[1], in[2], in[3], 3)
                            : down_to_up_mine(in[0], in[1], in[2], in[3], 3);
                return sum_all(mul(y, y));
            },
            {xs, ws, ws, ws},
            {random_values(rng, xs), random_values(rng, ws), random_values(rng, ws),
             random_values(rng, ws)});
        CHECK_MESSAGE(res.ok, res.where);
    }
}

TEST_CASE("gradients reach every parameter of the full module") {
    // 12x12 input so the coarse grid has several patches; with a single
    // coarse patch the softmax is constant and wf/wg legitimately get no
    // gradient
    ParamStore<double> store;
    BiscsmConfig cfg;
    auto m = build_module(store, 2, 12, 12, cfg, 16);
    Tape<double> tape;
    ForwardContext<double> ctx(&tape);
    auto x = rand_tensor({1, 2, 12, 12}, 81);
    auto loss = sum_all(mul(biscsm_forward(x, m, ctx), rand_tensor({1, 2, 12, 12}, 82)));
    backward(loss);
    for (const auto& p : store.all()) {
        auto g = ctx.grad(p);
        double mag = 0;
        for (double v : g) mag += std::fabs(v);
        std::string complaint = p->name + " received no gradient";
        CHECK_MESSAGE(mag > 0, complaint);
    }
}
