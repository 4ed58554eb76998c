#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "derain/common.hpp"

namespace derain {

struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    long long numel() const {
        return static_cast<long long>(n) * c * h * w;
    }
    bool operator==(const Shape4&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

inline constexpr Shape4 kScalarShape{1, 1, 1, 1};

template <typename T>
class Tape;

// Rank-4 tensor in row-major (N,C,H,W) order. Values are immutable after
// creation; parameter updates swap in fresh buffers between tapes.
// A tensor optionally references a tape node so gradients can flow to it.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape4 s) { return full(s, T(0)); }

    static Tensor full(Shape4 s, T v) {
        check_shape(s);
        return Tensor(s, std::make_shared<std::vector<T>>(s.numel(), v));
    }

    static Tensor from_vector(Shape4 s, std::vector<T> v) {
        check_shape(s);
        if (static_cast<long long>(v.size()) != s.numel())
            fail("shape-mismatch", "data length " + std::to_string(v.size()) +
                                       " does not match shape " + s.str());
        return Tensor(s, std::make_shared<std::vector<T>>(std::move(v)));
    }

    static Tensor scalar(T v) { return full(kScalarShape, v); }

    // Leaf registration on a tape; only requires_grad leaves get a node.
    static Tensor leaf(Tape<T>& tape, Shape4 s,
                       std::shared_ptr<const std::vector<T>> data,
                       bool requires_grad);

    const Shape4& shape() const { return shape_; }
    long long numel() const { return shape_.numel(); }
    const std::vector<T>& data() const { return *data_; }
    std::shared_ptr<const std::vector<T>> data_ptr() const { return data_; }

    T at(int n, int c, int y, int x) const {
        return (*data_)[((static_cast<size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x];
    }

    T item() const {
        if (numel() != 1) fail("non-scalar", "item() on tensor of shape " + shape_.str());
        return (*data_)[0];
    }

    Tape<T>* tape() const { return tape_; }
    int node() const { return node_; }
    bool tracked() const { return tape_ != nullptr && node_ >= 0; }

    void attach(Tape<T>* tape, int node) {
        tape_ = tape;
        node_ = node;
    }

private:
    Tensor(Shape4 s, std::shared_ptr<const std::vector<T>> d)
        : shape_(s), data_(std::move(d)) {}

    static void check_shape(const Shape4& s) {
        if (s.n < 0 || s.c < 0 || s.h < 0 || s.w < 0)
            fail("shape-mismatch", "negative dimension in " + s.str());
    }

    Shape4 shape_{};
    std::shared_ptr<const std::vector<T>> data_;
    Tape<T>* tape_ = nullptr;
    int node_ = -1;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so parent ids
// always precede children; backward walks the list once in reverse.
template <typename T>
class Tape {
public:
    using BackwardFn =
        std::function<void(const std::vector<T>& grad_out,
                           const std::vector<std::vector<T>*>& parent_grads)>;

    int record(const char* kind, size_t out_numel, std::vector<int> parents,
               BackwardFn back) {
        nodes_.push_back(Node{kind, out_numel, std::move(parents), std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    int record_leaf(size_t numel) { return record("leaf", numel, {}, nullptr); }

    // Seeds d(loss)=1 and propagates to every reachable node. Non-leaf
    // gradient buffers are released as soon as they have been consumed.
    void run_backward(const Tensor<T>& loss) {
        if (!loss.tracked() || loss.tape() != this)
            fail("non-scalar-loss", "loss tensor is not attached to this tape");
        if (loss.numel() != 1)
            fail("non-scalar-loss",
                 "backward requires a scalar loss, got shape " + loss.shape().str());
        grads_.assign(nodes_.size(), {});
        grads_[loss.node()] = std::vector<T>{T(1)};
        for (int i = loss.node(); i >= 0; --i) {
            if (grads_[i].empty()) continue;
            const Node& node = nodes_[i];
            if (!node.back) continue;  // leaf keeps its gradient
            std::vector<std::vector<T>*> pg;
            pg.reserve(node.parents.size());
            for (int p : node.parents) {
                if (grads_[p].empty()) grads_[p].assign(nodes_[p].out_numel, T(0));
                pg.push_back(&grads_[p]);
            }
            node.back(grads_[i], pg);
            grads_[i] = {};
        }
    }

    // Gradient of a tracked tensor after run_backward; zeros if unreached.
    std::vector<T> grad(const Tensor<T>& t) const {
        if (!t.tracked() || t.tape() != this) return std::vector<T>(t.numel(), T(0));
        if (static_cast<size_t>(t.node()) >= grads_.size() || grads_[t.node()].empty())
            return std::vector<T>(t.numel(), T(0));
        return grads_[t.node()];
    }

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        const char* kind;
        size_t out_numel;
        std::vector<int> parents;
        BackwardFn back;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
};

template <typename T>
Tensor<T> Tensor<T>::leaf(Tape<T>& tape, Shape4 s,
                          std::shared_ptr<const std::vector<T>> data,
                          bool requires_grad) {
    check_shape(s);
    if (static_cast<long long>(data->size()) != s.numel())
        fail("shape-mismatch", "data length does not match shape " + s.str());
    Tensor t(s, std::move(data));
    if (requires_grad) t.attach(&tape, tape.record_leaf(t.numel()));
    return t;
}

namespace detail {

template <typename T>
Tape<T>* pick_tape(const Tensor<T>& a) {
    return a.tracked() ? a.tape() : nullptr;
}

template <typename T>
Tape<T>* pick_tape(const Tensor<T>& a, const Tensor<T>& b) {
    Tape<T>* ta = pick_tape(a);
    Tape<T>* tb = pick_tape(b);
    if (ta && tb && ta != tb) fail("tape-mismatch", "operands belong to different tapes");
    return ta ? ta : tb;
}

template <typename T>
inline void axpy(std::vector<T>& y, T a, const std::vector<T>& x) {
    for (size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops accept equal shapes, or a scalar-shaped b
// which broadcasts over a (its gradient is the sum over all positions).
// ---------------------------------------------------------------------------

enum class EwBinary { add, sub, mul, div };

template <typename T>
Tensor<T> ew_binary(EwBinary kind, const Tensor<T>& a, const Tensor<T>& b) {
    const bool b_scalar = b.shape() == kScalarShape && !(a.shape() == kScalarShape);
    if (!b_scalar && !(a.shape() == b.shape()))
        fail("shape-mismatch", a.shape().str() + " vs " + b.shape().str());

    const auto& av = a.data();
    const auto& bv = b.data();
    std::vector<T> out(av.size());
    auto bval = [&](size_t i) { return b_scalar ? bv[0] : bv[i]; };
    switch (kind) {
        case EwBinary::add:
            for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bval(i);
            break;
        case EwBinary::sub:
            for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bval(i);
            break;
        case EwBinary::mul:
            for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bval(i);
            break;
        case EwBinary::div:
            for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bval(i);
            break;
    }
    Tensor<T> result = Tensor<T>::from_vector(a.shape(), std::move(out));

    Tape<T>* tape = detail::pick_tape(a, b);
    if (!tape) return result;

    std::vector<int> parents;
    int slot_a = -1, slot_b = -1;
    if (a.tracked()) { slot_a = static_cast<int>(parents.size()); parents.push_back(a.node()); }
    if (b.tracked()) { slot_b = static_cast<int>(parents.size()); parents.push_back(b.node()); }

    auto ad = a.data_ptr();
    auto bd = b.data_ptr();
    auto back = [kind, slot_a, slot_b, b_scalar, ad, bd](
                    const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
        if (slot_a >= 0) {
            std::vector<T>& ga = *pg[slot_a];
            switch (kind) {
                case EwBinary::add:
                case EwBinary::sub:
                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    break;
                case EwBinary::mul:
                    for (size_t i = 0; i < g.size(); ++i)
                        ga[i] += g[i] * (b_scalar ? (*bd)[0] : (*bd)[i]);
                    break;
                case EwBinary::div:
                    for (size_t i = 0; i < g.size(); ++i)
                        ga[i] += g[i] / (b_scalar ? (*bd)[0] : (*bd)[i]);
                    break;
            }
        }
        if (slot_b >= 0) {
            std::vector<T>& gb = *pg[slot_b];
            for (size_t i = 0; i < g.size(); ++i) {
                T contrib = T(0);
                switch (kind) {
                    case EwBinary::add: contrib = g[i]; break;
                    case EwBinary::sub: contrib = -g[i]; break;
                    case EwBinary::mul: contrib = g[i] * (*ad)[i]; break;
                    case EwBinary::div: {
                        T bv_i = b_scalar ? (*bd)[0] : (*bd)[i];
                        contrib = -g[i] * (*ad)[i] / (bv_i * bv_i);
                        break;
                    }
                }
                gb[b_scalar ? 0 : i] += contrib;
            }
        }
    };
    const char* names[] = {"add", "sub", "mul", "div"};
    result.attach(tape, tape->record(names[static_cast<int>(kind)], result.numel(),
                                     std::move(parents), std::move(back)));
    return result;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return ew_binary(EwBinary::add, a, b); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return ew_binary(EwBinary::sub, a, b); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return ew_binary(EwBinary::mul, a, b); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return ew_binary(EwBinary::div, a, b); }

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, double s) {
    const auto& av = a.data();
    std::vector<T> out(av.size());
    const T sv = static_cast<T>(s);
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * sv;
    Tensor<T> result = Tensor<T>::from_vector(a.shape(), std::move(out));
    if (Tape<T>* tape = detail::pick_tape(a)) {
        auto back = [sv](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
            detail::axpy(*pg[0], sv, g);
        };
        result.attach(tape, tape->record("scalar_mul", result.numel(), {a.node()}, back));
    }
    return result;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, double s) {
    const auto& av = a.data();
    std::vector<T> out(av.size());
    const T sv = static_cast<T>(s);
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + sv;
    Tensor<T> result = Tensor<T>::from_vector(a.shape(), std::move(out));
    if (Tape<T>* tape = detail::pick_tape(a)) {
        auto back = [](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
            detail::axpy(*pg[0], T(1), g);
        };
        result.attach(tape, tape->record("add_scalar", result.numel(), {a.node()}, back));
    }
    return result;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    const auto& av = a.data();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    Tensor<T> result = Tensor<T>::from_vector(a.shape(), std::move(out));
    if (Tape<T>* tape = detail::pick_tape(a)) {
        auto od = result.data_ptr();
        auto back = [od](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& ga = *pg[0];
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (*od)[i];
        };
        result.attach(tape, tape->record("exp", result.numel(), {a.node()}, back));
    }
    return result;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    const auto& av = a.data();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) {
        if (!(av[i] > T(0)))
            fail("domain-error", "log of non-positive value " + std::to_string(av[i]));
        out[i] = std::log(av[i]);
    }
    Tensor<T> result = Tensor<T>::from_vector(a.shape(), std::move(out));
    if (Tape<T>* tape = detail::pick_tape(a)) {
        auto ad = a.data_ptr();
        auto back = [ad](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& ga = *pg[0];
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / (*ad)[i];
        };
        result.attach(tape, tape->record("log", result.numel(), {a.node()}, back));
    }
    return result;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
    const auto& av = a.data();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(av[i]);
    Tensor<T> result = Tensor<T>::from_vector(a.shape(), std::move(out));
    if (Tape<T>* tape = detail::pick_tape(a)) {
        auto ad = a.data_ptr();
        // subgradient at 0 is 0
        auto back = [ad](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& ga = *pg[0];
            for (size_t i = 0; i < g.size(); ++i) {
                T x = (*ad)[i];
                ga[i] += g[i] * (x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)));
            }
        };
        result.attach(tape, tape->record("abs", result.numel(), {a.node()}, back));
    }
    return result;
}

// Subgradient at exactly 0 is alpha, keeping the negative branch continuous.
template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, double alpha) {
    if (alpha < 0) fail("bad-config", "leaky_relu alpha must be >= 0");
    const T al = static_cast<T>(alpha);
    const auto& av = a.data();
    std::vector<T> out(av.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] >= T(0) ? av[i] : al * av[i];
    Tensor<T> result = Tensor<T>::from_vector(a.shape(), std::move(out));
    if (Tape<T>* tape = detail::pick_tape(a)) {
        auto ad = a.data_ptr();
        auto back = [ad, al](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& ga = *pg[0];
            for (size_t i = 0; i < g.size(); ++i)
                ga[i] += g[i] * ((*ad)[i] > T(0) ? T(1) : al);
        };
        result.attach(tape, tape->record("leaky_relu", result.numel(), {a.node()}, back));
    }
    return result;
}

// Replicates a single-sample tensor across the batch dimension; the
// gradient sums over batch entries.
template <typename T>
Tensor<T> broadcast_batch(const Tensor<T>& a, int n) {
    const Shape4 as = a.shape();
    if (as.n != 1) fail("shape-mismatch", "broadcast_batch input must have N=1, got " + as.str());
    if (n < 1) fail("bad-config", "broadcast_batch target batch must be positive");
    const size_t stride = a.data().size();
    std::vector<T> out;
    out.reserve(stride * n);
    for (int i = 0; i < n; ++i) out.insert(out.end(), a.data().begin(), a.data().end());
    Tensor<T> result = Tensor<T>::from_vector({n, as.c, as.h, as.w}, std::move(out));
    if (Tape<T>* tape = detail::pick_tape(a)) {
        auto back = [n, stride](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& ga = *pg[0];
            for (int i = 0; i < n; ++i)
                for (size_t j = 0; j < stride; ++j) ga[j] += g[i * stride + j];
        };
        result.attach(tape, tape->record("broadcast_batch", result.numel(), {a.node()}, back));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    const auto& av = a.data();
    T acc = T(0);
    for (T v : av) acc += v;
    Tensor<T> result = Tensor<T>::scalar(acc);
    if (Tape<T>* tape = detail::pick_tape(a)) {
        auto back = [](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& ga = *pg[0];
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
        };
        result.attach(tape, tape->record("sum", 1, {a.node()}, back));
    }
    return result;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return scalar_mul(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// conv2d with zero padding, optional bias and grouped channels.
// H' = floor((H + 2*pad - kh) / stride) + 1, likewise W'.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias,
                 int stride = 1, int padding = 0, int groups = 1) {
    const Shape4 xs = x.shape();
    const Shape4 ws = weight.shape();
    const int cout = ws.n, kh = ws.h, kw = ws.w;
    if (stride < 1) fail("bad-config", "conv2d stride must be >= 1");
    if (padding < 0) fail("bad-config", "conv2d padding must be >= 0");
    if (kh < 1 || kw < 1) fail("bad-config", "conv2d kernel must be at least 1x1");
    if (groups < 1 || xs.c % groups != 0 || cout % groups != 0)
        fail("bad-config", "conv2d groups must divide both channel counts");
    if (ws.c != xs.c / groups)
        fail("shape-mismatch", "conv2d weight " + ws.str() + " does not match input " +
                                   xs.str() + " with groups=" + std::to_string(groups));
    if (xs.h + 2 * padding < kh || xs.w + 2 * padding < kw)
        fail("bad-dimension", "conv2d kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                  " larger than padded input " + xs.str());
    if (bias && !(bias->shape() == Shape4{1, cout, 1, 1}) &&
        !(bias->shape() == Shape4{cout, 1, 1, 1}))
        fail("shape-mismatch", "conv2d bias shape " + bias->shape().str());

    const int oh = (xs.h + 2 * padding - kh) / stride + 1;
    const int ow = (xs.w + 2 * padding - kw) / stride + 1;
    const int cin_g = xs.c / groups;
    const int cout_g = cout / groups;
    const Shape4 os{xs.n, cout, oh, ow};

    const auto& xv = x.data();
    const auto& wv = weight.data();
    std::vector<T> out(os.numel(), T(0));

    if (bias) {
        const auto& bv = bias->data();
        for (int n = 0; n < xs.n; ++n)
            for (int co = 0; co < cout; ++co) {
                T b = bv[co];
                T* orow = out.data() + ((static_cast<size_t>(n) * cout + co) * oh) * ow;
                for (int i = 0; i < oh * ow; ++i) orow[i] = b;
            }
    }

    // Scalar-weight inner loops over contiguous rows.
    for (int n = 0; n < xs.n; ++n) {
        for (int co = 0; co < cout; ++co) {
            const int g = co / cout_g;
            T* oplane = out.data() + (static_cast<size_t>(n) * cout + co) * oh * ow;
            for (int cl = 0; cl < cin_g; ++cl) {
                const int ci = g * cin_g + cl;
                const T* xplane = xv.data() + (static_cast<size_t>(n) * xs.c + ci) * xs.h * xs.w;
                const T* wk = wv.data() + ((static_cast<size_t>(co) * cin_g + cl) * kh) * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    for (int kx = 0; kx < kw; ++kx) {
                        const T wval = wk[ky * kw + kx];
                        if (wval == T(0)) continue;
                        for (int y = 0; y < oh; ++y) {
                            const int iy = y * stride - padding + ky;
                            if (iy < 0 || iy >= xs.h) continue;
                            const T* xrow = xplane + static_cast<size_t>(iy) * xs.w;
                            T* orow = oplane + static_cast<size_t>(y) * ow;
                            for (int xo = 0; xo < ow; ++xo) {
                                const int ix = xo * stride - padding + kx;
                                if (ix < 0 || ix >= xs.w) continue;
                                orow[xo] += wval * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }

    Tensor<T> result = Tensor<T>::from_vector(os, std::move(out));

    Tape<T>* tape = detail::pick_tape(x, weight);
    if (bias) tape = bias->tracked() && !tape ? bias->tape() : tape;
    if (bias && bias->tracked() && tape && bias->tape() != tape)
        fail("tape-mismatch", "conv2d bias on a different tape");
    if (!tape) return result;

    std::vector<int> parents;
    int slot_x = -1, slot_w = -1, slot_b = -1;
    if (x.tracked()) { slot_x = static_cast<int>(parents.size()); parents.push_back(x.node()); }
    if (weight.tracked()) { slot_w = static_cast<int>(parents.size()); parents.push_back(weight.node()); }
    if (bias && bias->tracked()) { slot_b = static_cast<int>(parents.size()); parents.push_back(bias->node()); }

    auto xd = x.data_ptr();
    auto wd = weight.data_ptr();
    auto back = [=](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
        if (slot_b >= 0) {
            std::vector<T>& gb = *pg[slot_b];
            for (int n = 0; n < xs.n; ++n)
                for (int co = 0; co < cout; ++co) {
                    const T* grow = g.data() + (static_cast<size_t>(n) * cout + co) * oh * ow;
                    T acc = T(0);
                    for (int i = 0; i < oh * ow; ++i) acc += grow[i];
                    gb[co] += acc;
                }
        }
        for (int n = 0; n < xs.n; ++n) {
            for (int co = 0; co < cout; ++co) {
                const int grp = co / cout_g;
                const T* gplane = g.data() + (static_cast<size_t>(n) * cout + co) * oh * ow;
                for (int cl = 0; cl < cin_g; ++cl) {
                    const int ci = grp * cin_g + cl;
                    const T* xplane =
                        xd->data() + (static_cast<size_t>(n) * xs.c + ci) * xs.h * xs.w;
                    for (int ky = 0; ky < kh; ++ky) {
                        for (int kx = 0; kx < kw; ++kx) {
                            const size_t widx = ((static_cast<size_t>(co) * cin_g + cl) * kh + ky) * kw + kx;
                            T wgrad_acc = T(0);
                            const T wval = (*wd)[widx];
                            for (int y = 0; y < oh; ++y) {
                                const int iy = y * stride - padding + ky;
                                if (iy < 0 || iy >= xs.h) continue;
                                const T* xrow = xplane + static_cast<size_t>(iy) * xs.w;
                                const T* grow = gplane + static_cast<size_t>(y) * ow;
                                if (slot_x >= 0) {
                                    std::vector<T>& gx = *pg[slot_x];
                                    T* gxrow = gx.data() +
                                               (static_cast<size_t>(n) * xs.c + ci) * xs.h * xs.w +
                                               static_cast<size_t>(iy) * xs.w;
                                    for (int xo = 0; xo < ow; ++xo) {
                                        const int ix = xo * stride - padding + kx;
                                        if (ix < 0 || ix >= xs.w) continue;
                                        gxrow[ix] += wval * grow[xo];
                                        if (slot_w >= 0) wgrad_acc += grow[xo] * xrow[ix];
                                    }
                                } else if (slot_w >= 0) {
                                    for (int xo = 0; xo < ow; ++xo) {
                                        const int ix = xo * stride - padding + kx;
                                        if (ix < 0 || ix >= xs.w) continue;
                                        wgrad_acc += grow[xo] * xrow[ix];
                                    }
                                }
                            }
                            if (slot_w >= 0) (*pg[slot_w])[widx] += wgrad_acc;
                        }
                    }
                }
            }
        }
    };
    result.attach(tape, tape->record("conv2d", result.numel(), std::move(parents), std::move(back)));
    return result;
}

// ---------------------------------------------------------------------------
// Resampling: 2x block-average downsample and bilinear resize with
// half-pixel alignment (up2x is the exact 2x case of the latter).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> down2x_avg(const Tensor<T>& x) {
    const Shape4 xs = x.shape();
    if (xs.h % 2 != 0 || xs.w % 2 != 0)
        fail("bad-dimension", "down2x_avg requires even spatial dims, got " + xs.str());
    const Shape4 os{xs.n, xs.c, xs.h / 2, xs.w / 2};
    const auto& xv = x.data();
    std::vector<T> out(os.numel());
    const T quarter = T(0.25);
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const T* xp = xv.data() + (static_cast<size_t>(n) * xs.c + c) * xs.h * xs.w;
            T* op = out.data() + (static_cast<size_t>(n) * os.c + c) * os.h * os.w;
            for (int y = 0; y < os.h; ++y) {
                const T* r0 = xp + static_cast<size_t>(2 * y) * xs.w;
                const T* r1 = r0 + xs.w;
                for (int xo = 0; xo < os.w; ++xo)
                    op[static_cast<size_t>(y) * os.w + xo] =
                        (r0[2 * xo] + r0[2 * xo + 1] + r1[2 * xo] + r1[2 * xo + 1]) * quarter;
            }
        }
    Tensor<T> result = Tensor<T>::from_vector(os, std::move(out));
    if (Tape<T>* tape = detail::pick_tape(x)) {
        auto back = [xs, os](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& gx = *pg[0];
            const T quarter = T(0.25);
            for (int n = 0; n < xs.n; ++n)
                for (int c = 0; c < xs.c; ++c) {
                    const T* gp = g.data() + (static_cast<size_t>(n) * os.c + c) * os.h * os.w;
                    T* gxp = gx.data() + (static_cast<size_t>(n) * xs.c + c) * xs.h * xs.w;
                    for (int y = 0; y < os.h; ++y)
                        for (int xo = 0; xo < os.w; ++xo) {
                            const T gval = gp[static_cast<size_t>(y) * os.w + xo] * quarter;
                            gxp[static_cast<size_t>(2 * y) * xs.w + 2 * xo] += gval;
                            gxp[static_cast<size_t>(2 * y) * xs.w + 2 * xo + 1] += gval;
                            gxp[static_cast<size_t>(2 * y + 1) * xs.w + 2 * xo] += gval;
                            gxp[static_cast<size_t>(2 * y + 1) * xs.w + 2 * xo + 1] += gval;
                        }
                }
        };
        result.attach(tape, tape->record("down2x_avg", result.numel(), {x.node()}, back));
    }
    return result;
}

namespace detail {

// Half-pixel source mapping with edge clamping; per-axis taps for bilinear.
struct ResampleTap {
    int i0, i1;
    double w1;  // weight of i1; i0 gets 1-w1
};

inline std::vector<ResampleTap> bilinear_taps(int in_size, int out_size) {
    std::vector<ResampleTap> taps(out_size);
    const double scale = static_cast<double>(in_size) / out_size;
    for (int o = 0; o < out_size; ++o) {
        double src = (o + 0.5) * scale - 0.5;
        double fl = std::floor(src);
        int i0 = static_cast<int>(fl);
        double w1 = src - fl;
        int i1 = i0 + 1;
        i0 = std::clamp(i0, 0, in_size - 1);
        i1 = std::clamp(i1, 0, in_size - 1);
        taps[o] = ResampleTap{i0, i1, w1};
    }
    return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
    const Shape4 xs = x.shape();
    if (out_h < 1 || out_w < 1) fail("bad-dimension", "resize target must be positive");
    const Shape4 os{xs.n, xs.c, out_h, out_w};
    const auto ty = detail::bilinear_taps(xs.h, out_h);
    const auto tx = detail::bilinear_taps(xs.w, out_w);
    const auto& xv = x.data();
    std::vector<T> out(os.numel());
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const T* xp = xv.data() + (static_cast<size_t>(n) * xs.c + c) * xs.h * xs.w;
            T* op = out.data() + (static_cast<size_t>(n) * os.c + c) * os.h * os.w;
            for (int y = 0; y < out_h; ++y) {
                const T* r0 = xp + static_cast<size_t>(ty[y].i0) * xs.w;
                const T* r1 = xp + static_cast<size_t>(ty[y].i1) * xs.w;
                const T wy1 = static_cast<T>(ty[y].w1);
                const T wy0 = T(1) - wy1;
                for (int xo = 0; xo < out_w; ++xo) {
                    const T wx1 = static_cast<T>(tx[xo].w1);
                    const T wx0 = T(1) - wx1;
                    op[static_cast<size_t>(y) * out_w + xo] =
                        wy0 * (wx0 * r0[tx[xo].i0] + wx1 * r0[tx[xo].i1]) +
                        wy1 * (wx0 * r1[tx[xo].i0] + wx1 * r1[tx[xo].i1]);
                }
            }
        }
    Tensor<T> result = Tensor<T>::from_vector(os, std::move(out));
    if (Tape<T>* tape = detail::pick_tape(x)) {
        auto back = [xs, os, ty, tx](const std::vector<T>& g,
                                     const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& gx = *pg[0];
            for (int n = 0; n < xs.n; ++n)
                for (int c = 0; c < xs.c; ++c) {
                    const T* gp = g.data() + (static_cast<size_t>(n) * os.c + c) * os.h * os.w;
                    T* gxp = gx.data() + (static_cast<size_t>(n) * xs.c + c) * xs.h * xs.w;
                    for (int y = 0; y < os.h; ++y) {
                        const T wy1 = static_cast<T>(ty[y].w1);
                        const T wy0 = T(1) - wy1;
                        for (int xo = 0; xo < os.w; ++xo) {
                            const T gval = gp[static_cast<size_t>(y) * os.w + xo];
                            const T wx1 = static_cast<T>(tx[xo].w1);
                            const T wx0 = T(1) - wx1;
                            gxp[static_cast<size_t>(ty[y].i0) * xs.w + tx[xo].i0] += gval * wy0 * wx0;
                            gxp[static_cast<size_t>(ty[y].i0) * xs.w + tx[xo].i1] += gval * wy0 * wx1;
                            gxp[static_cast<size_t>(ty[y].i1) * xs.w + tx[xo].i0] += gval * wy1 * wx0;
                            gxp[static_cast<size_t>(ty[y].i1) * xs.w + tx[xo].i1] += gval * wy1 * wx1;
                        }
                    }
                }
        };
        result.attach(tape, tape->record("resize_bilinear", result.numel(), {x.node()}, back));
    }
    return result;
}

template <typename T>
Tensor<T> up2x_bilinear(const Tensor<T>& x) {
    return resize_bilinear(x, x.shape().h * 2, x.shape().w * 2);
}

// ---------------------------------------------------------------------------
// Reflective padding (no edge repeat) and cropping.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, int top, int bottom, int left, int right) {
    const Shape4 xs = x.shape();
    if (top < 0 || bottom < 0 || left < 0 || right < 0)
        fail("bad-config", "negative padding");
    if (top >= xs.h || bottom >= xs.h || left >= xs.w || right >= xs.w)
        fail("bad-dimension", "reflect padding must be smaller than the input extent " + xs.str());
    const Shape4 os{xs.n, xs.c, xs.h + top + bottom, xs.w + left + right};
    auto reflect = [](int i, int n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
        return i;
    };
    std::vector<int> map_y(os.h), map_x(os.w);
    for (int y = 0; y < os.h; ++y) map_y[y] = reflect(y - top, xs.h);
    for (int xo = 0; xo < os.w; ++xo) map_x[xo] = reflect(xo - left, xs.w);

    const auto& xv = x.data();
    std::vector<T> out(os.numel());
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const T* xp = xv.data() + (static_cast<size_t>(n) * xs.c + c) * xs.h * xs.w;
            T* op = out.data() + (static_cast<size_t>(n) * os.c + c) * os.h * os.w;
            for (int y = 0; y < os.h; ++y)
                for (int xo = 0; xo < os.w; ++xo)
                    op[static_cast<size_t>(y) * os.w + xo] =
                        xp[static_cast<size_t>(map_y[y]) * xs.w + map_x[xo]];
        }
    Tensor<T> result = Tensor<T>::from_vector(os, std::move(out));
    if (Tape<T>* tape = detail::pick_tape(x)) {
        auto back = [xs, os, map_y, map_x](const std::vector<T>& g,
                                           const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& gx = *pg[0];
            for (int n = 0; n < xs.n; ++n)
                for (int c = 0; c < xs.c; ++c) {
                    const T* gp = g.data() + (static_cast<size_t>(n) * os.c + c) * os.h * os.w;
                    T* gxp = gx.data() + (static_cast<size_t>(n) * xs.c + c) * xs.h * xs.w;
                    for (int y = 0; y < os.h; ++y)
                        for (int xo = 0; xo < os.w; ++xo)
                            gxp[static_cast<size_t>(map_y[y]) * xs.w + map_x[xo]] +=
                                gp[static_cast<size_t>(y) * os.w + xo];
                }
        };
        result.attach(tape, tape->record("pad_reflect", result.numel(), {x.node()}, back));
    }
    return result;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, int top, int left, int height, int width) {
    const Shape4 xs = x.shape();
    if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > xs.h ||
        left + width > xs.w)
        fail("bad-dimension", "crop window out of bounds for " + xs.str());
    const Shape4 os{xs.n, xs.c, height, width};
    const auto& xv = x.data();
    std::vector<T> out(os.numel());
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
            for (int y = 0; y < height; ++y) {
                const T* src = xv.data() + ((static_cast<size_t>(n) * xs.c + c) * xs.h + top + y) * xs.w + left;
                T* dst = out.data() + ((static_cast<size_t>(n) * os.c + c) * os.h + y) * os.w;
                std::copy(src, src + width, dst);
            }
    Tensor<T> result = Tensor<T>::from_vector(os, std::move(out));
    if (Tape<T>* tape = detail::pick_tape(x)) {
        auto back = [xs, os, top, left](const std::vector<T>& g,
                                        const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& gx = *pg[0];
            for (int n = 0; n < xs.n; ++n)
                for (int c = 0; c < xs.c; ++c)
                    for (int y = 0; y < os.h; ++y) {
                        const T* gp = g.data() + ((static_cast<size_t>(n) * os.c + c) * os.h + y) * os.w;
                        T* gxp = gx.data() +
                                 ((static_cast<size_t>(n) * xs.c + c) * xs.h + top + y) * xs.w + left;
                        for (int xo = 0; xo < os.w; ++xo) gxp[xo] += gp[xo];
                    }
        };
        result.attach(tape, tape->record("crop", result.numel(), {x.node()}, back));
    }
    return result;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape4 as = a.shape(), bs = b.shape();
    if (as.n != bs.n || as.h != bs.h || as.w != bs.w)
        fail("shape-mismatch", "concat_channels " + as.str() + " vs " + bs.str());
    const Shape4 os{as.n, as.c + bs.c, as.h, as.w};
    const size_t plane = static_cast<size_t>(as.h) * as.w;
    const auto& avv = a.data();
    const auto& bvv = b.data();
    std::vector<T> out(os.numel());
    for (int n = 0; n < as.n; ++n) {
        std::copy(avv.begin() + static_cast<size_t>(n) * as.c * plane,
                  avv.begin() + static_cast<size_t>(n + 1) * as.c * plane,
                  out.begin() + static_cast<size_t>(n) * os.c * plane);
        std::copy(bvv.begin() + static_cast<size_t>(n) * bs.c * plane,
                  bvv.begin() + static_cast<size_t>(n + 1) * bs.c * plane,
                  out.begin() + static_cast<size_t>(n) * os.c * plane + static_cast<size_t>(as.c) * plane);
    }
    Tensor<T> result = Tensor<T>::from_vector(os, std::move(out));
    Tape<T>* tape = detail::pick_tape(a, b);
    if (!tape) return result;
    std::vector<int> parents;
    int slot_a = -1, slot_b = -1;
    if (a.tracked()) { slot_a = static_cast<int>(parents.size()); parents.push_back(a.node()); }
    if (b.tracked()) { slot_b = static_cast<int>(parents.size()); parents.push_back(b.node()); }
    auto back = [as, bs, os, plane, slot_a, slot_b](const std::vector<T>& g,
                                                    const std::vector<std::vector<T>*>& pg) {
        for (int n = 0; n < as.n; ++n) {
            if (slot_a >= 0) {
                std::vector<T>& ga = *pg[slot_a];
                const T* gp = g.data() + static_cast<size_t>(n) * os.c * plane;
                T* gap = ga.data() + static_cast<size_t>(n) * as.c * plane;
                for (size_t i = 0; i < static_cast<size_t>(as.c) * plane; ++i) gap[i] += gp[i];
            }
            if (slot_b >= 0) {
                std::vector<T>& gb = *pg[slot_b];
                const T* gp = g.data() + static_cast<size_t>(n) * os.c * plane +
                              static_cast<size_t>(as.c) * plane;
                T* gbp = gb.data() + static_cast<size_t>(n) * bs.c * plane;
                for (size_t i = 0; i < static_cast<size_t>(bs.c) * plane; ++i) gbp[i] += gp[i];
            }
        }
    };
    result.attach(tape, tape->record("concat", result.numel(), std::move(parents), std::move(back)));
    return result;
}

// ---------------------------------------------------------------------------
// Patch decomposition. unfold produces (N, K, C*p*p, 1) with patches in
// raster order; fold accumulates patches back (exact inverse when
// stride == p). Overlapping strides sum their contributions.
// ---------------------------------------------------------------------------

namespace detail {

inline int patch_count_1d(int extent, int p, int stride) {
    return (extent - p) / stride + 1;
}

inline void check_patch_geometry(const Shape4& xs, int p, int stride) {
    if (p < 1) fail("bad-config", "patch size must be >= 1");
    if (stride < 1) fail("bad-config", "patch stride must be >= 1");
    if (p > xs.h || p > xs.w)
        fail("bad-dimension", "patch " + std::to_string(p) + " exceeds input " + xs.str());
    if (stride == p && (xs.h % p != 0 || xs.w % p != 0))
        fail("bad-dimension", "spatial dims of " + xs.str() + " not divisible by patch size " +
                                  std::to_string(p) + "; pad the input first");
}

}  // namespace detail

template <typename T>
Tensor<T> unfold_patches(const Tensor<T>& x, int p, int stride) {
    const Shape4 xs = x.shape();
    detail::check_patch_geometry(xs, p, stride);
    const int nby = detail::patch_count_1d(xs.h, p, stride);
    const int nbx = detail::patch_count_1d(xs.w, p, stride);
    const int K = nby * nbx;
    const int d = xs.c * p * p;
    const Shape4 os{xs.n, K, d, 1};
    const auto& xv = x.data();
    std::vector<T> out(os.numel());
    for (int n = 0; n < xs.n; ++n)
        for (int by = 0; by < nby; ++by)
            for (int bx = 0; bx < nbx; ++bx) {
                const int k = by * nbx + bx;
                T* dst = out.data() + (static_cast<size_t>(n) * K + k) * d;
                for (int c = 0; c < xs.c; ++c) {
                    const T* src = xv.data() +
                                   ((static_cast<size_t>(n) * xs.c + c) * xs.h + by * stride) * xs.w +
                                   bx * stride;
                    for (int py = 0; py < p; ++py)
                        for (int px = 0; px < p; ++px)
                            dst[(c * p + py) * p + px] = src[static_cast<size_t>(py) * xs.w + px];
                }
            }
    Tensor<T> result = Tensor<T>::from_vector(os, std::move(out));
    if (Tape<T>* tape = detail::pick_tape(x)) {
        auto back = [xs, p, stride, nby, nbx, K, d](const std::vector<T>& g,
                                                    const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& gx = *pg[0];
            for (int n = 0; n < xs.n; ++n)
                for (int by = 0; by < nby; ++by)
                    for (int bx = 0; bx < nbx; ++bx) {
                        const int k = by * nbx + bx;
                        const T* gp = g.data() + (static_cast<size_t>(n) * K + k) * d;
                        for (int c = 0; c < xs.c; ++c) {
                            T* dst = gx.data() +
                                     ((static_cast<size_t>(n) * xs.c + c) * xs.h + by * stride) * xs.w +
                                     bx * stride;
                            for (int py = 0; py < p; ++py)
                                for (int px = 0; px < p; ++px)
                                    dst[static_cast<size_t>(py) * xs.w + px] += gp[(c * p + py) * p + px];
                        }
                    }
        };
        result.attach(tape, tape->record("unfold", result.numel(), {x.node()}, back));
    }
    return result;
}

template <typename T>
Tensor<T> fold_patches(const Tensor<T>& patches, Shape4 like, int p, int stride) {
    detail::check_patch_geometry(like, p, stride);
    const int nby = detail::patch_count_1d(like.h, p, stride);
    const int nbx = detail::patch_count_1d(like.w, p, stride);
    const int K = nby * nbx;
    const int d = like.c * p * p;
    if (!(patches.shape() == Shape4{like.n, K, d, 1}))
        fail("shape-mismatch", "fold_patches expected " + Shape4{like.n, K, d, 1}.str() +
                                   ", got " + patches.shape().str());
    const auto& pv = patches.data();
    std::vector<T> out(like.numel(), T(0));
    for (int n = 0; n < like.n; ++n)
        for (int by = 0; by < nby; ++by)
            for (int bx = 0; bx < nbx; ++bx) {
                const int k = by * nbx + bx;
                const T* src = pv.data() + (static_cast<size_t>(n) * K + k) * d;
                for (int c = 0; c < like.c; ++c) {
                    T* dst = out.data() +
                             ((static_cast<size_t>(n) * like.c + c) * like.h + by * stride) * like.w +
                             bx * stride;
                    for (int py = 0; py < p; ++py)
                        for (int px = 0; px < p; ++px)
                            dst[static_cast<size_t>(py) * like.w + px] += src[(c * p + py) * p + px];
                }
            }
    Tensor<T> result = Tensor<T>::from_vector(like, std::move(out));
    if (Tape<T>* tape = detail::pick_tape(patches)) {
        auto back = [like, p, stride, nby, nbx, K, d](const std::vector<T>& g,
                                                      const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& gp = *pg[0];
            for (int n = 0; n < like.n; ++n)
                for (int by = 0; by < nby; ++by)
                    for (int bx = 0; bx < nbx; ++bx) {
                        const int k = by * nbx + bx;
                        T* dst = gp.data() + (static_cast<size_t>(n) * K + k) * d;
                        for (int c = 0; c < like.c; ++c) {
                            const T* src = g.data() +
                                           ((static_cast<size_t>(n) * like.c + c) * like.h + by * stride) *
                                               like.w +
                                           bx * stride;
                            for (int py = 0; py < p; ++py)
                                for (int px = 0; px < p; ++px)
                                    dst[(c * p + py) * p + px] += src[static_cast<size_t>(py) * like.w + px];
                        }
                    }
        };
        result.attach(tape, tape->record("fold", result.numel(), {patches.node()}, back));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Softmax attention over patch vectors: q (N,K,d,1), k/v (N,M,d,1) ->
// (N,K,d,1). Scores are stabilized by subtracting the per-row maximum
// before exponentiation.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void softmax_rows(const T* q, const T* k, int K, int M, int d, T* weights) {
    std::vector<T> scores(M);
    for (int r = 0; r < K; ++r) {
        const T* qr = q + static_cast<size_t>(r) * d;
        T maxs = -std::numeric_limits<T>::infinity();
        for (int m = 0; m < M; ++m) {
            const T* km = k + static_cast<size_t>(m) * d;
            T s = T(0);
            for (int j = 0; j < d; ++j) s += qr[j] * km[j];
            scores[m] = s;
            maxs = std::max(maxs, s);
        }
        T denom = T(0);
        T* wr = weights + static_cast<size_t>(r) * M;
        for (int m = 0; m < M; ++m) {
            wr[m] = std::exp(scores[m] - maxs);
            denom += wr[m];
        }
        for (int m = 0; m < M; ++m) wr[m] /= denom;
    }
}

}  // namespace detail

// Row-stochastic attention weights for one batch of q/k; test introspection
// for the same code path matmul_softmax_attend uses. Layout: (N, K, M).
template <typename T>
std::vector<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k) {
    const Shape4 qs = q.shape(), ks = k.shape();
    if (qs.n != ks.n || qs.h != ks.h || qs.w != 1 || ks.w != 1)
        fail("shape-mismatch", "attention expects (N,K,d,1)/(N,M,d,1), got " + qs.str() +
                                   " vs " + ks.str());
    if (ks.c < 1) fail("empty-keys", "attention requires at least one key");
    const int K = qs.c, M = ks.c, d = qs.h;
    std::vector<T> weights(static_cast<size_t>(qs.n) * K * M);
    for (int n = 0; n < qs.n; ++n)
        detail::softmax_rows(q.data().data() + static_cast<size_t>(n) * K * d,
                             k.data().data() + static_cast<size_t>(n) * M * d, K, M, d,
                             weights.data() + static_cast<size_t>(n) * K * M);
    return weights;
}

template <typename T>
Tensor<T> matmul_softmax_attend(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
    const Shape4 qs = q.shape(), ks = k.shape(), vs = v.shape();
    if (qs.n != ks.n || ks.n != vs.n || qs.w != 1 || ks.w != 1 || vs.w != 1 ||
        qs.h != ks.h || ks.c != vs.c || ks.h != vs.h)
        fail("shape-mismatch", "attend shapes " + qs.str() + ", " + ks.str() + ", " + vs.str());
    if (ks.c < 1) fail("empty-keys", "attend requires at least one key");
    const int N = qs.n, K = qs.c, M = ks.c, d = qs.h;

    auto weights = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * K * M);
    const auto& qv = q.data();
    const auto& kv = k.data();
    const auto& vv = v.data();
    std::vector<T> out(static_cast<size_t>(N) * K * d, T(0));
    for (int n = 0; n < N; ++n) {
        const T* qp = qv.data() + static_cast<size_t>(n) * K * d;
        const T* kp = kv.data() + static_cast<size_t>(n) * M * d;
        const T* vp = vv.data() + static_cast<size_t>(n) * M * d;
        T* wp = weights->data() + static_cast<size_t>(n) * K * M;
        detail::softmax_rows(qp, kp, K, M, d, wp);
        T* op = out.data() + static_cast<size_t>(n) * K * d;
        for (int r = 0; r < K; ++r)
            for (int m = 0; m < M; ++m) {
                const T a = wp[static_cast<size_t>(r) * M + m];
                const T* vm = vp + static_cast<size_t>(m) * d;
                T* orow = op + static_cast<size_t>(r) * d;
                for (int j = 0; j < d; ++j) orow[j] += a * vm[j];
            }
    }
    Tensor<T> result = Tensor<T>::from_vector(Shape4{N, K, d, 1}, std::move(out));

    Tape<T>* tape = detail::pick_tape(q, k);
    if (!tape) tape = detail::pick_tape(v);
    if (v.tracked() && tape && v.tape() != tape)
        fail("tape-mismatch", "attend values on a different tape");
    if (!tape) return result;

    std::vector<int> parents;
    int slot_q = -1, slot_k = -1, slot_v = -1;
    if (q.tracked()) { slot_q = static_cast<int>(parents.size()); parents.push_back(q.node()); }
    if (k.tracked()) { slot_k = static_cast<int>(parents.size()); parents.push_back(k.node()); }
    if (v.tracked()) { slot_v = static_cast<int>(parents.size()); parents.push_back(v.node()); }

    auto qd = q.data_ptr();
    auto kd = k.data_ptr();
    auto vd = v.data_ptr();
    auto back = [=](const std::vector<T>& g, const std::vector<std::vector<T>*>& pg) {
        std::vector<T> dA(static_cast<size_t>(K) * M);
        std::vector<T> dS(static_cast<size_t>(K) * M);
        for (int n = 0; n < N; ++n) {
            const T* gp = g.data() + static_cast<size_t>(n) * K * d;
            const T* wp = weights->data() + static_cast<size_t>(n) * K * M;
            const T* qp = qd->data() + static_cast<size_t>(n) * K * d;
            const T* kp = kd->data() + static_cast<size_t>(n) * M * d;
            const T* vp = vd->data() + static_cast<size_t>(n) * M * d;
            if (slot_v >= 0) {
                T* gvp = pg[slot_v]->data() + static_cast<size_t>(n) * M * d;
                for (int m = 0; m < M; ++m)
                    for (int r = 0; r < K; ++r) {
                        const T a = wp[static_cast<size_t>(r) * M + m];
                        const T* grow = gp + static_cast<size_t>(r) * d;
                        T* gvrow = gvp + static_cast<size_t>(m) * d;
                        for (int j = 0; j < d; ++j) gvrow[j] += a * grow[j];
                    }
            }
            if (slot_q >= 0 || slot_k >= 0) {
                for (int r = 0; r < K; ++r)
                    for (int m = 0; m < M; ++m) {
                        const T* grow = gp + static_cast<size_t>(r) * d;
                        const T* vrow = vp + static_cast<size_t>(m) * d;
                        T acc = T(0);
                        for (int j = 0; j < d; ++j) acc += grow[j] * vrow[j];
                        dA[static_cast<size_t>(r) * M + m] = acc;
                    }
                for (int r = 0; r < K; ++r) {
                    const T* ar = wp + static_cast<size_t>(r) * M;
                    const T* dar = dA.data() + static_cast<size_t>(r) * M;
                    T dot = T(0);
                    for (int m = 0; m < M; ++m) dot += dar[m] * ar[m];
                    T* dsr = dS.data() + static_cast<size_t>(r) * M;
                    for (int m = 0; m < M; ++m) dsr[m] = ar[m] * (dar[m] - dot);
                }
                if (slot_q >= 0) {
                    T* gqp = pg[slot_q]->data() + static_cast<size_t>(n) * K * d;
                    for (int r = 0; r < K; ++r) {
                        T* gqrow = gqp + static_cast<size_t>(r) * d;
                        for (int m = 0; m < M; ++m) {
                            const T s = dS[static_cast<size_t>(r) * M + m];
                            const T* krow = kp + static_cast<size_t>(m) * d;
                            for (int j = 0; j < d; ++j) gqrow[j] += s * krow[j];
                        }
                    }
                }
                if (slot_k >= 0) {
                    T* gkp = pg[slot_k]->data() + static_cast<size_t>(n) * M * d;
                    for (int m = 0; m < M; ++m) {
                        T* gkrow = gkp + static_cast<size_t>(m) * d;
                        for (int r = 0; r < K; ++r) {
                            const T s = dS[static_cast<size_t>(r) * M + m];
                            const T* qrow = qp + static_cast<size_t>(r) * d;
                            for (int j = 0; j < d; ++j) gkrow[j] += s * qrow[j];
                        }
                    }
                }
            }
        }
    };
    result.attach(tape, tape->record("attend", result.numel(), std::move(parents), std::move(back)));
    return result;
}

// ---------------------------------------------------------------------------
// Soft intensity histogram with triangular bin assignment on values
// clipped to [0,1]. Output is (1,1,bins,1); each value contributes to at
// most two adjacent bins, keeping the op differentiable.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> soft_histogram(const Tensor<T>& x, int bins) {
    if (bins < 2) fail("bad-config", "soft_histogram needs at least 2 bins");
    const auto& xv = x.data();
    const T delta = T(1) / static_cast<T>(bins);
    std::vector<T> hist(bins, T(0));
    for (T raw : xv) {
        const T v = std::clamp(raw, T(0), T(1));
        for (int b = std::max(0, static_cast<int>(v * bins) - 1);
             b < std::min(bins, static_cast<int>(v * bins) + 2); ++b) {
            const T center = (static_cast<T>(b) + T(0.5)) * delta;
            const T w = T(1) - std::fabs(v - center) / delta;
            if (w > T(0)) hist[b] += w;
        }
    }
    Tensor<T> result = Tensor<T>::from_vector(Shape4{1, 1, bins, 1}, std::move(hist));
    if (Tape<T>* tape = detail::pick_tape(x)) {
        auto xd = x.data_ptr();
        auto back = [xd, bins, delta](const std::vector<T>& g,
                                      const std::vector<std::vector<T>*>& pg) {
            std::vector<T>& gx = *pg[0];
            for (size_t i = 0; i < xd->size(); ++i) {
                const T raw = (*xd)[i];
                if (raw < T(0) || raw > T(1)) continue;  // clipped region has zero slope
                const T v = raw;
                T acc = T(0);
                for (int b = std::max(0, static_cast<int>(v * bins) - 1);
                     b < std::min(bins, static_cast<int>(v * bins) + 2); ++b) {
                    const T center = (static_cast<T>(b) + T(0.5)) * delta;
                    const T dist = v - center;
                    if (std::fabs(dist) >= delta || dist == T(0)) continue;
                    acc += g[b] * (dist > T(0) ? T(-1) : T(1)) / delta;
                }
                gx[i] += acc;
            }
        };
        result.attach(tape, tape->record("soft_histogram", result.numel(), {x.node()}, back));
    }
    return result;
}

// Populates gradients of every tracked tensor reachable from the loss.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (!loss.tracked())
        fail("non-scalar-loss", "backward requires a loss recorded on a tape");
    loss.tape()->run_backward(loss);
}

}  // namespace derain
