#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "derain/common.hpp"
#include "derain/rng.hpp"
#include "derain/tensor.hpp"

namespace derain {

// A named learnable buffer. The value vector is swapped between training
// steps by the optimizer; forward passes wrap it in leaf tensors.
template <typename T>
struct Param {
    std::string name;
    Shape4 shape;
    std::shared_ptr<std::vector<T>> value;
};

template <typename T>
using ParamPtr = std::shared_ptr<Param<T>>;

// Registry keyed by dotted names in registration order; the order defines
// checkpoint layout.
template <typename T>
class ParamStore {
public:
    ParamPtr<T> create(const std::string& name, Shape4 shape) {
        if (by_name_.count(name)) fail("duplicate-param", name);
        auto p = std::make_shared<Param<T>>(
            Param<T>{name, shape,
                     std::make_shared<std::vector<T>>(shape.numel(), T(0))});
        list_.push_back(p);
        by_name_[name] = p;
        return p;
    }

    ParamPtr<T> find(const std::string& name) const {
        auto it = by_name_.find(name);
        return it == by_name_.end() ? nullptr : it->second;
    }

    const std::vector<ParamPtr<T>>& all() const { return list_; }

    long long total_count() const {
        long long n = 0;
        for (const auto& p : list_) n += p->shape.numel();
        return n;
    }

private:
    std::vector<ParamPtr<T>> list_;
    std::map<std::string, ParamPtr<T>> by_name_;
};

// Fan-in scaled normal init for a conv kernel (cout, cin, kh, kw), with
// the gain used for leaky-relu slope 0.2.
template <typename T>
void kaiming_init(Param<T>& p, Rng& rng) {
    const Shape4 s = p.shape;
    const double fan_in = static_cast<double>(s.c) * s.h * s.w;
    const double stddev = std::sqrt(2.0 / (1.0 + 0.04) / fan_in);
    for (auto& v : *p.value) v = static_cast<T>(rng.normal() * stddev);
}

// Binds params to leaf tensors on one tape for the duration of a forward
// pass; without a tape, params appear as untracked constants. Each param
// maps to a single leaf so gradients accumulate across repeated use.
template <typename T>
class ForwardContext {
public:
    explicit ForwardContext(Tape<T>* tape) : tape_(tape) {}

    Tensor<T> use(const ParamPtr<T>& p) {
        if (!p) fail("bad-config", "forward touched a parameter that was never created");
        auto it = bound_.find(p.get());
        if (it != bound_.end()) return it->second;
        Tensor<T> t =
            tape_ ? Tensor<T>::leaf(*tape_, p->shape, p->value, true)
                  : Tensor<T>::from_vector(p->shape, std::vector<T>(*p->value));
        bound_.emplace(p.get(), t);
        return t;
    }

    Tape<T>* tape() const { return tape_; }

    bool training() const { return tape_ != nullptr; }

    // Gradient of a bound param after backward; zeros if it never ran.
    std::vector<T> grad(const ParamPtr<T>& p) const {
        auto it = bound_.find(p.get());
        if (it == bound_.end() || !tape_) return std::vector<T>(p->shape.numel(), T(0));
        return tape_->grad(it->second);
    }

private:
    Tape<T>* tape_;
    std::map<const Param<T>*, Tensor<T>> bound_;
};

}  // namespace derain
