#pragma once

#include <cmath>

#include "uvmb/autodiff.hpp"
#include "uvmb/gradcheck.hpp"
#include "uvmb/rng.hpp"
#include "uvmb/tensor.hpp"

namespace tu {

using uvmb::Rng;
using uvmb::Shape;
using uvmb::Tape;
using uvmb::Tensor;
using uvmb::Var;

inline Tensor<double> randt(Rng& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(s));
    rng.fill_uniform(t, lo, hi);
    return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    REQUIRE(a.same_shape(b));
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    return m;
}

template <typename T>
Var<T> leaf(const Tensor<T>& t, bool grad = false) {
    return Var<T>::leaf(t, grad);
}

// Shorthand: gradient check must pass at the default 1e-4 tolerance.
inline void expect_grad_ok(
    const std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>& fn,
    const std::vector<Tensor<double>>& inputs, uint64_t seed = 0) {
    uvmb::GradCheckOptions opt;
    opt.seed = seed;
    const uvmb::GradCheckReport rep = uvmb::grad_check<double>(fn, inputs, opt);
    INFO(rep.detail);
    CHECK(rep.pass);
}

}  // namespace tu
