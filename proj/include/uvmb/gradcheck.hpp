#pragma once

#include <functional>
#include <string>
#include <vector>

#include "uvmb/autodiff.hpp"
#include "uvmb/tensor.hpp"

namespace uvmb {

struct GradCheckOptions {
    double eps = 1e-5;
    double tol = 1e-4;
    uint64_t seed = 0;
    // Per-input cap on how many elements to probe with finite differences;
    // -1 probes every element. Sampling is deterministic per seed.
    int64_t max_checks_per_input = -1;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    bool pass = false;
    std::string detail;
};

// Compares analytic gradients against central finite differences of a
// scalarized output. The output is scalarized through a fixed random
// projection so every output element participates. Relative error is
// |a - n| / max(1, |a|, |n|). Inputs should be 64-bit for reliable results.
template <typename T>
GradCheckReport grad_check(
    const std::function<Var<T>(Tape<T>&, std::vector<Var<T>>&)>& op_closure,
    const std::vector<Tensor<T>>& inputs, GradCheckOptions opt = {});

}  // namespace uvmb
