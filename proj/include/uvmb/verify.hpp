#pragma once

#include <string>
#include <vector>

#include "uvmb/model.hpp"

namespace uvmb {

struct PropertyResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

// Gradient suite: finite-difference checks (64-bit, eps 1e-5, tol 1e-4,
// 10 seeds per op) for every differentiable op. With inject_backward_bug a
// deliberately mis-scaled backward is added; the suite must then fail with
// max_rel_err around 0.5, which exercises the checker's detection power.
std::vector<PropertyResult> verify_grad(bool inject_backward_bug = false);

// Scan-order suite: bijections and reversal for all H,W <= 16, bit-exact
// permute round-trips, aggregation order consistency, and equivalence of the
// fused directional aggregate with the permute/scan/unpermute composition.
std::vector<PropertyResult> verify_scan();

// Discretization suite: recurrence vs 4th-order ODE integration on
// piecewise-constant inputs (50 draws, 1e-6), strict impulse-response decay,
// Taylor-branch continuity, and discrete-factor range checks.
std::vector<PropertyResult> verify_zoh();

// Deformable suite: reduction to a direct-loop grouped convolution, exact
// linearity in the modulation, zero-modulation and out-of-image behavior.
std::vector<PropertyResult> verify_deform();

std::vector<PropertyResult> verify_all();

// Per-parameter-tensor sampled finite-difference check of a full model
// against tape gradients. Used by the end-to-end model invariant.
struct ModelGradCheckReport {
    double max_rel_err = 0;
    bool pass = false;
};
ModelGradCheckReport model_grad_check(const ModelConfig& cfg, int H, int W, uint64_t seed,
                                      int64_t samples_per_tensor, double eps, double tol);

// Prints one PASS/FAIL line per property; returns true when all pass.
bool report_properties(const std::vector<PropertyResult>& results);

}  // namespace uvmb
