#pragma once

#include <utility>
#include <vector>

#include "uvmb/autodiff.hpp"
#include "uvmb/tensor.hpp"

namespace uvmb::deform {

// Fixed sampling grid for K points: the (2h+1) x (2h+1) square centered at
// the output location, row-major, where K = (2h+1)^2. K=9 gives the usual
// 3x3 neighborhood, K=1 the center tap alone.
std::vector<std::pair<int, int>> sampling_grid(int K);

// Deformable aggregation with grouped projection:
//   per output location p0 and group g:
//     s_g(p0) = sum_k m[g,k](p0) * sample(x_g, p0 + p_k + dp[g,k](p0))
//     y_g(p0) = w_g . s_g(p0)
// Sampling is bilinear with the zero-padding convention; modulation is
// unnormalized, so the output is exactly linear in m. Differentiable in x,
// offsets, modulation and wg.
//   x [B,C,H,W], offsets [B,2*G*K,H,W] as (dr,dc) per (g,k),
//   modulation [B,G*K,H,W], wg [G,Cg,Cg] with Cg = C/G. Output [B,C,H,W].
template <typename T>
Var<T> dcn_aggregate(Tape<T>& tape, const Var<T>& x, const Var<T>& offsets,
                     const Var<T>& modulation, const Var<T>& wg, int G, int K);

}  // namespace uvmb::deform
