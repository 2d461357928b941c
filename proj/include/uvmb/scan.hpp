#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uvmb/autodiff.hpp"
#include "uvmb/tensor.hpp"

namespace uvmb::scan {

enum class Direction { horizontal, vertical, diagonal, antidiagonal };

const char* direction_name(Direction d);

// A bijective traversal order of the H x W grid. perm[k] is the row-major
// index of the cell visited at step k. Backward orders are the elementwise
// reverse of their forward counterparts.
struct ScanOrder {
    Direction direction;
    bool backward = false;
    int H = 0, W = 0;
    std::vector<int64_t> perm;
};

// Conventions:
//   horizontal forward    row-major
//   vertical forward      column-major
//   antidiagonal forward  ascending (r+c), ties by ascending r
//   diagonal forward      ascending (r-c+W-1), ties by ascending r
ScanOrder scan_order(Direction dir, bool backward, int H, int W);

// All 8 orders in the fixed aggregation sequence: horizontal, vertical,
// diagonal, antidiagonal, each forward then backward.
std::vector<ScanOrder> all_scan_orders(int H, int W);

// Gather token rows by the order (or by its inverse). x is [L,D] or [B,L,D].
// permute_tokens(permute_tokens(x, o, false), o, true) == x exactly.
template <typename T>
Var<T> permute_tokens(Tape<T>& tape, const Var<T>& x, const ScanOrder& order, bool inverse);

// Directional-scan aggregation with shared parameters: discretize once
// (the per-token discretization commutes with token permutation), run the
// recurrence along each selected direction, scatter results back and average.
//   A [D,N] (<0), delta [B,L,D] (>0), Bm [B,L,N], Cm [B,L,N], x [B,L,D]
// Returns [B,L,D]. dir_mask selects directions by bit in the all_scan_orders
// sequence; mean divides by the number of selected directions.
template <typename T>
Var<T> multi_scan_aggregate(Tape<T>& tape, const Var<T>& A, const Var<T>& delta,
                            const Var<T>& Bm, const Var<T>& Cm, const Var<T>& x, int H, int W,
                            uint8_t dir_mask = 0xFF, bool mean = true);

}  // namespace uvmb::scan
