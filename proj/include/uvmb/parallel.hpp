#pragma once

#include <cstdint>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace uvmb {

// 0 restores the hardware default.
void set_num_threads(int n);
int num_threads();

// Static partition of [0, n) over worker threads. Every index is written by
// exactly one thread and bodies must only write locations derived from their
// own index, so results are identical for any thread count.
template <typename F>
void parallel_for(int64_t n, F&& fn) {
#ifdef _OPENMP
    if (n > 1 && num_threads() > 1) {
#pragma omp parallel for schedule(static)
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
#endif
    for (int64_t i = 0; i < n; ++i) fn(i);
}

}  // namespace uvmb
