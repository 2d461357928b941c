#include "uvmb/parallel.hpp"

#include <thread>

namespace uvmb {

namespace {
int g_threads = 0;  // 0 = hardware default
}

void set_num_threads(int n) {
    g_threads = n < 0 ? 0 : n;
#ifdef _OPENMP
    if (g_threads > 0)
        omp_set_num_threads(g_threads);
    else
        omp_set_num_threads(static_cast<int>(std::thread::hardware_concurrency()));
#endif
}

int num_threads() {
    if (g_threads > 0) return g_threads;
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace uvmb
