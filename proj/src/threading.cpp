#include "difct/common.hpp"

#include <algorithm>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

#ifdef DIFCT_WITH_OPENBLAS
extern "C" void openblas_set_num_threads(int);
#endif

namespace difct {

namespace {
int resolve_default() {
    if (const char* env = std::getenv("DIFCT_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

int g_max_threads = 0;  // 0 = not yet resolved
}  // namespace

void set_max_threads(int n) {
    g_max_threads = std::max(1, n);
#ifdef _OPENMP
    omp_set_num_threads(g_max_threads);
#endif
#ifdef DIFCT_WITH_OPENBLAS
    openblas_set_num_threads(g_max_threads);
#endif
}

int max_threads() {
    if (g_max_threads == 0) set_max_threads(resolve_default());
    return g_max_threads;
}

}  // namespace difct
