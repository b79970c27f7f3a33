#include "advkit/parallel.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace advkit {

namespace {
int g_workers = 0;  // 0 = library default (all hardware threads)
}

void set_workers(int n) { g_workers = n > 0 ? n : 0; }

int workers() {
#ifdef _OPENMP
  return g_workers > 0 ? g_workers : omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace advkit
