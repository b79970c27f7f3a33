#pragma once

#include <cstddef>

namespace advkit {

// Worker-count cap applied to every parallel loop in the library. Parallel
// loops only ever split independent output elements (each element is
// accumulated serially in a fixed order by exactly one thread), so results
// are bit-identical for every worker count.
void set_workers(int n);
int workers();

}  // namespace advkit
