#pragma once

#include <cstddef>
#include <functional>

namespace msholo {

// Worker count used by parallel_for; 1 means run inline on the caller.
void set_thread_count(int count);
int thread_count();

// Calls fn(i) for i in [0, n). Iterations must write disjoint outputs; any
// reduction over them is done by the caller in index order, which keeps
// results independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace msholo
