#pragma once

#include <cstddef>
#include <functional>

namespace evolve {

// Worker count: EVOLVE_THREADS when set (>= 1), else hardware concurrency.
std::size_t thread_budget();

// Calls fn(i) for i in [0, n) across up to thread_budget() threads. Each index runs
// exactly once; callers write results by index so output order never depends on
// scheduling. The first exception thrown by any task is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace evolve
