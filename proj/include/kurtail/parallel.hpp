#pragma once

#include <cstddef>
#include <functional>

namespace kurtail {

// Worker count from KURTAIL_THREADS, else hardware concurrency (min 1).
std::size_t worker_count();

// Runs fn(i) for i in [0, n) on up to worker_count() threads.
//
// Each index is executed exactly once; callers write results into
// index-addressed slots and reduce afterwards in index order, so results do
// not depend on the number of workers. The first exception thrown by any
// item is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace kurtail
