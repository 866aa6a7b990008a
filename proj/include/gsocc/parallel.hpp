#pragma once

#include <cstddef>
#include <functional>

namespace gsocc {

// Worker count used by the parallel operators. Defaults to the GSOCC_THREADS
// environment variable, else the hardware concurrency.
int num_threads();
void set_num_threads(int n);

// Splits [0, n) into at most num_threads() contiguous ranges and runs
// fn(worker, begin, end) on each. Worker w always receives the w-th range, so
// merging per-worker results in worker order is deterministic for a fixed
// thread count.
void parallel_for(std::size_t n, const std::function<void(int, std::size_t, std::size_t)>& fn);

// Number of workers parallel_for will use for a range of size n.
int worker_count(std::size_t n);

}  // namespace gsocc
