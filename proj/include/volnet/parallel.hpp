#ifndef VOLNET_PARALLEL_HPP
#define VOLNET_PARALLEL_HPP

#include <cstddef>
#include <functional>

namespace volnet {

// Worker cap, read once from VOLNET_THREADS (default 1). Results never depend
// on it: work items write disjoint outputs and reductions run in index order.
int thread_count();
void set_thread_count(int threads);

// Runs fn(i) for i in [0, n), statically partitioned over thread_count() workers.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace volnet

#endif  // VOLNET_PARALLEL_HPP
