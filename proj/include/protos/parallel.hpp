#pragma once

#include <cstddef>
#include <functional>

namespace protos {

/// Worker count: `requested` if positive, else PROTOS_NUM_WORKERS, else the hardware concurrency.
int worker_count(int requested = 0);

/// Calls `body(i)` for every i in [0, n). Each index runs exactly once; callers write results into
/// per-index slots so reductions stay order-independent. The first exception (by index) is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body, int workers = 0);

}  // namespace protos
