#pragma once

/// Deterministic data parallelism.
///
/// Work is split into contiguous index blocks, one per worker, and all
/// cross-item reductions in this library are performed sequentially after
/// the parallel region.  Together with counter-based random draws this makes
/// every result byte-identical for any thread count, including 1.

#include <cstdint>
#include <functional>

namespace swlp {

/// Worker count: the SWLP_THREADS environment variable when set to a
/// positive integer, otherwise the hardware concurrency (at least 1).
int recommended_threads();

/// Runs body(i) for i in [0, n).  Exceptions thrown by workers are
/// captured and the first one is rethrown on the calling thread.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& body);

}  // namespace swlp
