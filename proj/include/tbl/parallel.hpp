#pragma once

#include <cstddef>
#include <functional>

namespace tbl {

/// Number of worker threads used by parallel_for. Defaults to the hardware concurrency.
int thread_count();
void set_thread_count(int n);

/// Runs body(begin, end) over a static partition of [0, n) into at most thread_count()
/// contiguous chunks. Chunk boundaries depend on the thread count, so callers that need
/// thread-count independent results must write to per-index slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace tbl
