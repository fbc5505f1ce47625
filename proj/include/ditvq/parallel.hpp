#pragma once

#include <cstddef>
#include <functional>

namespace ditvq {

/// Cap on worker threads used by parallel_for. 0 means hardware concurrency.
void set_max_threads(std::size_t n);
std::size_t max_threads();

/// Split [0, n) into contiguous chunks whose sizes are multiples of `granule`
/// (except the last) and run fn(begin, end) on each. Chunk boundaries depend
/// only on n, granule and the thread cap, so per-chunk work stays reproducible.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn,
                  std::size_t granule = 1);

}  // namespace ditvq
