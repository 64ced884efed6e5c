#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace l3d {

/// How operator kernels spread work over threads.
struct ExecPolicy {
  /// 0 selects default_thread_count().
  int threads = 0;
  /// Single worker, fixed accumulation order.
  bool deterministic = false;

  int resolved_threads() const;
};

/// L3D_THREADS if set and positive, else hardware concurrency (at least 1).
int default_thread_count();

/// Splits [0, n) into at most `workers` contiguous ranges and runs
/// body(worker, begin, end) on each, joining before return. Worker w always
/// receives the w-th range, so per-worker buffers can be reduced in order.
void parallel_ranges(std::size_t n, int workers,
                     const std::function<void(int, std::size_t, std::size_t)>& body);

}  // namespace l3d
