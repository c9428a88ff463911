#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>

namespace msmm {

/// Worker count: MSMM_THREADS when set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t default_thread_count();

/// Runs task(i) for i in [0, count) on up to `threads` workers. Tasks write
/// their own output slot, so results never depend on scheduling. The first
/// exception thrown by a task is rethrown after all workers join.
void parallel_for(std::size_t count, std::size_t threads,
                  const std::function<void(std::size_t)>& task);

/// Independent generator for stream `index` under `seed`.
std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t index);

}  // namespace msmm
