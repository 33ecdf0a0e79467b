#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>

namespace choir {

// Seed for one unit of work, independent of how work is scheduled.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

// Hardware concurrency (or `requested` when nonzero), capped by CHOIR_THREADS.
std::size_t thread_budget(std::size_t requested = 0);

// Runs fn(i) for every i in [0, n) on up to `threads` workers. If any call
// throws, the exception from the lowest index is rethrown after all workers
// finish.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace choir
