#pragma once

#include <cstddef>
#include <functional>

namespace hoi {

// Worker cap: HOI_IDIFF_THREADS if set and positive, else hardware concurrency.
std::size_t worker_count();

// Runs task(i) for i in [0, n). Tasks must write to disjoint outputs; callers
// merge results in index order so outcomes never depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& task);

}  // namespace hoi
