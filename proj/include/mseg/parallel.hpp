#pragma once

#include <cstddef>
#include <functional>

namespace mseg {

/// Worker cap: MSEG_THREADS if set and positive, else hardware concurrency.
int thread_count();

/// Overrides the worker cap for this process (0 restores the default).
void set_thread_count(int n);

/// Runs body(i) for i in [0, n). Callers must only write disjoint outputs
/// per index; results are then independent of the worker count.
void parallel_for(std::ptrdiff_t n, const std::function<void(std::ptrdiff_t)>& body);

} // namespace mseg
