#pragma once

#include <cstdint>

namespace commlearn {

// Global cap on OpenMP worker threads. 1 runs everything on the calling
// thread, which is the serial reference path used by tests and benchmarks.
void set_max_threads(int n);
int max_threads();

namespace detail {
bool omp_enabled(std::int64_t n);
}

// Data-parallel loop over [0, n). Every iteration writes disjoint outputs and
// performs its own reductions serially, so the result is bit-identical to the
// serial path regardless of thread count.
template <class F>
void parallel_for(std::int64_t n, F&& f) {
  if (detail::omp_enabled(n)) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) f(i);
  } else {
    for (std::int64_t i = 0; i < n; ++i) f(i);
  }
}

// Scoped override of the thread cap; restores the previous value on exit.
class ThreadLimit {
 public:
  explicit ThreadLimit(int n) : prev_(max_threads()) { set_max_threads(n); }
  ~ThreadLimit() { set_max_threads(prev_); }
  ThreadLimit(const ThreadLimit&) = delete;
  ThreadLimit& operator=(const ThreadLimit&) = delete;

 private:
  int prev_;
};

}  // namespace commlearn
