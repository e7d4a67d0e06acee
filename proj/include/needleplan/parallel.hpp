#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace needleplan {

/// Number of workers used when a caller passes 0.
inline unsigned default_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

/// Runs fn(begin, end) over [0, n) split into `workers` contiguous chunks.
/// Chunk boundaries depend only on n and workers; callers that write results
/// by index therefore get identical output for any worker count. If several
/// chunks throw, the exception of the lowest chunk is rethrown.
template <class Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
  if (workers == 0) workers = default_workers();
  if (n == 0) return;
  const std::size_t chunks = std::min<std::size_t>(workers, n);
  if (chunks <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  const std::size_t step = (n + chunks - 1) / chunks;
  std::vector<std::exception_ptr> errors(chunks);
  std::vector<std::thread> threads;
  threads.reserve(chunks);
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t begin = std::min(n, c * step);
    const std::size_t end = std::min(n, begin + step);
    threads.emplace_back([&, c, begin, end] {
      try {
        if (begin < end) fn(begin, end);
      } catch (...) {
        errors[c] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace needleplan
