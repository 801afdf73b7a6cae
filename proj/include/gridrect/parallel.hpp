#pragma once

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace gridrect {

/// Worker count: GRID_RECTIFY_THREADS when set to a positive integer, else the
/// hardware concurrency.
inline unsigned worker_count() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("GRID_RECTIFY_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v > 0) n = static_cast<unsigned>(v);
    } catch (const std::exception&) {
    }
  }
  return n;
}

/// Runs body(i) for i in [0, count) over a static interleaved partition. If any
/// calls throw, the exception from the lowest index is rethrown.
template <typename Body>
void parallel_for(std::size_t count, Body&& body) {
  const std::size_t workers = std::min<std::size_t>(worker_count(), count);
  std::vector<std::exception_ptr> errors(count);
  auto run = [&](std::size_t first) {
    for (std::size_t i = first; i < count; i += std::max<std::size_t>(workers, 1)) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace gridrect
