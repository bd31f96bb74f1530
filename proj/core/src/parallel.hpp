#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace taskvec::detail {

// Strided fan-out of fn(0..n-1); each index should write only its own slot.
// The first exception (by thread) is rethrown after all threads join.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t tid = 0; tid < threads; ++tid)
    pool.emplace_back([&, tid] {
      try {
        for (std::size_t i = tid; i < n; i += threads) fn(i);
      } catch (...) {
        errors[tid] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace taskvec::detail
