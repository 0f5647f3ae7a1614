#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

#include "skd/common.hpp"

namespace skd {

// Worker cap: SKD_THREADS env var, else hardware concurrency.
inline index_t worker_count() {
  static const index_t n = [] {
    if (const char* env = std::getenv("SKD_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<index_t>(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return static_cast<index_t>(hc > 0 ? hc : 1);
  }();
  return n;
}

// Run f(chunk_index, begin, end) over fixed [begin,end) chunks of `count`
// items. Chunk boundaries depend only on chunk_size, so callers that merge
// per-chunk results in chunk order get the same answer for any worker count.
template <typename F>
void parallel_chunks(index_t count, index_t chunk_size, F&& f) {
  if (count == 0) return;
  const index_t nchunks = (count + chunk_size - 1) / chunk_size;
  const index_t workers = std::min<index_t>(worker_count(), nchunks);
  if (workers <= 1) {
    for (index_t ci = 0; ci < nchunks; ++ci)
      f(ci, ci * chunk_size, std::min(count, (ci + 1) * chunk_size));
    return;
  }
  std::atomic<index_t> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto run = [&] {
    for (;;) {
      const index_t ci = next.fetch_add(1);
      if (ci >= nchunks || failed.load()) return;
      try {
        f(ci, ci * chunk_size, std::min(count, (ci + 1) * chunk_size));
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  threads.reserve(workers - 1);
  for (index_t w = 0; w + 1 < workers; ++w) threads.emplace_back(run);
  run();
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace skd
