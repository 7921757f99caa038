#pragma once

#include <algorithm>
#include <cstdint>
#include <exception>
#include <thread>
#include <vector>

namespace dcn2 {

/// Threading knobs for the optimized kernels.
///
/// With `deterministic` set, every reduction runs in a fixed order that does
/// not depend on `threads`, so results are bit-identical across thread counts.
/// Clearing it lets backward passes scatter into shared gradient buffers with
/// atomic adds; results then agree with the ordered path to about 1e-4.
struct Execution {
  int threads = 1;
  bool deterministic = true;

  /// Reads DCN2_THREADS; falls back to 1 when unset or malformed.
  static Execution from_env();
};

/// Runs fn(begin, end) over contiguous sub-ranges of [begin, end) on up to
/// `threads` workers. The first exception thrown by a worker is rethrown.
template <typename Fn>
void parallel_for(const Execution& exec, std::int64_t begin, std::int64_t end, Fn&& fn) {
  const std::int64_t total = end - begin;
  if (total <= 0) return;
  const std::int64_t workers = std::clamp<std::int64_t>(exec.threads, 1, total);
  if (workers == 1) {
    fn(begin, end);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  pool.reserve(static_cast<std::size_t>(workers));
  for (std::int64_t t = 0; t < workers; ++t) {
    const std::int64_t lo = begin + total * t / workers;
    const std::int64_t hi = begin + total * (t + 1) / workers;
    pool.emplace_back([&, t, lo, hi] {
      try {
        fn(lo, hi);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace dcn2
