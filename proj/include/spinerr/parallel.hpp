#pragma once

// Deterministic block-parallel execution. Work is split into fixed-size
// blocks whose boundaries depend only on the item count; each block writes
// its own result slot and callers combine slots in block order. Output is
// therefore identical for any worker count.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string_view>
#include <thread>
#include <vector>

namespace spinerr {

inline constexpr std::size_t kBlockSize = 4096;
inline constexpr const char* kThreadsEnvVar = "SPINERR_THREADS";

/// Worker count: explicit request, else $SPINERR_THREADS, else hardware concurrency.
[[nodiscard]] inline unsigned resolve_threads(unsigned requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv(kThreadsEnvVar)) {
    std::string_view text(env);
    unsigned value = 0;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec == std::errc() && ptr == text.data() + text.size() && value > 0) return value;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

[[nodiscard]] inline std::size_t block_count(std::size_t n_items) {
  return (n_items + kBlockSize - 1) / kBlockSize;
}

/// Calls fn(block, begin, end) once per block, spread over `threads` workers.
template <class BlockFn>
void for_each_block(std::size_t n_items, unsigned threads, BlockFn&& fn) {
  const std::size_t blocks = block_count(n_items);
  const unsigned workers =
      static_cast<unsigned>(std::min<std::size_t>(resolve_threads(threads), std::max<std::size_t>(blocks, 1)));

  auto run_block = [&](std::size_t b) {
    const std::size_t begin = b * kBlockSize;
    fn(b, begin, std::min(begin + kBlockSize, n_items));
  };

  if (workers <= 1) {
    for (std::size_t b = 0; b < blocks; ++b) run_block(b);
    return;
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        try {
          for (std::size_t b = next++; b < blocks; b = next++) run_block(b);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace spinerr
