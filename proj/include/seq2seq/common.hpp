#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace seq2seq {

using TokenIds = std::vector<std::uint32_t>;

/// Token-id sequence with its provenance, the common currency of the data
/// pipeline. Model-level code operates on the bare `ids`.
struct TokenSequence {
  TokenIds ids;
  std::string language;
  double source_weight = 1.0;
};

/// Raised for invalid configuration (bad key, bad value, inconsistent
/// settings). The CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised for missing or unreadable files. The CLI maps this to exit code 3.
struct FileError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// The special vocabulary entries every stage of the pipeline relies on.
struct SpecialTokens {
  std::uint32_t pad = 0;
  std::uint32_t bos = 1;
  std::uint32_t eos = 2;
  std::uint32_t clm = 3;
  std::uint32_t doc = 4;
};

inline constexpr std::size_t kSpecialCount = 5;

/// Worker cap: SEQ2SEQ_LAB_THREADS if set, otherwise hardware concurrency.
inline unsigned worker_count() {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (const char* env = std::getenv("SEQ2SEQ_LAB_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v >= 1 && static_cast<unsigned>(v) < hw) return static_cast<unsigned>(v);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return hw;
}

/// Index-sharded parallel loop. Results must be written to disjoint,
/// index-addressed slots so the outcome is independent of thread count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  unsigned workers = worker_count();
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  if (workers > n) workers = static_cast<unsigned>(n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) body(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace seq2seq
