#pragma once

#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace poseprior {

enum class ErrorCode {
  missing_file,  // a referenced path does not exist / cannot be opened
  schema,        // malformed JSON / unknown config keys / bad CSV header
  dimension,     // shape or length mismatch between components
  format,        // bad magic, truncated payload, checksum mismatch, record length
  numeric,       // non-finite values, diverged optimization
  domain,        // input outside an operation's mathematical domain
  logic,         // API misuse (e.g. gradient tape reuse)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

inline void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

/// Runs fn(begin, end) over contiguous chunks of [0, n). With threads <= 1
/// the whole range is processed inline. Chunk boundaries depend only on
/// (n, threads), so results written to per-index slots are reproducible.
inline void parallel_chunks(std::int64_t n, int threads,
                            const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (n <= 0) return;
  if (threads <= 1 || n == 1) {
    fn(0, n);
    return;
  }
  const std::int64_t nchunks = std::min<std::int64_t>(threads, n);
  const std::int64_t base = n / nchunks;
  const std::int64_t rem = n % nchunks;
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(nchunks));
  std::exception_ptr first_error;
  std::mutex err_mutex;
  std::int64_t begin = 0;
  for (std::int64_t c = 0; c < nchunks; ++c) {
    const std::int64_t len = base + (c < rem ? 1 : 0);
    const std::int64_t end = begin + len;
    pool.emplace_back([&, begin, end] {
      try {
        fn(begin, end);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
      }
    });
    begin = end;
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace poseprior
