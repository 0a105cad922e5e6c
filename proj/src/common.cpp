#include "qnerf/common.hpp"

#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <thread>

namespace qnerf {

namespace {
std::atomic<int> g_thread_count{0};
}

void set_thread_count(int n) {
  if (n < 0) throw ConfigError("thread count must be >= 0");
  g_thread_count.store(n);
}

int thread_count() {
  int n = g_thread_count.load();
  if (n == 0) {
    unsigned hw = std::thread::hardware_concurrency();
    n = hw == 0 ? 1 : static_cast<int>(hw);
  }
  return n;
}

void parallel_ranges(int n, int block_size,
                     const std::function<void(int, int)>& fn) {
  if (n <= 0) return;
  if (block_size < 1) block_size = 1;
  const int blocks = (n + block_size - 1) / block_size;
  const int workers = std::min(thread_count(), blocks);
  if (workers <= 1) {
    for (int b = 0; b < blocks; ++b) {
      int begin = b * block_size;
      fn(begin, std::min(n, begin + block_size));
    }
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto work = [&]() {
    for (;;) {
      int b = next.fetch_add(1);
      if (b >= blocks || failed.load()) return;
      int begin = b * block_size;
      try {
        fn(begin, std::min(n, begin + block_size));
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (int w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failed.load() && error) std::rethrow_exception(error);
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) return "nan";
  return std::string(buf, ptr);
}

std::string format_double(double v, int precision) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v,
                                 std::chars_format::general, precision);
  if (ec != std::errc()) return "nan";
  return std::string(buf, ptr);
}

}  // namespace qnerf
