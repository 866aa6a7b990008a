#include "gsocc/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace gsocc {
namespace {

int default_threads() {
  if (const char* env = std::getenv("GSOCC_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n >= 1) return n;
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::atomic<int>& thread_setting() {
  static std::atomic<int> n{default_threads()};
  return n;
}

constexpr std::size_t kMinItemsPerWorker = 64;

}  // namespace

int num_threads() { return thread_setting().load(); }

void set_num_threads(int n) { thread_setting().store(std::max(1, n)); }

int worker_count(std::size_t n) {
  const std::size_t by_size = std::max<std::size_t>(1, n / kMinItemsPerWorker);
  return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(num_threads()), by_size));
}

void parallel_for(std::size_t n, const std::function<void(int, std::size_t, std::size_t)>& fn) {
  const int workers = worker_count(n);
  if (workers <= 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    const std::size_t begin = n * w / workers;
    const std::size_t end = n * (w + 1) / workers;
    pool.emplace_back([&, w, begin, end] {
      try {
        fn(w, begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace gsocc
