#include "l3d/parallel.hpp"

#include <cstdlib>
#include <exception>
#include <string>

namespace l3d {

int default_thread_count() {
  if (const char* env = std::getenv("L3D_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::exception&) {
    }
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

int ExecPolicy::resolved_threads() const {
  if (deterministic) return 1;
  return threads > 0 ? threads : default_thread_count();
}

void parallel_ranges(std::size_t n, int workers,
                     const std::function<void(int, std::size_t, std::size_t)>& body) {
  if (n == 0) return;
  const auto w = static_cast<std::size_t>(std::clamp<std::size_t>(workers > 0 ? workers : 1, 1, n));
  if (w == 1) {
    body(0, 0, n);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(w);
  pool.reserve(w);
  for (std::size_t k = 0; k < w; ++k) {
    const std::size_t begin = n * k / w;
    const std::size_t end = n * (k + 1) / w;
    pool.emplace_back([&, k, begin, end] {
      try {
        body(static_cast<int>(k), begin, end);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace l3d
