#include "fptn/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string_view>
#include <thread>
#include <vector>

namespace fptn {

namespace {

bool env_deterministic() {
  const char* v = std::getenv("FPTN_DETERMINISTIC");
  return v != nullptr && std::string_view(v) == "1";
}

std::atomic<bool>& deterministic_flag() {
  static std::atomic<bool> flag{env_deterministic()};
  return flag;
}

constexpr std::size_t kMinWorkPerThread = 1u << 18;

}  // namespace

void set_deterministic(bool on) { deterministic_flag().store(on); }

bool deterministic() { return deterministic_flag().load(); }

std::size_t worker_count() {
  if (deterministic()) return 1;
  // hardware_concurrency reads sysfs on every call.
  static const std::size_t cores = std::max(1u, std::thread::hardware_concurrency());
  return cores;
}

void parallel_for(std::size_t n, std::size_t work_per_item,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  if (n == 0) return;
  const std::size_t total = n * std::max<std::size_t>(work_per_item, 1);
  std::size_t workers = std::min(worker_count(), n);
  workers = std::min(workers, std::max<std::size_t>(1, total / kMinWorkPerThread));
  if (workers <= 1) {
    body(0, n);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    threads.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(0, std::min(n, chunk));
  for (auto& t : threads) t.join();
}

}  // namespace fptn
