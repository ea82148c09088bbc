#pragma once

#include <cstddef>
#include <functional>

namespace fptn {

// Worker count used by the dense kernels. FPTN_DETERMINISTIC=1 in the
// environment pins this to 1; set_deterministic() does the same in-process.
// Every kernel partitions work by output row, so results are bitwise
// identical for any thread count; deterministic mode exists for
// reproducibility tests and for profiling without scheduler noise.
std::size_t worker_count();
void set_deterministic(bool on);
bool deterministic();

// Calls body(begin, end) over a partition of [0, n). Runs inline when the
// estimated work is small or only one worker is available.
void parallel_for(std::size_t n, std::size_t work_per_item,
                  const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace fptn
