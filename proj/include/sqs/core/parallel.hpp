#pragma once

#include <cstddef>
#include <functional>

namespace sqs {

// Worker cap for parallel_for. Values < 1 are treated as 1.
void set_num_threads(int n);
int num_threads();

// Runs body(i) for i in [0, count). Work is split into contiguous static
// chunks. Callers must make every body(i) write disjoint memory; results are
// then independent of the thread count.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& body);

} // namespace sqs
