#pragma once

#include <cstddef>
#include <functional>

namespace rsport {

// Index-addressed parallel loop. Every index writes only its own slot, so the
// result never depends on scheduling or on the thread count.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& body);

}  // namespace rsport
