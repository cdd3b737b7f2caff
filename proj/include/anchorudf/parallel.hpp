#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace audf {

inline int resolve_threads(int requested) {
    if (requested > 0) return requested;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

// Runs fn(block_index, begin, end) over [0, n) split into fixed-size blocks.
// Block boundaries depend only on n and block_size, never on the thread
// count, so callers that reduce per-block results in block order get
// bitwise-identical sums for any number of threads. fn must only write
// storage owned by its block.
inline void parallel_blocks(std::size_t n, std::size_t block_size,
                            const std::function<void(std::size_t, std::size_t, std::size_t)>& fn,
                            int threads = 0) {
    if (n == 0) return;
    if (block_size == 0) block_size = 1;
    const std::size_t n_blocks = (n + block_size - 1) / block_size;
    const int t = std::min<std::size_t>(resolve_threads(threads), n_blocks);
    if (t <= 1) {
        for (std::size_t b = 0; b < n_blocks; ++b)
            fn(b, b * block_size, std::min(n, (b + 1) * block_size));
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            std::size_t b = next.fetch_add(1);
            if (b >= n_blocks) break;
            fn(b, b * block_size, std::min(n, (b + 1) * block_size));
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(t);
    for (int i = 0; i < t; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
}

}  // namespace audf
