#pragma once

#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mixcaps {

// Runs fn(0..n-1) across up to `threads` workers. Results must be written to
// per-index slots by the caller, which keeps aggregation deterministic no
// matter the schedule. The first exception is rethrown after all workers
// join.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    threads = std::min(threads, n);
    std::vector<std::thread> pool;
    std::mutex mu;
    std::exception_ptr first_error;
    int next = 0;
    for (int w = 0; w < threads; ++w) {
        pool.emplace_back([&] {
            for (;;) {
                int i;
                {
                    std::lock_guard<std::mutex> lock(mu);
                    if (next >= n || first_error) return;
                    i = next++;
                }
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(mu);
                    if (!first_error) first_error = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace mixcaps
