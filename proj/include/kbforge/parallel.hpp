#pragma once

#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace kbforge {

// Worker count from KBIR_FORGE_THREADS, defaulting to 1; never affects output
// bytes, only wall-clock time.
inline unsigned env_thread_count() {
    const char* v = std::getenv("KBIR_FORGE_THREADS");
    if (!v || !*v) {
        return 1;
    }
    char* end = nullptr;
    long n = std::strtol(v, &end, 10);
    if (end == v || *end != '\0' || n < 1) {
        return 1;
    }
    return static_cast<unsigned>(n > 64 ? 64 : n);
}

// Applies f to every item and returns results in input order regardless of
// the worker count. f must be safe to call concurrently on distinct items.
template <class T, class F>
auto ordered_parallel_map(const std::vector<T>& items, unsigned threads, F&& f)
    -> std::vector<decltype(f(items[std::size_t{0}]))> {
    using R = decltype(f(items[std::size_t{0}]));
    std::vector<R> out(items.size());
    if (threads <= 1 || items.size() <= 1) {
        for (std::size_t i = 0; i < items.size(); ++i) {
            out[i] = f(items[i]);
        }
        return out;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mu;
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= items.size()) {
                return;
            }
            try {
                out[i] = f(items[i]);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!first_error) {
                    first_error = std::current_exception();
                }
                return;
            }
        }
    };
    unsigned n = threads < items.size() ? threads : static_cast<unsigned>(items.size());
    std::vector<std::thread> pool;
    pool.reserve(n);
    for (unsigned t = 0; t < n; ++t) {
        pool.emplace_back(worker);
    }
    for (auto& th : pool) {
        th.join();
    }
    if (first_error) {
        std::rethrow_exception(first_error);
    }
    return out;
}

}  // namespace kbforge
