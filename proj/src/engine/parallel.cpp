#include "mseg/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mseg {

namespace {

std::atomic<int> g_override{0};

int default_threads()
{
    if (const char* env = std::getenv("MSEG_THREADS")) {
        const int n = std::atoi(env);
        if (n > 0) {
            return n;
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

} // namespace

int thread_count()
{
    const int o = g_override.load();
    if (o > 0) {
        return o;
    }
    static const int n = default_threads();
    return n;
}

void set_thread_count(int n) { g_override.store(std::max(0, n)); }

void parallel_for(std::ptrdiff_t n, const std::function<void(std::ptrdiff_t)>& body)
{
    const int workers = static_cast<int>(std::min<std::ptrdiff_t>(thread_count(), n));
    if (workers <= 1) {
        for (std::ptrdiff_t i = 0; i < n; ++i) {
            body(i);
        }
        return;
    }
    std::atomic<std::ptrdiff_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&] {
        for (std::ptrdiff_t i = next++; i < n; i = next++) {
            try {
                body(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) {
                    failure = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers - 1));
    for (int w = 1; w < workers; ++w) {
        pool.emplace_back(run);
    }
    run();
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }
}

} // namespace mseg
