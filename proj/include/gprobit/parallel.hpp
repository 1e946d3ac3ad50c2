#pragma once

#include "common.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <string>
#include <thread>
#include <vector>

namespace gprobit {

/// Worker count: explicit value, else GPROBIT_THREADS, else the hardware.
inline unsigned resolve_threads(unsigned requested = 0) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("GPROBIT_THREADS")) {
        try {
            const long v = std::stol(env);
            if (v > 0) return static_cast<unsigned>(v);
        } catch (const std::exception&) {
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls f(i) for i in [0, n). Each index is handled by exactly one worker;
/// callers write into per-index slots and reduce afterwards in index order,
/// so results never depend on the worker count. The exception thrown for the
/// smallest failing index is rethrown.
template <class F>
void parallel_for(Index n, unsigned threads, F&& f) {
    if (n <= 0) return;
    const auto workers = static_cast<Index>(std::min<Index>(std::max(1u, threads), n));
    if (workers == 1) {
        for (Index i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(n));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (Index w = 0; w < workers; ++w) {
        const Index begin = n * w / workers;
        const Index end = n * (w + 1) / workers;
        pool.emplace_back([&, begin, end] {
            for (Index i = begin; i < end; ++i) {
                try {
                    f(i);
                } catch (...) {
                    errors[static_cast<std::size_t>(i)] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace gprobit
