// Shared utilities: error taxonomy, portable deterministic RNG, FNV hashing,
// and a small ordered parallel-for helper.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace worldfuse {

// ---------------------------------------------------------------------------
// Errors. Each failure class named by the contract it breaks.
// ---------------------------------------------------------------------------

struct error : std::runtime_error {
    explicit error(const std::string& what) : std::runtime_error(what) {}
};

struct dimension_error : error {
    using error::error;
};
// API misuse: non-scalar backward, update of frozen parameters, ...
struct contract_error : error {
    using error::error;
};
struct argument_error : error {
    using error::error;
};
// Action text that does not match the grammar (distinct from infeasible).
struct parse_error : error {
    using error::error;
};
struct generation_error : error {
    using error::error;
};
struct planning_error : error {
    using error::error;
};
struct training_error : error {
    using error::error;
};
struct config_error : error {
    using error::error;
};
struct length_error : error {
    using error::error;
};
struct io_error : error {
    using error::error;
};

// ---------------------------------------------------------------------------
// Hashing. FNV-1a 64: stable across platforms, used for state hashes, seed
// derivation and checkpoint digests.
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), seed);
}

inline uint64_t hash_mix(uint64_t a, uint64_t b) {
    unsigned char buf[16];
    std::memcpy(buf, &a, 8);
    std::memcpy(buf + 8, &b, 8);
    return fnv1a64(buf, 16);
}

inline std::string hex64(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Rng: splitmix64 core. Hand-rolled so that streams are identical on every
// platform (std::uniform_*_distribution is implementation-defined).
// ---------------------------------------------------------------------------

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n), n > 0
    int uniform_int(int n) {
        if (n <= 0) throw argument_error("uniform_int: n must be positive");
        return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
    }

    // Box-Muller; two fresh uniforms per draw keeps the stream stateless.
    double normal() {
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(static_cast<int>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Sample k distinct indices from [0, n), ascending order.
    std::vector<int> sample_without_replacement(int n, int k) {
        if (k < 0 || k > n) throw argument_error("sample_without_replacement: k out of range");
        std::vector<int> pool(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
        for (int i = 0; i < k; ++i) {
            int j = i + uniform_int(n - i);
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
        }
        pool.resize(static_cast<size_t>(k));
        std::sort(pool.begin(), pool.end());
        return pool;
    }

private:
    uint64_t state_;
};

// Derive an independent stream from a base seed and a tag.
inline uint64_t derive_seed(uint64_t base, std::string_view tag) {
    return hash_mix(base, fnv1a64(tag));
}
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0) {
    return hash_mix(hash_mix(base, a), b);
}

// ---------------------------------------------------------------------------
// parallel_for: runs fn(i) for i in [0, n). Work units must be independent;
// callers own result slots indexed by i, so the schedule cannot change output.
// ---------------------------------------------------------------------------

inline void parallel_for(size_t n, const std::function<void(size_t)>& fn, int n_threads = 0) {
    if (n == 0) return;
    unsigned hw = std::thread::hardware_concurrency();
    size_t t = n_threads > 0 ? static_cast<size_t>(n_threads) : (hw ? hw : 2);
    if (t > n) t = n;
    if (t <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    std::exception_ptr first_error;
    std::mutex err_mu;
    for (size_t w = 0; w < t; ++w) {
        workers.emplace_back([&, w]() {
            try {
                for (size_t i = w; i < n; i += t) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& th : workers) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace worldfuse
