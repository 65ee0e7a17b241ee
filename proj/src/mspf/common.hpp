#pragma once

// Shared plumbing: error taxonomy, deterministic RNG, runtime switches.

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mspf {

// ---------------------------------------------------------------------------
// Errors. Everything thrown by the library derives from Error so the C API
// can map exceptions onto status codes at the boundary.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Extent/layout violations (mismatched shapes, bad kernel sizes, ...).
class ShapeError : public Error {
public:
    using Error::Error;
};

// Math domain violations (sqrt of a negative, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

// API contract violations (non-scalar backward root, step = 0, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Autograd bookkeeping violations (root not recorded on the tape).
class TrackingError : public Error {
public:
    using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
public:
    using Error::Error;
};

// Invalid configuration (bad key, invariant violation at parse time).
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed file contents; carries the byte offset of the defect.
class FormatError : public Error {
public:
    FormatError(const std::string& what, size_t byte_offset)
        : Error(what + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    size_t offset;
};

// Filesystem-level failures (missing file, short write, ...).
class IoError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Finite-value checking. Off by default in optimized builds; the verification
// suites switch it on so every forward op asserts its output is finite.

inline std::atomic<bool>& finite_check_flag() {
#ifdef NDEBUG
    static std::atomic<bool> enabled{false};
#else
    static std::atomic<bool> enabled{true};
#endif
    return enabled;
}

inline void set_finite_checks(bool on) { finite_check_flag().store(on); }
inline bool finite_checks_enabled() { return finite_check_flag().load(); }

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core with explicit distributions so streams
// are bit-identical across platforms and standard-library versions.

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Inclusive integer range. Modulo bias is ~(hi-lo)/2^64, irrelevant here.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = uint64_t(hi - lo) + 1;
        return lo + int64_t(next_u64() % span);
    }

    // Box-Muller without caching so the draw count per call is fixed.
    double normal() {
        double u1 = (double((next_u64() >> 11) + 1)) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Normal(0, stddev) truncated to two standard deviations by resampling.
    double trunc_normal(double stddev) {
        double z = normal();
        while (std::fabs(z) > 2.0) z = normal();
        return z * stddev;
    }

    // Per-stream seed derivation: hash of (seed XOR stream * golden ratio).
    static uint64_t derive_stream(uint64_t seed, uint64_t stream) {
        uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

private:
    uint64_t state_;
};

// ---------------------------------------------------------------------------
// Worker-thread budget. MSPF_THREADS caps it; default is one worker, which
// keeps every code path on the deterministic reference ordering.

inline int thread_budget() {
    if (const char* env = std::getenv("MSPF_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}

// Deterministic index-chunked parallel loop. Results must be written to
// per-index slots; the aggregation order is up to the caller.
template <typename Fn>
void parallel_for(int64_t n, int threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int workers = int(std::min<int64_t>(threads, n));
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (int64_t i = w; i < n; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace mspf
