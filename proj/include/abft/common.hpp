#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace abft {

// Error taxonomy, mapped to process exit codes by the CLI:
// ConfigError -> 2 (usage), DataError -> 3, ShapeError/ContractError -> 4.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline constexpr uint64_t kFnvOffset = 0xcbf29ce484222325ull;
inline constexpr uint64_t kFnvPrime = 0x100000001b3ull;

inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = kFnvOffset) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= kFnvPrime;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = kFnvOffset) {
    return fnv1a64(s.data(), s.size(), h);
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic seeded RNG. std::mt19937_64 has a standardized output
// sequence; all distributions are implemented here so the full stream is
// reproducible. Sub-streams are derived from the root seed by purpose name,
// e.g. rng.child("init"), so adding a consumer never perturbs the others.
class Rng {
  public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

    uint64_t seed() const { return seed_; }

    Rng child(std::string_view purpose) const {
        return Rng(splitmix64(seed_ ^ fnv1a64(purpose)));
    }

    uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform over {0, ..., n-1}; bias is O(n / 2^64)
    int uniform_int(int n) {
        if (n <= 0) throw ContractError("uniform_int: n must be positive");
        return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                                 static_cast<unsigned __int128>(n)) >> 64);
    }

    // standard normal via Box-Muller (one value per call, no cached state)
    double normal() {
        constexpr double two_pi = 6.283185307179586476925286766559;
        double u1 = 0.0;
        while (u1 == 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    template <class It>
    void shuffle(It first, It last) {
        auto n = static_cast<long>(last - first);
        for (long i = n - 1; i > 0; --i) {
            long j = uniform_int(static_cast<int>(i + 1));
            std::swap(first[i], first[j]);
        }
    }

  private:
    uint64_t seed_;
    std::mt19937_64 gen_;
};

// Shortest round-trip decimal formatting; keeps CSV artifacts byte-stable.
inline std::string format_value(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string format_value(long long v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string format_value(int v) { return format_value(static_cast<long long>(v)); }

}  // namespace abft
