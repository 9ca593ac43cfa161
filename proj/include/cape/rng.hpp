#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace cape {

// All randomness flows from one 64-bit seed. Named substreams (init,
// shuffle, sampling, ...) are derived by hashing the name into the seed,
// so perturbing one stream leaves the others untouched. Doubles are
// produced from raw mt19937_64 output directly; std::* distributions are
// avoided because their sequences are implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    static Rng substream(std::uint64_t seed, std::string_view name) {
        // FNV-1a over the name, then splitmix64 finalization with the seed
        std::uint64_t h = 1469598103934665603ull;
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ull + h;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return Rng(z ^ (z >> 31));
    }

    std::uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    long randint(long lo, long hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<long>(engine_() % span);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(randint(0, static_cast<long>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace cape
