// Deterministic RNG used everywhere parameters or data are sampled.
//
// mt19937_64 drives everything; uniforms are derived from the top 53 bits so
// the stream is identical across standard libraries (std distributions are
// implementation-defined). Checkpoints tag this convention as
// "mt19937_64-u53".

#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace dehaze {

inline constexpr const char* kRngConvention = "mt19937_64-u53";

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        // Rejection-free modulo bias is negligible for the small n used here,
        // but stay exact anyway.
        const std::uint64_t limit = n * ((~std::uint64_t{0}) / n);
        std::uint64_t v;
        do {
            v = gen_();
        } while (v >= limit);
        return v % n;
    }

    // Derive an independent stream, e.g. per scene or per parameter group.
    Rng derive(std::uint64_t stream_id) const {
        std::mt19937_64 g = gen_;
        const std::uint64_t base = g();
        return Rng(base ^ (stream_id * 0x9E3779B97F4A7C15ull));
    }

    std::string state() const {
        std::ostringstream os;
        os << gen_;
        return os.str();
    }

    void restore(const std::string& s) {
        std::istringstream is(s);
        is >> gen_;
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace dehaze
