#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

namespace shjb {

// Philox4x32-10 keyed by a 64-bit seed; every draw is a pure function of
// (seed, a, b) so generation order never matters.
class CounterRng {
public:
    explicit constexpr CounterRng(std::uint64_t seed) noexcept : seed_(seed) {}

    [[nodiscard]] std::array<std::uint32_t, 4> block(std::uint64_t a, std::uint64_t b) const noexcept {
        std::array<std::uint32_t, 4> ctr{lo(a), hi(a), lo(b), hi(b)};
        std::uint32_t k0 = lo(seed_);
        std::uint32_t k1 = hi(seed_);
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
            const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
            ctr = {hi(p1) ^ ctr[1] ^ k0, lo(p1), hi(p0) ^ ctr[3] ^ k1, lo(p0)};
            k0 += kWeyl0;
            k1 += kWeyl1;
        }
        return ctr;
    }

    // Uniform on the open interval (0,1).
    [[nodiscard]] double uniform(std::uint64_t a, std::uint64_t b) const noexcept {
        const auto r = block(a, b);
        return to_unit(r[0], r[1]);
    }

    [[nodiscard]] double normal(std::uint64_t a, std::uint64_t b) const noexcept {
        const auto r = block(a, b);
        const double u1 = to_unit(r[0], r[1]);
        const double u2 = to_unit(r[2], r[3]);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

private:
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    static constexpr std::uint32_t lo(std::uint64_t v) noexcept { return static_cast<std::uint32_t>(v); }
    static constexpr std::uint32_t hi(std::uint64_t v) noexcept { return static_cast<std::uint32_t>(v >> 32); }

    static double to_unit(std::uint32_t a, std::uint32_t b) noexcept {
        const std::uint64_t bits = ((std::uint64_t{a} << 32) | b) >> 11;
        return (static_cast<double>(bits) + 0.5) * 0x1.0p-53;
    }

    std::uint64_t seed_;
};

// splitmix64 finaliser, used to derive child seeds.
[[nodiscard]] constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

[[nodiscard]] constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
    return mix_seed(mix_seed(seed ^ mix_seed(a)) ^ mix_seed(b + 0x632BE59BD9B4E019ull));
}

}  // namespace shjb
