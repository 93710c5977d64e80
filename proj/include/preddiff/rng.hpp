#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace preddiff {

// Philox4x32-10 counter-based generator (Salmon et al., "Parallel random
// numbers: as easy as 1, 2, 3", SC'11). A stream is identified by
// (seed, domain, stream_id); the 128-bit counter is advanced block by block.
// Streams are cheap to construct, stateless across workers, and two streams
// with different identities never share output, which is what makes the
// per-window sampling of the relevance engine independent of scheduling.
class RandomStream {
public:
    // Domain tags keep unrelated uses of the same user seed apart.
    enum : std::uint64_t {
        kDomainCorpus = 1,
        kDomainWindow = 2,
        kDomainSubsample = 3,
    };

    RandomStream(std::uint64_t seed, std::uint64_t domain, std::uint64_t stream_id)
        : key0_(static_cast<std::uint32_t>(seed)),
          key1_(static_cast<std::uint32_t>(seed >> 32) ^ static_cast<std::uint32_t>(domain * 0x9E3779B97F4A7C15ull >> 32)),
          ctr2_(static_cast<std::uint32_t>(stream_id)),
          ctr3_(static_cast<std::uint32_t>(stream_id >> 32)) {}

    std::uint32_t next_u32() {
        if (have_ == 0) {
            fill_block();
        }
        return block_[--have_];
    }

    // 53-bit uniform in [0,1).
    double next_double() {
        const std::uint64_t hi = next_u32();
        const std::uint64_t lo = next_u32();
        const std::uint64_t bits = ((hi << 32) | lo) >> 11;
        return static_cast<double>(bits) * 0x1.0p-53;
    }

    // Standard normal via Box-Muller; consumes uniforms in pairs.
    double next_gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        // u1 in (0,1] so the log is finite.
        const double u1 = 1.0 - next_double();
        const double u2 = next_double();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(t);
        has_spare_ = true;
        return r * std::cos(t);
    }

    // Uniform integer in [0, n) by multiply-shift; n must be >= 1.
    std::uint64_t next_below(std::uint64_t n) {
        return (static_cast<std::uint64_t>(next_u32()) * n) >> 32;
    }

private:
    static constexpr std::uint32_t kMul0 = 0xD2511F53u;
    static constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    static constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    static constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

    void fill_block() {
        std::uint32_t c0 = ctr0_, c1 = ctr1_, c2 = ctr2_, c3 = ctr3_;
        std::uint32_t k0 = key0_, k1 = key1_;
        for (int round = 0; round < 10; ++round) {
            const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * c0;
            const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * c2;
            const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
            const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
            const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
            const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
            const std::uint32_t n0 = hi1 ^ c1 ^ k0;
            const std::uint32_t n1 = lo1;
            const std::uint32_t n2 = hi0 ^ c3 ^ k1;
            const std::uint32_t n3 = lo0;
            c0 = n0;
            c1 = n1;
            c2 = n2;
            c3 = n3;
            k0 += kWeyl0;
            k1 += kWeyl1;
        }
        block_[0] = c3;
        block_[1] = c2;
        block_[2] = c1;
        block_[3] = c0;
        have_ = 4;
        if (++ctr0_ == 0) {
            ++ctr1_;
        }
    }

    std::uint32_t key0_, key1_;
    std::uint32_t ctr0_ = 0, ctr1_ = 0;
    std::uint32_t ctr2_, ctr3_;
    std::uint32_t block_[4] = {0, 0, 0, 0};
    int have_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace preddiff
