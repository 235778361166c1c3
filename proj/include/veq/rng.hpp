#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

namespace veq {

// SplitMix64 step, used to derive well-separated seeds from a base seed.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Independent stream seed for (base, stream). Distinct streams decorrelate
// the pipeline stages (data collection, init, planning, ...) of one run.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t s = base ^ (0x9e3779b97f4a7c15ULL * (stream + 1));
    std::uint64_t out = splitmix64(s);
    out ^= splitmix64(s);
    return out;
}

// Deterministic random source. All sampling goes through the hand-written
// transforms below so that results are bit-reproducible across platforms
// and standard-library versions (std distributions are not pinned).
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform double in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform double in (0, 1]; safe for log().
    double uniform_pos() { return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53; }

    double uniform_real(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Multiply-shift map; bias is O(n / 2^64).
    int uniform_int(int n) {
        return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                                 static_cast<unsigned __int128>(n)) >> 64);
    }

    // Standard normal via Box-Muller (no pair caching, stateless apart from the engine).
    double normal() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Index sampled from an inclusive-prefix-sum table (cdf[n-1] is the total mass).
    int categorical_cdf(const double* cdf, int n) {
        const double u = uniform() * cdf[n - 1];
        int lo = 0, hi = n - 1;
        while (lo < hi) {
            const int mid = (lo + hi) / 2;
            if (cdf[mid] <= u)
                lo = mid + 1;
            else
                hi = mid;
        }
        return lo;
    }

    // Index sampled proportionally to a nonnegative weight row (linear scan).
    template <class Derived>
    int categorical(const Eigen::MatrixBase<Derived>& probs) {
        const double u = uniform() * probs.sum();
        double acc = 0.0;
        const int n = static_cast<int>(probs.size());
        for (int i = 0; i < n; ++i) {
            acc += probs(i);
            if (u < acc) return i;
        }
        return n - 1;
    }

    // Dirichlet(1,...,1) row: normalized unit-rate exponentials.
    Eigen::VectorXd stochastic_row(int n) {
        Eigen::VectorXd row(n);
        for (int i = 0; i < n; ++i) row[i] = -std::log(uniform_pos());
        row /= row.sum();
        return row;
    }

  private:
    std::mt19937_64 engine_;
};

// Inclusive prefix sums of each row; sampling tables for categorical_cdf.
inline Eigen::MatrixXd row_cdfs(const Eigen::MatrixXd& probs) {
    Eigen::MatrixXd cdf = probs;
    for (Eigen::Index r = 0; r < cdf.rows(); ++r)
        for (Eigen::Index c = 1; c < cdf.cols(); ++c) cdf(r, c) += cdf(r, c - 1);
    return cdf;
}

}  // namespace veq
