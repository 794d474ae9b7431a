#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegate {

using Scalar = double;
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using TokenId = int32_t;
using TokenSeq = std::vector<TokenId>;

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Deterministic RNG used everywhere a seed appears in an interface.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform in [0, 1)
    double uniform() {
        return std::generate_canonical<double, 53>(engine_);
    }

    double gaussian() {
        //: explicit Box-Muller so the stream is identical across stdlib implementations
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw ConfigError("uniform_int: n must be positive");
        // rejection sampling keeps the draw unbiased
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t x = 0;
        do {
            x = engine_();
        } while (x >= limit);
        return static_cast<int64_t>(x % un);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(static_cast<int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Derive an independent stream, stable across platforms.
    static uint64_t derive(uint64_t seed, uint64_t stream) {
        uint64_t x = seed * 0x9E3779B97F4A7C15ull + stream * 0xBF58476D1CE4E5B9ull + 0x94D049BB133111EBull;
        x ^= x >> 30;
        x *= 0xBF58476D1CE4E5B9ull;
        x ^= x >> 27;
        x *= 0x94D049BB133111EBull;
        x ^= x >> 31;
        return x;
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline Matrix gaussian_matrix(Eigen::Index rows, Eigen::Index cols, Scalar stddev, Rng& rng) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j)
            m(i, j) = stddev * rng.gaussian();
    return m;
}

}  // namespace framegate
