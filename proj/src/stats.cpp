#include "framegate/stats.hpp"

#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cmath>
#include <string>

namespace framegate::stats {

namespace {

double log_choose(int64_t n, int64_t k) {
    return std::lgamma(double(n + 1)) - std::lgamma(double(k + 1)) - std::lgamma(double(n - k + 1));
}

}  // namespace

double fisher_exact(const ContingencyTable& t, Sidedness sidedness) {
    if (t.a < 0 || t.b < 0 || t.c < 0 || t.d < 0)
        throw ConfigError("fisher_exact: negative cell count");
    const int64_t r1 = t.a + t.b;
    const int64_t r2 = t.c + t.d;
    const int64_t c1 = t.a + t.c;
    const int64_t c2 = t.b + t.d;
    if (r1 == 0 || r2 == 0 || c1 == 0 || c2 == 0)
        throw ConfigError("fisher_exact: zero margin");
    const int64_t n = r1 + r2;

    // hypergeometric support for the top-left cell with margins fixed
    const int64_t k_lo = std::max<int64_t>(0, c1 - r2);
    const int64_t k_hi = std::min(r1, c1);
    const double log_denom = log_choose(n, c1);
    auto pmf = [&](int64_t k) {
        return std::exp(log_choose(r1, k) + log_choose(r2, c1 - k) - log_denom);
    };

    const double p_obs = pmf(t.a);
    double p = 0.0;
    switch (sidedness) {
        case Sidedness::GREATER:
            for (int64_t k = t.a; k <= k_hi; ++k) p += pmf(k);
            break;
        case Sidedness::LESS:
            for (int64_t k = k_lo; k <= t.a; ++k) p += pmf(k);
            break;
        case Sidedness::TWO_SIDED: {
            // include every table whose probability does not exceed the
            // observed one, with the customary relative slack for ties
            const double cutoff = p_obs * (1.0 + 1e-7);
            for (int64_t k = k_lo; k <= k_hi; ++k) {
                const double pk = pmf(k);
                if (pk <= cutoff) p += pk;
            }
            break;
        }
    }
    return std::min(1.0, p);
}

std::pair<double, double> clopper_pearson(int64_t successes, int64_t n, double alpha) {
    if (n <= 0) throw ConfigError("clopper_pearson: n must be positive");
    if (successes < 0 || successes > n) throw ConfigError("clopper_pearson: successes out of range");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("clopper_pearson: alpha out of range");
    const double k = double(successes);
    const double nn = double(n);
    double lo = 0.0, hi = 1.0;
    if (successes > 0) lo = boost::math::ibeta_inv(k, nn - k + 1.0, alpha / 2.0);
    if (successes < n) hi = boost::math::ibeta_inv(k + 1.0, nn - k, 1.0 - alpha / 2.0);
    return {lo, hi};
}

double pearson_correlation(const Vector& x, const Vector& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw ConfigError("pearson_correlation: need two equal-length vectors of size >= 2");
    const double n = double(x.size());
    const double mx = x.mean();
    const double my = y.mean();
    const Vector dx = x.array() - mx;
    const Vector dy = y.array() - my;
    const double sx = std::sqrt(dx.squaredNorm() / n);
    const double sy = std::sqrt(dy.squaredNorm() / n);
    if (sx == 0.0 || sy == 0.0) return 0.0;
    return dx.dot(dy) / (n * sx * sy);
}

}  // namespace framegate::stats
