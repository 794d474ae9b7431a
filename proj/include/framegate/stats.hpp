#pragma once

#include "framegate/common.hpp"

#include <cstdint>
#include <utility>

namespace framegate::stats {

/// 2x2 table: a,b = successes/failures in group one; c,d = group two.
struct ContingencyTable {
    int64_t a = 0, b = 0, c = 0, d = 0;
};

enum class Sidedness { TWO_SIDED, GREATER, LESS };

/// Exact hypergeometric p-value. TWO_SIDED sums the probabilities of all
/// tables no more likely than the observed one.
double fisher_exact(const ContingencyTable& table, Sidedness sidedness = Sidedness::TWO_SIDED);

/// Exact (conservative) binomial confidence interval.
std::pair<double, double> clopper_pearson(int64_t successes, int64_t n, double alpha = 0.05);

double pearson_correlation(const Vector& x, const Vector& y);

}  // namespace framegate::stats
