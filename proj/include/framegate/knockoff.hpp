#pragma once

#include "framegate/common.hpp"

#include <vector>

namespace framegate::knockoff {

/// Standardized design and its knockoff copy. With `regularized == false` the
/// construction is exact: cols of both matrices have zero mean and unit scale,
/// z_knock' z_knock / N == z' z / N, and z' z_knock / N == gram - s I.
struct KnockoffDesign {
    Matrix z;        // [N x m] column-standardized originals
    Matrix z_knock;  // [N x m] knockoff copies
    Matrix gram;     // z' z / N (after any ridge)
    double s = 0.0;  // equicorrelated D = s I
    bool regularized = false;
};

/// Equicorrelated fixed-design knockoff construction. Requires N >= 2m + 1
/// rows so an orthogonal complement frame of width m exists.
KnockoffDesign make_knockoffs(const Matrix& codes, uint64_t seed = 0);

struct KnockoffResult {
    double q = 0.1;
    Vector W;                // per-feature knockoff statistic
    double threshold = 0.0;  // +inf when nothing clears the filter
    std::vector<int> selected;
    bool regularized = false;  // covariance needed ridge regularization
};

/// Knockoff filter with the finite-sample "+1" threshold rule. `codes` is
/// [N x m'] candidate-feature activations, `labels` a 0/1 vector of length N;
/// importance is absolute point-biserial correlation. Note the "+1" rule can
/// only ever select when at least ceil(1/q) statistics clear the threshold.
KnockoffResult knockoff_filter(const Matrix& codes, const Vector& labels, double q,
                               uint64_t seed = 0);

}  // namespace framegate::knockoff
