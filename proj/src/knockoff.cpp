#include "framegate/knockoff.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <limits>

namespace framegate::knockoff {

namespace {

/// m columns orthogonal to span(basis), mutually orthogonal, each of norm
/// sqrt(n). Twice-iterated Gram-Schmidt over seeded gaussian draws keeps the
/// orthogonality tight enough for the exact-moment construction.
Matrix orthogonal_complement_frame(Eigen::Index n, Eigen::Index m, const Matrix& basis, Rng& rng) {
    Eigen::HouseholderQR<Matrix> qr(basis);
    const Matrix q_basis = qr.householderQ() * Matrix::Identity(n, basis.cols());

    Matrix u(n, m);
    for (Eigen::Index j = 0; j < m; ++j) {
        Vector v(n);
        int attempts = 0;
        while (true) {
            for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.gaussian();
            for (int pass = 0; pass < 2; ++pass) {
                v -= q_basis * (q_basis.transpose() * v);
                for (Eigen::Index b = 0; b < j; ++b)
                    v -= u.col(b) * (u.col(b).dot(v) / double(n));
            }
            const double norm = v.norm();
            if (norm > 1e-8) {
                u.col(j) = v * (std::sqrt(double(n)) / norm);
                break;
            }
            if (++attempts > 64)
                throw TrainingError("knockoff frame construction failed: degenerate span");
        }
    }
    return u;
}

}  // namespace

KnockoffDesign make_knockoffs(const Matrix& codes, uint64_t seed) {
    const Eigen::Index n = codes.rows();
    const Eigen::Index m = codes.cols();
    if (m < 1) throw ConfigError("make_knockoffs: no features");
    if (n < 2 * m + 1)
        throw ConfigError("make_knockoffs: need at least 2*m'+1 rows for the knockoff frame");

    KnockoffDesign design;

    // standardize columns; constant columns carry no signal and trigger the
    // regularized path
    design.z.resize(n, m);
    for (Eigen::Index j = 0; j < m; ++j) {
        const double mean = codes.col(j).mean();
        Vector c = codes.col(j).array() - mean;
        const double sd = std::sqrt(c.squaredNorm() / double(n));
        if (sd < 1e-12) {
            design.z.col(j) = Vector::Zero(n);
            design.regularized = true;
        } else {
            design.z.col(j) = c / sd;
        }
    }
    const Matrix& z = design.z;

    design.gram = z.transpose() * z / double(n);
    Eigen::SelfAdjointEigenSolver<Matrix> es(design.gram);
    double lambda_min = es.eigenvalues().minCoeff();
    if (lambda_min < 1e-8) {
        // ridge toward the identity; the construction below is then exact
        // with respect to the ridged gram, and the result is flagged
        const double gamma = 1e-3;
        design.gram *= (1.0 - gamma);
        design.gram.diagonal().array() += gamma;
        design.regularized = true;
        es.compute(design.gram);
        lambda_min = es.eigenvalues().minCoeff();
    }

    // equicorrelated D = s I, s short of min(2 lambda_min, 1) so that
    // 2 gram - D stays strictly positive definite
    design.s = std::min(1.0, 2.0 * lambda_min) * (1.0 - 1e-6);
    const double s = design.s;
    const Matrix gram_inv = es.operatorInverseSqrt() * es.operatorInverseSqrt();
    const Matrix ginv_d = s * gram_inv;                                 // G^-1 D
    const Matrix a = 2.0 * s * Matrix::Identity(m, m) - s * ginv_d;     // 2D - D G^-1 D
    const Matrix a_sym = 0.5 * (a + Matrix(a.transpose()));
    Eigen::LLT<Matrix> llt(a_sym);
    if (llt.info() != Eigen::Success) {
        Matrix jittered = a_sym;
        jittered.diagonal().array() += 1e-10;
        llt.compute(jittered);
        if (llt.info() != Eigen::Success)
            throw TrainingError("knockoff construction: residual covariance not PSD");
    }
    const Matrix c_factor = llt.matrixU();  // C with C' C = 2D - D G^-1 D

    Matrix basis(n, m + 1);
    basis.col(0) = Vector::Ones(n);
    basis.rightCols(m) = z;
    Rng rng(Rng::derive(seed, 0xA0C));
    const Matrix u = orthogonal_complement_frame(n, m, basis, rng);

    design.z_knock = z * (Matrix::Identity(m, m) - ginv_d) + u * c_factor;
    return design;
}

KnockoffResult knockoff_filter(const Matrix& codes, const Vector& labels, double q,
                               uint64_t seed) {
    const Eigen::Index n = codes.rows();
    const Eigen::Index m = codes.cols();
    if (labels.size() != n) throw ConfigError("knockoff_filter: label length mismatch");
    if (!(q > 0.0 && q < 1.0)) throw ConfigError("knockoff_filter: q outside (0,1)");
    for (Eigen::Index i = 0; i < n; ++i)
        if (labels(i) != 0.0 && labels(i) != 1.0)
            throw ConfigError("knockoff_filter: labels must be 0/1");

    const KnockoffDesign design = make_knockoffs(codes, seed);

    KnockoffResult res;
    res.q = q;
    res.regularized = design.regularized;

    // importance: absolute point-biserial correlation against the labels;
    // both originals and knockoffs are centered by construction
    const Vector yc = labels.array() - labels.mean();
    const double y_norm = yc.norm();
    auto corr_with = [&](const Vector& col) {
        const double cn = col.norm();
        if (cn < 1e-12 || y_norm < 1e-12) return 0.0;
        return std::abs(col.dot(yc) / (cn * y_norm));
    };
    res.W.resize(m);
    for (Eigen::Index j = 0; j < m; ++j)
        res.W(j) = corr_with(design.z.col(j)) - corr_with(design.z_knock.col(j));

    // knockoff+ threshold rule
    std::vector<double> candidates;
    for (Eigen::Index j = 0; j < m; ++j)
        if (res.W(j) != 0.0) candidates.push_back(std::abs(res.W(j)));
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

    res.threshold = std::numeric_limits<double>::infinity();
    for (double t : candidates) {
        int neg = 0, pos = 0;
        for (Eigen::Index j = 0; j < m; ++j) {
            if (res.W(j) <= -t) ++neg;
            if (res.W(j) >= t) ++pos;
        }
        if (double(1 + neg) / double(std::max(1, pos)) <= q) {
            res.threshold = t;
            break;
        }
    }
    for (Eigen::Index j = 0; j < m; ++j)
        if (res.W(j) >= res.threshold) res.selected.push_back(int(j));
    return res;
}

}  // namespace framegate::knockoff
