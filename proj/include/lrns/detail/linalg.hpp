#pragma once

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

namespace lrns::detail {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Relative floor below which singular values count as roundoff; keeps eps = 0
/// from retaining noise directions.
inline constexpr double kRoundoffFloor = 1e-14;

/// Smallest rank r >= 1 such that the discarded tail (sum_{j>=r} s_j^2)^{1/2}
/// does not exceed max(delta, kRoundoffFloor*||s||). Singular values tied with
/// the last retained one are kept as well. `s` must be sorted in descending order.
inline Index truncation_rank(const Vector& s, double delta) {
    const Index n = s.size();
    if (n == 0) return 1;
    Vector tail(n + 1);
    tail(n) = 0.0;
    for (Index j = n - 1; j >= 0; --j) tail(j) = tail(j + 1) + s(j) * s(j);
    const double d = std::max(delta, kRoundoffFloor * std::sqrt(tail(0)));
    const double delta2 = d * d;
    Index r = n;
    for (Index k = 1; k <= n; ++k) {
        if (tail(k) <= delta2) {
            r = k;
            break;
        }
    }
    // ties: keep every value equal to the last retained one
    const double tie_tol = 1e-13 * s(0);
    while (r < n && s(r - 1) > 0.0 && std::abs(s(r) - s(r - 1)) <= tie_tol) ++r;
    return std::max<Index>(r, 1);
}

struct TruncatedSvd {
    Matrix u;  // rows x r
    Vector s;  // r
    Matrix v;  // cols x r
};

/// SVD of a (possibly very rectangular) matrix truncated so that the Frobenius
/// norm of the discarded part is at most `delta`. Tall or wide inputs are first
/// reduced by a Householder QR so the SVD only runs on the square factor.
inline TruncatedSvd truncated_svd(const Matrix& a, double delta) {
    const Index m = a.rows();
    const Index n = a.cols();
    TruncatedSvd out;
    if (m >= 2 * n && n > 0) {
        Eigen::HouseholderQR<Matrix> qr(a);
        Matrix r = qr.matrixQR().topRows(n).triangularView<Eigen::Upper>();
        Eigen::BDCSVD<Matrix> svd(r, Eigen::ComputeThinU | Eigen::ComputeThinV);
        const Index k = truncation_rank(svd.singularValues(), delta);
        Matrix padded = Matrix::Zero(m, k);
        padded.topRows(n) = svd.matrixU().leftCols(k);
        out.u = qr.householderQ() * padded;
        out.s = svd.singularValues().head(k);
        out.v = svd.matrixV().leftCols(k);
        return out;
    }
    if (n >= 2 * m && m > 0) {
        TruncatedSvd t = truncated_svd(a.transpose(), delta);
        out.u = std::move(t.v);
        out.s = std::move(t.s);
        out.v = std::move(t.u);
        return out;
    }
    Eigen::BDCSVD<Matrix> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Index k = truncation_rank(svd.singularValues(), delta);
    out.u = svd.matrixU().leftCols(k);
    out.s = svd.singularValues().head(k);
    out.v = svd.matrixV().leftCols(k);
    return out;
}

}  // namespace lrns::detail
