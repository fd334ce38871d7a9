#pragma once

#include <random>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "lrns/tt_core.hpp"

namespace testutil {

using lrns::Index;
using lrns::Matrix;
using lrns::Vector;

inline Matrix randn(std::mt19937_64& rng, Index r, Index c) {
    std::normal_distribution<double> nd;
    Matrix m(r, c);
    for (Index j = 0; j < c; ++j)
        for (Index i = 0; i < r; ++i) m(i, j) = nd(rng);
    return m;
}

inline Vector randn_vec(std::mt19937_64& rng, Index n) { return randn(rng, n, 1); }

inline lrns::TensorTrain3 random_tt(std::mt19937_64& rng, lrns::ModeSizes s, Index r1, Index r2) {
    return lrns::TensorTrain3(randn(rng, s.n1, r1), randn(rng, r1 * s.n2, r2), s.n2, randn(rng, r2, s.n3));
}

inline lrns::FullTensor3 random_full(std::mt19937_64& rng, lrns::ModeSizes s) {
    return lrns::FullTensor3(s, randn_vec(rng, s.total()));
}

/// Dense Kronecker product, written out entry by entry.
inline Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
    for (Index i = 0; i < a.rows(); ++i)
        for (Index j = 0; j < a.cols(); ++j)
            for (Index k = 0; k < b.rows(); ++k)
                for (Index l = 0; l < b.cols(); ++l) out(i * b.rows() + k, j * b.cols() + l) = a(i, j) * b(k, l);
    return out;
}

inline double rel_diff(const Vector& a, const Vector& b) {
    const double nb = b.norm();
    return nb == 0.0 ? a.norm() : (a - b).norm() / nb;
}

}  // namespace testutil
