#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "lrns/detail/linalg.hpp"

namespace lrns {

using Index = Eigen::Index;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Mode sizes of a three-mode tensor (time x stochastic x space).
struct ModeSizes {
    Index n1{1};
    Index n2{1};
    Index n3{1};

    [[nodiscard]] constexpr Index total() const { return n1 * n2 * n3; }
    bool operator==(const ModeSizes&) const = default;
};

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class SizeCapError : public std::length_error {
public:
    using std::length_error::length_error;
};

inline constexpr Index kDefaultFullCap = 1'000'000;

inline std::string to_string(const ModeSizes& s) {
    return "(" + std::to_string(s.n1) + "," + std::to_string(s.n2) + "," + std::to_string(s.n3) + ")";
}

inline void check_cap(const ModeSizes& s, Index cap) {
    if (s.n1 < 1 || s.n2 < 1 || s.n3 < 1)
        throw DimensionError("mode sizes must be positive, got " + to_string(s));
    // overflow-safe product comparison
    const double total = static_cast<double>(s.n1) * static_cast<double>(s.n2) * static_cast<double>(s.n3);
    if (total > static_cast<double>(cap))
        throw SizeCapError("full tensor " + to_string(s) + " exceeds the size cap of " + std::to_string(cap) +
                           " entries");
}

/// Dense n1 x n2 x n3 array. Storage follows the vectorization order used
/// throughout: i3 fastest, i1 slowest.
class FullTensor3 {
public:
    FullTensor3() = default;

    explicit FullTensor3(ModeSizes sizes, Index cap = kDefaultFullCap) : sizes_(sizes) {
        check_cap(sizes, cap);
        data_ = Vector::Zero(sizes.total());
    }

    FullTensor3(ModeSizes sizes, Vector data, Index cap = kDefaultFullCap) : sizes_(sizes), data_(std::move(data)) {
        check_cap(sizes, cap);
        if (data_.size() != sizes.total()) throw DimensionError("FullTensor3: data length does not match mode sizes");
    }

    [[nodiscard]] const ModeSizes& sizes() const { return sizes_; }

    double& operator()(Index i1, Index i2, Index i3) { return data_((i1 * sizes_.n2 + i2) * sizes_.n3 + i3); }
    double operator()(Index i1, Index i2, Index i3) const {
        return data_((i1 * sizes_.n2 + i2) * sizes_.n3 + i3);
    }

    /// vec(t): entry (i1,i2,i3) sits at i3 + n3*(i2 + n2*i1).
    [[nodiscard]] const Vector& vec() const { return data_; }
    [[nodiscard]] Vector& vec() { return data_; }

    [[nodiscard]] double norm() const { return data_.norm(); }

private:
    ModeSizes sizes_{};
    Vector data_;
};

/// Three-mode tensor train
///   z(i1,i2,i3) = sum_{a1,a2} core1(i1,a1) core2(a1,i2,a2) core3(a2,i3).
///
/// core2 is stored column-major as its left unfolding (r1*n2 x r2) with row
/// index a1 + r1*i2. The same buffer read as an r1 x (n2*r2) matrix is the right
/// unfolding with column index i2 + n2*a2.
class TensorTrain3 {
public:
    TensorTrain3() : TensorTrain3(zero({1, 1, 1})) {}

    /// `core2_left` is the (r1*n2) x r2 left unfolding.
    TensorTrain3(Matrix core1, Matrix core2_left, Index n2, Matrix core3)
        : core1_(std::move(core1)), core2_(std::move(core2_left)), core3_(std::move(core3)), n2_(n2) {
        if (core1_.cols() < 1 || core3_.rows() < 1 || n2_ < 1 || core1_.rows() < 1 || core3_.cols() < 1)
            throw DimensionError("TensorTrain3: ranks and mode sizes must be positive");
        if (core2_.rows() != core1_.cols() * n2_ || core2_.cols() != core3_.rows())
            throw DimensionError("TensorTrain3: core shapes are inconsistent");
    }

    static TensorTrain3 zero(ModeSizes s) {
        return TensorTrain3(Matrix::Zero(s.n1, 1), Matrix::Zero(s.n2, 1), s.n2, Matrix::Zero(1, s.n3));
    }

    /// Rank-(1,1) tensor a (x) b (x) c.
    static TensorTrain3 rank1(const Vector& a, const Vector& b, const Vector& c) {
        return TensorTrain3(Matrix(a), Matrix(b), b.size(), Matrix(c.transpose()));
    }

    [[nodiscard]] ModeSizes sizes() const { return {core1_.rows(), n2_, core3_.cols()}; }
    [[nodiscard]] std::array<Index, 2> ranks() const { return {core1_.cols(), core3_.rows()}; }
    [[nodiscard]] Index rank1() const { return core1_.cols(); }
    [[nodiscard]] Index rank2() const { return core3_.rows(); }

    [[nodiscard]] const Matrix& core1() const { return core1_; }
    [[nodiscard]] const Matrix& core2_left() const { return core2_; }
    [[nodiscard]] Eigen::Map<const Matrix> core2_right() const {
        return Eigen::Map<const Matrix>(core2_.data(), rank1(), n2_ * rank2());
    }
    /// The r1 x r2 slice of core2 at fixed i2.
    [[nodiscard]] auto core2_slice(Index i2) const { return core2_.middleRows(i2 * rank1(), rank1()); }
    [[nodiscard]] double core2(Index a1, Index i2, Index a2) const { return core2_(a1 + rank1() * i2, a2); }
    [[nodiscard]] const Matrix& core3() const { return core3_; }

    /// Number of stored coefficients, n1*r1 + r1*n2*r2 + r2*n3.
    [[nodiscard]] Index storage() const {
        return core1_.size() + core2_.size() + core3_.size();
    }

    [[nodiscard]] double entry(Index i1, Index i2, Index i3) const {
        return core1_.row(i1) * core2_slice(i2) * core3_.col(i3);
    }

private:
    Matrix core1_;
    Matrix core2_;
    Matrix core3_;
    Index n2_{1};
};

inline void check_same_sizes(const TensorTrain3& a, const TensorTrain3& b, const char* what) {
    if (!(a.sizes() == b.sizes()))
        throw DimensionError(std::string(what) + ": mode sizes " + to_string(a.sizes()) + " and " +
                             to_string(b.sizes()) + " differ");
}

/// n1*k1 + k1*n2*k2 + k2*n3.
inline Index tt_storage(const TensorTrain3& z) { return z.storage(); }

/// Exact contraction of the three cores.
inline FullTensor3 tt_to_full(const TensorTrain3& z, Index cap = kDefaultFullCap) {
    const ModeSizes s = z.sizes();
    FullTensor3 out(s, cap);
    // (n1 x n2*r2), read as (n1*n2 x r2) with row i1 + n1*i2
    const Matrix c12 = z.core1() * z.core2_right();
    const Eigen::Map<const Matrix> c12_left(c12.data(), s.n1 * s.n2, z.rank2());
    const Matrix full = c12_left * z.core3();  // (n1*n2) x n3
    Vector& v = out.vec();
    for (Index i1 = 0; i1 < s.n1; ++i1)
        for (Index i2 = 0; i2 < s.n2; ++i2) v.segment((i1 * s.n2 + i2) * s.n3, s.n3) = full.row(i1 + s.n1 * i2);
    return out;
}

/// TT-SVD of a dense tensor with equal thresholds eps*||t||/sqrt(2) on both splits.
inline TensorTrain3 tt_from_full(const FullTensor3& t, double eps) {
    if (eps < 0.0) throw std::invalid_argument("tt_from_full: eps must be non-negative");
    const ModeSizes s = t.sizes();
    const double nrm = t.norm();
    if (nrm == 0.0) return TensorTrain3::zero(s);
    const double delta = eps * nrm / std::sqrt(2.0);

    // first unfolding Z (n1 x n2*n3); its transpose is the column-major view of vec(t)
    const Eigen::Map<const Matrix> zt(t.vec().data(), s.n2 * s.n3, s.n1);
    detail::TruncatedSvd svd1 = detail::truncated_svd(zt, delta);  // zt = U S V^T, Z = V S U^T
    const Index k1 = svd1.s.size();
    Matrix core1 = std::move(svd1.v);                                   // n1 x k1
    const Matrix rest = svd1.s.asDiagonal() * svd1.u.transpose();       // k1 x (n2*n3), column j = i3 + n3*i2

    Matrix z2(k1 * s.n2, s.n3);  // row a1 + k1*i2
    for (Index i2 = 0; i2 < s.n2; ++i2)
        for (Index i3 = 0; i3 < s.n3; ++i3) z2.col(i3).segment(k1 * i2, k1) = rest.col(i3 + s.n3 * i2);
    detail::TruncatedSvd svd2 = detail::truncated_svd(z2, delta);
    Matrix core3 = svd2.s.asDiagonal() * svd2.v.transpose();
    return TensorTrain3(std::move(core1), std::move(svd2.u), s.n2, std::move(core3));
}

/// Result of a rounding sweep. `input_norm` is the Frobenius norm of the
/// tensor before truncation, computed from the orthogonalized cores.
struct RoundResult {
    TensorTrain3 tt;
    double input_norm{0.0};
    double output_norm{0.0};
};

/// Truncation of the weighted sum sum_t coeffs[t]*terms[t] to relative accuracy
/// eps. The sum is never materialized: the concatenated cores are orthogonalized
/// right-to-left (QR of the stacked space cores, then of the block-diagonal
/// middle core) and truncated left-to-right with per-split threshold
/// eps*||sum||/sqrt(2). The output is left-orthogonal, so its norm is
/// ||core3||_F.
inline RoundResult tt_round_sum(std::span<const TensorTrain3* const> terms, std::span<const double> coeffs,
                                double eps) {
    if (terms.empty()) throw std::invalid_argument("tt_round_sum: no terms");
    if (terms.size() != coeffs.size()) throw std::invalid_argument("tt_round_sum: coefficient count mismatch");
    if (eps < 0.0) throw std::invalid_argument("tt_round_sum: eps must be non-negative");
    const ModeSizes s = terms[0]->sizes();
    Index k1_total = 0;
    Index k2_total = 0;
    for (const TensorTrain3* t : terms) {
        check_same_sizes(*terms[0], *t, "tt_round_sum");
        k1_total += t->rank1();
        k2_total += t->rank2();
    }

    // 1) QR of the stacked space cores (transposed): n3 x K2
    Matrix c3t(s.n3, k2_total);
    {
        Index off = 0;
        for (std::size_t t = 0; t < terms.size(); ++t) {
            c3t.middleCols(off, terms[t]->rank2()) = coeffs[t] * terms[t]->core3().transpose();
            off += terms[t]->rank2();
        }
    }
    Eigen::HouseholderQR<Matrix> qr3(c3t);
    const Index q = std::min(s.n3, k2_total);
    const Matrix r3 = qr3.matrixQR().topRows(q).triangularView<Eigen::Upper>();  // q x K2

    // 2) absorb R3 into each diagonal block of core2 and build the transposed
    //    right unfolding Y (n2*q x K1), Y(i2 + n2*b, off + a) = W_t(a + k_t*i2, b)
    Matrix y(s.n2 * q, k1_total);
    {
        Index off1 = 0;
        Index off2 = 0;
        for (const TensorTrain3* t : terms) {
            const Index a = t->rank1();
            const Index b = t->rank2();
            const Matrix w = t->core2_left() * r3.middleCols(off2, b).transpose();  // (a*n2) x q
            for (Index beta = 0; beta < q; ++beta)
                for (Index i2 = 0; i2 < s.n2; ++i2)
                    y.row(i2 + s.n2 * beta).segment(off1, a) = w.col(beta).segment(a * i2, a).transpose();
            off1 += a;
            off2 += b;
        }
    }

    // 3) QR of Y; core2 becomes right-orthogonal (Q2^T), R2 folds into core1
    Eigen::HouseholderQR<Matrix> qr2(y);
    const Index p = std::min(s.n2 * q, k1_total);
    const Matrix r2 = qr2.matrixQR().topRows(p).triangularView<Eigen::Upper>();  // p x K1
    Matrix c1(s.n1, k1_total);
    {
        Index off = 0;
        for (const TensorTrain3* t : terms) {
            c1.middleCols(off, t->rank1()) = t->core1();
            off += t->rank1();
        }
    }
    const Matrix core1_full = c1 * r2.transpose();  // n1 x p

    RoundResult out;
    out.input_norm = core1_full.norm();
    if (out.input_norm == 0.0 || !std::isfinite(out.input_norm)) {
        if (!std::isfinite(out.input_norm)) throw std::runtime_error("tt_round_sum: non-finite tensor");
        out.tt = TensorTrain3::zero(s);
        return out;
    }
    const double delta = eps * out.input_norm / std::sqrt(2.0);

    // 4) truncate the time split
    detail::TruncatedSvd svd1 = detail::truncated_svd(core1_full, delta);
    const Index k1 = svd1.s.size();
    // core2 (right unfolding, k1 x n2*q) = (S V^T) Q2^T = (Q2 V S)^T
    Matrix vs = svd1.v * svd1.s.asDiagonal();  // p x k1
    Matrix padded = Matrix::Zero(s.n2 * q, k1);
    padded.topRows(p) = vs;
    const Matrix q2vs = qr2.householderQ() * padded;  // (n2*q) x k1, row i2 + n2*b
    Matrix mid(k1 * s.n2, q);                         // left unfolding, row a + k1*i2
    for (Index beta = 0; beta < q; ++beta)
        for (Index i2 = 0; i2 < s.n2; ++i2) mid.col(beta).segment(k1 * i2, k1) = q2vs.row(i2 + s.n2 * beta).transpose();

    // 5) truncate the space split
    detail::TruncatedSvd svd2 = detail::truncated_svd(mid, delta);
    const Index k2 = svd2.s.size();
    Matrix ws = svd2.v * svd2.s.asDiagonal();  // q x k2
    Matrix padded3 = Matrix::Zero(s.n3, k2);
    padded3.topRows(q) = ws;
    Matrix core3 = (qr3.householderQ() * padded3).transpose();  // k2 x n3

    out.output_norm = svd2.s.norm();
    out.tt = TensorTrain3(std::move(svd1.u), std::move(svd2.u), s.n2, std::move(core3));
    return out;
}

inline RoundResult tt_round_sum(const std::vector<TensorTrain3>& terms, const std::vector<double>& coeffs, double eps) {
    std::vector<const TensorTrain3*> ptrs;
    ptrs.reserve(terms.size());
    for (const auto& t : terms) ptrs.push_back(&t);
    return tt_round_sum(ptrs, coeffs, eps);
}

inline RoundResult tt_round_with_norm(const TensorTrain3& z, double eps) {
    const TensorTrain3* ptr = &z;
    const double one = 1.0;
    return tt_round_sum(std::span<const TensorTrain3* const>(&ptr, 1), std::span<const double>(&one, 1), eps);
}

/// Recompression with ||result - z||_F <= eps*||z||_F.
inline TensorTrain3 tt_round(const TensorTrain3& z, double eps) { return tt_round_with_norm(z, eps).tt; }

/// Exact weighted sum by core concatenation; ranks add up.
inline TensorTrain3 tt_sum(std::span<const TensorTrain3* const> terms, std::span<const double> coeffs) {
    if (terms.empty() || terms.size() != coeffs.size()) throw std::invalid_argument("tt_sum: bad arguments");
    const ModeSizes s = terms[0]->sizes();
    Index k1 = 0;
    Index k2 = 0;
    for (const TensorTrain3* t : terms) {
        check_same_sizes(*terms[0], *t, "tt_sum");
        k1 += t->rank1();
        k2 += t->rank2();
    }
    Matrix c1(s.n1, k1);
    Matrix c2 = Matrix::Zero(k1 * s.n2, k2);
    Matrix c3(k2, s.n3);
    Index o1 = 0;
    Index o2 = 0;
    for (std::size_t t = 0; t < terms.size(); ++t) {
        const TensorTrain3& z = *terms[t];
        const Index a = z.rank1();
        const Index b = z.rank2();
        c1.middleCols(o1, a) = z.core1();
        for (Index i2 = 0; i2 < s.n2; ++i2) c2.block(i2 * k1 + o1, o2, a, b) = z.core2_slice(i2);
        c3.middleRows(o2, b) = coeffs[t] * z.core3();
        o1 += a;
        o2 += b;
    }
    return TensorTrain3(std::move(c1), std::move(c2), s.n2, std::move(c3));
}

inline TensorTrain3 tt_add(const TensorTrain3& a, const TensorTrain3& b) {
    check_same_sizes(a, b, "tt_add");
    const std::array<const TensorTrain3*, 2> ptrs{&a, &b};
    const std::array<double, 2> coeffs{1.0, 1.0};
    return tt_sum(ptrs, coeffs);
}

inline TensorTrain3 tt_scale(const TensorTrain3& a, double s) {
    return TensorTrain3(a.core1(), a.core2_left(), a.sizes().n2, s * a.core3());
}

/// Frobenius inner product, contracted core by core.
inline double tt_dot(const TensorTrain3& a, const TensorTrain3& b) {
    check_same_sizes(a, b, "tt_dot");
    const Matrix phi1 = a.core1().transpose() * b.core1();  // ra1 x rb1
    Matrix phi2 = Matrix::Zero(a.rank2(), b.rank2());
    for (Index i2 = 0; i2 < a.sizes().n2; ++i2) phi2.noalias() += a.core2_slice(i2).transpose() * (phi1 * b.core2_slice(i2));
    return (phi2.cwiseProduct(a.core3() * b.core3().transpose())).sum();
}

inline double tt_norm(const TensorTrain3& a) { return std::sqrt(std::max(0.0, tt_dot(a, a))); }

// ---------------------------------------------------------------------------
// Binary dump: "TT3\0", then n1, n2, n3, r1, r2 as little-endian int64, then
// core1 (i1,a1), core2 (a1,i2,a2), core3 (a2,i3) as row-major little-endian
// float64.

namespace detail {

template <typename T>
T to_little_endian(T v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
        return v;
    }
}

template <typename T>
void write_le(std::ostream& os, T v) {
    v = to_little_endian(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("tt3: unexpected end of file");
    return to_little_endian(v);
}

}  // namespace detail

inline constexpr std::array<char, 4> kTt3Magic{'T', 'T', '3', '\0'};

inline void write_tt3(std::ostream& os, const TensorTrain3& z) {
    const ModeSizes s = z.sizes();
    os.write(kTt3Magic.data(), 4);
    for (Index v : {s.n1, s.n2, s.n3, z.rank1(), z.rank2()}) detail::write_le<std::int64_t>(os, v);
    for (Index i = 0; i < s.n1; ++i)
        for (Index a = 0; a < z.rank1(); ++a) detail::write_le<double>(os, z.core1()(i, a));
    for (Index a = 0; a < z.rank1(); ++a)
        for (Index i = 0; i < s.n2; ++i)
            for (Index b = 0; b < z.rank2(); ++b) detail::write_le<double>(os, z.core2(a, i, b));
    for (Index b = 0; b < z.rank2(); ++b)
        for (Index i = 0; i < s.n3; ++i) detail::write_le<double>(os, z.core3()(b, i));
}

inline TensorTrain3 read_tt3(std::istream& is) {
    std::array<char, 4> magic{};
    is.read(magic.data(), 4);
    if (!is || magic != kTt3Magic) throw std::runtime_error("tt3: bad magic");
    std::array<Index, 5> h{};
    for (auto& v : h) {
        v = detail::read_le<std::int64_t>(is);
        if (v < 1) throw std::runtime_error("tt3: non-positive size in header");
    }
    const auto [n1, n2, n3, r1, r2] = h;
    Matrix c1(n1, r1);
    Matrix c2(r1 * n2, r2);
    Matrix c3(r2, n3);
    for (Index i = 0; i < n1; ++i)
        for (Index a = 0; a < r1; ++a) c1(i, a) = detail::read_le<double>(is);
    for (Index a = 0; a < r1; ++a)
        for (Index i = 0; i < n2; ++i)
            for (Index b = 0; b < r2; ++b) c2(a + r1 * i, b) = detail::read_le<double>(is);
    for (Index b = 0; b < r2; ++b)
        for (Index i = 0; i < n3; ++i) c3(b, i) = detail::read_le<double>(is);
    return TensorTrain3(std::move(c1), std::move(c2), n2, std::move(c3));
}

inline void save_tt3(const std::string& path, const TensorTrain3& z) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_tt3(os, z);
}

inline TensorTrain3 load_tt3(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_tt3(is);
}

}  // namespace lrns
