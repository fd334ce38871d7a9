#pragma once

#include <cstring>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <unsupported/Eigen/KroneckerProduct>
#include <unsupported/Eigen/SparseExtra>

#include "lrns/fem.hpp"
#include "lrns/stochastic_basis.hpp"
#include "lrns/tt_core.hpp"

namespace lrns {

/// One Kronecker factor. Immutable and cheap to copy (shared storage), so the
/// same factor object can appear in many terms.
class KronFactor {
public:
    enum class Kind { identity, diagonal, sparse, dense };

    KronFactor() : KronFactor(identity(1)) {}

    static KronFactor identity(Index n) {
        auto d = std::make_shared<Data>();
        d->kind = Kind::identity;
        d->rows = d->cols = n;
        d->hash = static_cast<std::size_t>(n) * 0x9e3779b97f4a7c15ull;
        return KronFactor(std::move(d));
    }

    static KronFactor diagonal(Vector v) {
        auto d = std::make_shared<Data>();
        d->kind = Kind::diagonal;
        d->rows = d->cols = v.size();
        d->hash = hash_bytes(v.data(), v.size() * sizeof(double), 1);
        d->diag = std::move(v);
        return KronFactor(std::move(d));
    }

    /// Explicit zeros are dropped.
    static KronFactor sparse(SpMat a) {
        auto d = std::make_shared<Data>();
        d->kind = Kind::sparse;
        a.prune(0.0, 0.0);
        a.makeCompressed();
        d->rows = a.rows();
        d->cols = a.cols();
        std::size_t h = hash_bytes(a.valuePtr(), a.nonZeros() * sizeof(double), 2);
        h = hash_bytes(a.innerIndexPtr(), a.nonZeros() * sizeof(int), h);
        d->hash = hash_bytes(a.outerIndexPtr(), (a.outerSize() + 1) * sizeof(int), h);
        d->sp = std::move(a);
        return KronFactor(std::move(d));
    }

    static KronFactor dense(Matrix a) {
        auto d = std::make_shared<Data>();
        d->kind = Kind::dense;
        d->rows = a.rows();
        d->cols = a.cols();
        d->hash = hash_bytes(a.data(), a.size() * sizeof(double), 3 + a.rows());
        d->de = std::move(a);
        return KronFactor(std::move(d));
    }

    [[nodiscard]] Kind kind() const { return d_->kind; }
    [[nodiscard]] Index rows() const { return d_->rows; }
    [[nodiscard]] Index cols() const { return d_->cols; }
    [[nodiscard]] const Vector& diag() const { return d_->diag; }
    [[nodiscard]] const SpMat& sparse_matrix() const { return d_->sp; }
    [[nodiscard]] const Matrix& dense_matrix() const { return d_->de; }

    /// X * x, x has cols() rows.
    [[nodiscard]] Matrix apply(const Eigen::Ref<const Matrix>& x) const {
        switch (d_->kind) {
            case Kind::identity: return x;
            case Kind::diagonal: return d_->diag.asDiagonal() * x;
            case Kind::sparse: return d_->sp * x;
            case Kind::dense: return d_->de * x;
        }
        return {};
    }

    /// y * X^T, y has cols() columns.
    [[nodiscard]] Matrix apply_right_transpose(const Eigen::Ref<const Matrix>& y) const {
        switch (d_->kind) {
            case Kind::identity: return y;
            case Kind::diagonal: return y * d_->diag.asDiagonal();
            case Kind::sparse: return (d_->sp * y.transpose()).transpose();
            case Kind::dense: return y * d_->de.transpose();
        }
        return {};
    }

    [[nodiscard]] SpMat to_sparse() const {
        switch (d_->kind) {
            case Kind::identity: return detail::sparse_identity(d_->rows);
            case Kind::diagonal: {
                SpMat m(d_->rows, d_->cols);
                std::vector<Triplet> t;
                for (Index i = 0; i < d_->rows; ++i)
                    if (d_->diag(i) != 0.0) t.emplace_back(i, i, d_->diag(i));
                m.setFromTriplets(t.begin(), t.end());
                return m;
            }
            case Kind::sparse: return d_->sp;
            case Kind::dense: {
                SpMat m = d_->de.sparseView();
                m.makeCompressed();
                return m;
            }
        }
        return {};
    }

    [[nodiscard]] Matrix to_dense() const { return Matrix(to_sparse()); }

    /// True when both factors hold the same matrix (same storage, or identical
    /// kind, shape and entries).
    [[nodiscard]] bool same_as(const KronFactor& o) const {
        if (d_ == o.d_) return true;
        const Data& a = *d_;
        const Data& b = *o.d_;
        if (a.kind != b.kind || a.rows != b.rows || a.cols != b.cols || a.hash != b.hash) return false;
        switch (a.kind) {
            case Kind::identity: return true;
            case Kind::diagonal: return a.diag == b.diag;
            case Kind::dense: return a.de == b.de;
            case Kind::sparse:
                return a.sp.nonZeros() == b.sp.nonZeros() &&
                       std::memcmp(a.sp.valuePtr(), b.sp.valuePtr(), a.sp.nonZeros() * sizeof(double)) == 0 &&
                       std::memcmp(a.sp.innerIndexPtr(), b.sp.innerIndexPtr(), a.sp.nonZeros() * sizeof(int)) == 0 &&
                       std::memcmp(a.sp.outerIndexPtr(), b.sp.outerIndexPtr(), (a.sp.outerSize() + 1) * sizeof(int)) == 0;
        }
        return false;
    }

private:
    struct Data {
        Kind kind{Kind::identity};
        Index rows{0};
        Index cols{0};
        Vector diag;
        SpMat sp;
        Matrix de;
        std::size_t hash{0};
    };

    explicit KronFactor(std::shared_ptr<const Data> d) : d_(std::move(d)) {}

    static std::size_t hash_bytes(const void* p, std::size_t n, std::size_t seed) {
        // FNV-1a
        std::size_t h = 1469598103934665603ull ^ seed;
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 1099511628211ull;
        }
        return h;
    }

    std::shared_ptr<const Data> d_;
};

/// coeff * (x1 (x) x2 (x) x3): time, stochastic and spatial factors.
struct KronTerm {
    KronFactor x1;
    KronFactor x2;
    KronFactor x3;
    double coeff{1.0};
};

class KronSumOperator {
public:
    KronSumOperator() = default;
    KronSumOperator(ModeSizes rows, ModeSizes cols) : rows_(rows), cols_(cols) {}

    [[nodiscard]] const ModeSizes& row_sizes() const { return rows_; }
    [[nodiscard]] const ModeSizes& col_sizes() const { return cols_; }
    [[nodiscard]] const std::vector<KronTerm>& terms() const { return terms_; }
    [[nodiscard]] std::size_t size() const { return terms_.size(); }
    [[nodiscard]] bool empty() const { return terms_.empty(); }

    void add(KronTerm t) {
        if (t.x1.rows() != rows_.n1 || t.x2.rows() != rows_.n2 || t.x3.rows() != rows_.n3 ||
            t.x1.cols() != cols_.n1 || t.x2.cols() != cols_.n2 || t.x3.cols() != cols_.n3)
            throw DimensionError("KronSumOperator: term factor shapes do not match operator sizes " + to_string(rows_) +
                                 " <- " + to_string(cols_));
        terms_.push_back(std::move(t));
    }

    void add(KronFactor x1, KronFactor x2, KronFactor x3, double coeff = 1.0) {
        add(KronTerm{std::move(x1), std::move(x2), std::move(x3), coeff});
    }

    void append(const KronSumOperator& other, double scale = 1.0) {
        if (!(other.rows_ == rows_) || !(other.cols_ == cols_))
            throw DimensionError("KronSumOperator: cannot append operator of different shape");
        for (const auto& t : other.terms_) terms_.push_back({t.x1, t.x2, t.x3, scale * t.coeff});
    }

    /// Kronecker-expanded sparse matrix (small sizes only).
    [[nodiscard]] SpMat to_sparse(Index cap = kDefaultFullCap) const {
        check_cap(rows_, cap);
        check_cap(cols_, cap);
        SpMat out(rows_.total(), cols_.total());
        for (const auto& t : terms_) {
            SpMat k23 = Eigen::kroneckerProduct(t.x2.to_sparse(), t.x3.to_sparse());
            SpMat k = Eigen::kroneckerProduct(t.x1.to_sparse(), k23);
            out += t.coeff * k;
        }
        out.makeCompressed();
        return out;
    }

private:
    ModeSizes rows_{};
    ModeSizes cols_{};
    std::vector<KronTerm> terms_;
};

inline KronSumOperator operator+(KronSumOperator a, const KronSumOperator& b) {
    a.append(b);
    return a;
}

namespace detail {

inline void check_apply(const KronSumOperator& op, const TensorTrain3& z) {
    if (!(op.col_sizes() == z.sizes()))
        throw DimensionError("kron_apply: operator columns " + to_string(op.col_sizes()) + " do not match tensor " +
                             to_string(z.sizes()));
}

/// Left unfolding (r1*n2' x r2) of core2 after multiplying mode 2 by x.
inline Matrix apply_mode2(const KronFactor& x, const Matrix& core2_left, Index r1, Index n2, Index r2) {
    if (x.kind() == KronFactor::Kind::identity) return core2_left;
    const Index n2o = x.rows();
    Matrix out(r1 * n2o, r2);
    for (Index a2 = 0; a2 < r2; ++a2) {
        Eigen::Map<const Matrix> y(core2_left.col(a2).data(), r1, n2);
        Eigen::Map<Matrix>(out.col(a2).data(), r1, n2o) = x.apply_right_transpose(y);
    }
    return out;
}

inline Matrix apply_mode3(const KronFactor& x, const Matrix& core3) {
    if (x.kind() == KronFactor::Kind::identity) return core3;
    return x.apply(core3.transpose()).transpose();
}

}  // namespace detail

/// Exact product: each term gives a TT with the ranks of z, and the results are
/// concatenated in term order, so the output ranks are (T*r1, T*r2).
inline TensorTrain3 kron_apply(const KronSumOperator& op, const TensorTrain3& z) {
    detail::check_apply(op, z);
    if (op.empty()) return TensorTrain3::zero(op.row_sizes());
    const auto [r1, r2] = z.ranks();
    const Index n2 = z.sizes().n2;
    std::vector<TensorTrain3> parts;
    std::vector<double> coeffs;
    parts.reserve(op.size());
    for (const auto& t : op.terms()) {
        parts.emplace_back(t.x1.apply(z.core1()), detail::apply_mode2(t.x2, z.core2_left(), r1, n2, r2), t.x2.rows(),
                           detail::apply_mode3(t.x3, z.core3()));
        coeffs.push_back(t.coeff);
    }
    std::vector<const TensorTrain3*> ptrs;
    for (const auto& p : parts) ptrs.push_back(&p);
    return tt_sum(ptrs, coeffs);
}

/// Exact product with shared factors merged: terms with equal time factors share
/// a block of the first rank, terms with equal space factors share a block of
/// the second. Ranks are (A*r1, B*r2) for A distinct time and B distinct space
/// factors, never larger than those of kron_apply.
inline TensorTrain3 kron_apply_grouped(const KronSumOperator& op, const TensorTrain3& z) {
    detail::check_apply(op, z);
    if (op.empty()) return TensorTrain3::zero(op.row_sizes());
    const auto [r1, r2] = z.ranks();
    const Index n2 = z.sizes().n2;
    const ModeSizes out = op.row_sizes();

    std::vector<const KronFactor*> times;
    std::vector<const KronFactor*> spaces;
    std::vector<std::size_t> tid(op.size());
    std::vector<std::size_t> sid(op.size());
    auto find_or_add = [](std::vector<const KronFactor*>& list, const KronFactor& f) {
        for (std::size_t i = 0; i < list.size(); ++i)
            if (list[i]->same_as(f)) return i;
        list.push_back(&f);
        return list.size() - 1;
    };
    for (std::size_t t = 0; t < op.size(); ++t) {
        tid[t] = find_or_add(times, op.terms()[t].x1);
        sid[t] = find_or_add(spaces, op.terms()[t].x3);
    }
    const Index k1 = static_cast<Index>(times.size()) * r1;
    const Index k2 = static_cast<Index>(spaces.size()) * r2;

    Matrix c1(out.n1, k1);
    for (std::size_t a = 0; a < times.size(); ++a) c1.middleCols(a * r1, r1) = times[a]->apply(z.core1());
    Matrix c3(k2, out.n3);
    for (std::size_t b = 0; b < spaces.size(); ++b) c3.middleRows(b * r2, r2) = detail::apply_mode3(*spaces[b], z.core3());

    Matrix c2 = Matrix::Zero(k1 * out.n2, k2);
    for (std::size_t t = 0; t < op.size(); ++t) {
        const KronTerm& term = op.terms()[t];
        if (term.coeff == 0.0) continue;
        const Matrix w = detail::apply_mode2(term.x2, z.core2_left(), r1, n2, r2);
        const Index o1 = static_cast<Index>(tid[t]) * r1;
        const Index o2 = static_cast<Index>(sid[t]) * r2;
        for (Index i2 = 0; i2 < out.n2; ++i2)
            c2.block(i2 * k1 + o1, o2, r1, r2).noalias() += term.coeff * w.middleRows(i2 * r1, r1);
    }
    return TensorTrain3(std::move(c1), std::move(c2), out.n2, std::move(c3));
}

/// tt_round(kron_apply(op, z), eps), evaluated on the grouped product.
inline TensorTrain3 kron_apply_rounded(const KronSumOperator& op, const TensorTrain3& z, double eps) {
    return tt_round(kron_apply_grouped(op, z), eps);
}

/// Writes every distinct factor of `op` as a MatrixMarket file into `dir`
/// (term<k>_{time,stoch,space}.mtx).
inline void dump_factors(const KronSumOperator& op, const std::string& dir) {
    std::filesystem::create_directories(dir);
    for (std::size_t t = 0; t < op.size(); ++t) {
        const auto& term = op.terms()[t];
        const std::string base = dir + "/term" + std::to_string(t);
        Eigen::saveMarket(term.x1.to_sparse(), base + "_time.mtx");
        Eigen::saveMarket(term.x2.to_sparse(), base + "_stoch.mtx");
        Eigen::saveMarket(term.x3.to_sparse(), base + "_space.mtx");
    }
}

// ---------------------------------------------------------------------------
// Blocks of the all-at-once system

/// Unit subdiagonal shift C_{n_t}.
inline SpMat time_shift(Index n_t) {
    SpMat c(n_t, n_t);
    std::vector<Triplet> t;
    for (Index k = 1; k < n_t; ++k) t.emplace_back(k, k - 1, 1.0);
    c.setFromTriplets(t.begin(), t.end());
    return c;
}

inline KronSumOperator build_C(double tau, const SpMat& mass, Index n_t, Index n_xi) {
    KronSumOperator op({n_t, n_xi, mass.rows()}, {n_t, n_xi, mass.cols()});
    op.add(KronFactor::sparse(time_shift(n_t)), KronFactor::identity(n_xi), KronFactor::sparse(mass), -1.0 / tau);
    return op;
}

/// tau^{-1} I (x) I (x) M + sum_l I (x) G_l (x) A_l + conv.
inline KronSumOperator build_F(const SpMat& mass, const std::vector<SpMat>& stiff, const TripleProductMatrices& gpc,
                               Index n_t, double tau, const KronSumOperator& conv) {
    const Index n_xi = gpc.n_xi();
    if (gpc.G.size() != stiff.size())
        throw DimensionError("build_F: gPC data has " + std::to_string(gpc.G.size()) + " G matrices but " +
                             std::to_string(stiff.size()) + " stiffness matrices were given");
    const ModeSizes s{n_t, n_xi, mass.rows()};
    KronSumOperator op(s, s);
    const KronFactor it = KronFactor::identity(n_t);
    op.add(it, KronFactor::identity(n_xi), KronFactor::sparse(mass), 1.0 / tau);
    for (std::size_t l = 0; l < stiff.size(); ++l) op.add(it, KronFactor::sparse(gpc.G[l]), KronFactor::sparse(stiff[l]));
    if (!conv.empty()) op.append(conv);
    return op;
}

inline KronSumOperator build_F(const SpatialDiscretization& sd, const TripleProductMatrices& gpc, Index n_t, double tau,
                               const KronSumOperator& conv) {
    std::vector<SpMat> stiff;
    for (int l = 0; l <= sd.m(); ++l) stiff.push_back(sd.A(l));
    return build_F(sd.M(), stiff, gpc, n_t, tau, conv);
}

inline KronSumOperator build_B(Index n_t, Index n_xi, const SpMat& b) {
    KronSumOperator op({n_t, n_xi, b.rows()}, {n_t, n_xi, b.cols()});
    op.add(KronFactor::identity(n_t), KronFactor::identity(n_xi), KronFactor::sparse(b));
    return op;
}

inline KronSumOperator build_Bt(Index n_t, Index n_xi, const SpMat& b) {
    return build_B(n_t, n_xi, SpMat(b.transpose()));
}

using ConvectionAssembler = std::function<SpMat(const Vector& w_full)>;

namespace detail {

inline Vector space_row_full(const SpatialDiscretization& sd, const TensorTrain3& u, Index a2) {
    const Vector row = u.core3().row(a2).transpose();
    if (row.size() == sd.n_full()) return row;
    if (row.size() == sd.n_u()) return sd.embed(row);
    throw DimensionError("convection field must have n_u (free) or 2*n_q2 (full) spatial entries");
}

}  // namespace detail

/// sum_{a1,a2} diag(u1_a1) (x) (sum_l u2(a1,l,a2) H_l) (x) N(u3_a2), one term per
/// rank pair. `assemble` maps a full-layout field to its convection matrix.
inline KronSumOperator build_convection(const TensorTrain3& u_tilde, const TripleProductMatrices& gpc,
                                        const SpatialDiscretization& sd, const ConvectionAssembler& assemble,
                                        Index n_rows) {
    const Index n_xi = gpc.n_xi();
    if (u_tilde.sizes().n2 != n_xi) throw DimensionError("build_convection: stochastic size mismatch");
    const Index n_t = u_tilde.sizes().n1;
    const auto [k1, k2] = u_tilde.ranks();
    const ModeSizes s{n_t, n_xi, n_rows};
    KronSumOperator op(s, s);
    std::vector<KronFactor> time;
    for (Index a = 0; a < k1; ++a) time.push_back(KronFactor::diagonal(u_tilde.core1().col(a)));
    std::vector<KronFactor> space;
    for (Index b = 0; b < k2; ++b) space.push_back(KronFactor::sparse(assemble(detail::space_row_full(sd, u_tilde, b))));
    for (Index a = 0; a < k1; ++a)
        for (Index b = 0; b < k2; ++b) {
            Matrix mid = Matrix::Zero(n_xi, n_xi);
            for (Index l = 0; l < n_xi; ++l) {
                const double c = u_tilde.core2(a, l, b);
                if (c != 0.0) mid += c * Matrix(gpc.H.at(l));
            }
            op.add(time[a], KronFactor::dense(std::move(mid)), space[b]);
        }
    return op;
}

inline KronSumOperator build_N_from_tt(const TensorTrain3& u_tilde, const TripleProductMatrices& gpc,
                                       const SpatialDiscretization& sd) {
    return build_convection(u_tilde, gpc, sd, [&](const Vector& w) { return sd.N(w); }, sd.n_u());
}

/// psi_1 slice of a velocity TT as a TT with a single stochastic index.
inline TensorTrain3 mean_component(const TensorTrain3& u) {
    return TensorTrain3(u.core1(), Matrix(u.core2_slice(0)), 1, u.core3());
}

/// Mean-based convection sum_{a1} diag(w1_a1) (x) I (x) N(sum_{a2} w2(a1,1,a2) w3_a2),
/// the a2-sum folded into the spatial factor by linearity of N.
inline KronSumOperator build_mean_convection(const TensorTrain3& u_tilde, Index n_xi, const SpatialDiscretization& sd,
                                             const ConvectionAssembler& assemble, Index n_rows) {
    const Index n_t = u_tilde.sizes().n1;
    const ModeSizes s{n_t, n_xi, n_rows};
    KronSumOperator op(s, s);
    const Matrix mid = u_tilde.core2_slice(0);  // k1 x k2
    const KronFactor ixi = KronFactor::identity(n_xi);
    for (Index a = 0; a < u_tilde.rank1(); ++a) {
        Vector w = Vector::Zero(u_tilde.sizes().n3);
        for (Index b = 0; b < u_tilde.rank2(); ++b) w += mid(a, b) * u_tilde.core3().row(b).transpose();
        if (w.size() == sd.n_u()) w = sd.embed(w);
        op.add(KronFactor::diagonal(u_tilde.core1().col(a)), ixi, KronFactor::sparse(assemble(w)));
    }
    return op;
}

/// Time average of the psi_1 velocity component (full layout).
inline Vector mean_velocity_average(const TensorTrain3& u_tilde, const SpatialDiscretization& sd) {
    const Vector ones = Vector::Ones(u_tilde.sizes().n1) / static_cast<double>(u_tilde.sizes().n1);
    const Vector w = (ones.transpose() * u_tilde.core1() * u_tilde.core2_slice(0) * u_tilde.core3()).transpose();
    return w.size() == sd.n_u() ? sd.embed(w) : w;
}

/// Replaces every spatial factor X3 by left * X3 * right.
inline KronSumOperator transform_space(const KronSumOperator& op, const SpMat& left, const SpMat& right) {
    const ModeSizes r{op.row_sizes().n1, op.row_sizes().n2, left.rows()};
    const ModeSizes c{op.col_sizes().n1, op.col_sizes().n2, right.cols()};
    KronSumOperator out(r, c);
    std::vector<const KronFactor*> seen;
    std::vector<KronFactor> mapped;
    for (const auto& t : op.terms()) {
        std::size_t k = 0;
        while (k < seen.size() && !seen[k]->same_as(t.x3)) ++k;
        if (k == seen.size()) {
            seen.push_back(&t.x3);
            SpMat x = left * t.x3.to_sparse() * right;
            mapped.push_back(KronFactor::sparse(std::move(x)));
        }
        out.add(t.x1, t.x2, mapped[k], t.coeff);
    }
    return out;
}

}  // namespace lrns
