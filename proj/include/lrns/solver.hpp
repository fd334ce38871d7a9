#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include "lrns/fem.hpp"
#include "lrns/kron_ops.hpp"
#include "lrns/stochastic_basis.hpp"
#include "lrns/tt_core.hpp"

namespace lrns {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class SolverError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class PrecondKind { pcd, lsc };

inline std::string to_string(PrecondKind k) { return k == PrecondKind::pcd ? "pcd" : "lsc"; }

inline PrecondKind parse_precond(const std::string& s) {
    if (s == "pcd" || s == "PCD") return PrecondKind::pcd;
    if (s == "lsc" || s == "LSC") return PrecondKind::lsc;
    throw ConfigError("unknown preconditioner '" + s + "' (expected pcd or lsc)");
}

struct PicardConfig {
    double tol_picard{1e-5};
    double tol_gmres{1e-1};
    double eps_gmres{1e-3};
    double eps_soln{1e-7};
    double eps_conv{1e-3};
    int maxit_picard{20};
    int maxit_gmres{100};
    int maxit_inner{100};
    PrecondKind prec{PrecondKind::lsc};
    double tol_inner{1e-1};

    /// Sets tol_gmres and the coupled eps_gmres = 1e-2 * tol_gmres.
    PicardConfig& set_tol_gmres(double t) {
        tol_gmres = t;
        eps_gmres = 1e-2 * t;
        return *this;
    }

    void validate() const {
        auto in01 = [](double v, const char* name) {
            if (!(v > 0.0 && v < 1.0)) throw ConfigError(std::string(name) + " must lie in (0,1)");
        };
        in01(tol_picard, "tol_picard");
        in01(tol_gmres, "tol_gmres");
        in01(eps_gmres, "eps_gmres");
        in01(eps_soln, "eps_soln");
        in01(eps_conv, "eps_conv");
        in01(tol_inner, "tol_inner");
        if (!(eps_gmres < tol_gmres)) throw ConfigError("eps_gmres must be smaller than tol_gmres");
        if (maxit_picard < 0 || maxit_gmres < 1 || maxit_inner < 1) throw ConfigError("iteration caps must be positive");
    }
};

// ---------------------------------------------------------------------------
// Vector types for the Krylov solver

/// Stacked (velocity, pressure) iterate. Inner products add up blockwise and
/// rounding treats the two trains separately.
struct TTPair {
    TensorTrain3 u;
    TensorTrain3 p;
};

template <class V>
struct RoundedVec {
    V v;
    double input_norm{0.0};
    double output_norm{0.0};
};

inline RoundedVec<TensorTrain3> vec_round_sum(std::span<const TensorTrain3* const> t, std::span<const double> c,
                                              double eps) {
    RoundResult r = tt_round_sum(t, c, eps);
    return {std::move(r.tt), r.input_norm, r.output_norm};
}

inline RoundedVec<TTPair> vec_round_sum(std::span<const TTPair* const> t, std::span<const double> c, double eps) {
    std::vector<const TensorTrain3*> us, ps;
    for (const TTPair* x : t) {
        us.push_back(&x->u);
        ps.push_back(&x->p);
    }
    RoundResult ru = tt_round_sum(us, c, eps);
    RoundResult rp = tt_round_sum(ps, c, eps);
    return {{std::move(ru.tt), std::move(rp.tt)}, std::hypot(ru.input_norm, rp.input_norm),
            std::hypot(ru.output_norm, rp.output_norm)};
}

inline double vec_dot(const TensorTrain3& a, const TensorTrain3& b) { return tt_dot(a, b); }
inline double vec_dot(const TTPair& a, const TTPair& b) { return tt_dot(a.u, b.u) + tt_dot(a.p, b.p); }
inline TensorTrain3 vec_zero_like(const TensorTrain3& a) { return TensorTrain3::zero(a.sizes()); }
inline TTPair vec_zero_like(const TTPair& a) { return {TensorTrain3::zero(a.u.sizes()), TensorTrain3::zero(a.p.sizes())}; }
inline TensorTrain3 vec_scale(const TensorTrain3& a, double s) { return tt_scale(a, s); }
inline TTPair vec_scale(const TTPair& a, double s) { return {tt_scale(a.u, s), tt_scale(a.p, s)}; }

template <class V>
RoundedVec<V> vec_round(const V& x, double eps) {
    const V* ptr = &x;
    const double one = 1.0;
    return vec_round_sum(std::span<const V* const>(&ptr, 1), std::span<const double>(&one, 1), eps);
}

template <class V>
using LinearMap = std::function<V(const V&)>;

template <class V>
struct GmresResult {
    V z;
    bool converged{false};
    bool breakdown{false};
    int iterations{0};
    double b_norm{0.0};
    /// ||s_k|| / ||b|| for k = 0..iterations.
    std::vector<double> history;
};

/// Flexible right-preconditioned GMRES on truncated tensor trains. `op` must
/// return the exact (unrounded) product; every stored vector is rounded with
/// `eps`: s_0, the new Krylov direction, the Arnoldi vector, the iterate z_k
/// and the residual s_k = T(b - op(z_k)), which is recomputed each iteration.
/// The orthogonalization coefficients are those of modified Gram-Schmidt on
/// the unrounded direction, evaluated from inner products.
template <class V>
GmresResult<V> lr_gmres(const LinearMap<V>& op, const V& b, const LinearMap<V>& prec, double tol, double eps, int maxit,
                        const V* z0 = nullptr) {
    GmresResult<V> res;
    const double bn = std::sqrt(std::max(0.0, vec_dot(b, b)));
    res.b_norm = bn;
    if (bn == 0.0) {
        res.z = vec_zero_like(b);
        res.converged = true;
        res.history.push_back(0.0);
        return res;
    }
    const V zstart = z0 ? *z0 : vec_zero_like(b);
    auto residual = [&](const V& z) {
        const V lz = op(z);
        const std::array<const V*, 2> t{&b, &lz};
        const std::array<double, 2> c{1.0, -1.0};
        return vec_round_sum(std::span<const V* const>(t), std::span<const double>(c), eps);
    };

    RoundedVec<V> s = z0 ? residual(zstart) : vec_round(b, eps);
    const double beta = s.output_norm;
    res.history.push_back(beta / bn);
    res.z = zstart;
    if (beta <= tol * bn) {
        res.converged = true;
        return res;
    }

    std::vector<V> vs{vec_scale(s.v, 1.0 / beta)};
    std::vector<V> zs;
    Matrix gram = Matrix::Identity(1, 1) * vec_dot(vs[0], vs[0]);
    Matrix hbar = Matrix::Zero(maxit + 1, maxit);
    double best = beta;
    V best_z = zstart;

    for (int k = 1; k <= maxit; ++k) {
        zs.push_back(prec(vs[k - 1]));
        const RoundedVec<V> xr = vec_round(op(zs.back()), eps);
        const V& x = xr.v;

        Vector h(k);
        for (int i = 0; i < k; ++i) {
            double hi = vec_dot(x, vs[i]);
            for (int j = 0; j < i; ++j) hi -= h(j) * gram(j, i);
            h(i) = hi;
        }
        std::vector<const V*> terms{&x};
        std::vector<double> coeffs{1.0};
        for (int i = 0; i < k; ++i) {
            terms.push_back(&vs[i]);
            coeffs.push_back(-h(i));
        }
        const RoundedVec<V> xf = vec_round_sum(std::span<const V* const>(terms), std::span<const double>(coeffs), eps);
        const double hk = xf.input_norm;
        hbar.col(k - 1).head(k) = h;
        hbar(k, k - 1) = hk;
        const bool breakdown = hk <= 1e-14 * xr.output_norm;
        if (!breakdown) {
            vs.push_back(vec_scale(xf.v, 1.0 / hk));
            Matrix g2 = Matrix::Zero(k + 1, k + 1);
            g2.topLeftCorner(k, k) = gram;
            for (int i = 0; i < k; ++i) g2(i, k) = g2(k, i) = vec_dot(vs[i], vs[k]);
            g2(k, k) = vec_dot(vs[k], vs[k]);
            gram = std::move(g2);
        }

        Vector rhs = Vector::Zero(k + 1);
        rhs(0) = beta;
        const Matrix hk_mat = hbar.topLeftCorner(k + 1, k);
        const Vector y = hk_mat.colPivHouseholderQr().solve(rhs);

        std::vector<const V*> zt{&zstart};
        std::vector<double> zc{1.0};
        for (int i = 0; i < k; ++i) {
            zt.push_back(&zs[i]);
            zc.push_back(y(i));
        }
        V zk = vec_round_sum(std::span<const V* const>(zt), std::span<const double>(zc), eps).v;
        s = residual(zk);
        res.iterations = k;
        res.history.push_back(s.output_norm / bn);
        if (s.output_norm < best) {
            best = s.output_norm;
            best_z = zk;
        }
        if (s.output_norm <= tol * bn) {
            res.converged = true;
            res.z = std::move(zk);
            return res;
        }
        if (breakdown) {
            res.breakdown = true;
            res.z = std::move(zk);
            return res;
        }
    }
    res.z = std::move(best_z);
    return res;
}

// ---------------------------------------------------------------------------
// Factor-wise helpers on tensor trains

/// Applies f to the space core: f maps an n3 x r2 matrix (core3^T) to n3' x r2.
template <class F>
TensorTrain3 map_space(const TensorTrain3& z, F&& f) {
    Matrix c3 = f(Matrix(z.core3().transpose()));
    return TensorTrain3(z.core1(), z.core2_left(), z.sizes().n2, Matrix(c3.transpose()));
}

/// (I - C)^{-1} along time: cumulative sums of the time core.
inline TensorTrain3 cumsum_time(const TensorTrain3& z) {
    Matrix c1 = z.core1();
    for (Index k = 1; k < c1.rows(); ++k) c1.row(k) += c1.row(k - 1);
    return TensorTrain3(std::move(c1), z.core2_left(), z.sizes().n2, z.core3());
}

// ---------------------------------------------------------------------------
// The all-at-once problem

struct SaddleSystem {
    KronSumOperator F_plus_C;
    KronSumOperator B_op;
    KronSumOperator Bt_op;
    TensorTrain3 rhs_u;
    TensorTrain3 rhs_p;

    /// Exact product [F+C, B^T; B, 0] (u; p).
    [[nodiscard]] TTPair apply(const TTPair& v) const {
        const TensorTrain3 a = kron_apply_grouped(F_plus_C, v.u);
        const TensorTrain3 b = kron_apply_grouped(Bt_op, v.p);
        return {tt_add(a, b), kron_apply_grouped(B_op, v.u)};
    }
};

struct NonlinearResidual {
    FullTensor3 r_u;
    FullTensor3 r_p;
    double norm{0.0};
};

inline constexpr Index kResidualCap = 50'000'000;

/// Space-time-stochastic Navier-Stokes problem on one mesh and gPC basis, with
/// the Dirichlet inflow lifted to the right-hand side.
class AllAtOnceProblem {
public:
    AllAtOnceProblem(const SpatialDiscretization& sd, const TripleProductMatrices& gpc, Index n_t, double tau,
                     double inflow_amplitude = 1.0)
        : sd_(&sd), gpc_(&gpc), n_t_(n_t), tau_(tau) {
        if (gpc.m() != sd.m()) throw DimensionError("AllAtOnceProblem: gPC and viscosity expansions differ in m");
        rhs_ = assemble_rhs_allatonce(sd, gpc, n_t, tau, inflow_amplitude);
        f_norm_ = std::hypot(tt_norm(rhs_.f_u), tt_norm(rhs_.f_p));
        g_ = inflow_amplitude * sd.lift_full();
        ramp_ = ramp_values(sd, n_t, tau);
        B_ = build_B(n_t, n_xi(), sd.B());
        Bt_ = build_Bt(n_t, n_xi(), sd.B());
        C_ = build_C(tau, sd.M(), n_t, n_xi());
    }

    [[nodiscard]] const SpatialDiscretization& sd() const { return *sd_; }
    [[nodiscard]] const TripleProductMatrices& gpc() const { return *gpc_; }
    [[nodiscard]] Index n_t() const { return n_t_; }
    [[nodiscard]] double tau() const { return tau_; }
    [[nodiscard]] Index n_xi() const { return gpc_->n_xi(); }
    [[nodiscard]] ModeSizes u_sizes() const { return {n_t_, n_xi(), sd_->n_u()}; }
    [[nodiscard]] ModeSizes p_sizes() const { return {n_t_, n_xi(), sd_->n_p()}; }
    [[nodiscard]] const AllAtOnceRhs& rhs() const { return rhs_; }
    [[nodiscard]] double f_norm() const { return f_norm_; }
    [[nodiscard]] const KronSumOperator& B_op() const { return B_; }
    [[nodiscard]] const KronSumOperator& Bt_op() const { return Bt_; }
    [[nodiscard]] const KronSumOperator& C_op() const { return C_; }
    [[nodiscard]] const Vector& ramp() const { return ramp_; }
    [[nodiscard]] const Vector& lift() const { return g_; }

    [[nodiscard]] KronSumOperator F_plus_C(const KronSumOperator& conv) const {
        return build_F(*sd_, *gpc_, n_t_, tau_, conv) + C_;
    }

    [[nodiscard]] SaddleSystem system(const KronSumOperator& conv) const {
        return {F_plus_C(conv), B_, Bt_, rhs_.f_u, rhs_.f_p};
    }

    /// Full-layout velocity embed(u) + ramp (x) e_1 (x) g.
    [[nodiscard]] TensorTrain3 full_velocity(const TensorTrain3& u) const {
        Matrix c3(u.rank2(), sd_->n_full());
        for (Index b = 0; b < u.rank2(); ++b) c3.row(b) = sd_->embed(u.core3().row(b).transpose()).transpose();
        const TensorTrain3 inner(u.core1(), u.core2_left(), u.sizes().n2, std::move(c3));
        Vector e1 = Vector::Zero(n_xi());
        e1(0) = 1.0;
        return tt_add(inner, TensorTrain3::rank1(ramp_, e1, g_));
    }

    /// f - L(u)(u; p) with the convection of the full velocity (Dirichlet part
    /// included) evaluated at the quadrature points.
    [[nodiscard]] NonlinearResidual residual(const TensorTrain3& u, const TensorTrain3& p) const {
        const SpatialDiscretization& sd = *sd_;
        const Index nx = n_xi(), nu = sd.n_u(), np = sd.n_p();
        if (!(u.sizes() == u_sizes()) || !(p.sizes() == p_sizes()))
            throw DimensionError("residual: iterate sizes do not match the problem");
        NonlinearResidual out{tt_to_full(rhs_.f_u, kResidualCap), tt_to_full(rhs_.f_p, kResidualCap), 0.0};
        const FullTensor3 uf = tt_to_full(u, kResidualCap);
        const FullTensor3 pf = tt_to_full(p, kResidualCap);
        const Index nq = sd.mesh().n_elements() * 9;

        // nonzero triples (l, r, s) of the H tensor
        struct Triple {
            Index l, r, s;
            double c;
        };
        std::vector<Triple> triples;
        for (Index l = 0; l < nx; ++l)
            for (Index col = 0; col < gpc_->H[l].outerSize(); ++col)
                for (SpMat::InnerIterator it(gpc_->H[l], col); it; ++it)
                    triples.push_back({l, it.row(), it.col(), it.value()});

        std::vector<Matrix> g_dense;
        for (int l = 0; l <= sd.m(); ++l) g_dense.emplace_back(Matrix(gpc_->G[l]).transpose());
        Matrix prev = Matrix::Zero(nu, nx);
        for (Index k = 0; k < n_t_; ++k) {
            Eigen::Map<const Matrix> uk(uf.vec().data() + k * nx * nu, nu, nx);
            Eigen::Map<const Matrix> pk(pf.vec().data() + k * nx * np, np, nx);
            Eigen::Map<Matrix> ru(out.r_u.vec().data() + k * nx * nu, nu, nx);
            Eigen::Map<Matrix> rp(out.r_p.vec().data() + k * nx * np, np, nx);

            ru -= sd.M() * (uk - prev) / tau_;
            for (int l = 0; l <= sd.m(); ++l) ru -= sd.A(l) * uk * g_dense[l];
            ru -= sd.Bt() * pk;
            rp -= sd.B() * uk;
            prev = uk;

            std::vector<Matrix> qp(nx);
            for (Index s = 0; s < nx; ++s) {
                Vector w = sd.embed(uk.col(s));
                if (s == 0) w += ramp_(k) * g_;
                qp[s] = sd.eval_at_quadrature(w);
            }
            std::vector<Matrix> conv(nx, Matrix::Zero(nq, 2));
            for (const Triple& t : triples) {
                const Matrix& a = qp[t.l];
                const Matrix& b = qp[t.s];
                conv[t.r].col(0).array() += t.c * (a.col(0).array() * b.col(2).array() + a.col(1).array() * b.col(3).array());
                conv[t.r].col(1).array() += t.c * (a.col(0).array() * b.col(4).array() + a.col(1).array() * b.col(5).array());
            }
            for (Index r = 0; r < nx; ++r) ru.col(r) -= sd.load_from_quadrature(conv[r]);
        }
        out.norm = std::hypot(out.r_u.norm(), out.r_p.norm());
        return out;
    }

private:
    const SpatialDiscretization* sd_;
    const TripleProductMatrices* gpc_;
    Index n_t_;
    double tau_;
    AllAtOnceRhs rhs_;
    double f_norm_{0.0};
    Vector g_;
    Vector ramp_;
    KronSumOperator B_, Bt_, C_;
};

// ---------------------------------------------------------------------------
// Preconditioners

/// p = -S^{-1} v_p, u = F^{-1}(T(v_u - B^T p)), each stage rounded with eps.
inline TTPair block_triangular_apply(const TTPair& v, const LinearMap<TensorTrain3>& schur_inv,
                                     const LinearMap<TensorTrain3>& f_solve, const KronSumOperator& bt, double eps) {
    const TensorTrain3 ph = tt_round(tt_scale(schur_inv(v.p), -1.0), eps);
    const TensorTrain3 btp = kron_apply_grouped(bt, ph);
    const std::array<const TensorTrain3*, 2> t{&v.u, &btp};
    const std::array<double, 2> c{1.0, -1.0};
    const TensorTrain3 rhs = tt_round_sum(t, c, eps).tt;
    return {f_solve(rhs), ph};
}

struct PreconditionerStats {
    int applications{0};
    int inner_iterations{0};
    int inner_failures{0};
};

/// Mean-based block triangular preconditioner built from the psi_1 component
/// of the convection field (none for Stokes).
class MeanBasedPreconditioner {
public:
    MeanBasedPreconditioner(const AllAtOnceProblem& prob, const TensorTrain3* u_tilde, PrecondKind kind, double eps,
                            double tol_inner, int maxit_inner)
        : prob_(&prob), kind_(kind), eps_(eps), tol_inner_(tol_inner), maxit_inner_(maxit_inner) {
        const SpatialDiscretization& sd = prob.sd();
        const Index n_t = prob.n_t(), n_xi = prob.n_xi();
        const double tau = prob.tau();
        const ModeSizes su = prob.u_sizes(), sp = prob.p_sizes();

        f0c_ = KronSumOperator(su, su);
        const KronFactor it = KronFactor::identity(n_t), ixi = KronFactor::identity(n_xi);
        const KronFactor mass = KronFactor::sparse(sd.M());
        f0c_.add(it, ixi, mass, 1.0 / tau);
        f0c_.add(it, ixi, KronFactor::sparse(sd.A(0)));
        f0c_.add(KronFactor::sparse(time_shift(n_t)), ixi, mass, -1.0 / tau);
        SpMat k = (1.0 / tau) * sd.M() + sd.A(0);
        if (u_tilde) {
            f0c_.append(build_mean_convection(*u_tilde, n_xi, sd, [&](const Vector& w) { return sd.N(w); }, sd.n_u()));
            k += sd.N(mean_velocity_average(*u_tilde, sd));
        }
        k.makeCompressed();
        k_lu_.compute(k);
        if (k_lu_.info() != Eigen::Success) throw SolverError("mean spatial operator factorization failed");

        minv_ = sd.M_diag().cwiseInverse();
        const SpMat bminv = sd.B() * minv_.asDiagonal();
        SpMat ap = bminv * sd.Bt();
        ap.makeCompressed();
        ap_ldlt_.compute(ap);
        if (ap_ldlt_.info() != Eigen::Success) throw SolverError("pressure Poisson operator B M*^{-1} B^T is singular");

        if (kind == PrecondKind::pcd) {
            fpc_ = KronSumOperator(sp, sp);
            const KronFactor mp = KronFactor::sparse(sd.Mp());
            fpc_.add(it, ixi, mp, 1.0 / tau);
            fpc_.add(it, ixi, KronFactor::sparse(sd.Ap0()));
            fpc_.add(KronFactor::sparse(time_shift(n_t)), ixi, mp, -1.0 / tau);
            if (u_tilde)
                fpc_.append(build_mean_convection(*u_tilde, n_xi, sd, [&](const Vector& w) { return sd.Np(w); }, sd.n_p()));
            mpinv_ = sd.Mp_diag().cwiseInverse();
        } else {
            const SpMat right = minv_.asDiagonal() * sd.Bt();
            lsc_mid_ = transform_space(f0c_, bminv, right);
        }
    }

    [[nodiscard]] const KronSumOperator& F0C() const { return f0c_; }
    [[nodiscard]] const KronSumOperator& FpC() const { return fpc_; }
    [[nodiscard]] const KronSumOperator& lsc_middle() const { return lsc_mid_; }
    [[nodiscard]] const PreconditionerStats& stats() const { return stats_; }
    [[nodiscard]] PrecondKind kind() const { return kind_; }

    /// (B M*^{-1} B^T)^{-1} along the space mode.
    [[nodiscard]] TensorTrain3 poisson_solve(const TensorTrain3& v) const {
        return map_space(v, [&](const Matrix& x) -> Matrix { return ap_ldlt_.solve(x); });
    }

    [[nodiscard]] TensorTrain3 schur_pcd_apply(const TensorTrain3& vp) const {
        if (fpc_.empty()) throw std::logic_error("schur_pcd_apply: preconditioner was built for LSC");
        const TensorTrain3 scaled = map_space(vp, [&](const Matrix& x) -> Matrix { return mpinv_.asDiagonal() * x; });
        return poisson_solve(kron_apply_rounded(fpc_, scaled, eps_));
    }

    [[nodiscard]] TensorTrain3 schur_lsc_apply(const TensorTrain3& vp) const {
        if (lsc_mid_.empty()) throw std::logic_error("schur_lsc_apply: preconditioner was built for PCD");
        return poisson_solve(kron_apply_rounded(lsc_mid_, poisson_solve(vp), eps_));
    }

    [[nodiscard]] TensorTrain3 schur_apply(const TensorTrain3& vp) const {
        return kind_ == PrecondKind::pcd ? schur_pcd_apply(vp) : schur_lsc_apply(vp);
    }

    /// M^{-1} = (I - C)^{-1} (x) I (x) (tau^{-1} M + A_0 + N(w_avg))^{-1}.
    [[nodiscard]] TensorTrain3 apply_M_inverse(const TensorTrain3& y) const {
        return cumsum_time(map_space(y, [&](const Matrix& x) -> Matrix { return k_lu_.solve(x); }));
    }

    /// Inner low-rank GMRES on (F_0 + C) v = y.
    TensorTrain3 solve_F0C(const TensorTrain3& y, double tol) {
        const LinearMap<TensorTrain3> op = [&](const TensorTrain3& v) { return kron_apply_grouped(f0c_, v); };
        const LinearMap<TensorTrain3> pm = [&](const TensorTrain3& v) { return apply_M_inverse(v); };
        GmresResult<TensorTrain3> r = lr_gmres(op, y, pm, tol, eps_, maxit_inner_);
        stats_.inner_iterations += r.iterations;
        if (!r.converged) ++stats_.inner_failures;
        last_inner_ = r.iterations;
        return std::move(r.z);
    }

    [[nodiscard]] int last_inner_iterations() const { return last_inner_; }

    TTPair apply(const TTPair& v) {
        ++stats_.applications;
        return block_triangular_apply(
            v, [&](const TensorTrain3& x) { return schur_apply(x); },
            [&](const TensorTrain3& x) { return solve_F0C(x, tol_inner_); }, prob_->Bt_op(), eps_);
    }

private:
    const AllAtOnceProblem* prob_;
    PrecondKind kind_;
    double eps_;
    double tol_inner_;
    int maxit_inner_;
    KronSumOperator f0c_, fpc_, lsc_mid_;
    Eigen::SparseLU<SpMat> k_lu_;
    Eigen::SimplicialLDLT<SpMat> ap_ldlt_;
    Vector minv_, mpinv_;
    PreconditionerStats stats_;
    int last_inner_{0};
};

// ---------------------------------------------------------------------------
// Picard iteration

struct PicardStepRecord {
    int step{0};
    double residual{0.0};
    double rel_residual{0.0};
    int gmres_iterations{0};
    bool gmres_converged{false};
    double gmres_rel_residual{0.0};
    int inner_iterations{0};
    std::array<Index, 2> ranks_du{0, 0};
    std::array<Index, 2> ranks_dp{0, 0};
    std::array<Index, 2> ranks_u{0, 0};
    std::array<Index, 2> ranks_p{0, 0};
    std::array<Index, 2> ranks_ut{0, 0};
    double seconds{0.0};
};

struct PicardReport {
    /// Entry 0 is the Stokes start, entry i >= 1 the i-th Picard step.
    std::vector<PicardStepRecord> steps;
    bool converged{false};
    double f_norm{0.0};
    double solve_seconds{0.0};
    double divergence_norm{0.0};

    [[nodiscard]] int picard_steps() const { return steps.empty() ? 0 : static_cast<int>(steps.size()) - 1; }
    [[nodiscard]] int total_gmres() const {
        int s = 0;
        for (const auto& r : steps) s += r.gmres_iterations;
        return s;
    }
};

struct PicardResult {
    TensorTrain3 u;
    TensorTrain3 p;
    TensorTrain3 u_tilde;
    PicardReport report;
};

using PicardObserver = std::function<void(const PicardStepRecord&)>;

inline PicardResult picard_solve(const AllAtOnceProblem& prob, const PicardConfig& cfg, const PicardObserver& observe = {}) {
    cfg.validate();
    using clock = std::chrono::steady_clock;
    const auto t_start = clock::now();
    PicardResult out;
    PicardReport& rep = out.report;
    rep.f_norm = prob.f_norm();
    if (rep.f_norm == 0.0) {
        out.u = TensorTrain3::zero(prob.u_sizes());
        out.p = TensorTrain3::zero(prob.p_sizes());
        out.u_tilde = TensorTrain3::zero({prob.n_t(), prob.n_xi(), prob.sd().n_full()});
        rep.converged = true;
        rep.steps.push_back({});
        return out;
    }

    auto solve_linear = [&](const SaddleSystem& sys, const TTPair& b, const TensorTrain3* ut, PicardStepRecord& rec) {
        MeanBasedPreconditioner prec(prob, ut, cfg.prec, cfg.eps_gmres, cfg.tol_inner, cfg.maxit_inner);
        const LinearMap<TTPair> op = [&](const TTPair& v) { return sys.apply(v); };
        const LinearMap<TTPair> pm = [&](const TTPair& v) { return prec.apply(v); };
        GmresResult<TTPair> g = lr_gmres(op, b, pm, cfg.tol_gmres, cfg.eps_gmres, cfg.maxit_gmres);
        rec.gmres_iterations = g.iterations;
        rec.gmres_converged = g.converged;
        rec.gmres_rel_residual = g.history.back();
        rec.inner_iterations = prec.stats().inner_iterations;
        return std::move(g.z);
    };
    auto finish = [&](PicardStepRecord& rec, const NonlinearResidual& r, clock::time_point t0) {
        rec.residual = r.norm;
        rec.rel_residual = r.norm / rep.f_norm;
        rec.ranks_u = out.u.ranks();
        rec.ranks_p = out.p.ranks();
        rec.ranks_ut = out.u_tilde.ranks();
        rec.seconds = std::chrono::duration<double>(clock::now() - t0).count();
        rep.steps.push_back(rec);
        if (observe) observe(rec);
    };

    // Stokes start
    auto t0 = clock::now();
    PicardStepRecord rec0;
    {
        const SaddleSystem stokes = prob.system(KronSumOperator());
        TTPair z = solve_linear(stokes, {stokes.rhs_u, stokes.rhs_p}, nullptr, rec0);
        out.u = tt_round(z.u, cfg.eps_soln);
        out.p = tt_round(z.p, cfg.eps_soln);
        rec0.ranks_du = out.u.ranks();
        rec0.ranks_dp = out.p.ranks();
    }
    out.u_tilde = tt_round(prob.full_velocity(out.u), cfg.eps_conv);
    NonlinearResidual r = prob.residual(out.u, out.p);
    finish(rec0, r, t0);

    int i = 0;
    while (r.norm > cfg.tol_picard * rep.f_norm && i < cfg.maxit_picard) {
        ++i;
        t0 = clock::now();
        PicardStepRecord rec;
        rec.step = i;
        const SaddleSystem sys = prob.system(build_N_from_tt(out.u_tilde, prob.gpc(), prob.sd()));
        const TTPair b{tt_from_full(r.r_u, cfg.eps_gmres), tt_from_full(r.r_p, cfg.eps_gmres)};
        const TTPair dz = solve_linear(sys, b, &out.u_tilde, rec);
        rec.ranks_du = dz.u.ranks();
        rec.ranks_dp = dz.p.ranks();
        out.u = tt_round(tt_add(out.u, dz.u), cfg.eps_soln);
        out.p = tt_round(tt_add(out.p, dz.p), cfg.eps_soln);
        out.u_tilde = tt_round(prob.full_velocity(out.u), cfg.eps_conv);
        r = prob.residual(out.u, out.p);
        finish(rec, r, t0);
    }
    rep.converged = r.norm <= cfg.tol_picard * rep.f_norm;
    rep.divergence_norm = r.r_p.norm();
    rep.solve_seconds = std::chrono::duration<double>(clock::now() - t_start).count();
    return out;
}

}  // namespace lrns
