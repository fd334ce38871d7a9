#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseLU>
#include <unsupported/Eigen/KroneckerProduct>

#include "lrns/fem.hpp"
#include "lrns/kron_ops.hpp"
#include "lrns/stochastic_basis.hpp"
#include "lrns/tt_core.hpp"

namespace lrns {

/// Brute-force reference solutions for tiny instances.
struct DenseSolution {
    FullTensor3 u;  // free velocity dofs
    FullTensor3 p;
    int picard_steps{0};
    bool converged{false};
};

inline constexpr Index kOracleDofCap = 100'000;

namespace detail {

inline void check_oracle_size(const SpatialDiscretization& sd, Index n_xi, Index n_t) {
    const Index total = n_t * n_xi * (sd.n_u() + sd.n_p());
    if (total > kOracleDofCap)
        throw SizeCapError("dense oracle: " + std::to_string(total) + " unknowns exceed the cap of " +
                           std::to_string(kOracleDofCap));
}

inline SpMat sparse_solve_matrix(const std::vector<Triplet>& t, Index n) {
    SpMat a(n, n);
    a.setFromTriplets(t.begin(), t.end());
    a.makeCompressed();
    return a;
}

inline void add_block(std::vector<Triplet>& t, const SpMat& a, Index r0, Index c0, double s = 1.0) {
    for (Index j = 0; j < a.outerSize(); ++j)
        for (SpMat::InnerIterator it(a, j); it; ++it) t.emplace_back(r0 + it.row(), c0 + it.col(), s * it.value());
}

/// Full-layout velocity of stochastic mode l at one step: embed(u_l) + [l==0] g.
inline Vector full_mode(const SpatialDiscretization& sd, const Vector& u_free, bool with_lift, const Vector& g) {
    Vector w = sd.embed(u_free);
    if (with_lift) w += g;
    return w;
}

}  // namespace detail

/// All-at-once Picard iteration on the explicitly assembled sparse system,
/// solved directly at every step until the update stalls below `tol`.
inline DenseSolution dense_allatonce_solve(const SpatialDiscretization& sd, const TripleProductMatrices& gpc, Index n_t,
                                           double tau, double tol = 1e-13, int maxit = 100) {
    const Index nx = gpc.n_xi(), nu = sd.n_u(), np = sd.n_p();
    detail::check_oracle_size(sd, nx, n_t);
    const Index n_vel = n_t * nx * nu, n_all = n_vel + n_t * nx * np;
    const Vector ramp = ramp_values(sd, n_t, tau);
    const Vector g = sd.lift_full();

    const SpMat fc_lin = (build_F(sd, gpc, n_t, tau, KronSumOperator()) + build_C(tau, sd.M(), n_t, nx)).to_sparse();
    const SpMat bb = build_B(n_t, nx, sd.B()).to_sparse();
    const SpMat bbt = build_Bt(n_t, nx, sd.B()).to_sparse();

    // linear part of the lifted right-hand side
    Vector f_lin = Vector::Zero(n_all);
    for (Index k = 0; k < n_t; ++k) {
        const double gk = ramp(k), gprev = k > 0 ? ramp(k - 1) : 0.0;
        const Vector mg = sd.apply_bold_rows(sd.M_scalar_all(), g);
        f_lin.segment(k * nx * nu, nu) -= (gk - gprev) / tau * mg;
        for (int l = 0; l <= sd.m(); ++l) {
            const Vector ag = sd.apply_bold_rows(sd.A_scalar_all(l), g);
            const Vector gl = Matrix(gpc.G[l]).col(0);
            for (Index r = 0; r < nx; ++r) f_lin.segment((k * nx + r) * nu, nu) -= gl(r) * gk * ag;
        }
        f_lin.segment(n_vel + k * nx * np, np) = -gk * (sd.B_full() * g);
    }

    Vector x = Vector::Zero(n_all);
    DenseSolution out{FullTensor3({n_t, nx, nu}, kOracleDofCap), FullTensor3({n_t, nx, np}, kOracleDofCap), 0, false};
    for (int it = 1; it <= maxit; ++it) {
        std::vector<Triplet> trip;
        detail::add_block(trip, fc_lin, 0, 0);
        detail::add_block(trip, bbt, 0, n_vel);
        detail::add_block(trip, bb, n_vel, 0);
        Vector f = f_lin;
        for (Index k = 0; k < n_t; ++k) {
            for (Index l = 0; l < nx; ++l) {
                const Vector w = detail::full_mode(sd, x.segment((k * nx + l) * nu, nu), l == 0, ramp(k) * g);
                const SpMat nall = sd.convection_scalar_all(w);
                const SpMat nl = sd.N(w);
                const Vector lift_conv = sd.apply_bold_rows(nall, ramp(k) * g);
                for (Index col = 0; col < gpc.H[l].outerSize(); ++col)
                    for (SpMat::InnerIterator h(gpc.H[l], col); h; ++h) {
                        detail::add_block(trip, nl, (k * nx + h.row()) * nu, (k * nx + h.col()) * nu, h.value());
                        if (h.col() == 0) f.segment((k * nx + h.row()) * nu, nu) -= h.value() * lift_conv;
                    }
            }
        }
        const SpMat a = detail::sparse_solve_matrix(trip, n_all);
        Eigen::SparseLU<SpMat> lu(a);
        if (lu.info() != Eigen::Success) throw std::runtime_error("dense_allatonce_solve: factorization failed");
        const Vector xn = lu.solve(f);
        const double change = (xn - x).norm();
        x = xn;
        out.picard_steps = it;
        if (change <= tol * x.norm()) {
            out.converged = true;
            break;
        }
    }
    out.u.vec() = x.head(n_vel);
    out.p.vec() = x.tail(n_all - n_vel);
    return out;
}

/// Sequential backward Euler: one stochastic Galerkin Picard solve per time step.
inline DenseSolution sequential_solve(const SpatialDiscretization& sd, const TripleProductMatrices& gpc, Index n_t,
                                      double tau, double tol = 1e-13, int maxit = 100) {
    const Index nx = gpc.n_xi(), nu = sd.n_u(), np = sd.n_p();
    detail::check_oracle_size(sd, nx, n_t);
    const Index nv = nx * nu, n = nv + nx * np;
    const InflowProfile inflow = inflow_for(sd.mesh());
    const Vector g = sd.lift_full();
    SpMat ixi(nx, nx);
    ixi.setIdentity();

    SpMat lin = SpMat(Eigen::kroneckerProduct(ixi, sd.M())) / tau;
    for (int l = 0; l <= sd.m(); ++l) lin += SpMat(Eigen::kroneckerProduct(gpc.G[l], sd.A(l)));
    const SpMat bblk = Eigen::kroneckerProduct(ixi, sd.B());
    const SpMat btblk = Eigen::kroneckerProduct(ixi, sd.Bt());

    DenseSolution out{FullTensor3({n_t, nx, nu}, kOracleDofCap), FullTensor3({n_t, nx, np}, kOracleDofCap), 0, true};
    Vector u_prev = Vector::Zero(nv);
    double g_prev = 0.0;
    for (Index k = 0; k < n_t; ++k) {
        const double gk = inflow.ramp((k + 1) * tau);
        Vector rhs_lin = Vector::Zero(n);
        rhs_lin.head(nv) = SpMat(Eigen::kroneckerProduct(ixi, sd.M())) * u_prev / tau;
        rhs_lin.head(nu) -= (gk - g_prev) / tau * sd.apply_bold_rows(sd.M_scalar_all(), g);
        for (int l = 0; l <= sd.m(); ++l) {
            const Vector ag = sd.apply_bold_rows(sd.A_scalar_all(l), gk * g);
            for (Index r = 0; r < nx; ++r) rhs_lin.segment(r * nu, nu) -= gpc.G[l].coeff(r, 0) * ag;
        }
        rhs_lin.segment(nv, np) = -(sd.B_full() * (gk * g));

        Vector x = Vector::Zero(n);
        x.head(nv) = u_prev;
        bool conv = false;
        for (int it = 1; it <= maxit; ++it) {
            SpMat a11 = lin;
            Vector rhs = rhs_lin;
            for (Index l = 0; l < nx; ++l) {
                const Vector w = detail::full_mode(sd, x.segment(l * nu, nu), l == 0, gk * g);
                a11 += SpMat(Eigen::kroneckerProduct(gpc.H[l], sd.N(w)));
                const Vector lc = sd.apply_bold_rows(sd.convection_scalar_all(w), gk * g);
                for (Index r = 0; r < nx; ++r) rhs.segment(r * nu, nu) -= gpc.H[l].coeff(r, 0) * lc;
            }
            std::vector<Triplet> trip;
            detail::add_block(trip, a11, 0, 0);
            detail::add_block(trip, btblk, 0, nv);
            detail::add_block(trip, bblk, nv, 0);
            Eigen::SparseLU<SpMat> lu(detail::sparse_solve_matrix(trip, n));
            if (lu.info() != Eigen::Success) throw std::runtime_error("sequential_solve: factorization failed");
            const Vector xn = lu.solve(rhs);
            const double change = (xn - x).norm();
            x = xn;
            out.picard_steps += 1;
            if (change <= tol * x.norm()) {
                conv = true;
                break;
            }
        }
        out.converged = out.converged && conv;
        for (Index r = 0; r < nx; ++r) {
            for (Index i = 0; i < nu; ++i) out.u(k, r, i) = x(r * nu + i);
            for (Index i = 0; i < np; ++i) out.p(k, r, i) = x(nv + r * np + i);
        }
        u_prev = x.head(nv);
        g_prev = gk;
    }
    return out;
}

}  // namespace lrns
