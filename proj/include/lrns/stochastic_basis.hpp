#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace lrns {

using SpMat = Eigen::SparseMatrix<double>;
using Triplet = Eigen::Triplet<double>;

/// Multivariate Legendre chaos of total degree <= d_psi in m uniform variables
/// on [-sqrt(3), sqrt(3)]. Multi-indices are graded by total degree and ordered
/// descending-lexicographically inside each degree, so index 0 is the constant
/// and index l (1 <= l <= m) is the linear polynomial xi_l.
struct GpcBasis {
    int m{0};
    int d_psi{0};
    std::vector<std::vector<int>> multi_indices;

    [[nodiscard]] int n_xi() const { return static_cast<int>(multi_indices.size()); }
};

inline std::int64_t binomial(int n, int k) {
    if (k < 0 || k > n) return 0;
    std::int64_t r = 1;
    for (int i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

/// (m + d)! / (m! d!)
inline std::int64_t gpc_size(int m, int d_psi) { return binomial(m + d_psi, d_psi); }

namespace detail {

inline void compositions_desc(int m, int remaining, int pos, std::vector<int>& cur,
                              std::vector<std::vector<int>>& out) {
    if (pos == m - 1) {
        cur[pos] = remaining;
        out.push_back(cur);
        return;
    }
    for (int v = remaining; v >= 0; --v) {
        cur[pos] = v;
        compositions_desc(m, remaining - v, pos + 1, cur, out);
    }
}

}  // namespace detail

inline GpcBasis build_basis(int m, int d_psi) {
    if (m < 0) throw std::invalid_argument("build_basis: m must be >= 0");
    if (d_psi < 0) throw std::invalid_argument("build_basis: d_psi must be >= 0");
    GpcBasis b;
    b.m = m;
    b.d_psi = d_psi;
    if (m == 0) {
        // deterministic case: only psi_1 = 1
        b.multi_indices.emplace_back();
        return b;
    }
    std::vector<int> cur(m, 0);
    for (int deg = 0; deg <= d_psi; ++deg) detail::compositions_desc(m, deg, 0, cur, b.multi_indices);
    return b;
}

/// Gauss-Legendre rule on [-1, 1] (Newton on the three-term recurrence).
struct QuadRule {
    Eigen::VectorXd x;
    Eigen::VectorXd w;
};

inline QuadRule gauss_legendre(int q) {
    if (q < 1) throw std::invalid_argument("gauss_legendre: need at least one point");
    QuadRule r{Eigen::VectorXd(q), Eigen::VectorXd(q)};
    for (int i = 0; i < q; ++i) {
        double x = std::cos(std::numbers::pi * (i + 0.75) / (q + 0.5));
        double dp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = x;
            for (int k = 2; k <= q; ++k) {
                const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = q * (x * p1 - p0) / (x * x - 1.0);
            const double dx = p1 / dp;
            x -= dx;
            if (std::abs(dx) < 1e-16) break;
        }
        // recompute derivative at the converged node
        double p0 = 1.0, p1 = x;
        for (int k = 2; k <= q; ++k) {
            const double p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        dp = q * (x * p1 - p0) / (x * x - 1.0);
        r.x(i) = x;
        r.w(i) = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    return r;
}

/// Points per dimension that integrate triple products of degree-d_psi
/// polynomials (and xi times two of them) exactly.
inline int default_quad_points(int d_psi) { return (3 * d_psi + 2 + 1) / 2; }

/// Values of the orthonormal univariate polynomials p_0..p_d at the nodes of a
/// q-point rule for the uniform density on [-sqrt(3), sqrt(3)].
/// Returns (values (q x d+1), nodes, probability weights).
struct UnivariateTable {
    Eigen::MatrixXd values;
    Eigen::VectorXd nodes;
    Eigen::VectorXd weights;
};

inline UnivariateTable univariate_table(int d_psi, int q) {
    const QuadRule g = gauss_legendre(q);
    UnivariateTable t;
    t.nodes = std::sqrt(3.0) * g.x;
    t.weights = 0.5 * g.w;
    t.values.resize(q, d_psi + 1);
    for (int i = 0; i < q; ++i) {
        const double s = g.x(i);
        double p0 = 1.0, p1 = s;
        t.values(i, 0) = 1.0;
        if (d_psi >= 1) t.values(i, 1) = s;
        for (int k = 2; k <= d_psi; ++k) {
            const double p2 = ((2.0 * k - 1.0) * s * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
            t.values(i, k) = p2;
        }
    }
    for (int k = 0; k <= d_psi; ++k) {
        const double nrm2 = (t.weights.array() * t.values.col(k).array().square()).sum();
        t.values.col(k) /= std::sqrt(nrm2);
    }
    return t;
}

/// Evaluate psi_r at a point xi (length m).
inline double eval_basis(const GpcBasis& basis, int r, const Eigen::VectorXd& xi) {
    double v = 1.0;
    for (int k = 0; k < basis.m; ++k) {
        const int deg = basis.multi_indices[r][k];
        const double s = xi(k) / std::sqrt(3.0);
        double p0 = 1.0, p1 = s, pk = 1.0;
        if (deg == 1) pk = s;
        for (int j = 2; j <= deg; ++j) {
            const double p2 = ((2.0 * j - 1.0) * s * p1 - (j - 1.0) * p0) / j;
            p0 = p1;
            p1 = p2;
            pk = p2;
        }
        v *= std::sqrt(2.0 * deg + 1.0) * pk;
    }
    return v;
}

/// G[l](r,s) = <xi_l psi_r psi_s> for l = 0..m (xi_0 = 1),
/// H[l](r,s) = <psi_l psi_r psi_s> for l = 0..n_xi-1 (0-based; H[0] is the
/// constant polynomial).
struct TripleProductMatrices {
    std::vector<SpMat> G;
    std::vector<SpMat> H;

    [[nodiscard]] int n_xi() const { return G.empty() ? 0 : static_cast<int>(G[0].rows()); }
    [[nodiscard]] int m() const { return static_cast<int>(G.size()) - 1; }
};

inline constexpr double kTripleDropTol = 1e-12;

/// Raw (unsymmetrized, undropped) triple products from the tensorized rule with
/// q points per dimension. Both outputs are dense n_xi x n_xi matrices.
struct RawTripleProducts {
    std::vector<Eigen::MatrixXd> G;
    std::vector<Eigen::MatrixXd> H;
};

inline RawTripleProducts raw_triple_products(const GpcBasis& basis, int q) {
    const int n = basis.n_xi();
    const int d = basis.d_psi;
    const UnivariateTable t = univariate_table(d, q);
    // 1D tables: pair[a][b] = <p_a p_b>, lin[a][b] = <xi p_a p_b>, tri[c][a][b] = <p_c p_a p_b>
    std::vector<double> pair((d + 1) * (d + 1)), lin((d + 1) * (d + 1)), tri((d + 1) * (d + 1) * (d + 1));
    auto P = [&](int a, int b) -> double& { return pair[a * (d + 1) + b]; };
    auto L = [&](int a, int b) -> double& { return lin[a * (d + 1) + b]; };
    auto T = [&](int c, int a, int b) -> double& { return tri[(c * (d + 1) + a) * (d + 1) + b]; };
    for (int a = 0; a <= d; ++a)
        for (int b = 0; b <= d; ++b) {
            double sp = 0, sl = 0;
            for (int i = 0; i < q; ++i) {
                const double f = t.weights(i) * t.values(i, a) * t.values(i, b);
                sp += f;
                sl += f * t.nodes(i);
            }
            P(a, b) = sp;
            L(a, b) = sl;
            for (int c = 0; c <= d; ++c) {
                double st = 0;
                for (int i = 0; i < q; ++i) st += t.weights(i) * t.values(i, c) * t.values(i, a) * t.values(i, b);
                T(c, a, b) = st;
            }
        }
    const auto& mi = basis.multi_indices;
    RawTripleProducts out;
    out.G.assign(basis.m + 1, Eigen::MatrixXd::Zero(n, n));
    out.H.assign(n, Eigen::MatrixXd::Zero(n, n));
    for (int r = 0; r < n; ++r)
        for (int s = 0; s < n; ++s) {
            double g0 = 1.0;
            for (int k = 0; k < basis.m; ++k) g0 *= P(mi[r][k], mi[s][k]);
            out.G[0](r, s) = g0;
            for (int l = 1; l <= basis.m; ++l) {
                double v = 1.0;
                for (int k = 0; k < basis.m; ++k)
                    v *= (k == l - 1) ? L(mi[r][k], mi[s][k]) : P(mi[r][k], mi[s][k]);
                out.G[l](r, s) = v;
            }
            for (int c = 0; c < n; ++c) {
                double v = 1.0;
                for (int k = 0; k < basis.m; ++k) v *= T(mi[c][k], mi[r][k], mi[s][k]);
                out.H[c](r, s) = v;
            }
        }
    return out;
}

namespace detail {

inline SpMat symmetrize_and_drop(const Eigen::MatrixXd& a) {
    const Eigen::MatrixXd s = 0.5 * (a + a.transpose());
    std::vector<Triplet> trips;
    for (Eigen::Index j = 0; j < s.cols(); ++j)
        for (Eigen::Index i = 0; i < s.rows(); ++i)
            if (std::abs(s(i, j)) >= kTripleDropTol) trips.emplace_back(i, j, s(i, j));
    SpMat m(s.rows(), s.cols());
    m.setFromTriplets(trips.begin(), trips.end());
    return m;
}

inline SpMat sparse_identity(Eigen::Index n) {
    SpMat m(n, n);
    m.setIdentity();
    return m;
}

}  // namespace detail

/// Triple-product matrices by tensorized Gauss-Legendre quadrature with
/// `q` points per dimension (default ceil((3 d_psi + 2)/2)).
inline TripleProductMatrices triple_products(const GpcBasis& basis, int q = 0) {
    if (q <= 0) q = default_quad_points(basis.d_psi);
    const RawTripleProducts raw = raw_triple_products(basis, q);
    const int n = basis.n_xi();
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
    if ((raw.G[0] - eye).cwiseAbs().maxCoeff() > 1e-13 || (raw.H[0] - eye).cwiseAbs().maxCoeff() > 1e-13)
        throw std::runtime_error("triple_products: quadrature Gram matrix is not the identity");
    TripleProductMatrices tp;
    tp.G.reserve(raw.G.size());
    tp.H.reserve(raw.H.size());
    tp.G.push_back(detail::sparse_identity(n));
    for (std::size_t l = 1; l < raw.G.size(); ++l) tp.G.push_back(detail::symmetrize_and_drop(raw.G[l]));
    tp.H.push_back(detail::sparse_identity(n));
    for (std::size_t l = 1; l < raw.H.size(); ++l) tp.H.push_back(detail::symmetrize_and_drop(raw.H[l]));
    return tp;
}

// ---------------------------------------------------------------------------
// Karhunen-Loeve expansion of exp(-||x - y||_1 / b)

struct KLEigenpairs {
    Eigen::VectorXd beta;   // descending
    Eigen::MatrixXd modes;  // nodes x m, M-orthonormal
};

/// Nodal covariance matrix C(i,j) = exp(-||x_i - x_j||_1 / b). `coords` is
/// nodes x dim.
inline Eigen::MatrixXd covariance_matrix(const Eigen::MatrixXd& coords, double b) {
    const Eigen::Index n = coords.rows();
    Eigen::MatrixXd c(n, n);
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index i = 0; i < n; ++i) c(i, j) = std::exp(-(coords.row(i) - coords.row(j)).cwiseAbs().sum() / b);
    return c;
}

/// Galerkin KL eigenpairs: (M C M) a = beta M a, m largest pairs.
inline KLEigenpairs kl_expand(const Eigen::MatrixXd& coords, const SpMat& mass, double b, int m) {
    if (!(b > 0.0)) throw std::invalid_argument("kl_expand: correlation length must be positive");
    const Eigen::Index n = coords.rows();
    if (m < 1 || m > n) throw std::invalid_argument("kl_expand: m must be between 1 and the number of nodes");
    if (mass.rows() != n || mass.cols() != n) throw std::invalid_argument("kl_expand: mass matrix size mismatch");
    const Eigen::MatrixXd md(mass);
    const Eigen::MatrixXd a = md * covariance_matrix(coords, b) * md;
    Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()), md);
    if (es.info() != Eigen::Success) throw std::runtime_error("kl_expand: eigensolver did not converge");
    KLEigenpairs out;
    out.beta.resize(m);
    out.modes.resize(n, m);
    for (int l = 0; l < m; ++l) {
        const Eigen::Index col = n - 1 - l;
        out.beta(l) = es.eigenvalues()(col);
        Eigen::VectorXd v = es.eigenvectors().col(col);
        v /= std::sqrt(v.dot(md * v));
        Eigen::Index imax = 0;
        v.cwiseAbs().maxCoeff(&imax);
        if (v(imax) < 0) v = -v;
        out.modes.col(l) = v;
    }
    return out;
}

struct KLViscosity {
    double nu0{1.0 / 50.0};
    double sigma{0.01};
    double b{4.0};
    KLEigenpairs eig;

    [[nodiscard]] int m() const { return static_cast<int>(eig.beta.size()); }
};

/// Nodal fields nu_0 = nu0 and nu_l = nu0 * sigma * sqrt(beta_l) * a_l.
inline std::vector<Eigen::VectorXd> viscosity_fields(const KLViscosity& kl) {
    const Eigen::Index n = kl.eig.modes.rows();
    std::vector<Eigen::VectorXd> f;
    f.push_back(Eigen::VectorXd::Constant(n, kl.nu0));
    for (int l = 0; l < kl.m(); ++l)
        f.push_back(kl.nu0 * kl.sigma * std::sqrt(std::max(0.0, kl.eig.beta(l))) * kl.eig.modes.col(l));
    return f;
}

class ViscosityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Smallest nodal viscosity over `samples` uniform draws of xi. Throws when a
/// non-positive value shows up.
inline double check_viscosity_positive(const std::vector<Eigen::VectorXd>& fields, int samples = 1000,
                                       std::uint64_t seed = 20240601) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-std::sqrt(3.0), std::sqrt(3.0));
    double vmin = std::numeric_limits<double>::infinity();
    for (int s = 0; s < samples; ++s) {
        Eigen::VectorXd nu = fields[0];
        for (std::size_t l = 1; l < fields.size(); ++l) nu += u(rng) * fields[l];
        vmin = std::min(vmin, nu.minCoeff());
    }
    if (!(vmin > 0.0))
        throw ViscosityError("sampled viscosity reaches " + std::to_string(vmin) + "; reduce sigma");
    return vmin;
}

}  // namespace lrns
