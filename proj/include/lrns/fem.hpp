#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "lrns/stochastic_basis.hpp"
#include "lrns/tt_core.hpp"

namespace lrns {

enum class DomainKind { step, channel };

inline std::string to_string(DomainKind k) { return k == DomainKind::step ? "step" : "channel"; }

inline DomainKind parse_domain(const std::string& s) {
    if (s == "step") return DomainKind::step;
    if (s == "channel") return DomainKind::channel;
    throw std::invalid_argument("unknown domain kind '" + s + "'");
}

class MeshError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Uniform mesh of square Q2/Q1 elements. Q2 nodes live on a lattice with
/// spacing h/2 and are numbered by (y, x); Q1 nodes are the element corners,
/// numbered the same way.
///
/// Local Q2 order inside an element: corners (-1,-1), (1,-1), (1,1), (-1,1),
/// then edge midpoints (0,-1), (1,0), (0,1), (-1,0), then the centre.
struct StructuredMesh {
    DomainKind kind{DomainKind::channel};
    double h{0.5};
    Eigen::MatrixXd q2_xy;                       // n_q2 x 2
    Eigen::MatrixXd q1_xy;                       // n_q1 x 2
    std::vector<std::array<Index, 9>> elem_q2;
    std::vector<std::array<Index, 4>> elem_q1;
    std::vector<char> on_inflow;                 // per Q2 node
    std::vector<char> on_wall;                   // per Q2 node
    std::vector<char> on_outflow;                // per Q2 node
    std::vector<char> dirichlet;                 // per Q2 node
    std::vector<Index> free_nodes;               // Q2 nodes carrying velocity unknowns
    std::vector<Index> free_index;               // Q2 node -> position in free_nodes or -1
    double inflow_lo{0.0};
    double inflow_hi{1.0};

    [[nodiscard]] Index n_elements() const { return static_cast<Index>(elem_q2.size()); }
    [[nodiscard]] Index n_q2() const { return q2_xy.rows(); }
    [[nodiscard]] Index n_q1() const { return q1_xy.rows(); }
    [[nodiscard]] Index n_dirichlet() const { return n_q2() - static_cast<Index>(free_nodes.size()); }
    [[nodiscard]] Index n_u() const { return 2 * static_cast<Index>(free_nodes.size()); }
    [[nodiscard]] Index n_p() const { return n_q1(); }
    [[nodiscard]] double area() const { return static_cast<double>(n_elements()) * h * h; }

    /// Text picture of the element layout (one character per element).
    [[nodiscard]] std::string describe() const;
};

namespace detail {

struct Rect {
    double x0, x1, y0, y1;
};

inline long to_units(double v, double h, const char* what) {
    const double r = v / h;
    const long n = std::lround(r);
    if (std::abs(r - static_cast<double>(n)) > 1e-9)
        throw MeshError(std::string("mesh size h does not divide the ") + what + " of the domain");
    return n;
}

}  // namespace detail

inline StructuredMesh build_mesh(DomainKind kind, double h) {
    if (!(h > 0.0)) throw MeshError("mesh size must be positive");
    std::vector<detail::Rect> rects;
    double xmin = 0, xmax = 1, in_lo = 0, in_hi = 1;
    if (kind == DomainKind::step) {
        rects = {{-1.0, 0.0, -0.5, 0.5}, {0.0, 12.0, -1.0, 1.0}};
        xmin = -1;
        xmax = 12;
        in_lo = -0.5;
        in_hi = 0.5;
    } else {
        rects = {{0.0, 1.0, 0.0, 1.0}};
    }
    // element index ranges in units of h
    long ex0 = 0, ex1 = 0, ey0 = 0, ey1 = 0;
    bool first = true;
    for (const auto& r : rects) {
        const long a = detail::to_units(r.x0, h, "x-extent"), b = detail::to_units(r.x1, h, "x-extent");
        const long c = detail::to_units(r.y0, h, "y-extent"), d = detail::to_units(r.y1, h, "y-extent");
        if (first) {
            ex0 = a, ex1 = b, ey0 = c, ey1 = d;
            first = false;
        } else {
            ex0 = std::min(ex0, a), ex1 = std::max(ex1, b), ey0 = std::min(ey0, c), ey1 = std::max(ey1, d);
        }
    }
    auto inside = [&](double x, double y) {
        for (const auto& r : rects)
            if (x > r.x0 && x < r.x1 && y > r.y0 && y < r.y1) return true;
        return false;
    };

    // lattice coordinates in units of h/2; key = (y, x) so map order is the node order
    std::vector<std::pair<long, long>> cells;  // lower-left corner in units of h
    for (long iy = ey0; iy < ey1; ++iy)
        for (long ix = ex0; ix < ex1; ++ix)
            if (inside((ix + 0.5) * h, (iy + 0.5) * h)) cells.emplace_back(ix, iy);

    static constexpr int kLocal[9][2] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}, {0, -1}, {1, 0}, {0, 1}, {-1, 0}, {0, 0}};
    std::map<std::pair<long, long>, Index> q2, q1;
    for (const auto& [ix, iy] : cells)
        for (const auto& l : kLocal) {
            const long X = 2 * ix + 1 + l[0], Y = 2 * iy + 1 + l[1];
            q2.emplace(std::make_pair(Y, X), 0);
            if (l[0] != 0 && l[1] != 0) q1.emplace(std::make_pair(Y, X), 0);
        }
    StructuredMesh mesh;
    mesh.kind = kind;
    mesh.h = h;
    mesh.inflow_lo = in_lo;
    mesh.inflow_hi = in_hi;
    mesh.q2_xy.resize(static_cast<Index>(q2.size()), 2);
    mesh.q1_xy.resize(static_cast<Index>(q1.size()), 2);
    Index k = 0;
    for (auto& [key, idx] : q2) {
        idx = k;
        mesh.q2_xy(k, 0) = key.second * h / 2;
        mesh.q2_xy(k, 1) = key.first * h / 2;
        ++k;
    }
    k = 0;
    for (auto& [key, idx] : q1) {
        idx = k;
        mesh.q1_xy(k, 0) = key.second * h / 2;
        mesh.q1_xy(k, 1) = key.first * h / 2;
        ++k;
    }
    for (const auto& [ix, iy] : cells) {
        std::array<Index, 9> e2{};
        std::array<Index, 4> e1{};
        for (int a = 0; a < 9; ++a) {
            const auto key = std::make_pair(2 * iy + 1 + kLocal[a][1], 2 * ix + 1 + kLocal[a][0]);
            e2[a] = q2.at(key);
            if (a < 4) e1[a] = q1.at(key);
        }
        mesh.elem_q2.push_back(e2);
        mesh.elem_q1.push_back(e1);
    }

    // boundary edges are those whose midpoint belongs to one element only
    const Index n2 = mesh.n_q2();
    std::vector<int> mid_count(n2, 0);
    for (const auto& e : mesh.elem_q2)
        for (int a = 4; a < 8; ++a) ++mid_count[e[a]];
    static constexpr int kEdge[4][3] = {{0, 4, 1}, {1, 5, 2}, {2, 6, 3}, {3, 7, 0}};
    mesh.on_inflow.assign(n2, 0);
    mesh.on_wall.assign(n2, 0);
    mesh.on_outflow.assign(n2, 0);
    const double tol = 1e-9 * h;
    for (const auto& e : mesh.elem_q2)
        for (const auto& ed : kEdge) {
            const Index mid = e[ed[1]];
            if (mid_count[mid] != 1) continue;
            const double xm = mesh.q2_xy(mid, 0);
            std::vector<char>* tag = &mesh.on_wall;
            if (std::abs(xm - xmax) < tol) tag = &mesh.on_outflow;
            else if (std::abs(xm - xmin) < tol) tag = &mesh.on_inflow;
            for (int a : ed) (*tag)[e[a]] = 1;
        }
    mesh.dirichlet.assign(n2, 0);
    mesh.free_index.assign(n2, -1);
    for (Index i = 0; i < n2; ++i) {
        mesh.dirichlet[i] = static_cast<char>(mesh.on_inflow[i] || mesh.on_wall[i]);
        if (!mesh.dirichlet[i]) {
            mesh.free_index[i] = static_cast<Index>(mesh.free_nodes.size());
            mesh.free_nodes.push_back(i);
        }
    }
    return mesh;
}

inline std::string StructuredMesh::describe() const {
    double x0 = q2_xy.col(0).minCoeff(), x1 = q2_xy.col(0).maxCoeff();
    double y0 = q2_xy.col(1).minCoeff(), y1 = q2_xy.col(1).maxCoeff();
    const long nx = std::lround((x1 - x0) / h), ny = std::lround((y1 - y0) / h);
    std::vector<std::string> rows(ny, std::string(nx, ' '));
    for (const auto& e : elem_q2) {
        const long cx = std::lround((q2_xy(e[8], 0) - x0) / h - 0.5);
        const long cy = std::lround((q2_xy(e[8], 1) - y0) / h - 0.5);
        rows[ny - 1 - cy][cx] = '#';
    }
    std::string out = to_string(kind) + " mesh, h=" + std::to_string(h) + ", " + std::to_string(n_elements()) +
                      " elements, " + std::to_string(n_q2()) + " Q2 nodes, " + std::to_string(n_q1()) +
                      " Q1 nodes, n_u=" + std::to_string(n_u()) + ", n_p=" + std::to_string(n_p()) + "\n";
    for (const auto& r : rows) out += r + "\n";
    return out;
}

/// Parabolic inflow with exponential start-up ramp.
struct InflowProfile {
    double lo{-0.5};
    double hi{0.5};
    double rate{10.0};

    [[nodiscard]] double profile(double y) const {
        const double w = hi - lo;
        return 4.0 * (y - lo) * (hi - y) / (w * w);
    }
    [[nodiscard]] double ramp(double t) const { return 1.0 - std::exp(-rate * t); }
};

inline InflowProfile inflow_for(const StructuredMesh& mesh) { return {mesh.inflow_lo, mesh.inflow_hi, 10.0}; }

// ---------------------------------------------------------------------------
// reference element

namespace detail {

struct RefElement {
    static constexpr int nq = 9;
    std::array<double, nq> w{};
    std::array<std::array<double, 9>, nq> phi{}, phis{}, phit{};  // Q2 value and reference derivatives
    std::array<std::array<double, 4>, nq> psi{}, psis{}, psit{};  // Q1

    RefElement() {
        const double g = std::sqrt(0.6);
        const double gp[3] = {-g, 0.0, g};
        const double gw[3] = {5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0};
        static constexpr int loc[9][2] = {{-1, -1}, {1, -1}, {1, 1}, {-1, 1}, {0, -1}, {1, 0}, {0, 1}, {-1, 0}, {0, 0}};
        auto l2 = [](int node, double s) {
            if (node == -1) return 0.5 * s * (s - 1.0);
            if (node == 0) return 1.0 - s * s;
            return 0.5 * s * (s + 1.0);
        };
        auto dl2 = [](int node, double s) {
            if (node == -1) return s - 0.5;
            if (node == 0) return -2.0 * s;
            return s + 0.5;
        };
        auto l1 = [](int node, double s) { return 0.5 * (1.0 + node * s); };
        auto dl1 = [](int node, double) { return 0.5 * node; };
        int q = 0;
        for (int j = 0; j < 3; ++j)
            for (int i = 0; i < 3; ++i, ++q) {
                const double s = gp[i], t = gp[j];
                w[q] = gw[i] * gw[j];
                for (int a = 0; a < 9; ++a) {
                    phi[q][a] = l2(loc[a][0], s) * l2(loc[a][1], t);
                    phis[q][a] = dl2(loc[a][0], s) * l2(loc[a][1], t);
                    phit[q][a] = l2(loc[a][0], s) * dl2(loc[a][1], t);
                }
                for (int a = 0; a < 4; ++a) {
                    psi[q][a] = l1(loc[a][0], s) * l1(loc[a][1], t);
                    psis[q][a] = dl1(loc[a][0], s) * l1(loc[a][1], t);
                    psit[q][a] = l1(loc[a][0], s) * dl1(loc[a][1], t);
                }
            }
    }
};

inline const RefElement& ref_element() {
    static const RefElement r;
    return r;
}

/// Element matrices for a square of side h (identical for every element).
struct ElementKernels {
    Eigen::Matrix<double, 9, 9> mass;
    std::array<Eigen::Matrix<double, 9, 9>, 4> stiff_weighted;  // weight = Q1 basis c
    Eigen::Matrix<double, 9, 9> stiff;
    Eigen::Matrix<double, 4, 9> bx, by;
    // conv_x[k](i,j) = int phi_k phi_i d_x phi_j
    std::array<Eigen::Matrix<double, 9, 9>, 9> conv_x, conv_y;
    Eigen::Matrix<double, 4, 4> mass_p, stiff_p;
    std::array<Eigen::Matrix<double, 4, 4>, 9> conv_px, conv_py;

    explicit ElementKernels(double h) {
        const RefElement& r = ref_element();
        const double J = 0.5 * h;
        mass.setZero();
        stiff.setZero();
        bx.setZero();
        by.setZero();
        mass_p.setZero();
        stiff_p.setZero();
        for (auto& m : stiff_weighted) m.setZero();
        for (auto& m : conv_x) m.setZero();
        for (auto& m : conv_y) m.setZero();
        for (auto& m : conv_px) m.setZero();
        for (auto& m : conv_py) m.setZero();
        for (int q = 0; q < RefElement::nq; ++q) {
            const double w = r.w[q];
            for (int i = 0; i < 9; ++i)
                for (int j = 0; j < 9; ++j) {
                    const double gg = r.phis[q][i] * r.phis[q][j] + r.phit[q][i] * r.phit[q][j];
                    mass(i, j) += w * J * J * r.phi[q][i] * r.phi[q][j];
                    stiff(i, j) += w * gg;
                    for (int c = 0; c < 4; ++c) stiff_weighted[c](i, j) += w * r.psi[q][c] * gg;
                    for (int k = 0; k < 9; ++k) {
                        conv_x[k](i, j) += w * J * r.phi[q][k] * r.phi[q][i] * r.phis[q][j];
                        conv_y[k](i, j) += w * J * r.phi[q][k] * r.phi[q][i] * r.phit[q][j];
                    }
                }
            for (int p = 0; p < 4; ++p) {
                for (int j = 0; j < 9; ++j) {
                    bx(p, j) -= w * J * r.psi[q][p] * r.phis[q][j];
                    by(p, j) -= w * J * r.psi[q][p] * r.phit[q][j];
                }
                for (int c = 0; c < 4; ++c) {
                    mass_p(p, c) += w * J * J * r.psi[q][p] * r.psi[q][c];
                    stiff_p(p, c) += w * (r.psis[q][p] * r.psis[q][c] + r.psit[q][p] * r.psit[q][c]);
                    for (int k = 0; k < 9; ++k) {
                        conv_px[k](p, c) += w * J * r.phi[q][k] * r.psi[q][p] * r.psis[q][c];
                        conv_py[k](p, c) += w * J * r.phi[q][k] * r.psi[q][p] * r.psit[q][c];
                    }
                }
            }
        }
        mass = 0.5 * (mass + mass.transpose()).eval();
        stiff = 0.5 * (stiff + stiff.transpose()).eval();
        for (auto& m : stiff_weighted) m = 0.5 * (m + m.transpose()).eval();
        mass_p = 0.5 * (mass_p + mass_p.transpose()).eval();
        stiff_p = 0.5 * (stiff_p + stiff_p.transpose()).eval();
    }
};

/// Fixed sparsity pattern with per-element value slots.
template <int R, int C>
class AssemblyPattern {
public:
    AssemblyPattern() = default;

    AssemblyPattern(Index rows, Index cols, const std::vector<std::array<Index, R>>& row_dofs,
                    const std::vector<std::array<Index, C>>& col_dofs)
        : row_dofs_(row_dofs), col_dofs_(col_dofs) {
        std::vector<Triplet> t;
        t.reserve(row_dofs.size() * R * C);
        for (std::size_t e = 0; e < row_dofs.size(); ++e)
            for (int i = 0; i < R; ++i)
                for (int j = 0; j < C; ++j) t.emplace_back(row_dofs[e][i], col_dofs[e][j], 1.0);
        pattern_.resize(rows, cols);
        pattern_.setFromTriplets(t.begin(), t.end());
        pattern_.makeCompressed();
        slots_.resize(row_dofs.size() * R * C);
        for (std::size_t e = 0; e < row_dofs.size(); ++e)
            for (int j = 0; j < C; ++j) {
                const Index col = col_dofs[e][j];
                const int* begin = pattern_.innerIndexPtr() + pattern_.outerIndexPtr()[col];
                const int* end = pattern_.innerIndexPtr() + pattern_.outerIndexPtr()[col + 1];
                for (int i = 0; i < R; ++i) {
                    const int* it = std::lower_bound(begin, end, static_cast<int>(row_dofs[e][i]));
                    slots_[(e * C + j) * R + i] = static_cast<Index>(it - pattern_.innerIndexPtr());
                }
            }
    }

    /// Sum element matrices produced by `local(e)` into a copy of the pattern.
    template <typename Local>
    SpMat assemble(Local&& local) const {
        SpMat a = pattern_;
        double* v = a.valuePtr();
        std::fill(v, v + a.nonZeros(), 0.0);
        for (std::size_t e = 0; e < row_dofs_.size(); ++e) {
            const Eigen::Matrix<double, R, C> m = local(e);
            for (int j = 0; j < C; ++j)
                for (int i = 0; i < R; ++i) v[slots_[(e * C + j) * R + i]] += m(i, j);
        }
        return a;
    }

    [[nodiscard]] const SpMat& pattern() const { return pattern_; }

private:
    SpMat pattern_;
    std::vector<Index> slots_;
    std::vector<std::array<Index, R>> row_dofs_;
    std::vector<std::array<Index, C>> col_dofs_;
};

}  // namespace detail

/// Q2-Q1 matrices for one mesh and one set of viscosity fields.
///
/// Velocity vectors come in two layouts: "free" (length n_u) holding
/// [x-components of free nodes; y-components of free nodes], and "full"
/// (length 2*n_q2) holding [x of all Q2 nodes; y of all Q2 nodes] including
/// Dirichlet values.
class SpatialDiscretization {
public:
    SpatialDiscretization() = default;

    SpatialDiscretization(StructuredMesh mesh, const std::vector<Eigen::VectorXd>& nu_fields)
        : mesh_(std::move(mesh)), kernels_(mesh_.h) {
        if (nu_fields.empty()) throw std::invalid_argument("SpatialDiscretization: need at least the mean viscosity");
        for (const auto& f : nu_fields)
            if (f.size() != mesh_.n_q1())
                throw std::invalid_argument("SpatialDiscretization: viscosity field must be nodal on the Q1 grid");
        nu_fields_ = nu_fields;
        const Index n2 = mesh_.n_q2();
        q2_pattern_ = detail::AssemblyPattern<9, 9>(n2, n2, mesh_.elem_q2, mesh_.elem_q2);
        bq_pattern_ = detail::AssemblyPattern<4, 9>(mesh_.n_q1(), n2, mesh_.elem_q1, mesh_.elem_q2);
        q1_pattern_ = detail::AssemblyPattern<4, 4>(mesh_.n_q1(), mesh_.n_q1(), mesh_.elem_q1, mesh_.elem_q1);
        build_free_map();

        mass_all_ = q2_pattern_.assemble([&](std::size_t) { return kernels_.mass; });
        mass_ = bold_free(mass_all_);
        for (const auto& f : nu_fields_) {
            SpMat a_all = q2_pattern_.assemble([&](std::size_t e) {
                Eigen::Matrix<double, 9, 9> m = Eigen::Matrix<double, 9, 9>::Zero();
                for (int c = 0; c < 4; ++c) m += f(mesh_.elem_q1[e][c]) * kernels_.stiff_weighted[c];
                return m;
            });
            stiff_.push_back(bold_free(a_all));
            stiff_all_.push_back(std::move(a_all));
        }
        bx_all_ = bq_pattern_.assemble([&](std::size_t) { return kernels_.bx; });
        by_all_ = bq_pattern_.assemble([&](std::size_t) { return kernels_.by; });
        build_divergence();
        mass_p_ = q1_pattern_.assemble([&](std::size_t) { return kernels_.mass_p; });
        const double nu0_mean = nu_fields_[0].mean();
        stiff_p_ = q1_pattern_.assemble([&](std::size_t) -> Eigen::Matrix<double, 4, 4> { return nu0_mean * kernels_.stiff_p; });
        mass_diag_ = mass_.diagonal();
        mass_p_diag_ = mass_p_.diagonal();

        const InflowProfile in = inflow_for(mesh_);
        lift_full_ = Eigen::VectorXd::Zero(2 * n2);
        for (Index i = 0; i < n2; ++i)
            if (mesh_.on_inflow[i] && !mesh_.on_wall[i]) lift_full_(i) = in.profile(mesh_.q2_xy(i, 1));
    }

    [[nodiscard]] const StructuredMesh& mesh() const { return mesh_; }
    [[nodiscard]] Index n_u() const { return mesh_.n_u(); }
    [[nodiscard]] Index n_p() const { return mesh_.n_p(); }
    [[nodiscard]] Index n_full() const { return 2 * mesh_.n_q2(); }
    [[nodiscard]] int m() const { return static_cast<int>(nu_fields_.size()) - 1; }
    [[nodiscard]] const std::vector<Eigen::VectorXd>& viscosity() const { return nu_fields_; }

    /// Velocity mass (2x2 block diagonal, free dofs).
    [[nodiscard]] const SpMat& M() const { return mass_; }
    [[nodiscard]] const SpMat& A(int l) const { return stiff_.at(l); }
    [[nodiscard]] const SpMat& B() const { return div_; }
    [[nodiscard]] const SpMat& Bt() const { return div_t_; }
    [[nodiscard]] const SpMat& Mp() const { return mass_p_; }
    [[nodiscard]] const SpMat& Ap0() const { return stiff_p_; }
    [[nodiscard]] const Eigen::VectorXd& M_diag() const { return mass_diag_; }
    [[nodiscard]] const Eigen::VectorXd& Mp_diag() const { return mass_p_diag_; }
    /// Scalar matrices over all Q2 nodes.
    [[nodiscard]] const SpMat& M_scalar_all() const { return mass_all_; }
    [[nodiscard]] const SpMat& A_scalar_all(int l) const { return stiff_all_.at(l); }
    /// Divergence over the full velocity layout (n_p x 2*n_q2).
    [[nodiscard]] const SpMat& B_full() const { return div_full_; }
    [[nodiscard]] const SpMat& Bx_all() const { return bx_all_; }
    [[nodiscard]] const SpMat& By_all() const { return by_all_; }

    /// Steady inflow boundary values in the full layout (zero away from the inflow).
    [[nodiscard]] const Eigen::VectorXd& lift_full() const { return lift_full_; }

    [[nodiscard]] Eigen::VectorXd embed(const Eigen::VectorXd& u_free) const {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(n_full());
        const Index nf = static_cast<Index>(mesh_.free_nodes.size());
        const Index n2 = mesh_.n_q2();
        for (Index k = 0; k < nf; ++k) {
            v(mesh_.free_nodes[k]) = u_free(k);
            v(n2 + mesh_.free_nodes[k]) = u_free(nf + k);
        }
        return v;
    }

    [[nodiscard]] Eigen::VectorXd restrict_free(const Eigen::VectorXd& v_full) const {
        const Index nf = static_cast<Index>(mesh_.free_nodes.size());
        const Index n2 = mesh_.n_q2();
        Eigen::VectorXd u(2 * nf);
        for (Index k = 0; k < nf; ++k) {
            u(k) = v_full(mesh_.free_nodes[k]);
            u(nf + k) = v_full(n2 + mesh_.free_nodes[k]);
        }
        return u;
    }

    /// Scalar convection matrix over all Q2 nodes, [N]_{ij} = (w . grad phi_j, phi_i).
    [[nodiscard]] SpMat convection_scalar_all(const Eigen::VectorXd& w_full) const {
        check_full(w_full);
        const Index n2 = mesh_.n_q2();
        return q2_pattern_.assemble([&](std::size_t e) {
            Eigen::Matrix<double, 9, 9> m = Eigen::Matrix<double, 9, 9>::Zero();
            const auto& en = mesh_.elem_q2[e];
            for (int k = 0; k < 9; ++k) {
                const double wx = w_full(en[k]), wy = w_full(n2 + en[k]);
                if (wx != 0.0) m.noalias() += wx * kernels_.conv_x[k];
                if (wy != 0.0) m.noalias() += wy * kernels_.conv_y[k];
            }
            return m;
        });
    }

    /// Vector convection matrix (2x2 block diagonal) on free dofs.
    [[nodiscard]] SpMat N(const Eigen::VectorXd& w_full) const { return bold_free(convection_scalar_all(w_full)); }

    /// Pressure-space convection (w . grad psi_j, psi_i).
    [[nodiscard]] SpMat Np(const Eigen::VectorXd& w_full) const {
        check_full(w_full);
        const Index n2 = mesh_.n_q2();
        return q1_pattern_.assemble([&](std::size_t e) {
            Eigen::Matrix<double, 4, 4> m = Eigen::Matrix<double, 4, 4>::Zero();
            const auto& en = mesh_.elem_q2[e];
            for (int k = 0; k < 9; ++k) m.noalias() += w_full(en[k]) * kernels_.conv_px[k] + w_full(n2 + en[k]) * kernels_.conv_py[k];
            return m;
        });
    }

    /// Unweighted scalar Laplacian over all Q2 nodes.
    [[nodiscard]] SpMat laplacian_scalar_all() const {
        return q2_pattern_.assemble([&](std::size_t) { return kernels_.stiff; });
    }

    /// Lift a scalar all-node matrix to the 2x2 block diagonal free-dof matrix.
    [[nodiscard]] SpMat bold_free(const SpMat& scalar_all) const {
        SpMat out = bold_pattern_;
        double* v = out.valuePtr();
        const double* s = scalar_all.valuePtr();
        if (scalar_all.nonZeros() != q2_pattern_.pattern().nonZeros())
            throw std::logic_error("bold_free: matrix does not share the Q2 pattern");
        for (Index k = 0; k < scalar_all.nonZeros(); ++k) {
            if (bold_slot_x_[k] >= 0) v[bold_slot_x_[k]] = s[k];
            if (bold_slot_y_[k] >= 0) v[bold_slot_y_[k]] = s[k];
        }
        return out;
    }

    /// Rows of the bold full-layout matrix restricted to free dofs, applied to a
    /// full-layout vector: returns R * blkdiag(S, S) * v_full.
    [[nodiscard]] Eigen::VectorXd apply_bold_rows(const SpMat& scalar_all, const Eigen::VectorXd& v_full) const {
        const Index n2 = mesh_.n_q2();
        Eigen::VectorXd y(n_full());
        y.head(n2) = scalar_all * v_full.head(n2);
        y.tail(n2) = scalar_all * v_full.tail(n2);
        return restrict_free(y);
    }

    /// Q2 velocity values and gradients at the element quadrature points of a
    /// full-layout field. Shape: (n_elements*9) x 6 with columns
    /// (ux, uy, dux/dx, dux/dy, duy/dx, duy/dy).
    [[nodiscard]] Eigen::MatrixXd eval_at_quadrature(const Eigen::VectorXd& v_full) const {
        const auto& r = detail::ref_element();
        const double invJ = 2.0 / mesh_.h;
        const Index n2 = mesh_.n_q2();
        Eigen::MatrixXd out = Eigen::MatrixXd::Zero(mesh_.n_elements() * 9, 6);
        for (Index e = 0; e < mesh_.n_elements(); ++e) {
            const auto& en = mesh_.elem_q2[e];
            for (int q = 0; q < 9; ++q) {
                auto row = out.row(e * 9 + q);
                for (int a = 0; a < 9; ++a) {
                    const double ux = v_full(en[a]), uy = v_full(n2 + en[a]);
                    row(0) += r.phi[q][a] * ux;
                    row(1) += r.phi[q][a] * uy;
                    row(2) += invJ * r.phis[q][a] * ux;
                    row(3) += invJ * r.phit[q][a] * ux;
                    row(4) += invJ * r.phis[q][a] * uy;
                    row(5) += invJ * r.phit[q][a] * uy;
                }
            }
        }
        return out;
    }

    /// Test a quadrature-point vector field (n_elements*9 x 2) against every Q2
    /// basis function, returning the free-dof load vector (f, phi_i).
    [[nodiscard]] Eigen::VectorXd load_from_quadrature(const Eigen::MatrixXd& f_qp) const {
        const auto& r = detail::ref_element();
        const double J2 = 0.25 * mesh_.h * mesh_.h;
        const Index n2 = mesh_.n_q2();
        Eigen::VectorXd y = Eigen::VectorXd::Zero(n_full());
        for (Index e = 0; e < mesh_.n_elements(); ++e) {
            const auto& en = mesh_.elem_q2[e];
            for (int q = 0; q < 9; ++q) {
                const double wx = J2 * r.w[q] * f_qp(e * 9 + q, 0);
                const double wy = J2 * r.w[q] * f_qp(e * 9 + q, 1);
                for (int a = 0; a < 9; ++a) {
                    y(en[a]) += r.phi[q][a] * wx;
                    y(n2 + en[a]) += r.phi[q][a] * wy;
                }
            }
        }
        return restrict_free(y);
    }

private:
    void check_full(const Eigen::VectorXd& w) const {
        if (w.size() != n_full())
            throw std::invalid_argument("convection field must use the full velocity layout (length 2*n_q2)");
    }

    void build_free_map() {
        const SpMat& p = q2_pattern_.pattern();
        const Index nf = static_cast<Index>(mesh_.free_nodes.size());
        std::vector<Triplet> t;
        for (Index j = 0; j < p.outerSize(); ++j)
            for (SpMat::InnerIterator it(p, j); it; ++it) {
                const Index fi = mesh_.free_index[it.row()], fj = mesh_.free_index[j];
                if (fi < 0 || fj < 0) continue;
                t.emplace_back(fi, fj, 1.0);
                t.emplace_back(nf + fi, nf + fj, 1.0);
            }
        bold_pattern_.resize(2 * nf, 2 * nf);
        bold_pattern_.setFromTriplets(t.begin(), t.end());
        bold_pattern_.makeCompressed();
        bold_slot_x_.assign(p.nonZeros(), -1);
        bold_slot_y_.assign(p.nonZeros(), -1);
        auto find = [&](Index row, Index col) {
            const int* begin = bold_pattern_.innerIndexPtr() + bold_pattern_.outerIndexPtr()[col];
            const int* end = bold_pattern_.innerIndexPtr() + bold_pattern_.outerIndexPtr()[col + 1];
            return static_cast<Index>(std::lower_bound(begin, end, static_cast<int>(row)) - bold_pattern_.innerIndexPtr());
        };
        for (Index j = 0; j < p.outerSize(); ++j)
            for (Index k = p.outerIndexPtr()[j]; k < p.outerIndexPtr()[j + 1]; ++k) {
                const Index fi = mesh_.free_index[p.innerIndexPtr()[k]], fj = mesh_.free_index[j];
                if (fi < 0 || fj < 0) continue;
                bold_slot_x_[k] = find(fi, fj);
                bold_slot_y_[k] = find(nf + fi, nf + fj);
            }
    }

    void build_divergence() {
        const Index nf = static_cast<Index>(mesh_.free_nodes.size());
        const Index n2 = mesh_.n_q2();
        std::vector<Triplet> tf, ta;
        for (int comp = 0; comp < 2; ++comp) {
            const SpMat& b = comp == 0 ? bx_all_ : by_all_;
            for (Index j = 0; j < b.outerSize(); ++j)
                for (SpMat::InnerIterator it(b, j); it; ++it) {
                    ta.emplace_back(it.row(), comp * n2 + j, it.value());
                    const Index fj = mesh_.free_index[j];
                    if (fj >= 0) tf.emplace_back(it.row(), comp * nf + fj, it.value());
                }
        }
        div_.resize(mesh_.n_q1(), 2 * nf);
        div_.setFromTriplets(tf.begin(), tf.end());
        div_t_ = div_.transpose();
        div_full_.resize(mesh_.n_q1(), 2 * n2);
        div_full_.setFromTriplets(ta.begin(), ta.end());
    }

    StructuredMesh mesh_;
    detail::ElementKernels kernels_{0.5};
    std::vector<Eigen::VectorXd> nu_fields_;
    detail::AssemblyPattern<9, 9> q2_pattern_;
    detail::AssemblyPattern<4, 9> bq_pattern_;
    detail::AssemblyPattern<4, 4> q1_pattern_;
    SpMat bold_pattern_;
    std::vector<Index> bold_slot_x_, bold_slot_y_;

    SpMat mass_all_, mass_;
    std::vector<SpMat> stiff_all_, stiff_;
    SpMat bx_all_, by_all_, div_, div_t_, div_full_;
    SpMat mass_p_, stiff_p_;
    Eigen::VectorXd mass_diag_, mass_p_diag_;
    Eigen::VectorXd lift_full_;
};

/// Dirichlet data at time t in the full layout: ramp(t) times the steady profile.
inline Eigen::VectorXd dirichlet_values(const SpatialDiscretization& sd, double t) {
    return inflow_for(sd.mesh()).ramp(t) * sd.lift_full();
}

/// Time grid t_k = k*tau, k = 1..n_t, and ramp values there (index 0 is t_1).
inline Eigen::VectorXd ramp_values(const SpatialDiscretization& sd, Index n_t, double tau) {
    const InflowProfile in = inflow_for(sd.mesh());
    Eigen::VectorXd r(n_t);
    for (Index k = 0; k < n_t; ++k) r(k) = in.ramp((k + 1) * tau);
    return r;
}

/// Lifting right-hand side of one deterministic steady Stokes-type solve:
/// -(rows of K over free dofs) * g for K = blkdiag(S, S) and g the full data.
inline Eigen::VectorXd lifting_rhs(const SpatialDiscretization& sd, const SpMat& scalar_all,
                                   const Eigen::VectorXd& g_full) {
    return -sd.apply_bold_rows(scalar_all, g_full);
}

/// All-at-once right-hand sides with the Dirichlet lifting moved to the right:
///   f_u = -tau^{-1} dramp (x) e_1 (x) R M g - sum_l ramp (x) G_l e_1 (x) R A_l g
///   f_p = -ramp (x) e_1 (x) B_full g
/// with dramp_k = ramp_k - ramp_{k-1} (ramp_0 = 0). Without stochastic
/// viscosity the stochastic mode is e_1 only; each A_l with l >= 1 adds the
/// direction G_l e_1 = e_{l+1}.
struct AllAtOnceRhs {
    TensorTrain3 f_u;
    TensorTrain3 f_p;
};

inline AllAtOnceRhs assemble_rhs_allatonce(const SpatialDiscretization& sd, const TripleProductMatrices& gpc,
                                           Index n_t, double tau, double inflow_amplitude = 1.0) {
    if (!(tau > 0.0) || n_t < 1) throw std::invalid_argument("assemble_rhs_allatonce: need tau > 0 and n_t >= 1");
    const int n_xi = gpc.n_xi();
    const Eigen::VectorXd g = inflow_amplitude * sd.lift_full();
    const Eigen::VectorXd ramp = ramp_values(sd, n_t, tau);
    Eigen::VectorXd dramp(n_t);
    for (Index k = 0; k < n_t; ++k) dramp(k) = ramp(k) - (k > 0 ? ramp(k - 1) : 0.0);

    Eigen::VectorXd e1 = Eigen::VectorXd::Zero(n_xi);
    e1(0) = 1.0;
    std::vector<TensorTrain3> terms;
    std::vector<double> coeffs;
    if (g.norm() == 0.0) {
        return {TensorTrain3::zero({n_t, n_xi, sd.n_u()}), TensorTrain3::zero({n_t, n_xi, sd.n_p()})};
    }
    terms.push_back(TensorTrain3::rank1(dramp, e1, sd.apply_bold_rows(sd.M_scalar_all(), g)));
    coeffs.push_back(-1.0 / tau);
    for (int l = 0; l <= sd.m(); ++l) {
        const Eigen::VectorXd gl = gpc.G.at(l) * e1;
        const Eigen::VectorXd al = sd.apply_bold_rows(sd.A_scalar_all(l), g);
        if (gl.norm() == 0.0 || al.norm() == 0.0) continue;
        terms.push_back(TensorTrain3::rank1(ramp, gl, al));
        coeffs.push_back(-1.0);
    }
    AllAtOnceRhs rhs;
    rhs.f_u = tt_round_sum(terms, coeffs, 0.0).tt;
    rhs.f_p = tt_scale(TensorTrain3::rank1(ramp, e1, sd.B_full() * g), -1.0);
    return rhs;
}

}  // namespace lrns
