#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "lrns/fem.hpp"
#include "lrns/oracle.hpp"
#include "lrns/solver.hpp"
#include "lrns/stochastic_basis.hpp"
#include "lrns/tt_core.hpp"

namespace lrns {

inline constexpr int kCsvSchemaVersion = 1;

/// Benchmark parameters and solver tolerances. Defaults reproduce the
/// backward-facing step benchmark.
struct ExperimentConfig {
    double nu0{1.0 / 50.0};
    double sigma{0.01};
    double b{4.0};
    int m{3};
    int d_psi{3};
    double t_f{1.0};
    double tau{1.0 / 64.0};
    double h{0.25};
    DomainKind domain{DomainKind::step};
    PicardConfig solver{};
    std::string out_dir{"out"};

    [[nodiscard]] Index n_t() const {
        const double r = t_f / tau;
        const auto n = static_cast<Index>(std::llround(r));
        if (n < 1 || std::abs(r - static_cast<double>(n)) > 1e-9 * r)
            throw ConfigError("t_f / tau must be a positive integer");
        return n;
    }

    void validate() const {
        if (!(nu0 > 0.0)) throw ConfigError("nu0 must be positive");
        if (!(sigma >= 0.0)) throw ConfigError("sigma must be nonnegative");
        if (!(b > 0.0)) throw ConfigError("correlation length b must be positive");
        if (m < 0) throw ConfigError("m must be nonnegative");
        if (d_psi < 0) throw ConfigError("d_psi must be nonnegative");
        if (!(t_f > 0.0) || !(tau > 0.0)) throw ConfigError("t_f and tau must be positive");
        if (!(h > 0.0)) throw ConfigError("h must be positive");
        (void)n_t();
        solver.validate();
    }
};

/// Parses "0.02", "1/50", "2^-6" and "1e-3".
inline double parse_number(const std::string& raw) {
    std::string s;
    for (char c : raw)
        if (!std::isspace(static_cast<unsigned char>(c))) s += c;
    if (s.empty()) throw ConfigError("empty numeric value");
    try {
        std::size_t pos = 0;
        if (const auto slash = s.find('/'); slash != std::string::npos) {
            const double a = parse_number(s.substr(0, slash)), b = parse_number(s.substr(slash + 1));
            if (b == 0.0) throw ConfigError("division by zero in '" + raw + "'");
            return a / b;
        }
        if (const auto caret = s.find('^'); caret != std::string::npos)
            return std::pow(parse_number(s.substr(0, caret)), parse_number(s.substr(caret + 1)));
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw ConfigError("trailing characters in '" + raw + "'");
        return v;
    } catch (const std::logic_error&) {
        throw ConfigError("cannot parse number '" + raw + "'");
    }
}

inline int parse_int(const std::string& raw) {
    const double v = parse_number(raw);
    if (v != std::floor(v) || std::abs(v) > 1e9) throw ConfigError("expected an integer, got '" + raw + "'");
    return static_cast<int>(v);
}

/// Sets one key ("section.name" or bare name). eps_gmres follows tol_gmres
/// unless it is set explicitly afterwards.
inline void set_config_key(ExperimentConfig& c, const std::string& key, const std::string& value) {
    const std::string k = key.substr(key.find('.') == std::string::npos ? 0 : key.find('.') + 1);
    PicardConfig& s = c.solver;
    if (k == "nu0") c.nu0 = parse_number(value);
    else if (k == "sigma") c.sigma = parse_number(value);
    else if (k == "b") c.b = parse_number(value);
    else if (k == "m") c.m = parse_int(value);
    else if (k == "d_psi") c.d_psi = parse_int(value);
    else if (k == "t_f") c.t_f = parse_number(value);
    else if (k == "tau") c.tau = parse_number(value);
    else if (k == "h") c.h = parse_number(value);
    else if (k == "domain") {
        try {
            c.domain = parse_domain(value);
        } catch (const std::exception& e) {
            throw ConfigError(e.what());
        }
    } else if (k == "tol_picard") s.tol_picard = parse_number(value);
    else if (k == "tol_gmres") s.set_tol_gmres(parse_number(value));
    else if (k == "eps_gmres") s.eps_gmres = parse_number(value);
    else if (k == "eps_soln") s.eps_soln = parse_number(value);
    else if (k == "eps_conv") s.eps_conv = parse_number(value);
    else if (k == "tol_inner") s.tol_inner = parse_number(value);
    else if (k == "maxit_picard") s.maxit_picard = parse_int(value);
    else if (k == "maxit_gmres") s.maxit_gmres = parse_int(value);
    else if (k == "maxit_inner") s.maxit_inner = parse_int(value);
    else if (k == "preconditioner") s.prec = parse_precond(value);
    else if (k == "dir") c.out_dir = value;
    else throw ConfigError("unknown configuration key '" + key + "'");
}

inline ExperimentConfig parse_config(std::istream& in) {
    boost::property_tree::ptree pt;
    try {
        boost::property_tree::ini_parser::read_ini(in, pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    ExperimentConfig c;
    // tol_gmres first so an explicit eps_gmres wins regardless of file order
    std::string eps_explicit;
    for (const auto& [section, body] : pt) {
        if (body.empty()) throw ConfigError("config: key '" + section + "' outside a section");
        for (const auto& [key, node] : body) {
            if (key == "eps_gmres") eps_explicit = node.data();
            else set_config_key(c, key, node.data());
        }
    }
    if (!eps_explicit.empty()) c.solver.eps_gmres = parse_number(eps_explicit);
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    return parse_config(in);
}

inline void write_config(std::ostream& os, const ExperimentConfig& c) {
    os << std::setprecision(17);
    os << "[problem]\n"
       << "domain = " << to_string(c.domain) << "\nnu0 = " << c.nu0 << "\nsigma = " << c.sigma << "\nb = " << c.b
       << "\nm = " << c.m << "\nd_psi = " << c.d_psi << "\nt_f = " << c.t_f << "\ntau = " << c.tau << "\nh = " << c.h
       << "\n\n[solver]\n"
       << "preconditioner = " << to_string(c.solver.prec) << "\ntol_picard = " << c.solver.tol_picard
       << "\ntol_gmres = " << c.solver.tol_gmres << "\neps_gmres = " << c.solver.eps_gmres
       << "\neps_soln = " << c.solver.eps_soln << "\neps_conv = " << c.solver.eps_conv
       << "\ntol_inner = " << c.solver.tol_inner << "\nmaxit_picard = " << c.solver.maxit_picard
       << "\nmaxit_gmres = " << c.solver.maxit_gmres << "\nmaxit_inner = " << c.solver.maxit_inner
       << "\n\n[output]\ndir = " << c.out_dir << "\n";
}

// ---------------------------------------------------------------------------

/// Mesh, viscosity expansion, spatial matrices and gPC tables of one config.
struct Discretization {
    StructuredMesh mesh;
    KLViscosity kl;
    SpatialDiscretization sd;
    GpcBasis basis;
    TripleProductMatrices gpc;
    Index n_t{0};
    double tau{0.0};
    double setup_seconds{0.0};
};

inline std::unique_ptr<Discretization> build_discretization(const ExperimentConfig& c) {
    c.validate();
    const auto t0 = std::chrono::steady_clock::now();
    auto d = std::make_unique<Discretization>();
    try {
        d->mesh = build_mesh(c.domain, c.h);
    } catch (const MeshError& e) {
        throw ConfigError(e.what());
    }
    std::vector<Vector> fields{Vector::Constant(d->mesh.n_q1(), c.nu0)};
    d->kl = KLViscosity{c.nu0, c.sigma, c.b, {}};
    if (c.m > 0) {
        const SpatialDiscretization mean_only(d->mesh, fields);
        d->kl.eig = kl_expand(d->mesh.q1_xy, mean_only.Mp(), c.b, c.m);
        fields = viscosity_fields(d->kl);
        check_viscosity_positive(fields);
    }
    d->sd = SpatialDiscretization(d->mesh, fields);
    d->basis = build_basis(c.m, c.d_psi);
    d->gpc = triple_products(d->basis);
    d->n_t = c.n_t();
    d->tau = c.tau;
    d->setup_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return d;
}

inline std::string dimensions_line(Index n_t, Index n_xi, Index n_u, Index n_p) {
    std::ostringstream os;
    os << "n_t=" << n_t << ", n_\xCE\xBE=" << n_xi << ", n_u=" << n_u << ", n_p=" << n_p
       << ", total=" << n_t * n_xi * (n_u + n_p);
    return os.str();
}

inline std::string dimensions_line(const Discretization& d) {
    return dimensions_line(d.n_t, d.gpc.n_xi(), d.sd.n_u(), d.sd.n_p());
}

// ---------------------------------------------------------------------------

/// (n_t k1 + n_xi k1 k2 + n_x k2) / (n_t n_xi n_x).
inline double storage_ratio(Index n_t, Index n_xi, Index n_x, Index k1, Index k2) {
    const double tt = static_cast<double>(n_t * k1 + n_xi * k1 * k2 + n_x * k2);
    return tt / static_cast<double>(n_t * n_xi * n_x);
}

inline double storage_ratio(const TensorTrain3& z) {
    const ModeSizes s = z.sizes();
    return storage_ratio(s.n1, s.n2, s.n3, z.rank1(), z.rank2());
}

/// Mean (psi_1 coefficient) and variance (sum of squares over psi_2..) at one time step.
struct FieldMoments {
    Index step{0};
    double time{0.0};
    Vector mean;
    Vector variance;
};

inline FieldMoments field_moments(const TensorTrain3& z, Index k, double tau) {
    const Matrix left = z.core1().row(k);
    FieldMoments f{k, (k + 1) * tau, Vector::Zero(z.sizes().n3), Vector::Zero(z.sizes().n3)};
    for (Index r = 0; r < z.sizes().n2; ++r) {
        const Vector v = (left * z.core2_slice(r) * z.core3()).transpose();
        if (r == 0) f.mean = v;
        else f.variance += v.cwiseAbs2();
    }
    return f;
}

struct SolutionStatistics {
    std::vector<FieldMoments> velocity;
    std::vector<FieldMoments> pressure;
    double storage_u{0.0};
    double storage_p{0.0};
    double max_variance_u{0.0};
    double max_variance_p{0.0};
};

/// Moments at the middle and the final time step.
inline SolutionStatistics solution_statistics(const TensorTrain3& u, const TensorTrain3& p, double tau) {
    SolutionStatistics s;
    const Index n_t = u.sizes().n1;
    std::vector<Index> steps{n_t / 2 - 1, n_t - 1};
    if (n_t < 2) steps = {0};
    for (Index k : steps) {
        s.velocity.push_back(field_moments(u, k, tau));
        s.pressure.push_back(field_moments(p, k, tau));
    }
    for (const auto& f : s.velocity) s.max_variance_u = std::max(s.max_variance_u, f.variance.maxCoeff());
    for (const auto& f : s.pressure) s.max_variance_p = std::max(s.max_variance_p, f.variance.maxCoeff());
    s.storage_u = storage_ratio(u);
    s.storage_p = storage_ratio(p);
    return s;
}

// ---------------------------------------------------------------------------

inline void csv_header(std::ostream& os) { os << "# lrns csv schema " << kCsvSchemaVersion << "\n"; }

inline void write_report_csv(std::ostream& os, const PicardReport& r) {
    csv_header(os);
    os << "step,residual,rel_residual,gmres_iterations,gmres_converged,gmres_rel_residual,inner_iterations,seconds\n";
    os << std::setprecision(10);
    for (const auto& s : r.steps)
        os << s.step << ',' << s.residual << ',' << s.rel_residual << ',' << s.gmres_iterations << ','
           << (s.gmres_converged ? 1 : 0) << ',' << s.gmres_rel_residual << ',' << s.inner_iterations << ','
           << s.seconds << '\n';
}

inline void write_ranks_csv(std::ostream& os, const PicardReport& r) {
    csv_header(os);
    os << "step,du_k1,du_k2,dp_k1,dp_k2,u_k1,u_k2,p_k1,p_k2,ut_k1,ut_k2\n";
    for (const auto& s : r.steps)
        os << s.step << ',' << s.ranks_du[0] << ',' << s.ranks_du[1] << ',' << s.ranks_dp[0] << ',' << s.ranks_dp[1]
           << ',' << s.ranks_u[0] << ',' << s.ranks_u[1] << ',' << s.ranks_p[0] << ',' << s.ranks_p[1] << ','
           << s.ranks_ut[0] << ',' << s.ranks_ut[1] << '\n';
}

inline void write_fields_csv(std::ostream& os, const SolutionStatistics& s) {
    csv_header(os);
    os << "field,step,time,dof,mean,variance\n";
    os << std::setprecision(12);
    auto emit = [&](const char* name, const std::vector<FieldMoments>& fs) {
        for (const auto& f : fs)
            for (Index i = 0; i < f.mean.size(); ++i)
                os << name << ',' << f.step << ',' << f.time << ',' << i << ',' << f.mean(i) << ',' << f.variance(i)
                   << '\n';
    };
    emit("u", s.velocity);
    emit("p", s.pressure);
}

// ---------------------------------------------------------------------------

struct ExperimentResult {
    ExperimentConfig config;
    std::string dimensions;
    double setup_seconds{0.0};
    PicardResult solve;
    SolutionStatistics stats;
};

inline void write_stats_csv(std::ostream& os, const ExperimentResult& r, const Discretization& d) {
    const PicardReport& rep = r.solve.report;
    csv_header(os);
    os << "key,value\n" << std::setprecision(12);
    os << "n_t," << d.n_t << "\nn_xi," << d.gpc.n_xi() << "\nn_u," << d.sd.n_u() << "\nn_p," << d.sd.n_p()
       << "\ntotal_dofs," << d.n_t * d.gpc.n_xi() * (d.sd.n_u() + d.sd.n_p()) << '\n';
    os << "converged," << (rep.converged ? 1 : 0) << "\npicard_steps," << rep.picard_steps() << "\ntotal_gmres,"
       << rep.total_gmres() << '\n';
    os << "f_norm," << rep.f_norm << "\nfinal_residual," << (rep.steps.empty() ? 0.0 : rep.steps.back().residual)
       << "\ndivergence_norm," << rep.divergence_norm << '\n';
    os << "u_k1," << r.solve.u.rank1() << "\nu_k2," << r.solve.u.rank2() << "\np_k1," << r.solve.p.rank1()
       << "\np_k2," << r.solve.p.rank2() << '\n';
    os << "storage_ratio_u," << r.stats.storage_u << "\nstorage_ratio_p," << r.stats.storage_p << '\n';
    os << "max_variance_u," << r.stats.max_variance_u << "\nmax_variance_p," << r.stats.max_variance_p << '\n';
    os << "setup_seconds," << r.setup_seconds << "\nsolve_seconds," << rep.solve_seconds << '\n';
}

inline void write_artifacts(const ExperimentResult& r, const Discretization& d, const std::string& dir) {
    std::filesystem::create_directories(dir);
    auto open = [&](const std::string& name) {
        std::ofstream f(std::filesystem::path(dir) / name);
        if (!f) throw std::runtime_error("cannot write " + (std::filesystem::path(dir) / name).string());
        return f;
    };
    {
        auto f = open("report.csv");
        write_report_csv(f, r.solve.report);
    }
    {
        auto f = open("ranks.csv");
        write_ranks_csv(f, r.solve.report);
    }
    {
        auto f = open("stats.csv");
        write_stats_csv(f, r, d);
    }
    {
        auto f = open("fields.csv");
        write_fields_csv(f, r.stats);
    }
    {
        auto f = open("config.ini");
        write_config(f, r.config);
    }
    save_tt3((std::filesystem::path(dir) / "u.tt3").string(), r.solve.u);
    save_tt3((std::filesystem::path(dir) / "p.tt3").string(), r.solve.p);
}

/// Builds the discretization, solves, and (when `write` is set) writes all
/// artifacts into config.out_dir.
inline ExperimentResult run_experiment(const ExperimentConfig& c, bool write = true, const PicardObserver& observe = {}) {
    const auto d = build_discretization(c);
    const AllAtOnceProblem prob(d->sd, d->gpc, d->n_t, d->tau);
    ExperimentResult r;
    r.config = c;
    r.dimensions = dimensions_line(*d);
    r.setup_seconds = d->setup_seconds;
    r.solve = picard_solve(prob, c.solver, observe);
    r.stats = solution_statistics(r.solve.u, r.solve.p, c.tau);
    if (write) write_artifacts(r, *d, c.out_dir);
    return r;
}

// ---------------------------------------------------------------------------

struct OracleReport {
    std::string dimensions;
    double dense_vs_sequential{0.0};
    double lowrank_vs_dense{0.0};
    double lowrank_vs_sequential{0.0};
    double divergence_dense{0.0};
    bool lowrank_converged{false};
    int dense_picard_steps{0};
    int lowrank_picard_steps{0};

    [[nodiscard]] double max_discrepancy() const {
        return std::max({dense_vs_sequential, lowrank_vs_dense, lowrank_vs_sequential});
    }
};

namespace detail {

inline double stacked_rel(const Vector& ua, const Vector& pa, const Vector& ub, const Vector& pb) {
    const double num = std::hypot((ua - ub).norm(), (pa - pb).norm());
    const double den = std::hypot(ub.norm(), pb.norm());
    return den == 0.0 ? num : num / den;
}

}  // namespace detail

/// Dense all-at-once, sequential time stepping and the low-rank solver on one
/// small instance; discrepancies are relative 2-norms of the stacked (u, p).
inline OracleReport run_oracle(const ExperimentConfig& c, bool write = true) {
    const auto d = build_discretization(c);
    OracleReport rep;
    rep.dimensions = dimensions_line(*d);
    const DenseSolution dense = dense_allatonce_solve(d->sd, d->gpc, d->n_t, d->tau);
    const DenseSolution seq = sequential_solve(d->sd, d->gpc, d->n_t, d->tau);
    const AllAtOnceProblem prob(d->sd, d->gpc, d->n_t, d->tau);
    const PicardResult lr = picard_solve(prob, c.solver);
    const Vector lu = tt_to_full(lr.u, kOracleDofCap).vec(), lp = tt_to_full(lr.p, kOracleDofCap).vec();
    rep.dense_vs_sequential = detail::stacked_rel(dense.u.vec(), dense.p.vec(), seq.u.vec(), seq.p.vec());
    rep.lowrank_vs_dense = detail::stacked_rel(lu, lp, dense.u.vec(), dense.p.vec());
    rep.lowrank_vs_sequential = detail::stacked_rel(lu, lp, seq.u.vec(), seq.p.vec());
    rep.lowrank_converged = lr.report.converged;
    rep.dense_picard_steps = dense.picard_steps;
    rep.lowrank_picard_steps = lr.report.picard_steps();
    rep.divergence_dense =
        prob.residual(tt_from_full(dense.u, 0.0), tt_from_full(dense.p, 0.0)).r_p.norm() / prob.f_norm();
    if (write) {
        std::filesystem::create_directories(c.out_dir);
        std::ofstream f(std::filesystem::path(c.out_dir) / "oracle.csv");
        csv_header(f);
        f << std::setprecision(10) << "pair,rel_discrepancy\n"
          << "dense_vs_sequential," << rep.dense_vs_sequential << "\nlowrank_vs_dense," << rep.lowrank_vs_dense
          << "\nlowrank_vs_sequential," << rep.lowrank_vs_sequential << '\n';
    }
    return rep;
}

// ---------------------------------------------------------------------------

struct SweepRow {
    std::string parameter;
    double value{0.0};
    bool ok{false};
    bool converged{false};
    int picard_steps{0};
    int total_gmres{0};
    Index u_k1{0}, u_k2{0}, p_k1{0}, p_k2{0};
    double seconds{0.0};
    std::string error;
};

inline bool is_sweep_parameter(const std::string& p) {
    return p == "sigma" || p == "nu0" || p == "h" || p == "tau" || p == "tol_gmres";
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
    csv_header(os);
    os << "parameter,value,converged,picard_steps,total_gmres,u_k1,u_k2,p_k1,p_k2,seconds,error\n";
    os << std::setprecision(10);
    for (const auto& r : rows)
        os << r.parameter << ',' << r.value << ',' << (r.converged ? 1 : 0) << ',' << r.picard_steps << ','
           << r.total_gmres << ',' << r.u_k1 << ',' << r.u_k2 << ',' << r.p_k1 << ',' << r.p_k2 << ',' << r.seconds
           << ',' << '"' << r.error << '"' << '\n';
}

/// One run per value; failures are recorded and the sweep continues. Each
/// run's artifacts go to out_dir/<parameter>_<index>.
inline std::vector<SweepRow> sweep(const ExperimentConfig& base, const std::string& parameter,
                                   const std::vector<double>& values, bool write = true,
                                   const std::function<void(const SweepRow&)>& on_row = {}) {
    if (!is_sweep_parameter(parameter)) throw ConfigError("cannot sweep over '" + parameter + "'");
    std::vector<SweepRow> rows;
    for (std::size_t i = 0; i < values.size(); ++i) {
        SweepRow row;
        row.parameter = parameter;
        row.value = values[i];
        try {
            ExperimentConfig c = base;
            std::ostringstream v;
            v << std::setprecision(17) << values[i];
            set_config_key(c, parameter, v.str());
            c.out_dir = (std::filesystem::path(base.out_dir) / (parameter + "_" + std::to_string(i))).string();
            const ExperimentResult r = run_experiment(c, write);
            const PicardReport& rep = r.solve.report;
            row.ok = true;
            row.converged = rep.converged;
            row.picard_steps = rep.picard_steps();
            row.total_gmres = rep.total_gmres();
            row.u_k1 = r.solve.u.rank1();
            row.u_k2 = r.solve.u.rank2();
            row.p_k1 = r.solve.p.rank1();
            row.p_k2 = r.solve.p.rank2();
            row.seconds = rep.solve_seconds;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(row);
        if (on_row) on_row(row);
    }
    if (write) {
        std::filesystem::create_directories(base.out_dir);
        std::ofstream f(std::filesystem::path(base.out_dir) / "sweep.csv");
        write_sweep_csv(f, rows);
    }
    return rows;
}

}  // namespace lrns
