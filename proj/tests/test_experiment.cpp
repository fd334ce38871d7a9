#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "lrns/experiment.hpp"
#include "test_util.hpp"

using namespace lrns;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_channel() {
    ExperimentConfig c;
    c.domain = DomainKind::channel;
    c.h = 0.5;
    c.t_f = 1.0;
    c.tau = 0.25;
    c.m = 2;
    c.d_psi = 1;
    c.nu0 = 0.1;
    c.sigma = 0.2;
    c.solver.tol_picard = 1e-10;
    c.solver.set_tol_gmres(1e-8);
    c.solver.eps_gmres = 1e-10;
    c.solver.eps_soln = 1e-12;
    c.solver.eps_conv = 1e-12;
    c.solver.tol_inner = 1e-3;
    c.solver.maxit_picard = 40;
    return c;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("lrns_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Config, DefaultsMatchBenchmarkTable) {
    const ExperimentConfig c;
    EXPECT_DOUBLE_EQ(c.nu0, 1.0 / 50);
    EXPECT_DOUBLE_EQ(c.sigma, 0.01);
    EXPECT_DOUBLE_EQ(c.b, 4.0);
    EXPECT_EQ(c.m, 3);
    EXPECT_EQ(c.d_psi, 3);
    EXPECT_DOUBLE_EQ(c.t_f, 1.0);
    EXPECT_DOUBLE_EQ(c.tau, 1.0 / 64);
    EXPECT_DOUBLE_EQ(c.h, 0.25);
    EXPECT_EQ(c.domain, DomainKind::step);
    EXPECT_EQ(c.n_t(), 64);
    EXPECT_DOUBLE_EQ(c.solver.tol_picard, 1e-5);
    EXPECT_DOUBLE_EQ(c.solver.tol_gmres, 1e-1);
    EXPECT_DOUBLE_EQ(c.solver.eps_gmres, 1e-3);
    EXPECT_DOUBLE_EQ(c.solver.eps_soln, 1e-7);
    EXPECT_DOUBLE_EQ(c.solver.eps_conv, 1e-3);
    EXPECT_EQ(c.solver.prec, PrecondKind::lsc);
}

TEST(Config, ParsesIniWithExpressions) {
    std::istringstream in(
        "[problem]\nnu0 = 1/50\nsigma = 0.1\ntau = 2^-5\nh = 2^-1\ndomain = channel\n"
        "[solver]\neps_gmres = 1e-4\ntol_gmres = 1e-2\npreconditioner = pcd\nmaxit_picard = 7\n"
        "[output]\ndir = somewhere\n");
    const ExperimentConfig c = parse_config(in);
    EXPECT_DOUBLE_EQ(c.nu0, 0.02);
    EXPECT_DOUBLE_EQ(c.tau, 1.0 / 32);
    EXPECT_DOUBLE_EQ(c.h, 0.5);
    EXPECT_EQ(c.domain, DomainKind::channel);
    EXPECT_DOUBLE_EQ(c.solver.tol_gmres, 1e-2);
    EXPECT_DOUBLE_EQ(c.solver.eps_gmres, 1e-4);  // explicit value wins over the coupling
    EXPECT_EQ(c.solver.prec, PrecondKind::pcd);
    EXPECT_EQ(c.solver.maxit_picard, 7);
    EXPECT_EQ(c.out_dir, "somewhere");
}

TEST(Config, TolGmresCouplesEps) {
    std::istringstream in("[solver]\ntol_gmres = 1e-3\n");
    EXPECT_DOUBLE_EQ(parse_config(in).solver.eps_gmres, 1e-5);
}

TEST(Config, RoundTrip) {
    ExperimentConfig c = tiny_channel();
    c.out_dir = "x/y";
    std::stringstream ss;
    write_config(ss, c);
    const ExperimentConfig d = parse_config(ss);
    EXPECT_EQ(d.domain, c.domain);
    EXPECT_DOUBLE_EQ(d.sigma, c.sigma);
    EXPECT_DOUBLE_EQ(d.solver.eps_gmres, c.solver.eps_gmres);
    EXPECT_EQ(d.out_dir, c.out_dir);
}

TEST(Config, Rejections) {
    std::istringstream unknown("[problem]\nviscosity = 3\n");
    EXPECT_THROW(parse_config(unknown), ConfigError);
    std::istringstream bad_num("[problem]\nsigma = abc\n");
    EXPECT_THROW(parse_config(bad_num), ConfigError);
    std::istringstream bad_tol("[solver]\ntol_gmres = 2\n");
    EXPECT_THROW(parse_config(bad_tol), ConfigError);
    std::istringstream bad_tau("[problem]\ntau = 0.3\n");
    EXPECT_THROW(parse_config(bad_tau), ConfigError);
    std::istringstream bad_prec("[solver]\npreconditioner = ilu\n");
    EXPECT_THROW(parse_config(bad_prec), ConfigError);
    ExperimentConfig c;
    c.h = 0.3;
    EXPECT_THROW(build_discretization(c), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/config.ini"), ConfigError);
}

TEST(Experiment, BenchmarkDimensionsLine) {
    const auto d = build_discretization(ExperimentConfig{});
    EXPECT_EQ(dimensions_line(*d), "n_t=64, n_\xCE\xBE=20, n_u=2992, n_p=461, total=4419840");
}

TEST(Experiment, StorageRatioFormula) {
    EXPECT_NEAR(storage_ratio(64, 20, 2992, 13, 83), 270748.0 / 3829760.0, 1e-15);
    EXPECT_NEAR(storage_ratio(64, 20, 2992, 13, 83), 0.0707, 5e-5);
    EXPECT_DOUBLE_EQ(storage_ratio(2, 3, 4, 1, 1), (2.0 + 3.0 + 4.0) / 24.0);
}

TEST(Experiment, FieldMomentsFromSlices) {
    const Matrix c1 = Matrix::Random(3, 2), c2 = Matrix::Random(2 * 4, 2), c3 = Matrix::Random(2, 5);
    const TensorTrain3 z(c1, c2, 4, c3);
    const FieldMoments f = field_moments(z, 1, 0.5);
    EXPECT_DOUBLE_EQ(f.time, 1.0);
    for (Index i = 0; i < 5; ++i) {
        EXPECT_NEAR(f.mean(i), z.entry(1, 0, i), 1e-14);
        double v = 0;
        for (Index r = 1; r < 4; ++r) v += z.entry(1, r, i) * z.entry(1, r, i);
        EXPECT_NEAR(f.variance(i), v, 1e-13);
        EXPECT_GE(f.variance(i), 0.0);
    }
}

TEST(Experiment, DeterministicRunHasNoVariance) {
    ExperimentConfig c = tiny_channel();
    c.sigma = 0.0;
    c.m = 2;
    c.out_dir = scratch("det").string();
    const ExperimentResult r = run_experiment(c);
    EXPECT_TRUE(r.solve.report.converged);
    EXPECT_LE(r.stats.max_variance_u, 1e-10);
    EXPECT_LE(r.stats.max_variance_p, 1e-10);
    EXPECT_EQ(r.solve.u.sizes().n2, 3);
    // only psi_1 carries the solution
    const FullTensor3 u = tt_to_full(r.solve.u);
    double off = 0.0;
    for (Index k = 0; k < u.sizes().n1; ++k)
        for (Index s = 1; s < u.sizes().n2; ++s)
            for (Index i = 0; i < u.sizes().n3; ++i) off = std::max(off, std::abs(u(k, s, i)));
    EXPECT_LE(off, 1e-10 * u.norm());
}

TEST(Experiment, WritesArtifacts) {
    ExperimentConfig c = tiny_channel();
    c.out_dir = scratch("artifacts").string();
    const ExperimentResult r = run_experiment(c);
    for (const char* f : {"report.csv", "ranks.csv", "stats.csv", "fields.csv", "config.ini", "u.tt3", "p.tt3"})
        EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / f)) << f;
    const TensorTrain3 u = load_tt3((fs::path(c.out_dir) / "u.tt3").string());
    EXPECT_LT(testutil::rel_diff(tt_to_full(u).vec(), tt_to_full(r.solve.u).vec()), 1e-15);
    const std::string report = slurp(fs::path(c.out_dir) / "report.csv");
    EXPECT_EQ(report.rfind("# lrns csv schema 1\nstep,residual,", 0), 0u);
    std::istringstream lines(report);
    std::string line;
    int rows = 0;
    while (std::getline(lines, line)) ++rows;
    EXPECT_EQ(rows, 2 + static_cast<int>(r.solve.report.steps.size()));
    const ExperimentConfig back = load_config((fs::path(c.out_dir) / "config.ini").string());
    EXPECT_DOUBLE_EQ(back.sigma, c.sigma);
}

TEST(Experiment, RerunsAreIdentical) {
    ExperimentConfig c = tiny_channel();
    c.out_dir = scratch("rerun_a").string();
    run_experiment(c);
    const std::string a = c.out_dir;
    c.out_dir = scratch("rerun_b").string();
    run_experiment(c);
    for (const char* f : {"ranks.csv", "fields.csv"})
        EXPECT_EQ(slurp(fs::path(a) / f), slurp(fs::path(c.out_dir) / f)) << f;
}

TEST(Oracle, TinyChannelThreeWay) {
    ExperimentConfig c = tiny_channel();
    c.out_dir = scratch("oracle").string();
    const OracleReport r = run_oracle(c);
    EXPECT_TRUE(r.lowrank_converged);
    EXPECT_LT(r.dense_vs_sequential, 1e-10);
    EXPECT_LT(r.lowrank_vs_dense, 1e-7);
    EXPECT_LT(r.lowrank_vs_sequential, 1e-7);
    EXPECT_LT(r.divergence_dense, 1e-10);
    EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "oracle.csv"));
}

TEST(Oracle, DeterministicStokesLikeSanity) {
    ExperimentConfig c = tiny_channel();
    c.sigma = 0.0;
    c.m = 0;
    c.h = 0.25;
    c.nu0 = 1.0;
    c.out_dir = scratch("oracle_det").string();
    const auto d = build_discretization(c);
    const DenseSolution s = sequential_solve(d->sd, d->gpc, d->n_t, d->tau);
    const Index nu = d->sd.n_u();
    Vector ul(nu);
    for (Index i = 0; i < nu; ++i) ul(i) = s.u(d->n_t - 1, 0, i);
    const double ramp = ramp_values(d->sd, d->n_t, d->tau)(d->n_t - 1);
    const Vector full = d->sd.embed(ul) + ramp * d->sd.lift_full();
    // divergence free in the discrete sense
    EXPECT_LT((d->sd.B_full() * full).norm(), 1e-10 * full.norm());
    // outflow x-velocity peaks on the centreline and decays towards the walls
    const StructuredMesh& m = d->mesh;
    double centre = 0.0, near_wall = 0.0;
    for (Index i = 0; i < m.n_q2(); ++i) {
        if (std::abs(m.q2_xy(i, 0) - 1.0) > 1e-12) continue;
        const double y = m.q2_xy(i, 1);
        if (std::abs(y - 0.5) < 1e-12) centre = full(i);
        if (std::abs(y - 0.125) < 1e-12 || std::abs(y - 0.875) < 1e-12) near_wall = std::max(near_wall, full(i));
    }
    EXPECT_GT(centre, 0.0);
    EXPECT_GT(centre, near_wall);
}

TEST(Sweep, RecordsFailuresAndContinues) {
    ExperimentConfig c = tiny_channel();
    c.solver.maxit_picard = 10;
    c.out_dir = scratch("sweep").string();
    const std::vector<SweepRow> rows = sweep(c, "h", {0.5, 0.3});
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_TRUE(rows[0].ok);
    EXPECT_TRUE(rows[0].converged);
    EXPECT_FALSE(rows[1].ok);
    EXPECT_FALSE(rows[1].error.empty());
    EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "sweep.csv"));
    EXPECT_THROW(sweep(c, "b", {1.0}), ConfigError);
}
