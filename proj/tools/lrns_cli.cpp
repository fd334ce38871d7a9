#include <cstdio>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lrns/experiment.hpp"

using namespace lrns;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNotConverged = 2;
constexpr int kExitBadConfig = 3;

struct Overrides {
    std::string config;
    std::optional<std::string> sigma, h, tau, prec, tol_gmres, out;
    std::vector<std::string> sets;

    void attach(CLI::App* app) {
        // -h would clash with the mesh size option
        app->set_help_flag("--help", "print this help message and exit");
        app->add_option("-c,--config", config, "INI configuration file");
        app->add_option("--sigma", sigma, "viscosity standard deviation");
        app->add_option("--h", h, "mesh size");
        app->add_option("--tau", tau, "time step");
        app->add_option("--prec", prec, "Schur complement approximation (pcd|lsc)");
        app->add_option("--tol-gmres", tol_gmres, "outer GMRES tolerance (eps_gmres follows at 1e-2 times)");
        app->add_option("--out", out, "output directory");
        app->add_option("--set", sets, "extra key=value override (repeatable)");
    }

    [[nodiscard]] ExperimentConfig resolve() const {
        ExperimentConfig c = config.empty() ? ExperimentConfig{} : load_config(config);
        if (sigma) set_config_key(c, "sigma", *sigma);
        if (h) set_config_key(c, "h", *h);
        if (tau) set_config_key(c, "tau", *tau);
        if (prec) set_config_key(c, "preconditioner", *prec);
        if (tol_gmres) set_config_key(c, "tol_gmres", *tol_gmres);
        if (out) c.out_dir = *out;
        for (const std::string& kv : sets) {
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
            set_config_key(c, kv.substr(0, eq), kv.substr(eq + 1));
        }
        c.validate();
        return c;
    }
};

void print_step(const PicardStepRecord& s) {
    std::printf("  step %2d  rel.res %.3e  gmres %3d%s  inner %4d  ranks u (%ld,%ld) p (%ld,%ld) u~ (%ld,%ld)  %.1fs\n",
                s.step, s.rel_residual, s.gmres_iterations, s.gmres_converged ? " " : "*", s.inner_iterations,
                static_cast<long>(s.ranks_u[0]), static_cast<long>(s.ranks_u[1]), static_cast<long>(s.ranks_p[0]),
                static_cast<long>(s.ranks_p[1]), static_cast<long>(s.ranks_ut[0]), static_cast<long>(s.ranks_ut[1]),
                s.seconds);
    std::fflush(stdout);
}

int cmd_run(const Overrides& o) {
    const ExperimentConfig c = o.resolve();
    {
        const auto d = build_discretization(c);
        std::printf("%s\n", dimensions_line(*d).c_str());
    }
    const ExperimentResult r = run_experiment(c, true, print_step);
    const PicardReport& rep = r.solve.report;
    std::printf("%s after %d Picard steps, %d GMRES iterations, %.1fs solve (%.1fs setup)\n",
                rep.converged ? "converged" : "NOT converged", rep.picard_steps(), rep.total_gmres(),
                rep.solve_seconds, r.setup_seconds);
    std::printf("final ranks u (%ld,%ld) p (%ld,%ld), storage ratio u %.4f, artifacts in %s\n",
                static_cast<long>(r.solve.u.rank1()), static_cast<long>(r.solve.u.rank2()),
                static_cast<long>(r.solve.p.rank1()), static_cast<long>(r.solve.p.rank2()), r.stats.storage_u,
                c.out_dir.c_str());
    return rep.converged ? kExitOk : kExitNotConverged;
}

int cmd_oracle(const Overrides& o) {
    const ExperimentConfig c = o.resolve();
    const OracleReport r = run_oracle(c);
    std::printf("%s\n", r.dimensions.c_str());
    std::printf("dense all-at-once vs sequential  %.3e\n", r.dense_vs_sequential);
    std::printf("low-rank vs dense all-at-once    %.3e\n", r.lowrank_vs_dense);
    std::printf("low-rank vs sequential           %.3e\n", r.lowrank_vs_sequential);
    std::printf("dense divergence ||Bu||/||f||    %.3e\n", r.divergence_dense);
    return r.lowrank_converged ? kExitOk : kExitNotConverged;
}

int cmd_sweep(const Overrides& o, const std::string& param, const std::string& values_csv) {
    const ExperimentConfig c = o.resolve();
    std::vector<double> values;
    std::stringstream ss(values_csv);
    for (std::string item; std::getline(ss, item, ',');) values.push_back(parse_number(item));
    if (values.empty()) throw ConfigError("sweep needs at least one value");
    std::printf("%-10s %12s %5s %6s %10s %10s %9s\n", "parameter", "value", "conv", "picard", "gmres", "ranks u",
                "seconds");
    bool all = true;
    const auto rows = sweep(c, param, values, true, [](const SweepRow& r) {
        if (!r.ok) {
            std::printf("%-10s %12g  failed: %s\n", r.parameter.c_str(), r.value, r.error.c_str());
            return;
        }
        std::printf("%-10s %12g %5s %6d %10d %5ld,%-4ld %9.1f\n", r.parameter.c_str(), r.value,
                    r.converged ? "yes" : "no", r.picard_steps, r.total_gmres, static_cast<long>(r.u_k1),
                    static_cast<long>(r.u_k2), r.seconds);
        std::fflush(stdout);
    });
    for (const auto& r : rows) all = all && r.ok && r.converged;
    return all ? kExitOk : kExitNotConverged;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Low-rank all-at-once solver for stochastic unsteady Navier-Stokes"};
    app.require_subcommand(1);

    Overrides run_o, oracle_o, sweep_o;
    CLI::App* run = app.add_subcommand("run", "solve one configuration and write report/ranks/stats CSVs and TT dumps");
    run_o.attach(run);
    CLI::App* oracle = app.add_subcommand("oracle", "compare low-rank, dense all-at-once and sequential solves");
    oracle_o.attach(oracle);
    CLI::App* sw = app.add_subcommand("sweep", "run a parameter sweep and write sweep.csv");
    sweep_o.attach(sw);
    std::string param, values;
    sw->add_option("--param", param, "sigma | nu0 | h | tau | tol_gmres")->required();
    sw->add_option("--values", values, "comma separated values")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitBadConfig;
    }

    try {
        if (*run) return cmd_run(run_o);
        if (*oracle) return cmd_oracle(oracle_o);
        if (*sw) return cmd_sweep(sweep_o, param, values);
    } catch (const ConfigError& e) {
        std::cerr << "invalid configuration: " << e.what() << '\n';
        return kExitBadConfig;
    } catch (const SizeCapError& e) {
        std::cerr << "size cap: " << e.what() << '\n';
        return kExitBadConfig;
    } catch (const ViscosityError& e) {
        std::cerr << "invalid configuration: " << e.what() << '\n';
        return kExitBadConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return kExitOk;
}
