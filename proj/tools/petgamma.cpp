#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <glog/logging.h>

#include "petgamma/config.hpp"
#include "petgamma/experiments.hpp"
#include "petgamma/selftest.hpp"

using namespace petgamma;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::string out;
    std::vector<std::uint64_t> seeds;
};

ExperimentConfig load(const Common& c) {
    auto cfg = load_config(c.config);
    if (!c.out.empty()) cfg.output_dir = c.out;
    if (!c.seeds.empty()) cfg.seeds = c.seeds;
    validate(cfg);
    for (const auto& w : cfg.warnings) std::cerr << "warning: " << w << "\n";
    return cfg;
}

std::vector<double> need(const std::vector<double>& v, const std::string& path, std::size_t n = 0) {
    if (v.empty()) throw ConfigError(path + ": missing");
    if (n && v.size() != n) throw ConfigError(path + ": expected " + std::to_string(n) + " entries");
    return v;
}

std::vector<double> column_or(const std::vector<double>& v, std::size_t n, double dflt, const std::string& path) {
    if (v.empty()) return std::vector<double>(n, dflt);
    return need(v, path, n);
}

int finish(const ExperimentConfig& cfg, const std::string& which, const HarnessResult& r) {
    fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    for (const auto& [name, table] : r.tables) write_csv(dir / (name + ".csv"), table);
    std::ofstream sum(dir / "summary.txt", std::ios::binary);
    sum << which << "\n";
    for (const auto& c : r.checks) sum << summary_line(c) << "\n";
    for (const auto& n : r.notes) sum << "note: " << n << "\n";
    std::cout << which << "\n";
    for (const auto& c : r.checks) std::cout << summary_line(c) << "\n";
    for (const auto& n : r.notes) std::cout << "note: " << n << "\n";
    return r.pass() ? 0 : 1;
}

Series series(const Table& t, const std::string& x, const std::string& y, const std::string& label) {
    return {label, t.column(x), t.column(y)};
}

RateConfig rate_config(const ExperimentConfig& cfg) {
    RateConfig rc;
    rc.lambda = unit_interval_lebesgue();
    rc.q = need(cfg.q, "sequences.q");
    auto K = need(cfg.cells, "partitions.cells", rc.q.size());
    rc.r = need(cfg.r, "sequences.r", rc.q.size());
    for (std::size_t n = 0; n < K.size(); ++n) {
        if (K[n] < 1.0 || K[n] != std::floor(K[n]))
            throw ConfigError("partitions.cells[" + std::to_string(n) + "]: must be a positive integer");
        rc.levels.push_back(ProductGrid{{PartitionLevel::uniform(0.0, 1.0, static_cast<std::size_t>(K[n]))}});
    }
    rc.seeds = cfg.seeds;
    rc.regime = cfg.coupled ? Regime::Coupled : Regime::Independent;
    return rc;
}

int run_ppp_rate(const ExperimentConfig& cfg) {
    auto rc = rate_config(cfg);
    HarnessResult r = ppp_rate_study(rc, cfg.check_from);
    if (cfg.coupled) r.append(coupled_study(rc, cfg.ks_seeds));
    const auto& med = r.table("ppp_rate_median");
    write_svg_loglog(fs::path(cfg.output_dir) / "ppp_rate.svg", "PPP discrepancy", "q", "median",
                     {series(med, "q", "median_Z_over_r", "Z/r"), series(med, "q", "median_flat_bound", "flat bound")});
    return finish(cfg, "ppp-rate", r);
}

int run_flat_rate(const ExperimentConfig& cfg) {
    auto r = flat_rate_study(cfg.assouad_a, need(cfg.q, "sequences.q"), cfg.seeds);
    const auto& med = r.table("flat_rate_median");
    auto q = med.column("q");
    auto f = med.column("median_flat_bound");
    Series ref{"q^(-1/(a+2))", q, {}};
    for (double v : q) ref.y.push_back(f.front() * std::pow(v / q.front(), -1.0 / (cfg.assouad_a + 2.0)));
    write_svg_loglog(fs::path(cfg.output_dir) / "flat_rate.svg", "flat distance bound", "q", "median bound",
                     {series(med, "q", "median_flat_bound", "flat bound"), ref});
    return finish(cfg, "flat-rate", r);
}

int run_recovery(const ExperimentConfig& cfg) {
    auto rho = temporal_jump(cfg.geometry, cfg.geometry.grid_n, cfg.geometry.nt);
    auto r = recovery_study(rho, need(cfg.delta, "sequences.delta"));
    const auto& t = r.table("recovery");
    write_svg_loglog(fs::path(cfg.output_dir) / "recovery.svg", "recovery sequence", "delta", "value",
                     {series(t, "delta", "S_times_delta", "S delta"), series(t, "delta", "w2", "w2")});
    return finish(cfg, "recovery", r);
}

int run_simulate(const ExperimentConfig& cfg) {
    auto truth = moving_blob(cfg.geometry, cfg.geometry.grid_n, cfg.geometry.nt);
    double q = need(cfg.q, "sequences.q").front();
    std::vector<std::vector<Event>> events;
    auto r = simulate_study(truth, cfg.geometry, q, cfg.ps, cfg.pd, cfg.seeds, &events);
    fs::create_directories(cfg.output_dir);
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
        write_listmode(fs::path(cfg.output_dir) / ("listmode_seed" + std::to_string(cfg.seeds[i]) + ".csv"), events[i]);
    return finish(cfg, "simulate", r);
}

int run_reconstruct(const ExperimentConfig& cfg, const std::string& listmode) {
    auto truth = moving_blob(cfg.geometry, cfg.geometry.grid_n, cfg.geometry.nt);
    GammaLevel lv;
    lv.q = need(cfg.q, "sequences.q").front();
    lv.beta = cfg.beta.empty() ? 1.0 / std::sqrt(lv.q) : cfg.beta.front();
    lv.u = cfg.u.empty() ? 1.0 : cfg.u.front();
    lv.N = cfg.time_bins.empty() ? 2 : static_cast<int>(cfg.time_bins.front());
    lv.M = cfg.detectors.empty() ? 16 : static_cast<int>(cfg.detectors.front());
    auto time = PartitionLevel::uniform(0.0, cfg.geometry.T_horizon, static_cast<std::size_t>(lv.N));
    auto events = listmode.empty() ? simulate_listmode(truth, cfg.geometry, lv.q, cfg.ps, cfg.pd, cfg.seeds.front())
                                   : read_listmode(listmode);
    auto p = listmode_problem(events, lv, time, cfg.ps, cfg.pd);
    BinnedSystem sys(cfg.geometry, truth.grid, truth.nt(), time, lv.M, default_directions(lv.M));
    auto res = minimize_map(p, sys);
    HarnessResult r;
    r.tables.emplace_back("density", density_table(res.rho));
    r.tables.emplace_back("trace", trace_table(res.trace));
    Table s{{"events", "iterations", "stalled", "total", "mass_term", "data_term", "reg_term", "projected_gradient",
             "relative_L1_to_truth", "w2_to_truth"},
            {}};
    s.add({double(events.size()), double(res.iterations), res.stalled ? 1.0 : 0.0, res.energy.total,
           res.energy.mass_term, res.energy.data_term, res.energy.reg_term, res.projected_gradient,
           relative_l1(res.rho, truth), slice_w2(res.rho, truth)});
    r.tables.emplace_back("reconstruct_summary", s);
    r.checks.push_back({"reconstruct_trace_monotone", trace_monotone(res.trace), "accepted energies non-increasing"});
    r.checks.push_back({"reconstruct_converged", !res.stalled,
                        std::to_string(res.iterations) + " iterations, final energy " + fmt(res.energy.total, 10)});
    Series tr{"E - E_final", {}, {}};
    for (const auto& row : res.trace)
        if (row.iter > 0 && row.total > res.energy.total) {
            tr.x.push_back(row.iter);
            tr.y.push_back(row.total - res.energy.total);
        }
    write_svg_loglog(fs::path(cfg.output_dir) / "trace.svg", "convergence", "iteration", "energy gap", {tr});
    return finish(cfg, "reconstruct", r);
}

int run_gamma(const ExperimentConfig& cfg) {
    auto q = need(cfg.q, "sequences.q");
    std::size_t n = q.size();
    auto beta = column_or(cfg.beta, n, 0.0, "sequences.beta");
    if (cfg.beta.empty())
        for (std::size_t i = 0; i < n; ++i) beta[i] = 1.0 / std::sqrt(q[i]);
    auto u = column_or(cfg.u, n, 1.0, "sequences.u");
    auto N = need(cfg.time_bins, "partitions.time_bins", n);
    auto M = need(cfg.detectors, "partitions.detectors", n);
    std::vector<GammaLevel> levels;
    for (std::size_t i = 0; i < n; ++i) levels.push_back({static_cast<int>(N[i]), static_cast<int>(M[i]), q[i], beta[i], u[i]});
    auto g = load_or_estimate_g(cfg.cache_dir, cfg.geometry, cfg.g_resolution, cfg.g_samples, cfg.g_seed);
    auto truth = moving_blob(cfg.geometry, cfg.geometry.grid_n, cfg.geometry.nt);
    auto r = gamma_study(cfg.geometry, truth, levels, cfg.seeds, g, cfg.limit_case, cfg.ps, cfg.pd);
    const auto& m = r.table("gamma_median");
    write_svg_loglog(fs::path(cfg.output_dir) / "gamma.svg", "Gamma-study", "q", "median",
                     {series(m, "q", "median_w2", "W2"), series(m, "q", "median_abs_gap", "|E_n - E_inf|")});
    return finish(cfg, "gamma-study", r);
}

int run_selftest(const std::string& out) {
    fs::path dir = out.empty() ? fs::path("selftest") : fs::path(out);
    fs::create_directories(dir);
    auto report = [](const std::vector<Check>& checks) {
        std::string s;
        for (const auto& c : checks) s += summary_line(c) + "\n";
        return s;
    };
    auto first = report(selftest(dir / "cache"));
    auto second = report(selftest(dir / "cache"));
    bool same = first == second;
    std::string text = first + summary_line({"cli.deterministic_report", same, "two runs byte-identical"}) + "\n";
    std::ofstream(dir / "selftest_report.txt", std::ios::binary) << text;
    std::cout << text;
    return same && text.find("FAIL ") == std::string::npos ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    FLAGS_minloglevel = google::GLOG_ERROR;  // line-search warnings from the optimizer
    CLI::App app{"petgamma: dynamic PET reconstruction experiments"};
    app.require_subcommand(1);
    Common common;
    std::string listmode;
    auto add = [&](const std::string& name, const std::string& help) {
        auto* sc = app.add_subcommand(name, help);
        sc->add_option("--config", common.config, "JSON experiment config")->required()->check(CLI::ExistingFile);
        sc->add_option("--out", common.out, "output directory (overrides output_dir)");
        sc->add_option("--seeds", common.seeds, "seed list (overrides seeds)")->delimiter(',');
        return sc;
    };
    auto* ppp = add("ppp-rate", "discrepancy rate of binned Poisson samples");
    auto* flat = add("flat-rate", "flat-distance bound against q");
    auto* rec = add("recovery", "recovery sequence with bounded action");
    auto* sim = add("simulate", "simulate listmode data of the moving blob");
    auto* recon = add("reconstruct", "MAP reconstruction from listmode data");
    recon->add_option("--listmode", listmode, "listmode CSV to reconstruct (default: simulate)")->check(CLI::ExistingFile);
    auto* gamma = add("gamma-study", "MAP minimizers along a refining schedule");
    auto* self = app.add_subcommand("selftest", "quick example suite of every module");
    std::string self_out;
    self->add_option("--out", self_out, "output directory");
    CLI11_PARSE(app, argc, argv);

    try {
        if (self->parsed()) return run_selftest(self_out);
        auto cfg = load(common);
        if (ppp->parsed()) return run_ppp_rate(cfg);
        if (flat->parsed()) return run_flat_rate(cfg);
        if (rec->parsed()) return run_recovery(cfg);
        if (sim->parsed()) return run_simulate(cfg);
        if (recon->parsed()) return run_reconstruct(cfg, listmode);
        if (gamma->parsed()) return run_gamma(cfg);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
