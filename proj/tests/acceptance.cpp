// Acceptance run: one PASS/FAIL line per criterion, CSV tables under --out.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <glog/logging.h>

#include "petgamma/experiments.hpp"

using namespace petgamma;

namespace {

std::vector<std::uint64_t> seed_range(std::uint64_t start, int count) {
    std::vector<std::uint64_t> s(static_cast<std::size_t>(count));
    std::iota(s.begin(), s.end(), start);
    return s;
}

struct Criterion {
    int id;
    std::string title;
    double budget_s;
    std::function<HarnessResult()> run;
};

}  // namespace

int main(int argc, char** argv) {
    FLAGS_minloglevel = google::GLOG_ERROR;  // line-search warnings from the optimizer
    CLI::App app{"acceptance criteria"};
    std::string cache = "cache", out = "acceptance_out";
    std::vector<int> only;
    app.add_option("--cache", cache, "g-table cache directory");
    app.add_option("--out", out, "directory for CSV tables");
    app.add_option("--only", only, "criteria to run (default all)");
    CLI11_PARSE(app, argc, argv);

    GeometryConfig geom;
    const double ps = 0.2, pd = 0.7;
    auto gtable = [&] { return load_or_estimate_g(cache, geom, 64, 10'000'000, 7); };

    std::vector<Criterion> list = {
        {1, "PPP discrepancy rate", 30,
         [&] { return ppp_rate_study(dyadic_rate_config(10, seed_range(0, 20), Regime::Independent), 4); }},
        {2, "coupled regime", 60,
         [&] { return coupled_study(dyadic_rate_config(10, seed_range(0, 20), Regime::Coupled), 500); }},
        {3, "flat-distance rate", 60,
         [&] { return flat_rate_study(1.0, {1e2, 1e3, 1e4, 1e5, 1e6}, seed_range(0, 20)); }},
        {4, "recovery sequence", 300,
         [&] {
             std::vector<double> d;
             for (int n = 1; n <= 6; ++n) d.push_back(std::pow(10.0, -n));
             return recovery_study(temporal_jump(geom, 64, 32), d);
         }},
        {5, "Benamou-Brenier sanity", 60, [&] { return bb_sanity_study(geom); }},
        {6, "forward oracle equivalence", 180, [&] { return forward_oracle_study(geom, gtable()); }},
        {7, "refinement consistency", 120,
         [&] {
             std::vector<RefinementLevel> lv;
             for (int l = 0; l < 4; ++l)
                 lv.push_back({PartitionLevel::uniform(0.0, 1.0, std::size_t{2} << l), 8 << l});
             return refinement_study(moving_blob(geom, 32, 8), geom, gtable(), lv, ps, pd);
         }},
        {8, "time Hoelder continuity", 120, [&] { return holder_study(geom); }},
        {9, "limit identifiability", 300, [&] { return identifiability_study(geom); }},
        {10, "Gamma-study", 1200,
         [&] {
             std::vector<GammaLevel> lv;
             for (int n = 0; n < 3; ++n) {
                 GammaLevel l;
                 l.N = 2 << n;
                 l.M = 16 << n;
                 l.q = std::pow(10.0, 3 + n);
                 l.beta = 1.0 / std::sqrt(l.q);
                 lv.push_back(l);
             }
             return gamma_study(geom, moving_blob(geom, 32, 8), lv, seed_range(1000, 5), gtable(), LimitCase::D, ps, pd);
         }},
        {11, "equicoercivity", 60,
         [&] {
             auto truth = moving_blob(geom, 32, 8);
             GammaLevel lv;
             lv.q = 1e3;
             lv.beta = 1.0 / std::sqrt(lv.q);
             auto time = PartitionLevel::uniform(0.0, 1.0, 2);
             BinnedSystem sys(geom, truth.grid, truth.nt(), time, lv.M, default_directions(lv.M));
             auto p = listmode_problem(simulate_listmode(truth, geom, lv.q, ps, pd, 1000), lv, time, ps, pd);
             return equicoercivity_study(p, sys, 1000);
         }},
    };

    std::set<int> sel(only.begin(), only.end());
    int failed = 0;
    for (const auto& c : list) {
        if (!sel.empty() && !sel.count(c.id)) continue;
        auto t0 = std::chrono::steady_clock::now();
        HarnessResult r;
        std::string error;
        try {
            r = c.run();
        } catch (const std::exception& e) {
            error = e.what();
        }
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        for (const auto& [name, table] : r.tables) write_csv(std::filesystem::path(out) / ("c" + std::to_string(c.id) + "_" + name + ".csv"), table);
        bool ok = error.empty() && r.pass() && secs < c.budget_s;
        failed += !ok;
        std::printf("%s criterion %d (%s): runtime %.1f s (budget %.0f s)\n", ok ? "PASS" : "FAIL", c.id, c.title.c_str(),
                    secs, c.budget_s);
        if (!error.empty()) std::printf("    error: %s\n", error.c_str());
        for (const auto& ch : r.checks) std::printf("    %s\n", summary_line(ch).c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
