#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "errors.hpp"
#include "geometry.hpp"

namespace petgamma {

struct ExperimentConfig {
    GeometryConfig geometry;
    LimitCase limit_case = LimitCase::D;
    std::vector<double> time_bins;  // N_n
    std::vector<double> detectors;  // M_n
    std::vector<double> cells;      // K_n, PPP partitions
    std::vector<double> q, beta, u, delta, r, s;
    std::vector<std::uint64_t> seeds;
    double pa = 0.1, ps = 0.2, pd = 0.7;
    double assouad_a = 1.0;
    bool coupled = false;
    int ks_seeds = 500;
    int check_from = 4;
    int n_ang = 512;
    int g_resolution = 64;
    std::uint64_t g_samples = 10'000'000;
    std::uint64_t g_seed = 7;
    std::string cache_dir = "cache";
    std::string output_dir = "out";
    std::vector<std::string> warnings;
};

namespace detail {

inline double number_at(const nlohmann::json& j, const std::string& path) {
    if (!j.is_number()) throw ConfigError(path + ": expected a number");
    return j.get<double>();
}

inline double opt_number(const nlohmann::json& j, const char* key, double dflt, const std::string& path) {
    return j.contains(key) ? number_at(j.at(key), path + "." + key) : dflt;
}

// A schedule is an explicit array or a generator object
//   {"generator": "geometric", "base": b, "count": c, "start": n0, "scale": s, "exponent": e, "n_power": p}
//   giving s * n^p * b^(e n) for n = n0 .. n0 + c - 1,
//   {"generator": "q_power", "exponent": e, "scale": s} giving s * q_n^e, or
//   {"generator": "constant", "value": v, "count": c}.
inline std::vector<double> parse_schedule(const nlohmann::json& j, const std::string& path,
                                          const std::vector<double>* q = nullptr) {
    std::vector<double> out;
    if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) out.push_back(number_at(j[i], path + "[" + std::to_string(i) + "]"));
        return out;
    }
    if (j.is_number()) return {j.get<double>()};
    if (!j.is_object() || !j.contains("generator") || !j.at("generator").is_string())
        throw ConfigError(path + ": expected an array or a generator object");
    std::string gen = j.at("generator").get<std::string>();
    if (gen == "geometric") {
        double base = opt_number(j, "base", 2.0, path);
        double count = opt_number(j, "count", 0.0, path);
        double start = opt_number(j, "start", 1.0, path);
        double scale = opt_number(j, "scale", 1.0, path);
        double expo = opt_number(j, "exponent", 1.0, path);
        double npow = opt_number(j, "n_power", 0.0, path);
        if (!(base > 0.0)) throw ConfigError(path + ".base: must be positive");
        if (count < 1.0) throw ConfigError(path + ".count: must be at least 1");
        for (int i = 0; i < static_cast<int>(count); ++i) {
            double n = start + i;
            out.push_back(scale * std::pow(n, npow) * std::pow(base, expo * n));
        }
        return out;
    }
    if (gen == "q_power") {
        if (!q || q->empty()) throw ConfigError(path + ": q_power needs sequences.q");
        double scale = opt_number(j, "scale", 1.0, path);
        double expo = opt_number(j, "exponent", -0.5, path);
        for (double v : *q) out.push_back(scale * std::pow(v, expo));
        return out;
    }
    if (gen == "constant") {
        double v = opt_number(j, "value", 1.0, path);
        double count = opt_number(j, "count", q ? static_cast<double>(q->size()) : 1.0, path);
        out.assign(static_cast<std::size_t>(std::max(count, 1.0)), v);
        return out;
    }
    throw ConfigError(path + ".generator: unknown generator '" + gen + "'");
}

inline std::vector<std::uint64_t> parse_seeds(const nlohmann::json& j) {
    std::vector<std::uint64_t> out;
    if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) {
            if (!j[i].is_number_integer() || j[i].get<long long>() < 0)
                throw ConfigError("seeds[" + std::to_string(i) + "]: expected a nonnegative integer");
            out.push_back(j[i].get<std::uint64_t>());
        }
    } else if (j.is_object()) {
        double start = opt_number(j, "start", 0.0, "seeds"), count = opt_number(j, "count", 0.0, "seeds");
        for (int i = 0; i < static_cast<int>(count); ++i) out.push_back(static_cast<std::uint64_t>(start) + i);
    } else {
        throw ConfigError("seeds: expected an array or {start, count}");
    }
    if (out.empty()) throw ConfigError("seeds: empty seed list");
    return out;
}

}  // namespace detail

inline void validate(ExperimentConfig& c) {
    c.geometry.validate();
    if (std::fabs(c.pa + c.ps + c.pd - 1.0) > 1e-9) throw ConfigError("probabilities: pa + ps + pd must equal 1");
    if (!(c.ps > 0.0)) throw ConfigError("probabilities.ps: must be positive");
    if (c.pa < 0.0 || c.pd < 0.0) throw ConfigError("probabilities: must be nonnegative");
    if (c.seeds.empty()) throw ConfigError("seeds: empty seed list");
    for (std::size_t n = 0; n < c.q.size(); ++n) {
        if (!(c.q[n] > 0.0)) throw ConfigError("sequences.q[" + std::to_string(n) + "]: must be positive");
        if (n > 0 && c.q[n] < c.q[n - 1]) throw ConfigError("sequences.q: must be non-decreasing");
    }
    for (std::size_t n = 0; n < c.beta.size(); ++n)
        if (!(c.beta[n] >= 0.0)) throw ConfigError("sequences.beta[" + std::to_string(n) + "]: must be nonnegative");
    for (std::size_t n = 0; n < c.u.size(); ++n)
        if (!(c.u[n] > 0.0)) throw ConfigError("sequences.u[" + std::to_string(n) + "]: must be positive");
    if (!(c.assouad_a > 0.0)) throw ConfigError("assouad_a: must be positive");
    // Vanishing-regularization regime: 1/beta_{n+1} = o(q_n) or N_n = o(q_n),
    // checked as a decreasing ratio along the schedule.
    c.warnings.clear();
    if (c.q.size() >= 3 && c.beta.size() == c.q.size()) {
        auto decreasing = [&](auto ratio) {
            for (std::size_t n = 1; n + 1 < c.q.size(); ++n)
                if (!(ratio(n) < ratio(n - 1))) return false;
            return true;
        };
        bool beta_ok = decreasing([&](std::size_t n) { return c.beta[n + 1] > 0.0 ? 1.0 / (c.beta[n + 1] * c.q[n]) : INFINITY; });
        bool bins_ok = c.time_bins.size() == c.q.size() && decreasing([&](std::size_t n) { return c.time_bins[n] / c.q[n]; });
        if (!beta_ok && !bins_ok)
            c.warnings.push_back("sequences: neither 1/beta_{n+1} = o(q_n) nor N_n = o(q_n) is evident on this schedule");
    }
}

inline ExperimentConfig parse_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    ExperimentConfig c;
    if (j.contains("geometry")) {
        const auto& g = j.at("geometry");
        c.geometry.R_dom = detail::opt_number(g, "R_dom", c.geometry.R_dom, "geometry");
        c.geometry.R_scan = detail::opt_number(g, "R_scan", c.geometry.R_scan, "geometry");
        c.geometry.T_horizon = detail::opt_number(g, "T_horizon", c.geometry.T_horizon, "geometry");
        c.geometry.grid_n = static_cast<int>(detail::opt_number(g, "grid_n", c.geometry.grid_n, "geometry"));
        c.geometry.nt = static_cast<int>(detail::opt_number(g, "nt", c.geometry.nt, "geometry"));
    }
    if (j.contains("sequences")) {
        const auto& s = j.at("sequences");
        if (s.contains("q")) c.q = detail::parse_schedule(s.at("q"), "sequences.q");
        auto get = [&](const char* key, std::vector<double>& out) {
            if (s.contains(key)) out = detail::parse_schedule(s.at(key), std::string("sequences.") + key, &c.q);
        };
        get("beta", c.beta);
        get("u", c.u);
        get("delta", c.delta);
        get("r", c.r);
        get("s", c.s);
    }
    if (j.contains("partitions")) {
        const auto& p = j.at("partitions");
        if (p.contains("case")) {
            if (!p.at("case").is_string()) throw ConfigError("partitions.case: expected a string");
            c.limit_case = parse_case(p.at("case").get<std::string>(), "partitions.case");
        }
        if (p.contains("time_bins")) c.time_bins = detail::parse_schedule(p.at("time_bins"), "partitions.time_bins", &c.q);
        if (p.contains("detectors")) c.detectors = detail::parse_schedule(p.at("detectors"), "partitions.detectors", &c.q);
        if (p.contains("cells")) c.cells = detail::parse_schedule(p.at("cells"), "partitions.cells", &c.q);
        if (p.contains("regime")) {
            std::string r = p.at("regime").get<std::string>();
            if (r != "independent" && r != "coupled") throw ConfigError("partitions.regime: expected independent or coupled");
            c.coupled = r == "coupled";
        }
    }
    if (j.contains("probabilities")) {
        const auto& p = j.at("probabilities");
        c.pa = detail::opt_number(p, "pa", c.pa, "probabilities");
        c.ps = detail::opt_number(p, "ps", c.ps, "probabilities");
        c.pd = detail::opt_number(p, "pd", c.pd, "probabilities");
    }
    c.assouad_a = detail::opt_number(j, "assouad_a", c.assouad_a, "config");
    c.ks_seeds = static_cast<int>(detail::opt_number(j, "ks_seeds", c.ks_seeds, "config"));
    c.check_from = static_cast<int>(detail::opt_number(j, "check_from", c.check_from, "config"));
    c.n_ang = static_cast<int>(detail::opt_number(j, "n_ang", c.n_ang, "config"));
    if (j.contains("gtable")) {
        const auto& g = j.at("gtable");
        c.g_resolution = static_cast<int>(detail::opt_number(g, "resolution", c.g_resolution, "gtable"));
        c.g_samples = static_cast<std::uint64_t>(detail::opt_number(g, "samples", static_cast<double>(c.g_samples), "gtable"));
        c.g_seed = static_cast<std::uint64_t>(detail::opt_number(g, "seed", static_cast<double>(c.g_seed), "gtable"));
        if (g.contains("cache_dir")) c.cache_dir = g.at("cache_dir").get<std::string>();
    }
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    if (!j.contains("seeds")) throw ConfigError("seeds: missing");
    c.seeds = detail::parse_seeds(j.at("seeds"));
    validate(c);
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot read " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + std::string(e.what()));
    }
    try {
        return parse_config(j);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + std::string(e.what()));
    }
}

}  // namespace petgamma
