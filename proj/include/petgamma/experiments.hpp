#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bbflow.hpp"
#include "forward.hpp"
#include "geometry.hpp"
#include "grid.hpp"
#include "listmode.hpp"
#include "ppp.hpp"
#include "reconstruct.hpp"
#include "report.hpp"
#include "rng.hpp"

namespace petgamma {

struct HarnessResult {
    std::vector<std::pair<std::string, Table>> tables;
    std::vector<Check> checks;
    std::vector<std::string> notes;

    bool pass() const {
        return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
    }
    const Table& table(const std::string& name) const {
        for (const auto& [n, t] : tables)
            if (n == name) return t;
        throw Error("HarnessResult: no table " + name);
    }
    void append(HarnessResult other) {
        for (auto& t : other.tables) tables.push_back(std::move(t));
        for (auto& c : other.checks) checks.push_back(std::move(c));
        for (auto& n : other.notes) notes.push_back(std::move(n));
    }
};

// Blob of radius 0.25 moving from x = -0.2 to x = 0.2 at height 0.05.
inline SpacetimeDensity moving_blob(const GeometryConfig& geom, int grid_n, int nt) {
    SpatialGrid g(geom, grid_n);
    SpacetimeDensity rho(g, geom.T_horizon, nt);
    for (int k = 0; k <= nt; ++k) rho.slices[k] = bump_blob(g, {-0.2 + 0.4 * k / nt, 0.05}, 0.25, 1.0);
    return rho;
}

inline IntensityMeasure unit_interval_lebesgue() {
    ProductGrid g{{PartitionLevel::uniform(0.0, 1.0, 1)}};
    return IntensityMeasure::uniform(g, 1.0);
}

// q_n = 4^n, K_n = 2^n dyadic cells of [0,1], r_n = n 2^(-n/2).
inline RateConfig dyadic_rate_config(int n_max, const std::vector<std::uint64_t>& seeds, Regime regime) {
    RateConfig c;
    c.lambda = unit_interval_lebesgue();
    c.regime = regime;
    c.seeds = seeds;
    for (int n = 1; n <= n_max; ++n) {
        c.q.push_back(std::pow(4.0, n));
        c.levels.push_back(ProductGrid{{PartitionLevel::uniform(0.0, 1.0, std::size_t{1} << n)}});
        c.r.push_back(n * std::pow(2.0, -0.5 * n));
    }
    return c;
}

inline Table rate_table(const std::vector<RateRow>& rows) {
    Table t{{"n", "q", "K", "r", "seed", "Z", "Z_over_r", "flat_bound"}, {}};
    for (const auto& r : rows)
        t.add({double(r.n), r.q, double(r.K), r.r, double(r.seed), r.Z, r.Z_over_r, r.flat_bound});
    return t;
}

// Median Z/r and flat bound per level.
inline Table rate_medians(const std::vector<RateRow>& rows, std::size_t levels) {
    Table t{{"n", "q", "K", "r", "median_Z_over_r", "median_flat_bound"}, {}};
    for (std::size_t n = 1; n <= levels; ++n) {
        std::vector<double> zr, fb;
        double q = 0, K = 0, r = 0;
        for (const auto& row : rows)
            if (row.n == static_cast<int>(n)) {
                zr.push_back(row.Z_over_r);
                fb.push_back(row.flat_bound);
                q = row.q;
                K = double(row.K);
                r = row.r;
            }
        t.add({double(n), q, K, r, median(zr), median(fb)});
    }
    return t;
}

// Median Z_n/r_n strictly decreasing from level n_from on, last median below 1.
inline HarnessResult ppp_rate_study(const RateConfig& c, int n_from = 4) {
    HarnessResult out;
    auto rows = rate_experiment(c);
    auto med = rate_medians(rows, c.q.size());
    auto zr = med.column("median_Z_over_r");
    bool dec = true;
    for (std::size_t i = static_cast<std::size_t>(std::max(n_from, 1)); i < zr.size(); ++i)
        if (!(zr[i] < zr[i - 1])) dec = false;
    double slope = loglog_slope(med.column("q"), med.column("median_flat_bound"));
    Table st{{"fitted_slope_flat_bound_vs_q"}, {}};
    st.add({slope});
    out.tables.emplace_back("ppp_rate", rate_table(rows));
    out.tables.emplace_back("ppp_rate_median", med);
    out.tables.emplace_back("ppp_rate_slope", st);
    out.notes.push_back("fitted log-log slope of the median flat bound against q: " + fmt(slope));
    out.checks.push_back({"ppp_rate_decreasing", dec,
                          "median Z_n/r_n strictly decreasing for n >= " + std::to_string(n_from)});
    out.checks.push_back({"ppp_rate_final", zr.back() < 1.0, "final median Z_n/r_n = " + fmt(zr.back()) + " < 1"});
    return out;
}

inline bool sorted_includes(std::vector<Point> small, std::vector<Point> big) {
    std::sort(small.begin(), small.end());
    std::sort(big.begin(), big.end());
    return std::includes(big.begin(), big.end(), small.begin(), small.end());
}

// Coupled regime: nested samples along the schedule for every seed, and the
// pooled cell counts at the last level compared with independent sampling.
inline HarnessResult coupled_study(const RateConfig& c, int ks_seeds, std::uint64_t ks_seed_base = 100000) {
    HarnessResult out;
    RateConfig cc = c;
    cc.regime = Regime::Coupled;
    auto rows = rate_experiment(cc);
    out.tables.emplace_back("coupled_rate", rate_table(rows));
    out.tables.emplace_back("coupled_rate_median", rate_medians(rows, cc.q.size()));

    Table inc{{"seed", "n", "size_n", "size_next", "included"}, {}};
    long violations = 0;
    for (auto seed : cc.seeds) {
        CoupledSampler s(cc.lambda, seed);
        std::vector<Point> prev = s.extend(cc.q[0]).events;
        for (std::size_t n = 1; n < cc.q.size(); ++n) {
            std::vector<Point> next = s.extend(cc.q[n]).events;
            bool ok = sorted_includes(prev, next);
            violations += ok ? 0 : 1;
            inc.add({double(seed), double(n), double(prev.size()), double(next.size()), ok ? 1.0 : 0.0});
            prev = std::move(next);
        }
    }
    out.tables.emplace_back("containment", inc);
    out.checks.push_back({"coupled_containment", violations == 0, std::to_string(violations) + " inclusion violations"});

    const auto& level = cc.levels.back();
    const double qN = cc.q.back();
    std::vector<double> coupled_counts, indep_counts;
    for (int s = 0; s < ks_seeds; ++s) {
        CoupledSampler cs(cc.lambda, ks_seed_base + s);
        for (double q : cc.q) cs.extend(q);
        for (long long v : cell_counts(cs.accumulated(), level)) coupled_counts.push_back(double(v));
        auto E = sample_independent(cc.lambda, qN, ks_seed_base + ks_seeds + s, cc.q.size());
        for (long long v : cell_counts(E, level)) indep_counts.push_back(double(v));
    }
    double ks = ks_distance(coupled_counts, indep_counts);
    Table kt{{"ks_seeds", "cells", "q", "ks_distance"}, {}};
    kt.add({double(ks_seeds), double(level.size()), qN, ks});
    out.tables.emplace_back("coupled_ks", kt);
    out.checks.push_back({"coupled_marginal_ks", ks < 0.05, "KS distance " + fmt(ks) + " < 0.05"});
    return out;
}

// Flat-distance bound with cell width s_n = q_n^(-1/(a+2)) on [0,1].
inline HarnessResult flat_rate_study(double a, const std::vector<double>& q, const std::vector<std::uint64_t>& seeds) {
    HarnessResult out;
    auto lambda = unit_interval_lebesgue();
    Table t{{"n", "q", "s", "K", "seed", "Z", "flat_bound"}, {}};
    Table m{{"n", "q", "s", "K", "median_flat_bound"}, {}};
    for (std::size_t n = 0; n < q.size(); ++n) {
        double s = std::pow(q[n], -1.0 / (a + 2.0));
        auto K = static_cast<std::size_t>(std::ceil(1.0 / s - 1e-9));
        ProductGrid level{{PartitionLevel::uniform(0.0, 1.0, K)}};
        std::vector<double> fb;
        for (auto seed : seeds) {
            auto E = sample_independent(lambda, q[n], seed, n + 1);
            double z = discrepancy_Z(E, q[n], lambda, level);
            double f = flat_upper_bound(E, q[n], lambda, level);
            t.add({double(n), q[n], s, double(K), double(seed), z, f});
            fb.push_back(f);
        }
        m.add({double(n), q[n], s, double(K), median(fb)});
    }
    double slope = loglog_slope(m.column("q"), m.column("median_flat_bound"));
    Table st{{"a", "target_slope", "fitted_slope"}, {}};
    st.add({a, -1.0 / (a + 2.0), slope});
    out.tables.emplace_back("flat_rate", t);
    out.tables.emplace_back("flat_rate_median", m);
    out.tables.emplace_back("flat_rate_slope", st);
    double bound = -1.0 / (a + 2.0) + 0.05;
    out.checks.push_back({"flat_rate_slope", slope <= bound, "fitted slope " + fmt(slope) + " <= " + fmt(bound)});
    return out;
}

// Blob of radius w sitting at (-d/2, 0) before T/2 and at (d/2, 0) after.
inline SpacetimeDensity temporal_jump(const GeometryConfig& geom, int grid_n, int nt, double d = 0.2, double w = 0.25) {
    SpatialGrid g(geom, grid_n);
    SpacetimeDensity rho(g, geom.T_horizon, nt);
    for (int k = 0; k <= nt; ++k)
        rho.slices[k] = bump_blob(g, {rho.time(k) < 0.5 * rho.T ? -0.5 * d : 0.5 * d, 0.0}, w, 1.0);
    return rho;
}

// S_n delta_n <= 1.05 for all n; w2_n <= 2 C delta_n^(1/6) with C fitted at n = 1.
inline HarnessResult recovery_study(const SpacetimeDensity& rho, const std::vector<double>& deltas) {
    HarnessResult out;
    auto rec = recovery_sequence(rho, deltas, make_faces(rho.grid));
    Table t{{"n", "delta", "k", "eps", "S", "S_times_delta", "w2", "w2_over_delta16", "stalled"}, {}};
    for (const auto& e : rec)
        t.add({double(e.n), e.delta, double(e.k), e.eps, e.S, e.S * e.delta, e.w2, e.w2 / std::pow(e.delta, 1.0 / 6.0),
               e.stalled ? 1.0 : 0.0});
    out.tables.emplace_back("recovery", t);
    double worst = 0.0;
    for (const auto& e : rec) worst = std::max(worst, e.S * e.delta);
    out.checks.push_back({"recovery_S_bound", worst <= 1.05, "max S_n delta_n = " + fmt(worst) + " <= 1.05"});
    double C = rec.front().w2 / std::pow(rec.front().delta, 1.0 / 6.0);
    double factor = 0.0;
    for (std::size_t n = 1; n < rec.size(); ++n)
        factor = std::max(factor, rec[n].w2 / (C * std::pow(rec[n].delta, 1.0 / 6.0)));
    out.checks.push_back({"recovery_w2_rate", factor <= 2.0,
                          "max w2_n / (C delta_n^(1/6)) over n >= 2 = " + fmt(factor) + " <= 2 (C = " + fmt(C) + ")"});
    return out;
}

// Unit blob translating at speed v along x.
inline HarnessResult bb_sanity_study(const GeometryConfig& geom, int grid_n = 64, int nt = 32, double v = 0.3,
                                     double w = 0.2) {
    HarnessResult out;
    SpatialGrid grid(geom, grid_n);
    auto faces = make_faces(grid);
    SpacetimeDensity rho(grid, geom.T_horizon, nt);
    double x0 = -0.5 * v * geom.T_horizon;
    for (int k = 0; k <= nt; ++k) rho.slices[k] = bump_blob(grid, {x0 + v * rho.time(k), 0.0}, w, 1.0);
    auto eta = zero_momentum(rho, faces);
    for (int k = 0; k < nt; ++k)
        for (std::size_t e = 0; e < faces.x.size(); ++e) eta.mx[k][e] = face_density(rho, k, faces.x[e]) * v;
    double target = geom.T_horizon * v * v;
    double bb = bb_energy(rho, eta, faces).value;
    double mm = min_momentum(rho, faces).S.value;
    double shift = v * geom.T_horizon;
    double w2 = w2_distance(rho.slices[0], rho.slices[nt]);
    Table t{{"quantity", "value", "target", "relative_error"}, {}};
    t.add({0, bb, target, std::fabs(bb - target) / target});
    t.add({1, mm, target, std::fabs(mm - target) / target});
    t.add({2, w2, shift, std::fabs(w2 - shift) / shift});
    out.tables.emplace_back("bb_sanity", t);
    out.checks.push_back({"bb_energy_translate", std::fabs(bb - target) <= 0.05 * target,
                          "bb_energy " + fmt(bb) + " vs T v^2 = " + fmt(target) + " (5%)"});
    out.checks.push_back({"min_momentum_translate", std::fabs(mm - target) <= 0.10 * target,
                          "min_momentum " + fmt(mm) + " vs T v^2 = " + fmt(target) + " (10%)"});
    out.checks.push_back({"w2_translate", std::fabs(w2 - shift) <= 0.02 * shift,
                          "w2 " + fmt(w2) + " vs shift " + fmt(shift) + " (2%)"});
    return out;
}

// g P[G lambda] averaged over detector bins by sub x sub midpoint quadrature.
inline std::vector<double> g_bin_averages(const SpatialDensity& blurred, const GTable& g, const GeometryConfig& geom,
                                          int M, int sub) {
    double d = kTwoPi / M;
    double R2 = geom.R_scan * geom.R_scan;
    std::vector<double> out(static_cast<std::size_t>(M) * M, 0.0);
    for (int j = 0; j < M; ++j)
        for (int k = 0; k < M; ++k) {
            double acc = 0.0;
            for (int p = 0; p < sub; ++p)
                for (int q = 0; q < sub; ++q) {
                    double a = (j + (p + 0.5) / sub) * d, b = (k + (q + 0.5) / sub) * d;
                    if (std::fabs(a - b) < 1e-12) continue;
                    acc += detection_density(blurred, a, b, g);
                }
            out[static_cast<std::size_t>(j) * M + k] = acc * R2 * d * d / (sub * sub);
        }
    return out;
}

inline HarnessResult forward_oracle_study(const GeometryConfig& geom, const GTable& g, int grid_n = 128, int M = 64,
                                          int n_ang = 512, int sub = 4, double ps = 0.2, double pd = 0.7) {
    HarnessResult out;
    SpatialGrid grid(geom, grid_n);
    DetectionModel model(geom, grid, M, n_ang);
    auto lam = bump_blob(grid, {0.2, -0.1}, 0.25, 1.0);
    auto blurred = model.blur(lam);
    auto direct = model.detect_blurred(blurred);
    auto viag = g_bin_averages(blurred, g, geom, M, sub);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < direct.size(); ++i) {
        num += std::fabs(viag[i] - direct[i]);
        den += std::fabs(direct[i]);
    }
    double rel = num / den;

    SpacetimeDensity rho(grid, geom.T_horizon, 4);
    for (auto& s : rho.slices) s = lam;
    auto B = binned_forward(rho, model, PartitionLevel::uniform(0.0, geom.T_horizon, 4), 1.0, ps, pd);
    double expect = (ps + pd) * rho.total_mass();
    double budget = std::fabs(B.total_mass() - expect) / expect;

    Table t{{"grid", "M", "g_resolution", "g_samples", "relative_L1", "forward_mass", "expected_mass", "mass_rel_error"}, {}};
    t.add({double(grid_n), double(M), double(g.resolution), double(g.n_samples), rel, B.total_mass(), expect, budget});
    out.tables.emplace_back("forward_oracle", t);
    out.checks.push_back({"forward_g_oracle", rel < 0.02, "relative L1 " + fmt(rel) + " < 0.02"});
    out.checks.push_back({"forward_mass_budget", budget <= 1e-3, "mass budget error " + fmt(budget) + " <= 1e-3"});
    return out;
}

inline HarnessResult refinement_study(const SpacetimeDensity& rho, const GeometryConfig& geom, const GTable& g,
                                      const std::vector<RefinementLevel>& levels, double ps = 0.2, double pd = 0.7) {
    HarnessResult out;
    auto d = refinement_consistency(rho, geom, levels, g, 1.0, ps, pd);
    Table t{{"level", "N", "M", "L2_distance"}, {}};
    for (std::size_t l = 0; l < levels.size(); ++l) t.add({double(l), double(levels[l].time.size()), double(levels[l].M), d[l]});
    out.tables.emplace_back("refinement", t);
    double worst = 0.0;
    for (std::size_t l = 1; l < d.size(); ++l) worst = std::max(worst, d[l] / d[l - 1]);
    out.checks.push_back({"refinement_nonincreasing", worst <= 1.1,
                          "max ratio of successive L2 distances " + fmt(worst) + " <= 1.1"});
    return out;
}

struct BlobPath {
    Vec2 p0, v, acc;
    double w0 = 0.2, w1 = 0.2, weight = 1.0;

    Vec2 at(double t) const { return p0 + t * v + (0.5 * t * t) * acc; }
    double width(double t, double T) const { return w0 + (w1 - w0) * t / T; }
};

inline SpacetimeDensity blobs_density(const SpatialGrid& g, double T, int nt, const std::vector<BlobPath>& paths) {
    SpacetimeDensity rho(g, T, nt);
    for (int k = 0; k <= nt; ++k)
        for (const auto& b : paths) {
            double t = rho.time(k);
            auto s = bump_blob(g, b.at(t), b.width(t, T), b.weight);
            for (std::size_t c = 0; c < s.v.size(); ++c) rho.slices[k].v[c] += s.v[c];
        }
    return rho;
}

// One to three blobs on smooth paths with changing widths, kept inside D.
inline std::vector<BlobPath> random_blob_paths(std::mt19937_64& rng, double R_dom, double T) {
    std::uniform_real_distribution<double> U(0.0, 1.0);
    int nb = 1 + static_cast<int>(U(rng) * 3.0);
    std::vector<BlobPath> out;
    while (static_cast<int>(out.size()) < nb) {
        BlobPath b;
        double r = 0.3 * std::sqrt(U(rng)), th = kTwoPi * U(rng);
        b.p0 = {r * std::cos(th), r * std::sin(th)};
        double sp = 0.4 * U(rng), ph = kTwoPi * U(rng);
        b.v = {sp * std::cos(ph), sp * std::sin(ph)};
        double ac = 0.4 * U(rng), pa = kTwoPi * U(rng);
        b.acc = {ac * std::cos(pa), ac * std::sin(pa)};
        b.w0 = 0.15 + 0.15 * U(rng);
        b.w1 = 0.15 + 0.15 * U(rng);
        b.weight = 0.2 + U(rng);
        bool inside = true;
        for (int i = 0; i <= 20; ++i) {
            double t = T * i / 20.0;
            if (norm(b.at(t)) + b.width(t, T) > R_dom - 0.02) inside = false;
        }
        if (inside) out.push_back(b);
    }
    return out;
}

// max over bins and slice pairs of |A^d rho_t(bin) - A^d rho_s(bin)| / len^2
// divided by |t-s|^(1/2) (|rho| S)^(1/2).
inline double holder_ratio(const SpacetimeDensity& rho, const DetectionModel& model, double S) {
    std::vector<std::vector<double>> pairs;
    for (const auto& s : rho.slices) pairs.push_back(model.forward_detect_pairs(s));
    double len2 = model.arc_length() * model.arc_length();
    double scale = std::sqrt(rho.total_mass() * S);
    double worst = 0.0;
    for (int j = 0; j <= rho.nt(); ++j)
        for (int k = j + 1; k <= rho.nt(); ++k) {
            double d = 0.0;
            for (std::size_t b = 0; b < pairs[j].size(); ++b) d = std::max(d, std::fabs(pairs[j][b] - pairs[k][b]));
            worst = std::max(worst, d / len2 / (std::sqrt(rho.time(k) - rho.time(j)) * scale));
        }
    return worst;
}

inline HarnessResult holder_study(const GeometryConfig& geom, int n_random = 50, std::uint64_t seed = 11, int grid_n = 32,
                                  int nt = 16, int M = 16, int n_ang = 256) {
    HarnessResult out;
    SpatialGrid grid(geom, grid_n);
    DetectionModel model(geom, grid, M, n_ang);
    auto faces = make_faces(grid);
    const double T = geom.T_horizon;
    // Translates over positions, directions, widths and speeds; the ratio of a
    // translate is close to the bin sensitivity along its path.
    Table cal{{"cx", "cy", "width", "speed", "direction", "S", "ratio"}, {}};
    double C = 0.0;
    for (double w : {0.15, 0.2, 0.3})
        for (double v : {0.05, 0.2})
            for (double rc : {0.0, 0.1, 0.2, 0.3, 0.4})
                for (int ic = 0; ic < (rc == 0.0 ? 1 : 8); ++ic) {
                    Vec2 c{rc * std::cos(kTwoPi * ic / 8.0), rc * std::sin(kTwoPi * ic / 8.0)};
                    if (rc + 0.5 * v * T + w > geom.R_dom - 0.02) continue;
                    for (int d = 0; d < 8; ++d) {
                        double ph = kTwoPi * d / 8.0;
                        Vec2 dir{std::cos(ph), std::sin(ph)};
                        BlobPath b;
                        b.p0 = c + (-0.5 * v * T) * dir;
                        b.v = v * dir;
                        b.acc = {0.0, 0.0};
                        b.w0 = b.w1 = w;
                        auto rho = blobs_density(grid, T, nt, {b});
                        double S = min_momentum(rho, faces).S.value;
                        double r = holder_ratio(rho, model, S);
                        C = std::max(C, r);
                        cal.add({c.x, c.y, w, v, ph, S, r});
                    }
                }
    auto rng = make_stream(seed, 0, 0x686f);
    Table t{{"id", "blobs", "mass", "S", "ratio", "violation"}, {}};
    int violations = 0;
    for (int i = 0; i < n_random; ++i) {
        auto paths = random_blob_paths(rng, geom.R_dom, T);
        auto rho = blobs_density(grid, T, nt, paths);
        double S = min_momentum(rho, faces).S.value;
        double r = holder_ratio(rho, model, S);
        bool bad = !(r <= C * (1.0 + 1e-12));
        violations += bad;
        t.add({double(i), double(paths.size()), rho.total_mass(), S, r, bad ? 1.0 : 0.0});
    }
    Table c{{"C"}, {}};
    c.add({C});
    out.tables.emplace_back("holder_calibration", cal);
    out.tables.emplace_back("holder_constant", c);
    out.tables.emplace_back("holder", t);
    out.checks.push_back({"time_holder", violations == 0,
                          std::to_string(violations) + " violations over " + std::to_string(n_random) +
                              " densities (C = " + fmt(C) + ")"});
    return out;
}

inline double relative_l1(const SpacetimeDensity& a, const SpacetimeDensity& b) {
    double num = 0.0, den = 0.0;
    for (int k = 0; k <= a.nt(); ++k)
        for (std::size_t c = 0; c < a.grid.size(); ++c) {
            num += a.time_weight(k) * std::fabs(a.slices[k].v[c] - b.slices[k].v[c]);
            den += a.time_weight(k) * std::fabs(b.slices[k].v[c]);
        }
    return num / den;
}

// Slice-averaged W2 after rescaling every slice of rho to the mass of the
// matching slice of ref.
inline double slice_w2(const SpacetimeDensity& rho, const SpacetimeDensity& ref) {
    double acc = 0.0;
    for (int k = 0; k <= rho.nt(); ++k) {
        auto a = rho.slices[k];
        double m = a.mass(), mr = ref.slices[k].mass();
        if (m > 0.0)
            for (double& v : a.v) v *= mr / m;
        acc += w2_distance(a, ref.slices[k]);
    }
    return acc / (rho.nt() + 1);
}

// Expected counts q B rho times the bin measure.
inline std::vector<double> expected_counts(const SpacetimeDensity& rho, const BinnedSystem& sys, double q, double u,
                                           double ps, double pd) {
    auto f = sys.forward(rho, u, ps, pd);
    const std::size_t MM = static_cast<std::size_t>(sys.M()) * sys.M();
    for (int i = 0; i < sys.N(); ++i)
        for (std::size_t jk = 0; jk < MM; ++jk) f[i * MM + jk] *= q * sys.bin_measure(i);
    return f;
}

// Noise-free limit problem on fine bins with beta = 0.
inline HarnessResult identifiability_study(const GeometryConfig& geom, int smin_grid = 16, int smin_M = 32,
                                           int grid_n = 32, int nt = 8, int N = 8, int M = 64, int n_ang = 1024,
                                           double ps = 0.2, double pd = 0.7, const SolverParams& sp = {}) {
    HarnessResult out;
    double smin = injectivity_smin(geom, smin_grid, smin_M);
    Table st{{"grid", "M", "smin"}, {}};
    st.add({double(smin_grid), double(smin_M), smin});
    out.tables.emplace_back("injectivity", st);
    out.checks.push_back({"injectivity_smin", smin > 0.0, "smin " + fmt(smin) + " > 0 at grid " +
                                                              std::to_string(smin_grid) + ", M " + std::to_string(smin_M)});

    auto truth = moving_blob(geom, grid_n, nt);
    BinnedSystem sys(geom, truth.grid, nt, PartitionLevel::uniform(0.0, geom.T_horizon, N), M, n_ang);
    ReconProblem p;
    p.time = sys.time();
    p.M = M;
    p.q = 1e5;
    p.u = 1.0;
    p.beta = 0.0;
    p.ps = ps;
    p.pd = pd;
    p.counts = expected_counts(truth, sys, p.q, 1.0, ps, pd);
    auto r = minimize_map(p, sys, nullptr, sp);
    double rel = relative_l1(r.rho, truth);
    double e_truth = energy_discrete(truth, p, sys).total;
    Table t{{"iterations", "stalled", "energy", "energy_truth", "relative_L1"}, {}};
    t.add({double(r.iterations), r.stalled ? 1.0 : 0.0, r.energy.total, e_truth, rel});
    out.tables.emplace_back("identifiability", t);
    out.checks.push_back({"limit_recovery", rel < 0.05, "relative L1 error " + fmt(rel) + " < 0.05"});
    return out;
}

struct GammaLevel {
    int N = 2;
    int M = 16;
    double q = 1e3;
    double beta = 0.0;
    double u = 1.0;
};

inline ReconProblem listmode_problem(const std::vector<Event>& events, const GammaLevel& lv, const PartitionLevel& time,
                                     double ps, double pd) {
    ReconProblem p;
    p.time = time;
    p.M = lv.M;
    p.counts = bin_events(events, time, lv.M);
    p.q = lv.q;
    p.u = lv.u;
    p.beta = lv.beta;
    p.ps = ps;
    p.pd = pd;
    return p;
}

inline int default_directions(int M) { return std::max(512, 16 * M); }

// MAP reconstructions along a refining schedule against the limit energy of
// the ground truth: median W2 and median |E_n(rho*_n) - E_inf(rho_dagger)|
// must both decrease strictly from level to level.
inline HarnessResult gamma_study(const GeometryConfig& geom, const SpacetimeDensity& truth,
                                 const std::vector<GammaLevel>& levels, const std::vector<std::uint64_t>& seeds,
                                 const GTable& g, LimitCase which = LimitCase::D, double ps = 0.2, double pd = 0.7,
                                 const SolverParams& sp = {}) {
    HarnessResult out;
    LimitSetup ls;
    ls.geom = geom;
    ls.which = which;
    ls.M = levels.back().M;
    ls.time = PartitionLevel::uniform(0.0, geom.T_horizon, static_cast<std::size_t>(levels.back().N));
    ls.u = 1.0;
    ls.ps = ps;
    ls.pd = pd;
    auto Einf = energy_limit(truth, truth, ls, g);
    Table lt{{"case", "M", "mass_term", "data_term", "total"}, {}};
    lt.add({double(static_cast<int>(which)), double(ls.M), Einf.mass_term, Einf.data_term, Einf.total});
    out.tables.emplace_back("gamma_limit", lt);

    Table t{{"n", "q", "N", "M", "beta", "seed", "events", "iterations", "stalled", "energy", "mass_term", "data_term",
             "reg_term", "abs_gap", "w2"},
            {}};
    Table m{{"n", "q", "N", "M", "beta", "median_w2", "median_abs_gap", "stalled_runs"}, {}};
    for (std::size_t n = 0; n < levels.size(); ++n) {
        const auto& lv = levels[n];
        auto time = PartitionLevel::uniform(0.0, geom.T_horizon, static_cast<std::size_t>(lv.N));
        BinnedSystem sys(geom, truth.grid, truth.nt(), time, lv.M, default_directions(lv.M));
        std::vector<double> w2s, gaps;
        int stalled = 0;
        for (auto seed : seeds) {
            auto events = simulate_listmode(truth, geom, lv.q, ps, pd, seed);
            auto p = listmode_problem(events, lv, time, ps, pd);
            auto r = minimize_map(p, sys, nullptr, sp);
            double gap = std::fabs(r.energy.total - Einf.total);
            double w2 = slice_w2(r.rho, truth);
            stalled += r.stalled;
            w2s.push_back(w2);
            gaps.push_back(gap);
            t.add({double(n), lv.q, double(lv.N), double(lv.M), lv.beta, double(seed), double(events.size()),
                   double(r.iterations), r.stalled ? 1.0 : 0.0, r.energy.total, r.energy.mass_term, r.energy.data_term,
                   r.energy.reg_term, gap, w2});
        }
        m.add({double(n), lv.q, double(lv.N), double(lv.M), lv.beta, median(w2s), median(gaps), double(stalled)});
    }
    out.tables.emplace_back("gamma", t);
    out.tables.emplace_back("gamma_median", m);
    auto w2 = m.column("median_w2");
    auto gap = m.column("median_abs_gap");
    bool w2_dec = true, gap_dec = true;
    std::string ws, gs;
    for (std::size_t n = 0; n < w2.size(); ++n) {
        if (n > 0 && !(w2[n] < w2[n - 1])) w2_dec = false;
        if (n > 0 && !(gap[n] < gap[n - 1])) gap_dec = false;
        ws += (n ? " > " : "") + fmt(w2[n]);
        gs += (n ? " > " : "") + fmt(gap[n]);
    }
    out.checks.push_back({"gamma_w2_decreasing", w2_dec, "median W2 " + ws});
    out.checks.push_back({"gamma_gap_decreasing", gap_dec, "median |E_n - E_inf| " + gs});
    return out;
}

// Random equal-mass densities with masses spread over six decades.
inline HarnessResult equicoercivity_study(const ReconProblem& p, const BinnedSystem& sys, int n_random = 1000,
                                          std::uint64_t seed = 13) {
    HarnessResult out;
    double kappa = equicoercivity_bound(p, sys);
    auto rng = make_stream(seed, 0, 0x6571);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const auto& cells = sys.cells();
    Table t{{"id", "norm", "energy", "bound", "violation"}, {}};
    int violations = 0;
    for (int i = 0; i < n_random; ++i) {
        double mass = std::pow(10.0, -3.0 + 6.0 * U(rng));
        double expo = 1.0 + 3.0 * U(rng);
        SpacetimeDensity rho(sys.grid(), sys.geometry().T_horizon, sys.nt());
        for (auto& s : rho.slices) {
            for (std::size_t c : cells) s.v[c] = std::pow(U(rng), expo);
            double m = s.mass();
            for (double& v : s.v) v *= mass / m;
        }
        double norm_rho = rho.total_mass();
        double e = energy_discrete(rho, p, sys).total;
        double bound = norm_rho / kappa - kappa;
        bool bad = !(e >= bound);
        violations += bad;
        t.add({double(i), norm_rho, e, bound, bad ? 1.0 : 0.0});
    }
    Table k{{"kappa", "data_mass"}, {}};
    k.add({kappa, p.data_mass()});
    out.tables.emplace_back("equicoercivity_kappa", k);
    out.tables.emplace_back("equicoercivity", t);
    out.checks.push_back({"equicoercivity", violations == 0,
                          std::to_string(violations) + " violations over " + std::to_string(n_random) +
                              " densities (kappa = " + fmt(kappa) + ")"});
    return out;
}

// Event counts over seeds against Poisson(q (ps+pd) |rho|): mean within 3 sigma.
inline HarnessResult simulate_study(const SpacetimeDensity& truth, const GeometryConfig& geom, double q, double ps,
                                    double pd, const std::vector<std::uint64_t>& seeds,
                                    std::vector<std::vector<Event>>* keep = nullptr) {
    HarnessResult out;
    double mean = q * (ps + pd) * truth.total_mass();
    Table t{{"seed", "events", "expected"}, {}};
    double acc = 0.0;
    for (auto seed : seeds) {
        auto ev = simulate_listmode(truth, geom, q, ps, pd, seed);
        acc += double(ev.size());
        t.add({double(seed), double(ev.size()), mean});
        if (keep) keep->push_back(std::move(ev));
    }
    double avg = acc / double(seeds.size());
    double sigma = std::sqrt(mean / double(seeds.size()));
    Table s{{"seeds", "mean_events", "expected", "sigma_of_mean"}, {}};
    s.add({double(seeds.size()), avg, mean, sigma});
    out.tables.emplace_back("simulate", t);
    out.tables.emplace_back("simulate_summary", s);
    out.checks.push_back({"simulate_counts", std::fabs(avg - mean) <= 3.0 * sigma,
                          "mean events " + fmt(avg, 8) + " vs " + fmt(mean, 8) + " (3 sigma = " + fmt(3.0 * sigma) + ")"});
    return out;
}

inline Table density_table(const SpacetimeDensity& rho) {
    Table t{{"k", "t", "ix", "iy", "x", "y", "value"}, {}};
    for (int k = 0; k <= rho.nt(); ++k)
        for (int iy = 0; iy < rho.grid.n; ++iy)
            for (int ix = 0; ix < rho.grid.n; ++ix) {
                auto c = rho.grid.center(ix, iy);
                t.add({double(k), rho.time(k), double(ix), double(iy), c.x, c.y, rho.slices[k].v[rho.grid.index(ix, iy)]});
            }
    return t;
}

inline Table trace_table(const std::vector<TraceRow>& trace) {
    Table t{{"iter", "total", "mass", "data", "reg"}, {}};
    for (const auto& r : trace) t.add({double(r.iter), r.total, r.mass, r.data, r.reg});
    return t;
}

inline bool trace_monotone(const std::vector<TraceRow>& trace, double slack = 1e-9) {
    for (std::size_t i = 1; i < trace.size(); ++i)
        if (trace[i].total > trace[i - 1].total + slack * (1.0 + std::fabs(trace[i - 1].total))) return false;
    return true;
}

}  // namespace petgamma
