#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "config.hpp"
#include "experiments.hpp"

namespace petgamma {

namespace detail {

inline void expect(std::vector<Check>& out, const std::string& name, bool ok, const std::string& detail) {
    out.push_back({name, ok, detail});
}

template <class E, class F>
bool throws(F&& f) {
    try {
        f();
    } catch (const E&) {
        return true;
    } catch (...) {
        return false;
    }
    return false;
}

inline bool same_points(const PointMeasure& a, const PointMeasure& b) {
    return a.events.size() == b.events.size() &&
           (a.events.empty() || std::memcmp(a.events.data(), b.events.data(), a.events.size() * sizeof(Point)) == 0);
}

inline void selftest_geometry(std::vector<Check>& out) {
    const double pi = std::numbers::pi;
    auto [a0, b0] = chord_endpoints({0, 0}, {1, 0}, 1.0);
    expect(out, "geometry.chord_diameter", std::fabs(a0 - pi) < 1e-12 && std::fabs(b0) < 1e-12,
           "a = " + fmt(a0, 12) + ", b = " + fmt(b0, 12));
    auto [a1, b1] = chord_endpoints({0, 0.5}, {1, 0}, 1.0);
    auto pa = boundary_point(a1, 1.0), pb = boundary_point(b1, 1.0);
    bool on = std::fabs(pa.y - 0.5) < 1e-12 && std::fabs(pb.y - 0.5) < 1e-12 &&
              std::fabs(std::fabs(pa.x) - std::sqrt(0.75)) < 1e-12 && std::fabs(pb.x + pa.x) < 1e-12;
    expect(out, "geometry.chord_offset", on, "endpoints (+-sqrt(0.75), 0.5)");
    auto c0 = chord_params(pi, 0.0, 1.0);
    expect(out, "geometry.params_diameter", norm(c0.theta - Vec2{1, 0}) < 1e-12 && norm(c0.s) < 1e-12, "theta (1,0), s 0");
    auto c1 = chord_params(pi / 2, 3 * pi / 2, 1.0);
    expect(out, "geometry.params_vertical", norm(c1.theta - Vec2{0, -1}) < 1e-12 && norm(c1.s) < 1e-12, "theta (0,-1), s 0");
    auto one = PartitionLevel::uniform(0.0, 1.0, 1);
    auto two = dyadic_refine(one);
    expect(out, "geometry.refine_once", two.size() == 2 && two.edges[1] == 0.5, "[0,1) -> [0,1/2), [1/2,1)");
    auto four = PartitionLevel::uniform(0.0, 1.0, 4);
    auto eight = dyadic_refine(four);
    expect(out, "geometry.refine_nested", eight.size() == 8 && is_nested(eight, four), "4 -> 8 nested");
    auto l = one;
    for (int i = 0; i < 10; ++i) l = dyadic_refine(l);
    bool eq = l.size() == 1024;
    for (std::size_t i = 0; i < l.size(); ++i) eq = eq && l.length(i) == std::ldexp(1.0, -10);
    expect(out, "geometry.refine_ten", eq, "1024 cells of length 2^-10");
    auto arcs = PartitionLevel::uniform(0.0, kTwoPi, 8);
    auto bin = locate_bin(0.0, arcs.edges[3], 0.1, four, arcs);
    expect(out, "geometry.locate_left", bin.i == 0 && bin.j == 3, "t = 0 -> i = 0, boundary angle -> cell starting there");
}

inline void selftest_ppp(std::vector<Check>& out) {
    auto lambda = unit_interval_lebesgue();
    IntensityMeasure zero{lambda.grid, {0.0}};
    expect(out, "ppp.zero_intensity", sample_independent(zero, 100.0, 1).size() == 0, "empty sample");
    auto a = sample_independent(lambda, 1e3, 3), b = sample_independent(lambda, 1e3, 3);
    expect(out, "ppp.reproducible", same_points(a, b), "identical seed, identical points");
    CoupledSampler s(lambda, 5);
    auto e3 = s.extend(1e3);
    auto same = s.extend(1e3);
    expect(out, "ppp.extend_same_q", same_points(e3, same), "q_new = q_old returns the same sample");
    auto e4 = s.extend(1e4);
    expect(out, "ppp.extend_contains", sorted_includes(e3.events, e4.events), "1e3 sample contained in 1e4 sample");
    expect(out, "ppp.shrink", throws<ShrinkNotAllowed>([&] { s.extend(10.0); }), "shrinking q rejected");
    ProductGrid lvl{{PartitionLevel::uniform(0.0, 1.0, 4)}};
    PointMeasure exact;
    for (int c = 0; c < 4; ++c)
        for (int k = 0; k < 25; ++k) exact.events.push_back({0.25 * c + 0.01 * k, 0, 0});
    expect(out, "ppp.Z_exact", discrepancy_Z(exact, 100.0, lambda, lvl) < 1e-15, "counts q lambda(C) give Z = 0");
    PointMeasure empty;
    expect(out, "ppp.Z_empty", std::fabs(discrepancy_Z(empty, 100.0, lambda, lvl) - 1.0) < 1e-15, "Z = |lambda| = 1");
    expect(out, "ppp.flat_exact", std::fabs(flat_upper_bound(exact, 100.0, lambda, lvl) - 0.25) < 1e-15, "s |lambda| = 0.25");
    expect(out, "ppp.flat_empty", std::fabs(flat_upper_bound(empty, 100.0, lambda, lvl) - 1.25) < 1e-15, "s |lambda| + |lambda|");
    RateConfig rc;
    rc.lambda = lambda;
    rc.q = {1e3, 1e3, 1e3};
    rc.levels = {lvl, lvl, lvl};
    rc.r = {1.0, 1.0, 1.0};
    rc.seeds = {9};
    rc.regime = Regime::Coupled;
    auto rows = rate_experiment(rc);
    expect(out, "ppp.constant_level", rows[0].Z == rows[1].Z && rows[1].Z == rows[2].Z, "Z_n/r_n constant");
    rc.q = {1e2, 1e3, 1e4};
    auto grow = rate_experiment(rc);
    CoupledSampler cs(lambda, 9);
    std::size_t prev = 0;
    bool mono = true;
    for (double q : rc.q) {
        std::size_t n = cs.extend(q).size();
        mono = mono && n >= prev;
        prev = n;
    }
    expect(out, "ppp.coupled_monotone", mono && grow.size() == 3, "coupled totals non-decreasing");
}

inline void selftest_forward(std::vector<Check>& out, const GTable& g) {
    GeometryConfig geom;
    SpatialGrid grid(geom, 32);
    PositronKernel kernel(geom);
    SpatialDensity zero(grid);
    auto cz = positron_convolve(zero, kernel);
    expect(out, "forward.convolve_zero", cz.mass() == 0.0, "G * 0 = 0");
    auto blob = bump_blob(grid, {0.1, 0.05}, 0.2, 1.0);
    auto cb = positron_convolve(blob, kernel);
    expect(out, "forward.convolve_mass", std::fabs(cb.mass() - 1.0) < 1e-6, "|G * lambda| = " + fmt(cb.mass(), 12));
    SpatialGrid fine(geom, 128);
    SpatialDensity disk(fine);
    for (std::size_t c = 0; c < fine.size(); ++c) disk.v[c] = norm(fine.center(c)) <= 0.5 ? 1.0 : 0.0;
    double chord = xray_transform(disk, {1, 0}, {0, 0});
    expect(out, "forward.xray_chord", std::fabs(chord - 1.0) < 0.01, "chord length " + fmt(chord) + " vs 1");
    expect(out, "forward.xray_miss", xray_transform(disk, {1, 0}, {0, 0.95}) == 0.0, "line missing support -> 0");
    DetectionModel model(geom, grid, 16, 256);
    auto pz = model.forward_detect_pairs(zero);
    bool allz = std::all_of(pz.begin(), pz.end(), [](double v) { return v == 0.0; });
    expect(out, "forward.detect_zero", allz, "zero density -> zero bins");
    auto centred = bump_blob(grid, {0, 0}, 0.3, 1.0);
    auto pc = model.forward_detect_pairs(centred);
    double sum = 0.0, rot = 0.0, ref = 0.0;
    for (int j = 0; j < 16; ++j)
        for (int k = 0; k < 16; ++k) {
            double v = pc[j * 16 + k];
            sum += v;
            rot = std::max(rot, std::fabs(v - pc[((j + 4) % 16) * 16 + (k + 4) % 16]));
            ref = std::max(ref, v);
        }
    expect(out, "forward.detect_mass", std::fabs(sum - 1.0) < 1e-3, "sum of bins " + fmt(sum, 10));
    expect(out, "forward.detect_rotation", rot <= 0.01 * ref, "rotation by M/4 within 1%");
    expect(out, "forward.point_zero", forward_density_point(zero, 0.3, 2.0, g, kernel) == 0.0, "rho_t = 0 -> 0");
    SpacetimeDensity rz(grid, 1.0, 2);
    auto B = binned_forward(rz, model, PartitionLevel::uniform(0.0, 1.0, 2), 1.0, 0.2, 0.7);
    expect(out, "forward.binned_zero", B.total_mass() == 0.0, "rho = 0 -> all bins 0");
    SpacetimeDensity rb(grid, 1.0, 2);
    for (auto& s : rb.slices) s = blob;
    auto d = refinement_consistency(rb, geom, {{PartitionLevel::uniform(0.0, 1.0, 2), 16}}, g, 1.0, 0.2, 0.7, 256);
    expect(out, "forward.refinement_single", d.size() == 1 && std::isfinite(d[0]), "single level -> one distance");
}

inline void selftest_bbflow(std::vector<Check>& out) {
    GeometryConfig geom;
    SpatialGrid grid(geom, 32);
    auto faces = make_faces(grid);
    SpacetimeDensity still(grid, 1.0, 4);
    for (auto& s : still.slices) s = bump_blob(grid, {0.05, 0}, 0.25, 1.0);
    auto eta0 = zero_momentum(still, faces);
    expect(out, "bbflow.residual_static", continuity_residual(still, eta0, faces).max_abs == 0.0, "residual 0");
    expect(out, "bbflow.energy_zero", bb_energy(still, eta0, faces).value == 0.0, "eta = 0 -> S = 0");
    auto mm = min_momentum(still, faces);
    expect(out, "bbflow.min_static", mm.S.value == 0.0, "time-constant rho -> S = 0");
    SpacetimeDensity move(grid, 1.0, 8);
    for (int k = 0; k <= 8; ++k) move.slices[k] = bump_blob(grid, {-0.1 + 0.2 * k / 8.0, 0}, 0.25, 1.0);
    auto m = min_momentum(move, faces);
    auto e1 = bb_energy(move, m.eta, faces).value;
    auto e2 = bb_energy(move, scaled(m.eta, 2.0), faces).value;
    expect(out, "bbflow.scaling", std::fabs(e2 - 4.0 * e1) <= 1e-12 * e2, "S(rho, 2 eta) = 4 S(rho, eta)");
    // A circulation around one plaquette keeps the continuity equation.
    auto find = [](const std::vector<std::array<std::size_t, 2>>& fs, std::size_t a, std::size_t b) {
        return static_cast<std::size_t>(std::find(fs.begin(), fs.end(), std::array<std::size_t, 2>{a, b}) - fs.begin());
    };
    std::size_t c00 = grid.index(15, 15), c10 = grid.index(16, 15), c01 = grid.index(15, 16), c11 = grid.index(16, 16);
    auto pert = m.eta;
    pert.mx[3][find(faces.x, c00, c10)] += 1e-3;
    pert.my[3][find(faces.y, c10, c11)] += 1e-3;
    pert.mx[3][find(faces.x, c01, c11)] -= 1e-3;
    pert.my[3][find(faces.y, c00, c01)] -= 1e-3;
    auto pv = bb_energy(move, pert, faces);
    expect(out, "bbflow.minimality", pv.feasible && m.S.value <= pv.value + 1e-12, "min S <= S(eta + circulation)");
    auto a = bump_blob(grid, {-0.1, 0}, 0.2, 1.0);
    expect(out, "bbflow.w2_self", w2_distance(a, a) < 1e-12, "W2(mu, mu) = 0");
    SpatialDensity p(grid), q(grid);
    std::size_t ci = grid.index(10, 12), cj = grid.index(20, 15);
    p.v[ci] = 1.0 / grid.cell_area();
    q.v[cj] = 1.0 / grid.cell_area();
    double d = norm(grid.center(ci) - grid.center(cj));
    expect(out, "bbflow.w2_cells", std::fabs(w2_distance(p, q) - d) < 1e-12, "distance between cell centres");
    auto rec = recovery_sequence(move, {0.1, 0.1}, faces);
    expect(out, "bbflow.recovery_constant", rec[0].S == rec[1].S && rec[0].w2 == rec[1].w2, "constant delta -> identical entries");
}

inline void selftest_reconstruct(std::vector<Check>& out, const GTable& g) {
    GeometryConfig geom;
    auto truth = moving_blob(geom, 16, 4);
    auto time = PartitionLevel::uniform(0.0, 1.0, 2);
    BinnedSystem sys(geom, truth.grid, 4, time, 8, 256);
    ReconProblem p;
    p.time = time;
    p.M = 8;
    p.q = 1e3;
    p.beta = 0.1;
    p.counts.assign(2 * 8 * 8, 0.0);
    auto e = energy_discrete(truth, p, sys);
    double S = min_momentum(truth, sys.faces()).S.value;
    expect(out, "reconstruct.zero_counts", std::fabs(e.total - (0.9 * truth.total_mass() + 0.1 * S)) < 1e-12,
           "total = (ps+pd)|rho| + beta S");
    p.counts = expected_counts(truth, sys, p.q, 1.0, p.ps, p.pd);
    auto e1 = energy_discrete(truth, p, sys);
    auto p2 = p;
    p2.q *= 2.0;
    for (double& c : p2.counts) c *= 2.0;
    auto e2 = energy_discrete(truth, p2, sys);
    expect(out, "reconstruct.homogeneity", std::fabs(e1.data_term - e2.data_term) < 1e-12, "doubling counts and q");
    auto bad = truth;
    for (double& v : bad.slices[1].v) v *= 1.5;
    expect(out, "reconstruct.outside_Mc", std::isinf(energy_discrete(bad, p, sys).total), "rho not in M_c -> inf");
    LimitSetup ls;
    ls.geom = geom;
    ls.M = 8;
    ls.which = LimitCase::D;
    auto et = energy_limit(truth, truth, ls, g);
    auto other = moving_blob(geom, 16, 4);
    for (auto& s : other.slices) s = bump_blob(truth.grid, {0.1, -0.1}, 0.3, 1.0);
    auto eo = energy_limit(other, truth, ls, g);
    expect(out, "reconstruct.gibbs", eo.total - et.total >= -1e-9, "KL gap " + fmt(eo.total - et.total));
    expect(out, "reconstruct.limit_outside_Mc", std::isinf(energy_limit(bad, truth, ls, g).total), "indicator");
    SpatialGrid sg(geom, 8);
    DetectionModel model(geom, sg, 8, 128);
    SpatialDensity cell(sg);
    cell.v[sg.domain_cells()[0]] = 1.0;
    auto pr = model.forward_detect_pairs(cell);
    double nrm = 0.0;
    for (double v : pr) nrm += v * v;
    expect(out, "reconstruct.single_cell", nrm > 0.0, "single-cell image has positive norm");
    p.counts.assign(2 * 8 * 8, 0.0);
    double kappa = equicoercivity_bound(p, sys);
    expect(out, "reconstruct.kappa_empty", kappa == scatter_floor_constant(p, sys), "empty data -> kappa = C");
    p.counts = expected_counts(truth, sys, p.q, 1.0, p.ps, p.pd);
    double kd = equicoercivity_bound(p, sys);
    bool lin = true;
    double prev = 0.0, tp = 0.0;
    for (double t : {1.0, 10.0, 100.0}) {
        auto r = truth;
        for (auto& sl : r.slices)
            for (double& v : sl.v) v *= t;
        double en = energy_discrete(r, p, sys).total;
        if (t > 1.0 && (en - prev) / ((t - tp) * truth.total_mass()) < 1.0 / kd) lin = false;
        prev = en;
        tp = t;
    }
    expect(out, "reconstruct.coercive_slope", lin, "slope >= 1/kappa over t in {1, 10, 100}");
}

}  // namespace detail

// The quick example suite of every module. Reports contain no timings so two
// runs are byte-identical.
inline std::vector<Check> selftest(const std::filesystem::path& cache_dir) {
    std::vector<Check> out;
    GeometryConfig geom;
    auto path = gtable_cache_path(cache_dir, geom, 16, 200000, 3);
    bool regenerated = false;
    auto g = load_or_estimate_g(cache_dir, geom, 16, 200000, 3, &regenerated);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.write("garbage!", 8);
    }
    bool again = false;
    auto g2 = load_or_estimate_g(cache_dir, geom, 16, 200000, 3, &again);
    bool third = true;
    load_or_estimate_g(cache_dir, geom, 16, 200000, 3, &third);
    detail::expect(out, "cli.cache_regenerated", again && !third && g2.values == g.values,
                   "corrupted cache regenerated with identical values");
    detail::selftest_geometry(out);
    detail::selftest_ppp(out);
    detail::selftest_forward(out, g);
    detail::selftest_bbflow(out);
    detail::selftest_reconstruct(out, g);
    nlohmann::json cfg = {{"seeds", nlohmann::json::array()}};
    detail::expect(out, "cli.empty_seeds", detail::throws<ConfigError>([&] { parse_config(cfg); }), "ConfigError");
    return out;
}

}  // namespace petgamma
