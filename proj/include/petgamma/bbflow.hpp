#pragma once

#include <Eigen/Sparse>
#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "errors.hpp"
#include "forward.hpp"
#include "grid.hpp"
#include "ot.hpp"

namespace petgamma {

// Interior faces of the domain mask. A face joins cell lo to cell hi, with hi
// the right (x-faces) or upper (y-faces) neighbour; flux is positive from lo to hi.
struct FaceSet {
    std::vector<std::array<std::size_t, 2>> x, y;
};

inline FaceSet make_faces(const SpatialGrid& g) {
    FaceSet f;
    for (int iy = 0; iy < g.n; ++iy)
        for (int ix = 0; ix < g.n; ++ix) {
            if (!g.in_domain(ix, iy)) continue;
            if (ix + 1 < g.n && g.in_domain(ix + 1, iy)) f.x.push_back({g.index(ix, iy), g.index(ix + 1, iy)});
            if (iy + 1 < g.n && g.in_domain(ix, iy + 1)) f.y.push_back({g.index(ix, iy), g.index(ix, iy + 1)});
        }
    return f;
}

// Momentum density on faces at the time midpoints (k + 1/2) dt, k = 0..nt-1.
struct Momentum {
    std::vector<std::vector<double>> mx, my;
};

inline Momentum zero_momentum(const SpacetimeDensity& rho, const FaceSet& f) {
    Momentum m;
    m.mx.assign(rho.nt(), std::vector<double>(f.x.size(), 0.0));
    m.my.assign(rho.nt(), std::vector<double>(f.y.size(), 0.0));
    return m;
}

inline Momentum scaled(const Momentum& m, double s) {
    Momentum out = m;
    for (auto& v : out.mx)
        for (double& x : v) x *= s;
    for (auto& v : out.my)
        for (double& x : v) x *= s;
    return out;
}

// Face average of the two adjacent cells over the two adjacent slices.
inline double face_density(const SpacetimeDensity& rho, int k, const std::array<std::size_t, 2>& f) {
    const auto& a = rho.slices[k].v;
    const auto& b = rho.slices[k + 1].v;
    return 0.25 * (a[f[0]] + a[f[1]] + b[f[0]] + b[f[1]]);
}

struct ContinuityResidual {
    std::vector<std::vector<double>> field;  // per interval, per cell
    double max_abs = 0.0;
};

inline ContinuityResidual continuity_residual(const SpacetimeDensity& rho, const Momentum& eta, const FaceSet& f) {
    ContinuityResidual r;
    double dt = rho.dt(), h = rho.grid.h();
    for (int k = 0; k < rho.nt(); ++k) {
        std::vector<double> res(rho.grid.size());
        for (std::size_t c = 0; c < res.size(); ++c) res[c] = (rho.slices[k + 1].v[c] - rho.slices[k].v[c]) / dt;
        for (std::size_t e = 0; e < f.x.size(); ++e) {
            res[f.x[e][0]] += eta.mx[k][e] / h;
            res[f.x[e][1]] -= eta.mx[k][e] / h;
        }
        for (std::size_t e = 0; e < f.y.size(); ++e) {
            res[f.y[e][0]] += eta.my[k][e] / h;
            res[f.y[e][1]] -= eta.my[k][e] / h;
        }
        for (double v : res) r.max_abs = std::max(r.max_abs, std::fabs(v));
        r.field.push_back(std::move(res));
    }
    return r;
}

struct BBValue {
    double value = 0.0;
    bool feasible = false;
    double residual = 0.0;
    double value_x = 0.0;  // contribution of x-faces
    double value_y = 0.0;
};

// Discrete kinetic action sum |m|^2 / rho_bar dt dA, with 0/0 = 0 and m^2/0 = inf.
inline BBValue bb_energy(const SpacetimeDensity& rho, const Momentum& eta, const FaceSet& f, double tol = 1e-8) {
    BBValue out;
    const double inf = std::numeric_limits<double>::infinity();
    double w = rho.dt() * rho.grid.cell_area();
    auto term = [&](double m, double r) -> double {
        if (m == 0.0) return 0.0;
        if (r <= 0.0) return inf;
        return m * m / r;
    };
    for (int k = 0; k < rho.nt(); ++k) {
        for (std::size_t e = 0; e < f.x.size(); ++e) out.value_x += term(eta.mx[k][e], face_density(rho, k, f.x[e]));
        for (std::size_t e = 0; e < f.y.size(); ++e) out.value_y += term(eta.my[k][e], face_density(rho, k, f.y[e]));
    }
    out.value_x *= w;
    out.value_y *= w;
    out.value = out.value_x + out.value_y;
    out.residual = continuity_residual(rho, eta, f).max_abs;
    double scale = 0.0;
    for (const auto& s : rho.slices)
        for (double v : s.v) scale = std::max(scale, std::fabs(v));
    out.feasible = out.residual <= tol * std::max(1.0, scale / rho.dt());
    return out;
}

// sum over faces of |m| dt dA, split by axis.
inline std::array<double, 2> momentum_mass(const SpacetimeDensity& rho, const Momentum& eta) {
    double w = rho.dt() * rho.grid.cell_area();
    std::array<double, 2> s{0.0, 0.0};
    for (const auto& v : eta.mx)
        for (double m : v) s[0] += std::fabs(m) * w;
    for (const auto& v : eta.my)
        for (double m : v) s[1] += std::fabs(m) * w;
    return s;
}

struct MinMomentumOptions {
    double rel_tol = 1e-8;
    int max_iter = 10000;
    double floor_factor = 1e-12;
    bool direct = true;  // sparse LDL^T; conjugate gradients otherwise or on failure
};

struct MinMomentumResult {
    Momentum eta;
    BBValue S;
    bool stalled = false;
    double max_rel_residual = 0.0;
    // Potentials with L phi = -(rho_{k+1} - rho_k)/dt, per interval and cell.
    std::vector<std::vector<double>> phi;
};

inline void check_equal_masses(const SpacetimeDensity& rho, double tol = 1e-6) {
    if (rho.max_relative_mass_spread() > tol) throw MassMismatch("slice masses differ");
}

namespace detail {

// Sparsity pattern of the face Laplacian on the domain cells with the value
// slots of every face entry, analysed once per grid and thread.
struct LaplacePattern {
    SpatialGrid grid;
    std::size_t nx = 0, ny = 0;
    std::vector<int> unknown;
    std::vector<std::size_t> cells;
    Eigen::SparseMatrix<double> A;
    std::vector<std::array<int, 4>> slot_x, slot_y;  // (p,p), (q,q), (p,q), (q,p)
    std::vector<int> diag;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
    bool ready = false;
};

inline LaplacePattern& laplace_pattern(const SpatialGrid& g, const FaceSet& f) {
    thread_local std::unique_ptr<LaplacePattern> cache;
    if (cache && cache->grid == g && cache->nx == f.x.size() && cache->ny == f.y.size()) return *cache;
    cache = std::make_unique<LaplacePattern>();
    auto& P = *cache;
    P.grid = g;
    P.nx = f.x.size();
    P.ny = f.y.size();
    P.unknown.assign(g.size(), -1);
    for (std::size_t c = 0; c < g.size(); ++c)
        if (g.in_domain(c)) {
            P.unknown[c] = static_cast<int>(P.cells.size());
            P.cells.push_back(c);
        }
    const int nu = static_cast<int>(P.cells.size());
    std::vector<Eigen::Triplet<double>> trip;
    for (int u = 0; u < nu; ++u) trip.emplace_back(u, u, 1.0);
    for (const auto* faces : {&f.x, &f.y})
        for (const auto& fc : *faces) {
            int p = P.unknown[fc[0]], q = P.unknown[fc[1]];
            trip.emplace_back(p, q, 1.0);
            trip.emplace_back(q, p, 1.0);
        }
    P.A.resize(nu, nu);
    P.A.setFromTriplets(trip.begin(), trip.end());
    P.A.makeCompressed();
    auto slot = [&](int i, int j) { return static_cast<int>(&P.A.coeffRef(i, j) - P.A.valuePtr()); };
    for (int u = 0; u < nu; ++u) P.diag.push_back(slot(u, u));
    auto fill = [&](const std::vector<std::array<std::size_t, 2>>& faces, std::vector<std::array<int, 4>>& out) {
        for (const auto& fc : faces) {
            int p = P.unknown[fc[0]], q = P.unknown[fc[1]];
            out.push_back({slot(p, p), slot(q, q), slot(p, q), slot(q, p)});
        }
    };
    fill(f.x, P.slot_x);
    fill(f.y, P.slot_y);
    P.ldlt.analyzePattern(P.A);
    P.ready = true;
    return P;
}

}  // namespace detail

// Minimal-action momentum for fixed rho: per interval, solve the weighted
// Laplace problem L phi = -b with no-flux boundary and set m = -rho_bar grad phi.
inline MinMomentumResult min_momentum(const SpacetimeDensity& rho, const FaceSet& f,
                                      const MinMomentumOptions& opt = {}) {
    check_equal_masses(rho);
    const auto& g = rho.grid;
    const double h = g.h(), dt = rho.dt();
    const double inf = std::numeric_limits<double>::infinity();
    auto& P = detail::laplace_pattern(g, f);
    const auto& cells = P.cells;
    const auto& unknown = P.unknown;
    const int nu = static_cast<int>(cells.size());
    MinMomentumResult out;
    out.eta = zero_momentum(rho, f);
    out.phi.assign(rho.nt(), std::vector<double>(g.size(), 0.0));
    bool infeasible = false;

    double mean = 0.0;
    for (const auto& s : rho.slices)
        for (std::size_t c : cells) mean += s.v[c];
    mean /= static_cast<double>(rho.slices.size() * std::max<std::size_t>(cells.size(), 1));
    const double floor = opt.floor_factor * mean;

    std::vector<int> comp(nu);
    auto find = [&](int a) {
        int r = a;
        while (comp[r] != r) r = comp[r];
        while (comp[a] != r) {
            int next = comp[a];
            comp[a] = r;
            a = next;
        }
        return r;
    };
    std::vector<double> rx(f.x.size()), ry(f.y.size());
    std::vector<double> csum(nu);
    std::vector<int> ccount(nu);
    double* val = P.A.valuePtr();

    for (int k = 0; k < rho.nt(); ++k) {
        Eigen::VectorXd b(nu);
        double bnorm = 0.0, volume = 0.0;
        for (int u = 0; u < nu; ++u) {
            b[u] = (rho.slices[k + 1].v[cells[u]] - rho.slices[k].v[cells[u]]) / dt;
            bnorm = std::max(bnorm, std::fabs(b[u]));
            volume += (std::fabs(rho.slices[k + 1].v[cells[u]]) + std::fabs(rho.slices[k].v[cells[u]])) / dt;
        }
        // Imbalances below this level are floating-point noise in the slice masses.
        const double noise = 1e-10 * volume;
        if (bnorm <= 1e-14 * volume || bnorm == 0.0) continue;
        std::fill(val, val + P.A.nonZeros(), 0.0);
        std::iota(comp.begin(), comp.end(), 0);
        auto add_face = [&](const std::array<std::size_t, 2>& fc, const std::array<int, 4>& sl, double r) {
            if (r < floor || r <= 0.0) return;
            double w = r / (h * h);
            val[sl[0]] += w;
            val[sl[1]] += w;
            val[sl[2]] -= w;
            val[sl[3]] -= w;
            int a = find(unknown[fc[0]]), c = find(unknown[fc[1]]);
            if (a != c) comp[a] = c;
        };
        for (std::size_t e = 0; e < f.x.size(); ++e) add_face(f.x[e], P.slot_x[e], rx[e] = face_density(rho, k, f.x[e]));
        for (std::size_t e = 0; e < f.y.size(); ++e) add_face(f.y[e], P.slot_y[e], ry[e] = face_density(rho, k, f.y[e]));
        // Each connected component must carry zero net source; remove the
        // rounding-level mean and flag genuine imbalance.
        std::fill(csum.begin(), csum.end(), 0.0);
        std::fill(ccount.begin(), ccount.end(), 0);
        for (int u = 0; u < nu; ++u) {
            int r = find(u);
            csum[r] += b[u];
            ++ccount[r];
        }
        for (int u = 0; u < nu; ++u) {
            int r = find(u);
            if (std::fabs(csum[r]) > noise) infeasible = true;
            b[u] -= csum[r] / ccount[r];
        }
        // Grounding one node per component makes the system definite without
        // changing the solution, since every component has zero net source.
        for (int u = 0; u < nu; ++u)
            if (find(u) == u) val[P.diag[u]] += std::max(mean, 1e-300) / (h * h);
        const auto& L = P.A;
        Eigen::VectorXd phi;
        bool solved = false;
        if (opt.direct) {
            P.ldlt.factorize(L);
            if (P.ldlt.info() == Eigen::Success) {
                phi = P.ldlt.solve(-b);
                solved = P.ldlt.info() == Eigen::Success && phi.allFinite();
            }
        }
        if (!solved) {
            Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper> cg;
            cg.setTolerance(opt.rel_tol);
            cg.setMaxIterations(opt.max_iter);
            cg.compute(L);
            phi = cg.solve(-b);
        }
        Eigen::VectorXd r = b + L * phi;
        double rel = b.norm() > 0.0 ? r.norm() / b.norm() : 0.0;
        out.max_rel_residual = std::max(out.max_rel_residual, rel);
        if (!(rel <= opt.rel_tol * 10.0)) out.stalled = true;
        for (int u = 0; u < nu; ++u) out.phi[k][cells[u]] = phi[u];
        for (std::size_t e = 0; e < f.x.size(); ++e)
            if (rx[e] >= floor && rx[e] > 0.0)
                out.eta.mx[k][e] = -rx[e] * (phi[unknown[f.x[e][1]]] - phi[unknown[f.x[e][0]]]) / h;
        for (std::size_t e = 0; e < f.y.size(); ++e)
            if (ry[e] >= floor && ry[e] > 0.0)
                out.eta.my[k][e] = -ry[e] * (phi[unknown[f.y[e][1]]] - phi[unknown[f.y[e][0]]]) / h;
    }
    out.S = bb_energy(rho, out.eta, f);
    if (infeasible) {
        out.stalled = true;
        out.S.value = inf;
        out.S.feasible = false;
    }
    return out;
}

// Weighted point cloud of the positive cells of a density.
inline void to_cloud(const SpatialDensity& d, std::vector<Vec2>& pts, std::vector<double>& w,
                     std::vector<std::size_t>* ids = nullptr) {
    pts.clear();
    w.clear();
    if (ids) ids->clear();
    double area = d.grid.cell_area();
    for (std::size_t c = 0; c < d.v.size(); ++c)
        if (d.v[c] > 0.0) {
            pts.push_back(d.grid.center(c));
            w.push_back(d.v[c] * area);
            if (ids) ids->push_back(c);
        }
}

inline double w2_distance(const SpatialDensity& mu, const SpatialDensity& nu) {
    double a = mu.mass(), b = nu.mass();
    if (std::fabs(a - b) > 1e-6 * std::max(a, b)) throw MassMismatch("w2_distance: masses differ");
    if (a == 0.0) return 0.0;
    std::vector<Vec2> x, y;
    std::vector<double> wa, wb;
    to_cloud(mu, x, wa);
    to_cloud(nu, y, wb);
    return std::sqrt(std::max(exact_ot(x, wa, y, wb).cost, 0.0));
}

// Nearest-cell binning restricted to the domain mask.
class DomainBinner {
public:
    explicit DomainBinner(const SpatialGrid& g) : g_(g), snap_(g.size()) {
        auto dom = g.domain_cells();
        for (std::size_t c = 0; c < g.size(); ++c) {
            if (g.in_domain(c)) {
                snap_[c] = c;
                continue;
            }
            Vec2 p = g.center(c);
            double best = INFINITY;
            for (std::size_t d : dom) {
                Vec2 q = g.center(d) - p;
                double dd = dot(q, q);
                if (dd < best) {
                    best = dd;
                    snap_[c] = d;
                }
            }
        }
    }
    std::size_t cell(Vec2 p) const {
        int ix = std::clamp(static_cast<int>(std::floor((p.x + g_.L) / g_.h())), 0, g_.n - 1);
        int iy = std::clamp(static_cast<int>(std::floor((p.y + g_.L) / g_.h())), 0, g_.n - 1);
        return snap_[g_.index(ix, iy)];
    }

private:
    SpatialGrid g_;
    std::vector<std::size_t> snap_;
};

inline double time_bump(double t) {
    if (std::fabs(t) >= 1.0) return 0.0;
    return std::exp(1.0 / (t * t - 1.0));
}

// Fold s into [0, T] by repeated reflection (s -> -s below 0, s -> 2T - s above T).
inline double reflect_time(double s, double T) {
    while (s < 0.0 || s > T) s = s < 0.0 ? -s : 2.0 * T - s;
    return s;
}

// Weights w_k with rho_eps(t) = sum_k w_k rho_{t_k}: the bump mollifier of
// width eps applied to the reflected, piecewise-linear-in-time curve.
inline std::vector<double> temporal_mollifier_weights(const SpacetimeDensity& rho, double eps, double t,
                                                      int quad = 4000) {
    int nt = rho.nt();
    std::vector<double> w(nt + 1, 0.0);
    double total = 0.0;
    for (int q = 0; q < quad; ++q) {
        double z = -1.0 + (q + 0.5) * 2.0 / quad;
        double kern = time_bump(z);
        if (kern == 0.0) continue;
        double s = reflect_time(t - eps * z, rho.T) / rho.dt();
        int k0 = std::min(static_cast<int>(s), nt - 1);
        double frac = s - k0;
        w[k0] += kern * (1.0 - frac);
        w[k0 + 1] += kern * frac;
        total += kern;
    }
    for (double& x : w) x /= total;
    return w;
}

inline SpatialDensity temporal_mollify(const SpacetimeDensity& rho, double eps, double t) {
    auto w = temporal_mollifier_weights(rho, eps, t);
    SpatialDensity out(rho.grid);
    for (std::size_t k = 0; k < w.size(); ++k)
        if (w[k] != 0.0)
            for (std::size_t c = 0; c < out.v.size(); ++c) out.v[c] += w[k] * rho.slices[k].v[c];
    return out;
}

// Spatial bump mollification at radius r followed by the contraction x -> c x,
// evaluated on particles and binned back to the domain.
inline SpatialDensity mollify_and_contract(const SpatialDensity& d, double r, double c, const DomainBinner& bin) {
    const auto& g = d.grid;
    Stencil st = make_stencil(g, r);
    SpatialDensity out(g);
    double h = g.h();
    for (std::size_t cell = 0; cell < g.size(); ++cell) {
        double val = d.v[cell];
        if (val == 0.0) continue;
        Vec2 x = g.center(cell);
        for (std::size_t s = 0; s < st.w.size(); ++s) {
            Vec2 p = x + Vec2{st.dx[s] * h, st.dy[s] * h};
            out.v[bin.cell(c * p)] += val * st.w[s];
        }
    }
    return out;
}

inline SpatialDensity displacement_interpolate(const SpatialDensity& mu, const SpatialDensity& nu, double s,
                                               const DomainBinner& bin) {
    if (s <= 0.0) return mu;
    if (s >= 1.0) return nu;
    std::vector<Vec2> x, y;
    std::vector<double> a, b;
    to_cloud(mu, x, a);
    to_cloud(nu, y, b);
    auto ot = exact_ot(x, a, y, b);
    SpatialDensity out(mu.grid);
    double area = mu.grid.cell_area();
    for (const auto& e : ot.plan) out.v[bin.cell((1.0 - s) * x[e.i] + s * y[e.j])] += e.mass / area;
    return out;
}

struct RecoveryEntry {
    int n = 0;
    double delta = 0.0;
    long k = 0;
    double eps = 0.0;
    SpacetimeDensity rho;
    Momentum eta;
    double S = 0.0;
    bool stalled = false;
    double w2 = 0.0;
};

// Regularised approximants of rho with S <= 1/delta_n: temporal mollification
// at eps_n, spatial mollification at 1/k_n with displacement interpolation
// between k_n coarse slices, contraction by c_k, then the minimal momentum.
inline std::vector<RecoveryEntry> recovery_sequence(const SpacetimeDensity& rho, const std::vector<double>& deltas,
                                                    const FaceSet& faces) {
    check_equal_masses(rho);
    const auto& g = rho.grid;
    DomainBinner binner(g);
    double m = g.R_dom;
    std::vector<RecoveryEntry> out;
    for (std::size_t n = 0; n < deltas.size(); ++n) {
        RecoveryEntry e;
        e.n = static_cast<int>(n + 1);
        e.delta = deltas[n];
        e.k = static_cast<long>(std::ceil(std::pow(deltas[n], -2.0 / 3.0) - 1e-9));
        e.eps = std::sqrt(static_cast<double>(e.k) * deltas[n]);
        double ck = 1.0 / (1.0 + 1.0 / (m * static_cast<double>(e.k)));
        double radius = 1.0 / static_cast<double>(e.k);
        e.rho = SpacetimeDensity(g, rho.T, rho.nt());
        long cached_i = -1;
        SpatialDensity lo, hi;
        auto coarse = [&](long i) {
            double t = rho.T * static_cast<double>(i) / static_cast<double>(e.k);
            return mollify_and_contract(temporal_mollify(rho, e.eps, t), radius, ck, binner);
        };
        for (int j = 0; j <= rho.nt(); ++j) {
            double pos = rho.time(j) / rho.T * static_cast<double>(e.k);
            long i = std::min(static_cast<long>(std::floor(pos)), e.k - 1);
            double s = pos - static_cast<double>(i);
            if (i != cached_i) {
                lo = (i == cached_i + 1 && cached_i >= 0) ? hi : coarse(i);
                hi = coarse(i + 1);
                cached_i = i;
            }
            e.rho.slices[j] = displacement_interpolate(lo, hi, s, binner);
        }
        auto mm = min_momentum(e.rho, faces);
        e.eta = std::move(mm.eta);
        e.S = mm.S.value;
        e.stalled = mm.stalled;
        for (int j = 0; j <= rho.nt(); ++j)
            e.w2 += rho.time_weight(j) * w2_distance(e.rho.slices[j], rho.slices[j]);
        out.push_back(std::move(e));
    }
    return out;
}

}  // namespace petgamma
