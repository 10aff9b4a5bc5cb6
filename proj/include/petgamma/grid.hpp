#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "errors.hpp"
#include "geometry.hpp"

namespace petgamma {

// Cell-centred square grid on [-L, L]^2 with L = R_dom + delta/2.
struct SpatialGrid {
    int n = 0;
    double L = 0.0;
    double R_dom = 0.0;

    SpatialGrid() = default;
    SpatialGrid(const GeometryConfig& g, int cells) : n(cells), L(g.R_blur()), R_dom(g.R_dom) {}

    double h() const { return 2.0 * L / n; }
    double cell_area() const { return h() * h(); }
    std::size_t size() const { return static_cast<std::size_t>(n) * n; }
    std::size_t index(int ix, int iy) const { return static_cast<std::size_t>(iy) * n + ix; }
    Vec2 center(int ix, int iy) const { return {-L + (ix + 0.5) * h(), -L + (iy + 0.5) * h()}; }
    Vec2 center(std::size_t idx) const { return center(static_cast<int>(idx % n), static_cast<int>(idx / n)); }
    bool in_domain(int ix, int iy) const { return norm(center(ix, iy)) <= R_dom; }
    bool in_domain(std::size_t idx) const { return norm(center(idx)) <= R_dom; }

    std::vector<std::size_t> domain_cells() const {
        std::vector<std::size_t> out;
        for (std::size_t c = 0; c < size(); ++c)
            if (in_domain(c)) out.push_back(c);
        return out;
    }
};

inline bool operator==(const SpatialGrid& a, const SpatialGrid& b) {
    return a.n == b.n && a.L == b.L && a.R_dom == b.R_dom;
}

// Nonnegative density values (mass per unit area) on a SpatialGrid.
struct SpatialDensity {
    SpatialGrid grid;
    std::vector<double> v;

    SpatialDensity() = default;
    explicit SpatialDensity(const SpatialGrid& g) : grid(g), v(g.size(), 0.0) {}

    double mass() const {
        double s = 0.0;
        for (double x : v) s += x;
        return s * grid.cell_area();
    }
    double mass_outside_domain() const {
        double s = 0.0;
        for (std::size_t c = 0; c < v.size(); ++c)
            if (!grid.in_domain(c)) s += std::fabs(v[c]);
        return s * grid.cell_area();
    }
};

// Slices at t_k = k T / nt for k = 0..nt, linear in time between slices.
struct SpacetimeDensity {
    SpatialGrid grid;
    double T = 1.0;
    std::vector<SpatialDensity> slices;

    SpacetimeDensity() = default;
    SpacetimeDensity(const SpatialGrid& g, double horizon, int nt)
        : grid(g), T(horizon), slices(static_cast<std::size_t>(nt) + 1, SpatialDensity(g)) {}

    int nt() const { return static_cast<int>(slices.size()) - 1; }
    double dt() const { return T / nt(); }
    double time(int k) const { return T * k / nt(); }

    // Trapezoid weight of slice k in time integrals over [0, T].
    double time_weight(int k) const { return (k == 0 || k == nt()) ? 0.5 * dt() : dt(); }

    double total_mass() const {
        double s = 0.0;
        for (int k = 0; k <= nt(); ++k) s += time_weight(k) * slices[k].mass();
        return s;
    }

    double max_relative_mass_spread() const {
        double lo = INFINITY, hi = 0.0;
        for (const auto& s : slices) {
            double m = s.mass();
            lo = std::min(lo, m);
            hi = std::max(hi, m);
        }
        if (hi <= 0.0) return 0.0;
        return (hi - lo) / hi;
    }
    bool in_Mc(double tol = 1e-9) const { return max_relative_mass_spread() <= tol; }
};

// Radial C^2 bump (1 - (r/w)^2)^3 with unit integral over the plane.
inline double bump_profile(double r, double w) {
    if (r >= w) return 0.0;
    double u = 1.0 - (r / w) * (r / w);
    return 4.0 / (std::numbers::pi * w * w) * u * u * u;
}

// Bump of radius w centred at c, discretised with the given total mass (exactly).
inline SpatialDensity bump_blob(const SpatialGrid& g, Vec2 c, double w, double mass) {
    SpatialDensity d(g);
    for (std::size_t i = 0; i < g.size(); ++i)
        if (g.in_domain(i)) d.v[i] = bump_profile(norm(g.center(i) - c), w);
    double m = d.mass();
    if (m > 0.0)
        for (double& x : d.v) x *= mass / m;
    return d;
}

}  // namespace petgamma
