#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace petgamma {

inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
inline double dot(Vec2 a, Vec2 b) { return a.x * b.x + a.y * b.y; }
inline double norm(Vec2 a) { return std::hypot(a.x, a.y); }
inline Vec2 perp(Vec2 a) { return {-a.y, a.x}; }

inline double wrap_angle(double a) {
    a = std::fmod(a, kTwoPi);
    if (a < 0.0) a += kTwoPi;
    if (a >= kTwoPi) a = 0.0;
    return a;
}

inline Vec2 boundary_point(double angle, double radius) {
    return {radius * std::cos(angle), radius * std::sin(angle)};
}

struct GeometryConfig {
    double R_dom = 0.7;
    double R_scan = 1.0;
    double T_horizon = 1.0;
    int grid_n = 64;
    int nt = 32;

    double delta() const { return R_scan - R_dom; }
    // Radius of D_{delta/2}, the support of positron-blurred densities.
    double R_blur() const { return R_dom + 0.5 * delta(); }
    double perimeter() const { return kTwoPi * R_scan; }

    void validate() const {
        if (!(R_dom > 0.0)) throw ConfigError("geometry.R_dom: must be positive");
        if (!(R_scan > R_dom)) throw ConfigError("geometry.R_scan: must exceed R_dom");
        if (!(T_horizon > 0.0)) throw ConfigError("geometry.T_horizon: must be positive");
        if (grid_n < 2) throw ConfigError("geometry.grid_n: must be at least 2");
        if (nt < 1) throw ConfigError("geometry.nt: must be at least 1");
    }
};

// Coordinates that are pointwise in the limit: none (A), time (B), detectors (C), both (D).
enum class LimitCase { A, B, C, D };

inline LimitCase parse_case(const std::string& s, const std::string& path) {
    if (s == "A") return LimitCase::A;
    if (s == "B") return LimitCase::B;
    if (s == "C") return LimitCase::C;
    if (s == "D") return LimitCase::D;
    throw ConfigError(path + ": expected one of A, B, C, D");
}

inline const char* case_name(LimitCase c) {
    switch (c) {
        case LimitCase::A: return "A";
        case LimitCase::B: return "B";
        case LimitCase::C: return "C";
        default: return "D";
    }
}

struct ChordParams {
    Vec2 theta;
    Vec2 s;
};

// Intersections of the line x + R v with the scanner circle. The first angle is
// reached walking along -v, the second along +v.
inline std::pair<double, double> chord_endpoints(Vec2 x, Vec2 v, double R_scan) {
    double xv = dot(x, v);
    double disc = xv * xv - dot(x, x) + R_scan * R_scan;
    double root = std::sqrt(std::max(disc, 0.0));
    Vec2 pa = x + (-xv - root) * v;
    Vec2 pb = x + (-xv + root) * v;
    return {wrap_angle(std::atan2(pa.y, pa.x)), wrap_angle(std::atan2(pb.y, pb.x))};
}

inline ChordParams chord_params(double a, double b, double R_scan) {
    double gap = std::fabs(wrap_angle(b - a));
    gap = std::min(gap, kTwoPi - gap);
    if (gap < 1e-12) throw DegenerateChord("chord_params: coincident boundary points");
    Vec2 pa = boundary_point(a, R_scan);
    Vec2 pb = boundary_point(b, R_scan);
    Vec2 d = pb - pa;
    Vec2 theta = (1.0 / norm(d)) * d;
    Vec2 s = pa - dot(pa, theta) * theta;
    return {theta, s};
}

// One level of a partition of [lo, hi) into half-open cells.
struct PartitionLevel {
    std::vector<double> edges;

    std::size_t size() const { return edges.size() - 1; }
    double lo() const { return edges.front(); }
    double hi() const { return edges.back(); }
    double length(std::size_t i) const { return edges[i + 1] - edges[i]; }

    static PartitionLevel uniform(double lo, double hi, std::size_t n) {
        PartitionLevel p;
        p.edges.resize(n + 1);
        for (std::size_t i = 0; i <= n; ++i)
            p.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n);
        p.edges[n] = hi;
        return p;
    }

    // Cell whose left endpoint is the largest edge <= x.
    std::size_t locate(double x) const {
        if (!(x >= lo() && x < hi())) throw OutOfRange("locate: value outside partition range");
        // Exact for uniform partitions, otherwise a starting guess.
        auto g = std::min(static_cast<std::size_t>((x - lo()) / (hi() - lo()) * static_cast<double>(size())), size() - 1);
        if (edges[g] <= x && x < edges[g + 1]) return g;
        auto it = std::upper_bound(edges.begin(), edges.end(), x);
        return static_cast<std::size_t>(it - edges.begin()) - 1;
    }
};

inline PartitionLevel dyadic_refine(const PartitionLevel& level) {
    PartitionLevel out;
    out.edges.reserve(2 * level.size() + 1);
    for (std::size_t i = 0; i < level.size(); ++i) {
        out.edges.push_back(level.edges[i]);
        out.edges.push_back(0.5 * (level.edges[i] + level.edges[i + 1]));
    }
    out.edges.push_back(level.hi());
    return out;
}

// Returns (min, max) of n * length over the cells, with `scale` converting
// parameter length to physical length (R_scan for arcs, 1 for time).
inline std::pair<double, double> quasiuniform_constants(const PartitionLevel& level, double scale = 1.0) {
    double n = static_cast<double>(level.size());
    double lo = INFINITY, hi = 0.0;
    for (std::size_t i = 0; i < level.size(); ++i) {
        double v = n * scale * level.length(i);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    return {lo, hi};
}

// Index of the parent cell in `coarse` containing cell i of `fine`, or -1 if
// the cell straddles a coarse edge.
inline long parent_index(const PartitionLevel& fine, std::size_t i, const PartitionLevel& coarse) {
    std::size_t p = coarse.locate(fine.edges[i]);
    if (fine.edges[i + 1] > coarse.edges[p + 1]) return -1;
    return static_cast<long>(p);
}

inline bool is_nested(const PartitionLevel& fine, const PartitionLevel& coarse) {
    if (fine.lo() != coarse.lo() || fine.hi() != coarse.hi()) return false;
    for (std::size_t i = 0; i < fine.size(); ++i)
        if (parent_index(fine, i, coarse) < 0) return false;
    return true;
}

struct PartitionHierarchy {
    std::vector<PartitionLevel> time_levels;
    std::vector<PartitionLevel> arc_levels;

    std::size_t levels() const { return time_levels.size(); }

    // Level 0 has n_time0 intervals and m_arc0 arcs; each further level halves every cell.
    static PartitionHierarchy dyadic(double T, std::size_t n_time0, std::size_t m_arc0, std::size_t count) {
        PartitionHierarchy h;
        h.time_levels.push_back(PartitionLevel::uniform(0.0, T, n_time0));
        h.arc_levels.push_back(PartitionLevel::uniform(0.0, kTwoPi, m_arc0));
        for (std::size_t n = 1; n < count; ++n) {
            h.time_levels.push_back(dyadic_refine(h.time_levels.back()));
            h.arc_levels.push_back(dyadic_refine(h.arc_levels.back()));
        }
        return h;
    }
};

struct BinIndex {
    std::size_t i, j, k;
};

inline BinIndex locate_bin(double t, double a, double b, const PartitionLevel& time, const PartitionLevel& arcs) {
    return {time.locate(t), arcs.locate(wrap_angle(a)), arcs.locate(wrap_angle(b))};
}

}  // namespace petgamma
