#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"
#include "geometry.hpp"
#include "rng.hpp"

namespace petgamma {

using Point = std::array<double, 3>;

// Product of up to three one-dimensional partitions; cells are indexed row-major.
struct ProductGrid {
    std::vector<PartitionLevel> axes;

    std::size_t dim() const { return axes.size(); }
    std::size_t size() const {
        std::size_t n = 1;
        for (const auto& a : axes) n *= a.size();
        return n;
    }
    std::size_t locate(const Point& p) const {
        std::size_t idx = 0;
        for (std::size_t d = 0; d < axes.size(); ++d) idx = idx * axes[d].size() + axes[d].locate(p[d]);
        return idx;
    }
    std::array<std::size_t, 3> unflatten(std::size_t idx) const {
        std::array<std::size_t, 3> c{0, 0, 0};
        for (std::size_t d = axes.size(); d-- > 0;) {
            c[d] = idx % axes[d].size();
            idx /= axes[d].size();
        }
        return c;
    }
    double diameter(std::size_t idx) const {
        auto c = unflatten(idx);
        double s = 0.0;
        for (std::size_t d = 0; d < axes.size(); ++d) s += axes[d].length(c[d]) * axes[d].length(c[d]);
        return std::sqrt(s);
    }
    double max_diameter() const {
        double s = 0.0;
        for (const auto& a : axes) {
            double m = 0.0;
            for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, a.length(i));
            s += m * m;
        }
        return std::sqrt(s);
    }
    bool nested_in(const ProductGrid& coarse) const {
        if (coarse.dim() != dim()) return false;
        for (std::size_t d = 0; d < dim(); ++d)
            if (!is_nested(axes[d], coarse.axes[d])) return false;
        return true;
    }
};

struct IntensityMeasure {
    ProductGrid grid;
    std::vector<double> cell_masses;

    double total_mass() const {
        double s = 0.0;
        for (double m : cell_masses) s += m;
        return s;
    }

    static IntensityMeasure uniform(const ProductGrid& g, double total) {
        IntensityMeasure l{g, std::vector<double>(g.size(), 0.0)};
        double vol = 1.0;
        for (const auto& a : g.axes) vol *= a.hi() - a.lo();
        for (std::size_t c = 0; c < g.size(); ++c) {
            auto idx = g.unflatten(c);
            double v = 1.0;
            for (std::size_t d = 0; d < g.dim(); ++d) v *= g.axes[d].length(idx[d]);
            l.cell_masses[c] = total * v / vol;
        }
        return l;
    }
};

struct PointMeasure {
    std::size_t dim = 1;
    std::vector<Point> events;

    std::size_t size() const { return events.size(); }
};

namespace detail {

inline void append_poisson(const IntensityMeasure& lambda, double scale, std::mt19937_64& rng, PointMeasure& out) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const auto& g = lambda.grid;
    for (std::size_t c = 0; c < g.size(); ++c) {
        double mean = scale * lambda.cell_masses[c];
        if (mean <= 0.0) continue;
        std::poisson_distribution<long long> pois(mean);
        long long n = pois(rng);
        std::size_t need = out.events.size() + static_cast<std::size_t>(n);
        if (need > out.events.capacity()) out.events.reserve(std::max(need, 2 * out.events.capacity()));
        auto idx = g.unflatten(c);
        for (long long e = 0; e < n; ++e) {
            Point p{0.0, 0.0, 0.0};
            for (std::size_t d = 0; d < g.dim(); ++d) {
                const auto& ax = g.axes[d];
                double lo = ax.edges[idx[d]], hi = ax.edges[idx[d] + 1];
                double x = lo + (hi - lo) * unif(rng);
                p[d] = x < hi ? x : lo;
            }
            out.events.push_back(p);
        }
    }
}

}  // namespace detail

inline PointMeasure sample_independent(const IntensityMeasure& lambda, double q, std::uint64_t seed,
                                       std::uint64_t level = 0) {
    if (!(q > 0.0)) throw ConfigError("sample_independent: q must be positive");
    PointMeasure out;
    out.dim = lambda.grid.dim();
    auto rng = make_stream(seed, level);
    detail::append_poisson(lambda, q, rng, out);
    return out;
}

// Nested family E_q: extending to a larger q appends an independent Poisson
// increment with intensity (q_new - q_old) lambda.
class CoupledSampler {
public:
    CoupledSampler(IntensityMeasure lambda, std::uint64_t seed) : lambda_(std::move(lambda)), seed_(seed) {
        accumulated_.dim = lambda_.grid.dim();
    }

    double current_q() const { return q_; }
    const PointMeasure& accumulated() const { return accumulated_; }

    const PointMeasure& extend(double q_new) {
        if (q_new < q_) throw ShrinkNotAllowed("coupled_extend: q_new below current q");
        if (q_new == q_) return accumulated_;
        auto rng = make_stream(seed_, ++step_);
        detail::append_poisson(lambda_, q_new - q_, rng, accumulated_);
        q_ = q_new;
        return accumulated_;
    }

private:
    IntensityMeasure lambda_;
    std::uint64_t seed_;
    double q_ = 0.0;
    std::uint64_t step_ = 0;
    PointMeasure accumulated_;
};

inline PointMeasure coupled_extend(CoupledSampler& state, double q_new) { return state.extend(q_new); }

inline std::vector<long long> cell_counts(const PointMeasure& E, const ProductGrid& level) {
    std::vector<long long> counts(level.size(), 0);
    for (const auto& p : E.events) ++counts[level.locate(p)];
    return counts;
}

// lambda(C) for every cell of `level`, assuming lambda is uniform inside its own cells.
inline std::vector<double> cell_intensity(const IntensityMeasure& lambda, const ProductGrid& level) {
    const auto& fine = lambda.grid;
    if (fine.dim() != level.dim()) throw ConfigError("cell_intensity: dimension mismatch");
    struct Overlap {
        std::size_t coarse;
        double frac;
    };
    std::vector<std::vector<std::vector<Overlap>>> ov(fine.dim());
    for (std::size_t d = 0; d < fine.dim(); ++d) {
        const auto& f = fine.axes[d];
        const auto& c = level.axes[d];
        ov[d].resize(f.size());
        for (std::size_t i = 0; i < f.size(); ++i) {
            double lo = f.edges[i], hi = f.edges[i + 1];
            auto it = std::upper_bound(c.edges.begin(), c.edges.end(), lo);
            std::size_t j = it == c.edges.begin() ? 0 : static_cast<std::size_t>(it - c.edges.begin()) - 1;
            for (; j < c.size() && c.edges[j] < hi; ++j) {
                double w = std::min(hi, c.edges[j + 1]) - std::max(lo, c.edges[j]);
                if (w > 0.0) ov[d][i].push_back({j, w / (hi - lo)});
            }
        }
    }
    std::vector<double> out(level.size(), 0.0);
    for (std::size_t cell = 0; cell < fine.size(); ++cell) {
        double m = lambda.cell_masses[cell];
        if (m == 0.0) continue;
        auto idx = fine.unflatten(cell);
        std::size_t nd = fine.dim();
        const auto& o0 = ov[0][idx[0]];
        for (const auto& a : o0) {
            if (nd == 1) {
                out[a.coarse] += m * a.frac;
                continue;
            }
            for (const auto& b : ov[1][idx[1]]) {
                std::size_t ab = a.coarse * level.axes[1].size() + b.coarse;
                if (nd == 2) {
                    out[ab] += m * a.frac * b.frac;
                    continue;
                }
                for (const auto& c : ov[2][idx[2]])
                    out[ab * level.axes[2].size() + c.coarse] += m * a.frac * b.frac * c.frac;
            }
        }
    }
    return out;
}

inline double discrepancy_Z(const PointMeasure& E, double q, const IntensityMeasure& lambda, const ProductGrid& level) {
    auto counts = cell_counts(E, level);
    auto mass = cell_intensity(lambda, level);
    double z = 0.0;
    for (std::size_t k = 0; k < counts.size(); ++k) z += std::fabs(static_cast<double>(counts[k]) / q - mass[k]);
    return z;
}

inline double flat_upper_bound(const PointMeasure& E, double q, const IntensityMeasure& lambda,
                               const ProductGrid& level) {
    return level.max_diameter() * lambda.total_mass() + discrepancy_Z(E, q, lambda, level);
}

enum class Regime { Independent, Coupled };

struct RateConfig {
    IntensityMeasure lambda;
    std::vector<double> q;
    std::vector<ProductGrid> levels;
    std::vector<double> r;
    Regime regime = Regime::Independent;
    std::vector<std::uint64_t> seeds;
};

struct RateRow {
    int n;
    double q;
    std::size_t K;
    double r;
    std::uint64_t seed;
    double Z;
    double Z_over_r;
    double flat_bound;
};

inline void validate(const RateConfig& c) {
    if (c.q.empty()) throw ConfigError("sequences.q: empty schedule");
    if (c.levels.size() != c.q.size()) throw ConfigError("sequences.K: length differs from sequences.q");
    if (c.r.size() != c.q.size()) throw ConfigError("sequences.r: length differs from sequences.q");
    if (c.seeds.empty()) throw ConfigError("seeds: empty seed list");
    for (std::size_t n = 0; n < c.q.size(); ++n) {
        if (!(c.q[n] > 0.0)) throw ConfigError("sequences.q[" + std::to_string(n) + "]: must be positive");
        if (n > 0 && c.q[n] < c.q[n - 1]) throw ConfigError("sequences.q: must be non-decreasing");
        if (!(c.r[n] > 0.0)) throw ConfigError("sequences.r[" + std::to_string(n) + "]: must be positive");
    }
    if (c.regime == Regime::Coupled)
        for (std::size_t n = 1; n < c.levels.size(); ++n)
            if (!c.levels[n].nested_in(c.levels[n - 1]))
                throw ConfigError("partitions: levels must be nested for the coupled regime");
}

// Rows are ordered by seed, then by n (1-based).
inline std::vector<RateRow> rate_experiment(const RateConfig& c) {
    validate(c);
    std::vector<RateRow> rows;
    rows.reserve(c.seeds.size() * c.q.size());
    for (auto seed : c.seeds) {
        CoupledSampler coupled(c.lambda, seed);
        for (std::size_t n = 0; n < c.q.size(); ++n) {
            PointMeasure E;
            const PointMeasure* use = nullptr;
            if (c.regime == Regime::Coupled) {
                use = &coupled.extend(c.q[n]);
            } else {
                E = sample_independent(c.lambda, c.q[n], seed, n + 1);
                use = &E;
            }
            double z = discrepancy_Z(*use, c.q[n], c.lambda, c.levels[n]);
            double fb = c.levels[n].max_diameter() * c.lambda.total_mass() + z;
            rows.push_back({static_cast<int>(n + 1), c.q[n], c.levels[n].size(), c.r[n], seed, z, z / c.r[n], fb});
        }
    }
    return rows;
}

// Two-sample Kolmogorov-Smirnov statistic.
inline double ks_distance(std::vector<double> a, std::vector<double> b) {
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::size_t i = 0, j = 0;
    double d = 0.0;
    while (i < a.size() && j < b.size()) {
        double x = std::min(a[i], b[j]);
        while (i < a.size() && a[i] == x) ++i;
        while (j < b.size() && b[j] == x) ++j;
        d = std::max(d, std::fabs(static_cast<double>(i) / a.size() - static_cast<double>(j) / b.size()));
    }
    return d;
}

}  // namespace petgamma
