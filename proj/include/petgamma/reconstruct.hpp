#pragma once

#include <Eigen/Dense>
#include <ceres/ceres.h>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "bbflow.hpp"
#include "errors.hpp"
#include "forward.hpp"
#include "geometry.hpp"
#include "grid.hpp"

namespace petgamma {

struct ReconProblem {
    PartitionLevel time;
    int M = 0;
    std::vector<double> counts;  // N x M x M, time-major then (a-bin, b-bin)
    double q = 1.0;
    double u = 1.0;
    double beta = 0.0;
    double ps = 0.2;
    double pd = 0.7;

    int N() const { return static_cast<int>(time.size()); }
    double data_mass() const {
        double s = 0.0;
        for (double c : counts) s += c;
        return s / q;
    }
    void validate() const {
        if (M <= 0) throw ConfigError("problem.M: must be positive");
        if (counts.size() != static_cast<std::size_t>(N()) * M * M)
            throw ConfigError("problem.counts: size does not match N x M x M");
        for (double c : counts)
            if (!(c >= 0.0)) throw ConfigError("problem.counts: negative entry");
        if (!(q > 0.0)) throw ConfigError("problem.q: must be positive");
        if (!(u > 0.0)) throw ConfigError("problem.u: must be positive");
        if (!(beta >= 0.0)) throw ConfigError("problem.beta: must be nonnegative");
        if (!(ps > 0.0)) throw ConfigError("problem.ps: must be positive");
        if (!(pd >= 0.0)) throw ConfigError("problem.pd: must be nonnegative");
    }
};

// Binned forward operator B^u restricted to densities supported on the D cells
// of a fixed spacetime grid, stored as a sparse cell -> pair-bin matrix.
class BinnedSystem {
public:
    BinnedSystem(const GeometryConfig& geom, const SpatialGrid& grid, int nt, const PartitionLevel& time, int M,
                 int n_ang = 512)
        : geom_(geom), grid_(grid), nt_(nt), time_(time), M_(M), faces_(make_faces(grid)) {
        DetectionModel model(geom, grid, M, n_ang);
        cells_ = grid.domain_cells();
        row_.push_back(0);
        SpatialDensity unit(grid);
        for (std::size_t c : cells_) {
            unit.v[c] = 1.0;
            auto pairs = model.forward_detect_pairs(unit);
            unit.v[c] = 0.0;
            for (std::size_t b = 0; b < pairs.size(); ++b)
                if (pairs[b] != 0.0) {
                    bin_.push_back(static_cast<std::uint32_t>(b));
                    w_.push_back(pairs[b]);
                }
            row_.push_back(bin_.size());
        }
        SpacetimeDensity shape(grid, geom.T_horizon, nt);
        W_ = slice_time_weights(shape, time);
        arc_ = model.arc_length();
    }

    const GeometryConfig& geometry() const { return geom_; }
    const SpatialGrid& grid() const { return grid_; }
    int nt() const { return nt_; }
    const PartitionLevel& time() const { return time_; }
    int N() const { return static_cast<int>(time_.size()); }
    int M() const { return M_; }
    const FaceSet& faces() const { return faces_; }
    const std::vector<std::size_t>& cells() const { return cells_; }
    double arc_length() const { return arc_; }
    double bin_measure(int i) const { return time_.length(i) * arc_ * arc_; }
    const std::vector<std::vector<double>>& time_weights() const { return W_; }

    // Largest detected pair-bin mass per unit cell value.
    double max_entry() const {
        double m = 0.0;
        for (double x : w_) m = std::max(m, x);
        return m;
    }

    // Pair-bin masses of one spatial slice, detection part only.
    std::vector<double> detect(const SpatialDensity& s) const {
        std::vector<double> out(static_cast<std::size_t>(M_) * M_, 0.0);
        for (std::size_t c = 0; c < cells_.size(); ++c) {
            double v = s.v[cells_[c]];
            if (v == 0.0) continue;
            for (std::size_t e = row_[c]; e < row_[c + 1]; ++e) out[bin_[e]] += v * w_[e];
        }
        return out;
    }

    // Densities of B^u rho with respect to nu, N x M x M.
    std::vector<double> forward(const SpacetimeDensity& rho, double u, double ps, double pd) const {
        const std::size_t MM = static_cast<std::size_t>(M_) * M_;
        std::vector<double> out(N() * MM, 0.0);
        double P = geom_.perimeter();
        double sc = u * ps * arc_ * arc_ / (P * P);
        for (int k = 0; k <= nt_; ++k) {
            double mass = rho.slices[k].mass();
            std::vector<double> d;
            if (pd != 0.0) d = detect(rho.slices[k]);
            for (int i = 0; i < N(); ++i) {
                double w = W_[i][k];
                if (w == 0.0) continue;
                double* o = out.data() + i * MM;
                double s = w * sc * mass;
                if (d.empty())
                    for (std::size_t b = 0; b < MM; ++b) o[b] += s;
                else
                    for (std::size_t b = 0; b < MM; ++b) o[b] += s + w * pd * d[b];
            }
        }
        for (int i = 0; i < N(); ++i) {
            double nu = bin_measure(i);
            for (std::size_t b = 0; b < MM; ++b) out[i * MM + b] /= nu;
        }
        return out;
    }

    // grad += d/d(cell values) of sum_b y_b B_b(rho).
    void add_adjoint(const std::vector<double>& y, double u, double ps, double pd, SpacetimeDensity& grad) const {
        const std::size_t MM = static_cast<std::size_t>(M_) * M_;
        double P = geom_.perimeter();
        double sc = u * ps * arc_ * arc_ / (P * P) * grid_.cell_area();
        std::vector<double> z(MM);
        for (int k = 0; k <= nt_; ++k) {
            std::fill(z.begin(), z.end(), 0.0);
            bool any = false;
            for (int i = 0; i < N(); ++i) {
                double w = W_[i][k];
                if (w == 0.0) continue;
                any = true;
                w /= bin_measure(i);
                const double* yi = y.data() + i * MM;
                for (std::size_t b = 0; b < MM; ++b) z[b] += w * yi[b];
            }
            if (!any) continue;
            double Z = std::accumulate(z.begin(), z.end(), 0.0);
            auto& gv = grad.slices[k].v;
            for (std::size_t c = 0; c < cells_.size(); ++c) {
                double acc = 0.0;
                for (std::size_t e = row_[c]; e < row_[c + 1]; ++e) acc += w_[e] * z[bin_[e]];
                gv[cells_[c]] += sc * Z + pd * acc;
            }
        }
    }

private:
    GeometryConfig geom_;
    SpatialGrid grid_;
    int nt_;
    PartitionLevel time_;
    int M_;
    FaceSet faces_;
    std::vector<std::size_t> cells_;
    std::vector<std::size_t> row_;
    std::vector<std::uint32_t> bin_;
    std::vector<double> w_;
    std::vector<std::vector<double>> W_;
    double arc_ = 0.0;
};

struct EnergyBreakdown {
    double mass_term = 0.0;
    double data_term = 0.0;
    double reg_term = 0.0;
    double total = 0.0;
};

namespace detail {

inline bool nonnegative_on_domain(const SpacetimeDensity& rho) {
    for (const auto& s : rho.slices)
        for (std::size_t c = 0; c < s.v.size(); ++c) {
            if (s.v[c] < 0.0) return false;
            if (s.v[c] != 0.0 && !rho.grid.in_domain(c)) return false;
        }
    return true;
}

inline EnergyBreakdown infinite_energy() {
    const double inf = std::numeric_limits<double>::infinity();
    return {inf, inf, inf, inf};
}

}  // namespace detail

// Discrete MAP energy; when grad is non-null it receives the gradient with
// respect to the cell values (zero outside D).
inline EnergyBreakdown energy_and_gradient(const SpacetimeDensity& rho, const ReconProblem& p, const BinnedSystem& sys,
                                           SpacetimeDensity* grad = nullptr, MinMomentumResult* flow = nullptr) {
    const double inf = std::numeric_limits<double>::infinity();
    if (!detail::nonnegative_on_domain(rho) || !rho.in_Mc(1e-9)) return detail::infinite_energy();
    EnergyBreakdown e;
    double total_mass = rho.total_mass();
    e.mass_term = (p.ps + p.pd) * total_mass;
    auto B = sys.forward(rho, p.u, p.ps, p.pd);
    std::vector<double> y;
    if (grad) y.assign(B.size(), 0.0);
    double data = 0.0;
    for (std::size_t b = 0; b < B.size(); ++b) {
        if (p.counts[b] == 0.0) continue;
        double w = p.counts[b] / p.q;
        data -= w * std::log(std::max(B[b], 1e-300));
        if (grad) y[b] = -w / std::max(B[b], 1e-300);
    }
    e.data_term = data;
    if (grad) {
        *grad = SpacetimeDensity(rho.grid, rho.T, rho.nt());
        double area = rho.grid.cell_area();
        for (int k = 0; k <= rho.nt(); ++k) {
            double mg = (p.ps + p.pd) * rho.time_weight(k) * area;
            for (std::size_t c : sys.cells()) grad->slices[k].v[c] = mg;
        }
        sys.add_adjoint(y, p.u, p.ps, p.pd, *grad);
    }
    if (p.beta > 0.0) {
        auto mm = min_momentum(rho, sys.faces());
        if (!std::isfinite(mm.S.value)) return detail::infinite_energy();
        e.reg_term = p.beta * mm.S.value;
        if (grad) {
            // d S / d rho from the envelope theorem: the face term -|m / rho_bar|^2
            // is shared by the four adjacent nodes, the potential enters through b.
            const auto& f = sys.faces();
            double dt = rho.dt(), area = rho.grid.cell_area();
            std::vector<double> gsq(rho.grid.size());
            for (int k = 0; k < rho.nt(); ++k) {
                std::fill(gsq.begin(), gsq.end(), 0.0);
                auto acc = [&](const std::vector<std::array<std::size_t, 2>>& faces, const std::vector<double>& m) {
                    for (std::size_t e2 = 0; e2 < faces.size(); ++e2) {
                        if (m[e2] == 0.0) continue;
                        double r = face_density(rho, k, faces[e2]);
                        double v = m[e2] / r;
                        gsq[faces[e2][0]] += v * v;
                        gsq[faces[e2][1]] += v * v;
                    }
                };
                acc(f.x, mm.eta.mx[k]);
                acc(f.y, mm.eta.my[k]);
                for (std::size_t c : sys.cells()) {
                    double common = -0.25 * gsq[c];
                    double pot = 2.0 * mm.phi[k][c] / dt;
                    grad->slices[k + 1].v[c] += p.beta * dt * area * (common - pot);
                    grad->slices[k].v[c] += p.beta * dt * area * (common + pot);
                }
            }
        }
        if (flow) *flow = std::move(mm);
    } else if (flow) {
        flow->eta = zero_momentum(rho, sys.faces());
    }
    e.total = e.mass_term + e.data_term + e.reg_term;
    if (std::isnan(e.total)) e.total = inf;
    return e;
}

inline EnergyBreakdown energy_discrete(const SpacetimeDensity& rho, const ReconProblem& p, const BinnedSystem& sys) {
    return energy_and_gradient(rho, p, sys);
}

// Euclidean projection of the D-cell values onto {rho >= 0, all slice sums equal}.
// For a common sum S each slice is a simplex projection with threshold
// theta_k(S); the optimal S solves sum_k theta_k(S) = 0.
inline void project_equal_mass(SpacetimeDensity& rho, const std::vector<std::size_t>& cells) {
    const int ns = rho.nt() + 1;
    const std::size_t n = cells.size();
    std::vector<std::vector<double>> z(ns), cum(ns);
    for (int k = 0; k < ns; ++k) {
        z[k].reserve(n);
        for (std::size_t c : cells) z[k].push_back(rho.slices[k].v[c]);
        std::sort(z[k].begin(), z[k].end(), std::greater<>());
        cum[k].resize(n);
        std::partial_sum(z[k].begin(), z[k].end(), cum[k].begin());
    }
    // Threshold with sum max(z - theta, 0) = S for S > 0; j is the active count.
    auto theta = [&](int k, double S, std::size_t& j) {
        const auto& zk = z[k];
        const auto& ck = cum[k];
        j = 1;
        double th = zk[0] - S;
        for (std::size_t i = 1; i < n; ++i) {
            double t = (ck[i] - S) / static_cast<double>(i + 1);
            if (zk[i] <= t) break;
            j = i + 1;
            th = t;
        }
        return th;
    };
    auto total_theta = [&](double S) {
        double s = 0.0;
        std::size_t j;
        for (int k = 0; k < ns; ++k) s += theta(k, S, j);
        return s;
    };
    double hi = 0.0;
    for (int k = 0; k < ns; ++k) {
        double pos = 0.0;
        for (double v : z[k]) pos += std::max(v, 0.0);
        hi = std::max(hi, pos);
    }
    double S = 0.0;
    if (n > 0 && hi > 0.0 && total_theta(0.0) > 0.0) {
        double lo = 0.0;
        for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
            double mid = 0.5 * (lo + hi);
            if (total_theta(mid) > 0.0)
                lo = mid;
            else
                hi = mid;
        }
        S = 0.5 * (lo + hi);
        // Exact root for the active sets found by bisection.
        double num = 0.0, den = 0.0;
        for (int k = 0; k < ns; ++k) {
            std::size_t j;
            theta(k, S, j);
            num += cum[k][j - 1] / static_cast<double>(j);
            den += 1.0 / static_cast<double>(j);
        }
        double exact = num / den;
        if (exact >= lo && exact <= hi) S = exact;
    }
    for (int k = 0; k < ns; ++k) {
        auto& v = rho.slices[k].v;
        double th = INFINITY;
        if (S > 0.0) {
            std::size_t j;
            th = theta(k, S, j);
        }
        std::vector<double> out(v.size(), 0.0);
        for (std::size_t c : cells) out[c] = std::max(v[c] - th, 0.0);
        v.swap(out);
    }
}

struct SolverParams {
    int max_iter = 20000;
    int window = 50;
    double rel_decrease = 1e-7;
    double alpha_min = 1e-12;
    double alpha_max = 1e12;
    double armijo = 1e-4;
    bool use_lbfgs = true;
    // Once the window rule fires, iterate on while the projected gradient is
    // above stationarity * (1 + |E|) and still shrinks by `progress` per window.
    double stationarity = 1e-4;
    double progress = 0.5;
};

struct TraceRow {
    int iter = 0;
    double total = 0.0, mass = 0.0, data = 0.0, reg = 0.0;
};

struct MapResult {
    SpacetimeDensity rho;
    Momentum eta;
    EnergyBreakdown energy;
    std::vector<TraceRow> trace;
    bool stalled = false;
    int iterations = 0;
    double projected_gradient = 0.0;
};

namespace detail {

inline double dot_cells(const SpacetimeDensity& a, const SpacetimeDensity& b, const std::vector<std::size_t>& cells) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.slices.size(); ++k)
        for (std::size_t c : cells) s += a.slices[k].v[c] * b.slices[k].v[c];
    return s;
}

// rho + t * d on the D cells, optionally clipped at zero against rounding.
inline SpacetimeDensity axpy(const SpacetimeDensity& rho, double t, const SpacetimeDensity& d,
                             const std::vector<std::size_t>& cells, bool clip) {
    SpacetimeDensity out = rho;
    for (std::size_t k = 0; k < rho.slices.size(); ++k)
        for (std::size_t c : cells) {
            double v = rho.slices[k].v[c] + t * d.slices[k].v[c];
            out.slices[k].v[c] = clip ? std::max(v, 0.0) : v;
        }
    return out;
}

}  // namespace detail

inline SpacetimeDensity uniform_initial(const ReconProblem& p, const BinnedSystem& sys) {
    SpacetimeDensity rho(sys.grid(), sys.geometry().T_horizon, sys.nt());
    double total = p.data_mass() / (p.ps + p.pd);
    double area = sys.grid().cell_area() * static_cast<double>(sys.cells().size());
    double value = total / (rho.T * area);
    for (auto& s : rho.slices)
        for (std::size_t c : sys.cells()) s.v[c] = value;
    return rho;
}

// Stationarity measure: norm of rho - P(rho - grad / (dt dA)) in L2(dt dA).
inline double projected_gradient_norm(const SpacetimeDensity& rho, const SpacetimeDensity& grad,
                                      const BinnedSystem& sys) {
    double w = rho.dt() * rho.grid.cell_area();
    SpacetimeDensity z = rho;
    for (std::size_t k = 0; k < rho.slices.size(); ++k)
        for (std::size_t c : sys.cells()) z.slices[k].v[c] -= grad.slices[k].v[c] / w;
    project_equal_mass(z, sys.cells());
    double s = 0.0;
    for (std::size_t k = 0; k < rho.slices.size(); ++k)
        for (std::size_t c : sys.cells()) {
            double d = z.slices[k].v[c] - rho.slices[k].v[c];
            s += d * d;
        }
    return std::sqrt(s * w);
}

namespace detail {

inline bool window_converged(const std::vector<TraceRow>& trace, const SolverParams& sp) {
    if (static_cast<int>(trace.size()) <= sp.window) return false;
    double old = trace[trace.size() - 1 - sp.window].total;
    double now = trace.back().total;
    return old - now <= sp.rel_decrease * std::max(1.0, std::fabs(now));
}

// Reduced energy in the coordinates rho_k = exp(s) y_k^2 / |y_k|^2 / dA on the
// D cells: every slice has mass exp(s), and exact zeros stay reachable.
class SquaredEnergy : public ceres::FirstOrderFunction {
public:
    SquaredEnergy(const ReconProblem& p, const BinnedSystem& sys)
        : p_(p), sys_(sys), ns_(sys.nt() + 1), nc_(sys.cells().size()) {}

    int NumParameters() const override { return static_cast<int>(ns_ * nc_ + 1); }

    SpacetimeDensity decode(const double* x) const {
        SpacetimeDensity r(sys_.grid(), sys_.geometry().T_horizon, sys_.nt());
        double scale = std::exp(x[ns_ * nc_]) / sys_.grid().cell_area();
        for (std::size_t k = 0; k < ns_; ++k) {
            const double* y = x + k * nc_;
            double z = 0.0;
            for (std::size_t c = 0; c < nc_; ++c) z += y[c] * y[c];
            for (std::size_t c = 0; c < nc_; ++c) r.slices[k].v[sys_.cells()[c]] = scale * y[c] * y[c] / z;
        }
        return r;
    }

    std::vector<double> encode(const SpacetimeDensity& rho) const {
        std::vector<double> x(ns_ * nc_ + 1, 0.0);
        for (std::size_t k = 0; k < ns_; ++k)
            for (std::size_t c = 0; c < nc_; ++c) x[k * nc_ + c] = std::sqrt(std::max(rho.slices[k].v[sys_.cells()[c]], 0.0));
        x[ns_ * nc_] = std::log(rho.slices[0].mass());
        return x;
    }

    bool Evaluate(const double* x, double* cost, double* grad) const override {
        auto r = decode(x);
        SpacetimeDensity g;
        auto e = energy_and_gradient(r, p_, sys_, grad ? &g : nullptr);
        if (!std::isfinite(e.total)) return false;
        *cost = e.total;
        last_ = e;
        if (grad) {
            double mass = std::exp(x[ns_ * nc_]);
            double scale = mass / sys_.grid().cell_area();
            double total = 0.0;
            for (std::size_t k = 0; k < ns_; ++k) {
                const double* y = x + k * nc_;
                double z = 0.0;
                for (std::size_t c = 0; c < nc_; ++c) z += y[c] * y[c];
                double sgv = 0.0;
                for (std::size_t c : sys_.cells()) sgv += g.slices[k].v[c] * r.slices[k].v[c];
                total += sgv;
                double gbar = sgv / scale;
                for (std::size_t c = 0; c < nc_; ++c)
                    grad[k * nc_ + c] = 2.0 * y[c] / z * scale * (g.slices[k].v[sys_.cells()[c]] - gbar);
            }
            grad[ns_ * nc_] = total;
        }
        return true;
    }

    const EnergyBreakdown& last() const { return last_; }

private:
    const ReconProblem& p_;
    const BinnedSystem& sys_;
    std::size_t ns_, nc_;
    mutable EnergyBreakdown last_;
};

class TraceCallback : public ceres::IterationCallback {
public:
    TraceCallback(const SquaredEnergy& f, std::vector<TraceRow>& trace, const SolverParams& sp)
        : f_(f), trace_(trace), sp_(sp) {}
    ceres::CallbackReturnType operator()(const ceres::IterationSummary& s) override {
        if (s.iteration == 0 || !s.step_is_successful) return ceres::SOLVER_CONTINUE;
        const auto& e = f_.last();
        TraceRow row{static_cast<int>(trace_.size()), s.cost, e.mass_term, e.data_term, e.reg_term};
        if (e.total != s.cost) row.mass = row.data = row.reg = std::numeric_limits<double>::quiet_NaN();
        trace_.push_back(row);
        return window_converged(trace_, sp_) ? ceres::SOLVER_TERMINATE_SUCCESSFULLY : ceres::SOLVER_CONTINUE;
    }

private:
    const SquaredEnergy& f_;
    std::vector<TraceRow>& trace_;
    const SolverParams& sp_;
};

// Quasi-Newton phase; returns the number of iterations used.
inline int lbfgs_phase(const ReconProblem& p, const BinnedSystem& sys, SpacetimeDensity& x,
                       std::vector<TraceRow>& trace, const SolverParams& sp, int budget) {
    auto* fn = new SquaredEnergy(p, sys);
    auto params = fn->encode(x);
    double start;
    if (!fn->Evaluate(params.data(), &start, nullptr)) {
        delete fn;
        return 0;
    }
    {
        const auto& e = fn->last();
        trace.push_back({static_cast<int>(trace.size()), e.total, e.mass_term, e.data_term, e.reg_term});
    }
    ceres::GradientProblem problem(fn);
    ceres::GradientProblemSolver::Options opt;
    opt.max_num_iterations = budget;
    opt.max_lbfgs_rank = 20;
    opt.function_tolerance = 0.0;
    opt.gradient_tolerance = 0.0;
    opt.parameter_tolerance = 0.0;
    opt.logging_type = ceres::SILENT;
    TraceCallback cb(*fn, trace, sp);
    opt.callbacks.push_back(&cb);
    ceres::GradientProblemSolver::Summary summary;
    std::size_t before = trace.size();
    ceres::Solve(opt, problem, params.data(), &summary);
    if (summary.final_cost <= start) x = fn->decode(params.data());
    return static_cast<int>(trace.size() - before);
}

// Spectral projected gradient over {rho >= 0, equal slice masses} with a
// monotone Armijo search; returns true when the window rule fired.
inline bool spg_phase(const ReconProblem& p, const BinnedSystem& sys, SpacetimeDensity& x,
                      std::vector<TraceRow>& trace, const SolverParams& sp, int budget) {
    const auto& cells = sys.cells();
    project_equal_mass(x, cells);
    SpacetimeDensity g;
    auto e = energy_and_gradient(x, p, sys, &g);
    if (!std::isfinite(e.total)) return false;
    if (trace.empty()) trace.push_back({0, e.total, e.mass_term, e.data_term, e.reg_term});
    double gmax = 0.0, xmax = 0.0;
    for (const auto& s : g.slices)
        for (std::size_t c : cells) gmax = std::max(gmax, std::fabs(s.v[c]));
    for (const auto& s : x.slices)
        for (std::size_t c : cells) xmax = std::max(xmax, s.v[c]);
    double alpha = gmax > 0.0 ? std::clamp(0.1 * std::max(xmax, 1e-12) / gmax, sp.alpha_min, sp.alpha_max) : 1.0;
    double last_pg = INFINITY;
    std::size_t next_check = 0;
    for (int it = 0; it < budget; ++it) {
        SpacetimeDensity trial = axpy(x, -alpha, g, cells, false);
        project_equal_mass(trial, cells);
        SpacetimeDensity d = trial;
        for (std::size_t k = 0; k < d.slices.size(); ++k)
            for (std::size_t c : cells) d.slices[k].v[c] -= x.slices[k].v[c];
        double gd = dot_cells(g, d, cells);
        if (!(gd < 0.0)) return true;
        double lambda = 1.0;
        SpacetimeDensity xn, gn;
        EnergyBreakdown en;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            xn = axpy(x, lambda, d, cells, true);
            en = energy_and_gradient(xn, p, sys, &gn);
            if (std::isfinite(en.total) && en.total <= e.total + sp.armijo * lambda * gd) {
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if (!accepted) return true;
        double ss = 0.0, sy = 0.0;
        for (std::size_t k = 0; k < x.slices.size(); ++k)
            for (std::size_t c : cells) {
                double sv = xn.slices[k].v[c] - x.slices[k].v[c];
                double yv = gn.slices[k].v[c] - g.slices[k].v[c];
                ss += sv * sv;
                sy += sv * yv;
            }
        // Without positive curvature along the step keep the accepted step length.
        if (sy > 0.0) alpha = std::clamp(ss / sy, sp.alpha_min, sp.alpha_max);
        else alpha = std::clamp(alpha * lambda, sp.alpha_min, sp.alpha_max);
        x = std::move(xn);
        g = std::move(gn);
        e = en;
        trace.push_back({static_cast<int>(trace.size()), e.total, e.mass_term, e.data_term, e.reg_term});
        if (trace.size() >= next_check && window_converged(trace, sp)) {
            double pg = projected_gradient_norm(x, g, sys);
            if (pg <= sp.stationarity * (1.0 + std::fabs(e.total)) || pg > sp.progress * last_pg) return true;
            last_pg = pg;
            next_check = trace.size() + static_cast<std::size_t>(sp.window);
        }
    }
    return false;
}

}  // namespace detail

// Minimizes the reduced energy rho -> min_eta E(rho, eta); the momentum is
// eliminated exactly by the elliptic solve. An L-BFGS phase in squared
// coordinates runs first, then projected gradient steps in rho. Accepted
// energies never increase.
inline MapResult minimize_map(const ReconProblem& p, const BinnedSystem& sys, const SpacetimeDensity* init = nullptr,
                              const SolverParams& sp = {}) {
    p.validate();
    MapResult res;
    SpacetimeDensity x = init ? *init : uniform_initial(p, sys);
    project_equal_mass(x, sys.cells());
    if (!std::isfinite(energy_discrete(x, p, sys).total)) x = uniform_initial(p, sys);
    int used = 0;
    if (sp.use_lbfgs) used = detail::lbfgs_phase(p, sys, x, res.trace, sp, sp.max_iter);
    bool converged = detail::spg_phase(p, sys, x, res.trace, sp, std::max(sp.max_iter - used, 0));
    res.iterations = static_cast<int>(res.trace.size()) - 1;
    res.stalled = !converged;
    MinMomentumResult flow;
    SpacetimeDensity g;
    res.energy = energy_and_gradient(x, p, sys, &g, &flow);
    res.eta = std::move(flow.eta);
    res.projected_gradient = projected_gradient_norm(x, g, sys);
    res.rho = std::move(x);
    return res;
}

struct LimitSetup {
    GeometryConfig geom;
    LimitCase which = LimitCase::D;
    PartitionLevel time;  // time bins for cases A and C
    int M = 32;           // detector bins for A and B; quadrature base otherwise
    double u = 1.0;
    double beta = 0.0;
    double ps = 0.2;
    double pd = 0.7;
    int quad_a = 2;  // angular nodes per detector bin and coordinate
    int quad_t = 3;  // Gauss nodes per slice interval in the pointwise-time cases
};

namespace detail {

// Pointwise detection densities g P[G rho_k] at the angular nodes, per slice.
inline std::vector<std::vector<double>> node_sinograms(const SpacetimeDensity& rho, const GeometryConfig& geom,
                                                       const GTable& g, int na) {
    PositronKernel kernel(geom);
    auto st = make_stencil(rho.grid, kernel.radius);
    std::vector<std::vector<double>> out(rho.slices.size(), std::vector<double>(static_cast<std::size_t>(na) * na, 0.0));
    for (std::size_t k = 0; k < rho.slices.size(); ++k) {
        auto blurred = apply_stencil(rho.slices[k], st);
        for (int p = 0; p < na; ++p)
            for (int q = 0; q < na; ++q) {
                if (p == q) continue;
                double a = kTwoPi * (p + 0.5) / na, b = kTwoPi * (q + 0.5) / na;
                out[k][static_cast<std::size_t>(p) * na + q] = detection_density(blurred, a, b, g);
            }
    }
    return out;
}

}  // namespace detail

// Limit energy by quadrature over (t, a, b). The mass term is the quadrature
// mass of A rho, so that the Gibbs inequality holds exactly for the discrete sums.
inline EnergyBreakdown energy_limit(const SpacetimeDensity& rho, const SpacetimeDensity& rho_dagger,
                                    const LimitSetup& s, const GTable& g) {
    if (!detail::nonnegative_on_domain(rho) || !rho.in_Mc(1e-9)) return detail::infinite_energy();
    const int na = s.M * s.quad_a;
    const std::size_t nn = static_cast<std::size_t>(na) * na;
    const double P = s.geom.perimeter();
    const double dnode = (s.geom.R_scan * kTwoPi / na) * (s.geom.R_scan * kTwoPi / na);
    auto sr = detail::node_sinograms(rho, s.geom, g, na);
    auto sd = detail::node_sinograms(rho_dagger, s.geom, g, na);
    const int ns = static_cast<int>(rho.slices.size());
    std::vector<double> mr(ns), md(ns);
    for (int k = 0; k < ns; ++k) {
        mr[k] = rho.slices[k].mass();
        md[k] = rho_dagger.slices[k].mass();
    }
    auto dens = [&](const std::vector<std::vector<double>>& sino, const std::vector<double>& m, double u, int k,
                    std::size_t node) { return u * s.ps * m[k] / (P * P) + s.pd * sino[k][node]; };

    EnergyBreakdown e;
    double mass = 0.0;
    for (int k = 0; k < ns; ++k) {
        double acc = 0.0;
        for (std::size_t n = 0; n < nn; ++n) acc += dens(sr, mr, 1.0, k, n);
        mass += rho.time_weight(k) * acc * dnode;
    }
    e.mass_term = mass;

    const bool time_binned = s.which == LimitCase::A || s.which == LimitCase::C;
    const bool det_binned = s.which == LimitCase::A || s.which == LimitCase::B;
    // Time stages: either time bins with hat-function weights or Gauss nodes.
    struct Stage {
        std::vector<double> wr;  // slice weights of the operator density at this stage
        std::vector<double> wd;  // slice weights of the data measure (already times dt)
    };
    std::vector<Stage> stages;
    if (time_binned) {
        auto W = slice_time_weights(rho, s.time);
        for (std::size_t i = 0; i < s.time.size(); ++i) {
            Stage st;
            st.wr = W[i];
            for (double& w : st.wr) w /= s.time.length(i);
            st.wd = W[i];
            stages.push_back(std::move(st));
        }
    } else {
        static const double gx3[3] = {0.1127016653792583, 0.5, 0.8872983346207417};
        static const double gw3[3] = {5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0};
        int nq = std::clamp(s.quad_t, 1, 3);
        std::vector<double> xs, ws;
        if (nq == 3) {
            xs.assign(gx3, gx3 + 3);
            ws.assign(gw3, gw3 + 3);
        } else {
            for (int r = 0; r < nq; ++r) {
                xs.push_back((r + 0.5) / nq);
                ws.push_back(1.0 / nq);
            }
        }
        for (int k = 0; k + 1 < ns; ++k)
            for (std::size_t r = 0; r < xs.size(); ++r) {
                Stage st;
                st.wr.assign(ns, 0.0);
                st.wr[k] = 1.0 - xs[r];
                st.wr[k + 1] = xs[r];
                st.wd = st.wr;
                for (double& w : st.wd) w *= ws[r] * rho.dt();
                stages.push_back(std::move(st));
            }
    }
    double data = 0.0;
    std::vector<double> fr(nn), fd(nn);
    for (const auto& st : stages) {
        for (std::size_t n = 0; n < nn; ++n) {
            double a = 0.0, b = 0.0;
            for (int k = 0; k < ns; ++k) {
                if (st.wr[k] != 0.0) a += st.wr[k] * dens(sr, mr, s.u, k, n);
                if (st.wd[k] != 0.0) b += st.wd[k] * dens(sd, md, 1.0, k, n);
            }
            fr[n] = a;
            fd[n] = b * dnode;
        }
        if (det_binned) {
            const int qa = s.quad_a;
            for (int j = 0; j < s.M; ++j)
                for (int l = 0; l < s.M; ++l) {
                    double avg = 0.0, wsum = 0.0;
                    for (int p = j * qa; p < (j + 1) * qa; ++p)
                        for (int q = l * qa; q < (l + 1) * qa; ++q) {
                            std::size_t n = static_cast<std::size_t>(p) * na + q;
                            avg += fr[n];
                            wsum += fd[n];
                        }
                    avg /= qa * qa;
                    if (wsum != 0.0) data -= wsum * std::log(std::max(avg, 1e-300));
                }
        } else {
            for (std::size_t n = 0; n < nn; ++n)
                if (fd[n] != 0.0) data -= fd[n] * std::log(std::max(fr[n], 1e-300));
        }
    }
    e.data_term = data;
    if (s.beta > 0.0) {
        auto mm = min_momentum(rho, make_faces(rho.grid));
        if (!std::isfinite(mm.S.value)) return detail::infinite_energy();
        e.reg_term = s.beta * mm.S.value;
    }
    e.total = e.mass_term + e.data_term + e.reg_term;
    return e;
}

// Smallest singular value of lambda -> binned detection densities, as a map
// from L2(D) to L2(nu) over the detector pairs of one time instant.
inline double injectivity_smin(const GeometryConfig& geom, int grid_n, int M, int n_ang = 512) {
    SpatialGrid grid(geom, grid_n);
    DetectionModel model(geom, grid, M, n_ang);
    auto cells = grid.domain_cells();
    double len = model.arc_length();
    double scale = 1.0 / (len * std::sqrt(grid.cell_area()));
    Eigen::MatrixXd K(static_cast<Eigen::Index>(M) * M, static_cast<Eigen::Index>(cells.size()));
    SpatialDensity unit(grid);
    for (std::size_t j = 0; j < cells.size(); ++j) {
        unit.v[cells[j]] = 1.0;
        auto pairs = model.forward_detect_pairs(unit);
        unit.v[cells[j]] = 0.0;
        for (std::size_t b = 0; b < pairs.size(); ++b) K(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(j)) = pairs[b] * scale;
    }
    Eigen::MatrixXd G = K.transpose() * K;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G, Eigen::EigenvaluesOnly);
    return std::sqrt(std::max(es.eigenvalues()(0), 0.0));
}

// Constant C with (ps+pd)|rho| >= |rho|/C and B^u rho <= C |rho| on M_c.
inline double scatter_floor_constant(const ReconProblem& p, const BinnedSystem& sys) {
    const auto& geom = sys.geometry();
    double P = geom.perimeter();
    double len2 = sys.arc_length() * sys.arc_length();
    double upper = (p.u * p.ps / (P * P) + p.pd * sys.max_entry() / (sys.grid().cell_area() * len2)) / geom.T_horizon;
    return std::max(1.0 / (p.ps + p.pd), upper);
}

// kappa with E(rho) >= |rho|/kappa - kappa from
// E >= |rho|/(2C) - 2 C^2 |E/q|^2; without data E >= |rho|/C.
inline double equicoercivity_bound(const ReconProblem& p, const BinnedSystem& sys) {
    double C = scatter_floor_constant(p, sys);
    double m = p.data_mass();
    if (m == 0.0) return C;
    return std::max(2.0 * C, 2.0 * C * C * m * m);
}

}  // namespace petgamma
