#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "errors.hpp"
#include "geometry.hpp"
#include "grid.hpp"
#include "rng.hpp"

namespace petgamma {

struct PositronKernel {
    double radius = 0.15;

    explicit PositronKernel(double r) : radius(r) {}
    explicit PositronKernel(const GeometryConfig& g) : radius(0.5 * g.delta()) {}

    double operator()(double r) const { return bump_profile(r, radius); }
    double max_value() const { return bump_profile(0.0, radius); }
};

struct Stencil {
    std::vector<int> dx, dy;
    std::vector<double> w;
};

// Kernel sampled at cell offsets and normalised to unit sum, so that discrete
// convolution preserves mass exactly. Kernels narrower than half a cell collapse
// to the identity.
inline Stencil make_stencil(const SpatialGrid& grid, double radius) {
    Stencil s;
    double h = grid.h();
    int r = static_cast<int>(std::floor(radius / h));
    double total = 0.0;
    for (int j = -r; j <= r; ++j)
        for (int i = -r; i <= r; ++i) {
            double v = bump_profile(h * std::hypot(i, j), radius);
            if (v <= 0.0) continue;
            s.dx.push_back(i);
            s.dy.push_back(j);
            s.w.push_back(v);
            total += v;
        }
    if (s.w.empty()) return {{0}, {0}, {1.0}};
    for (double& v : s.w) v /= total;
    return s;
}

inline SpatialDensity apply_stencil(const SpatialDensity& in, const Stencil& st) {
    const auto& g = in.grid;
    SpatialDensity out(g);
    for (int iy = 0; iy < g.n; ++iy)
        for (int ix = 0; ix < g.n; ++ix) {
            double val = in.v[g.index(ix, iy)];
            if (val == 0.0) continue;
            for (std::size_t s = 0; s < st.w.size(); ++s) {
                int jx = ix + st.dx[s], jy = iy + st.dy[s];
                if (jx < 0 || jy < 0 || jx >= g.n || jy >= g.n) continue;
                out.v[g.index(jx, jy)] += val * st.w[s];
            }
        }
    return out;
}

inline SpatialDensity positron_convolve(const SpatialDensity& lambda, const PositronKernel& kernel) {
    if (lambda.mass_outside_domain() > 1e-12)
        throw SupportViolation("positron_convolve: input has mass outside D");
    return apply_stencil(lambda, make_stencil(lambda.grid, kernel.radius));
}

// Bilinear interpolation of cell-centred values, zero outside the grid.
inline double sample_bilinear(const SpatialDensity& f, Vec2 p) {
    const auto& g = f.grid;
    double fx = (p.x + g.L) / g.h() - 0.5;
    double fy = (p.y + g.L) / g.h() - 0.5;
    int ix = static_cast<int>(std::floor(fx)), iy = static_cast<int>(std::floor(fy));
    double wx = fx - ix, wy = fy - iy;
    auto at = [&](int i, int j) -> double {
        if (i < 0 || j < 0 || i >= g.n || j >= g.n) return 0.0;
        return f.v[g.index(i, j)];
    };
    return (1 - wx) * (1 - wy) * at(ix, iy) + wx * (1 - wy) * at(ix + 1, iy) + (1 - wx) * wy * at(ix, iy + 1) +
           wx * wy * at(ix + 1, iy + 1);
}

// Line integral of f along {s + t theta}, composite midpoint rule with step h/2.
inline double xray_transform(const SpatialDensity& f, Vec2 theta, Vec2 s) {
    const auto& g = f.grid;
    double reach2 = 2.0 * g.L * g.L + g.h() * g.h();
    double tmax2 = reach2 - dot(s, s);
    if (tmax2 <= 0.0) return 0.0;
    double tmax = std::sqrt(tmax2);
    int steps = static_cast<int>(std::ceil(2.0 * tmax / (0.5 * g.h())));
    double dt = 2.0 * tmax / steps;
    double acc = 0.0;
    for (int i = 0; i < steps; ++i) {
        double t = -tmax + (i + 0.5) * dt;
        acc += sample_bilinear(f, s + t * theta);
    }
    return acc * dt;
}

// Direct (x, v) quadrature of A^d: every blurred-density cell sends its mass
// along n_ang equispaced directions to the ordered detector pair hit by the line.
class DetectionModel {
public:
    DetectionModel(const GeometryConfig& geom, const SpatialGrid& grid, int M, int n_ang = 512)
        : geom_(geom), grid_(grid), M_(M), n_ang_(n_ang), kernel_(geom), stencil_(make_stencil(grid, kernel_.radius)) {
        build();
    }

    int detectors() const { return M_; }
    int directions() const { return n_ang_; }
    const SpatialGrid& grid() const { return grid_; }
    const GeometryConfig& geometry() const { return geom_; }
    const PositronKernel& kernel() const { return kernel_; }
    const Stencil& stencil() const { return stencil_; }
    PartitionLevel arcs() const { return PartitionLevel::uniform(0.0, kTwoPi, M_); }
    double arc_length() const { return geom_.perimeter() / M_; }

    SpatialDensity blur(const SpatialDensity& lambda) const {
        if (lambda.mass_outside_domain() > 1e-12)
            throw SupportViolation("positron_convolve: input has mass outside D");
        return apply_stencil(lambda, stencil_);
    }

    // Ordered pair masses (row a-bin, column b-bin) of an already blurred density.
    std::vector<double> detect_blurred(const SpatialDensity& f) const {
        std::vector<double> out(static_cast<std::size_t>(M_) * M_, 0.0);
        double area = grid_.cell_area();
        for (std::size_t c = 0; c < cells_.size(); ++c) {
            double val = f.v[cells_[c]] * area;
            if (val == 0.0) continue;
            for (std::size_t e = row_[c]; e < row_[c + 1]; ++e) out[bin_[e]] += val * w_[e];
        }
        return out;
    }

    std::vector<double> forward_detect_pairs(const SpatialDensity& lambda) const { return detect_blurred(blur(lambda)); }

    // Adjoint of lambda -> forward_detect_pairs(lambda) with respect to the
    // cell-value inner product; returns the gradient of sum_b y_b * pairs_b.
    std::vector<double> adjoint(const std::vector<double>& y) const {
        std::vector<double> blurred(grid_.size(), 0.0);
        double area = grid_.cell_area();
        for (std::size_t c = 0; c < cells_.size(); ++c) {
            double acc = 0.0;
            for (std::size_t e = row_[c]; e < row_[c + 1]; ++e) acc += w_[e] * y[bin_[e]];
            blurred[cells_[c]] = acc * area;
        }
        std::vector<double> out(grid_.size(), 0.0);
        for (int iy = 0; iy < grid_.n; ++iy)
            for (int ix = 0; ix < grid_.n; ++ix) {
                double acc = 0.0;
                for (std::size_t s = 0; s < stencil_.w.size(); ++s) {
                    int jx = ix + stencil_.dx[s], jy = iy + stencil_.dy[s];
                    if (jx < 0 || jy < 0 || jx >= grid_.n || jy >= grid_.n) continue;
                    acc += stencil_.w[s] * blurred[grid_.index(jx, jy)];
                }
                out[grid_.index(ix, iy)] = acc;
            }
        return out;
    }

private:
    void build() {
        double rb = geom_.R_blur();
        auto arcs = PartitionLevel::uniform(0.0, kTwoPi, M_);
        std::vector<double> acc(static_cast<std::size_t>(M_) * M_, 0.0);
        std::vector<std::uint32_t> touched;
        std::vector<Vec2> dirs(n_ang_);
        for (int i = 0; i < n_ang_; ++i) {
            double phi = kTwoPi * (i + 0.5) / n_ang_;
            dirs[i] = {std::cos(phi), std::sin(phi)};
        }
        double wdir = 1.0 / n_ang_;
        row_.push_back(0);
        for (std::size_t c = 0; c < grid_.size(); ++c) {
            Vec2 x = grid_.center(c);
            if (norm(x) > rb) continue;
            cells_.push_back(c);
            for (const auto& v : dirs) {
                auto [a, b] = chord_endpoints(x, v, geom_.R_scan);
                auto idx = static_cast<std::uint32_t>(arcs.locate(a) * M_ + arcs.locate(b));
                if (acc[idx] == 0.0) touched.push_back(idx);
                acc[idx] += wdir;
            }
            std::sort(touched.begin(), touched.end());
            for (auto idx : touched) {
                bin_.push_back(idx);
                w_.push_back(acc[idx]);
                acc[idx] = 0.0;
            }
            touched.clear();
            row_.push_back(bin_.size());
        }
    }

    GeometryConfig geom_;
    SpatialGrid grid_;
    int M_;
    int n_ang_;
    PositronKernel kernel_;
    Stencil stencil_;
    std::vector<std::size_t> cells_;
    std::vector<std::size_t> row_;
    std::vector<std::uint32_t> bin_;
    std::vector<double> w_;
};

struct GTable {
    int resolution = 0;
    std::uint64_t n_samples = 0;
    std::uint64_t seed = 0;
    double R_scan = 1.0;
    std::vector<double> values;  // resolution x resolution, row = a-bin
    std::vector<char> covered;

    double at(int i, int j) const { return values[static_cast<std::size_t>(i) * resolution + j]; }

    // Bilinear periodic interpolation between bin centres.
    double operator()(double a, double b) const {
        double d = kTwoPi / resolution;
        double fa = wrap_angle(a) / d - 0.5, fb = wrap_angle(b) / d - 0.5;
        int ia = static_cast<int>(std::floor(fa)), ib = static_cast<int>(std::floor(fb));
        double wa = fa - ia, wb = fb - ib;
        auto m = [&](int i) { return ((i % resolution) + resolution) % resolution; };
        return (1 - wa) * (1 - wb) * at(m(ia), m(ib)) + wa * (1 - wb) * at(m(ia + 1), m(ib)) +
               (1 - wa) * wb * at(m(ia), m(ib + 1)) + wa * wb * at(m(ia + 1), m(ib + 1));
    }
};

inline double chord_length_in_disk(double a, double b, double R_scan, double r) {
    auto cp = chord_params(a, b, R_scan);
    double s2 = dot(cp.s, cp.s);
    return s2 < r * r ? 2.0 * std::sqrt(r * r - s2) : 0.0;
}

// Monte-Carlo histogram of R(x, v) for x uniform on D_{delta/2} and v uniform
// on the circle; each sample also counts its reversed pair (direction -v).
inline GTable estimate_g(const GeometryConfig& geom, int resolution, std::uint64_t n_samples, std::uint64_t seed) {
    GTable g;
    g.resolution = resolution;
    g.n_samples = n_samples;
    g.seed = seed;
    g.R_scan = geom.R_scan;
    std::size_t nb = static_cast<std::size_t>(resolution) * resolution;
    std::vector<double> hist(nb, 0.0);
    double rb = geom.R_blur();
    double dang = kTwoPi / resolution;
    auto rng = make_stream(seed, 0, 0x67746162ULL);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    std::uniform_real_distribution<double> ang(0.0, kTwoPi);
    for (std::uint64_t s = 0; s < n_samples; ++s) {
        Vec2 x;
        do {
            x = {rb * unif(rng), rb * unif(rng)};
        } while (dot(x, x) > rb * rb);
        double phi = ang(rng);
        auto [a, b] = chord_endpoints(x, {std::cos(phi), std::sin(phi)}, geom.R_scan);
        int ia = std::min(static_cast<int>(a / dang), resolution - 1);
        int ib = std::min(static_cast<int>(b / dang), resolution - 1);
        hist[static_cast<std::size_t>(ia) * resolution + ib] += 0.5;
        hist[static_cast<std::size_t>(ib) * resolution + ia] += 0.5;
    }
    // Bin integrals of the chord length through D_{delta/2} with respect to nu.
    const int sub = 8;
    double area = std::numbers::pi * rb * rb;
    double R2 = geom.R_scan * geom.R_scan;
    g.values.assign(nb, 0.0);
    g.covered.assign(nb, 0);
    for (int i = 0; i < resolution; ++i)
        for (int j = 0; j < resolution; ++j) {
            double den = 0.0;
            for (int p = 0; p < sub; ++p)
                for (int q = 0; q < sub; ++q) {
                    double a = (i + (p + 0.5) / sub) * dang;
                    double b = (j + (q + 0.5) / sub) * dang;
                    if (std::fabs(a - b) < 1e-9) continue;
                    den += chord_length_in_disk(a, b, geom.R_scan, rb);
                }
            den *= R2 * dang * dang / (sub * sub);
            std::size_t k = static_cast<std::size_t>(i) * resolution + j;
            if (den > 1e-12 && hist[k] > 0.0) {
                g.values[k] = hist[k] / static_cast<double>(n_samples) * area / den;
                g.covered[k] = 1;
            }
        }
    // Chords missing D_{delta/2} carry no data; fill them from covered
    // neighbours so that g stays positive and interpolation is smooth.
    std::vector<char> known = g.covered;
    bool pending = true;
    while (pending) {
        pending = false;
        auto next = g.values;
        auto next_known = known;
        for (int i = 0; i < resolution; ++i)
            for (int j = 0; j < resolution; ++j) {
                std::size_t k = static_cast<std::size_t>(i) * resolution + j;
                if (known[k]) continue;
                double s = 0.0;
                int c = 0;
                const int di[4] = {1, -1, 0, 0}, dj[4] = {0, 0, 1, -1};
                for (int e = 0; e < 4; ++e) {
                    int ii = (i + di[e] + resolution) % resolution, jj = (j + dj[e] + resolution) % resolution;
                    std::size_t kk = static_cast<std::size_t>(ii) * resolution + jj;
                    if (known[kk]) {
                        s += g.values[kk];
                        ++c;
                    }
                }
                if (c > 0) {
                    next[k] = s / c;
                    next_known[k] = 1;
                } else {
                    pending = true;
                }
            }
        g.values.swap(next);
        known.swap(next_known);
    }
    return g;
}

namespace detail {

inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace detail

inline std::uint64_t geometry_hash(const GeometryConfig& g) {
    double v[2] = {g.R_dom, g.R_scan};
    return detail::fnv1a(v, sizeof v);
}

inline std::filesystem::path gtable_cache_path(const std::filesystem::path& dir, const GeometryConfig& geom,
                                               int resolution, std::uint64_t n_samples, std::uint64_t seed) {
    char name[128];
    std::snprintf(name, sizeof name, "gtable_%016llx_r%d_n%llu_s%llu.bin",
                  static_cast<unsigned long long>(geometry_hash(geom)), resolution,
                  static_cast<unsigned long long>(n_samples), static_cast<unsigned long long>(seed));
    return dir / name;
}

inline constexpr char kGTableMagic[8] = {'P', 'G', 'G', 'T', 'A', 'B', '0', '1'};

inline void save_gtable(const std::filesystem::path& path, const GTable& g, std::uint64_t geom_hash) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    std::int64_t res = g.resolution;
    std::uint64_t payload = detail::fnv1a(g.values.data(), g.values.size() * sizeof(double));
    payload = detail::fnv1a(g.covered.data(), g.covered.size(), payload);
    os.write(kGTableMagic, 8);
    os.write(reinterpret_cast<const char*>(&geom_hash), 8);
    os.write(reinterpret_cast<const char*>(&res), 8);
    os.write(reinterpret_cast<const char*>(&g.n_samples), 8);
    os.write(reinterpret_cast<const char*>(&g.seed), 8);
    os.write(reinterpret_cast<const char*>(&g.R_scan), 8);
    os.write(reinterpret_cast<const char*>(g.values.data()), static_cast<std::streamsize>(g.values.size() * 8));
    os.write(g.covered.data(), static_cast<std::streamsize>(g.covered.size()));
    os.write(reinterpret_cast<const char*>(&payload), 8);
}

// Returns false when the file is missing, truncated, keyed differently or fails its checksum.
inline bool load_gtable(const std::filesystem::path& path, std::uint64_t geom_hash, int resolution,
                        std::uint64_t n_samples, std::uint64_t seed, GTable& out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return false;
    char magic[8];
    std::uint64_t gh = 0, ns = 0, sd = 0, payload = 0;
    std::int64_t res = 0;
    double R = 0.0;
    is.read(magic, 8);
    is.read(reinterpret_cast<char*>(&gh), 8);
    is.read(reinterpret_cast<char*>(&res), 8);
    is.read(reinterpret_cast<char*>(&ns), 8);
    is.read(reinterpret_cast<char*>(&sd), 8);
    is.read(reinterpret_cast<char*>(&R), 8);
    if (!is || std::memcmp(magic, kGTableMagic, 8) != 0) return false;
    if (gh != geom_hash || res != resolution || ns != n_samples || sd != seed) return false;
    GTable g;
    g.resolution = resolution;
    g.n_samples = ns;
    g.seed = sd;
    g.R_scan = R;
    std::size_t nb = static_cast<std::size_t>(resolution) * resolution;
    g.values.resize(nb);
    g.covered.resize(nb);
    is.read(reinterpret_cast<char*>(g.values.data()), static_cast<std::streamsize>(nb * 8));
    is.read(g.covered.data(), static_cast<std::streamsize>(nb));
    is.read(reinterpret_cast<char*>(&payload), 8);
    if (!is) return false;
    std::uint64_t check = detail::fnv1a(g.values.data(), nb * sizeof(double));
    check = detail::fnv1a(g.covered.data(), nb, check);
    if (check != payload) return false;
    out = std::move(g);
    return true;
}

inline GTable load_or_estimate_g(const std::filesystem::path& cache_dir, const GeometryConfig& geom, int resolution,
                                 std::uint64_t n_samples, std::uint64_t seed, bool* regenerated = nullptr) {
    auto path = gtable_cache_path(cache_dir, geom, resolution, n_samples, seed);
    GTable g;
    if (load_gtable(path, geometry_hash(geom), resolution, n_samples, seed, g)) {
        if (regenerated) *regenerated = false;
        return g;
    }
    g = estimate_g(geom, resolution, n_samples, seed);
    save_gtable(path, g, geometry_hash(geom));
    if (regenerated) *regenerated = true;
    return g;
}

// Detection density g(a,b) P[f](theta(a,b), s(a,b)) of an already blurred density f.
inline double detection_density(const SpatialDensity& blurred, double a, double b, const GTable& g) {
    auto cp = chord_params(a, b, g.R_scan);
    return g(a, b) * xray_transform(blurred, cp.theta, cp.s);
}

inline double forward_density_point(const SpatialDensity& rho_t, double a, double b, const GTable& g,
                                    const PositronKernel& kernel) {
    return detection_density(positron_convolve(rho_t, kernel), a, b, g);
}

// W[i][k] = integral over time bin i of the hat function of slice k.
inline std::vector<std::vector<double>> slice_time_weights(const SpacetimeDensity& rho, const PartitionLevel& time) {
    int nt = rho.nt();
    double dt = rho.dt();
    std::vector<std::vector<double>> W(time.size(), std::vector<double>(nt + 1, 0.0));
    for (std::size_t i = 0; i < time.size(); ++i) {
        double lo = time.edges[i], hi = time.edges[i + 1];
        for (int k = 0; k < nt; ++k) {
            double t0 = k * dt, t1 = (k + 1) * dt;
            double a = std::max(lo, t0), b = std::min(hi, t1);
            if (b <= a) continue;
            // On [t0, t1] slice k has weight (t1 - t)/dt and slice k+1 has (t - t0)/dt.
            double ia = ((t1 - a) * (t1 - a) - (t1 - b) * (t1 - b)) / (2.0 * dt);
            double ib = ((b - t0) * (b - t0) - (a - t0) * (a - t0)) / (2.0 * dt);
            W[i][k] += ia;
            W[i][k + 1] += ib;
        }
    }
    return W;
}

struct BinnedForward {
    int N = 0;
    int M = 0;
    double u = 1.0;
    double ps = 0.0;
    double pd = 0.0;
    PartitionLevel time;
    double arc_length = 0.0;
    std::vector<double> values;  // N x M x M densities with respect to nu

    double& at(int i, int j, int k) { return values[(static_cast<std::size_t>(i) * M + j) * M + k]; }
    double at(int i, int j, int k) const { return values[(static_cast<std::size_t>(i) * M + j) * M + k]; }
    double bin_measure(int i) const { return time.length(i) * arc_length * arc_length; }

    double total_mass() const {
        double s = 0.0;
        for (int i = 0; i < N; ++i) {
            double nu = bin_measure(i);
            for (int jk = 0; jk < M * M; ++jk) s += values[static_cast<std::size_t>(i) * M * M + jk] * nu;
        }
        return s;
    }
};

inline BinnedForward binned_forward(const SpacetimeDensity& rho, const DetectionModel& model,
                                    const PartitionLevel& time, double u, double ps, double pd) {
    BinnedForward out;
    out.N = static_cast<int>(time.size());
    out.M = model.detectors();
    out.u = u;
    out.ps = ps;
    out.pd = pd;
    out.time = time;
    out.arc_length = model.arc_length();
    int M = out.M;
    out.values.assign(static_cast<std::size_t>(out.N) * M * M, 0.0);
    auto W = slice_time_weights(rho, time);
    double P2 = model.geometry().perimeter() * model.geometry().perimeter();
    double len2 = out.arc_length * out.arc_length;
    std::vector<std::vector<double>> detect(rho.slices.size());
    std::vector<double> mass(rho.slices.size());
    for (std::size_t k = 0; k < rho.slices.size(); ++k) {
        mass[k] = rho.slices[k].mass();
        if (pd != 0.0 && mass[k] != 0.0) detect[k] = model.forward_detect_pairs(rho.slices[k]);
    }
    for (int i = 0; i < out.N; ++i) {
        double nu = out.bin_measure(i);
        double scatter = 0.0;
        for (std::size_t k = 0; k < rho.slices.size(); ++k) scatter += W[i][k] * mass[k];
        scatter *= u * ps * len2 / P2;
        for (int jk = 0; jk < M * M; ++jk) {
            double d = 0.0;
            for (std::size_t k = 0; k < rho.slices.size(); ++k)
                if (!detect[k].empty() && W[i][k] != 0.0) d += W[i][k] * detect[k][jk];
            out.values[static_cast<std::size_t>(i) * M * M + jk] = (scatter + pd * d) / nu;
        }
    }
    return out;
}

inline double scatter_floor(double total_mass, const GeometryConfig& geom, double u, double ps) {
    double P = geom.perimeter();
    return u * ps * total_mass / (geom.T_horizon * P * P);
}

struct RefinementLevel {
    PartitionLevel time;
    int M;
};

// L2(nu) distance between the binned operator at each level and the pointwise
// detection density dA^u rho / d nu built from the g table.
inline std::vector<double> refinement_consistency(const SpacetimeDensity& rho, const GeometryConfig& geom,
                                                  const std::vector<RefinementLevel>& levels, const GTable& g,
                                                  double u, double ps, double pd, int n_ang = 512,
                                                  int quad_t = 2, int quad_a = 3) {
    std::vector<SpatialDensity> blurred;
    std::vector<double> mass;
    PositronKernel kernel(geom);
    auto st = make_stencil(rho.grid, kernel.radius);
    for (const auto& s : rho.slices) {
        blurred.push_back(apply_stencil(s, st));
        mass.push_back(s.mass());
    }
    double P2 = geom.perimeter() * geom.perimeter();
    std::vector<double> out;
    for (const auto& lvl : levels) {
        DetectionModel model(geom, rho.grid, lvl.M, n_ang);
        auto B = binned_forward(rho, model, lvl.time, u, ps, pd);
        int M = lvl.M;
        double dang = kTwoPi / M;
        int na = M * quad_a;
        // Pointwise sinograms of every slice at the angular quadrature nodes.
        std::vector<std::vector<double>> sino(rho.slices.size(), std::vector<double>(static_cast<std::size_t>(na) * na, 0.0));
        std::vector<double> gval(static_cast<std::size_t>(na) * na, 0.0);
        for (int p = 0; p < na; ++p)
            for (int q = 0; q < na; ++q) {
                if (p == q) continue;
                double a = (p + 0.5) * dang / quad_a, b = (q + 0.5) * dang / quad_a;
                auto cp = chord_params(a, b, geom.R_scan);
                std::size_t idx = static_cast<std::size_t>(p) * na + q;
                gval[idx] = g(a, b);
                for (std::size_t k = 0; k < rho.slices.size(); ++k)
                    sino[k][idx] = xray_transform(blurred[k], cp.theta, cp.s);
            }
        double acc = 0.0;
        for (int i = 0; i < B.N; ++i) {
            double lo = lvl.time.edges[i], hi = lvl.time.edges[i + 1];
            double wq = B.bin_measure(i) / (quad_t * quad_a * quad_a);
            for (int r = 0; r < quad_t; ++r) {
                double t = lo + (r + 0.5) * (hi - lo) / quad_t;
                double ft = std::min(t / rho.dt(), static_cast<double>(rho.nt()));
                int k0 = std::min(static_cast<int>(ft), rho.nt() - 1);
                double w1 = ft - k0, w0 = 1.0 - w1;
                double scatter = u * ps * (w0 * mass[k0] + w1 * mass[k0 + 1]) / P2;
                for (int p = 0; p < na; ++p)
                    for (int q = 0; q < na; ++q) {
                        if (p == q) continue;
                        std::size_t idx = static_cast<std::size_t>(p) * na + q;
                        double f = scatter + pd * gval[idx] * (w0 * sino[k0][idx] + w1 * sino[k0 + 1][idx]);
                        double d = B.at(i, p / quad_a, q / quad_a) - f;
                        acc += d * d * wq;
                    }
            }
        }
        out.push_back(std::sqrt(acc));
    }
    return out;
}

}  // namespace petgamma
