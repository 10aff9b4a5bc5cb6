#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "forward.hpp"
#include "geometry.hpp"
#include "grid.hpp"
#include "report.hpp"
#include "rng.hpp"

namespace petgamma {

struct Event {
    double t = 0.0;
    double a = 0.0;
    double b = 0.0;
};

// Samples the Poisson process with intensity q A rho: a Poisson number of
// events, each an annihilation at a point of rho_t displaced by the positron
// kernel and emitted in a uniform direction, or a uniform scatter pair.
inline std::vector<Event> simulate_listmode(const SpacetimeDensity& rho, const GeometryConfig& geom, double q,
                                            double ps, double pd, std::uint64_t seed) {
    auto rng = make_stream(seed, 0, 0x6c6d);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    const int nt = rho.nt();
    const double dt = rho.dt();
    std::vector<double> slice_mass(nt + 1), slice_cum(nt + 1);
    std::vector<std::vector<double>> cell_cum(nt + 1);
    double acc = 0.0;
    for (int k = 0; k <= nt; ++k) {
        auto& cc = cell_cum[k];
        cc.resize(rho.grid.size());
        double s = 0.0;
        for (std::size_t c = 0; c < cc.size(); ++c) cc[c] = (s += std::max(rho.slices[k].v[c], 0.0));
        slice_mass[k] = s * rho.grid.cell_area();
        acc += rho.time_weight(k) * slice_mass[k];
        slice_cum[k] = acc;
    }
    double total = acc;
    std::vector<Event> out;
    if (total <= 0.0) return out;
    std::poisson_distribution<long long> npois(q * (ps + pd) * total);
    long long n = npois(rng);
    out.reserve(static_cast<std::size_t>(n));
    double h = rho.grid.h();
    double w = 0.5 * geom.delta();
    double T = rho.T;
    for (long long e = 0; e < n; ++e) {
        // Slice j with probability proportional to its time-weighted mass, then a
        // time from the hat function of slice j: the joint law of (t, slice)
        // reproduces linear interpolation between slices.
        int j = static_cast<int>(std::lower_bound(slice_cum.begin(), slice_cum.end(), U(rng) * total) - slice_cum.begin());
        j = std::min(j, nt);
        double tri = std::fabs(U(rng) - U(rng));
        double t;
        if (j == 0)
            t = dt * tri;
        else if (j == nt)
            t = T - dt * tri;
        else
            t = rho.time(j) + dt * (U(rng) < 0.5 ? -tri : tri);
        if (t >= T) t = std::nextafter(T, 0.0);
        Event ev;
        ev.t = t;
        if (U(rng) * (ps + pd) < ps) {
            ev.a = kTwoPi * U(rng);
            ev.b = kTwoPi * U(rng);
        } else {
            const auto& cc = cell_cum[j];
            auto c = static_cast<std::size_t>(std::lower_bound(cc.begin(), cc.end(), U(rng) * cc.back()) - cc.begin());
            c = std::min(c, cc.size() - 1);
            Vec2 x = rho.grid.center(c) + Vec2{(U(rng) - 0.5) * h, (U(rng) - 0.5) * h};
            // Radial law of the (1 - r^2/w^2)^3 bump: r^2/w^2 = 1 - (1 - U)^(1/4).
            double r = w * std::sqrt(1.0 - std::pow(1.0 - U(rng), 0.25));
            double phi = kTwoPi * U(rng);
            x = x + Vec2{r * std::cos(phi), r * std::sin(phi)};
            double psi = kTwoPi * U(rng);
            auto [a, b] = chord_endpoints(x, {std::cos(psi), std::sin(psi)}, geom.R_scan);
            ev.a = a;
            ev.b = b;
        }
        out.push_back(ev);
    }
    return out;
}

// Counts per (time bin, a-bin, b-bin), time-major.
inline std::vector<double> bin_events(const std::vector<Event>& events, const PartitionLevel& time, int M) {
    auto arcs = PartitionLevel::uniform(0.0, kTwoPi, M);
    std::vector<double> counts(time.size() * static_cast<std::size_t>(M) * M, 0.0);
    for (const auto& e : events) {
        auto bin = locate_bin(e.t, e.a, e.b, time, arcs);
        counts[(bin.i * M + bin.j) * static_cast<std::size_t>(M) + bin.k] += 1.0;
    }
    return counts;
}

inline void write_listmode(const std::filesystem::path& path, const std::vector<Event>& events) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write " + path.string());
    os << "t,alpha_a,alpha_b\n";
    for (const auto& e : events) os << format_double(e.t) << ',' << format_double(e.a) << ',' << format_double(e.b) << '\n';
}

inline std::vector<Event> read_listmode(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot read " + path.string());
    std::string line;
    if (!std::getline(is, line) || line != "t,alpha_a,alpha_b") throw ConfigError("listmode: bad header in " + path.string());
    std::vector<Event> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        Event e;
        char c1 = 0, c2 = 0;
        std::istringstream ss(line);
        if (!(ss >> e.t >> c1 >> e.a >> c2 >> e.b) || c1 != ',' || c2 != ',')
            throw ConfigError("listmode: malformed row '" + line + "'");
        out.push_back(e);
    }
    return out;
}

}  // namespace petgamma
