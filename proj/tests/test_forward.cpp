#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "petgamma/forward.hpp"

using namespace petgamma;

namespace {

const double pi = std::numbers::pi;

// Density of the ordered pair (a, b) of x uniform on a disk inside the scanner
// and v uniform, per unit chord length and nu = R^2 da db.
double analytic_g(double a, double b, double R) { return std::fabs(std::sin(0.5 * (b - a))) / (4.0 * pi * R); }

SpatialDensity random_domain_density(const SpatialGrid& g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SpatialDensity d(g);
    for (auto c : g.domain_cells()) d.v[c] = u(rng);
    return d;
}

}  // namespace

TEST(Kernel, UnitIntegralAndSupport) {
    PositronKernel k(0.15);
    EXPECT_EQ(k(0.15), 0.0);
    EXPECT_GT(k(0.149), 0.0);
    const int n = 4000;
    double s = 0.0, dr = 0.15 / n;
    for (int i = 0; i < n; ++i) {
        double r = (i + 0.5) * dr;
        s += 2 * pi * r * k(r) * dr;
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(Convolve, ZeroMassAndSymmetry) {
    GeometryConfig geom;
    SpatialGrid grid(geom, 32);
    PositronKernel kernel(geom);
    SpatialDensity zero(grid);
    EXPECT_EQ(positron_convolve(zero, kernel).mass(), 0.0);
    auto blob = bump_blob(grid, {0.1, 0.05}, 0.2, 1.0);
    auto cb = positron_convolve(blob, kernel);
    EXPECT_NEAR(cb.mass(), 1.0, 1e-12);
    SpatialDensity cell(grid);
    cell.v[grid.index(16, 16)] = 1.0;
    auto cc = positron_convolve(cell, kernel);
    for (int d = 1; d < 4; ++d) {
        EXPECT_NEAR(cc.v[grid.index(16 + d, 16)], cc.v[grid.index(16 - d, 16)], 1e-15);
        EXPECT_NEAR(cc.v[grid.index(16 + d, 16)], cc.v[grid.index(16, 16 + d)], 1e-15);
    }
    for (std::size_t c = 0; c < grid.size(); ++c) {
        if (cb.v[c] > 0.0) {
            EXPECT_LE(norm(grid.center(c)), geom.R_blur() + 1e-12);
        }
    }
}

TEST(Convolve, RejectsMassOutsideDomain) {
    GeometryConfig geom;
    SpatialGrid grid(geom, 16);
    DetectionModel model(geom, grid, 8, 64);
    SpatialDensity bad(grid);
    bad.v[0] = 1.0;
    EXPECT_THROW(model.forward_detect_pairs(bad), SupportViolation);
}

TEST(XRay, DiskChords) {
    GeometryConfig geom;
    SpatialGrid fine(geom, 128);
    SpatialDensity disk(fine);
    for (std::size_t c = 0; c < fine.size(); ++c) disk.v[c] = norm(fine.center(c)) <= 0.5 ? 1.0 : 0.0;
    for (double s : {0.0, 0.2, 0.4}) {
        double chord = xray_transform(disk, {0, 1}, {s, 0});
        EXPECT_NEAR(chord, 2.0 * std::sqrt(0.25 - s * s), 0.02) << "s = " << s;
    }
    EXPECT_EQ(xray_transform(disk, {1, 0}, {0, 0.95}), 0.0);
}

TEST(Detect, MassRotationAndZero) {
    GeometryConfig geom;
    SpatialGrid grid(geom, 32);
    DetectionModel model(geom, grid, 16, 256);
    SpatialDensity zero(grid);
    for (double v : model.forward_detect_pairs(zero)) EXPECT_EQ(v, 0.0);
    auto centred = bump_blob(grid, {0, 0}, 0.3, 1.0);
    auto pc = model.forward_detect_pairs(centred);
    double sum = 0.0, ref = 0.0, rot = 0.0;
    for (int j = 0; j < 16; ++j)
        for (int k = 0; k < 16; ++k) {
            double v = pc[j * 16 + k];
            sum += v;
            ref = std::max(ref, v);
            rot = std::max(rot, std::fabs(v - pc[((j + 4) % 16) * 16 + (k + 4) % 16]));
            EXPECT_NEAR(v, pc[k * 16 + j], 1e-12);
        }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    EXPECT_LE(rot, 0.01 * ref);
}

// <A lambda, y> = <lambda, A^* y> for random lambda and y.
TEST(Detect, AdjointIdentity) {
    GeometryConfig geom;
    SpatialGrid grid(geom, 24);
    DetectionModel model(geom, grid, 12, 128);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n01;
    for (int trial = 0; trial < 3; ++trial) {
        auto lam = random_domain_density(grid, 10 + trial);
        std::vector<double> y(144);
        for (double& v : y) v = n01(rng);
        auto Ax = model.forward_detect_pairs(lam);
        auto Aty = model.adjoint(y);
        double lhs = 0.0, rhs = 0.0;
        for (std::size_t b = 0; b < y.size(); ++b) lhs += Ax[b] * y[b];
        for (std::size_t c = 0; c < grid.size(); ++c) rhs += lam.v[c] * Aty[c];
        EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::fabs(lhs)));
    }
}

// Bins with few Monte-Carlo samples are noisy, so the bound is on the median
// and mean ratio, with a loose cap on the worst bin.
TEST(GTable, MatchesAnalyticDensity) {
    GeometryConfig geom;
    auto g = estimate_g(geom, 32, 4'000'000, 5);
    std::vector<double> err;
    double ratio = 0.0;
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) {
            double a = (i + 0.5) * 2 * pi / 32, b = (j + 0.5) * 2 * pi / 32;
            if (!g.covered[i * 32 + j] || std::fabs(std::sin(0.5 * (b - a))) < 0.5) continue;
            double r = g.at(i, j) / analytic_g(a, b, geom.R_scan);
            err.push_back(std::fabs(r - 1.0));
            ratio += r;
        }
    ASSERT_GT(err.size(), 300u);
    std::sort(err.begin(), err.end());
    EXPECT_LT(err[err.size() / 2], 0.015);
    EXPECT_NEAR(ratio / static_cast<double>(err.size()), 1.0, 0.01);
    EXPECT_LT(err.back(), 0.15);
    EXPECT_NEAR(g(0.3, 2.0), g(2.0, 0.3), 1e-12);
}

TEST(GTable, CacheRoundTripAndCorruption) {
    GeometryConfig geom;
    auto dir = std::filesystem::temp_directory_path() / "petgamma_test_gcache";
    std::filesystem::remove_all(dir);
    bool regen = false;
    auto g1 = load_or_estimate_g(dir, geom, 8, 20000, 1, &regen);
    EXPECT_TRUE(regen);
    auto g2 = load_or_estimate_g(dir, geom, 8, 20000, 1, &regen);
    EXPECT_FALSE(regen);
    EXPECT_EQ(g1.values, g2.values);
    {
        std::ofstream f(gtable_cache_path(dir, geom, 8, 20000, 1), std::ios::binary | std::ios::trunc);
        f << "junk";
    }
    auto g3 = load_or_estimate_g(dir, geom, 8, 20000, 1, &regen);
    EXPECT_TRUE(regen);
    EXPECT_EQ(g1.values, g3.values);
    GeometryConfig other = geom;
    other.R_dom = 0.6;
    load_or_estimate_g(dir, other, 8, 20000, 1, &regen);
    EXPECT_TRUE(regen);
    std::filesystem::remove_all(dir);
}

TEST(TimeWeights, RowsAndColumns) {
    GeometryConfig geom;
    SpatialGrid grid(geom, 8);
    SpacetimeDensity rho(grid, 1.0, 6);
    PartitionLevel time{{0.0, 0.1, 0.45, 1.0}};
    auto W = slice_time_weights(rho, time);
    for (std::size_t i = 0; i < time.size(); ++i) {
        double s = 0.0;
        for (double w : W[i]) s += w;
        EXPECT_NEAR(s, time.length(i), 1e-14);
    }
    for (int k = 0; k <= 6; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < time.size(); ++i) s += W[i][k];
        EXPECT_NEAR(s, rho.time_weight(k), 1e-14);
    }
}

TEST(Binned, ZeroAndTotalMass) {
    GeometryConfig geom;
    SpatialGrid grid(geom, 24);
    DetectionModel model(geom, grid, 12, 256);
    auto time = PartitionLevel::uniform(0.0, 1.0, 3);
    SpacetimeDensity rz(grid, 1.0, 4);
    EXPECT_EQ(binned_forward(rz, model, time, 1.0, 0.2, 0.7).total_mass(), 0.0);
    SpacetimeDensity rho(grid, 1.0, 4);
    for (int k = 0; k <= 4; ++k) rho.slices[k] = bump_blob(grid, {-0.2 + 0.1 * k, 0.0}, 0.2, 2.0);
    const double u = 1.5, ps = 0.2, pd = 0.7;
    auto B = binned_forward(rho, model, time, u, ps, pd);
    EXPECT_NEAR(B.total_mass(), (u * ps + pd) * rho.total_mass(), 1e-9);
    auto floor = scatter_floor(rho.total_mass(), geom, u, ps);
    for (double v : B.values) EXPECT_GE(v, floor * (1.0 - 1e-12));
}

TEST(Binned, LinearInRho) {
    GeometryConfig geom;
    SpatialGrid grid(geom, 16);
    DetectionModel model(geom, grid, 8, 128);
    auto time = PartitionLevel::uniform(0.0, 1.0, 2);
    SpacetimeDensity a(grid, 1.0, 2), b(grid, 1.0, 2), ab(grid, 1.0, 2);
    for (int k = 0; k <= 2; ++k) {
        a.slices[k] = random_domain_density(grid, 20 + k);
        b.slices[k] = random_domain_density(grid, 30 + k);
        for (std::size_t c = 0; c < grid.size(); ++c) ab.slices[k].v[c] = 2.0 * a.slices[k].v[c] + b.slices[k].v[c];
    }
    auto Ba = binned_forward(a, model, time, 1.0, 0.2, 0.7), Bb = binned_forward(b, model, time, 1.0, 0.2, 0.7);
    auto Bab = binned_forward(ab, model, time, 1.0, 0.2, 0.7);
    for (std::size_t i = 0; i < Bab.values.size(); ++i)
        EXPECT_NEAR(Bab.values[i], 2.0 * Ba.values[i] + Bb.values[i], 1e-12 * std::max(1.0, Bab.values[i]));
}

TEST(Refinement, SingleLevel) {
    GeometryConfig geom;
    SpatialGrid grid(geom, 16);
    auto g = estimate_g(geom, 16, 200000, 3);
    SpacetimeDensity rho(grid, 1.0, 2);
    for (auto& s : rho.slices) s = bump_blob(grid, {0.1, 0.0}, 0.25, 1.0);
    auto d = refinement_consistency(rho, geom, {{PartitionLevel::uniform(0.0, 1.0, 2), 8}}, g, 1.0, 0.2, 0.7, 128);
    ASSERT_EQ(d.size(), 1u);
    EXPECT_TRUE(std::isfinite(d[0]));
    SpatialDensity zero(grid);
    EXPECT_EQ(forward_density_point(zero, 0.3, 2.0, g, PositronKernel(geom)), 0.0);
}
