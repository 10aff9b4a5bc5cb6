#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "petgamma/geometry.hpp"
#include "petgamma/grid.hpp"

using namespace petgamma;

namespace {
const double pi = std::numbers::pi;
}

TEST(Chord, DiameterEndpoints) {
    auto [a, b] = chord_endpoints({0, 0}, {1, 0}, 1.0);
    EXPECT_NEAR(a, pi, 1e-12);
    EXPECT_NEAR(b, 0.0, 1e-12);
}

TEST(Chord, OffsetLine) {
    auto [a, b] = chord_endpoints({0.3, 0.5}, {1, 0}, 1.0);
    auto pa = boundary_point(a, 1.0), pb = boundary_point(b, 1.0);
    EXPECT_NEAR(pa.y, 0.5, 1e-12);
    EXPECT_NEAR(pb.y, 0.5, 1e-12);
    EXPECT_NEAR(pa.x, -std::sqrt(0.75), 1e-12);
    EXPECT_NEAR(pb.x, std::sqrt(0.75), 1e-12);
}

// Random points and directions: both endpoints lie on the circle and on the line,
// ordered along v, and chord_params recovers the same line.
TEST(Chord, EndpointsAndParamsAgree) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1.0, 1.0), ang(0.0, 2 * pi);
    const double R = 1.3;
    for (int trial = 0; trial < 2000; ++trial) {
        Vec2 x{u(rng), u(rng)};
        if (norm(x) > 1.2) continue;
        double phi = ang(rng);
        Vec2 v{std::cos(phi), std::sin(phi)};
        auto [a, b] = chord_endpoints(x, v, R);
        EXPECT_GE(a, 0.0);
        EXPECT_LT(a, 2 * pi);
        auto pa = boundary_point(a, R), pb = boundary_point(b, R);
        EXPECT_NEAR(dot(pa - x, perp(v)), 0.0, 1e-9);
        EXPECT_NEAR(dot(pb - x, perp(v)), 0.0, 1e-9);
        EXPECT_LT(dot(pa - x, v), 0.0);
        EXPECT_GT(dot(pb - x, v), 0.0);
        auto cp = chord_params(a, b, R);
        EXPECT_NEAR(norm(cp.theta - v), 0.0, 1e-9);
        EXPECT_NEAR(dot(cp.s, cp.theta), 0.0, 1e-12);
        EXPECT_NEAR(dot(x - cp.s, perp(cp.theta)), 0.0, 1e-9);
    }
}

TEST(Chord, ParamsExamples) {
    auto c0 = chord_params(pi, 0.0, 1.0);
    EXPECT_NEAR(c0.theta.x, 1.0, 1e-12);
    EXPECT_NEAR(norm(c0.s), 0.0, 1e-12);
    auto c1 = chord_params(pi / 2, 3 * pi / 2, 1.0);
    EXPECT_NEAR(c1.theta.y, -1.0, 1e-12);
    EXPECT_NEAR(norm(c1.s), 0.0, 1e-12);
}

TEST(Chord, CoincidentPointsThrow) {
    EXPECT_THROW(chord_params(1.0, 1.0, 1.0), DegenerateChord);
    EXPECT_THROW(chord_params(0.0, 2 * pi, 1.0), DegenerateChord);
}

TEST(Angles, WrapRange) {
    for (double a : {-7.0, -2 * pi, -1e-18, 0.0, 3.0, 2 * pi, 13.0}) {
        double w = wrap_angle(a);
        EXPECT_GE(w, 0.0);
        EXPECT_LT(w, 2 * pi);
        EXPECT_NEAR(std::cos(w), std::cos(a), 1e-12);
    }
}

TEST(Partition, RefineOnceAndTenTimes) {
    auto one = PartitionLevel::uniform(0.0, 1.0, 1);
    auto two = dyadic_refine(one);
    ASSERT_EQ(two.size(), 2u);
    EXPECT_EQ(two.edges[1], 0.5);
    auto l = one;
    for (int i = 0; i < 10; ++i) l = dyadic_refine(l);
    ASSERT_EQ(l.size(), 1024u);
    for (std::size_t i = 0; i < l.size(); ++i) EXPECT_EQ(l.length(i), std::ldexp(1.0, -10));
}

TEST(Partition, NestingAndParents) {
    auto four = PartitionLevel::uniform(0.0, 1.0, 4);
    auto eight = dyadic_refine(four);
    EXPECT_TRUE(is_nested(eight, four));
    for (std::size_t i = 0; i < eight.size(); ++i) EXPECT_EQ(parent_index(eight, i, four), static_cast<long>(i / 2));
    EXPECT_FALSE(is_nested(PartitionLevel::uniform(0.0, 1.0, 3), PartitionLevel::uniform(0.0, 1.0, 2)));
    EXPECT_FALSE(is_nested(eight, PartitionLevel::uniform(0.0, 2.0, 4)));
}

TEST(Partition, LocateHalfOpen) {
    PartitionLevel p{{0.0, 0.1, 0.5, 0.55, 1.0}};
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 1000; ++i) {
        double x = u(rng);
        auto k = p.locate(x);
        EXPECT_LE(p.edges[k], x);
        EXPECT_LT(x, p.edges[k + 1]);
    }
    EXPECT_EQ(p.locate(0.5), 2u);
    EXPECT_EQ(p.locate(0.0), 0u);
    EXPECT_THROW(p.locate(1.0), OutOfRange);
    EXPECT_THROW(p.locate(-1e-15), OutOfRange);
    auto uni = PartitionLevel::uniform(0.0, 1.0, 10);
    for (std::size_t k = 0; k < 10; ++k) EXPECT_EQ(uni.locate(uni.edges[k]), k);
}

TEST(Partition, QuasiUniformConstants) {
    auto [lo, hi] = quasiuniform_constants(PartitionLevel::uniform(0.0, 2 * pi, 16), 1.0);
    EXPECT_NEAR(lo, 2 * pi, 1e-12);
    EXPECT_NEAR(hi, 2 * pi, 1e-12);
    auto [l2, h2] = quasiuniform_constants(PartitionLevel{{0.0, 0.25, 1.0}});
    EXPECT_NEAR(l2, 0.5, 1e-15);
    EXPECT_NEAR(h2, 1.5, 1e-15);
}

TEST(Partition, DyadicHierarchy) {
    auto h = PartitionHierarchy::dyadic(1.0, 2, 8, 4);
    ASSERT_EQ(h.levels(), 4u);
    for (std::size_t n = 1; n < h.levels(); ++n) {
        EXPECT_TRUE(is_nested(h.time_levels[n], h.time_levels[n - 1]));
        EXPECT_TRUE(is_nested(h.arc_levels[n], h.arc_levels[n - 1]));
    }
    EXPECT_EQ(h.arc_levels.back().size(), 64u);
}

TEST(Partition, LocateBinBoundaries) {
    auto time = PartitionLevel::uniform(0.0, 1.0, 4);
    auto arcs = PartitionLevel::uniform(0.0, 2 * pi, 8);
    auto b = locate_bin(0.0, arcs.edges[3], 2 * pi, time, arcs);
    EXPECT_EQ(b.i, 0u);
    EXPECT_EQ(b.j, 3u);
    EXPECT_EQ(b.k, 0u);
    EXPECT_THROW(locate_bin(1.0, 0.0, 0.0, time, arcs), OutOfRange);
}

TEST(GeometryConfig, DefaultsAndValidation) {
    GeometryConfig g;
    EXPECT_NEAR(g.delta(), 0.3, 1e-15);
    EXPECT_NEAR(g.R_blur(), 0.85, 1e-15);
    EXPECT_NO_THROW(g.validate());
    g.R_scan = 0.5;
    EXPECT_THROW(g.validate(), ConfigError);
}

TEST(LimitCaseNames, RoundTrip) {
    for (auto c : {LimitCase::A, LimitCase::B, LimitCase::C, LimitCase::D})
        EXPECT_EQ(parse_case(case_name(c), "x"), c);
    EXPECT_THROW(parse_case("E", "partitions.case"), ConfigError);
}

TEST(Grid, CellsAndDomain) {
    GeometryConfig geom;
    SpatialGrid g(geom, 32);
    EXPECT_NEAR(g.h(), 1.7 / 32, 1e-15);
    double area = g.cell_area() * static_cast<double>(g.domain_cells().size());
    EXPECT_NEAR(area, pi * 0.49, 0.03);
    for (auto c : g.domain_cells()) EXPECT_LE(norm(g.center(c)), geom.R_dom);
}

TEST(Grid, BumpBlobMass) {
    GeometryConfig geom;
    SpatialGrid g(geom, 32);
    auto b = bump_blob(g, {0.1, -0.2}, 0.2, 2.5);
    EXPECT_NEAR(b.mass(), 2.5, 1e-12);
    EXPECT_EQ(b.mass_outside_domain(), 0.0);
}
