#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <gtest/gtest.h>

#include "petgamma/experiments.hpp"

using namespace petgamma;

namespace {

std::filesystem::path tmp(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

}  // namespace

TEST(Listmode, WriteReadRoundTrip) {
    GeometryConfig geom;
    auto truth = moving_blob(geom, 16, 4);
    auto ev = simulate_listmode(truth, geom, 200.0, 0.2, 0.7, 5);
    ASSERT_FALSE(ev.empty());
    auto path = tmp("petgamma_listmode_roundtrip.csv");
    write_listmode(path, ev);
    auto back = read_listmode(path);
    ASSERT_EQ(back.size(), ev.size());
    for (std::size_t i = 0; i < ev.size(); ++i) {
        EXPECT_EQ(back[i].t, ev[i].t);
        EXPECT_EQ(back[i].a, ev[i].a);
        EXPECT_EQ(back[i].b, ev[i].b);
    }
    std::filesystem::remove(path);
}

TEST(Listmode, MalformedFilesRejected) {
    auto path = tmp("petgamma_listmode_bad.csv");
    std::ofstream(path) << "t,a,b\n0.1,0.2,0.3\n";
    EXPECT_THROW(read_listmode(path), ConfigError);
    std::ofstream(path) << "t,alpha_a,alpha_b\n0.1;0.2;0.3\n";
    EXPECT_THROW(read_listmode(path), ConfigError);
    std::filesystem::remove(path);
    EXPECT_THROW(read_listmode(tmp("petgamma_listmode_missing.csv")), Error);
}

TEST(Listmode, ReproducibleAndInRange) {
    GeometryConfig geom;
    auto truth = moving_blob(geom, 16, 4);
    auto a = simulate_listmode(truth, geom, 300.0, 0.2, 0.7, 9);
    auto b = simulate_listmode(truth, geom, 300.0, 0.2, 0.7, 9);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].t, b[i].t);
        EXPECT_GE(a[i].t, 0.0);
        EXPECT_LT(a[i].t, geom.T_horizon);
        EXPECT_GE(a[i].a, 0.0);
        EXPECT_LT(a[i].a, kTwoPi);
        EXPECT_GE(a[i].b, 0.0);
        EXPECT_LT(a[i].b, kTwoPi);
    }
}

// Total counts are Poisson with mean q (ps + pd) |rho|, and the binned
// counts of many seeds average to q times the binned forward operator.
TEST(Listmode, CountStatistics) {
    GeometryConfig geom;
    auto truth = moving_blob(geom, 16, 4);
    const double q = 400.0, ps = 0.2, pd = 0.7;
    const int seeds = 300;
    auto time = PartitionLevel::uniform(0.0, 1.0, 2);
    BinnedSystem sys(geom, truth.grid, 4, time, 4, 512);
    auto expect = expected_counts(truth, sys, q, 1.0, ps, pd);
    std::vector<double> mean(expect.size(), 0.0);
    double total = 0.0;
    for (int s = 0; s < seeds; ++s) {
        auto ev = simulate_listmode(truth, geom, q, ps, pd, static_cast<std::uint64_t>(s));
        total += static_cast<double>(ev.size());
        auto c = bin_events(ev, time, 4);
        EXPECT_EQ(std::accumulate(c.begin(), c.end(), 0.0), static_cast<double>(ev.size()));
        for (std::size_t b = 0; b < c.size(); ++b) mean[b] += c[b] / seeds;
    }
    double mu = q * (ps + pd) * truth.total_mass();
    EXPECT_NEAR(total / seeds, mu, 4.0 * std::sqrt(mu / seeds));
    for (std::size_t b = 0; b < mean.size(); ++b)
        EXPECT_NEAR(mean[b], expect[b], 5.0 * std::sqrt(expect[b] / seeds) + 0.03 * expect[b]) << "bin " << b;
}

TEST(Listmode, SimulateStudySummary) {
    GeometryConfig geom;
    auto truth = moving_blob(geom, 16, 4);
    std::vector<std::vector<Event>> keep;
    auto r = simulate_study(truth, geom, 500.0, 0.2, 0.7, {1, 2, 3, 4}, &keep);
    EXPECT_EQ(keep.size(), 4u);
    EXPECT_EQ(r.table("simulate").rows.size(), 4u);
    EXPECT_TRUE(r.pass());
}
