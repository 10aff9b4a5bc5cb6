#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "petgamma/experiments.hpp"

using namespace petgamma;

namespace {

struct Small {
    GeometryConfig geom;
    SpacetimeDensity truth = moving_blob(geom, 16, 4);
    PartitionLevel time = PartitionLevel::uniform(0.0, 1.0, 2);
    BinnedSystem sys{geom, truth.grid, 4, time, 8, 256};

    ReconProblem problem(double beta, double q = 1e3) const {
        ReconProblem p;
        p.time = time;
        p.M = 8;
        p.q = q;
        p.beta = beta;
        p.counts = expected_counts(truth, sys, q, 1.0, p.ps, p.pd);
        for (double& c : p.counts) c = std::round(c);
        return p;
    }

    // Positive density in M_c with random cell values.
    SpacetimeDensity random_density(std::uint64_t seed, double mass = 1.0) const {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(0.2, 1.0);
        SpacetimeDensity r(truth.grid, 1.0, 4);
        for (auto& s : r.slices) {
            for (auto c : sys.cells()) s.v[c] = u(rng);
            double m = s.mass();
            for (double& v : s.v) v *= mass / m;
        }
        return r;
    }

    // Direction with zero sum on every slice, supported on the domain cells.
    SpacetimeDensity tangent(std::uint64_t seed) const {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> n01;
        SpacetimeDensity d(truth.grid, 1.0, 4);
        for (auto& s : d.slices) {
            double mean = 0.0;
            for (auto c : sys.cells()) mean += (s.v[c] = n01(rng));
            mean /= static_cast<double>(sys.cells().size());
            for (auto c : sys.cells()) s.v[c] -= mean;
        }
        return d;
    }
};

double directional(const SpacetimeDensity& grad, const SpacetimeDensity& d, const std::vector<std::size_t>& cells) {
    double s = 0.0;
    for (std::size_t k = 0; k < grad.slices.size(); ++k)
        for (auto c : cells) s += grad.slices[k].v[c] * d.slices[k].v[c];
    return s;
}

SpacetimeDensity lerp(const SpacetimeDensity& a, const SpacetimeDensity& b, double t) {
    auto out = a;
    for (std::size_t k = 0; k < a.slices.size(); ++k)
        for (std::size_t c = 0; c < a.grid.size(); ++c)
            out.slices[k].v[c] = (1.0 - t) * a.slices[k].v[c] + t * b.slices[k].v[c];
    return out;
}

}  // namespace

TEST(Energy, ZeroCountsReducesToMassAndAction) {
    Small s;
    auto p = s.problem(0.1);
    p.counts.assign(p.counts.size(), 0.0);
    auto e = energy_discrete(s.truth, p, s.sys);
    double S = min_momentum(s.truth, s.sys.faces()).S.value;
    EXPECT_NEAR(e.total, 0.9 * s.truth.total_mass() + 0.1 * S, 1e-12);
    EXPECT_EQ(e.data_term, 0.0);
}

TEST(Energy, HomogeneousInCountsAndQ) {
    Small s;
    auto p = s.problem(0.0);
    auto p2 = p;
    p2.q *= 2.0;
    for (double& c : p2.counts) c *= 2.0;
    EXPECT_NEAR(energy_discrete(s.truth, p, s.sys).total, energy_discrete(s.truth, p2, s.sys).total, 1e-12);
}

TEST(Energy, InfiniteOutsideMcOrNegative) {
    Small s;
    auto p = s.problem(0.1);
    auto bad = s.truth;
    for (double& v : bad.slices[1].v) v *= 1.5;
    EXPECT_TRUE(std::isinf(energy_discrete(bad, p, s.sys).total));
    auto neg = s.truth;
    neg.slices[2].v[s.sys.cells()[5]] = -1e-3;
    neg.slices[2].v[s.sys.cells()[6]] += 1e-3;
    EXPECT_TRUE(std::isinf(energy_discrete(neg, p, s.sys).total));
}

TEST(Energy, ValidationErrors) {
    Small s;
    auto p = s.problem(0.1);
    p.counts.pop_back();
    EXPECT_THROW(p.validate(), ConfigError);
    p = s.problem(0.1);
    p.ps = 0.0;
    EXPECT_THROW(p.validate(), ConfigError);
    p = s.problem(0.1);
    p.counts[0] = -1.0;
    EXPECT_THROW(minimize_map(p, s.sys), ConfigError);
}

// Forward operator is linear and its adjoint matches the inner product.
TEST(System, AdjointIdentity) {
    Small s;
    auto rho = s.random_density(3);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n01;
    std::vector<double> y(2 * 64);
    for (double& v : y) v = n01(rng);
    auto B = s.sys.forward(rho, 1.3, 0.2, 0.7);
    double lhs = 0.0;
    for (std::size_t b = 0; b < y.size(); ++b) lhs += y[b] * B[b];
    SpacetimeDensity g(rho.grid, 1.0, 4);
    s.sys.add_adjoint(y, 1.3, 0.2, 0.7, g);
    double rhs = directional(g, rho, s.sys.cells());
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::fabs(lhs));
}

class GradientTest : public ::testing::TestWithParam<double> {};

// Central differences along tangent directions match the analytic gradient.
TEST_P(GradientTest, FiniteDifferences) {
    Small s;
    auto p = s.problem(GetParam());
    auto rho = s.random_density(11);
    SpacetimeDensity g;
    energy_and_gradient(rho, p, s.sys, &g);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto d = s.tangent(100 + seed);
        double h = 1e-5;
        double ep = energy_discrete(detail::axpy(rho, h, d, s.sys.cells(), false), p, s.sys).total;
        double em = energy_discrete(detail::axpy(rho, -h, d, s.sys.cells(), false), p, s.sys).total;
        double fd = (ep - em) / (2.0 * h);
        double an = directional(g, d, s.sys.cells());
        EXPECT_NEAR(fd, an, 1e-5 * std::max(1.0, std::fabs(an))) << "beta " << GetParam() << " seed " << seed;
    }
}

INSTANTIATE_TEST_SUITE_P(Beta, GradientTest, ::testing::Values(0.0, 0.05));

TEST(Projection, FeasibleIdempotentOptimal) {
    Small s;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n01;
    SpacetimeDensity z(s.truth.grid, 1.0, 4);
    for (auto& sl : z.slices)
        for (auto c : s.sys.cells()) sl.v[c] = n01(rng) + 0.3;
    auto p = z;
    project_equal_mass(p, s.sys.cells());
    EXPECT_TRUE(p.in_Mc(1e-9));
    for (const auto& sl : p.slices)
        for (double v : sl.v) EXPECT_GE(v, 0.0);
    auto pp = p;
    project_equal_mass(pp, s.sys.cells());
    for (std::size_t k = 0; k < p.slices.size(); ++k)
        for (auto c : s.sys.cells()) EXPECT_NEAR(pp.slices[k].v[c], p.slices[k].v[c], 1e-12);
    // Variational inequality <z - P z, y - P z> <= 0 for feasible y.
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto y = s.random_density(50 + seed, 0.5 + seed);
        double ip = 0.0;
        for (std::size_t k = 0; k < p.slices.size(); ++k)
            for (auto c : s.sys.cells())
                ip += (z.slices[k].v[c] - p.slices[k].v[c]) * (y.slices[k].v[c] - p.slices[k].v[c]);
        EXPECT_LE(ip, 1e-9);
    }
}

TEST(Convexity, MidpointInequality) {
    Small s;
    for (double beta : {0.0, 0.05}) {
        auto p = s.problem(beta);
        for (std::uint64_t seed = 0; seed < 4; ++seed) {
            auto a = s.random_density(20 + seed, 0.5), b = s.random_density(40 + seed, 2.0);
            double ea = energy_discrete(a, p, s.sys).total, eb = energy_discrete(b, p, s.sys).total;
            for (double t : {0.25, 0.5, 0.75}) {
                double em = energy_discrete(lerp(a, b, t), p, s.sys).total;
                EXPECT_LE(em, (1.0 - t) * ea + t * eb + 1e-10);
            }
        }
    }
}

// Gibbs inequality for the limit functional: E(rho) - E(rho_dagger) is a KL
// divergence between detection measures, nonnegative and zero at rho_dagger.
TEST(Limit, GibbsInequality) {
    Small s;
    auto g = estimate_g(s.geom, 16, 200000, 3);
    LimitSetup ls;
    ls.geom = s.geom;
    ls.M = 8;
    for (auto which : {LimitCase::A, LimitCase::B, LimitCase::C, LimitCase::D}) {
        ls.which = which;
        ls.time = s.time;
        auto et = energy_limit(s.truth, s.truth, ls, g);
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            auto other = s.random_density(70 + seed, 0.5 + seed);
            EXPECT_GE(energy_limit(other, s.truth, ls, g).total - et.total, -1e-9) << case_name(which);
        }
        auto bad = s.truth;
        for (double& v : bad.slices[1].v) v *= 1.5;
        EXPECT_TRUE(std::isinf(energy_limit(bad, s.truth, ls, g).total));
    }
}

TEST(Coercivity, EnergyGrowsLinearlyInMass) {
    Small s;
    auto p = s.problem(0.05);
    double kappa = equicoercivity_bound(p, s.sys);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        double mass = std::pow(10.0, -2.0 + 0.3 * static_cast<double>(seed));
        auto r = s.random_density(200 + seed, mass);
        EXPECT_GE(energy_discrete(r, p, s.sys).total, r.total_mass() / kappa - kappa);
    }
    p.counts.assign(p.counts.size(), 0.0);
    EXPECT_EQ(equicoercivity_bound(p, s.sys), scatter_floor_constant(p, s.sys));
}

// Without regularization the minimizer is a stationary point: projected
// gradient small and no tangent descent direction.
TEST(Solver, StationaryWithoutRegularization) {
    Small s;
    auto p = s.problem(0.0);
    auto res = minimize_map(p, s.sys);
    EXPECT_FALSE(res.stalled);
    EXPECT_TRUE(res.rho.in_Mc(1e-9));
    EXPECT_LE(res.projected_gradient, 1e-4 * (1.0 + std::fabs(res.energy.total)));
    EXPECT_TRUE(trace_monotone(res.trace));
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto other = s.random_density(300 + seed, res.rho.slices[0].mass());
        EXPECT_GE(energy_discrete(other, p, s.sys).total, res.energy.total - 1e-9);
    }
}

TEST(Solver, RegularizedBeatsInitialization) {
    Small s;
    auto p = s.problem(0.05);
    auto init = uniform_initial(p, s.sys);
    auto res = minimize_map(p, s.sys, &init);
    EXPECT_LE(res.energy.total, energy_discrete(init, p, s.sys).total);
    EXPECT_LE(res.energy.total, energy_discrete(s.truth, p, s.sys).total + 1e-9);
    EXPECT_TRUE(trace_monotone(res.trace));
    auto flow = min_momentum(res.rho, s.sys.faces());
    EXPECT_NEAR(res.energy.reg_term, 0.05 * flow.S.value, 1e-9);
}

TEST(Injectivity, SmallestSingularValuePositive) {
    GeometryConfig geom;
    EXPECT_GT(injectivity_smin(geom, 8, 16, 256), 0.0);
}
