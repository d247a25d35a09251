#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "shjb/paths.hpp"
#include "shjb/sde.hpp"
#include "support.hpp"

using namespace shjb;
using Catch::Matchers::WithinAbs;
using support::build;

namespace {

const ControlLattice zero_lattice = ControlLattice::from_points({{0.0}});

ControlPolicy zero_policy() { return ControlPolicy::constant(zero_lattice, 0); }

PathBundle bundle(std::size_t steps, std::size_t count, std::uint64_t seed, double horizon = 1.0) {
    return sample_bundle(TimeGrid::make(horizon, steps, {0.0, horizon}), 0, 1, count, seed);
}

}  // namespace

TEST_CASE("frozen dynamics stay put", "[simulate]") {
    const CoefficientSet c = build({.sigma_bar = {"0"}});
    const std::vector<double> x0{0.7};
    const StatePaths sp = simulate(c, zero_policy(), 0.0, x0, bundle(16, 5, 1));
    REQUIRE(sp.ok);
    for (std::size_t p = 0; p < sp.count; ++p)
        for (std::size_t k = 0; k <= sp.steps; ++k) CHECK(sp.state(p, k)[0] == 0.7);
}

TEST_CASE("pure integrator reproduces the Wiener path", "[simulate]") {
    const CoefficientSet c = build({});
    const PathBundle b = bundle(32, 6, 2);
    const std::vector<double> x0{-0.3};
    const StatePaths sp = simulate(c, zero_policy(), 0.0, x0, b);
    for (std::size_t p = 0; p < sp.count; ++p)
        CHECK_THAT(sp.state(p, sp.steps)[0] - x0[0], WithinAbs(b.wiener_at(p, 32)[0], 1e-13));
}

TEST_CASE("unit drift moves deterministically", "[simulate]") {
    const CoefficientSet c = build({.beta = {"1"}, .sigma_bar = {"0"}});
    const std::vector<double> x0{1.0};
    const StatePaths sp = simulate(c, zero_policy(), 0.25, x0, bundle(32, 3, 3));
    CHECK(sp.start_step == 8);
    for (std::size_t p = 0; p < sp.count; ++p) CHECK_THAT(sp.state(p, sp.steps)[0], WithinAbs(1.75, 1e-13));
}

TEST_CASE("identical inputs give identical state paths", "[simulate]") {
    const CoefficientSet c = build({.beta = {"sin(x1) + v1"}, .sigma_bar = {"1 + 0.2*cos(x1)"}, .bound = 2.0});
    const ControlLattice lat = ControlLattice::from_box({-1.0}, {1.0}, 1);
    const ControlPolicy policy = ControlPolicy::open_loop(lat, {0.0, 0.5}, {0, 2});
    const std::vector<double> x0{0.1};
    const PathBundle b = bundle(32, 20, 4);
    const StatePaths a = simulate(c, policy, 0.0, x0, b);
    const StatePaths d = simulate(c, policy, 0.0, x0, b);
    CHECK(a.values == d.values);
    CHECK(a.controls == d.controls);
    CHECK(a.controls[0] == 0);
    CHECK(a.controls[20] == 2);
}

TEST_CASE("non-finite states fail the run", "[simulate]") {
    const CoefficientSet overflow = build({.beta = {"1e308"}, .sigma_bar = {"0"}, .bound = 1e308});
    const std::vector<double> x0{1e308};
    const StatePaths sp = simulate(overflow, zero_policy(), 0.0, x0, bundle(16, 2, 5));
    CHECK_FALSE(sp.ok);
    CHECK_FALSE(sp.failure.empty());

    const CoefficientSet domain = build({.beta = {"exp(exp(x1))"}, .sigma_bar = {"0"}, .bound = 2.0});
    const std::vector<double> start{3.0};
    CHECK_THROWS_AS(simulate(domain, zero_policy(), 0.0, start, bundle(8, 2, 5)), SimulationError);
}

TEST_CASE("Euler weak order sanity on the second moment", "[simulate]") {
    const CoefficientSet c = build({});
    const std::size_t n = 20000;
    const std::vector<double> x0{0.5};
    const StatePaths sp = simulate(c, zero_policy(), 0.0, x0, bundle(16, n, 6));
    double sum = 0.0, sq = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
        const double g = std::pow(sp.state(p, sp.steps)[0], 2);
        sum += g;
        sq += g * g;
    }
    const double mean = sum / n;
    const double se = std::sqrt((sq / n - mean * mean) / n);
    CHECK(std::fabs(mean - (0.25 + 1.0)) <= 4.0 * se);
}

TEST_CASE("moment checks", "[moments]") {
    const std::vector<double> x0{0.0};
    SECTION("constant paths") {
        const CoefficientSet c = build({.sigma_bar = {"0"}});
        const MomentReport r = check_moments(c, zero_policy(), 0.0, x0, bundle(16, 100, 7), 2);
        CHECK(r.report.passed);
        CHECK(r.k_hat <= 1.0);
    }
    SECTION("Brownian scaling of increments") {
        const CoefficientSet c = build({});
        const MomentReport r = check_moments(c, zero_policy(), 0.0, x0, bundle(16, 4000, 8), 2);
        CHECK(r.report.passed);
        CHECK_THAT(r.increment_ratio, WithinAbs(1.0, 0.1));
    }
    SECTION("linear drift: fitted constant is stable under grid refinement") {
        const CoefficientSet c = build({.beta = {"x1"}, .bound = 5.0});
        const std::vector<double> start{0.5};
        const double coarse = check_moments(c, zero_policy(), 0.0, start, bundle(16, 2000, 9), 4).k_hat;
        const double fine = check_moments(c, zero_policy(), 0.0, start, bundle(64, 2000, 9), 4).k_hat;
        CHECK(std::isfinite(coarse));
        CHECK(std::fabs(fine - coarse) <= 0.25 * coarse);
    }
}

TEST_CASE("discrete flow property", "[flow]") {
    const std::vector<double> x0{0.2};
    const PathBundle b = bundle(32, 50, 10);
    const CoefficientSet additive = build({});
    CHECK(check_flow(additive, zero_policy(), b, 0.25, 0.25, x0) == 0.0);
    CHECK(check_flow(additive, zero_policy(), b, 0.0, 0.5, x0) <= 1e-12);
    const CoefficientSet nonlinear = build({.beta = {"sin(x1)"}});
    CHECK(check_flow(nonlinear, zero_policy(), b, 0.125, 0.625, x0) <= 1e-10);
}

TEST_CASE("exit-time estimate", "[exit]") {
    const std::vector<double> x0{0.0};
    SECTION("no motion never exits") {
        const CoefficientSet c = build({.sigma_bar = {"0"}});
        const ExitReport r = exit_time_check(c, zero_policy(), 0.0, x0, 1.0, 0.25, bundle(64, 200, 11));
        CHECK(r.probability == 0.0);
        CHECK(r.report.passed);
    }
    SECTION("Brownian motion: bound holds and scales with h squared") {
        const CoefficientSet c = build({});
        const PathBundle b = bundle(256, 4000, 12);
        const ExitReport small = exit_time_check(c, zero_policy(), 0.0, x0, 1.0, 1.0 / 64.0, b);
        const ExitReport twice = exit_time_check(c, zero_policy(), 0.0, x0, 1.0, 2.0 / 64.0, b);
        CHECK(small.report.passed);
        CHECK(twice.report.passed);
        CHECK_THAT(twice.bound / small.bound, WithinAbs(4.0, 1e-12));
        CHECK(small.probability <= twice.probability);
    }
    SECTION("vacuous bound") {
        const CoefficientSet c = build({});
        const ExitReport r = exit_time_check(c, zero_policy(), 0.0, x0, 0.1, 0.5, bundle(64, 200, 13));
        CHECK(r.bound >= 1.0);
        CHECK(r.report.passed);
    }
}

TEST_CASE("pasted controls switch by box at the switch time", "[paste]") {
    const ControlLattice lat = ControlLattice::from_points({{-1.0}, {0.0}, {1.0}});
    const CoefficientSet c = build({.beta = {"v1"}, .sigma_bar = {"0"}});
    const ControlPolicy base = ControlPolicy::constant(lat, 1);
    const PathBundle b = bundle(16, 1, 14);
    SECTION("single box") {
        const ControlPolicy pasted = paste_controls(base, {{-10.0}}, {{10.0}}, {ControlPolicy::constant(lat, 2)}, 0.5);
        const std::vector<double> x0{0.0};
        const StatePaths sp = simulate(c, pasted, 0.0, x0, b);
        CHECK(sp.controls[0] == 1);
        CHECK(sp.controls[7] == 1);
        CHECK(sp.controls[8] == 2);
        CHECK_THAT(sp.state(0, 16)[0], WithinAbs(0.5, 1e-13));
    }
    SECTION("two boxes split at zero") {
        const ControlPolicy pasted =
            paste_controls(base, {{-10.0}, {0.0}}, {{0.0}, {10.0}},
                           {ControlPolicy::constant(lat, 0), ControlPolicy::constant(lat, 2)}, 0.5);
        const std::vector<double> x0{-0.2};
        const StatePaths sp = simulate(c, pasted, 0.0, x0, b);
        CHECK(sp.controls[8] == 0);
        CHECK_THAT(sp.state(0, 16)[0], WithinAbs(-0.7, 1e-13));
    }
}
