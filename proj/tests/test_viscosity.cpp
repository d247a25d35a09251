#include <catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <vector>

#include "shjb/lift.hpp"
#include "shjb/viscosity.hpp"
#include "support.hpp"

using namespace shjb;
using Catch::Matchers::WithinAbs;
using support::build;

namespace {

PathBundle bundle(std::size_t steps, std::size_t count, std::uint64_t seed, int m0 = 0, int m1 = 1) {
    return sample_bundle(TimeGrid::make(1.0, steps, {0.0, 1.0}), m0, m1, count, seed);
}

MeshSpec mesh(double h = 0.1, double dt = 0.005) {
    MeshSpec m;
    m.x_lo = {-4.0};
    m.x_hi = {4.0};
    m.h = h;
    m.dt = dt;
    return m;
}

TestFunction square_function() {
    TestFunction phi;
    phi.xi = {0.0};
    phi.p = Eigen::VectorXd::Zero(1);
    phi.curvature = Eigen::MatrixXd::Constant(1, 1, 2.0);
    phi.q = {0.0};
    phi.w_tau = {0.0};
    return phi;
}

double live_value(const PathRef& ref, double t) {
    return ref.bundle->wiener_at(ref.path, ref.bundle->grid.step_of(t))[0];
}

const ControlLattice three = ControlLattice::from_points({{-1.0}, {0.0}, {1.0}});

}  // namespace

TEST_CASE("stochastic derivatives of elementary fields", "[derivatives]") {
    const PathBundle b = bundle(64, 3, 1);
    const std::vector<double> x{0.7};
    const std::size_t branches = 4000;
    SECTION("Brownian motion") {
        RandomFieldSampler u;
        u.value = [](double t, std::span<const double>, const PathRef& ref) { return live_value(ref, t); };
        const StochasticDerivativePair d = estimate_derivatives(u, b, 1, 0.25, x, 1.0 / 16.0, branches, 3);
        CHECK(std::fabs(d.dt) <= 3.0 * d.dt_error);
        CHECK(std::fabs(d.domega[0] - 1.0) <= 3.0 * d.domega_error[0]);
    }
    SECTION("deterministic field t * x") {
        RandomFieldSampler u;
        u.value = [](double t, std::span<const double> pt, const PathRef&) { return t * pt[0]; };
        const StochasticDerivativePair d = estimate_derivatives(u, b, 0, 0.5, x, 1.0 / 16.0, branches, 4);
        CHECK_THAT(d.dt, WithinAbs(0.7, 1e-9));
        CHECK(std::fabs(d.domega[0]) <= 3.0 * d.domega_error[0] + 1e-12);
    }
    SECTION("squared Brownian motion") {
        RandomFieldSampler u;
        u.value = [](double t, std::span<const double>, const PathRef& ref) { return std::pow(live_value(ref, t), 2); };
        const double w = b.wiener_at(2, 32)[0];
        const StochasticDerivativePair d = estimate_derivatives(u, b, 2, 0.5, x, 1.0 / 32.0, branches, 5);
        CHECK(std::fabs(d.dt - 1.0) <= 3.0 * d.dt_error);
        CHECK(std::fabs(d.domega[0] - 2.0 * w) <= 3.0 * d.domega_error[0] + 1.0 / 32.0);
    }
    SECTION("reading the future is refused") {
        RandomFieldSampler u;
        u.value = [](double, std::span<const double>, const PathRef& ref) {
            return ref.bundle->wiener_at(ref.path, ref.bundle->grid.steps)[0];
        };
        CHECK_THROWS_AS(estimate_derivatives(u, b, 0, 0.5, x, 1.0 / 16.0, 50, 6), NonAdaptedError);
    }
}

TEST_CASE("random test functions: the operator pair recovers slope and integrand", "[derivatives][property]") {
    const PathBundle b = bundle(64, 4, 7, 1, 1);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const std::vector<double> xi{0.1 * static_cast<double>(seed)};
        const TestFunction phi = random_test_function(b, seed % 4, 0.25, xi, seed);
        const StochasticDerivativePair d =
            estimate_derivatives(phi.sampler(), b, seed % 4, 0.5, xi, 1.0 / 16.0, 2000, 100 + seed);
        CHECK(std::fabs(d.dt - phi.slope) <= 3.0 * d.dt_error + 1e-9);
        for (std::size_t j = 0; j < phi.q.size(); ++j)
            CHECK(std::fabs(d.domega[j] - phi.q[j]) <= 3.0 * d.domega_error[j] + 1e-9);
    }
}

TEST_CASE("stochastic derivatives are linear", "[derivatives][property]") {
    const PathBundle b = bundle(64, 2, 8, 1, 1);
    const std::vector<double> xi{0.3};
    const TestFunction first = random_test_function(b, 0, 0.25, xi, 11);
    const TestFunction second = random_test_function(b, 0, 0.25, xi, 12);
    const double alpha = 2.5;
    RandomFieldSampler combo;
    const RandomFieldSampler a = first.sampler(), c = second.sampler();
    combo.value = [a, c, alpha](double t, std::span<const double> x, const PathRef& ref) {
        return alpha * a.value(t, x, ref) + c.value(t, x, ref);
    };
    const auto est = [&](const RandomFieldSampler& u) { return estimate_derivatives(u, b, 0, 0.5, xi, 1.0 / 16.0, 2000, 21); };
    const StochasticDerivativePair da = est(a), dc = est(c), dsum = est(combo);
    CHECK_THAT(dsum.dt, WithinAbs(alpha * da.dt + dc.dt, 1e-9));
    for (std::size_t j = 0; j < dsum.domega.size(); ++j)
        CHECK_THAT(dsum.domega[j], WithinAbs(alpha * da.domega[j] + dc.domega[j], 1e-9));
}

TEST_CASE("Ito-Kunita residual", "[ito-kunita]") {
    const std::vector<double> x0{0.2};
    const ControlPolicy zero = ControlPolicy::constant(three, 1);
    SECTION("constant function") {
        TestFunction phi = square_function();
        phi.curvature(0, 0) = 0.0;
        phi.anchor = 3.0;
        const CoefficientSet c = build({.beta = {"v1"}, .bound = 2.0});
        const ItoKunitaReport r = ito_kunita_residual(phi.sampler(), c, zero, x0, bundle(32, 50, 9));
        CHECK(r.max == 0.0);
    }
    SECTION("square of a Brownian state: RMS halves when the step is quartered") {
        const CoefficientSet c = build({.beta = {"v1"}, .bound = 2.0});
        const TestFunction phi = square_function();
        const double coarse = ito_kunita_residual(phi.sampler(), c, zero, x0, bundle(16, 2000, 10)).rms;
        const double fine = ito_kunita_residual(phi.sampler(), c, zero, x0, bundle(256, 2000, 10)).rms;
        // the residual is the sum of dW^2 - dt, whose RMS is sqrt(2 T dt)
        CHECK_THAT(coarse, WithinAbs(std::sqrt(2.0 / 16.0), 0.05 * std::sqrt(2.0 / 16.0)));
        CHECK_THAT(fine, WithinAbs(std::sqrt(2.0 / 256.0), 0.05 * std::sqrt(2.0 / 256.0)));
    }
    SECTION("random test function along LQ dynamics") {
        const CoefficientSet c = build({.m0 = 1, .beta = {"v1"}, .sigma_tilde = {"0.5"}, .bound = 2.0});
        const PathBundle probe = bundle(16, 1, 11, 1, 1);
        const TestFunction phi = random_test_function(probe, 0, 0.0, x0, 13);
        const ControlPolicy policy = ControlPolicy::constant(three, 2);
        std::vector<double> rms;
        for (std::size_t steps : {16, 64, 256})
            rms.push_back(ito_kunita_residual(phi.sampler(), c, policy, x0, bundle(steps, 1000, 12, 1, 1)).rms);
        const double rate = std::log(rms[0] / rms[2]) / std::log(16.0);
        CHECK(rms[1] < rms[0]);
        CHECK(rms[2] < rms[1]);
        CHECK(rate >= 0.4);
    }
}

TEST_CASE("touching test functions", "[touch]") {
    const PathBundle b = bundle(64, 2, 14, 1, 1);
    const std::vector<double> xi{0.3};
    SECTION("a test function touches itself from both sides") {
        const TestFunction base = random_test_function(b, 1, 0.25, xi, 15);
        TouchOptions opt;
        opt.curvature = 0.0;
        for (const TouchSide side : {TouchSide::below, TouchSide::above}) {
            const TestFunction phi = make_touching_test(base.sampler(), b, 1, 0.25, xi, side, opt);
            CHECK(phi.certificate.member);
            CHECK_THAT(phi.certificate.extreme_gap, WithinAbs(0.0, 1e-6));
            CHECK_THAT(phi.slope, WithinAbs(base.slope, 1e-6));
        }
    }
    SECTION("remaining horizon from below") {
        RandomFieldSampler u;
        u.value = [](double t, std::span<const double>, const PathRef&) { return 1.0 - t; };
        TouchOptions opt;
        opt.curvature = 0.0;
        const TestFunction phi = make_touching_test(u, b, 0, 0.5, xi, TouchSide::below, opt);
        CHECK(phi.certificate.member);
        CHECK_THAT(phi.slope, WithinAbs(-1.0, 1e-6));
        CHECK_THAT(phi.q[0], WithinAbs(0.0, 1e-9));
        CHECK_THAT(phi.curvature(0, 0), WithinAbs(0.0, 1e-9));
    }
}

TEST_CASE("viscosity residuals", "[residual]") {
    // a short stopping window keeps the slope bias |u_tx| * delta * window small
    const PathBundle b = bundle(256, 2, 16);
    const std::vector<double> xi{0.4};
    const double tau = 0.25;
    SECTION("unit running cost: exact solution gives zero residuals") {
        const CoefficientSet c = build({.beta = {"v1"}, .running = "1", .bound = 2.0});
        RandomFieldSampler u;
        u.value = [](double t, std::span<const double>, const PathRef&) { return 1.0 - t; };
        TouchOptions opt;
        opt.curvature = 0.0;
        for (const TouchSide side : {TouchSide::below, TouchSide::above}) {
            const TestFunction phi = make_touching_test(u, b, 0, tau, xi, side, opt);
            const ResidualReport r = side == TouchSide::below
                                         ? subsolution_residual(phi, c, three, b, 0, ResidualOptions{})
                                         : supersolution_residual(phi, c, three, b, 0, ResidualOptions{});
            CHECK_THAT(r.final_value, WithinAbs(0.0, 1e-6));
        }
    }
    SECTION("LQ solution and the shifted counterexamples") {
        const CoefficientSet c = build({.beta = {"v1"}, .running = "v1^2 + x1^2", .bound = 8.0});
        const ControlLattice lattice = ControlLattice::from_box({-2.0}, {2.0}, 4);
        auto field = std::make_shared<const ValueField>(
            solve_recursive(exact_problem(c), lattice, SolveOptions{mesh(0.05, 0.00125), nullptr}));
        const RandomFieldSampler u = field_sampler(field);
        const TouchOptions opt;
        // half the diffusion times the added curvature plus difference-quotient truncation
        const double tolerance = 0.1;
        const TestFunction below = make_touching_test(u, b, 0, tau, xi, TouchSide::below, opt);
        const TestFunction above = make_touching_test(u, b, 0, tau, xi, TouchSide::above, opt);
        CHECK(below.certificate.member);
        CHECK(above.certificate.member);
        CHECK(std::fabs(below.q[0]) <= 1e-6);
        const ResidualReport sub = subsolution_residual(below, c, lattice, b, 0, ResidualOptions{});
        const ResidualReport super = supersolution_residual(above, c, lattice, b, 0, ResidualOptions{});
        CHECK(std::fabs(sub.final_value) <= tolerance);
        CHECK(std::fabs(super.final_value) <= tolerance);
        CHECK(sub.final_value <= tolerance);
        CHECK(super.final_value >= -tolerance);

        const RandomFieldSampler too_high = shifted_sampler(u, 1.0, 1.0);
        const RandomFieldSampler too_low = shifted_sampler(u, -1.0, 1.0);
        const ResidualReport bad_sub = subsolution_residual(
            make_touching_test(too_high, b, 0, tau, xi, TouchSide::below, opt), c, lattice, b, 0, ResidualOptions{});
        const ResidualReport bad_super = supersolution_residual(
            make_touching_test(too_low, b, 0, tau, xi, TouchSide::above, opt), c, lattice, b, 0, ResidualOptions{});
        CHECK(bad_sub.final_value > tolerance);
        CHECK_THAT(bad_sub.final_value, WithinAbs(1.0, 0.15));
        CHECK(bad_super.final_value < -tolerance);
        CHECK_THAT(bad_super.final_value, WithinAbs(-1.0, 0.15));
    }
}

TEST_CASE("comparison of random fields", "[comparison]") {
    const PathBundle b = bundle(32, 3, 17);
    RandomFieldSampler reference;
    reference.value = [](double t, std::span<const double> x, const PathRef& ref) {
        return x[0] * x[0] + live_value(ref, t) + 1.0 - t;
    };
    RandomFieldSampler raised;
    raised.value = [reference](double t, std::span<const double> x, const PathRef& ref) {
        return reference.value(t, x, ref) + 1.0;
    };
    const std::vector<ComparisonPoint> points{{0, 0.25, {0.1}, 0.01}, {2, 0.5, {-1.0}, 0.01}};
    CHECK(comparison_check(reference, reference, b, points).passed);
    CHECK_FALSE(comparison_check(raised, reference, b, points).passed);
    CHECK(comparison_check(reference, raised, b, points).passed);
}
