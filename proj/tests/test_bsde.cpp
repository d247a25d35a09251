#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "shjb/bsde.hpp"
#include "shjb/lift.hpp"
#include "shjb/value_mc.hpp"
#include "support.hpp"

using namespace shjb;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using support::build;

namespace {

PathBundle bundle(const std::vector<double>& knots, std::size_t steps, std::size_t count, std::uint64_t seed,
                  int m1 = 0) {
    return sample_bundle(TimeGrid::make(knots.back(), steps, knots), 1, m1, count, seed);
}

BsdeProblem expr_problem(const std::string& terminal, const std::string& driver, const std::vector<double>& knots) {
    return bsde_problem(Expr::parse(terminal), Expr::parse(driver), knots, 1, 0);
}

MeshSpec mesh(double h = 0.2, double dt = 0.02) {
    MeshSpec m;
    m.x_lo = {-4.0};
    m.x_hi = {4.0};
    m.h = h;
    m.dt = dt;
    return m;
}

const ControlLattice three = ControlLattice::from_points({{-1.0}, {0.0}, {1.0}});

}  // namespace

TEST_CASE("bsde expression forms are checked", "[bsde]") {
    const std::vector<double> knots{0.0, 1.0};
    CHECK_THROWS_AS(expr_problem("w1", "0", knots), std::invalid_argument);
    CHECK_THROWS_AS(expr_problem("x1", "0", knots), std::invalid_argument);
    CHECK_THROWS_AS(expr_problem("k1", "v1", knots), std::invalid_argument);
    CHECK_THROWS_AS(expr_problem("k2", "0", knots), std::invalid_argument);
    CHECK_NOTHROW(expr_problem("k1^2", "t + w1^2", knots));
}

TEST_CASE("constant terminal, no driver", "[bsde]") {
    const std::vector<double> knots{0.0, 1.0};
    const PathBundle b = bundle(knots, 16, 5, 1);
    const BSDESolution s = solve_bsde(expr_problem("1.5", "0", knots), b);
    for (std::size_t p = 0; p < s.count; ++p) {
        for (std::size_t k = 0; k <= s.steps; ++k) CHECK_THAT(s.y_at(p, k), WithinAbs(1.5, 1e-12));
        for (std::size_t k = 0; k < s.steps; ++k) CHECK(s.z_at(p, k)[0] == 0.0);
    }
}

TEST_CASE("terminal Wiener value is its own martingale", "[bsde]") {
    const std::vector<double> knots{0.0, 0.5, 1.0};
    const PathBundle b = bundle(knots, 16, 5, 2);
    const BSDESolution s = solve_bsde(expr_problem("k2", "0", knots), b);
    for (std::size_t p = 0; p < s.count; ++p) {
        for (std::size_t k = 0; k <= s.steps; ++k) CHECK_THAT(s.y_at(p, k), WithinAbs(b.wiener_at(p, k)[0], 1e-9));
        for (std::size_t k = 0; k < s.steps; ++k) CHECK_THAT(s.z_at(p, k)[0], WithinAbs(1.0, 1e-6));
    }
}

TEST_CASE("conditional second moment of a knot value", "[bsde]") {
    const std::vector<double> knots{0.0, 0.5, 1.0};
    const PathBundle b = bundle(knots, 16, 5, 3);
    const BSDESolution s = solve_bsde(expr_problem("k1^2", "0", knots), b);
    for (std::size_t p = 0; p < s.count; ++p)
        for (std::size_t k = 0; k <= s.steps; ++k) {
            const double t = b.grid.time(k);
            const double w = b.wiener_at(p, std::min<std::size_t>(k, 8))[0];
            CHECK_THAT(s.y_at(p, k), WithinAbs(w * w + std::max(0.5 - t, 0.0), 1e-9));
            if (k < s.steps) {
                const double z = t < 0.5 ? 2.0 * b.wiener_at(p, k)[0] : 0.0;
                CHECK_THAT(s.z_at(p, k)[0], WithinAbs(z, 1e-5));
            }
        }
}

TEST_CASE("deterministic data has no martingale part", "[bsde][property]") {
    const std::vector<double> knots{0.0, 0.5, 1.0};
    const PathBundle b = bundle(knots, 16, 4, 4);
    const BSDESolution s = solve_bsde(expr_problem("0.3", "t^2 + 1", knots), b);
    for (double z : s.z) CHECK(z == 0.0);
    // Y_s = 0.3 + int_s^1 (t^2 + 1) dt
    for (std::size_t k = 0; k <= s.steps; ++k) {
        const double t = b.grid.time(k);
        CHECK_THAT(s.y_at(0, k), WithinAbs(0.3 + (1.0 - t * t * t) / 3.0 + (1.0 - t), 1e-12));
    }
}

TEST_CASE("Y is a martingale plus the driver integral", "[bsde][property]") {
    const std::vector<double> knots{0.0, 0.5, 1.0};
    const BsdeQuadrature q(expr_problem("k1 * k2 + 0.2*k2^2", "w1^2 + 0.5*k1", knots));
    const PathBundle b = bundle(knots, 64, 3, 5);
    const std::size_t branches = 4000;
    for (double s : {0.125, 0.5, 0.75}) {
        const double lag = 0.125;
        const PathBundle br = branch_at(b, 1, s, branches, 17);
        const std::size_t from = br.grid.step_of(s);
        const std::size_t to = br.grid.step_of(s + lag);
        const WienerEnv start = knot_env(br, 0, s);
        const std::size_t fixed_at_start = q.interval_of(s);
        const double y0 = q.value(s, start.live, std::span<const double>(start.knots.data(), fixed_at_start));
        double sum = 0.0, sq = 0.0;
        for (std::size_t p = 0; p < branches; ++p) {
            const WienerEnv end = knot_env(br, p, s + lag);
            const double y1 = q.value(s + lag, end.live, std::span<const double>(end.knots.data(), q.interval_of(s + lag)));
            double integral = 0.0;
            for (std::size_t k = from; k < to; ++k) {
                const WienerEnv here = knot_env(br, p, br.grid.time(k));
                const double mid = br.grid.time(k + 1) - br.grid.time(k);
                integral += (here.live[0] * here.live[0] + 0.5 * here.knots[0]) * mid;
            }
            const double gap = y1 - y0 + integral;
            sum += gap;
            sq += gap * gap;
        }
        const double mean = sum / branches;
        const double se = std::sqrt((sq / branches - mean * mean) / branches);
        // left-point integral bias is about dt * lag / 2
        CHECK(std::fabs(mean) <= 3.0 * se + 0.002);
    }
}

TEST_CASE("regression mode agrees with quadrature", "[bsde]") {
    const std::vector<double> knots{0.0, 0.5, 1.0};
    const BsdeProblem problem = expr_problem("k1^2 + k2", "0.5*w1^2", knots);
    const PathBundle b = bundle(knots, 32, 4, 6);
    const std::vector<std::size_t> steps{0, 8, 16, 24};
    const BSDESolution exact = solve_bsde(problem, b);
    const BSDESolution mc = solve_bsde_regression(problem, b, steps, 4000, 19);
    CHECK(mc.method == BsdeMethod::regression);
    for (std::size_t p = 0; p < b.count; ++p)
        for (std::size_t k : steps) {
            const double se = mc.y_error[p * (mc.steps + 1) + k];
            CHECK(std::fabs(mc.y_at(p, k) - exact.y_at(p, k)) <= 4.0 * se + 1e-3);
            CHECK(std::fabs(mc.z_at(p, k)[0] - exact.z_at(p, k)[0]) <= 0.25);
        }
}

TEST_CASE("envelopes of an exact knot-form problem collapse", "[envelope]") {
    const CoefficientSet c = build({.m0 = 1, .knots = {0.0, 0.5, 1.0}, .beta = {"v1"}, .sigma_tilde = {"0"},
                                    .running = "v1^2 + x1^2 + k1^2", .bound = 17.0});
    LiftOptions opt;
    const LiftedCoefficientSet lifted = lift_coefficients(c, three, opt);
    REQUIRE(lifted.gaps.exact);
    auto field = std::make_shared<const ValueField>(solve_recursive(lifted, three, SolveOptions{mesh(0.4, 0.05), nullptr}));
    auto b = std::make_shared<const PathBundle>(bundle(c.knots, 16, 3, 7, 1));
    const double k = field->gradient_bound();
    BSDESolution y = solve_bsde(envelope_bsde(lifted, three, opt, k), *b);
    for (double v : y.y) CHECK(v == 0.0);
    const Envelope env = build_envelopes(field, b, y, k, lifted.gaps);
    const std::vector<double> x{0.3};
    for (std::size_t step : {0, 5, 12}) {
        CHECK(env.upper(1, step, x) == env.value(1, step, x));
        CHECK(env.lower(1, step, x) == env.value(1, step, x));
    }
    std::vector<SandwichPoint> points;
    for (std::size_t step : {0, 8}) points.push_back({2, step, x, env.value(2, step, x), 0.0});
    CHECK(sandwich_check(env, points, 1e-12).report.passed);
}

TEST_CASE("constant gap driver widens the envelope linearly", "[envelope]") {
    const CoefficientSet c = build({.m0 = 1, .beta = {"v1"}, .sigma_tilde = {"0"}, .running = "1", .bound = 2.0});
    auto field = std::make_shared<const ValueField>(solve_recursive(exact_problem(c), three, SolveOptions{mesh(0.4, 0.05), nullptr}));
    auto b = std::make_shared<const PathBundle>(bundle(c.knots, 16, 3, 8, 1));
    BsdeProblem problem = expr_problem("0", "0.2", c.knots);
    const Envelope env = build_envelopes(field, b, solve_bsde(problem, *b), 1.0, GapReport{});
    const std::vector<double> x{-0.5};
    for (std::size_t step = 0; step <= 16; step += 4) {
        const double s = b->grid.time(step);
        CHECK_THAT(env.upper(0, step, x) - env.value(0, step, x), WithinAbs(0.2 * (1.0 - s), 1e-12));
        CHECK_THAT(env.value(0, step, x), WithinAbs(1.0 - s, 1e-10));
        // the reference is the value itself: tight sandwich, width from Y only
    }
    std::vector<SandwichPoint> points{{0, 4, x, 0.75, 0.0}, {2, 8, x, 0.5, 0.0}};
    const SandwichReport r = sandwich_check(env, points, 1e-9);
    CHECK(r.report.passed);
    CHECK_THAT(r.mean_abs_error, WithinAbs(0.0, 1e-9));
    const std::vector<double> up = env.domega(0, 4, x, true);
    REQUIRE(up.size() == 2);
    CHECK(up[1] == 0.0);
}

TEST_CASE("envelope width is nonnegative on a perturbed problem", "[envelope][property]") {
    const CoefficientSet c = build({.m0 = 1, .beta = {"v1"}, .sigma_tilde = {"0"},
                                    .running = "v1^2 + x1^2 + 0.08*w1^2", .bound = 9.0});
    LiftOptions opt;
    opt.eps_target = 0.2;
    opt.paths = 500;
    opt.steps_per_interval = 32;
    opt.x_samples = 3;
    const LiftedCoefficientSet lifted = lift_coefficients(c, three, opt);
    auto field = std::make_shared<const ValueField>(solve_recursive(lifted, three, SolveOptions{mesh(0.4, 0.05), nullptr}));
    auto b = std::make_shared<const PathBundle>(sample_bundle(
        TimeGrid::make(1.0, 32, lifted.problem.knots), 1, 1, 20, 9));
    const double k = field->gradient_bound();
    const Envelope env = build_envelopes(field, b, solve_bsde(envelope_bsde(lifted, three, opt, k), *b), k, lifted.gaps);
    const std::vector<double> x{0.2};
    for (std::size_t p = 0; p < b->count; ++p)
        for (std::size_t step = 0; step < 32; step += 8) {
            CHECK(env.bsde.y_at(p, step) >= 0.0);
            CHECK(env.upper(p, step, x) - env.lower(p, step, x) >= 0.0);
            CHECK(env.lower(p, step, x) <= env.value(p, step, x));
        }
    CHECK(env.bsde.y_at(0, 0) > 0.0);
}

TEST_CASE("error bound fit", "[envelope]") {
    const std::vector<double> scales{0.2, 0.1, 0.05};
    CHECK(error_bound_check(scales, {0.02, 0.01, 0.004}, 0.0).report.passed);
    CHECK_THAT(error_bound_check(scales, {0.02, 0.01, 0.004}, 0.0).k0, WithinAbs(0.1, 1e-15));
    CHECK_FALSE(error_bound_check(scales, {0.02, 0.015, 0.012}, 0.0).report.passed);
    CHECK(error_bound_check(scales, {0.02, 0.015, 0.012}, 0.01).report.passed);
    CHECK_FALSE(error_bound_check(scales, {0.01, 0.02, 0.001}, 0.0).report.passed);
}

TEST_CASE("Feynman-Kac consistency", "[feynman-kac]") {
    FeynmanKacOptions opt;
    opt.mesh = mesh(0.2, 0.01);
    opt.branches = 4000;
    SECTION("unit running cost") {
        const CoefficientSet c = build({.beta = {"v1"}, .running = "1", .bound = 2.0});
        const PathBundle b = sample_bundle(TimeGrid::make(1.0, 32, c.knots), 0, 1, 2, 10);
        const FeynmanKacReport r = feynman_kac_check(c, three, ControlPolicy::constant(three, 2), b,
                                                     {{0, 0.0, {0.0}}, {1, 0.5, {1.0}}}, opt);
        CHECK(r.report.passed);
        CHECK_THAT(r.residual_max, WithinAbs(0.0, 1e-9));
        CHECK_THAT(r.pde[1], WithinAbs(0.5, 1e-12));
    }
    SECTION("LQ with zero control: second moment of the Wiener path") {
        const CoefficientSet c = build({.beta = {"v1"}, .running = "v1^2 + x1^2", .bound = 8.0});
        const PathBundle b = sample_bundle(TimeGrid::make(1.0, 64, c.knots), 0, 1, 1, 11);
        const FeynmanKacReport r = feynman_kac_check(c, three, ControlPolicy::constant(three, 1), b,
                                                     {{0, 0.0, {0.0}}}, opt);
        CHECK(r.report.passed);
        CHECK_THAT(r.pde[0], WithinAbs(0.5, 0.01));
    }
    SECTION("optimal feedback reproduces the value") {
        const CoefficientSet c = build({.beta = {"v1"}, .running = "v1^2 + x1^2", .bound = 8.0});
        const ControlLattice lattice = ControlLattice::from_box({-2.0}, {2.0}, 3);
        auto value = std::make_shared<const ValueField>(
            solve_recursive(exact_problem(c), lattice, SolveOptions{opt.mesh, nullptr}));
        const PathBundle b = sample_bundle(TimeGrid::make(1.0, 64, c.knots), 0, 1, 1, 12);
        const FeynmanKacReport r =
            feynman_kac_check(c, lattice, extract_policy(value), b, {{0, 0.0, {0.0}}, {0, 0.0, {1.0}}}, opt);
        CHECK(r.report.passed);
        const WienerEnv w = support::zero_env(c);
        const std::vector<double> origin{0.0};
        CHECK_THAT(r.pde[0], WithinAbs(value->eval(0.0, origin, w).value, 0.01));
    }
}

TEST_CASE("every fixed control costs at least the value", "[feynman-kac][property]") {
    const CoefficientSet c = build({.beta = {"v1"}, .running = "v1^2 + x1^2", .bound = 8.0});
    const ControlLattice lattice = ControlLattice::from_box({-2.0}, {2.0}, 2);
    const ValueField value = solve_recursive(exact_problem(c), lattice, SolveOptions{mesh(), nullptr});
    const PathBundle b = sample_bundle(TimeGrid::make(1.0, 32, c.knots), 0, 1, 1, 13);
    FeynmanKacOptions opt;
    opt.mesh = mesh();
    opt.branches = 1000;
    const std::vector<double> x{0.5};
    const double v = value.eval(0.0, x, support::zero_env(c)).value;
    for (std::size_t i = 0; i < lattice.size(); ++i) {
        const FeynmanKacReport r = feynman_kac_check(c, lattice, ControlPolicy::constant(lattice, i), b, {{0, 0.0, x}}, opt);
        CHECK(r.pde[0] >= v - 1e-9);
        CHECK(r.mc[0].mean >= v - 3.0 * r.mc[0].std_error);
    }
}
