#include <catch_amalgamated.hpp>

#include <cmath>
#include <memory>
#include <vector>

#include "shjb/paths.hpp"
#include "shjb/sde.hpp"
#include "shjb/value_mc.hpp"
#include "support.hpp"

using namespace shjb;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;
using support::build;

namespace {

// V(t, x) = a(t) x^2 + b(t) with a' = a^2 - 1, b' = -a, a(T) = b(T) = 0, by RK4 from T backwards.
struct Riccati {
    double a = 0.0;
    double b = 0.0;
};

Riccati riccati(double horizon, double t, int steps = 2000) {
    Riccati r;
    const double h = (horizon - t) / steps;
    for (int i = 0; i < steps; ++i) {
        // in reversed time s = T - t: da/ds = 1 - a^2, db/ds = a
        auto fa = [](double a) { return 1.0 - a * a; };
        const double k1 = fa(r.a), k2 = fa(r.a + 0.5 * h * k1), k3 = fa(r.a + 0.5 * h * k2), k4 = fa(r.a + h * k3);
        const double l1 = r.a, l2 = r.a + 0.5 * h * k1, l3 = r.a + 0.5 * h * k2, l4 = r.a + h * k3;
        r.b += h / 6.0 * (l1 + 2 * l2 + 2 * l3 + l4);
        r.a += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    return r;
}

CoefficientSet lq() { return build({.beta = {"v1"}, .running = "v1^2 + x1^2", .bound = 8.0}); }

MeshSpec mesh(double h = 0.1, double dt = 0.01) {
    MeshSpec m;
    m.x_lo = {-4.0};
    m.x_hi = {4.0};
    m.h = h;
    m.dt = dt;
    return m;
}

PathBundle bundle(std::size_t steps, std::size_t count, std::uint64_t seed) {
    return sample_bundle(TimeGrid::make(1.0, steps, {0.0, 1.0}), 0, 1, count, seed);
}

const std::vector<double> origin{0.0};
const ControlLattice three = ControlLattice::from_points({{-1.0}, {0.0}, {1.0}});

}  // namespace

TEST_CASE("Riccati helper agrees with the closed form", "[oracle-helper]") {
    const Riccati r = riccati(1.0, 0.25);
    CHECK_THAT(r.a, WithinAbs(std::tanh(0.75), 1e-10));
    CHECK_THAT(r.b, WithinAbs(std::log(std::cosh(0.75)), 1e-10));
}

TEST_CASE("cost functional examples", "[cost]") {
    SECTION("constant running cost") {
        const CoefficientSet c = build({.running = "1"});
        const MCEstimate e = cost_functional(c, ControlPolicy::constant(three, 1), 0.25, origin, bundle(32, 50, 1));
        CHECK_THAT(e.mean, WithinAbs(0.75, 1e-12));
        CHECK_THAT(e.std_error, WithinAbs(0.0, 1e-12));
    }
    SECTION("linear terminal under the lowest control") {
        const CoefficientSet c = build({.beta = {"v1"}, .terminal = "x1", .bound = 4.0});
        const std::vector<double> x{0.4};
        const MCEstimate e = cost_functional(c, ControlPolicy::constant(three, 0), 0.5, x, bundle(32, 4000, 2));
        CHECK(std::fabs(e.mean - (0.4 - 0.5)) <= 4.0 * e.std_error);
    }
    SECTION("LQ with zero control: left-point sum of E[W_s^2] = s") {
        const std::size_t steps = 32;
        const MCEstimate e = cost_functional(lq(), ControlPolicy::constant(three, 1), 0.0, origin, bundle(steps, 20000, 3));
        double discrete = 0.0;
        const double dt = 1.0 / steps;
        for (std::size_t k = 0; k < steps; ++k) discrete += k * dt * dt;
        CHECK(std::fabs(e.mean - discrete) <= 4.0 * e.std_error);
        CHECK_THAT(discrete, WithinAbs(0.5, 0.5 * dt + 1e-12));
    }
}

TEST_CASE("oracle on a control-independent cost", "[oracle]") {
    const CoefficientSet c = build({.beta = {"v1"}, .running = "1", .bound = 2.0});
    const ValueField f = backward_induction_oracle(c, three, mesh(0.2, 0.05));
    const WienerEnv w = support::zero_env(c);
    for (double t : {0.0, 0.3, 0.75, 1.0})
        for (double x : {-3.0, -1.1, 0.0, 2.5}) {
            const std::vector<double> pt{x};
            CHECK_THAT(f.eval(t, pt, w).value, WithinAbs(1.0 - t, 1e-10));
        }
}

TEST_CASE("oracle on the linear terminal problem", "[oracle]") {
    const CoefficientSet c = build({.beta = {"v1"}, .terminal = "x1", .bound = 4.0});
    const ValueField f = backward_induction_oracle(c, three, mesh(0.2, 0.05));
    const WienerEnv w = support::zero_env(c);
    for (double t : {0.0, 0.5, 1.0})
        for (double x : {-2.0, 0.3, 1.7}) {
            const std::vector<double> pt{x};
            CHECK_THAT(f.eval(t, pt, w).value, WithinAbs(x - (1.0 - t), 1e-9));
        }
    const ControlPolicy policy = ControlPolicy::feedback(std::make_shared<const ValueField>(f));
    PolicyMemory memory;
    const std::vector<double> pt{0.5};
    CHECK(policy.choose(0, 0.2, pt, w, memory) == 0);
}

TEST_CASE("oracle terminal identity and LQ value", "[oracle]") {
    const CoefficientSet c = lq();
    const ControlLattice lat = ControlLattice::from_box({-2.0}, {2.0}, 3);
    const ValueField f = backward_induction_oracle(c, lat, mesh());
    const WienerEnv w = support::zero_env(c);
    for (std::size_t i = 0; i < f.axes[0].n; ++i) {
        const std::vector<double> pt{f.axes[0].node(i)};
        CHECK(f.eval(1.0, pt, w).value == 0.0);
    }
    const Riccati r = riccati(1.0, 0.0);
    const double value = f.eval(0.0, origin, w).value;
    // lattice spacing 0.5 and the coarse step bias the value upwards by a few percent
    CHECK_THAT(value, WithinRel(r.b, 0.05));
    CHECK(value >= r.b - 0.005);
    const std::vector<double> off{1.0};
    CHECK_THAT(f.eval(0.0, off, w).value, WithinRel(r.a + r.b, 0.05));
}

TEST_CASE("brute force over open-loop schedules", "[brute]") {
    SECTION("control-independent cost") {
        const CoefficientSet c = build({.running = "1"});
        const BruteResult r = brute_value(c, three, 0.5, origin, bundle(32, 20, 4), 2);
        CHECK_THAT(r.estimate.mean, WithinAbs(0.5, 1e-12));
    }
    SECTION("linear terminal: bang schedule") {
        const CoefficientSet c = build({.beta = {"v1"}, .terminal = "x1", .bound = 4.0});
        const std::vector<double> x{0.2};
        const BruteResult r = brute_value(c, three, 0.0, x, bundle(32, 200, 5), 1);
        CHECK(r.schedule == std::vector<std::size_t>{0});
        CHECK(std::fabs(r.estimate.mean - (0.2 - 1.0)) <= 4.0 * r.estimate.std_error + 1e-12);
    }
    SECTION("LQ: larger families never cost more and approach the oracle") {
        const CoefficientSet c = lq();
        const ControlLattice coarse = ControlLattice::from_box({-2.0}, {2.0}, 2);
        const PathBundle b = bundle(32, 400, 6);
        const double one = brute_value(c, coarse, 0.0, origin, b, 1).estimate.mean;
        const double two = brute_value(c, coarse, 0.0, origin, b, 2).estimate.mean;
        const double four = brute_value(c, coarse, 0.0, origin, b, 4).estimate.mean;
        const double finer = brute_value(c, coarse.refined(), 0.0, origin, b, 2).estimate.mean;
        CHECK(two <= one);
        CHECK(four <= two);
        CHECK(finer <= two);
        const double oracle = backward_induction_oracle(c, coarse, mesh()).eval(0.0, origin, support::zero_env(c)).value;
        CHECK(std::fabs(four - oracle) <= std::fabs(one - oracle));
    }
}

TEST_CASE("value is an infimum over tested controls", "[brute][property]") {
    const CoefficientSet c = lq();
    const ControlLattice lat = ControlLattice::from_box({-2.0}, {2.0}, 3);
    const ValueField f = backward_induction_oracle(c, lat, mesh());
    const double value = f.eval(0.0, origin, support::zero_env(c)).value;
    const PathBundle b = bundle(64, 1000, 7);
    for (std::size_t i = 0; i < lat.size(); ++i) {
        const MCEstimate e = cost_functional(c, ControlPolicy::constant(lat, i), 0.0, origin, b);
        CHECK(value <= e.mean + 3.0 * e.std_error);
    }
}

TEST_CASE("dynamic programming residual", "[dpp]") {
    SECTION("control-independent cost") {
        const CoefficientSet c = build({.running = "1"});
        auto oracle = std::make_shared<const ValueField>(backward_induction_oracle(c, three, mesh(0.2, 0.05)));
        const DppReport r = dpp_residual(c, three, 0.0, 0.5, origin, bundle(32, 50, 8), 1, oracle);
        CHECK_THAT(r.residual, WithinAbs(0.0, 1e-10));
        CHECK(r.pass);
    }
    SECTION("terminal intermediate time") {
        const CoefficientSet c = lq();
        auto oracle = std::make_shared<const ValueField>(backward_induction_oracle(c, three, mesh()));
        const DppReport r = dpp_residual(c, three, 0.0, 1.0, origin, bundle(32, 200, 9), 1, oracle);
        CHECK(r.residual == 0.0);
    }
    SECTION("LQ between zero and the half horizon") {
        const CoefficientSet c = lq();
        const ControlLattice lat = ControlLattice::from_box({-2.0}, {2.0}, 3);
        auto oracle = std::make_shared<const ValueField>(backward_induction_oracle(c, lat, mesh()));
        const ValueField coarse = backward_induction_oracle(c, lat, mesh(0.2, 0.04));
        const DppReport r = dpp_residual(c, lat, 0.0, 0.5, origin, bundle(64, 1000, 10), 2, oracle, &coarse);
        CHECK(r.pass);
        CHECK(r.residual <= r.threshold);
    }
}

TEST_CASE("supermartingale property of the value process", "[supermartingale]") {
    const CoefficientSet c = lq();
    const ControlLattice lat = ControlLattice::from_box({-2.0}, {2.0}, 3);
    auto oracle = std::make_shared<const ValueField>(backward_induction_oracle(c, lat, mesh()));
    const PathBundle b = bundle(64, 2000, 11);
    const std::vector<double> times{0.0, 0.25, 0.5, 1.0};
    SECTION("along the oracle feedback the drift vanishes") {
        const SupermartingaleReport r =
            supermartingale_check(c, *oracle, ControlPolicy::feedback(oracle), origin, times, b, 0.01);
        CHECK(r.report.passed);
        for (std::size_t w = 0; w < r.gaps.size(); ++w) CHECK(std::fabs(r.gaps[w]) <= 3.0 * r.std_errors[w] + 0.01);
    }
    SECTION("an extreme constant control leaves a strictly positive gap") {
        const SupermartingaleReport r =
            supermartingale_check(c, *oracle, ControlPolicy::constant(lat, lat.size() - 1), origin, times, b, 0.01);
        CHECK(r.report.passed);
        for (std::size_t w = 0; w < r.gaps.size(); ++w) CHECK(r.gaps[w] > 3.0 * r.std_errors[w]);
    }
    SECTION("control-independent cost: both sides agree exactly") {
        const CoefficientSet flat = build({.running = "1"});
        const ValueField f = backward_induction_oracle(flat, three, mesh(0.2, 0.05));
        const SupermartingaleReport r =
            supermartingale_check(flat, f, ControlPolicy::constant(three, 1), origin, times, bundle(64, 20, 12), 0.0);
        for (double g : r.gaps) CHECK_THAT(g, WithinAbs(0.0, 1e-10));
    }
}

TEST_CASE("Lipschitz probe", "[lipschitz]") {
    const PathBundle b = bundle(32, 10, 13);
    const std::vector<double> lo{-2.0}, hi{2.0};
    SECTION("state-free value") {
        const CoefficientSet c = build({.running = "1"});
        const ValueField f = backward_induction_oracle(c, three, mesh(0.2, 0.05));
        CHECK(lipschitz_probe(f, 0.0, 200, b, lo, hi, 1) <= 1e-9);
    }
    SECTION("unit slope") {
        const CoefficientSet c = build({.beta = {"v1"}, .terminal = "x1", .bound = 4.0});
        const ValueField f = backward_induction_oracle(c, three, mesh(0.2, 0.05));
        CHECK_THAT(lipschitz_probe(f, 0.5, 200, b, lo, hi, 2), WithinAbs(1.0, 1e-9));
    }
    SECTION("LQ slope bound") {
        const ValueField f = backward_induction_oracle(lq(), ControlLattice::from_box({-2.0}, {2.0}, 3), mesh());
        CHECK(lipschitz_probe(f, 0.0, 400, b, lo, hi, 3) <= 2.0 * std::tanh(1.0) * 2.0 + 0.1);
    }
}

TEST_CASE("value bound and time modulus", "[bound]") {
    SECTION("constant cost: sup equals the horizon") {
        const CoefficientSet c = build({.running = "1"});
        const ValueField f = backward_induction_oracle(c, three, mesh(0.2, 0.05));
        const BoundReport r = bound_check(c, f, ControlPolicy::constant(three, 1), origin, bundle(32, 20, 14), 200, 3);
        CHECK(r.report.passed);
        CHECK(r.sup <= 1.0 + 1e-10);
        CHECK(r.sup >= 0.9);
    }
    SECTION("LQ: modulus shrinks like the square root of the step") {
        const CoefficientSet c = lq();
        const ControlLattice lat = ControlLattice::from_box({-2.0}, {2.0}, 3);
        auto f = std::make_shared<const ValueField>(backward_induction_oracle(c, lat, mesh()));
        const ControlPolicy policy = ControlPolicy::feedback(f);
        const double coarse = bound_check(c, *f, policy, origin, bundle(16, 400, 15), 50, 4).modulus;
        const double fine = bound_check(c, *f, policy, origin, bundle(64, 400, 15), 50, 4).modulus;
        const double rate = std::log(coarse / fine) / std::log(4.0);
        CHECK(rate >= 0.35);
        CHECK(rate <= 0.65);
    }
}
