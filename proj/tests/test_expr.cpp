#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "shjb/expr.hpp"
#include "shjb/rng.hpp"

using namespace shjb;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

double eval_at(const Expr& e, double t, std::vector<double> x, std::vector<double> v = {}, std::vector<double> w = {},
               std::vector<double> k = {}) {
    EvalEnv env;
    env.t = t;
    env.x = x.data();
    env.v = v.data();
    env.w = w.data();
    env.k = k.data();
    return e.eval(env);
}

// Random total expression (no division or powers) and the variables it uses.
Expr random_tree(const CounterRng& rng, std::uint64_t& counter, int depth, std::set<std::string>& used) {
    const double pick = rng.uniform(counter++, 0);
    if (depth == 0 || pick < 0.25) {
        const double which = rng.uniform(counter++, 1);
        if (which < 0.2) return Expr::constant(std::round(rng.normal(counter++, 2) * 100.0) / 100.0);
        VarRef ref;
        if (which < 0.3) {
            ref.kind = VarKind::time;
        } else if (which < 0.55) {
            ref = {VarKind::state, static_cast<int>(rng.uniform(counter++, 3) * 2.0)};
        } else if (which < 0.7) {
            ref = {VarKind::control, 0};
        } else if (which < 0.85) {
            ref = {VarKind::live, static_cast<int>(rng.uniform(counter++, 3) * 2.0)};
        } else {
            ref = {VarKind::knot, static_cast<int>(rng.uniform(counter++, 3) * 2.0)};
        }
        used.insert(var_name(ref));
        return Expr::variable(ref);
    }
    static const Op unary[] = {Op::neg, Op::sin, Op::cos, Op::tanh, Op::abs};
    static const Op binary[] = {Op::add, Op::sub, Op::mul, Op::min, Op::max};
    if (pick < 0.45) {
        const Op op = unary[static_cast<int>(rng.uniform(counter++, 4) * 5.0)];
        return Expr::unary(op, random_tree(rng, counter, depth - 1, used));
    }
    const Op op = binary[static_cast<int>(rng.uniform(counter++, 4) * 5.0)];
    Expr lhs = random_tree(rng, counter, depth - 1, used);
    Expr rhs = random_tree(rng, counter, depth - 1, used);
    return Expr::binary(op, lhs, rhs);
}

}  // namespace

TEST_CASE("parse records the free variables", "[expr]") {
    const Expr e = Expr::parse("x1^2 + tanh(t)");
    CHECK(e.free_var_names() == std::set<std::string>{"x1", "t"});
    CHECK_FALSE(e.is_random());
}

TEST_CASE("arithmetic evaluation", "[expr]") {
    const Expr e = Expr::parse("v1*x1 - 0.5");
    CHECK(eval_at(e, 0.0, {3.0}, {2.0}) == 5.5);
}

TEST_CASE("Wiener variables mark an expression random", "[expr]") {
    const Expr e = Expr::parse("k1 + w1");
    CHECK(e.free_var_names() == std::set<std::string>{"k1", "w1"});
    CHECK(e.is_random());
    CHECK(e.references(VarKind::knot));
    CHECK(e.references(VarKind::live));
}

TEST_CASE("operator precedence and functions", "[expr]") {
    CHECK(eval_at(Expr::parse("2 + 3 * 4"), 0.0, {0.0}) == 14.0);
    CHECK(eval_at(Expr::parse("-2^2"), 0.0, {0.0}) == -4.0);
    CHECK(eval_at(Expr::parse("2^3^2"), 0.0, {0.0}) == 512.0);
    CHECK_THAT(eval_at(Expr::parse("exp(x1) * cos(0)"), 0.0, {1.0}), WithinRel(std::exp(1.0), 1e-15));
    CHECK(eval_at(Expr::parse("min(x1, 2) + max(x1, 2) + abs(-3)"), 0.0, {5.0}) == 10.0);
    CHECK_THAT(eval_at(Expr::parse("sin(t) + tanh(x1)"), 0.3, {0.2}), WithinAbs(std::sin(0.3) + std::tanh(0.2), 1e-15));
}

TEST_CASE("domain errors are flagged", "[expr]") {
    CHECK_THROWS_AS(eval_at(Expr::parse("1 / x1"), 0.0, {0.0}), DomainError);
    CHECK_THROWS_AS(eval_at(Expr::parse("x1 ^ 0.5"), 0.0, {-1.0}), DomainError);
    CHECK(eval_at(Expr::parse("x1 ^ 2"), 0.0, {-3.0}) == 9.0);
}

TEST_CASE("malformed sources are rejected with a position", "[expr]") {
    CHECK_THROWS_AS(Expr::parse("x1 +"), ParseError);
    CHECK_THROWS_AS(Expr::parse("foo(x1)"), ParseError);
    CHECK_THROWS_AS(Expr::parse("(x1"), ParseError);
    CHECK_THROWS_AS(Expr::parse("x0"), ParseError);
    CHECK_THROWS_AS(Expr::parse("y1"), ParseError);
}

TEST_CASE("substitution replaces one variable", "[expr]") {
    const Expr e = Expr::parse("w1 * x1 + w1");
    const Expr s = e.substitute({VarKind::live, 0}, Expr::variable({VarKind::knot, 1}));
    CHECK(s.free_var_names() == std::set<std::string>{"k2", "x1"});
    CHECK(eval_at(s, 0.0, {2.0}, {}, {}, {0.0, 3.0}) == 9.0);
}

TEST_CASE("random trees: free variables match usage and unparse round-trips", "[expr][property]") {
    const CounterRng rng(20240611);
    std::uint64_t counter = 0;
    for (int trial = 0; trial < 200; ++trial) {
        std::set<std::string> used;
        const Expr e = random_tree(rng, counter, 5, used);
        CHECK(e.free_var_names() == used);
        const Expr back = Expr::parse(e.unparse());
        CHECK(back.free_var_names() == used);
        for (int point = 0; point < 5; ++point) {
            const double t = rng.uniform(counter++, 7);
            const std::vector<double> x{rng.normal(counter++, 8), rng.normal(counter++, 8)};
            const std::vector<double> v{rng.normal(counter++, 8)};
            const std::vector<double> w{rng.normal(counter++, 8), rng.normal(counter++, 8)};
            const std::vector<double> k{rng.normal(counter++, 8), rng.normal(counter++, 8)};
            const double a = eval_at(e, t, x, v, w, k);
            const double b = eval_at(back, t, x, v, w, k);
            REQUIRE(std::isfinite(a));
            CHECK_THAT(b, WithinAbs(a, 1e-12 * (1.0 + std::fabs(a))));
        }
    }
}
