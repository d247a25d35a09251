#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "shjb/field.hpp"
#include "shjb/model.hpp"
#include "shjb/sde.hpp"

namespace shjb {

class LiftError : public std::runtime_error {
public:
    explicit LiftError(const std::string& what, double achieved = std::numeric_limits<double>::quiet_NaN())
        : std::runtime_error(what), achieved_(achieved) {}
    [[nodiscard]] double achieved() const noexcept { return achieved_; }

private:
    double achieved_;
};

// A problem cut into partition intervals, each with its own coefficient
// expressions. The exact problem repeats the original coefficients; the
// lifted one carries knot-form replacements.
struct IntervalProblem {
    int d = 1;
    int m0 = 0;
    int m1 = 1;
    std::vector<double> knots{0.0, 1.0};
    std::vector<CoefficientSet> per_interval;
    Expr terminal;
    bool random = false;  // carries a live common-noise coordinate

    [[nodiscard]] std::size_t intervals() const noexcept { return knots.size() - 1; }
    [[nodiscard]] double horizon() const noexcept { return knots.back(); }
};

[[nodiscard]] IntervalProblem exact_problem(const CoefficientSet& c);

struct GapReport {
    double terminal_l2 = 0.0;   // ||G^eps||_{L2}
    double running_l2 = 0.0;    // sqrt(E int f^eps^2 dt)
    double drift_l2 = 0.0;      // sqrt(E int |beta^eps|^2 dt)
    double norm = 0.0;          // sum of the three
    std::size_t paths = 0;
    bool exact = false;         // knot form already, gaps vanish identically
    int intervals = 1;
};

struct LiftedCoefficientSet {
    CoefficientSet original;                  // knots replaced by the partition in use
    IntervalProblem problem;                  // knot-form coefficients per interval
    std::vector<Expr> running_gap;            // per interval, sup over (x, v) taken when sampling
    std::vector<Expr> drift_gap;
    Expr terminal_gap;
    GapReport gaps;
    double lipschitz = 1.0;                   // L_c
    double eps_target = 0.0;
};

struct LiftOptions {
    double eps_target = 0.1;
    int max_intervals = 3;
    std::size_t paths = 4000;
    std::size_t steps_per_interval = 96;
    std::uint64_t seed = 7;
    int x_samples = 9;                        // per state axis when the gap depends on x
    std::vector<double> x_lo{-2.0};
    std::vector<double> x_hi{2.0};
};

[[nodiscard]] LiftedCoefficientSet lift_coefficients(const CoefficientSet& c, const ControlLattice& lattice,
                                                     const LiftOptions& options);
[[nodiscard]] GapReport measure_gaps(const LiftedCoefficientSet& lifted, const ControlLattice& lattice,
                                     const LiftOptions& options);

// The gap processes as functions of the Wiener information at time t, with
// the sup over (x, v) taken on the sampling grid of `options`.
struct GapProcesses {
    std::function<double(double t, const WienerEnv& w)> running;
    std::function<double(double t, const WienerEnv& w)> drift;
    std::function<double(const WienerEnv& w)> terminal;
};
[[nodiscard]] GapProcesses gap_processes(const LiftedCoefficientSet& lifted, const ControlLattice& lattice,
                                         const LiftOptions& options);

struct SolveOptions {
    MeshSpec mesh;
    const ControlPolicy* fixed_policy = nullptr;  // linear mode: march J(.;theta) instead of the min
};

struct IntervalSolution {
    std::vector<double> times;
    std::vector<double> values;         // [slice][node]
    std::vector<std::int32_t> argmin;   // [slice][node]
    std::size_t steps = 0;
};

// Empty field with axes, knots and frozen meshes laid out for `problem`.
[[nodiscard]] ValueField plan_field(const IntervalProblem& problem, const ControlLattice& lattice,
                                    const MeshSpec& mesh, const std::string& producer);

// Backward explicit march of one interval for one frozen-knot instance.
[[nodiscard]] IntervalSolution solve_interval(const IntervalProblem& problem, const ControlLattice& lattice,
                                              const ValueField& layout, std::size_t interval,
                                              std::span<const double> frozen_values,
                                              std::span<const double> terminal_slice, const SolveOptions& options,
                                              std::size_t min_steps = 0);

[[nodiscard]] ValueField solve_recursive(const IntervalProblem& problem, const ControlLattice& lattice,
                                         const SolveOptions& options);
[[nodiscard]] ValueField solve_recursive(const LiftedCoefficientSet& lifted, const ControlLattice& lattice,
                                         const SolveOptions& options);

[[nodiscard]] ControlPolicy extract_policy(std::shared_ptr<const ValueField> field);

// The m-vector of martingale integrands: D_y on the common-noise block, zero elsewhere.
using DomegaEvaluator = std::function<std::vector<double>(double t, std::span<const double> x, const WienerEnv& w)>;
[[nodiscard]] DomegaEvaluator domega_field(std::shared_ptr<const ValueField> field);

// Helpers shared with the backward-induction oracle.
namespace layout {
[[nodiscard]] std::vector<double> frozen_values(const IntervalBlock& block, std::size_t instance);
[[nodiscard]] WienerEnv node_env(const ValueField& field, std::size_t interval, std::span<const double> frozen,
                                 double y);
[[nodiscard]] std::vector<double> terminal_slice(const ValueField& field, const IntervalProblem& problem,
                                                 std::size_t instance);
// Initial slice of interval i seen as terminal data of interval i-1 instance `instance`.
[[nodiscard]] std::vector<double> transfer_slice(const ValueField& field, std::size_t interval,
                                                 std::size_t instance);
void fill_dy(ValueField& field);
void node_point(const ValueField& field, std::size_t flat, double* x, double& y);
}  // namespace layout

}  // namespace shjb
