#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "shjb/field.hpp"
#include "shjb/lift.hpp"
#include "shjb/model.hpp"
#include "shjb/paths.hpp"
#include "shjb/sde.hpp"
#include "shjb/value_mc.hpp"

namespace shjb {

using DriverProcess = std::function<double(double t, const WienerEnv& w)>;
using TerminalPayoff = std::function<double(const WienerEnv& w)>;

// Backward equation with an exogenous driver: Y_s = E_s[terminal + int_s^T driver dt].
// The payoff reads the knots of `knots` (and the live value at T, which equals k_N).
struct BsdeProblem {
    std::vector<double> knots{0.0, 1.0};
    int m0 = 1;
    int m1 = 0;
    TerminalPayoff terminal;
    DriverProcess driver;  // empty means zero
    bool random = true;    // false when neither part reads the Wiener path; Z is then exactly zero
};

// Expression form: the terminal may reference knots only; the driver may
// reference t, live w and knots. Throws std::invalid_argument otherwise.
[[nodiscard]] BsdeProblem bsde_problem(const Expr& terminal, const Expr& driver, const std::vector<double>& knots,
                                       int m0, int m1);

// Terminal G^eps and driver f^eps + K beta^eps of a lifted problem.
[[nodiscard]] BsdeProblem envelope_bsde(const LiftedCoefficientSet& lifted, const ControlLattice& lattice,
                                        const LiftOptions& options, double gradient_constant);

enum class BsdeMethod { quadrature, regression };

struct BSDESolution {
    BsdeMethod method = BsdeMethod::quadrature;
    std::size_t count = 0;
    std::size_t steps = 0;
    int m0 = 1;
    std::vector<double> y;         // [path][step], step 0..steps; NaN where not computed
    std::vector<double> z;         // [path][step][m0], step 0..steps-1
    std::vector<double> y_error;   // regression standard errors, same layout as y

    [[nodiscard]] double y_at(std::size_t path, std::size_t step) const { return y[path * (steps + 1) + step]; }
    [[nodiscard]] const double* z_at(std::size_t path, std::size_t step) const {
        return z.data() + (path * steps + step) * static_cast<std::size_t>(m0);
    }
};

// Conditional expectations by tensor Gauss-Hermite over future knot
// increments and Gauss-Legendre in time; tables of the value at each knot
// are built once over the frozen-knot node mesh.
class BsdeQuadrature {
public:
    BsdeQuadrature(BsdeProblem problem, std::size_t legendre_nodes = 8);

    // Y at time s given the live common-noise value and the knot values already fixed.
    [[nodiscard]] double value(double s, std::span<const double> live, std::span<const double> frozen) const;
    // Centered difference of `value` in the live coordinates; knots fixed at s stay put.
    [[nodiscard]] std::vector<double> gradient(double s, std::span<const double> live, std::span<const double> frozen,
                                               double step) const;
    [[nodiscard]] std::size_t interval_of(double s) const noexcept;
    [[nodiscard]] const BsdeProblem& problem() const noexcept { return problem_; }

private:
    [[nodiscard]] double running(std::size_t interval, double s, const double* live, const double* frozen) const;
    [[nodiscard]] double table_at(std::size_t knot, const double* frozen) const;  // knot >= 1
    [[nodiscard]] double continuation(std::size_t interval, double s, const double* live,
                                      const double* frozen) const;
    [[nodiscard]] WienerEnv env(std::size_t interval, const double* live, const double* frozen) const;

    BsdeProblem problem_;
    std::size_t legendre_;
    std::vector<std::vector<double>> nodes_;   // per knot: frozen mesh of that knot time
    std::vector<std::vector<double>> tables_;  // per knot 1..N-1: values on the frozen mesh
    std::vector<double> gauss_points_;         // [point][m0]
    std::vector<double> gauss_weights_;
};

struct BsdeOptions {
    std::size_t legendre_nodes = 8;
    double fd_step = 1e-3;
    std::vector<std::size_t> steps;  // grid steps to fill; empty means all
};

[[nodiscard]] BSDESolution solve_bsde(const BsdeProblem& problem, const PathBundle& bundle,
                                      const BsdeOptions& options = {});

// Branch-ensemble estimates: Y as the branch mean of the payoff, Z as
// E[(payoff - Y) dW~]/dt over the first branch increment.
[[nodiscard]] BSDESolution solve_bsde_regression(const BsdeProblem& problem, const PathBundle& bundle,
                                                 const std::vector<std::size_t>& steps, std::size_t branches,
                                                 std::uint64_t seed);

struct Envelope {
    std::shared_ptr<const ValueField> field;
    std::shared_ptr<const PathBundle> bundle;
    BSDESolution bsde;
    double gradient_constant = 0.0;  // K
    double eps_achieved = 0.0;
    GapReport gaps;

    [[nodiscard]] double value(std::size_t path, std::size_t step, std::span<const double> x) const;
    [[nodiscard]] double upper(std::size_t path, std::size_t step, std::span<const double> x) const;
    [[nodiscard]] double lower(std::size_t path, std::size_t step, std::span<const double> x) const;
    // m-vector: the field's martingale integrand plus or minus Z on the common-noise block.
    [[nodiscard]] std::vector<double> domega(std::size_t path, std::size_t step, std::span<const double> x,
                                             bool upper_side) const;
};

[[nodiscard]] Envelope build_envelopes(std::shared_ptr<const ValueField> field,
                                       std::shared_ptr<const PathBundle> bundle, BSDESolution bsde,
                                       double gradient_constant, const GapReport& gaps);

struct SandwichPoint {
    std::size_t path = 0;
    std::size_t step = 0;
    std::vector<double> x;
    double reference = 0.0;
    double reference_error = 0.0;  // one standard error, or the reference mesh tolerance
};

struct SandwichRow {
    double lower = 0.0;
    double value = 0.0;
    double reference = 0.0;
    double upper = 0.0;
    double y = 0.0;
    double band = 0.0;
};

struct SandwichReport {
    ValidationReport report;
    std::vector<SandwichRow> rows;
    double mean_abs_error = 0.0;  // mean |V^eps - reference|
};

[[nodiscard]] SandwichReport sandwich_check(const Envelope& envelope, const std::vector<SandwichPoint>& points,
                                            double tolerance);

// K0 fitted on the first entry as error/scale and asserted on the rest; the
// errors must also be non-increasing up to `slack`.
struct ErrorBoundReport {
    ValidationReport report;
    double k0 = 0.0;
};

[[nodiscard]] ErrorBoundReport error_bound_check(const std::vector<double>& scales, const std::vector<double>& errors,
                                                 double slack);

struct FeynmanKacPoint {
    std::size_t path = 0;
    double t = 0.0;
    std::vector<double> x;
};

struct FeynmanKacOptions {
    MeshSpec mesh;
    std::size_t branches = 2000;
    std::uint64_t seed = 11;
    double mesh_tolerance = 0.02;
    double truncation_tolerance = 0.05;
};

struct FeynmanKacReport {
    ValidationReport report;
    std::shared_ptr<const ValueField> field;  // J(.;theta)
    std::vector<double> pde;
    std::vector<MCEstimate> mc;
    double residual_max = 0.0;
};

// Max over interior nodes and stored slices of |dJ/dt + L^theta J + f| with
// centered differences, theta read from the field's stored controls.
[[nodiscard]] double linear_pde_residual(const ValueField& field, const IntervalProblem& problem);

// Solves the linear lifted equation for a fixed policy and compares it with
// Monte Carlo costs from branch ensembles and with its own discrete residual.
[[nodiscard]] FeynmanKacReport feynman_kac_check(const CoefficientSet& c, const ControlLattice& lattice,
                                                 const ControlPolicy& policy, const PathBundle& bundle,
                                                 const std::vector<FeynmanKacPoint>& points,
                                                 const FeynmanKacOptions& options);

}  // namespace shjb
