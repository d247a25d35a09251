#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "shjb/field.hpp"
#include "shjb/model.hpp"
#include "shjb/paths.hpp"
#include "shjb/sde.hpp"

namespace shjb {

struct PathRef {
    const PathBundle* bundle = nullptr;
    std::size_t path = 0;
};

// A random field read along one path. Adapted samplers look at the path on
// [0, t] only; the optional blocks carry analytic derivatives.
struct RandomFieldSampler {
    std::function<double(double t, std::span<const double> x, const PathRef& path)> value;
    std::function<FieldJet(double t, std::span<const double> x, const PathRef& path)> jet;
    std::function<std::vector<double>(double t, std::span<const double> x, const PathRef& path)> domega;
    bool smooth = false;
    double resolution = 0.0;  // mesh spacing of an interpolated field; difference quotients never go below it
};

class NonAdaptedError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Field of (t, x, wEnv at t); the environment is rebuilt from the path.
[[nodiscard]] RandomFieldSampler env_sampler(
    std::function<double(double t, std::span<const double> x, const WienerEnv& w)> fn);
[[nodiscard]] RandomFieldSampler field_sampler(std::shared_ptr<const ValueField> field);
// u + sign * (horizon - t)
[[nodiscard]] RandomFieldSampler shifted_sampler(RandomFieldSampler base, double sign, double horizon);

struct StochasticDerivativePair {
    double dt = 0.0;
    double dt_error = 0.0;
    std::vector<double> domega;        // m entries
    std::vector<double> domega_error;
    double dt_half = 0.0;              // same estimates with the step halved
    std::vector<double> domega_half;
    double richardson_dt = 0.0;        // 2 * half - full
    std::vector<double> richardson_domega;
    std::size_t branches = 0;
};

// Branch ensemble at (path, t): increments of u over `step` give the drift
// rate and, against the Wiener increment, the martingale integrand.
[[nodiscard]] StochasticDerivativePair estimate_derivatives(const RandomFieldSampler& u, const PathBundle& bundle,
                                                            std::size_t path, double t, std::span<const double> x,
                                                            double step, std::size_t branches, std::uint64_t seed);

// anchor + p.(x-xi) + 1/2 (x-xi)'C(x-xi) + slope (s-tau) + q.(W_s - W_tau)
struct TouchCertificate {
    bool member = false;
    double delta = 0.0;       // ball radius
    double tau_hat = 0.0;     // last stopping time probed
    double extreme_gap = 0.0; // sampled min (below) or max (above) of the conditional gap
    double band = 0.0;        // three standard errors of that gap
    std::size_t rules = 0;    // stopping rules probed
    std::string verdict;
};

struct TestFunction {
    double anchor = 0.0;
    double tau = 0.0;
    std::vector<double> xi;
    Eigen::VectorXd p;
    Eigen::MatrixXd curvature;
    double slope = 0.0;
    std::vector<double> q;      // m entries
    std::vector<double> w_tau;  // Wiener value at tau on the anchoring path
    TouchCertificate certificate;

    [[nodiscard]] double value(double s, std::span<const double> x, std::span<const double> w_s) const;
    [[nodiscard]] FieldJet jet(double s, std::span<const double> x) const;
    [[nodiscard]] RandomFieldSampler sampler() const;
};

// Random test function with anchor at (tau, xi) on `path` of `bundle`.
[[nodiscard]] TestFunction random_test_function(const PathBundle& bundle, std::size_t path, double tau,
                                                std::span<const double> xi, std::uint64_t seed);

struct ItoKunitaReport {
    double max = 0.0;
    double rms = 0.0;
    std::size_t paths = 0;
};

// |phi(T, X_T) - phi(t0, x0) - sum L^theta phi ds - sum (domega phi + D phi sigma) dW| per path.
[[nodiscard]] ItoKunitaReport ito_kunita_residual(const RandomFieldSampler& phi, const CoefficientSet& c,
                                                  const ControlPolicy& policy, std::span<const double> x0,
                                                  const PathBundle& bundle);

// below: the underlined class, conditional essinf of (phi - u) is zero
// above: the overlined class, conditional esssup of (phi - u) is zero
enum class TouchSide { below, above };

struct TouchOptions {
    double curvature = 0.05;     // added to (below) or removed from (above) the estimated Hessian
    double fd_step = 0.05;       // spatial step for p and the Hessian, raised to the sampler's resolution
    double delta = 0.1;          // ball radius
    int ball_points = 5;         // per axis
    std::size_t time_steps = 4;  // grid steps of the deterministic stopping rules
    std::size_t branches = 200;
    double slope_box = 20.0;
    std::uint64_t seed = 5;
};

[[nodiscard]] TestFunction make_touching_test(const RandomFieldSampler& u, const PathBundle& bundle,
                                              std::size_t path, double tau, std::span<const double> xi,
                                              TouchSide side, const TouchOptions& options);

struct ResidualReport {
    std::vector<double> radii;
    std::vector<double> values;   // min (sub) or max (super) over the neighbourhood mesh
    double final_value = 0.0;
    bool monotone = true;         // trend towards the limit is monotone
};

struct ResidualOptions {
    std::vector<double> radii{0.2, 0.1, 0.05};
    int space_points = 5;          // per axis
    std::size_t branches = 64;
    std::uint64_t seed = 9;
};

// Estimates of E_tau[-d_s phi - H(s, x, D phi, D^2 phi, D domega phi)] over Q+_r(tau, xi).
[[nodiscard]] ResidualReport subsolution_residual(const TestFunction& phi, const CoefficientSet& c,
                                                  const ControlLattice& lattice, const PathBundle& bundle,
                                                  std::size_t path, const ResidualOptions& options);
[[nodiscard]] ResidualReport supersolution_residual(const TestFunction& phi, const CoefficientSet& c,
                                                    const ControlLattice& lattice, const PathBundle& bundle,
                                                    std::size_t path, const ResidualOptions& options);

struct ComparisonPoint {
    std::size_t path = 0;
    double t = 0.0;
    std::vector<double> x;
    double tolerance = 0.0;
};

// u <= reference + tolerance at every point.
[[nodiscard]] ValidationReport comparison_check(const RandomFieldSampler& u, const RandomFieldSampler& reference,
                                                const PathBundle& bundle, const std::vector<ComparisonPoint>& points);

}  // namespace shjb
