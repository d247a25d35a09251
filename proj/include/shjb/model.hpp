#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "shjb/expr.hpp"

namespace shjb {

// Wiener values visible to the coefficients at one instant: the live value of
// every Wiener coordinate (common-noise block first) and the knot values
// W~ at t_i ^ t, laid out knot-major.
struct WienerEnv {
    std::vector<double> live;
    std::vector<double> knots;
};

struct CoefficientSet {
    int d = 1;
    int m0 = 0;
    int m1 = 1;
    int n = 1;
    std::vector<double> knots{0.0, 1.0};  // t_0 = 0 < ... < t_N = T
    std::vector<Expr> beta;               // d entries
    std::vector<Expr> sigma_tilde;        // d x m0, row major
    std::vector<Expr> sigma_bar;          // d x m1, row major
    Expr running_cost;
    Expr terminal_cost;
    double bound_l = 1.0;
    bool deterministic_diffusion = true;  // superparabolic mode: no w/k inside sigma

    [[nodiscard]] int m() const noexcept { return m0 + m1; }
    [[nodiscard]] int knot_count() const noexcept { return static_cast<int>(knots.size()) - 1; }
    [[nodiscard]] double horizon() const noexcept { return knots.back(); }

    // Throws std::invalid_argument when an invariant is broken.
    void check() const;

    [[nodiscard]] const Expr& sigma(int row, int col) const {
        return col < m0 ? sigma_tilde[static_cast<std::size_t>(row * m0 + col)]
                        : sigma_bar[static_cast<std::size_t>(row * m1 + col - m0)];
    }

    [[nodiscard]] std::vector<const Expr*> all_exprs() const;
    [[nodiscard]] bool is_random() const;  // any w/k reference anywhere
};

[[nodiscard]] EvalEnv make_env(double t, const double* x, const double* v, const WienerEnv& w);

// Coefficient values at one (t, x, v, wEnv).
struct PointCoefficients {
    Eigen::VectorXd beta;
    Eigen::MatrixXd sigma;  // d x m
    double cost = 0.0;
};

void eval_point(const CoefficientSet& c, const EvalEnv& env, PointCoefficients& out);
void eval_drift(const CoefficientSet& c, const EvalEnv& env, double* out);
void eval_sigma(const CoefficientSet& c, const EvalEnv& env, double* out);  // d x m row major

class ControlLattice {
public:
    [[nodiscard]] static ControlLattice from_box(std::vector<double> lo, std::vector<double> hi, int level);
    [[nodiscard]] static ControlLattice from_points(const std::vector<std::vector<double>>& points);

    [[nodiscard]] ControlLattice refined() const;
    [[nodiscard]] std::size_t size() const noexcept { return count_; }
    [[nodiscard]] int dim() const noexcept { return dim_; }
    [[nodiscard]] int level() const noexcept { return level_; }
    [[nodiscard]] bool is_box() const noexcept { return box_; }
    [[nodiscard]] const std::vector<double>& lo() const noexcept { return lo_; }
    [[nodiscard]] const std::vector<double>& hi() const noexcept { return hi_; }
    [[nodiscard]] const double* point(std::size_t i) const noexcept { return coords_.data() + i * dim_; }
    [[nodiscard]] std::vector<double> point_vec(std::size_t i) const {
        return {point(i), point(i) + dim_};
    }
    [[nodiscard]] std::size_t index_of(std::span<const double> v) const;  // size() when absent
    [[nodiscard]] std::size_t lowest() const noexcept { return 0; }

private:
    int dim_ = 1;
    int level_ = 0;
    bool box_ = false;
    std::vector<double> lo_, hi_;
    std::vector<double> coords_;
    std::size_t count_ = 0;
};

struct Check {
    std::string name;
    double measured = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

struct ValidationReport {
    bool passed = true;
    std::vector<Check> checks;
    std::size_t samples_used = 0;

    void add(std::string name, double measured, double threshold, bool pass);
    [[nodiscard]] const Check* find(const std::string& name) const;
};

// Where the statistical validators draw their points.
struct SamplingDomain {
    std::vector<double> x_lo, x_hi;
    double wiener_range = 3.0;  // |w|, |k| drawn uniformly up to this
    std::size_t budget = 100000;
    double tolerance = 0.01;
    std::uint64_t seed = 1;
};

[[nodiscard]] ValidationReport validate_a1(const CoefficientSet& c, const ControlLattice& lattice,
                                           const SamplingDomain& domain);
[[nodiscard]] ValidationReport validate_a3(const CoefficientSet& c, const ControlLattice& lattice,
                                           const SamplingDomain& domain, double lambda_min);

struct HamiltonianResult {
    double value = 0.0;
    std::size_t argmin = 0;
    std::vector<double> control;
};

// min over the lattice of tr(1/2 s s' A + s B) + beta . p + f; ties go to the
// lexicographically smallest point. A is d x d, B is m x d.
[[nodiscard]] HamiltonianResult hamiltonian(const CoefficientSet& c, const ControlLattice& lattice, double t,
                                            std::span<const double> x, const WienerEnv& w,
                                            const Eigen::VectorXd& p, const Eigen::MatrixXd& a,
                                            const Eigen::MatrixXd& b);

// Derivative blocks of a test field at one point.
struct FieldJet {
    double value = 0.0;
    double dt = 0.0;             // drift part of the time differential
    Eigen::VectorXd grad;        // d
    Eigen::MatrixXd hess;        // d x d
    Eigen::MatrixXd domega_grad; // m x d, spatial gradient of the martingale integrand
};

[[nodiscard]] FieldJet zero_jet(int d, int m);

[[nodiscard]] double generator_Lv(const CoefficientSet& c, std::span<const double> v, double t,
                                  std::span<const double> x, const WienerEnv& w, const FieldJet& phi);

}  // namespace shjb
