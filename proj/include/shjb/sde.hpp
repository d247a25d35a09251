#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "shjb/field.hpp"
#include "shjb/model.hpp"
#include "shjb/paths.hpp"

namespace shjb {

// Per-path scratch carried by stateful policies (pasted controls remember
// which box the switch-time state fell into).
struct PolicyMemory {
    long box = -1;
};

// A rule mapping (t, X_t, wEnv at t) to a lattice index. Only present
// information is read, so every emitted control is adapted.
class ControlPolicy {
public:
    enum class Kind { open_loop, feedback, pasted, custom };
    using Rule = std::function<std::size_t(std::size_t step, double t, std::span<const double> x, const WienerEnv& w)>;

    [[nodiscard]] static ControlPolicy constant(const ControlLattice& lattice, std::size_t index);
    // indices[j] applies on [switch_times[j], switch_times[j+1]); the last piece runs to the horizon.
    [[nodiscard]] static ControlPolicy open_loop(const ControlLattice& lattice, std::vector<double> switch_times,
                                                 std::vector<std::size_t> indices);
    [[nodiscard]] static ControlPolicy feedback(std::shared_ptr<const ValueField> field);
    [[nodiscard]] static ControlPolicy custom(const ControlLattice& lattice, Rule rule);

    [[nodiscard]] Kind kind() const noexcept { return kind_; }
    [[nodiscard]] const ControlLattice& lattice() const noexcept { return lattice_; }
    [[nodiscard]] std::size_t choose(std::size_t step, double t, std::span<const double> x, const WienerEnv& w,
                                     PolicyMemory& memory) const;

private:
    friend ControlPolicy paste_controls(const ControlPolicy&, const std::vector<std::vector<double>>&,
                                        const std::vector<std::vector<double>>&,
                                        const std::vector<ControlPolicy>&, double);
    Kind kind_ = Kind::open_loop;
    ControlLattice lattice_ = ControlLattice::from_points({{0.0}});
    std::vector<double> switch_times_;
    std::vector<std::size_t> indices_;
    std::shared_ptr<const ValueField> field_;
    Rule rule_;
    // pasted
    std::shared_ptr<const ControlPolicy> base_;
    std::vector<std::vector<double>> box_lo_, box_hi_;
    std::vector<ControlPolicy> tails_;
    double switch_time_ = 0.0;
};

// Base policy before `switch_time`, then the tail policy of the box holding
// X at the switch time (nearest box when outside all of them).
[[nodiscard]] ControlPolicy paste_controls(const ControlPolicy& base, const std::vector<std::vector<double>>& box_lo,
                                           const std::vector<std::vector<double>>& box_hi,
                                           const std::vector<ControlPolicy>& tails, double switch_time);

struct StatePaths {
    std::size_t start_step = 0;
    double start_time = 0.0;
    std::vector<double> start_state;
    int d = 1;
    std::size_t steps = 0;                   // stored states per path = steps + 1
    std::size_t count = 0;
    std::vector<double> values;              // [path][k][d], k = 0..steps
    std::vector<std::size_t> controls;       // [path][k], k = 0..steps-1
    std::vector<char> failed;                // non-finite state encountered
    bool ok = true;
    std::string failure;

    [[nodiscard]] const double* state(std::size_t path, std::size_t k) const noexcept {
        return values.data() + (path * (steps + 1) + k) * static_cast<std::size_t>(d);
    }
};

// Raised for coefficient domain errors with the failing path and step.
class SimulationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Visitor invoked before each Euler step: (path, step, t, x, control index, env).
using StepVisitor = std::function<void(std::size_t, std::size_t, double, const double*, std::size_t, const WienerEnv&)>;

// One path from `start_step` to the horizon; returns false when the state
// left the finite range. `final_state` receives X_T.
bool simulate_path(const CoefficientSet& c, const ControlPolicy& policy, const PathBundle& bundle, std::size_t path,
                   std::size_t start_step, std::span<const double> x0, const StepVisitor& visit,
                   double* final_state, double* trajectory = nullptr, std::size_t* trace = nullptr,
                   std::size_t stop_step = static_cast<std::size_t>(-1));

[[nodiscard]] StatePaths simulate(const CoefficientSet& c, const ControlPolicy& policy, double t0,
                                  std::span<const double> x0, const PathBundle& bundle);

struct MomentReport {
    ValidationReport report;
    double k_hat = 0.0;
    double max_ratio = 0.0;
    double increment_ratio = 0.0;
};

[[nodiscard]] MomentReport check_moments(const CoefficientSet& c, const ControlPolicy& policy, double t0,
                                         std::span<const double> x0, const PathBundle& bundle, int p);
[[nodiscard]] double check_flow(const CoefficientSet& c, const ControlPolicy& policy, const PathBundle& bundle,
                                double r, double t, std::span<const double> x0);

struct ExitReport {
    ValidationReport report;
    double probability = 0.0;
    double bound = 0.0;
    double k_hat = 0.0;
};

[[nodiscard]] ExitReport exit_time_check(const CoefficientSet& c, const ControlPolicy& policy, double t0,
                                         std::span<const double> x0, double radius, double h,
                                         const PathBundle& bundle);

// Knot grid indices of the coefficient partition on the bundle grid.
[[nodiscard]] std::vector<std::size_t> coefficient_knot_steps(const CoefficientSet& c, const PathBundle& bundle);

}  // namespace shjb
