#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <vector>

#include "shjb/model.hpp"

namespace shjb {

struct TimeGrid {
    double horizon = 1.0;
    std::size_t steps = 64;
    std::vector<std::size_t> knot_steps{0, 64};  // grid index of t_0 .. t_N

    // Throws when a knot does not fall on the grid.
    [[nodiscard]] static TimeGrid make(double horizon, std::size_t steps, const std::vector<double>& knots);

    [[nodiscard]] double dt() const noexcept { return horizon / static_cast<double>(steps); }
    [[nodiscard]] double time(std::size_t k) const noexcept {
        return horizon * static_cast<double>(k) / static_cast<double>(steps);
    }
    [[nodiscard]] bool on_grid(double t) const noexcept;
    [[nodiscard]] std::size_t step_of(double t) const;  // throws std::invalid_argument off grid
    [[nodiscard]] std::vector<std::size_t> steps_of(const std::vector<double>& times) const;
};

// Smallest multiple of knots.size()-1 times `per_interval` that is at least `min_steps`.
[[nodiscard]] std::size_t aligned_steps(std::size_t intervals, std::size_t min_steps, std::size_t per_interval = 64);

struct Lineage {
    std::size_t parent_path = 0;
    std::size_t branch_step = 0;
    std::uint64_t parent_seed = 0;
};

class PathBundle {
public:
    TimeGrid grid;
    int m0 = 0;
    int m1 = 1;
    std::uint64_t seed = 0;
    std::size_t count = 0;
    std::vector<double> increments;  // [path][step][coordinate]
    std::optional<Lineage> lineage;

    [[nodiscard]] int m() const noexcept { return m0 + m1; }
    [[nodiscard]] const double* step_increments(std::size_t path, std::size_t step) const noexcept {
        return increments.data() + (path * grid.steps + step) * static_cast<std::size_t>(m());
    }
    // W at grid index `step` (all m coordinates).
    void wiener_at(std::size_t path, std::size_t step, double* out) const;
    [[nodiscard]] std::vector<double> wiener_at(std::size_t path, std::size_t step) const;
};

[[nodiscard]] PathBundle sample_bundle(const TimeGrid& grid, int m0, int m1, std::size_t count, std::uint64_t seed);
[[nodiscard]] PathBundle branch_at(const PathBundle& parent, std::size_t path, double t, std::size_t branch_count,
                                   std::uint64_t seed);

// Live Wiener value at t plus knot values W~ at t_i ^ t for the grid's knots.
[[nodiscard]] WienerEnv knot_env(const PathBundle& bundle, std::size_t path, double t);
[[nodiscard]] WienerEnv knot_env_at(const PathBundle& bundle, std::size_t path, std::size_t step,
                                    const std::vector<std::size_t>& knot_steps);

// Walks one path forward step by step keeping the environment current.
class EnvTracker {
public:
    EnvTracker(const PathBundle& bundle, std::vector<std::size_t> knot_steps);
    void reset(std::size_t path, std::size_t step);
    void advance();  // consumes the increment at the current step
    [[nodiscard]] const WienerEnv& env() const noexcept { return env_; }
    [[nodiscard]] const double* increment() const noexcept { return bundle_.step_increments(path_, step_); }
    [[nodiscard]] std::size_t step() const noexcept { return step_; }

private:
    void refresh_knots();
    const PathBundle& bundle_;
    std::vector<std::size_t> knot_steps_;  // t_1 .. t_N
    std::size_t path_ = 0;
    std::size_t step_ = 0;
    WienerEnv env_;
};

void write_bundle(const PathBundle& bundle, std::ostream& out);
[[nodiscard]] PathBundle read_bundle(std::istream& in);

}  // namespace shjb
