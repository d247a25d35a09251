#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "shjb/model.hpp"

namespace shjb {

struct Axis {
    double lo = -1.0;
    double hi = 1.0;
    std::size_t n = 3;

    [[nodiscard]] double h() const noexcept { return (hi - lo) / static_cast<double>(n - 1); }
    [[nodiscard]] double node(std::size_t i) const noexcept {
        return i + 1 == n ? hi : lo + static_cast<double>(i) * h();
    }
};

// Mesh configuration shared by the finite-difference solver and the oracle.
struct MeshSpec {
    std::vector<double> x_lo{-4.0};
    std::vector<double> x_hi{4.0};
    double h = 0.1;              // x spacing
    double y_half_width = 4.0;   // y box is [-w, w] * sqrt(T)
    double hy = 0.0;             // y spacing; 0 means same as h
    double dt = 0.01;            // target time step (oracle: exact coarse step)
    std::size_t slices_per_interval = 32;
    std::size_t max_halvings = 20;
    double budget = 5e9;         // node*control*step work units
    bool implicit = false;       // backward Euler with nonlinear Gauss-Seidel instead of the explicit march
    double implicit_tol = 1e-10;
    std::size_t implicit_sweeps = 500;
};

// One partition interval of a recursively solved field.
struct IntervalBlock {
    double t0 = 0.0;
    double t1 = 1.0;
    std::vector<int> frozen;                       // 1-based knot numbers carried as frozen coordinates
    std::vector<std::vector<double>> frozen_nodes;  // quadrature nodes per frozen coordinate
    std::vector<double> times;                     // ascending slice times, t0 first and t1 last
    std::vector<double> values;                    // [instance][slice][node]
    std::vector<std::int32_t> argmin;              // same layout, lattice index
    std::vector<double> dy;                        // same layout when the field carries y
    std::size_t steps = 0;                         // time steps used by the march

    [[nodiscard]] std::size_t instances() const noexcept;
};

struct FieldSample {
    double value = 0.0;
    bool clamped = false;
};

// Time-sliced value table on an (x, y) tensor mesh per partition interval,
// indexed by frozen knot values on a quadrature-node mesh.
class ValueField {
public:
    int d = 1;
    int m0 = 0;
    int m1 = 1;
    bool has_y = false;
    std::vector<Axis> axes;      // d state axes, then y when present
    std::vector<double> knots;   // partition 0 = t_0 < ... < t_N = T
    ControlLattice lattice = ControlLattice::from_points({{0.0}});
    std::vector<IntervalBlock> intervals;
    std::string producer;        // "lift", "oracle" or "linear"

    [[nodiscard]] std::size_t dims() const noexcept { return axes.size(); }
    [[nodiscard]] std::size_t node_count() const noexcept;
    [[nodiscard]] std::size_t flat_index(std::span<const std::size_t> idx) const noexcept;
    void unflatten(std::size_t flat, std::size_t* idx) const noexcept;
    [[nodiscard]] std::size_t interval_of(double t) const noexcept;

    // Multilinear in (t, x, y), cubic Lagrange across frozen quadrature nodes.
    [[nodiscard]] FieldSample eval(double t, std::span<const double> x, const WienerEnv& w) const;
    [[nodiscard]] FieldSample eval_dy(double t, std::span<const double> x, const WienerEnv& w) const;
    // Stored argmin at the nearest node of the slice in force at t.
    [[nodiscard]] std::size_t policy_index(double t, std::span<const double> x, const WienerEnv& w) const;

    // Spatial gradient bound: max over stored nodes of |D_x V| by centered differences.
    [[nodiscard]] double gradient_bound() const;

private:
    FieldSample eval_block(const std::vector<double> IntervalBlock::*data, double t, std::span<const double> x,
                           const WienerEnv& w) const;
};

// Frozen-coordinate instance count and mixed-radix indexing helpers.
[[nodiscard]] std::vector<double> frozen_mesh(double knot_time);
[[nodiscard]] std::size_t instance_index(const std::vector<std::size_t>& digits);

void write_field(const ValueField& f, std::ostream& out);
[[nodiscard]] ValueField read_field(std::istream& in);

// Per-dimension interpolation stencils with linear-extrapolation ghosts folded in.
struct Stencil1 {
    std::size_t count = 0;
    std::size_t index[4]{};
    double weight[4]{};
};
[[nodiscard]] Stencil1 linear_stencil(const Axis& a, double p, bool& clamped);
[[nodiscard]] Stencil1 cubic_stencil(const Axis& a, double p);
[[nodiscard]] Stencil1 node_cubic_stencil(const std::vector<double>& nodes, double p);

}  // namespace shjb
