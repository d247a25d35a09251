#include <algorithm>
#include <cmath>

#include "shjb/parallel.hpp"
#include "shjb/quadrature.hpp"
#include "shjb/value_mc.hpp"

namespace shjb {

namespace {

// Tensor cubic interpolation of a node table; axes outside `free_mask` stay
// at the node index given in `fixed`.
double tensor_cubic(const ValueField& f, const double* u, const double* point, const std::size_t* fixed,
                    unsigned free_mask) {
    const std::size_t dims = f.axes.size();
    Stencil1 st[3];
    for (std::size_t k = 0; k < dims; ++k) {
        if (free_mask & (1u << k)) {
            st[k] = cubic_stencil(f.axes[k], point[k]);
        } else {
            st[k].count = 1;
            st[k].index[0] = fixed[k];
            st[k].weight[0] = 1.0;
        }
    }
    double total = 0.0;
    std::size_t digit[3] = {0, 0, 0};
    for (;;) {
        double w = 1.0;
        std::size_t flat = 0;
        for (std::size_t k = 0; k < dims; ++k) {
            w *= st[k].weight[digit[k]];
            flat = flat * f.axes[k].n + st[k].index[digit[k]];
        }
        total += w * u[flat];
        std::size_t k = dims;
        while (k-- > 0) {
            if (++digit[k] < st[k].count) break;
            digit[k] = 0;
        }
        if (k == static_cast<std::size_t>(-1)) break;
    }
    return total;
}

struct GaussTensor {
    std::vector<double> nodes;    // [point][dim]
    std::vector<double> weights;  // [point]
    std::size_t dims = 0;
};

GaussTensor gauss_tensor(std::size_t dims) {
    const QuadratureRule& rule = gauss_hermite(kHermiteNodes);
    GaussTensor g;
    g.dims = dims;
    std::size_t total = 1;
    for (std::size_t k = 0; k < dims; ++k) total *= rule.nodes.size();
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t rest = flat;
        double w = 1.0;
        std::vector<double> pt(dims);
        for (std::size_t k = dims; k-- > 0;) {
            const std::size_t i = rest % rule.nodes.size();
            rest /= rule.nodes.size();
            pt[k] = rule.nodes[i];
            w *= rule.weights[i];
        }
        g.nodes.insert(g.nodes.end(), pt.begin(), pt.end());
        g.weights.push_back(w);
    }
    return g;
}

class OracleStepper {
public:
    OracleStepper(const IntervalProblem& problem, const ControlLattice& lattice, const ValueField& layout,
                  std::size_t interval, std::span<const double> frozen)
        : coeffs_(problem.per_interval[interval]), lattice_(lattice), layout_(layout), nodes_(layout.node_count()) {
        const int d = coeffs_.d;
        separable_ = true;
        if (layout.has_y)
            for (int i = 0; i < d; ++i)
                if (!coeffs_.sigma(i, 0).is_zero_literal()) separable_ = false;
        // separable with y: the common-noise block only moves y
        const std::size_t x_noise = layout.has_y && separable_ ? static_cast<std::size_t>(coeffs_.m1)
                                                               : static_cast<std::size_t>(coeffs_.m());
        x_gauss_ = gauss_tensor(separable_ ? x_noise : static_cast<std::size_t>(coeffs_.m()));
        y_gauss_ = gauss_tensor(1);
        points_.resize(nodes_ * static_cast<std::size_t>(d));
        ys_.resize(nodes_);
        for (std::size_t flat = 0; flat < nodes_; ++flat)
            layout::node_point(layout, flat, points_.data() + flat * static_cast<std::size_t>(d), ys_[flat]);
        if (layout.has_y) {
            const Axis& ya = layout.axes.back();
            for (std::size_t j = 0; j < ya.n; ++j) envs_.push_back(layout::node_env(layout, interval, frozen, ya.node(j)));
        } else {
            envs_.push_back(layout::node_env(layout, interval, frozen, 0.0));
        }
    }

    [[nodiscard]] double work_per_step() const {
        return static_cast<double>(nodes_) * static_cast<double>(lattice_.size()) *
               static_cast<double>(x_gauss_.weights.size()) *
               std::pow(4.0, separable_ ? coeffs_.d : static_cast<double>(layout_.dims()));
    }

    // u at t + dt -> next at t; argmin per node.
    void step(const std::vector<double>& u, double t, double dt, std::vector<double>& next,
              std::int32_t* argmin) const {
        const int d = coeffs_.d;
        const std::size_t m = static_cast<std::size_t>(coeffs_.m());
        const std::size_t dims = layout_.dims();
        const double root = std::sqrt(dt);
        // expectation over the common-noise increment first when it only moves y
        std::vector<double> smoothed;
        const std::vector<double>* base = &u;
        if (layout_.has_y && separable_) {
            smoothed.resize(nodes_);
            std::size_t idx[3];
            for (std::size_t flat = 0; flat < nodes_; ++flat) {
                layout_.unflatten(flat, idx);
                double point[3] = {0.0, 0.0, 0.0};
                double acc = 0.0;
                for (std::size_t q = 0; q < y_gauss_.weights.size(); ++q) {
                    point[dims - 1] = ys_[flat] + root * y_gauss_.nodes[q];
                    acc += y_gauss_.weights[q] * tensor_cubic(layout_, u.data(), point, idx, 1u << (dims - 1));
                }
                smoothed[flat] = acc;
            }
            base = &smoothed;
        }
        std::vector<double> drift(static_cast<std::size_t>(d)), sigma(static_cast<std::size_t>(d) * m);
        std::size_t idx[3];
        for (std::size_t flat = 0; flat < nodes_; ++flat) {
            layout_.unflatten(flat, idx);
            const double* x = points_.data() + flat * static_cast<std::size_t>(d);
            const WienerEnv& env = layout_.has_y ? envs_[idx[dims - 1]] : envs_[0];
            double best = INFINITY;
            std::size_t best_c = 0;
            for (std::size_t c = 0; c < lattice_.size(); ++c) {
                const EvalEnv ev = make_env(t, x, lattice_.point(c), env);
                eval_drift(coeffs_, ev, drift.data());
                eval_sigma(coeffs_, ev, sigma.data());
                const double cost = coeffs_.running_cost.eval(ev);
                double expect = 0.0;
                for (std::size_t q = 0; q < x_gauss_.weights.size(); ++q) {
                    const double* z = x_gauss_.nodes.data() + q * x_gauss_.dims;
                    double point[3] = {0.0, 0.0, 0.0};
                    for (int i = 0; i < d; ++i) {
                        double move = drift[static_cast<std::size_t>(i)] * dt;
                        if (layout_.has_y && separable_) {
                            for (std::size_t j = 0; j < x_gauss_.dims; ++j)
                                move += root * sigma[static_cast<std::size_t>(i) * m + 1 + j] * z[j];
                        } else {
                            for (std::size_t j = 0; j < m; ++j)
                                move += root * sigma[static_cast<std::size_t>(i) * m + j] * z[j];
                        }
                        point[i] = x[i] + move;
                    }
                    unsigned mask = (1u << d) - 1u;
                    if (layout_.has_y && !separable_) {
                        point[dims - 1] = ys_[flat] + root * z[0];
                        mask |= 1u << (dims - 1);
                    }
                    expect += x_gauss_.weights[q] * tensor_cubic(layout_, base->data(), point, idx, mask);
                }
                const double value = cost * dt + expect;
                if (value < best) {
                    best = value;
                    best_c = c;
                }
            }
            next[flat] = best;
            if (argmin) argmin[flat] = static_cast<std::int32_t>(best_c);
        }
    }

private:
    const CoefficientSet& coeffs_;
    const ControlLattice& lattice_;
    const ValueField& layout_;
    std::size_t nodes_;
    bool separable_ = true;
    GaussTensor x_gauss_;
    GaussTensor y_gauss_;
    std::vector<double> points_;
    std::vector<double> ys_;
    std::vector<WienerEnv> envs_;
};

}  // namespace

ValueField backward_induction_oracle(const IntervalProblem& problem, const ControlLattice& lattice,
                                     const MeshSpec& mesh) {
    ValueField field = plan_field(problem, lattice, mesh, "oracle");
    const std::size_t nodes = field.node_count();
    double work = 0.0;
    for (std::size_t i = field.intervals.size(); i-- > 0;) {
        IntervalBlock& block = field.intervals[i];
        const double length = block.t1 - block.t0;
        const std::size_t steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(length / mesh.dt)));
        const double dt = length / static_cast<double>(steps);
        const std::size_t instances = block.instances();
        block.steps = steps;
        block.times.resize(steps + 1);
        for (std::size_t s = 0; s <= steps; ++s)
            block.times[s] = s == steps ? block.t1 : block.t0 + static_cast<double>(s) * dt;
        block.values.assign(instances * (steps + 1) * nodes, 0.0);
        block.argmin.assign(block.values.size(), 0);
        {
            const OracleStepper probe(problem, lattice, field, i, layout::frozen_values(block, 0));
            work += probe.work_per_step() * static_cast<double>(steps * instances);
            if (work > mesh.budget) throw LiftError("oracle mesh exceeds the declared budget");
        }
        parallel_for(instances, [&](std::size_t inst) {
            const std::vector<double> frozen = layout::frozen_values(block, inst);
            const OracleStepper stepper(problem, lattice, field, i, frozen);
            std::vector<double> u = i + 1 == field.intervals.size() ? layout::terminal_slice(field, problem, inst)
                                                                    : layout::transfer_slice(field, i + 1, inst);
            std::vector<double> next(nodes);
            const std::size_t plane = inst * (steps + 1);
            std::copy(u.begin(), u.end(), block.values.begin() + static_cast<long>((plane + steps) * nodes));
            for (std::size_t s = steps; s-- > 0;) {
                const double t = block.t0 + static_cast<double>(s) * dt;
                stepper.step(u, t, dt, next, block.argmin.data() + (plane + s) * nodes);
                u.swap(next);
                std::copy(u.begin(), u.end(), block.values.begin() + static_cast<long>((plane + s) * nodes));
            }
            // the terminal slice reuses the controls of the last step
            std::copy(block.argmin.begin() + static_cast<long>((plane + steps - 1) * nodes),
                      block.argmin.begin() + static_cast<long>((plane + steps) * nodes),
                      block.argmin.begin() + static_cast<long>((plane + steps) * nodes));
        });
    }
    layout::fill_dy(field);
    return field;
}

ValueField backward_induction_oracle(const CoefficientSet& c, const ControlLattice& lattice, const MeshSpec& mesh) {
    return backward_induction_oracle(exact_problem(c), lattice, mesh);
}

}  // namespace shjb
