#include "shjb/lift.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>

#include "shjb/parallel.hpp"
#include "shjb/paths.hpp"

namespace shjb {

namespace {

constexpr int kMaxStateDim = 2;
constexpr int kMaxCommonNoise = 1;
constexpr std::size_t kMaxIntervals = 3;

std::size_t interval_index(const std::vector<double>& knots, double t) {
    std::size_t i = 0;
    while (i + 2 < knots.size() && t >= knots[i + 1]) ++i;
    return i;
}

bool any_reference(const CoefficientSet& c, VarKind kind) {
    for (const Expr* e : c.all_exprs())
        if (e->references(kind)) return true;
    return false;
}

}  // namespace

IntervalProblem exact_problem(const CoefficientSet& c) {
    c.check();
    IntervalProblem p;
    p.d = c.d;
    p.m0 = c.m0;
    p.m1 = c.m1;
    p.knots = c.knots;
    p.per_interval.assign(p.knots.size() - 1, c);
    p.terminal = c.terminal_cost;
    p.random = c.m0 >= 1 && c.is_random();
    return p;
}

// ---------------------------------------------------------------------------
// coefficient lifting

namespace {

Expr l2_norm(const std::vector<Expr>& parts) {
    Expr sum = Expr::constant(0.0);
    for (const Expr& p : parts) sum = Expr::binary(Op::add, sum, Expr::binary(Op::mul, p, p));
    return Expr::binary(Op::pow, sum, Expr::constant(0.5));
}

LiftedCoefficientSet build_lift(const CoefficientSet& c, const std::vector<double>& partition) {
    LiftedCoefficientSet lifted;
    lifted.original = c;
    lifted.original.knots = partition;
    lifted.lipschitz = c.bound_l;
    IntervalProblem& p = lifted.problem;
    p.d = c.d;
    p.m0 = c.m0;
    p.m1 = c.m1;
    p.knots = partition;
    p.random = c.m0 >= 1 && c.is_random();
    const std::size_t n = partition.size() - 1;
    // on [t_i, t_{i+1}) the live value is frozen at the most recent knot; the
    // knot at t_0 = 0 carries the value 0
    auto frozen_at = [&](std::size_t i, int coord) {
        return i == 0 ? Expr::constant(0.0)
                      : Expr::variable(VarRef{VarKind::knot, static_cast<int>(i - 1) * c.m0 + coord});
    };
    for (std::size_t i = 0; i < n; ++i) {
        CoefficientSet piece = lifted.original;
        auto lift_expr = [&](const Expr& e) {
            Expr out = e;
            for (int j = 0; j < c.m0; ++j) out = out.substitute(VarRef{VarKind::live, j}, frozen_at(i, j));
            return out;
        };
        for (auto& e : piece.beta) e = lift_expr(e);
        for (auto& e : piece.sigma_tilde) e = lift_expr(e);
        for (auto& e : piece.sigma_bar) e = lift_expr(e);
        piece.running_cost = lift_expr(piece.running_cost);
        std::vector<Expr> drift_diff;
        for (int k = 0; k < c.d; ++k)
            drift_diff.push_back(Expr::binary(Op::sub, c.beta[static_cast<std::size_t>(k)],
                                              piece.beta[static_cast<std::size_t>(k)]));
        lifted.drift_gap.push_back(l2_norm(drift_diff));
        lifted.running_gap.push_back(
            Expr::unary(Op::abs, Expr::binary(Op::sub, c.running_cost, piece.running_cost)));
        p.per_interval.push_back(std::move(piece));
    }
    // at T the live value coincides with the last knot, so this replacement is exact
    Expr terminal = c.terminal_cost;
    for (int j = 0; j < c.m0; ++j)
        terminal = terminal.substitute(VarRef{VarKind::live, j},
                                       Expr::variable(VarRef{VarKind::knot, static_cast<int>(n - 1) * c.m0 + j}));
    p.terminal = terminal;
    for (auto& piece : p.per_interval) piece.terminal_cost = terminal;
    lifted.terminal_gap = Expr::unary(Op::abs, Expr::binary(Op::sub, c.terminal_cost, terminal));
    return lifted;
}

// Sup over sampled (x, v) of a gap expression, or a single evaluation when
// the expression does not depend on them.
class GapSampler {
public:
    GapSampler(const LiftOptions& opt, const ControlLattice& lattice, int d) : lattice_(lattice), d_(d) {
        std::vector<std::vector<double>> axes(static_cast<std::size_t>(d));
        for (int k = 0; k < d; ++k)
            for (int s = 0; s < opt.x_samples; ++s) {
                const double lo = opt.x_lo[static_cast<std::size_t>(k) % opt.x_lo.size()];
                const double hi = opt.x_hi[static_cast<std::size_t>(k) % opt.x_hi.size()];
                axes[static_cast<std::size_t>(k)].push_back(
                    opt.x_samples == 1 ? 0.5 * (lo + hi) : lo + (hi - lo) * s / (opt.x_samples - 1));
            }
        std::size_t total = 1;
        for (const auto& a : axes) total *= a.size();
        for (std::size_t flat = 0; flat < total; ++flat) {
            std::size_t rest = flat;
            for (int k = d - 1; k >= 0; --k) {
                const auto& a = axes[static_cast<std::size_t>(k)];
                points_.push_back(a[rest % a.size()]);
                rest /= a.size();
            }
            std::reverse(points_.end() - d, points_.end());
        }
        centre_.assign(static_cast<std::size_t>(d), 0.0);
        for (int k = 0; k < d; ++k)
            centre_[static_cast<std::size_t>(k)] =
                0.5 * (opt.x_lo[static_cast<std::size_t>(k) % opt.x_lo.size()] +
                       opt.x_hi[static_cast<std::size_t>(k) % opt.x_hi.size()]);
    }

    [[nodiscard]] double sup(const Expr& e, double t, const WienerEnv& w) const {
        const bool on_x = e.references(VarKind::state);
        const bool on_v = e.references(VarKind::control);
        const std::size_t xs = on_x ? points_.size() / static_cast<std::size_t>(d_) : 1;
        const std::size_t vs = on_v ? lattice_.size() : 1;
        double best = 0.0;
        for (std::size_t i = 0; i < xs; ++i) {
            const double* x = on_x ? points_.data() + i * static_cast<std::size_t>(d_) : centre_.data();
            for (std::size_t j = 0; j < vs; ++j) {
                const EvalEnv env = make_env(t, x, lattice_.point(j), w);
                best = std::max(best, std::fabs(e.eval(env)));
            }
        }
        return best;
    }

private:
    const ControlLattice& lattice_;
    int d_;
    std::vector<double> points_;
    std::vector<double> centre_;
};

}  // namespace

GapReport measure_gaps(const LiftedCoefficientSet& lifted, const ControlLattice& lattice, const LiftOptions& opt) {
    const CoefficientSet& c = lifted.original;
    GapReport report;
    report.intervals = static_cast<int>(lifted.problem.intervals());
    if (!any_reference(c, VarKind::live)) {
        report.exact = true;
        return report;
    }
    const std::size_t n = lifted.problem.intervals();
    const TimeGrid grid = TimeGrid::make(c.horizon(), opt.steps_per_interval * n, c.knots);
    const PathBundle bundle = sample_bundle(grid, c.m0, c.m1, opt.paths, opt.seed);
    const GapSampler sampler(opt, lattice, c.d);
    std::vector<double> terminal(bundle.count), running(bundle.count), drift(bundle.count);
    const double dt = grid.dt();
    parallel_for(bundle.count, [&](std::size_t path) {
        EnvTracker tracker(bundle, grid.knot_steps);
        tracker.reset(path, 0);
        std::size_t interval = 0;
        double run = 0.0;
        double drf = 0.0;
        for (std::size_t k = 0; k < grid.steps; ++k) {
            while (interval + 1 < n && k >= grid.knot_steps[interval + 1]) ++interval;
            const double t = grid.time(k);
            const double fg = sampler.sup(lifted.running_gap[interval], t, tracker.env());
            const double bg = sampler.sup(lifted.drift_gap[interval], t, tracker.env());
            run += fg * fg * dt;
            drf += bg * bg * dt;
            tracker.advance();
        }
        const double gg = sampler.sup(lifted.terminal_gap, grid.horizon, tracker.env());
        terminal[path] = gg * gg;
        running[path] = run;
        drift[path] = drf;
    });
    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    report.terminal_l2 = std::sqrt(mean(terminal));
    report.running_l2 = std::sqrt(mean(running));
    report.drift_l2 = std::sqrt(mean(drift));
    report.norm = report.terminal_l2 + report.running_l2 + report.drift_l2;
    report.paths = bundle.count;
    return report;
}

GapProcesses gap_processes(const LiftedCoefficientSet& lifted, const ControlLattice& lattice,
                           const LiftOptions& opt) {
    auto sampler = std::make_shared<const GapSampler>(opt, lattice, lifted.original.d);
    auto shared = std::make_shared<const LiftedCoefficientSet>(lifted);
    GapProcesses out;
    out.running = [sampler, shared](double t, const WienerEnv& w) {
        const std::size_t i = interval_index(shared->problem.knots, t);
        return sampler->sup(shared->running_gap[i], t, w);
    };
    out.drift = [sampler, shared](double t, const WienerEnv& w) {
        const std::size_t i = interval_index(shared->problem.knots, t);
        return sampler->sup(shared->drift_gap[i], t, w);
    };
    out.terminal = [sampler, shared](const WienerEnv& w) {
        return sampler->sup(shared->terminal_gap, shared->problem.horizon(), w);
    };
    return out;
}

LiftedCoefficientSet lift_coefficients(const CoefficientSet& c, const ControlLattice& lattice,
                                       const LiftOptions& opt) {
    c.check();
    for (const Expr& e : c.sigma_tilde)
        if (e.is_random()) throw LiftError("diffusion coefficients must not depend on the Wiener path");
    for (const Expr& e : c.sigma_bar)
        if (e.is_random()) throw LiftError("diffusion coefficients must not depend on the Wiener path");
    const bool uses_live = any_reference(c, VarKind::live);
    if (!uses_live) {
        LiftedCoefficientSet lifted = build_lift(c, c.knots);
        lifted.eps_target = opt.eps_target;
        lifted.gaps.exact = true;
        lifted.gaps.intervals = c.knot_count();
        return lifted;
    }
    std::vector<std::vector<double>> candidates;
    if (any_reference(c, VarKind::knot)) {
        candidates.push_back(c.knots);
    } else {
        for (int n = 1; n <= opt.max_intervals; ++n) {
            std::vector<double> part;
            for (int i = 0; i <= n; ++i) part.push_back(i == n ? c.horizon() : c.horizon() * i / n);
            candidates.push_back(part);
        }
    }
    double best = INFINITY;
    for (const auto& part : candidates) {
        LiftedCoefficientSet lifted = build_lift(c, part);
        lifted.eps_target = opt.eps_target;
        lifted.gaps = measure_gaps(lifted, lattice, opt);
        if (lifted.gaps.norm < opt.eps_target) return lifted;
        best = std::min(best, lifted.gaps.norm);
    }
    throw LiftError("coefficient gap target " + std::to_string(opt.eps_target) +
                        " unattainable with at most " + std::to_string(candidates.back().size() - 1) +
                        " intervals; best achieved " + std::to_string(best),
                    best);
}

// ---------------------------------------------------------------------------
// layout helpers

ValueField plan_field(const IntervalProblem& problem, const ControlLattice& lattice, const MeshSpec& mesh,
                      const std::string& producer) {
    if (problem.d > kMaxStateDim || problem.m0 > kMaxCommonNoise || problem.intervals() > kMaxIntervals)
        throw LiftError("problem exceeds the solver caps (d <= 2, m0 <= 1, N <= 3)");
    if (problem.per_interval.size() != problem.intervals())
        throw std::invalid_argument("one coefficient set per interval required");
    if (mesh.x_lo.empty() || mesh.x_hi.empty() || !(mesh.h > 0.0))
        throw std::invalid_argument("mesh needs a box and a positive spacing");
    ValueField f;
    f.d = problem.d;
    f.m0 = problem.m0;
    f.m1 = problem.m1;
    f.has_y = problem.random && problem.m0 == 1;
    f.knots = problem.knots;
    f.lattice = lattice;
    f.producer = producer;
    for (int k = 0; k < problem.d; ++k) {
        Axis a;
        a.lo = mesh.x_lo[static_cast<std::size_t>(k) % mesh.x_lo.size()];
        a.hi = mesh.x_hi[static_cast<std::size_t>(k) % mesh.x_hi.size()];
        a.n = static_cast<std::size_t>(std::llround((a.hi - a.lo) / mesh.h)) + 1;
        if (a.n < 3) throw std::invalid_argument("mesh needs at least three nodes per axis");
        f.axes.push_back(a);
    }
    if (f.has_y) {
        const double half = mesh.y_half_width * std::sqrt(problem.horizon());
        const double hy = mesh.hy > 0.0 ? mesh.hy : mesh.h;
        const std::size_t cells = static_cast<std::size_t>(std::max<long long>(1, std::llround(half / hy)));
        f.axes.push_back(Axis{-static_cast<double>(cells) * hy, static_cast<double>(cells) * hy, 2 * cells + 1});
    }
    const std::size_t n = problem.intervals();
    for (std::size_t i = 0; i < n; ++i) {
        IntervalBlock b;
        b.t0 = problem.knots[i];
        b.t1 = problem.knots[i + 1];
        if (f.has_y) {
            for (std::size_t j = 1; j <= i; ++j) {
                const VarRef ref{VarKind::knot, static_cast<int>(j - 1) * problem.m0};
                bool relevant = problem.terminal.references(ref);
                for (std::size_t l = i; l < n && !relevant; ++l)
                    for (const Expr* e : problem.per_interval[l].all_exprs())
                        if (e->references(ref)) relevant = true;
                if (relevant) {
                    b.frozen.push_back(static_cast<int>(j));
                    b.frozen_nodes.push_back(frozen_mesh(problem.knots[j]));
                }
            }
        }
        f.intervals.push_back(std::move(b));
    }
    return f;
}

namespace layout {

std::vector<double> frozen_values(const IntervalBlock& block, std::size_t instance) {
    std::vector<double> out(block.frozen.size());
    for (std::size_t q = block.frozen.size(); q-- > 0;) {
        const std::size_t base = block.frozen_nodes[q].size();
        out[q] = block.frozen_nodes[q][instance % base];
        instance /= base;
    }
    return out;
}

WienerEnv node_env(const ValueField& field, std::size_t interval, std::span<const double> frozen, double y) {
    WienerEnv env;
    const std::size_t n = field.knots.size() - 1;
    env.live.assign(static_cast<std::size_t>(field.m0 + field.m1), 0.0);
    env.knots.assign(n * static_cast<std::size_t>(field.m0), 0.0);
    if (field.m0 == 0) return env;
    env.live[0] = y;
    const IntervalBlock& block = field.intervals[interval];
    for (std::size_t j = 1; j <= n; ++j) {
        double value = y;
        if (j <= interval) {
            value = 0.0;
            for (std::size_t q = 0; q < block.frozen.size(); ++q)
                if (static_cast<std::size_t>(block.frozen[q]) == j) value = frozen[q];
        }
        env.knots[(j - 1) * static_cast<std::size_t>(field.m0)] = value;
    }
    return env;
}

void node_point(const ValueField& field, std::size_t flat, double* x, double& y) {
    std::size_t idx[3];
    field.unflatten(flat, idx);
    for (int k = 0; k < field.d; ++k) x[k] = field.axes[static_cast<std::size_t>(k)].node(idx[k]);
    y = field.has_y ? field.axes.back().node(idx[field.axes.size() - 1]) : 0.0;
}

std::vector<double> terminal_slice(const ValueField& field, const IntervalProblem& problem, std::size_t instance) {
    const std::size_t last = field.intervals.size() - 1;
    const std::vector<double> frozen = frozen_values(field.intervals[last], instance);
    const std::size_t nodes = field.node_count();
    std::vector<double> out(nodes);
    std::vector<double> zero_control(16, 0.0);
    double x[kMaxStateDim];
    for (std::size_t flat = 0; flat < nodes; ++flat) {
        double y = 0.0;
        node_point(field, flat, x, y);
        const WienerEnv env = node_env(field, last, frozen, y);
        out[flat] = problem.terminal.eval(make_env(problem.horizon(), x, zero_control.data(), env));
    }
    return out;
}

std::vector<double> transfer_slice(const ValueField& field, std::size_t interval, std::size_t instance) {
    const IntervalBlock& prev = field.intervals[interval - 1];
    const IntervalBlock& cur = field.intervals[interval];
    const std::size_t nodes = field.node_count();
    const std::size_t slices = cur.times.size();
    // digits of the previous instance, keyed by knot number
    std::map<int, std::size_t> digit;
    {
        std::size_t rest = instance;
        for (std::size_t q = prev.frozen.size(); q-- > 0;) {
            const std::size_t base = prev.frozen_nodes[q].size();
            digit[prev.frozen[q]] = rest % base;
            rest /= base;
        }
    }
    std::size_t fresh = cur.frozen.size();  // position of the knot frozen at this transfer
    for (std::size_t q = 0; q < cur.frozen.size(); ++q)
        if (cur.frozen[q] == static_cast<int>(interval)) fresh = q;
    std::vector<double> out(nodes, 0.0);
    double x[kMaxStateDim];
    for (std::size_t flat = 0; flat < nodes; ++flat) {
        double y = 0.0;
        node_point(field, flat, x, y);
        Stencil1 st;
        if (fresh < cur.frozen.size()) {
            st = node_cubic_stencil(cur.frozen_nodes[fresh], y);
        } else {
            st.count = 1;
            st.weight[0] = 1.0;
        }
        double value = 0.0;
        for (std::size_t s = 0; s < st.count; ++s) {
            std::size_t inst = 0;
            for (std::size_t q = 0; q < cur.frozen.size(); ++q) {
                const std::size_t dg = q == fresh ? st.index[s] : digit.at(cur.frozen[q]);
                inst = inst * cur.frozen_nodes[q].size() + dg;
            }
            value += st.weight[s] * cur.values[(inst * slices) * nodes + flat];
        }
        out[flat] = value;
    }
    return out;
}

void fill_dy(ValueField& field) {
    if (!field.has_y) return;
    const Axis& ya = field.axes.back();
    const std::size_t nodes = field.node_count();
    const double hy = ya.h();
    for (auto& block : field.intervals) {
        block.dy.assign(block.values.size(), 0.0);
        const std::size_t planes = block.values.size() / nodes;
        for (std::size_t plane = 0; plane < planes; ++plane) {
            const double* u = block.values.data() + plane * nodes;
            double* out = block.dy.data() + plane * nodes;
            for (std::size_t flat = 0; flat < nodes; ++flat) {
                const std::size_t j = flat % ya.n;  // y is the fastest axis
                if (j == 0)
                    out[flat] = (u[flat + 1] - u[flat]) / hy;
                else if (j + 1 == ya.n)
                    out[flat] = (u[flat] - u[flat - 1]) / hy;
                else
                    out[flat] = (u[flat + 1] - u[flat - 1]) / (2.0 * hy);
            }
        }
    }
}

}  // namespace layout

// ---------------------------------------------------------------------------
// explicit monotone march

namespace {

struct Entry {
    std::size_t count = 0;
    std::size_t flat[4]{};
    double weight[4]{};
};

// Neighbour offsets: axis k -> entries 2k (+), 2k+1 (-); active pair p ->
// four diagonal entries (++, --, +-, -+).
struct StencilShape {
    std::size_t dims = 1;
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    [[nodiscard]] std::size_t entries() const noexcept { return 2 * dims + 4 * pairs.size(); }
};

Entry resolve(const ValueField& f, const std::size_t* idx, const int* offset) {
    // tensor product of per-axis ghost resolutions
    Entry out;
    out.count = 1;
    out.flat[0] = 0;
    out.weight[0] = 1.0;
    for (std::size_t k = 0; k < f.axes.size(); ++k) {
        const long target = static_cast<long>(idx[k]) + offset[k];
        const long n = static_cast<long>(f.axes[k].n);
        std::size_t ids[2];
        double ws[2];
        std::size_t cnt = 1;
        if (target < 0) {
            ids[0] = 0;
            ws[0] = 2.0;
            ids[1] = 1;
            ws[1] = -1.0;
            cnt = 2;
        } else if (target >= n) {
            ids[0] = static_cast<std::size_t>(n - 1);
            ws[0] = 2.0;
            ids[1] = static_cast<std::size_t>(n - 2);
            ws[1] = -1.0;
            cnt = 2;
        } else {
            ids[0] = static_cast<std::size_t>(target);
            ws[0] = 1.0;
        }
        Entry next;
        for (std::size_t a = 0; a < out.count; ++a)
            for (std::size_t b = 0; b < cnt; ++b) {
                next.flat[next.count] = out.flat[a] * f.axes[k].n + ids[b];
                next.weight[next.count] = out.weight[a] * ws[b];
                ++next.count;
            }
        out = next;
    }
    return out;
}

class Marcher {
public:
    Marcher(const IntervalProblem& problem, const ControlLattice& lattice, const ValueField& layout,
            std::size_t interval, std::span<const double> frozen, const SolveOptions& options)
        : coeffs_(problem.per_interval[interval]),
          lattice_(lattice),
          layout_(layout),
          options_(options),
          interval_(interval),
          nodes_(layout.node_count()),
          controls_(options.fixed_policy ? 1 : lattice.size()) {
        shape_.dims = layout.dims();
        const int d = coeffs_.d;
        const int m = coeffs_.m();
        // a cross term is structurally absent when every product sigma_ik sigma_jk has a zero literal
        for (int i = 0; i < d; ++i)
            for (int j = i + 1; j < d; ++j) {
                bool active = false;
                for (int k = 0; k < m; ++k)
                    if (!coeffs_.sigma(i, k).is_zero_literal() && !coeffs_.sigma(j, k).is_zero_literal())
                        active = true;
                if (active) shape_.pairs.emplace_back(i, j);
            }
        if (layout.has_y)
            for (int i = 0; i < d; ++i)
                if (!coeffs_.sigma(i, 0).is_zero_literal())
                    shape_.pairs.emplace_back(static_cast<std::size_t>(i), static_cast<std::size_t>(d));
        time_dependent_ = false;
        for (const Expr* e : coeffs_.all_exprs())
            if (e != &coeffs_.terminal_cost && e->references(VarKind::time)) time_dependent_ = true;
        if (options.fixed_policy) time_dependent_ = true;

        // node coordinates and environments
        points_.resize(nodes_ * static_cast<std::size_t>(d));
        ys_.resize(nodes_);
        interior_.resize(nodes_);
        for (std::size_t flat = 0; flat < nodes_; ++flat) {
            layout::node_point(layout, flat, points_.data() + flat * static_cast<std::size_t>(d), ys_[flat]);
            std::size_t idx[3];
            layout.unflatten(flat, idx);
            bool inner = true;
            for (std::size_t k = 0; k < layout.dims(); ++k)
                if (idx[k] == 0 || idx[k] + 1 == layout.axes[k].n) inner = false;
            interior_[flat] = inner ? 1 : 0;
        }
        if (layout.has_y) {
            const Axis& ya = layout.axes.back();
            for (std::size_t j = 0; j < ya.n; ++j) envs_.push_back(layout::node_env(layout, interval, frozen, ya.node(j)));
        } else {
            envs_.push_back(layout::node_env(layout, interval, frozen, 0.0));
        }

        // ghost-resolved neighbour table
        const std::size_t entries = shape_.entries();
        table_.resize(nodes_ * entries);
        for (std::size_t flat = 0; flat < nodes_; ++flat) {
            std::size_t idx[3];
            layout.unflatten(flat, idx);
            for (std::size_t k = 0; k < shape_.dims; ++k)
                for (int sgn = 0; sgn < 2; ++sgn) {
                    int off[3] = {0, 0, 0};
                    off[k] = sgn == 0 ? 1 : -1;
                    table_[flat * entries + 2 * k + static_cast<std::size_t>(sgn)] = resolve(layout, idx, off);
                }
            for (std::size_t p = 0; p < shape_.pairs.size(); ++p) {
                const auto [a, b] = shape_.pairs[p];
                const int signs[4][2] = {{1, 1}, {-1, -1}, {1, -1}, {-1, 1}};
                for (int s = 0; s < 4; ++s) {
                    int off[3] = {0, 0, 0};
                    off[a] = signs[s][0];
                    off[b] = signs[s][1];
                    table_[flat * entries + 2 * shape_.dims + 4 * p + static_cast<std::size_t>(s)] =
                        resolve(layout, idx, off);
                }
            }
        }
        coef_.resize(nodes_ * controls_ * entries);
        cost_.resize(nodes_ * controls_);
        chosen_.assign(nodes_, 0);
    }

    [[nodiscard]] const WienerEnv& env_of(std::size_t flat) const {
        return layout_.has_y ? envs_[flat % layout_.axes.back().n] : envs_[0];
    }

    // Stencil coefficients at time t; returns max total outflow rate.
    double assemble(double t) {
        const int d = coeffs_.d;
        const std::size_t m = static_cast<std::size_t>(coeffs_.m());
        const std::size_t dims = shape_.dims;
        const std::size_t entries = shape_.entries();
        std::vector<double> h(dims);
        for (std::size_t k = 0; k < dims; ++k) h[k] = layout_.axes[k].h();
        double worst = 0.0;
        std::vector<double> drift(static_cast<std::size_t>(d)), sigma(static_cast<std::size_t>(d) * m);
        std::vector<double> a(dims * dims), b(dims);
        for (std::size_t flat = 0; flat < nodes_; ++flat) {
            const double* x = points_.data() + flat * static_cast<std::size_t>(d);
            const WienerEnv& env = env_of(flat);
            if (options_.fixed_policy) {
                PolicyMemory memory;
                chosen_[flat] = options_.fixed_policy->choose(0, t, std::span<const double>(x, static_cast<std::size_t>(d)),
                                                              env, memory);
            }
            for (std::size_t c = 0; c < controls_; ++c) {
                const std::size_t control = options_.fixed_policy ? chosen_[flat] : c;
                const EvalEnv ev = make_env(t, x, lattice_.point(control), env);
                eval_drift(coeffs_, ev, drift.data());
                eval_sigma(coeffs_, ev, sigma.data());
                cost_[flat * controls_ + c] = coeffs_.running_cost.eval(ev);
                std::fill(a.begin(), a.end(), 0.0);
                std::fill(b.begin(), b.end(), 0.0);
                for (int i = 0; i < d; ++i) {
                    b[static_cast<std::size_t>(i)] = drift[static_cast<std::size_t>(i)];
                    for (int j = 0; j < d; ++j) {
                        double s = 0.0;
                        for (std::size_t k = 0; k < m; ++k)
                            s += sigma[static_cast<std::size_t>(i) * m + k] * sigma[static_cast<std::size_t>(j) * m + k];
                        a[static_cast<std::size_t>(i) * dims + static_cast<std::size_t>(j)] = s;
                    }
                }
                if (layout_.has_y) {
                    const std::size_t yk = dims - 1;
                    a[yk * dims + yk] = 1.0;
                    for (int i = 0; i < d; ++i) {
                        const double cross = sigma[static_cast<std::size_t>(i) * m];
                        a[static_cast<std::size_t>(i) * dims + yk] = cross;
                        a[yk * dims + static_cast<std::size_t>(i)] = cross;
                    }
                }
                double* out = coef_.data() + (flat * controls_ + c) * entries;
                double total = 0.0;
                for (std::size_t k = 0; k < dims; ++k) {
                    double base = 0.5 * a[k * dims + k] / (h[k] * h[k]);
                    for (const auto& [p, q] : shape_.pairs) {
                        if (p == k) base -= std::fabs(a[p * dims + q]) / (2.0 * h[p] * h[q]);
                        if (q == k) base -= std::fabs(a[p * dims + q]) / (2.0 * h[p] * h[q]);
                    }
                    if (base < -1e-12 * (1.0 + a[k * dims + k] / (h[k] * h[k])) && interior_[flat])
                        throw LiftError("cross-derivative stencil loses positivity at an interior node; "
                                        "common-noise loading too large for the mesh");
                    const double bk = b[k];
                    double plus, minus;
                    if (base >= std::fabs(bk) / (2.0 * h[k])) {
                        plus = base + bk / (2.0 * h[k]);
                        minus = base - bk / (2.0 * h[k]);
                    } else {
                        plus = base + std::max(bk, 0.0) / h[k];
                        minus = base + std::max(-bk, 0.0) / h[k];
                    }
                    out[2 * k] = plus;
                    out[2 * k + 1] = minus;
                    total += plus + minus;
                }
                for (std::size_t p = 0; p < shape_.pairs.size(); ++p) {
                    const auto [i, j] = shape_.pairs[p];
                    const double aij = a[i * dims + j];
                    const double w = std::fabs(aij) / (2.0 * h[i] * h[j]);
                    double* diag = out + 2 * dims + 4 * p;
                    diag[0] = aij > 0 ? w : 0.0;
                    diag[1] = aij > 0 ? w : 0.0;
                    diag[2] = aij < 0 ? w : 0.0;
                    diag[3] = aij < 0 ? w : 0.0;
                    total += 2.0 * w;
                }
                worst = std::max(worst, total);
            }
        }
        return worst;
    }

    // One backward step u -> next; records the argmin.
    void apply(const std::vector<double>& u, double dt, std::vector<double>& next, std::int32_t* argmin) const {
        const std::size_t entries = shape_.entries();
        std::vector<double> nb(entries);
        for (std::size_t flat = 0; flat < nodes_; ++flat) {
            const double u0 = u[flat];
            const Entry* row = table_.data() + flat * entries;
            for (std::size_t e = 0; e < entries; ++e) {
                double v = 0.0;
                for (std::size_t q = 0; q < row[e].count; ++q) v += row[e].weight[q] * u[row[e].flat[q]];
                nb[e] = v - u0;
            }
            double best = INFINITY;
            std::size_t best_c = 0;
            for (std::size_t c = 0; c < controls_; ++c) {
                const double* cf = coef_.data() + (flat * controls_ + c) * entries;
                double val = cost_[flat * controls_ + c];
                for (std::size_t e = 0; e < entries; ++e) val += cf[e] * nb[e];
                if (val < best) {
                    best = val;
                    best_c = c;
                }
            }
            next[flat] = u0 + dt * best;
            if (argmin) argmin[flat] = static_cast<std::int32_t>(options_.fixed_policy ? chosen_[flat] : best_c);
        }
    }

    // One backward Euler step: u = next_data + dt * min_c (cost_c + L_c u), solved
    // by nonlinear Gauss-Seidel sweeps warm-started from the later slice.
    void apply_implicit(const std::vector<double>& later, double dt, std::vector<double>& u, std::int32_t* argmin) const {
        const std::size_t entries = shape_.entries();
        std::vector<double> rest(entries), self(entries);
        u = later;
        const auto relax = [&](std::size_t flat, bool record) {
            const Entry* row = table_.data() + flat * entries;
            for (std::size_t e = 0; e < entries; ++e) {
                double v = 0.0, w = 0.0;
                for (std::size_t q = 0; q < row[e].count; ++q) {
                    if (row[e].flat[q] == flat) w += row[e].weight[q];
                    else v += row[e].weight[q] * u[row[e].flat[q]];
                }
                rest[e] = v;
                self[e] = w - 1.0;
            }
            double best = INFINITY;
            std::size_t best_c = 0;
            for (std::size_t c = 0; c < controls_; ++c) {
                const double* cf = coef_.data() + (flat * controls_ + c) * entries;
                double num = later[flat] + dt * cost_[flat * controls_ + c];
                double den = 1.0;
                for (std::size_t e = 0; e < entries; ++e) {
                    num += dt * cf[e] * rest[e];
                    den -= dt * cf[e] * self[e];
                }
                if (!(den > 0.0)) throw LiftError("implicit step lost diagonal dominance at a boundary node");
                const double val = num / den;
                if (val < best) {
                    best = val;
                    best_c = c;
                }
            }
            if (record && argmin) argmin[flat] = static_cast<std::int32_t>(options_.fixed_policy ? chosen_[flat] : best_c);
            return best;
        };
        double scale = 1.0;
        for (double v : later) scale = std::max(scale, std::fabs(v));
        for (std::size_t sweep = 0;; ++sweep) {
            if (sweep >= options_.mesh.implicit_sweeps)
                throw LiftError("implicit step did not converge within the sweep cap");
            double change = 0.0;
            for (std::size_t flat = 0; flat < nodes_; ++flat) {
                const double v = relax(flat, false);
                change = std::max(change, std::fabs(v - u[flat]));
                u[flat] = v;
            }
            if (change <= options_.mesh.implicit_tol * scale) break;
        }
        if (argmin)
            for (std::size_t flat = 0; flat < nodes_; ++flat) relax(flat, true);
    }

    [[nodiscard]] bool time_dependent() const noexcept { return time_dependent_; }
    [[nodiscard]] std::size_t nodes() const noexcept { return nodes_; }
    [[nodiscard]] std::size_t controls() const noexcept { return controls_; }

private:
    const CoefficientSet& coeffs_;
    const ControlLattice& lattice_;
    const ValueField& layout_;
    const SolveOptions& options_;
    std::size_t interval_;
    std::size_t nodes_;
    std::size_t controls_;
    StencilShape shape_;
    bool time_dependent_ = false;
    std::vector<double> points_;
    std::vector<double> ys_;
    std::vector<char> interior_;
    std::vector<WienerEnv> envs_;
    std::vector<Entry> table_;
    std::vector<double> coef_;
    std::vector<double> cost_;
    std::vector<std::size_t> chosen_;
};

std::vector<std::size_t> stored_steps(std::size_t steps, std::size_t slices) {
    const std::size_t stride = std::max<std::size_t>(1, (steps + slices - 1) / std::max<std::size_t>(1, slices));
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < steps; s += stride) out.push_back(s);
    out.push_back(steps);
    return out;
}

}  // namespace

IntervalSolution solve_interval(const IntervalProblem& problem, const ControlLattice& lattice,
                                const ValueField& layout, std::size_t interval, std::span<const double> frozen_values,
                                std::span<const double> terminal, const SolveOptions& options,
                                std::size_t min_steps) {
    Marcher marcher(problem, lattice, layout, interval, frozen_values, options);
    const IntervalBlock& block = layout.intervals[interval];
    const double length = block.t1 - block.t0;
    const std::size_t nodes = marcher.nodes();
    if (terminal.size() != nodes) throw std::invalid_argument("terminal slice does not match the mesh");
    std::size_t steps = std::max<std::size_t>(
        {min_steps, std::size_t{1}, static_cast<std::size_t>(std::ceil(length / options.mesh.dt - 1e-9))});
    const std::size_t cap = steps << options.mesh.max_halvings;
    double rate = 0.0;
    if (!marcher.time_dependent() && !options.mesh.implicit) {
        rate = marcher.assemble(block.t0);
        while (length / static_cast<double>(steps) * rate > 1.0) {
            steps *= 2;
            if (steps > cap) throw LiftError("time step halving cap reached before the stability bound held");
        }
    }
    if (!marcher.time_dependent() && options.mesh.implicit) marcher.assemble(block.t0);
    for (;;) {
        const double work = static_cast<double>(nodes) * static_cast<double>(marcher.controls()) *
                            static_cast<double>(steps);
        if (work > options.mesh.budget) throw LiftError("finite-difference work exceeds the declared budget");
        const double dt = length / static_cast<double>(steps);
        const std::vector<std::size_t> keep = stored_steps(steps, options.mesh.slices_per_interval);
        IntervalSolution sol;
        sol.steps = steps;
        sol.times.resize(keep.size());
        for (std::size_t q = 0; q < keep.size(); ++q)
            sol.times[q] = q + 1 == keep.size() ? block.t1 : block.t0 + static_cast<double>(keep[q]) * dt;
        sol.values.resize(keep.size() * nodes);
        sol.argmin.resize(keep.size() * nodes);
        std::vector<double> u(terminal.begin(), terminal.end()), next(nodes);
        for (double v : u)
            if (!std::isfinite(v)) throw LiftError("non-finite terminal data");
        // terminal slice: argmin of the operator on the terminal data
        if (marcher.time_dependent()) marcher.assemble(block.t1);
        std::copy(u.begin(), u.end(), sol.values.end() - static_cast<long>(nodes));
        marcher.apply(u, 0.0, next, sol.argmin.data() + (keep.size() - 1) * nodes);
        std::size_t slot = keep.size() - 1;
        bool unstable = false;
        for (std::size_t s = steps; s-- > 0;) {
            const double t = block.t0 + static_cast<double>(s) * dt;
            if (marcher.time_dependent()) {
                const double step_rate = marcher.assemble(t);
                if (!options.mesh.implicit && step_rate * dt > 1.0 + 1e-12) {
                    unstable = true;
                    break;
                }
            }
            const bool store = slot > 0 && keep[slot - 1] == s;
            std::int32_t* record = store ? sol.argmin.data() + (slot - 1) * nodes : nullptr;
            if (options.mesh.implicit) marcher.apply_implicit(u, dt, next, record);
            else marcher.apply(u, dt, next, record);
            u.swap(next);
            for (double v : u)
                if (!std::isfinite(v)) throw LiftError("non-finite node value during the march");
            if (store) {
                --slot;
                std::copy(u.begin(), u.end(), sol.values.begin() + static_cast<long>(slot * nodes));
            }
        }
        if (!unstable) return sol;
        steps *= 2;
        if (steps > cap) throw LiftError("time step halving cap reached before the stability bound held");
    }
}

ValueField solve_recursive(const IntervalProblem& problem, const ControlLattice& lattice,
                           const SolveOptions& options) {
    ValueField field = plan_field(problem, lattice, options.mesh, options.fixed_policy ? "linear" : "lift");
    const std::size_t nodes = field.node_count();
    for (std::size_t i = field.intervals.size(); i-- > 0;) {
        IntervalBlock& block = field.intervals[i];
        const std::size_t instances = block.instances();
        std::vector<IntervalSolution> sols(instances);
        std::size_t hint = 0;
        for (;;) {
            parallel_for(instances, [&](std::size_t inst) {
                const std::vector<double> frozen = layout::frozen_values(block, inst);
                const std::vector<double> terminal = i + 1 == field.intervals.size()
                                                         ? layout::terminal_slice(field, problem, inst)
                                                         : layout::transfer_slice(field, i + 1, inst);
                sols[inst] = solve_interval(problem, lattice, field, i, frozen, terminal, options, hint);
            });
            std::size_t most = 0;
            for (const auto& s : sols) most = std::max(most, s.steps);
            bool uniform = true;
            for (const auto& s : sols) uniform = uniform && s.steps == most;
            if (uniform) break;
            hint = most;
        }
        block.steps = sols[0].steps;
        block.times = sols[0].times;
        const std::size_t slices = block.times.size();
        block.values.resize(instances * slices * nodes);
        block.argmin.resize(instances * slices * nodes);
        for (std::size_t inst = 0; inst < instances; ++inst) {
            std::copy(sols[inst].values.begin(), sols[inst].values.end(),
                      block.values.begin() + static_cast<long>(inst * slices * nodes));
            std::copy(sols[inst].argmin.begin(), sols[inst].argmin.end(),
                      block.argmin.begin() + static_cast<long>(inst * slices * nodes));
        }
    }
    layout::fill_dy(field);
    return field;
}

ValueField solve_recursive(const LiftedCoefficientSet& lifted, const ControlLattice& lattice,
                           const SolveOptions& options) {
    return solve_recursive(lifted.problem, lattice, options);
}

ControlPolicy extract_policy(std::shared_ptr<const ValueField> field) { return ControlPolicy::feedback(std::move(field)); }

DomegaEvaluator domega_field(std::shared_ptr<const ValueField> field) {
    return [field](double t, std::span<const double> x, const WienerEnv& w) {
        std::vector<double> out(static_cast<std::size_t>(field->m0 + field->m1), 0.0);
        if (field->has_y) out[0] = field->eval_dy(t, x, w).value;
        return out;
    };
}

}  // namespace shjb
