#include "shjb/bsde.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "shjb/parallel.hpp"
#include "shjb/quadrature.hpp"

namespace shjb {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

const double* zero_buffer() {
    static const std::vector<double> zeros(64, 0.0);
    return zeros.data();
}

std::size_t ipow(std::size_t base, std::size_t exponent) {
    std::size_t out = 1;
    for (std::size_t i = 0; i < exponent; ++i) out *= base;
    return out;
}

void check_grid(const std::vector<double>& knots, const PathBundle& bundle) {
    const TimeGrid& grid = bundle.grid;
    if (grid.knot_steps.size() != knots.size()) throw std::invalid_argument("bundle knots differ from the problem's");
    for (std::size_t j = 0; j < knots.size(); ++j)
        if (std::fabs(grid.time(grid.knot_steps[j]) - knots[j]) > 1e-12)
            throw std::invalid_argument("bundle knots differ from the problem's");
}

}  // namespace

BsdeProblem bsde_problem(const Expr& terminal, const Expr& driver, const std::vector<double>& knots, int m0,
                         int m1) {
    if (terminal.references(VarKind::state) || terminal.references(VarKind::control) ||
        terminal.references(VarKind::time) || terminal.references(VarKind::live))
        throw std::invalid_argument("non-knot-form terminal in quadrature mode");
    if (driver.references(VarKind::state) || driver.references(VarKind::control))
        throw std::invalid_argument("driver must be a process of (t, w, k) only");
    if (terminal.max_index(VarKind::knot) >= static_cast<int>(knots.size() - 1) * m0 ||
        driver.max_index(VarKind::knot) >= static_cast<int>(knots.size() - 1) * m0 ||
        driver.max_index(VarKind::live) >= m0)
        throw std::invalid_argument("bsde expression references an absent Wiener coordinate");
    BsdeProblem p;
    p.knots = knots;
    p.m0 = m0;
    p.m1 = m1;
    p.random = terminal.is_random() || driver.is_random();
    const double horizon = knots.back();
    p.terminal = [terminal, horizon](const WienerEnv& w) {
        return terminal.eval(make_env(horizon, zero_buffer(), zero_buffer(), w));
    };
    if (!driver.is_zero_literal())
        p.driver = [driver](double t, const WienerEnv& w) {
            return driver.eval(make_env(t, zero_buffer(), zero_buffer(), w));
        };
    return p;
}

BsdeProblem envelope_bsde(const LiftedCoefficientSet& lifted, const ControlLattice& lattice,
                          const LiftOptions& options, double gradient_constant) {
    const GapProcesses gaps = gap_processes(lifted, lattice, options);
    BsdeProblem p;
    p.knots = lifted.problem.knots;
    p.m0 = lifted.original.m0;
    p.m1 = lifted.original.m1;
    p.terminal = gaps.terminal;
    if (!lifted.gaps.exact)
        p.driver = [gaps, gradient_constant](double t, const WienerEnv& w) {
            return gaps.running(t, w) + gradient_constant * gaps.drift(t, w);
        };
    else
        p.driver = nullptr;
    return p;
}

// ---------------------------------------------------------------------------

BsdeQuadrature::BsdeQuadrature(BsdeProblem problem, std::size_t legendre_nodes)
    : problem_(std::move(problem)), legendre_(legendre_nodes) {
    const std::size_t n = problem_.knots.size() - 1;
    const std::size_t m0 = static_cast<std::size_t>(problem_.m0);
    if (!problem_.terminal) throw std::invalid_argument("bsde terminal payoff missing");
    if (m0 > 2) throw std::invalid_argument("quadrature mode supports at most two common-noise coordinates");
    if (ipow(kHermiteNodes, (n - 1) * m0) > 6561)
        throw std::invalid_argument("quadrature mode table exceeds the frozen-knot budget");

    const QuadratureRule& rule = gauss_hermite(kHermiteNodes);
    const std::size_t points = ipow(rule.nodes.size(), m0);
    for (std::size_t flat = 0; flat < points; ++flat) {
        std::size_t rest = flat;
        double weight = 1.0;
        std::vector<double> pt(m0);
        for (std::size_t c = m0; c-- > 0;) {
            const std::size_t q = rest % rule.nodes.size();
            rest /= rule.nodes.size();
            pt[c] = rule.nodes[q];
            weight *= rule.weights[q];
        }
        gauss_points_.insert(gauss_points_.end(), pt.begin(), pt.end());
        gauss_weights_.push_back(weight);
    }

    nodes_.resize(n + 1);
    for (std::size_t j = 1; j <= n; ++j) nodes_[j] = frozen_mesh(problem_.knots[j]);
    tables_.resize(n);
    for (std::size_t j = n - 1; j >= 1; --j) {
        const std::size_t dims = j * m0;
        const std::size_t entries = ipow(kHermiteNodes, dims);
        std::vector<double>& table = tables_[j];
        table.assign(entries, 0.0);
        parallel_for(entries, [&](std::size_t flat) {
            std::vector<double> frozen(dims);
            std::size_t rest = flat;
            for (std::size_t q = dims; q-- > 0;) {
                const std::size_t knot = q / m0 + 1;
                frozen[q] = nodes_[knot][rest % kHermiteNodes];
                rest /= kHermiteNodes;
            }
            const double* live = frozen.data() + (j - 1) * m0;
            table[flat] = running(j, problem_.knots[j], live, frozen.data()) +
                          continuation(j, problem_.knots[j], live, frozen.data());
        });
    }
}

std::size_t BsdeQuadrature::interval_of(double s) const noexcept {
    const std::size_t n = problem_.knots.size() - 1;
    std::size_t i = 0;
    while (i + 1 < n && s >= problem_.knots[i + 1]) ++i;
    return i;
}

WienerEnv BsdeQuadrature::env(std::size_t interval, const double* live, const double* frozen) const {
    const std::size_t n = problem_.knots.size() - 1;
    const std::size_t m0 = static_cast<std::size_t>(problem_.m0);
    WienerEnv w;
    w.live.assign(m0 + static_cast<std::size_t>(problem_.m1), 0.0);
    std::copy(live, live + m0, w.live.begin());
    w.knots.resize(n * m0);
    for (std::size_t j = 1; j <= n; ++j)
        for (std::size_t c = 0; c < m0; ++c)
            w.knots[(j - 1) * m0 + c] = j <= interval ? frozen[(j - 1) * m0 + c] : live[c];
    return w;
}

double BsdeQuadrature::running(std::size_t interval, double s, const double* live, const double* frozen) const {
    if (!problem_.driver) return 0.0;
    const double length = problem_.knots[interval + 1] - s;
    if (length <= 0.0) return 0.0;
    const std::size_t m0 = static_cast<std::size_t>(problem_.m0);
    const QuadratureRule& legendre = gauss_legendre(legendre_);
    std::vector<double> moved(m0);
    double total = 0.0;
    for (std::size_t g = 0; g < legendre.nodes.size(); ++g) {
        const double t = s + 0.5 * length * (1.0 + legendre.nodes[g]);
        const double root = std::sqrt(t - s);
        double expect = 0.0;
        for (std::size_t q = 0; q < gauss_weights_.size(); ++q) {
            for (std::size_t c = 0; c < m0; ++c) moved[c] = live[c] + root * gauss_points_[q * m0 + c];
            expect += gauss_weights_[q] * problem_.driver(t, env(interval, moved.data(), frozen));
        }
        total += 0.5 * length * legendre.weights[g] * expect;
    }
    return total;
}

double BsdeQuadrature::table_at(std::size_t knot, const double* frozen) const {
    const std::size_t m0 = static_cast<std::size_t>(problem_.m0);
    const std::size_t dims = knot * m0;
    std::vector<Stencil1> st(dims);
    for (std::size_t q = 0; q < dims; ++q) st[q] = node_cubic_stencil(nodes_[q / m0 + 1], frozen[q]);
    const std::vector<double>& table = tables_[knot];
    std::vector<std::size_t> digit(dims, 0);
    double total = 0.0;
    for (;;) {
        double weight = 1.0;
        std::size_t flat = 0;
        for (std::size_t q = 0; q < dims; ++q) {
            weight *= st[q].weight[digit[q]];
            flat = flat * kHermiteNodes + st[q].index[digit[q]];
        }
        total += weight * table[flat];
        std::size_t q = dims;
        while (q-- > 0) {
            if (++digit[q] < st[q].count) break;
            digit[q] = 0;
        }
        if (q == static_cast<std::size_t>(-1)) break;
    }
    return total;
}

double BsdeQuadrature::continuation(std::size_t interval, double s, const double* live, const double* frozen) const {
    const std::size_t n = problem_.knots.size() - 1;
    const std::size_t m0 = static_cast<std::size_t>(problem_.m0);
    const std::size_t next = interval + 1;
    const double length = problem_.knots[next] - s;
    std::vector<double> extended(next * m0);
    std::copy(frozen, frozen + interval * m0, extended.begin());
    double* fresh = extended.data() + interval * m0;
    auto at_next = [&]() {
        return next == n ? problem_.terminal(env(n, fresh, extended.data())) : table_at(next, extended.data());
    };
    if (length <= 0.0) {
        std::copy(live, live + m0, fresh);
        return at_next();
    }
    const double root = std::sqrt(length);
    double expect = 0.0;
    for (std::size_t q = 0; q < gauss_weights_.size(); ++q) {
        for (std::size_t c = 0; c < m0; ++c) fresh[c] = live[c] + root * gauss_points_[q * m0 + c];
        expect += gauss_weights_[q] * at_next();
    }
    return expect;
}

double BsdeQuadrature::value(double s, std::span<const double> live, std::span<const double> frozen) const {
    const std::size_t i = interval_of(s);
    const std::size_t m0 = static_cast<std::size_t>(problem_.m0);
    if (live.size() < m0 || frozen.size() < i * m0) throw std::invalid_argument("bsde value: short Wiener data");
    return running(i, s, live.data(), frozen.data()) + continuation(i, s, live.data(), frozen.data());
}

std::vector<double> BsdeQuadrature::gradient(double s, std::span<const double> live, std::span<const double> frozen,
                                             double step) const {
    const std::size_t m0 = static_cast<std::size_t>(problem_.m0);
    std::vector<double> out(m0, 0.0);
    if (!problem_.random) return out;
    std::vector<double> shifted(live.begin(), live.begin() + static_cast<long>(m0));
    for (std::size_t c = 0; c < m0; ++c) {
        shifted[c] = live[c] + step;
        const double up = value(s, shifted, frozen);
        shifted[c] = live[c] - step;
        const double down = value(s, shifted, frozen);
        shifted[c] = live[c];
        out[c] = (up - down) / (2.0 * step);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

BSDESolution empty_solution(BsdeMethod method, const BsdeProblem& problem, const PathBundle& bundle) {
    BSDESolution sol;
    sol.method = method;
    sol.count = bundle.count;
    sol.steps = bundle.grid.steps;
    sol.m0 = problem.m0;
    sol.y.assign(sol.count * (sol.steps + 1), kNaN);
    sol.z.assign(sol.count * sol.steps * static_cast<std::size_t>(problem.m0), kNaN);
    return sol;
}

std::vector<bool> step_mask(const std::vector<std::size_t>& steps, std::size_t total) {
    std::vector<bool> mask(total + 1, steps.empty());
    for (std::size_t s : steps) {
        if (s > total) throw std::invalid_argument("bsde step beyond the grid");
        mask[s] = true;
    }
    return mask;
}

}  // namespace

BSDESolution solve_bsde(const BsdeProblem& problem, const PathBundle& bundle, const BsdeOptions& options) {
    check_grid(problem.knots, bundle);
    if (bundle.m0 != problem.m0) throw std::invalid_argument("bundle common-noise dimension differs");
    const BsdeQuadrature quad(problem, options.legendre_nodes);
    BSDESolution sol = empty_solution(BsdeMethod::quadrature, problem, bundle);
    const std::vector<bool> mask = step_mask(options.steps, sol.steps);
    const std::size_t m0 = static_cast<std::size_t>(problem.m0);
    parallel_for(bundle.count, [&](std::size_t path) {
        EnvTracker tracker(bundle, bundle.grid.knot_steps);
        tracker.reset(path, 0);
        for (std::size_t k = 0; k <= sol.steps; ++k) {
            if (mask[k]) {
                const WienerEnv& w = tracker.env();
                const std::span<const double> live(w.live.data(), m0);
                const double s = bundle.grid.time(k);
                double& y = sol.y[path * (sol.steps + 1) + k];
                if (k == sol.steps) {
                    y = problem.terminal(w);
                } else {
                    y = quad.value(s, live, w.knots);
                    const std::vector<double> grad = quad.gradient(s, live, w.knots, options.fd_step);
                    std::copy(grad.begin(), grad.end(), sol.z.begin() + static_cast<long>((path * sol.steps + k) * m0));
                }
            }
            if (k < sol.steps) tracker.advance();
        }
    });
    return sol;
}

BSDESolution solve_bsde_regression(const BsdeProblem& problem, const PathBundle& bundle,
                                   const std::vector<std::size_t>& steps, std::size_t branches,
                                   std::uint64_t seed) {
    check_grid(problem.knots, bundle);
    if (branches < 2) throw std::invalid_argument("regression mode needs at least two branches");
    BSDESolution sol = empty_solution(BsdeMethod::regression, problem, bundle);
    sol.y_error.assign(sol.y.size(), kNaN);
    const std::vector<bool> mask = step_mask(steps, sol.steps);
    const std::size_t m0 = static_cast<std::size_t>(problem.m0);
    const double dt = bundle.grid.dt();
    for (std::size_t path = 0; path < bundle.count; ++path) {
        for (std::size_t k = 0; k <= sol.steps; ++k) {
            if (!mask[k]) continue;
            const std::size_t slot = path * (sol.steps + 1) + k;
            if (k == sol.steps) {
                sol.y[slot] = problem.terminal(knot_env_at(bundle, path, k, bundle.grid.knot_steps));
                sol.y_error[slot] = 0.0;
                continue;
            }
            const PathBundle branch = branch_at(bundle, path, bundle.grid.time(k), branches, seed);
            std::vector<double> payoff(branches);
            parallel_for(branches, [&](std::size_t b) {
                EnvTracker tracker(branch, branch.grid.knot_steps);
                tracker.reset(b, k);
                double total = 0.0;
                for (std::size_t j = k; j < sol.steps; ++j) {
                    if (problem.driver) total += problem.driver(branch.grid.time(j), tracker.env()) * dt;
                    tracker.advance();
                }
                payoff[b] = total + problem.terminal(tracker.env());
            });
            const MCEstimate est = summarize(payoff);
            sol.y[slot] = est.mean;
            sol.y_error[slot] = est.std_error;
            for (std::size_t c = 0; c < m0; ++c) {
                double acc = 0.0;
                for (std::size_t b = 0; b < branches; ++b)
                    acc += (payoff[b] - est.mean) * branch.step_increments(b, k)[c];
                sol.z[(path * sol.steps + k) * m0 + c] = acc / (static_cast<double>(branches) * dt);
            }
        }
    }
    return sol;
}

// ---------------------------------------------------------------------------

double Envelope::value(std::size_t path, std::size_t step, std::span<const double> x) const {
    const WienerEnv w = knot_env_at(*bundle, path, step, bundle->grid.knot_steps);
    return field->eval(bundle->grid.time(step), x, w).value;
}

double Envelope::upper(std::size_t path, std::size_t step, std::span<const double> x) const {
    return value(path, step, x) + bsde.y_at(path, step);
}

double Envelope::lower(std::size_t path, std::size_t step, std::span<const double> x) const {
    return value(path, step, x) - bsde.y_at(path, step);
}

std::vector<double> Envelope::domega(std::size_t path, std::size_t step, std::span<const double> x,
                                     bool upper_side) const {
    const WienerEnv w = knot_env_at(*bundle, path, step, bundle->grid.knot_steps);
    std::vector<double> out = domega_field(field)(bundle->grid.time(step), x, w);
    if (step < bsde.steps) {
        const double* z = bsde.z_at(path, step);
        for (int c = 0; c < bsde.m0; ++c) out[static_cast<std::size_t>(c)] += upper_side ? z[c] : -z[c];
    }
    return out;
}

Envelope build_envelopes(std::shared_ptr<const ValueField> field, std::shared_ptr<const PathBundle> bundle,
                         BSDESolution bsde, double gradient_constant, const GapReport& gaps) {
    if (!field || !bundle) throw std::invalid_argument("envelope needs a field and a bundle");
    if (bsde.count != bundle->count || bsde.steps != bundle->grid.steps)
        throw std::invalid_argument("bsde solution does not match the bundle");
    check_grid(field->knots, *bundle);
    Envelope env;
    env.field = std::move(field);
    env.bundle = std::move(bundle);
    env.bsde = std::move(bsde);
    env.gradient_constant = gradient_constant;
    env.gaps = gaps;
    env.eps_achieved = gaps.norm;
    return env;
}

SandwichReport sandwich_check(const Envelope& envelope, const std::vector<SandwichPoint>& points, double tolerance) {
    SandwichReport out;
    double below = -INFINITY;
    double above = -INFINITY;
    double min_y = INFINITY;
    double abs_total = 0.0;
    for (const SandwichPoint& p : points) {
        const double y = envelope.bsde.y_at(p.path, p.step);
        if (!std::isfinite(y)) throw std::invalid_argument("sandwich point at a step the bsde did not fill");
        SandwichRow row;
        row.value = envelope.value(p.path, p.step, p.x);
        row.y = y;
        row.lower = row.value - y;
        row.upper = row.value + y;
        row.reference = p.reference;
        row.band = 3.0 * p.reference_error + tolerance;
        below = std::max(below, row.lower - row.reference - row.band);
        above = std::max(above, row.reference - row.upper - row.band);
        min_y = std::min(min_y, y);
        abs_total += std::fabs(row.value - row.reference);
        out.rows.push_back(row);
    }
    out.mean_abs_error = points.empty() ? 0.0 : abs_total / static_cast<double>(points.size());
    out.report.add("lower_below_reference", below, 0.0, below <= 0.0);
    out.report.add("reference_below_upper", above, 0.0, above <= 0.0);
    out.report.add("envelope_width_nonnegative", -min_y, 0.0, -min_y <= 0.0);
    out.report.samples_used = points.size();
    return out;
}

ErrorBoundReport error_bound_check(const std::vector<double>& scales, const std::vector<double>& errors,
                                   double slack) {
    if (scales.size() != errors.size() || scales.empty())
        throw std::invalid_argument("error bound check needs matching non-empty sequences");
    if (!(scales[0] > 0.0)) throw std::invalid_argument("error bound check needs a positive first scale");
    ErrorBoundReport out;
    out.k0 = errors[0] / scales[0];
    for (std::size_t j = 1; j < errors.size(); ++j) {
        const double bound = out.k0 * scales[j] + slack;
        out.report.add("error_bound_" + std::to_string(j), errors[j], bound, errors[j] <= bound);
        out.report.add("error_monotone_" + std::to_string(j), errors[j], errors[j - 1] + slack,
                       errors[j] <= errors[j - 1] + slack);
    }
    return out;
}

// ---------------------------------------------------------------------------

double linear_pde_residual(const ValueField& field, const IntervalProblem& problem) {
    const std::size_t dims = field.dims();
    const std::size_t nodes = field.node_count();
    const int d = field.d;
    const std::size_t m = static_cast<std::size_t>(field.m0 + field.m1);
    double worst = 0.0;
    for (std::size_t i = 0; i < field.intervals.size(); ++i) {
        const IntervalBlock& block = field.intervals[i];
        const CoefficientSet& coeffs = problem.per_interval[i];
        const std::size_t slices = block.times.size();
        const std::size_t instances = block.instances();
        std::vector<double> worst_inst(instances, 0.0);
        parallel_for(instances, [&](std::size_t inst) {
            const std::vector<double> frozen = layout::frozen_values(block, inst);
            std::vector<double> drift(static_cast<std::size_t>(d)), sigma(static_cast<std::size_t>(d) * m);
            // L^theta J + f at node `flat` of slice `k`
            auto generator = [&](std::size_t k, std::size_t flat) {
                const double* u = block.values.data() + (inst * slices + k) * nodes;
                std::size_t idx[3];
                field.unflatten(flat, idx);
                double x[3] = {0.0, 0.0, 0.0};
                double y = 0.0;
                layout::node_point(field, flat, x, y);
                const WienerEnv env = layout::node_env(field, i, frozen, y);
                const double* v = field.lattice.point(static_cast<std::size_t>(block.argmin[(inst * slices + k) * nodes + flat]));
                const EvalEnv ev = make_env(block.times[k], x, v, env);
                eval_drift(coeffs, ev, drift.data());
                eval_sigma(coeffs, ev, sigma.data());
                auto at = [&](int da, std::size_t a, int db, std::size_t b) {
                    std::size_t shifted[3] = {idx[0], idx[1], idx[2]};
                    shifted[a] = static_cast<std::size_t>(static_cast<long>(shifted[a]) + da);
                    if (db != 0) shifted[b] = static_cast<std::size_t>(static_cast<long>(shifted[b]) + db);
                    return u[field.flat_index(std::span<const std::size_t>(shifted, dims))];
                };
                auto diffusion = [&](std::size_t a, std::size_t b) {
                    const bool ya = field.has_y && a == dims - 1;
                    const bool yb = field.has_y && b == dims - 1;
                    if (ya && yb) return 1.0;
                    if (ya) return sigma[b * m];
                    if (yb) return sigma[a * m];
                    double acc = 0.0;
                    for (std::size_t j = 0; j < m; ++j) acc += sigma[a * m + j] * sigma[b * m + j];
                    return acc;
                };
                double total = coeffs.running_cost.eval(ev);
                for (std::size_t a = 0; a < dims; ++a) {
                    const double ha = field.axes[a].h();
                    const double centre = u[flat];
                    const double plus = at(1, a, 0, a);
                    const double minus = at(-1, a, 0, a);
                    if (a < static_cast<std::size_t>(d)) total += drift[a] * (plus - minus) / (2.0 * ha);
                    total += 0.5 * diffusion(a, a) * (plus - 2.0 * centre + minus) / (ha * ha);
                    for (std::size_t b = a + 1; b < dims; ++b) {
                        const double coef = diffusion(a, b);
                        if (coef == 0.0) continue;
                        const double hb = field.axes[b].h();
                        const double cross =
                            (at(1, a, 1, b) - at(1, a, -1, b) - at(-1, a, 1, b) + at(-1, a, -1, b)) / (4.0 * ha * hb);
                        total += coef * cross;
                    }
                }
                return total;
            };
            std::size_t idx[3];
            for (std::size_t flat = 0; flat < nodes; ++flat) {
                field.unflatten(flat, idx);
                bool interior = true;
                for (std::size_t a = 0; a < dims; ++a) {
                    const std::size_t n = field.axes[a].n;
                    interior = interior && idx[a] >= n / 4 && idx[a] + n / 4 < n && idx[a] >= 1 && idx[a] + 1 < n;
                }
                if (!interior) continue;
                for (std::size_t k = 0; k + 1 < slices; ++k) {
                    const double* lo = block.values.data() + (inst * slices + k) * nodes;
                    const double* hi = lo + nodes;
                    const double span = block.times[k + 1] - block.times[k];
                    const double rate = (hi[flat] - lo[flat]) / span;
                    const double residual = rate + 0.5 * (generator(k, flat) + generator(k + 1, flat));
                    worst_inst[inst] = std::max(worst_inst[inst], std::fabs(residual));
                }
            }
        });
        for (double w : worst_inst) worst = std::max(worst, w);
    }
    return worst;
}

FeynmanKacReport feynman_kac_check(const CoefficientSet& c, const ControlLattice& lattice,
                                   const ControlPolicy& policy, const PathBundle& bundle,
                                   const std::vector<FeynmanKacPoint>& points, const FeynmanKacOptions& options) {
    check_grid(c.knots, bundle);
    const IntervalProblem problem = exact_problem(c);
    SolveOptions solve;
    solve.mesh = options.mesh;
    solve.fixed_policy = &policy;
    auto field = std::make_shared<const ValueField>(solve_recursive(problem, lattice, solve));
    FeynmanKacReport out;
    out.field = field;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const FeynmanKacPoint& p = points[i];
        const WienerEnv w = knot_env(bundle, p.path, p.t);
        const double pde = field->eval(p.t, p.x, w).value;
        const PathBundle branch = branch_at(bundle, p.path, p.t, options.branches, options.seed);
        const MCEstimate mc = cost_functional(c, policy, p.t, p.x, branch);
        out.pde.push_back(pde);
        out.mc.push_back(mc);
        const double gap = std::fabs(pde - mc.mean);
        const double band = 3.0 * mc.std_error + options.mesh_tolerance;
        out.report.add("feynman_kac_point_" + std::to_string(i), gap, band, gap <= band);
    }
    out.residual_max = linear_pde_residual(*field, problem);
    out.report.add("linear_pde_residual", out.residual_max, options.truncation_tolerance,
                   out.residual_max <= options.truncation_tolerance);
    out.report.samples_used = points.size() * options.branches;
    return out;
}

}  // namespace shjb
