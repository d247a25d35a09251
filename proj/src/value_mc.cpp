#include "shjb/value_mc.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "shjb/parallel.hpp"
#include "shjb/rng.hpp"

namespace shjb {

MCEstimate summarize(std::span<const double> samples) {
    MCEstimate out;
    out.count = samples.size();
    if (samples.empty()) return out;
    double sum = 0.0;
    for (double v : samples) sum += v;
    out.mean = sum / static_cast<double>(samples.size());
    if (samples.size() > 1) {
        double ss = 0.0;
        for (double v : samples) ss += (v - out.mean) * (v - out.mean);
        out.std_error = std::sqrt(ss / static_cast<double>(samples.size() - 1) / static_cast<double>(samples.size()));
    }
    return out;
}

std::vector<double> path_costs(const CoefficientSet& c, const ControlPolicy& policy, double t,
                               std::span<const double> x, const PathBundle& bundle, double stop,
                               const ValueField* continuation) {
    const std::size_t start = bundle.grid.step_of(t);
    const std::size_t end = bundle.grid.step_of(stop);
    if (end < start) throw std::invalid_argument("cost window ends before it starts");
    const bool at_horizon = end == bundle.grid.steps;
    if (!at_horizon && !continuation) throw std::invalid_argument("a continuation value is needed before the horizon");
    const double dt = bundle.grid.dt();
    const std::vector<std::size_t> coeff_knots = coefficient_knot_steps(c, bundle);
    const std::vector<std::size_t> field_knots =
        continuation ? bundle.grid.steps_of(continuation->knots) : coeff_knots;
    std::vector<double> out(bundle.count);
    parallel_for(bundle.count, [&](std::size_t path) {
        double running = 0.0;
        const StepVisitor visit = [&](std::size_t, std::size_t, double s, const double* state, std::size_t control,
                                      const WienerEnv& env) {
            const EvalEnv ev = make_env(s, state, policy.lattice().point(control), env);
            running += c.running_cost.eval(ev) * dt;
        };
        std::vector<double> final_state(static_cast<std::size_t>(c.d));
        if (!simulate_path(c, policy, bundle, path, start, x, visit, final_state.data(), nullptr, nullptr, end))
            throw SimulationError("non-finite state on path " + std::to_string(path));
        double tail = 0.0;
        if (at_horizon) {
            const WienerEnv env = knot_env_at(bundle, path, end, coeff_knots);
            std::vector<double> zero(static_cast<std::size_t>(policy.lattice().dim()), 0.0);
            tail = c.terminal_cost.eval(make_env(bundle.grid.horizon, final_state.data(), zero.data(), env));
        } else {
            const WienerEnv env = knot_env_at(bundle, path, end, field_knots);
            tail = continuation->eval(stop, final_state, env).value;
        }
        out[path] = running + tail;
    });
    return out;
}

MCEstimate cost_functional(const CoefficientSet& c, const ControlPolicy& policy, double t, std::span<const double> x,
                           const PathBundle& bundle) {
    const std::vector<double> costs = path_costs(c, policy, t, x, bundle, bundle.grid.horizon);
    return summarize(costs);
}

namespace {

std::vector<double> piece_times(double t, double end, std::size_t pieces) {
    std::vector<double> out;
    for (std::size_t j = 0; j < pieces; ++j) out.push_back(t + (end - t) * static_cast<double>(j) / static_cast<double>(pieces));
    return out;
}

std::size_t power(std::size_t base, std::size_t exponent) {
    std::size_t out = 1;
    for (std::size_t i = 0; i < exponent; ++i) {
        if (out > static_cast<std::size_t>(1) << 40) throw std::invalid_argument("enumeration budget exceeded");
        out *= base;
    }
    return out;
}

std::vector<std::size_t> schedule_of(std::size_t candidate, std::size_t base, std::size_t pieces) {
    std::vector<std::size_t> out(pieces);
    for (std::size_t j = pieces; j-- > 0;) {
        out[j] = candidate % base;
        candidate /= base;
    }
    return out;
}

}  // namespace

BruteResult brute_value(const CoefficientSet& c, const ControlLattice& lattice, double t, std::span<const double> x,
                        const PathBundle& bundle, std::size_t pieces, double budget) {
    if (pieces < 1) throw std::invalid_argument("brute force needs at least one piece");
    const std::size_t candidates = power(lattice.size(), pieces);
    const double work = static_cast<double>(candidates) * static_cast<double>(bundle.count) *
                        static_cast<double>(bundle.grid.steps - bundle.grid.step_of(t));
    if (work > budget) throw std::invalid_argument("enumeration budget exceeded");
    const std::vector<double> switches = piece_times(t, bundle.grid.horizon, pieces);
    BruteResult best;
    best.candidates = candidates;
    best.estimate.mean = INFINITY;
    for (std::size_t cand = 0; cand < candidates; ++cand) {
        const std::vector<std::size_t> schedule = schedule_of(cand, lattice.size(), pieces);
        const ControlPolicy policy = ControlPolicy::open_loop(lattice, switches, schedule);
        std::vector<double> costs = path_costs(c, policy, t, x, bundle, bundle.grid.horizon);
        const MCEstimate est = summarize(costs);
        if (est.mean < best.estimate.mean) {
            best.estimate = est;
            best.schedule = schedule;
            best.samples = std::move(costs);
        }
    }
    return best;
}

DppReport dpp_residual(const CoefficientSet& c, const ControlLattice& lattice, double t, double t_hat,
                       std::span<const double> x, const PathBundle& bundle, std::size_t pieces,
                       std::shared_ptr<const ValueField> oracle, const ValueField* coarse) {
    if (!(t < t_hat) || t_hat > bundle.grid.horizon + 1e-12) throw std::invalid_argument("need t < t_hat <= T");
    if (!oracle) throw std::invalid_argument("dpp residual needs an oracle field");
    const double horizon = bundle.grid.horizon;
    const bool terminal = bundle.grid.step_of(t_hat) == bundle.grid.steps;
    const ControlPolicy feedback = ControlPolicy::feedback(oracle);
    const std::size_t count = pieces == 0 ? 0 : power(lattice.size(), pieces);
    const double work = static_cast<double>(count + 1) * 2.0 * static_cast<double>(bundle.count) *
                        static_cast<double>(bundle.grid.steps);
    if (work > 4e8) throw std::invalid_argument("enumeration budget exceeded");

    struct Best {
        double mean = INFINITY;
        std::vector<double> samples;
    };
    auto consider = [](Best& best, std::vector<double> samples) {
        const double mean = summarize(samples).mean;
        if (mean < best.mean) {
            best.mean = mean;
            best.samples = std::move(samples);
        }
    };
    Best left, right;
    consider(left, path_costs(c, feedback, t, x, bundle, horizon));
    consider(right, path_costs(c, feedback, t, x, bundle, t_hat, oracle.get()));
    const std::vector<double> left_switches = piece_times(t, horizon, pieces);
    const std::vector<double> right_switches = piece_times(t, t_hat, pieces);
    for (std::size_t cand = 0; cand < count; ++cand) {
        const std::vector<std::size_t> schedule = schedule_of(cand, lattice.size(), pieces);
        consider(left, path_costs(c, ControlPolicy::open_loop(lattice, left_switches, schedule), t, x, bundle, horizon));
        consider(right, path_costs(c, ControlPolicy::open_loop(lattice, right_switches, schedule), t, x, bundle, t_hat,
                                   oracle.get()));
    }
    DppReport out;
    out.lhs = left.mean;
    out.rhs = right.mean;
    out.residual = std::fabs(out.lhs - out.rhs);
    std::vector<double> diff(bundle.count);
    for (std::size_t p = 0; p < bundle.count; ++p) diff[p] = left.samples[p] - right.samples[p];
    out.std_error = summarize(diff).std_error;
    if (coarse && !terminal) {
        const std::vector<double> fine = path_costs(c, feedback, t, x, bundle, t_hat, oracle.get());
        const std::vector<double> rough = path_costs(c, feedback, t, x, bundle, t_hat, coarse);
        out.mesh_error = std::fabs(summarize(fine).mean - summarize(rough).mean);
    }
    out.threshold = 3.0 * std::sqrt(out.std_error * out.std_error + out.mesh_error * out.mesh_error);
    out.pass = out.residual <= out.threshold + 1e-12 * (1.0 + std::fabs(out.lhs));
    return out;
}

SupermartingaleReport supermartingale_check(const CoefficientSet& c, const ValueField& oracle,
                                            const ControlPolicy& policy, std::span<const double> x,
                                            const std::vector<double>& times, const PathBundle& bundle,
                                            double mesh_tolerance) {
    if (times.size() < 2 || !std::is_sorted(times.begin(), times.end()))
        throw std::invalid_argument("supermartingale check needs increasing times");
    const std::vector<std::size_t> marks = bundle.grid.steps_of(times);
    const std::size_t start = marks.front();
    const std::size_t stop = marks.back();
    const double dt = bundle.grid.dt();
    const std::vector<std::size_t> field_knots = bundle.grid.steps_of(oracle.knots);
    const std::size_t windows = times.size() - 1;
    // per path: value at each mark and running cost between marks
    std::vector<double> values(bundle.count * times.size()), costs(bundle.count * windows);
    parallel_for(bundle.count, [&](std::size_t path) {
        std::size_t next_mark = 0;
        double running = 0.0;
        double* vals = values.data() + path * times.size();
        double* cst = costs.data() + path * windows;
        const StepVisitor visit = [&](std::size_t, std::size_t k, double s, const double* state, std::size_t control,
                                      const WienerEnv& env) {
            if (next_mark < marks.size() && marks[next_mark] == k) {
                if (next_mark > 0) cst[next_mark - 1] = running;
                running = 0.0;
                const WienerEnv fenv = knot_env_at(bundle, path, k, field_knots);
                vals[next_mark] = oracle.eval(s, std::span<const double>(state, static_cast<std::size_t>(c.d)), fenv).value;
                ++next_mark;
            }
            running += c.running_cost.eval(make_env(s, state, policy.lattice().point(control), env)) * dt;
        };
        std::vector<double> final_state(static_cast<std::size_t>(c.d));
        simulate_path(c, policy, bundle, path, start, x, visit, final_state.data(), nullptr, nullptr, stop);
        if (next_mark + 1 == marks.size()) {
            cst[next_mark - 1] = running;
            const WienerEnv fenv = knot_env_at(bundle, path, stop, field_knots);
            vals[next_mark] = oracle.eval(bundle.grid.time(stop), final_state, fenv).value;
        }
    });
    SupermartingaleReport out;
    for (std::size_t w = 0; w < windows; ++w) {
        std::vector<double> gap(bundle.count);
        for (std::size_t p = 0; p < bundle.count; ++p)
            gap[p] = values[p * times.size() + w + 1] + costs[p * windows + w] - values[p * times.size() + w];
        const MCEstimate est = summarize(gap);
        out.gaps.push_back(est.mean);
        out.std_errors.push_back(est.std_error);
        out.report.add("window_" + std::to_string(w), -est.mean, 3.0 * est.std_error + mesh_tolerance,
                       -est.mean <= 3.0 * est.std_error + mesh_tolerance);
    }
    out.report.samples_used = bundle.count;
    return out;
}

double lipschitz_probe(const ValueField& field, double t, std::size_t pair_count, const PathBundle& bundle,
                       const std::vector<double>& x_lo, const std::vector<double>& x_hi, std::uint64_t seed) {
    if (pair_count < 1) throw std::invalid_argument("need at least one pair");
    const std::size_t step = bundle.grid.step_of(t);
    const std::vector<std::size_t> knots = bundle.grid.steps_of(field.knots);
    const CounterRng rng(seed);
    const std::size_t d = static_cast<std::size_t>(field.d);
    std::vector<double> quotients(pair_count);
    parallel_for(pair_count, [&](std::size_t j) {
        const WienerEnv env = knot_env_at(bundle, j % bundle.count, step, knots);
        std::vector<double> a(d), b(d);
        double dist = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            a[k] = x_lo[k] + (x_hi[k] - x_lo[k]) * rng.uniform(j, 2 * k);
            b[k] = x_lo[k] + (x_hi[k] - x_lo[k]) * rng.uniform(j, 2 * k + 1);
            dist += (a[k] - b[k]) * (a[k] - b[k]);
        }
        dist = std::sqrt(dist);
        quotients[j] = dist > 0.0 ? std::fabs(field.eval(t, a, env).value - field.eval(t, b, env).value) / dist : 0.0;
    });
    return *std::max_element(quotients.begin(), quotients.end());
}

BoundReport bound_check(const CoefficientSet& c, const ValueField& field, const ControlPolicy& policy,
                        std::span<const double> x, const PathBundle& bundle, std::size_t samples,
                        std::uint64_t seed) {
    const std::size_t d = static_cast<std::size_t>(c.d);
    const std::vector<std::size_t> knots = bundle.grid.steps_of(field.knots);
    const CounterRng rng(seed);
    std::vector<double> sups(samples, 0.0);
    parallel_for(samples, [&](std::size_t j) {
        const std::size_t step = std::min<std::size_t>(
            bundle.grid.steps, static_cast<std::size_t>(rng.uniform(j, 0) * static_cast<double>(bundle.grid.steps + 1)));
        const WienerEnv env = knot_env_at(bundle, j % bundle.count, step, knots);
        std::vector<double> point(d);
        // interior half of the mesh box
        for (std::size_t k = 0; k < d; ++k) {
            const Axis& a = field.axes[k];
            const double mid = 0.5 * (a.lo + a.hi);
            point[k] = mid + 0.5 * (a.hi - a.lo) * (rng.uniform(j, k + 1) - 0.5);
        }
        sups[j] = std::fabs(field.eval(bundle.grid.time(step), point, env).value);
    });
    BoundReport out;
    out.sup = samples ? *std::max_element(sups.begin(), sups.end()) : 0.0;
    // time-continuity modulus along simulated paths: RMS one-step change
    std::vector<double> sq(bundle.count, 0.0);
    parallel_for(bundle.count, [&](std::size_t path) {
        std::vector<double> traj((bundle.grid.steps + 1) * d);
        simulate_path(c, policy, bundle, path, 0, x, nullptr, nullptr, traj.data());
        EnvTracker tracker(bundle, knots);
        tracker.reset(path, 0);
        double prev = field.eval(0.0, std::span<const double>(traj.data(), d), tracker.env()).value;
        double acc = 0.0;
        for (std::size_t k = 1; k <= bundle.grid.steps; ++k) {
            tracker.advance();
            const double now =
                field.eval(bundle.grid.time(k), std::span<const double>(traj.data() + k * d, d), tracker.env()).value;
            acc += (now - prev) * (now - prev);
            prev = now;
        }
        sq[path] = acc / static_cast<double>(bundle.grid.steps);
    });
    double mean_sq = 0.0;
    for (double v : sq) mean_sq += v;
    out.modulus = std::sqrt(mean_sq / static_cast<double>(bundle.count));
    const double limit = c.bound_l * (c.horizon() + 1.0);
    out.report.add("sup_abs_value", out.sup, limit, out.sup <= limit);
    out.report.add("time_modulus_rms", out.modulus, INFINITY, true);
    out.report.samples_used = samples + bundle.count;
    return out;
}

}  // namespace shjb
