#include "shjb/sde.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "shjb/parallel.hpp"

namespace shjb {

ControlPolicy ControlPolicy::constant(const ControlLattice& lattice, std::size_t index) {
    return open_loop(lattice, {0.0}, {index});
}

ControlPolicy ControlPolicy::open_loop(const ControlLattice& lattice, std::vector<double> switch_times,
                                       std::vector<std::size_t> indices) {
    if (switch_times.empty() || switch_times.size() != indices.size())
        throw std::invalid_argument("open-loop schedule needs one index per piece");
    if (!std::is_sorted(switch_times.begin(), switch_times.end()))
        throw std::invalid_argument("open-loop switch times must increase");
    for (std::size_t idx : indices)
        if (idx >= lattice.size()) throw std::invalid_argument("open-loop index outside the lattice");
    ControlPolicy p;
    p.kind_ = Kind::open_loop;
    p.lattice_ = lattice;
    p.switch_times_ = std::move(switch_times);
    p.indices_ = std::move(indices);
    return p;
}

ControlPolicy ControlPolicy::feedback(std::shared_ptr<const ValueField> field) {
    if (!field) throw std::invalid_argument("feedback policy needs a field");
    ControlPolicy p;
    p.kind_ = Kind::feedback;
    p.lattice_ = field->lattice;
    p.field_ = std::move(field);
    return p;
}

ControlPolicy ControlPolicy::custom(const ControlLattice& lattice, Rule rule) {
    ControlPolicy p;
    p.kind_ = Kind::custom;
    p.lattice_ = lattice;
    p.rule_ = std::move(rule);
    return p;
}

std::size_t ControlPolicy::choose(std::size_t step, double t, std::span<const double> x, const WienerEnv& w,
                                  PolicyMemory& memory) const {
    std::size_t idx = 0;
    switch (kind_) {
        case Kind::open_loop: {
            std::size_t piece = 0;
            while (piece + 1 < switch_times_.size() && switch_times_[piece + 1] <= t + 1e-12) ++piece;
            idx = indices_[piece];
            break;
        }
        case Kind::feedback:
            idx = field_->policy_index(t, x, w);
            break;
        case Kind::custom:
            idx = rule_(step, t, x, w);
            break;
        case Kind::pasted: {
            if (t < switch_time_ - 1e-12) return base_->choose(step, t, x, w, memory);
            if (memory.box < 0) {
                double best = INFINITY;
                for (std::size_t b = 0; b < box_lo_.size(); ++b) {
                    double dist = 0.0;
                    for (std::size_t k = 0; k < x.size(); ++k) {
                        const double gap = std::max({box_lo_[b][k] - x[k], x[k] - box_hi_[b][k], 0.0});
                        dist += gap * gap;
                    }
                    bool inside = dist == 0.0;
                    // half-open boxes: the upper face belongs to the neighbour
                    for (std::size_t k = 0; inside && k < x.size(); ++k)
                        if (x[k] >= box_hi_[b][k] && box_hi_[b][k] < INFINITY) inside = false;
                    if (inside) {
                        memory.box = static_cast<long>(b);
                        break;
                    }
                    if (dist < best) {
                        best = dist;
                        memory.box = static_cast<long>(b);
                    }
                }
            }
            PolicyMemory inner;
            idx = tails_[static_cast<std::size_t>(memory.box)].choose(step, t, x, w, inner);
            break;
        }
    }
    if (idx >= lattice_.size()) throw std::logic_error("policy emitted a control outside the lattice");
    return idx;
}

ControlPolicy paste_controls(const ControlPolicy& base, const std::vector<std::vector<double>>& box_lo,
                             const std::vector<std::vector<double>>& box_hi, const std::vector<ControlPolicy>& tails,
                             double switch_time) {
    if (box_lo.empty() || box_lo.size() != box_hi.size() || box_lo.size() != tails.size())
        throw std::invalid_argument("pasting needs one tail policy per box");
    for (std::size_t a = 0; a < box_lo.size(); ++a)
        for (std::size_t b = a + 1; b < box_lo.size(); ++b) {
            bool overlap = true;
            for (std::size_t k = 0; k < box_lo[a].size(); ++k)
                if (!(box_lo[a][k] < box_hi[b][k] && box_lo[b][k] < box_hi[a][k])) overlap = false;
            if (overlap) throw std::invalid_argument("pasting boxes overlap");
        }
    ControlPolicy p;
    p.kind_ = ControlPolicy::Kind::pasted;
    p.lattice_ = base.lattice();
    p.base_ = std::make_shared<const ControlPolicy>(base);
    p.box_lo_ = box_lo;
    p.box_hi_ = box_hi;
    p.tails_ = tails;
    p.switch_time_ = switch_time;
    return p;
}

std::vector<std::size_t> coefficient_knot_steps(const CoefficientSet& c, const PathBundle& bundle) {
    if (std::fabs(c.horizon() - bundle.grid.horizon) > 1e-12 * c.horizon())
        throw std::invalid_argument("bundle horizon differs from the problem horizon");
    return bundle.grid.steps_of(c.knots);
}

bool simulate_path(const CoefficientSet& c, const ControlPolicy& policy, const PathBundle& bundle, std::size_t path,
                   std::size_t start_step, std::span<const double> x0, const StepVisitor& visit, double* final_state,
                   double* trajectory, std::size_t* trace, std::size_t stop_step) {
    const std::size_t d = static_cast<std::size_t>(c.d);
    const std::size_t m = static_cast<std::size_t>(c.m());
    const std::size_t end = std::min(stop_step, bundle.grid.steps);
    const double dt = bundle.grid.dt();
    EnvTracker tracker(bundle, coefficient_knot_steps(c, bundle));
    tracker.reset(path, start_step);
    std::vector<double> x(x0.begin(), x0.end());
    std::vector<double> drift(d), sigma(d * m);
    PolicyMemory memory;
    if (trajectory) std::copy(x.begin(), x.end(), trajectory);
    bool finite = true;
    for (std::size_t k = start_step; k < end; ++k) {
        const double t = bundle.grid.time(k);
        const WienerEnv& env = tracker.env();
        const std::size_t idx = policy.choose(k, t, x, env, memory);
        if (trace) trace[k - start_step] = idx;
        if (visit) visit(path, k, t, x.data(), idx, env);
        try {
            const EvalEnv ev = make_env(t, x.data(), policy.lattice().point(idx), env);
            eval_drift(c, ev, drift.data());
            eval_sigma(c, ev, sigma.data());
        } catch (const DomainError& e) {
            throw SimulationError(std::string(e.what()) + " on path " + std::to_string(path) + " at step " +
                                  std::to_string(k));
        }
        const double* inc = tracker.increment();
        for (std::size_t i = 0; i < d; ++i) {
            double next = x[i] + drift[i] * dt;
            for (std::size_t j = 0; j < m; ++j) next += sigma[i * m + j] * inc[j];
            x[i] = next;
            if (!std::isfinite(next)) finite = false;
        }
        tracker.advance();
        if (trajectory) std::copy(x.begin(), x.end(), trajectory + (k + 1 - start_step) * d);
        if (!finite) break;
    }
    if (final_state) std::copy(x.begin(), x.end(), final_state);
    return finite;
}

StatePaths simulate(const CoefficientSet& c, const ControlPolicy& policy, double t0, std::span<const double> x0,
                    const PathBundle& bundle) {
    if (x0.size() != static_cast<std::size_t>(c.d)) throw std::invalid_argument("start state has the wrong dimension");
    StatePaths out;
    out.start_step = bundle.grid.step_of(t0);
    out.start_time = t0;
    out.start_state.assign(x0.begin(), x0.end());
    out.d = c.d;
    out.steps = bundle.grid.steps - out.start_step;
    out.count = bundle.count;
    const std::size_t d = static_cast<std::size_t>(c.d);
    out.values.assign(out.count * (out.steps + 1) * d, 0.0);
    out.controls.assign(out.count * out.steps, 0);
    out.failed.assign(out.count, 0);
    parallel_for(out.count, [&](std::size_t p) {
        double* traj = out.values.data() + p * (out.steps + 1) * d;
        const bool ok = simulate_path(c, policy, bundle, p, out.start_step, x0, nullptr, nullptr, traj,
                                      out.controls.data() + p * out.steps);
        out.failed[p] = ok ? 0 : 1;
    });
    for (std::size_t p = 0; p < out.count; ++p)
        if (out.failed[p]) {
            out.ok = false;
            out.failure = "non-finite state on path " + std::to_string(p);
            break;
        }
    return out;
}

namespace {

double norm_pow(const double* v, std::size_t d, int p) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += v[i] * v[i];
    return std::pow(s, 0.5 * p);
}

double diff_norm_pow(const double* a, const double* b, std::size_t d, int p) {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::pow(s, 0.5 * p);
}

struct MomentRatios {
    double max_ratio = 0.0;
    double increment_ratio = 0.0;
};

MomentRatios moment_ratios(const StatePaths& sp, std::size_t paths, double dt, double scale, int p) {
    const std::size_t d = static_cast<std::size_t>(sp.d);
    MomentRatios out;
    double sum_max = 0.0;
    for (std::size_t q = 0; q < paths; ++q) {
        double peak = 0.0;
        for (std::size_t k = 0; k <= sp.steps; ++k) peak = std::max(peak, norm_pow(sp.state(q, k), d, p));
        sum_max += peak;
    }
    out.max_ratio = sum_max / static_cast<double>(paths) / scale;
    for (std::size_t lag = 1; lag <= sp.steps; lag *= 2) {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t q = 0; q < paths; ++q)
            for (std::size_t k = 0; k + lag <= sp.steps; k += lag) {
                sum += diff_norm_pow(sp.state(q, k + lag), sp.state(q, k), d, p);
                ++n;
            }
        const double span_time = static_cast<double>(lag) * dt;
        out.increment_ratio =
            std::max(out.increment_ratio, sum / static_cast<double>(n) / (scale * std::pow(span_time, 0.5 * p)));
    }
    return out;
}

}  // namespace

MomentReport check_moments(const CoefficientSet& c, const ControlPolicy& policy, double t0,
                           std::span<const double> x0, const PathBundle& bundle, int p) {
    if (p != 2 && p != 4) throw std::invalid_argument("moment order must be 2 or 4");
    if (bundle.count < 2) throw std::invalid_argument("moment check needs at least two paths");
    const StatePaths sp = simulate(c, policy, t0, x0, bundle);
    if (!sp.ok) throw SimulationError(sp.failure);
    const double scale = 1.0 + norm_pow(x0.data(), x0.size(), p);
    const double dt = bundle.grid.dt();
    const MomentRatios half = moment_ratios(sp, bundle.count / 2, dt, scale, p);
    const MomentRatios full = moment_ratios(sp, bundle.count, dt, scale, p);
    const double m_half = std::max(half.max_ratio, half.increment_ratio);
    const double m_full = std::max(full.max_ratio, full.increment_ratio);
    MomentReport out;
    out.k_hat = std::max(m_half, m_full);
    out.max_ratio = full.max_ratio;
    out.increment_ratio = full.increment_ratio;
    const double drift = out.k_hat > 0.0 ? std::fabs(m_full - m_half) / out.k_hat : 0.0;
    out.report.add("max_moment_ratio", full.max_ratio, out.k_hat, full.max_ratio <= out.k_hat);
    out.report.add("increment_moment_ratio", full.increment_ratio, out.k_hat, full.increment_ratio <= out.k_hat);
    out.report.add("k_hat_doubling_drift", drift, 0.2, drift <= 0.2);
    out.report.samples_used = bundle.count;
    return out;
}

double check_flow(const CoefficientSet& c, const ControlPolicy& policy, const PathBundle& bundle, double r, double t,
                  std::span<const double> x0) {
    if (r > t) throw std::invalid_argument("flow check needs r <= t");
    const std::size_t d = static_cast<std::size_t>(c.d);
    const std::size_t r_step = bundle.grid.step_of(r);
    const std::size_t t_step = bundle.grid.step_of(t);
    const std::size_t total = bundle.grid.steps;
    std::vector<double> worst(bundle.count, 0.0);
    parallel_for(bundle.count, [&](std::size_t p) {
        std::vector<double> first((total - r_step + 1) * d), second((total - t_step + 1) * d);
        simulate_path(c, policy, bundle, p, r_step, x0, nullptr, nullptr, first.data());
        const double* restart = first.data() + (t_step - r_step) * d;
        simulate_path(c, policy, bundle, p, t_step, std::span<const double>(restart, d), nullptr, nullptr,
                      second.data());
        double gap = 0.0;
        for (std::size_t k = 0; k + t_step <= total; ++k)
            for (std::size_t i = 0; i < d; ++i)
                gap = std::max(gap, std::fabs(first[(k + t_step - r_step) * d + i] - second[k * d + i]));
        worst[p] = gap;
    });
    return *std::max_element(worst.begin(), worst.end());
}

ExitReport exit_time_check(const CoefficientSet& c, const ControlPolicy& policy, double t0,
                           std::span<const double> x0, double radius, double h, const PathBundle& bundle) {
    if (!(radius > 0.0) || !(h > 0.0)) throw std::invalid_argument("exit check needs positive radius and window");
    const std::size_t d = static_cast<std::size_t>(c.d);
    const std::size_t start = bundle.grid.step_of(t0);
    const std::size_t stop = bundle.grid.step_of(t0 + h);
    std::vector<char> exceeded(bundle.count, 0);
    parallel_for(bundle.count, [&](std::size_t p) {
        std::vector<double> traj((stop - start + 1) * d);
        simulate_path(c, policy, bundle, p, start, x0, nullptr, nullptr, traj.data(), nullptr, stop);
        for (std::size_t k = 0; k <= stop - start; ++k)
            if (std::sqrt(diff_norm_pow(traj.data() + k * d, x0.data(), d, 2)) > 0.5 * radius) {
                exceeded[p] = 1;
                break;
            }
    });
    ExitReport out;
    std::size_t hits = 0;
    for (char e : exceeded) hits += e ? 1 : 0;
    out.probability = static_cast<double>(hits) / static_cast<double>(bundle.count);
    out.k_hat = check_moments(c, policy, t0, x0, bundle, 4).k_hat;
    out.bound = 16.0 * out.k_hat / std::pow(radius, 4) * (1.0 + norm_pow(x0.data(), d, 4)) * h * h;
    out.report.add("exit_probability", out.probability, out.bound, out.probability <= out.bound);
    out.report.samples_used = bundle.count;
    return out;
}

}  // namespace shjb
