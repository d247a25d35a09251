#include "shjb/viscosity.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "shjb/lift.hpp"
#include "shjb/parallel.hpp"
#include "shjb/rng.hpp"

namespace shjb {

namespace {

struct Moments {
    double mean = 0.0;
    double error = 0.0;
};

Moments moments(const std::vector<double>& values) {
    Moments out;
    const double n = static_cast<double>(values.size());
    for (double v : values) out.mean += v;
    out.mean /= n;
    if (values.size() > 1) {
        double sq = 0.0;
        for (double v : values) sq += (v - out.mean) * (v - out.mean);
        out.error = std::sqrt(sq / (n - 1.0) / n);
    }
    return out;
}

std::vector<double> wiener_at_time(const PathRef& ref, double t) {
    return ref.bundle->wiener_at(ref.path, ref.bundle->grid.step_of(t));
}

// Offsets of a ball mesh with `points` per axis, kept inside the Euclidean ball.
std::vector<double> ball_offsets(std::size_t d, double radius, int points) {
    std::vector<double> out;
    std::size_t total = 1;
    for (std::size_t a = 0; a < d; ++a) total *= static_cast<std::size_t>(points);
    std::vector<double> offset(d);
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t rest = flat;
        double norm = 0.0;
        for (std::size_t a = 0; a < d; ++a) {
            const int i = static_cast<int>(rest % static_cast<std::size_t>(points));
            rest /= static_cast<std::size_t>(points);
            offset[a] = points == 1 ? 0.0 : radius * (-1.0 + 2.0 * i / (points - 1));
            norm += offset[a] * offset[a];
        }
        if (std::sqrt(norm) <= radius * (1.0 + 1e-12)) out.insert(out.end(), offset.begin(), offset.end());
    }
    return out;
}

}  // namespace

RandomFieldSampler env_sampler(std::function<double(double t, std::span<const double> x, const WienerEnv& w)> fn) {
    RandomFieldSampler s;
    s.value = [fn = std::move(fn)](double t, std::span<const double> x, const PathRef& ref) {
        return fn(t, x, knot_env(*ref.bundle, ref.path, t));
    };
    return s;
}

RandomFieldSampler field_sampler(std::shared_ptr<const ValueField> field) {
    double spacing = 0.0;
    for (int a = 0; a < field->d; ++a) spacing = std::max(spacing, field->axes[static_cast<std::size_t>(a)].h());
    RandomFieldSampler s = env_sampler([field = std::move(field)](double t, std::span<const double> x, const WienerEnv& w) {
        return field->eval(t, x, w).value;
    });
    s.resolution = spacing;
    return s;
}

RandomFieldSampler shifted_sampler(RandomFieldSampler base, double sign, double horizon) {
    RandomFieldSampler s = base;
    s.value = [base, sign, horizon](double t, std::span<const double> x, const PathRef& ref) {
        return base.value(t, x, ref) + sign * (horizon - t);
    };
    if (base.jet)
        s.jet = [base, sign, horizon](double t, std::span<const double> x, const PathRef& ref) {
            FieldJet j = base.jet(t, x, ref);
            j.value += sign * (horizon - t);
            j.dt -= sign;
            return j;
        };
    return s;
}

StochasticDerivativePair estimate_derivatives(const RandomFieldSampler& u, const PathBundle& bundle,
                                              std::size_t path, double t, std::span<const double> x, double step,
                                              std::size_t branches, std::uint64_t seed) {
    const TimeGrid& grid = bundle.grid;
    const std::size_t start = grid.step_of(t);
    const std::size_t full = grid.step_of(t + step);
    if (full <= start) throw std::invalid_argument("derivative step must be positive");
    if (branches < 2) throw std::invalid_argument("derivative estimate needs at least two branches");
    const PathBundle branch = branch_at(bundle, path, t, branches, seed);
    const std::size_t m = static_cast<std::size_t>(bundle.m());

    std::vector<double> base(branches);
    parallel_for(branches, [&](std::size_t b) { base[b] = u.value(t, x, PathRef{&branch, b}); });
    const double parent = u.value(t, x, PathRef{&bundle, path});
    for (std::size_t b = 0; b < branches; ++b)
        if (std::fabs(base[b] - parent) > 1e-9 * (1.0 + std::fabs(parent)))
            throw NonAdaptedError("field value at t differs across branches sharing the path up to t");

    StochasticDerivativePair out;
    out.branches = branches;
    auto estimate = [&](std::size_t end, double& dt, double* dt_error, std::vector<double>& dw,
                        std::vector<double>* dw_error) {
        const double span = grid.time(end) - t;
        std::vector<double> inc(branches);
        std::vector<double> noise(branches * m);
        parallel_for(branches, [&](std::size_t b) {
            inc[b] = u.value(grid.time(end), x, PathRef{&branch, b}) - base[b];
            const std::vector<double> w1 = branch.wiener_at(b, end);
            const std::vector<double> w0 = branch.wiener_at(b, start);
            for (std::size_t c = 0; c < m; ++c) noise[b * m + c] = w1[c] - w0[c];
        });
        const Moments drift = moments(inc);
        dt = drift.mean / span;
        if (dt_error) *dt_error = drift.error / span;
        dw.assign(m, 0.0);
        if (dw_error) dw_error->assign(m, 0.0);
        std::vector<double> products(branches);
        for (std::size_t c = 0; c < m; ++c) {
            for (std::size_t b = 0; b < branches; ++b) products[b] = (inc[b] - drift.mean) * noise[b * m + c] / span;
            const Moments mc = moments(products);
            dw[c] = mc.mean;
            if (dw_error) (*dw_error)[c] = mc.error;
        }
    };
    estimate(full, out.dt, &out.dt_error, out.domega, &out.domega_error);
    const double half_time = t + 0.5 * step;
    if (grid.on_grid(half_time) && grid.step_of(half_time) > start) {
        estimate(grid.step_of(half_time), out.dt_half, nullptr, out.domega_half, nullptr);
        out.richardson_dt = 2.0 * out.dt_half - out.dt;
        out.richardson_domega.resize(m);
        for (std::size_t c = 0; c < m; ++c) out.richardson_domega[c] = 2.0 * out.domega_half[c] - out.domega[c];
    } else {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        out.dt_half = out.richardson_dt = nan;
        out.domega_half.assign(m, nan);
        out.richardson_domega.assign(m, nan);
    }
    return out;
}

// ---------------------------------------------------------------------------

double TestFunction::value(double s, std::span<const double> x, std::span<const double> w_s) const {
    const std::size_t d = xi.size();
    Eigen::VectorXd dx(static_cast<Eigen::Index>(d));
    for (std::size_t a = 0; a < d; ++a) dx[static_cast<Eigen::Index>(a)] = x[a] - xi[a];
    double total = anchor + p.dot(dx) + 0.5 * dx.dot(curvature * dx) + slope * (s - tau);
    for (std::size_t c = 0; c < q.size(); ++c) total += q[c] * (w_s[c] - w_tau[c]);
    return total;
}

FieldJet TestFunction::jet(double s, std::span<const double> x) const {
    const std::size_t d = xi.size();
    FieldJet j = zero_jet(static_cast<int>(d), static_cast<int>(q.size()));
    Eigen::VectorXd dx(static_cast<Eigen::Index>(d));
    for (std::size_t a = 0; a < d; ++a) dx[static_cast<Eigen::Index>(a)] = x[a] - xi[a];
    j.value = anchor + p.dot(dx) + 0.5 * dx.dot(curvature * dx) + slope * (s - tau);
    j.dt = slope;
    j.grad = p + curvature * dx;
    j.hess = curvature;
    return j;
}

RandomFieldSampler TestFunction::sampler() const {
    const TestFunction self = *this;
    RandomFieldSampler s;
    s.smooth = true;
    s.value = [self](double t, std::span<const double> x, const PathRef& ref) {
        return self.value(t, x, wiener_at_time(ref, t));
    };
    s.jet = [self](double t, std::span<const double> x, const PathRef&) { return self.jet(t, x); };
    s.domega = [self](double, std::span<const double>, const PathRef&) { return self.q; };
    return s;
}

TestFunction random_test_function(const PathBundle& bundle, std::size_t path, double tau, std::span<const double> xi,
                                  std::uint64_t seed) {
    const CounterRng rng(seed);
    const std::size_t d = xi.size();
    const std::size_t m = static_cast<std::size_t>(bundle.m());
    std::uint64_t draw = 0;
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * rng.uniform(0, draw++); };
    TestFunction phi;
    phi.tau = tau;
    phi.xi.assign(xi.begin(), xi.end());
    phi.anchor = uniform(-1.0, 1.0);
    phi.p = Eigen::VectorXd(static_cast<Eigen::Index>(d));
    phi.curvature = Eigen::MatrixXd(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d));
    for (std::size_t a = 0; a < d; ++a) phi.p[static_cast<Eigen::Index>(a)] = uniform(-1.0, 1.0);
    for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = a; b < d; ++b) {
            const double v = uniform(-1.0, 1.0);
            phi.curvature(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = v;
            phi.curvature(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = v;
        }
    phi.slope = uniform(-2.0, 2.0);
    phi.q.resize(m);
    for (std::size_t c = 0; c < m; ++c) phi.q[c] = uniform(-2.0, 2.0);
    phi.w_tau = bundle.wiener_at(path, bundle.grid.step_of(tau));
    phi.certificate.verdict = "constructed";
    return phi;
}

// ---------------------------------------------------------------------------

ItoKunitaReport ito_kunita_residual(const RandomFieldSampler& phi, const CoefficientSet& c,
                                    const ControlPolicy& policy, std::span<const double> x0,
                                    const PathBundle& bundle) {
    if (!phi.jet || !phi.domega) throw std::invalid_argument("Ito-Kunita residual needs analytic derivative blocks");
    const std::size_t d = static_cast<std::size_t>(c.d);
    const std::size_t m = static_cast<std::size_t>(c.m());
    const double dt = bundle.grid.dt();
    std::vector<double> residual(bundle.count, 0.0);
    parallel_for(bundle.count, [&](std::size_t path) {
        const PathRef ref{&bundle, path};
        double accumulated = 0.0;
        std::vector<double> sigma(d * m);
        const StepVisitor visit = [&](std::size_t, std::size_t step, double t, const double* x, std::size_t control,
                                      const WienerEnv& env) {
            const std::span<const double> state(x, d);
            const std::vector<double> v = policy.lattice().point_vec(control);
            const FieldJet jet = phi.jet(t, state, ref);
            accumulated += generator_Lv(c, v, t, state, env, jet) * dt;
            eval_sigma(c, make_env(t, x, v.data(), env), sigma.data());
            const std::vector<double> dom = phi.domega(t, state, ref);
            const double* dw = bundle.step_increments(path, step);
            for (std::size_t j = 0; j < m; ++j) {
                double integrand = dom[j];
                for (std::size_t i = 0; i < d; ++i) integrand += jet.grad[static_cast<Eigen::Index>(i)] * sigma[i * m + j];
                accumulated += integrand * dw[j];
            }
        };
        std::vector<double> final_state(d);
        if (!simulate_path(c, policy, bundle, path, 0, x0, visit, final_state.data())) {
            residual[path] = std::numeric_limits<double>::infinity();
            return;
        }
        const double start = phi.value(0.0, x0, ref);
        const double end = phi.value(bundle.grid.horizon, final_state, ref);
        residual[path] = std::fabs(end - start - accumulated);
    });
    ItoKunitaReport out;
    out.paths = bundle.count;
    double sq = 0.0;
    for (double r : residual) {
        out.max = std::max(out.max, r);
        sq += r * r;
    }
    out.rms = std::sqrt(sq / static_cast<double>(bundle.count));
    return out;
}

// ---------------------------------------------------------------------------

TestFunction make_touching_test(const RandomFieldSampler& u, const PathBundle& bundle, std::size_t path, double tau,
                                std::span<const double> xi, TouchSide side, const TouchOptions& opt) {
    const TimeGrid& grid = bundle.grid;
    const std::size_t d = xi.size();
    const std::size_t m = static_cast<std::size_t>(bundle.m());
    const std::size_t m0 = static_cast<std::size_t>(bundle.m0);
    const std::size_t start = grid.step_of(tau);
    const std::size_t horizon_steps = std::min(opt.time_steps, grid.steps - std::min(grid.steps, start));
    const double sign = side == TouchSide::below ? 1.0 : -1.0;
    const PathRef ref{&bundle, path};

    TestFunction phi;
    phi.tau = tau;
    phi.xi.assign(xi.begin(), xi.end());
    phi.w_tau = bundle.wiener_at(path, start);
    phi.q.assign(m, 0.0);
    phi.anchor = u.value(tau, xi, ref);
    phi.certificate.delta = opt.delta;
    if (horizon_steps == 0) {
        phi.certificate.verdict = "class empty: no time left after the anchor";
        return phi;
    }

    // spatial jet by centered differences
    const double h = std::max(opt.fd_step, u.resolution);
    const Eigen::Index dd = static_cast<Eigen::Index>(d);
    phi.p = Eigen::VectorXd::Zero(dd);
    phi.curvature = Eigen::MatrixXd::Zero(dd, dd);
    auto at = [&](int da, std::size_t a, int db, std::size_t b) {
        std::vector<double> y(xi.begin(), xi.end());
        y[a] += da * h;
        y[b] += db * h;
        return u.value(tau, y, ref);
    };
    for (std::size_t a = 0; a < d; ++a) {
        const double plus = at(1, a, 0, a);
        const double minus = at(-1, a, 0, a);
        phi.p[static_cast<Eigen::Index>(a)] = (plus - minus) / (2.0 * h);
        phi.curvature(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(a)) =
            (plus - 2.0 * phi.anchor + minus) / (h * h) + sign * opt.curvature;
        for (std::size_t b = a + 1; b < d; ++b) {
            const double cross = (at(1, a, 1, b) - at(1, a, -1, b) - at(-1, a, 1, b) + at(-1, a, -1, b)) / (4.0 * h * h);
            phi.curvature(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = cross;
            phi.curvature(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(a)) = cross;
        }
    }

    const std::size_t branches = std::max<std::size_t>(2, opt.branches);
    const PathBundle branch = branch_at(bundle, path, tau, branches, opt.seed);
    // on an interpolated field the ball mesh steps by whole cells so it never samples interpolation chords
    double radius = opt.delta;
    int points = opt.ball_points;
    if (u.resolution > 0.0) {
        const double cells = std::max(1.0, std::floor(opt.delta / u.resolution + 1e-9));
        radius = cells * u.resolution;
        points = 2 * static_cast<int>(cells) + 1;
    }
    phi.certificate.delta = radius;
    const std::vector<double> offsets = ball_offsets(d, radius, points);
    const std::size_t ball = offsets.size() / d;
    const double dt = grid.dt();

    // martingale slope by least squares of the first increment on the centred Wiener increments
    {
        const Eigen::Index rows = static_cast<Eigen::Index>(branches);
        const Eigen::Index cols = static_cast<Eigen::Index>(m);
        Eigen::VectorXd inc(rows);
        Eigen::MatrixXd noise(rows, cols);
        parallel_for(branches, [&](std::size_t b) {
            const Eigen::Index row = static_cast<Eigen::Index>(b);
            inc[row] = u.value(grid.time(start + 1), xi, PathRef{&branch, b}) - phi.anchor;
            const double* dw = branch.step_increments(b, start);
            for (Eigen::Index c = 0; c < cols; ++c) noise(row, c) = dw[c];
        });
        inc.array() -= inc.mean();
        noise.rowwise() -= noise.colwise().mean();
        if (inc.cwiseAbs().maxCoeff() > 0.0) {
            const Eigen::VectorXd fit = noise.colPivHouseholderQr().solve(inc);
            for (std::size_t c = 0; c < m; ++c) phi.q[c] = fit[static_cast<Eigen::Index>(c)];
        }
    }

    // gap without the slope term, reduced over the ball: extreme[b][j], j = 0..J
    const std::size_t steps = horizon_steps;
    std::vector<double> extreme(branches * (steps + 1));
    std::vector<double> exit_step(branches);
    const double exit_radius = 0.5 * std::sqrt(static_cast<double>(steps) * dt);
    phi.slope = 0.0;
    parallel_for(branches, [&](std::size_t b) {
        const PathRef bref{&branch, b};
        exit_step[b] = static_cast<double>(steps);
        for (std::size_t j = 0; j <= steps; ++j) {
            const double s = grid.time(start + j);
            const std::vector<double> w = branch.wiener_at(b, start + j);
            double best = side == TouchSide::below ? INFINITY : -INFINITY;
            for (std::size_t k = 0; k < ball; ++k) {
                std::vector<double> y(d);
                for (std::size_t a = 0; a < d; ++a) y[a] = xi[a] + offsets[k * d + a];
                const double gap = phi.value(s, y, w) - u.value(s, y, bref);
                best = side == TouchSide::below ? std::min(best, gap) : std::max(best, gap);
            }
            extreme[b * (steps + 1) + j] = best;
            if (j > 0 && exit_step[b] == static_cast<double>(steps)) {
                double moved = 0.0;
                for (std::size_t c = 0; c < m0; ++c) moved += (w[c] - phi.w_tau[c]) * (w[c] - phi.w_tau[c]);
                if (std::sqrt(moved) >= exit_radius) exit_step[b] = static_cast<double>(j);
            }
        }
    });

    // Each stopping rule gives a gap linear in the slope: mean + slope * elapsed.
    struct Rule {
        double mean;
        double elapsed;
        double band;
    };
    std::vector<Rule> rules;
    for (std::size_t j = 0; j <= steps; ++j) {
        std::vector<double> vals(branches);
        for (std::size_t b = 0; b < branches; ++b) vals[b] = extreme[b * (steps + 1) + j];
        const Moments mo = moments(vals);
        rules.push_back({mo.mean, static_cast<double>(j) * dt, 3.0 * mo.error});
    }
    {
        std::vector<double> vals(branches);
        double elapsed = 0.0;
        for (std::size_t b = 0; b < branches; ++b) {
            const std::size_t j = static_cast<std::size_t>(exit_step[b]);
            vals[b] = extreme[b * (steps + 1) + j];
            elapsed += static_cast<double>(j) * dt;
        }
        const Moments mo = moments(vals);
        rules.push_back({mo.mean, elapsed / static_cast<double>(branches), 3.0 * mo.error});
    }

    // Time-rate estimate centres the search box.
    double centre = 0.0;
    {
        double acc = 0.0;
        for (std::size_t b = 0; b < branches; ++b) acc += u.value(grid.time(start + 1), xi, PathRef{&branch, b});
        centre = (acc / static_cast<double>(branches) - phi.anchor) / dt;
    }
    const double box = opt.slope_box * (1.0 + std::fabs(centre));
    const double tiny = 1e-10 * (1.0 + std::fabs(phi.anchor));

    // below: smallest slope with mean + slope*elapsed >= -band for every rule
    // above: largest slope with mean + slope*elapsed <= band
    bool feasible = true;
    double slope = side == TouchSide::below ? -INFINITY : INFINITY;
    double band = 0.0;
    for (const Rule& r : rules) {
        band = std::max(band, r.band);
        const double allowance = r.band + tiny;
        if (r.elapsed == 0.0) {
            if (sign * r.mean < -allowance) feasible = false;
            continue;
        }
        const double bound = (-sign * allowance - r.mean) / r.elapsed;
        slope = side == TouchSide::below ? std::max(slope, bound) : std::min(slope, bound);
    }
    if (!std::isfinite(slope)) slope = centre;
    phi.slope = slope;
    phi.certificate.rules = rules.size();
    phi.certificate.tau_hat = grid.time(start + steps);
    phi.certificate.band = band;
    double worst = side == TouchSide::below ? INFINITY : -INFINITY;
    for (const Rule& r : rules) {
        const double g = r.mean + slope * r.elapsed;
        worst = side == TouchSide::below ? std::min(worst, g) : std::max(worst, g);
    }
    phi.certificate.extreme_gap = worst;
    const bool in_box = std::fabs(slope - centre) <= box;
    phi.certificate.member = feasible && in_box;
    if (!feasible)
        phi.certificate.verdict = "class empty at tested resolution: curvature does not dominate at the anchor time";
    else if (!in_box)
        phi.certificate.verdict = "class empty at tested resolution: no slope within the search box";
    else
        phi.certificate.verdict = "not refuted at resolution delta=" + std::to_string(opt.delta) +
                                  " dt=" + std::to_string(dt) + " branches=" + std::to_string(branches);
    return phi;
}

// ---------------------------------------------------------------------------

namespace {

ResidualReport hamiltonian_residual(const TestFunction& phi, const CoefficientSet& c, const ControlLattice& lattice,
                                    const PathBundle& bundle, std::size_t path, const ResidualOptions& opt,
                                    bool sub) {
    const TimeGrid& grid = bundle.grid;
    const std::size_t d = phi.xi.size();
    const std::size_t m = static_cast<std::size_t>(c.m());
    const std::size_t start = grid.step_of(phi.tau);
    if (start >= grid.steps) throw std::invalid_argument("residual anchor at the horizon");
    const bool random = c.is_random();
    const std::size_t branches = random ? std::max<std::size_t>(1, opt.branches) : 1;
    const PathBundle branch = branch_at(bundle, path, phi.tau, branches, opt.seed);
    const Eigen::MatrixXd cross = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));

    ResidualReport out;
    for (double r : opt.radii) {
        std::vector<std::size_t> time_steps;
        for (double frac : {0.5, 1.0}) {
            const auto k = static_cast<std::size_t>(std::llround(frac * r / grid.dt()));
            const std::size_t step = std::min(grid.steps, start + std::max<std::size_t>(1, k));
            if (std::find(time_steps.begin(), time_steps.end(), step) == time_steps.end()) time_steps.push_back(step);
        }
        const std::vector<double> offsets = ball_offsets(d, r, opt.space_points);
        const std::size_t ball = offsets.size() / d;
        std::vector<double> cell(time_steps.size() * ball);
        parallel_for(cell.size(), [&](std::size_t flat) {
            const std::size_t step = time_steps[flat / ball];
            const std::size_t k = flat % ball;
            const double s = grid.time(step);
            std::vector<double> x(d);
            for (std::size_t a = 0; a < d; ++a) x[a] = phi.xi[a] + offsets[k * d + a];
            const FieldJet jet = phi.jet(s, x);
            double acc = 0.0;
            for (std::size_t b = 0; b < branches; ++b) {
                const WienerEnv env = knot_env(branch, b, s);
                const HamiltonianResult h = hamiltonian(c, lattice, s, x, env, jet.grad, jet.hess, cross);
                acc += -jet.dt - h.value;
            }
            cell[flat] = acc / static_cast<double>(branches);
        });
        const double value = sub ? *std::min_element(cell.begin(), cell.end())
                                 : *std::max_element(cell.begin(), cell.end());
        out.radii.push_back(r);
        out.values.push_back(value);
    }
    for (std::size_t k = 1; k < out.values.size(); ++k) {
        const double step = out.values[k] - out.values[k - 1];
        if (sub ? step < -1e-12 : step > 1e-12) out.monotone = false;
    }
    out.final_value = out.values.empty() ? 0.0 : out.values.back();
    return out;
}

}  // namespace

ResidualReport subsolution_residual(const TestFunction& phi, const CoefficientSet& c, const ControlLattice& lattice,
                                    const PathBundle& bundle, std::size_t path, const ResidualOptions& options) {
    return hamiltonian_residual(phi, c, lattice, bundle, path, options, true);
}

ResidualReport supersolution_residual(const TestFunction& phi, const CoefficientSet& c,
                                      const ControlLattice& lattice, const PathBundle& bundle, std::size_t path,
                                      const ResidualOptions& options) {
    return hamiltonian_residual(phi, c, lattice, bundle, path, options, false);
}

ValidationReport comparison_check(const RandomFieldSampler& u, const RandomFieldSampler& reference,
                                  const PathBundle& bundle, const std::vector<ComparisonPoint>& points) {
    ValidationReport report;
    double worst = -INFINITY;
    std::size_t violations = 0;
    for (const ComparisonPoint& p : points) {
        const PathRef ref{&bundle, p.path};
        const double excess = u.value(p.t, p.x, ref) - reference.value(p.t, p.x, ref) - p.tolerance;
        worst = std::max(worst, excess);
        if (excess > 0.0) ++violations;
    }
    if (points.empty()) worst = 0.0;
    report.add("candidate_below_reference", worst, 0.0, worst <= 0.0);
    report.add("comparison_violations", static_cast<double>(violations), 0.0, violations == 0);
    report.samples_used = points.size();
    return report;
}

}  // namespace shjb
