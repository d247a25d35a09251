#include "shjb/paths.hpp"

#include <cmath>
#include <stdexcept>

#include "shjb/binary_io.hpp"
#include "shjb/parallel.hpp"
#include "shjb/rng.hpp"

namespace shjb {

unsigned& worker_limit() noexcept {
    static unsigned limit = 1;
    return limit;
}

namespace {

constexpr std::uint64_t kCoordSlots = 64;

std::uint64_t slot(std::size_t step, int coord) { return static_cast<std::uint64_t>(step) * kCoordSlots + coord; }

}  // namespace

TimeGrid TimeGrid::make(double horizon, std::size_t steps, const std::vector<double>& knots) {
    if (!(horizon > 0.0) || steps == 0) throw std::invalid_argument("grid needs a positive horizon and step count");
    if (knots.size() < 2 || knots.front() != 0.0 || std::fabs(knots.back() - horizon) > 1e-12 * horizon)
        throw std::invalid_argument("knots must run from 0 to the horizon");
    TimeGrid g;
    g.horizon = horizon;
    g.steps = steps;
    g.knot_steps = g.steps_of(knots);
    return g;
}

bool TimeGrid::on_grid(double t) const noexcept {
    const double pos = t / horizon * static_cast<double>(steps);
    return t >= -1e-14 && t <= horizon * (1 + 1e-14) && std::fabs(pos - std::round(pos)) < 1e-7;
}

std::size_t TimeGrid::step_of(double t) const {
    if (!on_grid(t)) throw std::invalid_argument("time " + std::to_string(t) + " is not on the grid");
    return static_cast<std::size_t>(std::llround(t / horizon * static_cast<double>(steps)));
}

std::vector<std::size_t> TimeGrid::steps_of(const std::vector<double>& times) const {
    std::vector<std::size_t> out;
    out.reserve(times.size());
    for (double t : times) out.push_back(step_of(t));
    return out;
}

std::size_t aligned_steps(std::size_t intervals, std::size_t min_steps, std::size_t per_interval) {
    const std::size_t unit = std::max<std::size_t>(1, intervals) * per_interval;
    return std::max<std::size_t>(1, (min_steps + unit - 1) / unit) * unit;
}

void PathBundle::wiener_at(std::size_t path, std::size_t step, double* out) const {
    const int mm = m();
    for (int j = 0; j < mm; ++j) out[j] = 0.0;
    for (std::size_t k = 0; k < step; ++k) {
        const double* inc = step_increments(path, k);
        for (int j = 0; j < mm; ++j) out[j] += inc[j];
    }
}

std::vector<double> PathBundle::wiener_at(std::size_t path, std::size_t step) const {
    std::vector<double> out(static_cast<std::size_t>(m()));
    wiener_at(path, step, out.data());
    return out;
}

PathBundle sample_bundle(const TimeGrid& grid, int m0, int m1, std::size_t count, std::uint64_t seed) {
    if (count < 1) throw std::invalid_argument("bundle needs at least one path");
    if (m0 + m1 < 1 || m0 + m1 > static_cast<int>(kCoordSlots)) throw std::invalid_argument("bad Wiener dimension");
    PathBundle b;
    b.grid = grid;
    b.m0 = m0;
    b.m1 = m1;
    b.seed = seed;
    b.count = count;
    const std::size_t m = static_cast<std::size_t>(m0 + m1);
    b.increments.resize(count * grid.steps * m);
    const double scale = std::sqrt(grid.dt());
    const CounterRng rng(seed);
    parallel_for(count, [&](std::size_t p) {
        double* dst = b.increments.data() + p * grid.steps * m;
        for (std::size_t k = 0; k < grid.steps; ++k)
            for (std::size_t j = 0; j < m; ++j) dst[k * m + j] = scale * rng.normal(p, slot(k, static_cast<int>(j)));
    });
    return b;
}

PathBundle branch_at(const PathBundle& parent, std::size_t path, double t, std::size_t branch_count,
                     std::uint64_t seed) {
    if (path >= parent.count) throw std::invalid_argument("branch parent path out of range");
    if (branch_count < 1) throw std::invalid_argument("branch count must be positive");
    const std::size_t split = parent.grid.step_of(t);
    PathBundle b;
    b.grid = parent.grid;
    b.m0 = parent.m0;
    b.m1 = parent.m1;
    b.seed = derive_seed(seed, path, split);
    b.count = branch_count;
    b.lineage = Lineage{path, split, parent.seed};
    const std::size_t m = static_cast<std::size_t>(parent.m());
    const std::size_t steps = parent.grid.steps;
    b.increments.resize(branch_count * steps * m);
    const double scale = std::sqrt(parent.grid.dt());
    const CounterRng rng(b.seed);
    const double* prefix = parent.increments.data() + path * steps * m;
    parallel_for(branch_count, [&](std::size_t p) {
        double* dst = b.increments.data() + p * steps * m;
        std::copy(prefix, prefix + split * m, dst);
        for (std::size_t k = split; k < steps; ++k)
            for (std::size_t j = 0; j < m; ++j) dst[k * m + j] = scale * rng.normal(p, slot(k, static_cast<int>(j)));
    });
    return b;
}

WienerEnv knot_env_at(const PathBundle& bundle, std::size_t path, std::size_t step,
                      const std::vector<std::size_t>& knot_steps) {
    EnvTracker tracker(bundle, knot_steps);
    tracker.reset(path, step);
    return tracker.env();
}

WienerEnv knot_env(const PathBundle& bundle, std::size_t path, double t) {
    return knot_env_at(bundle, path, bundle.grid.step_of(t), bundle.grid.knot_steps);
}

EnvTracker::EnvTracker(const PathBundle& bundle, std::vector<std::size_t> knot_steps) : bundle_(bundle) {
    // the knot list may include t_0 = 0; it carries no variable
    if (!knot_steps.empty() && knot_steps.front() == 0) knot_steps.erase(knot_steps.begin());
    knot_steps_ = std::move(knot_steps);
    env_.live.assign(static_cast<std::size_t>(bundle.m()), 0.0);
    env_.knots.assign(knot_steps_.size() * static_cast<std::size_t>(bundle.m0), 0.0);
}

void EnvTracker::reset(std::size_t path, std::size_t step) {
    path_ = path;
    step_ = 0;
    std::fill(env_.live.begin(), env_.live.end(), 0.0);
    std::fill(env_.knots.begin(), env_.knots.end(), 0.0);
    while (step_ < step) advance();
}

void EnvTracker::advance() {
    const double* inc = bundle_.step_increments(path_, step_);
    for (std::size_t j = 0; j < env_.live.size(); ++j) env_.live[j] += inc[j];
    ++step_;
    refresh_knots();
}

void EnvTracker::refresh_knots() {
    const std::size_t m0 = static_cast<std::size_t>(bundle_.m0);
    for (std::size_t i = 0; i < knot_steps_.size(); ++i)
        if (step_ <= knot_steps_[i])
            for (std::size_t j = 0; j < m0; ++j) env_.knots[i * m0 + j] = env_.live[j];
}

void write_bundle(const PathBundle& b, std::ostream& out) {
    binio::put_magic(out, "SHJBPATH");
    binio::put_f64(out, b.grid.horizon);
    binio::put_u64(out, b.grid.steps);
    binio::put_u64(out, b.grid.knot_steps.size());
    for (std::size_t k : b.grid.knot_steps) binio::put_u64(out, k);
    binio::put_u64(out, static_cast<std::uint64_t>(b.m0));
    binio::put_u64(out, static_cast<std::uint64_t>(b.m1));
    binio::put_u64(out, b.count);
    binio::put_u64(out, b.seed);
    for (double v : b.increments) binio::put_f64(out, v);
}

PathBundle read_bundle(std::istream& in) {
    binio::expect_magic(in, "SHJBPATH");
    PathBundle b;
    b.grid.horizon = binio::get_f64(in);
    b.grid.steps = binio::get_u64(in);
    b.grid.knot_steps.resize(binio::get_u64(in));
    for (auto& k : b.grid.knot_steps) k = binio::get_u64(in);
    b.m0 = static_cast<int>(binio::get_u64(in));
    b.m1 = static_cast<int>(binio::get_u64(in));
    b.count = binio::get_u64(in);
    b.seed = binio::get_u64(in);
    b.increments.resize(b.count * b.grid.steps * static_cast<std::size_t>(b.m()));
    for (auto& v : b.increments) v = binio::get_f64(in);
    return b;
}

}  // namespace shjb
