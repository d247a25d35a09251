#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "shjb/bsde.hpp"
#include "shjb/field.hpp"
#include "shjb/lift.hpp"
#include "shjb/model.hpp"
#include "shjb/parallel.hpp"
#include "shjb/paths.hpp"
#include "shjb/problem.hpp"
#include "shjb/sde.hpp"
#include "shjb/value_mc.hpp"
#include "shjb/viscosity.hpp"

#ifndef SHJB_VERSION
#define SHJB_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace shjb;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_failed_check = 1;
constexpr int exit_usage = 2;
constexpr int exit_stage = 3;

class StageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

std::string num(double value) {
    if (std::isnan(value)) return "nan";
    if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, value);
    return {buf, res.ptr};
}

std::string num(std::size_t value) { return std::to_string(value); }

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

class Csv {
public:
    Csv(const fs::path& path, const std::vector<std::string>& header) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot write " + path.string());
        row(header);
    }
    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << '\n';
    }

private:
    std::ofstream out_;
};

// Options shared by every pipeline.
struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    unsigned threads = 0;
    std::string out_dir;
    std::optional<double> eps;
    std::optional<int> lattice_level;
    std::optional<double> mesh_h;
    std::optional<std::size_t> paths;
    std::string out;
};

struct SummaryRow {
    std::string mode;
    double eps = NAN;
    double h = NAN;
    int lattice_level = -1;
    std::size_t paths = 0;
    double value = NAN;
    double error = NAN;
};

const std::vector<std::string> summary_header{"config", "mode", "eps", "h", "lattice_level", "paths", "value", "error"};

// Output directory, stage timings and artifacts of one run.
class Session {
public:
    Session(const Common& common, std::string mode, std::vector<std::string> args)
        : mode_(std::move(mode)), args_(std::move(args)) {
        std::string dir = common.out_dir;
        if (dir.empty()) {
            const char* env = std::getenv("SHJB_OUT_DIR");
            dir = env && *env ? env : "shjb_out";
        }
        dir_ = fs::absolute(dir);
        fs::create_directories(dir_);
    }

    [[nodiscard]] const fs::path& dir() const noexcept { return dir_; }

    fs::path artifact(const std::string& name) {
        const fs::path path = fs::path(name).is_absolute() ? fs::path(name) : dir_ / name;
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        const std::string rel = fs::relative(path, dir_).generic_string();
        if (std::find(artifacts_.begin(), artifacts_.end(), rel) == artifacts_.end()) artifacts_.push_back(rel);
        return path;
    }

    template <class Fn>
    auto stage(const std::string& name, Fn&& fn) {
        const auto start = std::chrono::steady_clock::now();
        try {
            if constexpr (std::is_void_v<decltype(fn())>) {
                fn();
                record(name, start);
            } else {
                auto out = fn();
                record(name, start);
                return out;
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError("stage " + name + " failed: " + e.what());
        }
    }

    void check(const ValidationReport& report) { passed_ = passed_ && report.passed; }
    void check(bool pass) { passed_ = passed_ && pass; }
    [[nodiscard]] bool passed() const noexcept { return passed_; }

    void summary(const SummaryRow& row) { summary_.push_back(row); }

    void set_config(const RunConfig& cfg, const std::string& path) {
        config_name_ = cfg.name;
        config_path_ = path;
        config_hash_ = hex64(fnv1a(cfg.text));
        seeds_["grid"] = cfg.seed;
        seeds_["lift"] = cfg.lift.seed;
    }
    void seed(const std::string& name, std::uint64_t value) { seeds_[name] = value; }

    void finish() {
        if (!summary_.empty()) {
            Csv csv(artifact("summary.csv"), summary_header);
            for (const SummaryRow& r : summary_)
                csv.row({config_name_, r.mode, num(r.eps), num(r.h), std::to_string(r.lattice_level), num(r.paths),
                         num(r.value), num(r.error)});
        }
        json manifest;
        manifest["mode"] = mode_;
        manifest["code_version"] = SHJB_VERSION;
        manifest["config"] = config_path_;
        manifest["config_name"] = config_name_;
        manifest["config_hash"] = config_hash_;
        manifest["seeds"] = seeds_;
        manifest["args"] = args_;
        manifest["cwd"] = fs::current_path().string();
        manifest["out_dir"] = dir_.string();
        manifest["stages"] = stages_;
        manifest["artifacts"] = artifacts_;
        manifest["passed"] = passed_;
        std::ofstream out(dir_ / "manifest.json", std::ios::binary);
        out << manifest.dump(2) << '\n';
    }

private:
    void record(const std::string& name, std::chrono::steady_clock::time_point start) {
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        stages_.push_back({{"name", name}, {"seconds", seconds}});
    }

    std::string mode_;
    std::vector<std::string> args_;
    fs::path dir_;
    std::vector<std::string> artifacts_;
    json stages_ = json::array();
    json seeds_ = json::object();
    std::vector<SummaryRow> summary_;
    std::string config_name_, config_path_, config_hash_;
    bool passed_ = true;
};

RunConfig load(const Common& common) {
    RunConfig cfg = load_config(common.config);
    if (common.seed) cfg.seed = *common.seed;
    if (common.eps) cfg.lift.eps_target = *common.eps;
    if (common.paths) cfg.paths = *common.paths;
    if (common.lattice_level) {
        if (!cfg.lattice.is_box()) throw ConfigError("--lattice-level needs a box lattice");
        cfg.lattice = ControlLattice::from_box(cfg.lattice.lo(), cfg.lattice.hi(), *common.lattice_level);
    }
    if (common.mesh_h) {
        if (!(*common.mesh_h > 0.0)) throw ConfigError("--mesh must be positive");
        // keep dt / h^2 fixed under refinement
        for (MeshSpec* mesh : {&cfg.mesh, &cfg.oracle_mesh}) {
            const double ratio = *common.mesh_h / mesh->h;
            mesh->dt *= ratio * ratio;
            if (mesh->hy > 0.0) mesh->hy *= ratio;
            mesh->h = *common.mesh_h;
        }
    }
    if (common.threads > 0) worker_limit() = common.threads;
    return cfg;
}

TimeGrid grid_of(const RunConfig& cfg) {
    return TimeGrid::make(cfg.coeffs.horizon(), cfg.steps, cfg.coeffs.knots);
}

WienerEnv origin_env(const CoefficientSet& c) {
    WienerEnv env;
    env.live.assign(static_cast<std::size_t>(c.m()), 0.0);
    env.knots.assign(static_cast<std::size_t>(c.knot_count() * c.m0), 0.0);
    return env;
}

// Value table on a uniform sample of the sample box at t = 0 with zero noise.
void write_value_table(const fs::path& path, const ValueField& field, const RunConfig& cfg, bool with_policy) {
    const int d = cfg.coeffs.d;
    std::vector<std::string> header;
    for (int i = 0; i < d; ++i) header.push_back("x" + std::to_string(i + 1));
    header.emplace_back("value");
    if (with_policy)
        for (int i = 0; i < cfg.lattice.dim(); ++i) header.push_back("v" + std::to_string(i + 1));
    Csv csv(path, header);
    constexpr std::size_t per_axis = 9;
    std::size_t total = 1;
    for (int i = 0; i < d; ++i) total *= per_axis;
    const WienerEnv env = origin_env(cfg.coeffs);
    std::vector<double> x(static_cast<std::size_t>(d));
    for (std::size_t flat = 0; flat < total; ++flat) {
        std::size_t rest = flat;
        std::vector<std::string> cells;
        for (int i = 0; i < d; ++i) {
            const std::size_t k = rest % per_axis;
            rest /= per_axis;
            const auto axis = static_cast<std::size_t>(i);
            x[axis] = cfg.sample_x_lo[axis] +
                      (cfg.sample_x_hi[axis] - cfg.sample_x_lo[axis]) * static_cast<double>(k) / (per_axis - 1);
            cells.push_back(num(x[axis]));
        }
        cells.push_back(num(field.eval(0.0, x, env).value));
        if (with_policy) {
            const std::vector<double> v = cfg.lattice.point_vec(field.policy_index(0.0, x, env));
            for (double coord : v) cells.push_back(num(coord));
        }
        csv.row(cells);
    }
}

void write_report(Csv& csv, const std::string& group, const ValidationReport& report) {
    for (const Check& check : report.checks)
        csv.row({group, check.name, num(check.measured), num(check.threshold), check.pass ? "1" : "0"});
}

void save_field(const fs::path& path, const ValueField& field) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    write_field(field, out);
}

ValueField load_field(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open field " + path.string());
    return read_field(in);
}

MeshSpec coarsened(MeshSpec mesh) {
    mesh.h *= 2.0;
    if (mesh.hy > 0.0) mesh.hy *= 2.0;
    mesh.dt *= 4.0;
    return mesh;
}

int lattice_level_of(const RunConfig& cfg) { return cfg.lattice.is_box() ? cfg.lattice.level() : -1; }

// ---- pipelines ----

void run_validate(Session& session, const RunConfig& cfg, const Common& common) {
    SamplingDomain domain;
    domain.x_lo = cfg.sample_x_lo;
    domain.x_hi = cfg.sample_x_hi;
    domain.budget = 20000;
    domain.seed = cfg.seed;
    Csv csv(session.artifact(common.out.empty() ? "validate.csv" : common.out),
            {"group", "check", "measured", "threshold", "pass"});
    const ValidationReport a1 = session.stage("validate_a1", [&] { return validate_a1(cfg.coeffs, cfg.lattice, domain); });
    write_report(csv, "a1", a1);
    session.check(a1);
    if (cfg.coeffs.m1 >= 1) {
        const ValidationReport a3 = session.stage(
            "validate_a3", [&] { return validate_a3(cfg.coeffs, cfg.lattice, domain, cfg.lambda_min); });
        write_report(csv, "a3", a3);
        session.check(a3);
    }
}

ControlPolicy parse_policy(const std::string& spec, const RunConfig& cfg) {
    if (spec.empty() || spec == "lowest") return ControlPolicy::constant(cfg.lattice, cfg.lattice.lowest());
    if (spec.rfind("constant:", 0) == 0) {
        const std::size_t index = std::stoul(spec.substr(9));
        if (index >= cfg.lattice.size()) throw ConfigError("constant policy index outside the lattice");
        return ControlPolicy::constant(cfg.lattice, index);
    }
    return ControlPolicy::feedback(std::make_shared<const ValueField>(load_field(spec)));
}

void run_simulate(Session& session, const RunConfig& cfg, const Common& common, const std::string& policy_spec,
                  const std::string& bundle_out) {
    const ControlPolicy policy = parse_policy(policy_spec, cfg);
    const PathBundle bundle = session.stage("sample_paths", [&] {
        return sample_bundle(grid_of(cfg), cfg.coeffs.m0, cfg.coeffs.m1, cfg.paths, cfg.seed);
    });
    if (!bundle_out.empty()) {
        std::ofstream out(session.artifact(bundle_out), std::ios::binary);
        write_bundle(bundle, out);
    }
    const StatePaths states = session.stage("simulate", [&] { return simulate(cfg.coeffs, policy, 0.0, cfg.x0, bundle); });
    session.stage("write_paths", [&] {
        std::vector<std::string> header{"path", "step", "t"};
        for (int i = 0; i < cfg.coeffs.d; ++i) header.push_back("x" + std::to_string(i + 1));
        for (int i = 0; i < cfg.lattice.dim(); ++i) header.push_back("v" + std::to_string(i + 1));
        Csv csv(session.artifact(common.out.empty() ? "paths.csv" : common.out), header);
        for (std::size_t p = 0; p < states.count; ++p)
            for (std::size_t k = 0; k <= states.steps; ++k) {
                std::vector<std::string> cells{num(p), num(k), num(bundle.grid.time(states.start_step + k))};
                const double* x = states.state(p, k);
                for (int i = 0; i < states.d; ++i) cells.push_back(num(x[i]));
                if (k < states.steps) {
                    const std::vector<double> v = cfg.lattice.point_vec(states.controls[p * states.steps + k]);
                    for (double coord : v) cells.push_back(num(coord));
                } else {
                    for (int i = 0; i < cfg.lattice.dim(); ++i) cells.emplace_back("");
                }
                csv.row(cells);
            }
    });
    session.check(states.ok);
    if (!states.ok) std::cerr << "simulation: " << states.failure << '\n';
}

void run_oracle(Session& session, const RunConfig& cfg, const Common& common) {
    const ValueField field = session.stage(
        "oracle", [&] { return backward_induction_oracle(cfg.coeffs, cfg.lattice, cfg.oracle_mesh); });
    session.stage("write_field", [&] {
        save_field(session.artifact(common.out.empty() ? "oracle_field.bin" : common.out), field);
        write_value_table(session.artifact("oracle.csv"), field, cfg, true);
    });
    SummaryRow row{"oracle"};
    row.h = cfg.oracle_mesh.h;
    row.lattice_level = lattice_level_of(cfg);
    row.value = field.eval(0.0, cfg.x0, origin_env(cfg.coeffs)).value;
    if (cfg.reference_value) row.error = std::fabs(row.value - *cfg.reference_value);
    session.summary(row);
}

struct Solved {
    LiftedCoefficientSet lifted;
    std::shared_ptr<const ValueField> field;
};

Solved solve_stage(Session& session, const RunConfig& cfg, double eps) {
    Solved out;
    LiftOptions options = cfg.lift;
    options.eps_target = eps;
    out.lifted = session.stage("lift", [&] { return lift_coefficients(cfg.coeffs, cfg.lattice, options); });
    SolveOptions solve;
    solve.mesh = cfg.mesh;
    out.field = session.stage("solve", [&] {
        return std::make_shared<const ValueField>(solve_recursive(out.lifted, cfg.lattice, solve));
    });
    return out;
}

void run_solve(Session& session, const RunConfig& cfg, const Common& common) {
    const Solved solved = solve_stage(session, cfg, cfg.lift.eps_target);
    const GapReport& gaps = solved.lifted.gaps;
    session.stage("write_field", [&] {
        save_field(session.artifact(common.out.empty() ? "field.bin" : common.out), *solved.field);
        write_value_table(session.artifact("solve.csv"), *solved.field, cfg, true);
        Csv csv(session.artifact("lift.csv"), {"eps_target", "intervals", "terminal_l2", "running_l2", "drift_l2",
                                               "gap_norm", "exact", "gradient_bound", "steps"});
        std::size_t steps = 0;
        for (const IntervalBlock& block : solved.field->intervals) steps += block.steps;
        csv.row({num(cfg.lift.eps_target), std::to_string(gaps.intervals), num(gaps.terminal_l2), num(gaps.running_l2),
                 num(gaps.drift_l2), num(gaps.norm), gaps.exact ? "1" : "0", num(solved.field->gradient_bound()),
                 num(steps)});
    });
    SummaryRow row{"solve"};
    row.eps = cfg.lift.eps_target;
    row.h = cfg.mesh.h;
    row.lattice_level = lattice_level_of(cfg);
    row.value = solved.field->eval(0.0, cfg.x0, origin_env(cfg.coeffs)).value;
    if (cfg.reference_value) row.error = std::fabs(row.value - *cfg.reference_value);
    session.summary(row);
}

struct EnvelopeSettings {
    std::vector<double> eps_list;
    std::size_t sample_paths = 8;
    double tolerance = 0.02;
    double slack = 0.01;
};

void run_envelope(Session& session, const RunConfig& cfg, const Common& common, EnvelopeSettings settings) {
    if (settings.eps_list.empty()) settings.eps_list = cfg.eps_list;
    auto fine = std::make_shared<const ValueField>(session.stage(
        "reference", [&] { return backward_induction_oracle(cfg.coeffs, cfg.lattice, cfg.oracle_mesh); }));
    const ValueField rough = session.stage(
        "reference_coarse", [&] { return backward_induction_oracle(cfg.coeffs, cfg.lattice, coarsened(cfg.oracle_mesh)); });
    auto bundle = std::make_shared<const PathBundle>(session.stage("sample_paths", [&] {
        return sample_bundle(grid_of(cfg), cfg.coeffs.m0, cfg.coeffs.m1, settings.sample_paths, cfg.seed);
    }));
    const std::vector<std::size_t> steps{0, cfg.steps / 4, cfg.steps / 2};
    std::vector<SandwichPoint> points;
    for (std::size_t p = 0; p < bundle->count; ++p)
        for (std::size_t step : steps)
            for (double frac : {-0.5, 0.0, 0.5}) {
                SandwichPoint pt;
                pt.path = p;
                pt.step = step;
                for (int i = 0; i < cfg.coeffs.d; ++i) {
                    const auto axis = static_cast<std::size_t>(i);
                    const double mid = 0.5 * (cfg.sample_x_lo[axis] + cfg.sample_x_hi[axis]);
                    pt.x.push_back(mid + frac * (cfg.sample_x_hi[axis] - mid));
                }
                const double t = bundle->grid.time(step);
                const WienerEnv env = knot_env(*bundle, p, t);
                pt.reference = fine->eval(t, pt.x, env).value;
                pt.reference_error = std::fabs(pt.reference - rough.eval(t, pt.x, env).value);
                points.push_back(std::move(pt));
            }

    Csv csv(session.artifact(common.out.empty() ? "envelope.csv" : common.out),
            {"eps", "point", "path", "step", "t", "x", "lower", "reference", "upper", "y", "gap_bound"});
    std::vector<double> scales, errors;
    std::vector<std::pair<std::string, ValidationReport>> sandwiches;
    for (double eps : settings.eps_list) {
        const std::string tag = "eps=" + num(eps);
        const Solved solved = solve_stage(session, cfg, eps);
        const double gradient = solved.field->gradient_bound();
        LiftOptions options = cfg.lift;
        options.eps_target = eps;
        const BsdeProblem problem = envelope_bsde(solved.lifted, cfg.lattice, options, gradient);
        BsdeOptions bsde_options;
        bsde_options.steps = steps;
        // same increments, knots of the partition the lift settled on
        auto lifted_bundle = std::make_shared<PathBundle>(*bundle);
        lifted_bundle->grid = TimeGrid::make(cfg.coeffs.horizon(), cfg.steps, solved.lifted.original.knots);
        BSDESolution bsde =
            session.stage("bsde " + tag, [&] { return solve_bsde(problem, *lifted_bundle, bsde_options); });
        const Envelope envelope =
            build_envelopes(solved.field, lifted_bundle, std::move(bsde), gradient, solved.lifted.gaps);
        const SandwichReport sandwich =
            session.stage("sandwich " + tag, [&] { return sandwich_check(envelope, points, settings.tolerance); });
        session.check(sandwich.report);
        sandwiches.emplace_back("sandwich " + tag, sandwich.report);
        for (std::size_t i = 0; i < points.size(); ++i) {
            const SandwichRow& r = sandwich.rows[i];
            std::ostringstream x;
            for (std::size_t k = 0; k < points[i].x.size(); ++k) x << (k ? " " : "") << num(points[i].x[k]);
            csv.row({num(eps), num(i), num(points[i].path), num(points[i].step),
                     num(bundle->grid.time(points[i].step)), x.str(), num(r.lower), num(r.reference), num(r.upper),
                     num(r.y), num(envelope.eps_achieved)});
        }
        scales.push_back(envelope.eps_achieved);
        errors.push_back(sandwich.mean_abs_error);
        SummaryRow row{"envelope"};
        row.eps = eps;
        row.h = cfg.mesh.h;
        row.lattice_level = lattice_level_of(cfg);
        row.paths = bundle->count;
        row.value = solved.field->eval(0.0, cfg.x0, origin_env(cfg.coeffs)).value;
        row.error = sandwich.mean_abs_error;
        session.summary(row);
    }
    const ErrorBoundReport bound = error_bound_check(scales, errors, settings.slack);
    session.check(bound.report);
    Csv checks(session.artifact("envelope_checks.csv"), {"group", "check", "measured", "threshold", "pass"});
    for (const auto& [group, report] : sandwiches) write_report(checks, group, report);
    write_report(checks, "error_bound", bound.report);
}

void run_dpp(Session& session, const RunConfig& cfg, const Common& common, double t, std::optional<double> t_hat) {
    const double that = t_hat ? *t_hat : 0.5 * cfg.coeffs.horizon();
    auto oracle = std::make_shared<const ValueField>(
        session.stage("oracle", [&] { return backward_induction_oracle(cfg.coeffs, cfg.lattice, cfg.oracle_mesh); }));
    const ValueField coarse = session.stage(
        "oracle_coarse", [&] { return backward_induction_oracle(cfg.coeffs, cfg.lattice, coarsened(cfg.oracle_mesh)); });
    const PathBundle bundle = session.stage("sample_paths", [&] {
        return sample_bundle(grid_of(cfg), cfg.coeffs.m0, cfg.coeffs.m1, cfg.paths, cfg.seed);
    });
    const DppReport dpp = session.stage("dpp", [&] {
        return dpp_residual(cfg.coeffs, cfg.lattice, t, that, cfg.x0, bundle, cfg.pieces, oracle, &coarse);
    });
    Csv csv(session.artifact(common.out.empty() ? "dpp.csv" : common.out),
            {"t", "t_hat", "lhs", "rhs", "residual", "std_error", "mesh_error", "threshold", "pass"});
    csv.row({num(t), num(that), num(dpp.lhs), num(dpp.rhs), num(dpp.residual), num(dpp.std_error), num(dpp.mesh_error),
             num(dpp.threshold), dpp.pass ? "1" : "0"});
    session.check(dpp.pass);
    SummaryRow row{"verify-dpp"};
    row.h = cfg.oracle_mesh.h;
    row.lattice_level = lattice_level_of(cfg);
    row.paths = cfg.paths;
    row.value = dpp.lhs;
    row.error = dpp.residual;
    session.summary(row);
}

std::vector<ComparisonPoint> read_points(const fs::path& path, int d) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open points file " + path.string());
    std::vector<ComparisonPoint> points;
    std::string line;
    std::getline(in, line);  // header: path,t,x1..xd
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(std::stod(cell));
        if (cells.size() != static_cast<std::size_t>(d) + 2) throw ConfigError("points row needs path,t,x1..xd");
        ComparisonPoint pt;
        pt.path = static_cast<std::size_t>(cells[0]);
        pt.t = cells[1];
        pt.x.assign(cells.begin() + 2, cells.end());
        points.push_back(std::move(pt));
    }
    return points;
}

void run_viscosity(Session& session, const RunConfig& cfg, const Common& common, const std::string& field_path,
                   const std::string& points_path, double tolerance) {
    std::shared_ptr<const ValueField> field;
    if (field_path.empty()) {
        field = solve_stage(session, cfg, cfg.lift.eps_target).field;
    } else {
        field = std::make_shared<const ValueField>(session.stage("load_field", [&] { return load_field(field_path); }));
    }
    std::vector<ComparisonPoint> points;
    if (!points_path.empty()) {
        points = read_points(points_path, cfg.coeffs.d);
    } else {
        for (double t : {0.25 * cfg.coeffs.horizon(), 0.5 * cfg.coeffs.horizon()}) {
            ComparisonPoint pt;
            pt.t = t;
            pt.x = cfg.x0;
            points.push_back(pt);
        }
    }
    std::size_t paths = 1;
    for (const ComparisonPoint& pt : points) paths = std::max(paths, pt.path + 1);
    const PathBundle bundle = session.stage("sample_paths", [&] {
        return sample_bundle(grid_of(cfg), cfg.coeffs.m0, cfg.coeffs.m1, paths, cfg.seed);
    });
    const RandomFieldSampler sampler = field_sampler(field);
    Csv csv(session.artifact(common.out.empty() ? "residuals.csv" : common.out),
            {"point", "side", "radius", "value", "member", "pass"});
    for (std::size_t i = 0; i < points.size(); ++i) {
        const ComparisonPoint& pt = points[i];
        const double t = bundle.grid.time(bundle.grid.step_of(pt.t));
        for (const TouchSide side : {TouchSide::below, TouchSide::above}) {
            const bool sub = side == TouchSide::below;
            const std::string name = sub ? "sub" : "super";
            const TestFunction phi = session.stage("touch " + name + " " + num(i), [&] {
                return make_touching_test(sampler, bundle, pt.path, t, pt.x, side, TouchOptions{});
            });
            const ResidualReport residual = session.stage("residual " + name + " " + num(i), [&] {
                return sub ? subsolution_residual(phi, cfg.coeffs, cfg.lattice, bundle, pt.path, ResidualOptions{})
                           : supersolution_residual(phi, cfg.coeffs, cfg.lattice, bundle, pt.path, ResidualOptions{});
            });
            const bool pass = sub ? residual.final_value <= tolerance : residual.final_value >= -tolerance;
            session.check(pass);
            for (std::size_t r = 0; r < residual.radii.size(); ++r)
                csv.row({num(i), name, num(residual.radii[r]), num(residual.values[r]),
                         phi.certificate.member ? "1" : "0", r + 1 == residual.radii.size() ? (pass ? "1" : "0") : ""});
        }
    }
}

// Concatenates the summary tables of several runs.
int run_report(const std::vector<std::string>& manifests, const std::string& out) {
    std::vector<std::vector<std::string>> rows;
    for (const std::string& path : manifests) {
        const json manifest = json::parse(read_bytes(path));
        const fs::path dir = manifest.at("out_dir").get<std::string>();
        const fs::path summary = dir / "summary.csv";
        if (!fs::exists(summary)) throw std::runtime_error("missing artifact " + summary.string());
        std::istringstream in(read_bytes(summary));
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> cells;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) cells.push_back(cell);
            rows.push_back(std::move(cells));
        }
    }
    std::ofstream file;
    std::ostream* sink = &std::cout;
    if (!out.empty()) {
        file.open(out, std::ios::binary);
        if (!file) throw std::runtime_error("cannot write " + out);
        sink = &file;
    }
    for (std::size_t i = 0; i < summary_header.size(); ++i) *sink << (i ? "," : "") << summary_header[i];
    *sink << '\n';
    for (const auto& cells : rows) {
        for (std::size_t i = 0; i < cells.size(); ++i) *sink << (i ? "," : "") << cells[i];
        *sink << '\n';
    }
    return exit_ok;
}

int dispatch(std::vector<std::string> args);

// Replays a manifest into a fresh directory and compares every artifact byte for byte.
int run_rerun(const std::string& manifest_path, std::string out_dir) {
    const json manifest = json::parse(read_bytes(manifest_path));
    const fs::path original = manifest.at("out_dir").get<std::string>();
    if (out_dir.empty()) out_dir = (original / "rerun").string();
    const fs::path target = fs::absolute(out_dir);
    std::vector<std::string> args = manifest.at("args").get<std::vector<std::string>>();
    args.push_back("--out-dir");
    args.push_back(target.string());
    const fs::path cwd = fs::current_path();
    fs::current_path(manifest.at("cwd").get<std::string>());
    const int code = dispatch(args);
    fs::current_path(cwd);
    bool identical = true;
    for (const std::string& name : manifest.at("artifacts").get<std::vector<std::string>>()) {
        const bool same = fs::exists(original / name) && fs::exists(target / name) &&
                          read_bytes(original / name) == read_bytes(target / name);
        std::cout << (same ? "identical " : "DIFFERENT ") << name << '\n';
        identical = identical && same;
    }
    if (!identical) return exit_failed_check;
    return code;
}

void add_common(CLI::App* cmd, Common& common, bool with_eps) {
    cmd->add_option("config", common.config, "problem config file")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", common.seed, "grid seed override");
    cmd->add_option("--threads", common.threads, "worker cap");
    cmd->add_option("--out-dir", common.out_dir, "output directory (default $SHJB_OUT_DIR or ./shjb_out)");
    if (with_eps) cmd->add_option("--eps", common.eps, "lift accuracy target");
    cmd->add_option("--lattice-level", common.lattice_level, "control lattice level override");
    cmd->add_option("--mesh", common.mesh_h, "mesh spacing h; dt scales with h^2");
    cmd->add_option("--paths", common.paths, "path count override");
    cmd->add_option("--out", common.out, "main output file, relative to the output directory");
}

int dispatch(std::vector<std::string> args) {
    CLI::App app{"Stochastic HJB toolkit"};
    app.require_subcommand(1);
    Common common;
    std::string policy, bundle_out, field_path, points_path, report_out, manifest_path, rerun_dir;
    double t = 0.0, tolerance = 0.05;
    std::optional<double> t_hat;
    std::vector<std::string> manifests;
    EnvelopeSettings envelope;

    auto* validate = app.add_subcommand("validate", "check the structural assumptions");
    add_common(validate, common, false);
    auto* simulate_cmd = app.add_subcommand("simulate", "simulate controlled state paths");
    add_common(simulate_cmd, common, false);
    simulate_cmd->add_option("--policy", policy, "lowest | constant:<index> | field file for feedback");
    simulate_cmd->add_option("--bundle-out", bundle_out, "also write the path bundle");
    auto* oracle = app.add_subcommand("oracle", "backward-induction oracle field");
    add_common(oracle, common, false);
    auto* solve = app.add_subcommand("solve", "lift and solve the finite-difference field");
    add_common(solve, common, true);
    auto* envelope_cmd = app.add_subcommand("envelope", "envelopes and sandwich checks over an eps list");
    add_common(envelope_cmd, common, false);
    envelope_cmd->add_option("--eps-list", envelope.eps_list, "comma separated eps values")->delimiter(',');
    envelope_cmd->add_option("--sample-paths", envelope.sample_paths, "paths carrying sandwich points");
    envelope_cmd->add_option("--tolerance", envelope.tolerance, "mesh tolerance added to the sandwich band");
    auto* dpp = app.add_subcommand("verify-dpp", "dynamic programming residual");
    add_common(dpp, common, false);
    dpp->add_option("--t", t, "start time");
    dpp->add_option("--that", t_hat, "intermediate time (default T/2)");
    auto* viscosity = app.add_subcommand("verify-viscosity", "sub and supersolution residuals");
    add_common(viscosity, common, true);
    viscosity->add_option("--field", field_path, "solved field; solved afresh when absent");
    viscosity->add_option("--points", points_path, "CSV of path,t,x1..xd");
    viscosity->add_option("--tolerance", tolerance, "residual sign tolerance");
    auto* report = app.add_subcommand("report", "merge run summaries into one table");
    report->add_option("manifests", manifests, "manifest files")->required()->check(CLI::ExistingFile);
    report->add_option("--out", report_out, "output CSV (stdout when absent)");
    auto* rerun = app.add_subcommand("rerun", "replay a manifest and compare outputs");
    rerun->add_option("manifest", manifest_path, "manifest file")->required()->check(CLI::ExistingFile);
    rerun->add_option("--out-dir", rerun_dir, "replay directory (default <out_dir>/rerun)");

    std::vector<const char*> argv{"shjb"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_usage;
    }

    try {
        if (report->parsed()) return run_report(manifests, report_out);
        if (rerun->parsed()) return run_rerun(manifest_path, rerun_dir);

        const CLI::App* cmd = app.get_subcommands().front();
        // the replay record: everything except the output directory, config made absolute
        std::vector<std::string> record;
        for (std::size_t i = 0; i < args.size(); ++i) {
            if (args[i] == "--out-dir") {
                ++i;
                continue;
            }
            if (args[i].rfind("--out-dir=", 0) == 0) continue;
            record.push_back(args[i] == common.config ? fs::absolute(common.config).string() : args[i]);
        }
        const RunConfig cfg = load(common);
        Session session(common, cmd->get_name(), record);
        session.set_config(cfg, fs::absolute(common.config).string());
        if (validate->parsed()) run_validate(session, cfg, common);
        else if (simulate_cmd->parsed()) run_simulate(session, cfg, common, policy, bundle_out);
        else if (oracle->parsed()) run_oracle(session, cfg, common);
        else if (solve->parsed()) run_solve(session, cfg, common);
        else if (envelope_cmd->parsed()) run_envelope(session, cfg, common, envelope);
        else if (dpp->parsed()) run_dpp(session, cfg, common, t, t_hat);
        else if (viscosity->parsed()) run_viscosity(session, cfg, common, field_path, points_path, tolerance);
        session.finish();
        std::cout << session.dir().string() << (session.passed() ? " PASS" : " FAIL") << '\n';
        return session.passed() ? exit_ok : exit_failed_check;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return exit_usage;
    } catch (const StageError& e) {
        std::cerr << e.what() << '\n';
        return exit_stage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return exit_stage;
    }
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dispatch(std::move(args));
}
