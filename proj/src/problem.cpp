#include "shjb/problem.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace shjb {

namespace {

using nlohmann::json;

Expr parse_expr(const json& node, const std::string& field) {
    if (!node.is_string()) throw ConfigError("field '" + field + "' must be an expression string");
    try {
        return Expr::parse(node.get<std::string>());
    } catch (const ParseError& e) {
        throw ConfigError("field '" + field + "': " + e.what());
    }
}

std::vector<Expr> parse_exprs(const json& parent, const char* key, std::size_t expected) {
    std::vector<Expr> out;
    if (!parent.contains(key)) {
        if (expected == 0) return out;
        throw ConfigError(std::string("missing field '") + key + "'");
    }
    const json& arr = parent.at(key);
    if (!arr.is_array() || arr.size() != expected)
        throw ConfigError(std::string("field '") + key + "' must list " + std::to_string(expected) + " expressions");
    for (std::size_t i = 0; i < arr.size(); ++i) out.push_back(parse_expr(arr[i], std::string(key) + "[" + std::to_string(i) + "]"));
    return out;
}

template <class T>
void read(const json& parent, const char* key, T& out) {
    if (parent.contains(key)) out = parent.at(key).get<T>();
}

MeshSpec parse_mesh(const json& node, MeshSpec mesh) {
    read(node, "x_lo", mesh.x_lo);
    read(node, "x_hi", mesh.x_hi);
    read(node, "h", mesh.h);
    read(node, "y_half_width", mesh.y_half_width);
    read(node, "hy", mesh.hy);
    read(node, "dt", mesh.dt);
    read(node, "slices_per_interval", mesh.slices_per_interval);
    read(node, "max_halvings", mesh.max_halvings);
    read(node, "budget", mesh.budget);
    if (node.contains("scheme")) {
        const std::string scheme = node.at("scheme").get<std::string>();
        if (scheme != "explicit" && scheme != "implicit") throw ConfigError("mesh scheme must be explicit or implicit");
        mesh.implicit = scheme == "implicit";
    }
    if (mesh.x_lo.size() != mesh.x_hi.size() || mesh.x_lo.empty()) throw ConfigError("mesh box bounds mismatch");
    if (!(mesh.h > 0.0) || !(mesh.dt > 0.0)) throw ConfigError("mesh spacings must be positive");
    return mesh;
}

}  // namespace

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t hash = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 1099511628211ull;
    }
    return hash;
}

RunConfig parse_config(const std::string& text, const std::string& name) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError("config parse error in " + name + ": " + e.what());
    }
    RunConfig cfg;
    cfg.text = text;
    cfg.name = root.value("name", name);
    try {
        if (!root.contains("problem")) throw ConfigError("missing field 'problem'");
        const json& p = root.at("problem");
        CoefficientSet& c = cfg.coeffs;
        read(p, "d", c.d);
        read(p, "m0", c.m0);
        read(p, "m1", c.m1);
        read(p, "n", c.n);
        read(p, "knots", c.knots);
        read(p, "bound_l", c.bound_l);
        read(p, "deterministic_diffusion", c.deterministic_diffusion);
        if (c.d < 1 || c.m0 < 0 || c.m1 < 0 || c.n < 1) throw ConfigError("dimensions must be positive");
        c.beta = parse_exprs(p, "beta", static_cast<std::size_t>(c.d));
        c.sigma_tilde = parse_exprs(p, "sigma_tilde", static_cast<std::size_t>(c.d * c.m0));
        c.sigma_bar = parse_exprs(p, "sigma_bar", static_cast<std::size_t>(c.d * c.m1));
        c.running_cost = p.contains("running_cost") ? parse_expr(p.at("running_cost"), "running_cost") : Expr();
        c.terminal_cost = p.contains("terminal_cost") ? parse_expr(p.at("terminal_cost"), "terminal_cost") : Expr();
        try {
            c.check();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(std::string("invalid problem: ") + e.what());
        }

        if (!root.contains("lattice")) throw ConfigError("missing field 'lattice'");
        const json& l = root.at("lattice");
        if (l.contains("points")) {
            cfg.lattice = ControlLattice::from_points(l.at("points").get<std::vector<std::vector<double>>>());
        } else {
            cfg.lattice = ControlLattice::from_box(l.at("lo").get<std::vector<double>>(),
                                                   l.at("hi").get<std::vector<double>>(), l.value("level", 2));
        }
        if (cfg.lattice.dim() != c.n) throw ConfigError("lattice dimension differs from the control dimension");

        if (root.contains("grid")) {
            const json& g = root.at("grid");
            read(g, "steps", cfg.steps);
            read(g, "paths", cfg.paths);
            read(g, "seed", cfg.seed);
        }
        cfg.mesh = parse_mesh(root.value("mesh", json::object()), cfg.mesh);
        cfg.oracle_mesh = parse_mesh(root.value("oracle_mesh", json::object()), cfg.mesh);
        if (root.contains("lift")) {
            const json& lf = root.at("lift");
            read(lf, "eps", cfg.lift.eps_target);
            read(lf, "max_intervals", cfg.lift.max_intervals);
            read(lf, "paths", cfg.lift.paths);
            read(lf, "steps_per_interval", cfg.lift.steps_per_interval);
            read(lf, "seed", cfg.lift.seed);
            read(lf, "x_samples", cfg.lift.x_samples);
            read(lf, "x_lo", cfg.lift.x_lo);
            read(lf, "x_hi", cfg.lift.x_hi);
        }
        read(root, "eps_list", cfg.eps_list);
        read(root, "pieces", cfg.pieces);
        read(root, "lambda_min", cfg.lambda_min);
        if (root.contains("sample_box")) {
            cfg.sample_x_lo = root.at("sample_box").at("lo").get<std::vector<double>>();
            cfg.sample_x_hi = root.at("sample_box").at("hi").get<std::vector<double>>();
        }
        read(root, "x0", cfg.x0);
        if (root.contains("reference_value")) cfg.reference_value = root.at("reference_value").get<double>();
    } catch (const json::exception& e) {
        throw ConfigError("config field error in " + name + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError("config value error in " + name + ": " + e.what());
    }
    if (cfg.steps == 0 || cfg.paths == 0) throw ConfigError("grid steps and paths must be positive");
    if (cfg.x0.empty()) cfg.x0.assign(static_cast<std::size_t>(cfg.coeffs.d), 0.0);
    if (cfg.x0.size() != static_cast<std::size_t>(cfg.coeffs.d)) throw ConfigError("x0 must have d entries");
    if (cfg.sample_x_lo.size() != static_cast<std::size_t>(cfg.coeffs.d) ||
        cfg.sample_x_hi.size() != static_cast<std::size_t>(cfg.coeffs.d))
        throw ConfigError("sample box must have d entries");
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config " + path.string());
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str(), path.stem().string());
}

}  // namespace shjb
