#include "shjb/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "shjb/rng.hpp"

namespace shjb {

namespace {

std::string describe_point(double t, const std::vector<double>& x, const std::vector<double>& v,
                           const WienerEnv& w) {
    std::ostringstream os;
    os.precision(6);
    os << "t=" << t;
    for (std::size_t i = 0; i < x.size(); ++i) os << " x" << i + 1 << '=' << x[i];
    for (std::size_t i = 0; i < v.size(); ++i) os << " v" << i + 1 << '=' << v[i];
    for (std::size_t i = 0; i < w.live.size(); ++i) os << " w" << i + 1 << '=' << w.live[i];
    for (std::size_t i = 0; i < w.knots.size(); ++i) os << " k" << i + 1 << '=' << w.knots[i];
    return os.str();
}

// One random evaluation point for the validators.
struct SamplePoint {
    double t = 0.0;
    std::vector<double> x, x2, v, v2;
    WienerEnv w;
};

class PointSampler {
public:
    PointSampler(const CoefficientSet& c, const ControlLattice& lattice, const SamplingDomain& dom, std::uint64_t tag)
        : c_(c), lattice_(lattice), dom_(dom), rng_(derive_seed(dom.seed, tag)) {}

    void draw(std::size_t index, SamplePoint& p) const {
        std::uint64_t slot = 0;
        auto u = [&] { return rng_.uniform(index, slot++); };
        p.t = c_.horizon() * u();
        p.x.resize(static_cast<std::size_t>(c_.d));
        p.x2.resize(p.x.size());
        const bool near_pair = (index % 2) == 1;
        for (int i = 0; i < c_.d; ++i) {
            const double lo = dom_.x_lo[static_cast<std::size_t>(i)];
            const double hi = dom_.x_hi[static_cast<std::size_t>(i)];
            p.x[i] = lo + (hi - lo) * u();
            if (near_pair) {
                const double step = 1e-3 * (hi - lo) * (2.0 * u() - 1.0);
                p.x2[i] = std::clamp(p.x[i] + step, lo, hi);
            } else {
                p.x2[i] = lo + (hi - lo) * u();
            }
        }
        p.v.resize(static_cast<std::size_t>(lattice_.dim()));
        p.v2.resize(p.v.size());
        for (int i = 0; i < lattice_.dim(); ++i) {
            const double lo = lattice_.lo()[static_cast<std::size_t>(i)];
            const double hi = lattice_.hi()[static_cast<std::size_t>(i)];
            p.v[i] = lo + (hi - lo) * u();
            p.v2[i] = std::clamp(p.v[i] + 1e-2 * (hi - lo) * (2.0 * u() - 1.0), lo, hi);
        }
        p.w.live.assign(static_cast<std::size_t>(c_.m()), 0.0);
        for (int i = 0; i < c_.m0; ++i) p.w.live[i] = dom_.wiener_range * (2.0 * u() - 1.0);
        p.w.knots.assign(static_cast<std::size_t>(c_.m0 * c_.knot_count()), 0.0);
        for (auto& k : p.w.knots) k = dom_.wiener_range * (2.0 * u() - 1.0);
    }

private:
    const CoefficientSet& c_;
    const ControlLattice& lattice_;
    const SamplingDomain& dom_;
    CounterRng rng_;
};

double checked_eval(const Expr& e, const EvalEnv& env, const char* label, const SamplePoint& p,
                    const std::vector<double>& x, const std::vector<double>& v) {
    try {
        return e.eval(env);
    } catch (const DomainError& err) {
        throw DomainError(std::string(label) + " '" + e.unparse() + "': " + err.what() + " at " +
                          describe_point(p.t, x, v, p.w));
    }
}

void check_vars(const Expr& e, const CoefficientSet& c, const char* label) {
    for (const auto& ref : e.free_vars()) {
        bool ok = true;
        switch (ref.kind) {
            case VarKind::time: break;
            case VarKind::state: ok = ref.index < c.d; break;
            case VarKind::control: ok = ref.index < c.n; break;
            case VarKind::live: ok = ref.index < c.m0; break;
            case VarKind::knot: ok = ref.index < c.m0 * c.knot_count(); break;
        }
        if (!ok) throw std::invalid_argument(std::string(label) + " references undeclared variable " + var_name(ref));
    }
}

}  // namespace

void CoefficientSet::check() const {
    if (d < 1 || m0 < 0 || m1 < 0 || n < 1) throw std::invalid_argument("dimensions must be positive");
    if (knots.size() < 2 || knots.front() != 0.0) throw std::invalid_argument("knots must start at 0");
    for (std::size_t i = 1; i < knots.size(); ++i)
        if (!(knots[i] > knots[i - 1])) throw std::invalid_argument("knots must be strictly increasing");
    if (beta.size() != static_cast<std::size_t>(d)) throw std::invalid_argument("beta needs d entries");
    if (sigma_tilde.size() != static_cast<std::size_t>(d * m0))
        throw std::invalid_argument("sigma_tilde needs d*m0 entries");
    if (sigma_bar.size() != static_cast<std::size_t>(d * m1))
        throw std::invalid_argument("sigma_bar needs d*m1 entries");
    for (const auto& e : beta) check_vars(e, *this, "beta");
    for (const auto& e : sigma_tilde) check_vars(e, *this, "sigma_tilde");
    for (const auto& e : sigma_bar) check_vars(e, *this, "sigma_bar");
    check_vars(running_cost, *this, "f");
    check_vars(terminal_cost, *this, "G");
    if (terminal_cost.references(VarKind::time) || terminal_cost.references(VarKind::control))
        throw std::invalid_argument("G must not reference t or v");
    if (deterministic_diffusion) {
        for (const auto* group : {&sigma_tilde, &sigma_bar})
            for (const auto& e : *group)
                if (e.is_random()) throw std::invalid_argument("sigma must not reference w or k variables");
    }
}

std::vector<const Expr*> CoefficientSet::all_exprs() const {
    std::vector<const Expr*> out;
    for (const auto& e : beta) out.push_back(&e);
    for (const auto& e : sigma_tilde) out.push_back(&e);
    for (const auto& e : sigma_bar) out.push_back(&e);
    out.push_back(&running_cost);
    out.push_back(&terminal_cost);
    return out;
}

bool CoefficientSet::is_random() const {
    const auto exprs = all_exprs();
    return std::any_of(exprs.begin(), exprs.end(), [](const Expr* e) { return e->is_random(); });
}

EvalEnv make_env(double t, const double* x, const double* v, const WienerEnv& w) {
    return EvalEnv{t, x, v, w.live.data(), w.knots.data()};
}

void eval_drift(const CoefficientSet& c, const EvalEnv& env, double* out) {
    for (int i = 0; i < c.d; ++i) out[i] = c.beta[static_cast<std::size_t>(i)].eval(env);
}

void eval_sigma(const CoefficientSet& c, const EvalEnv& env, double* out) {
    const int m = c.m();
    for (int i = 0; i < c.d; ++i)
        for (int j = 0; j < m; ++j) out[i * m + j] = c.sigma(i, j).eval(env);
}

void eval_point(const CoefficientSet& c, const EvalEnv& env, PointCoefficients& out) {
    out.beta.resize(c.d);
    out.sigma.resize(c.d, c.m());
    eval_drift(c, env, out.beta.data());
    for (int i = 0; i < c.d; ++i)
        for (int j = 0; j < c.m(); ++j) out.sigma(i, j) = c.sigma(i, j).eval(env);
    out.cost = c.running_cost.eval(env);
}

ControlLattice ControlLattice::from_box(std::vector<double> lo, std::vector<double> hi, int level) {
    if (lo.empty() || lo.size() != hi.size()) throw std::invalid_argument("control box bounds mismatch");
    if (level < 0) throw std::invalid_argument("lattice level must be nonnegative");
    ControlLattice out;
    out.dim_ = static_cast<int>(lo.size());
    out.level_ = level;
    out.box_ = true;
    const std::size_t per_axis = (std::size_t{1} << level) + 1;
    std::size_t total = 1;
    for (std::size_t i = 0; i < lo.size(); ++i) {
        if (hi[i] < lo[i]) throw std::invalid_argument("control box is empty");
        total *= hi[i] > lo[i] ? per_axis : 1;
    }
    out.coords_.reserve(total * lo.size());
    std::vector<std::size_t> idx(lo.size(), 0);
    for (std::size_t p = 0; p < total; ++p) {
        for (std::size_t i = 0; i < lo.size(); ++i) {
            const double frac = hi[i] > lo[i] ? static_cast<double>(idx[i]) / static_cast<double>(per_axis - 1) : 0.0;
            out.coords_.push_back(idx[i] == per_axis - 1 ? hi[i] : lo[i] + (hi[i] - lo[i]) * frac);
        }
        // odometer with the last coordinate fastest keeps lexicographic order
        for (std::size_t i = lo.size(); i-- > 0;) {
            const std::size_t limit = hi[i] > lo[i] ? per_axis : 1;
            if (++idx[i] < limit) break;
            idx[i] = 0;
        }
    }
    out.count_ = total;
    out.lo_ = std::move(lo);
    out.hi_ = std::move(hi);
    return out;
}

ControlLattice ControlLattice::from_points(const std::vector<std::vector<double>>& points) {
    if (points.empty()) throw std::invalid_argument("control lattice must be nonempty");
    const std::size_t dim = points.front().size();
    if (dim == 0) throw std::invalid_argument("control points need at least one coordinate");
    auto sorted = points;
    for (const auto& p : sorted)
        if (p.size() != dim) throw std::invalid_argument("control points differ in dimension");
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw std::invalid_argument("control points must be pairwise distinct");
    ControlLattice out;
    out.dim_ = static_cast<int>(dim);
    out.lo_ = sorted.front();
    out.hi_ = sorted.front();
    for (const auto& p : sorted) {
        for (std::size_t i = 0; i < dim; ++i) {
            out.lo_[i] = std::min(out.lo_[i], p[i]);
            out.hi_[i] = std::max(out.hi_[i], p[i]);
        }
        out.coords_.insert(out.coords_.end(), p.begin(), p.end());
    }
    out.count_ = sorted.size();
    return out;
}

ControlLattice ControlLattice::refined() const {
    if (!box_) return *this;
    return from_box(lo_, hi_, level_ + 1);
}

std::size_t ControlLattice::index_of(std::span<const double> v) const {
    for (std::size_t i = 0; i < count_; ++i)
        if (std::equal(v.begin(), v.end(), point(i))) return i;
    return count_;
}

void ValidationReport::add(std::string name, double measured, double threshold, bool pass) {
    checks.push_back(Check{std::move(name), measured, threshold, pass});
    passed = passed && pass;
}

const Check* ValidationReport::find(const std::string& name) const {
    for (const auto& c : checks)
        if (c.name == name) return &c;
    return nullptr;
}

ValidationReport validate_a1(const CoefficientSet& c, const ControlLattice& lattice, const SamplingDomain& dom) {
    if (dom.budget < 1) throw std::invalid_argument("sampling budget must be at least 1");
    const PointSampler sampler(c, lattice, dom, 0xA1);
    const auto exprs = c.all_exprs();
    double sup_abs = 0.0;
    double sup_lip = 0.0;
    double sup_vmod = 0.0;
    SamplePoint p;
    for (std::size_t i = 0; i < dom.budget; ++i) {
        sampler.draw(i, p);
        const EvalEnv e1 = make_env(p.t, p.x.data(), p.v.data(), p.w);
        const EvalEnv e2 = make_env(p.t, p.x2.data(), p.v.data(), p.w);
        const EvalEnv e3 = make_env(p.t, p.x.data(), p.v2.data(), p.w);
        double dx = 0.0;
        for (std::size_t j = 0; j < p.x.size(); ++j) dx += (p.x[j] - p.x2[j]) * (p.x[j] - p.x2[j]);
        dx = std::sqrt(dx);
        for (const Expr* g : exprs) {
            const double g1 = checked_eval(*g, e1, "coefficient", p, p.x, p.v);
            const double g2 = checked_eval(*g, e2, "coefficient", p, p.x2, p.v);
            const double g3 = checked_eval(*g, e3, "coefficient", p, p.x, p.v2);
            sup_abs = std::max(sup_abs, std::fabs(g1));
            if (dx > 0.0) sup_lip = std::max(sup_lip, std::fabs(g1 - g2) / dx);
            sup_vmod = std::max(sup_vmod, std::fabs(g1 - g3));
        }
    }
    ValidationReport r;
    const double limit = c.bound_l * (1.0 + dom.tolerance);
    r.add("sup_abs", sup_abs, limit, sup_abs <= limit);
    r.add("lipschitz_x", sup_lip, limit, sup_lip <= limit);
    // no quantitative modulus exists for continuity in v; reported only
    r.add("v_modulus_informational", sup_vmod, std::numeric_limits<double>::infinity(), true);
    r.samples_used = dom.budget;
    return r;
}

ValidationReport validate_a3(const CoefficientSet& c, const ControlLattice& lattice, const SamplingDomain& dom,
                             double lambda_min) {
    if (c.m1 < 1) throw std::invalid_argument("superparabolicity needs at least one independent Wiener coordinate");
    ValidationReport r;
    double random_sigma = 0.0;
    for (const auto* group : {&c.sigma_tilde, &c.sigma_bar})
        for (const auto& e : *group)
            if (e.is_random()) random_sigma += 1.0;
    r.add("sigma_deterministic", random_sigma, 0.0, random_sigma == 0.0);

    const PointSampler sampler(c, lattice, dom, 0xA3);
    double min_eig = std::numeric_limits<double>::infinity();
    double min_f = std::numeric_limits<double>::infinity();
    double min_g = std::numeric_limits<double>::infinity();
    SamplePoint p;
    Eigen::MatrixXd sb(c.d, c.m1);
    for (std::size_t i = 0; i < dom.budget; ++i) {
        sampler.draw(i, p);
        if (i == 0) {
            p.t = 0.0;
            for (int j = 0; j < c.d; ++j) p.x[j] = 0.5 * (dom.x_lo[j] + dom.x_hi[j]);
        }
        const std::vector<double> v = lattice.point_vec(i % lattice.size());
        const EvalEnv env = make_env(p.t, p.x.data(), v.data(), p.w);
        for (int a = 0; a < c.d; ++a)
            for (int b = 0; b < c.m1; ++b)
                sb(a, b) = checked_eval(c.sigma_bar[static_cast<std::size_t>(a * c.m1 + b)], env, "sigma_bar", p,
                                        p.x, v);
        const Eigen::MatrixXd gram = sb * sb.transpose();
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram, Eigen::EigenvaluesOnly);
        min_eig = std::min(min_eig, eig.eigenvalues()(0));
        min_f = std::min(min_f, checked_eval(c.running_cost, env, "f", p, p.x, v));
        min_g = std::min(min_g, checked_eval(c.terminal_cost, env, "G", p, p.x, v));
    }
    r.add("superparabolicity", min_eig, lambda_min, min_eig >= lambda_min * (1.0 - dom.tolerance));
    r.add("running_cost_nonnegative", min_f, 0.0, min_f >= 0.0);
    r.add("terminal_cost_nonnegative", min_g, 0.0, min_g >= 0.0);
    r.samples_used = dom.budget;
    return r;
}

HamiltonianResult hamiltonian(const CoefficientSet& c, const ControlLattice& lattice, double t,
                              std::span<const double> x, const WienerEnv& w, const Eigen::VectorXd& p,
                              const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    HamiltonianResult out;
    out.value = std::numeric_limits<double>::infinity();
    PointCoefficients pc;
    for (std::size_t i = 0; i < lattice.size(); ++i) {
        const EvalEnv env = make_env(t, x.data(), lattice.point(i), w);
        eval_point(c, env, pc);
        const Eigen::MatrixXd ssT = pc.sigma * pc.sigma.transpose();
        const double value =
            0.5 * (ssT.cwiseProduct(a.transpose())).sum() + (pc.sigma.cwiseProduct(b.transpose())).sum() +
            pc.beta.dot(p) + pc.cost;
        if (value < out.value) {
            out.value = value;
            out.argmin = i;
        }
    }
    out.control = lattice.point_vec(out.argmin);
    return out;
}

FieldJet zero_jet(int d, int m) {
    FieldJet j;
    j.grad = Eigen::VectorXd::Zero(d);
    j.hess = Eigen::MatrixXd::Zero(d, d);
    j.domega_grad = Eigen::MatrixXd::Zero(m, d);
    return j;
}

double generator_Lv(const CoefficientSet& c, std::span<const double> v, double t, std::span<const double> x,
                    const WienerEnv& w, const FieldJet& phi) {
    PointCoefficients pc;
    eval_point(c, make_env(t, x.data(), v.data(), w), pc);
    const Eigen::MatrixXd ssT = pc.sigma * pc.sigma.transpose();
    return phi.dt + 0.5 * (ssT.cwiseProduct(phi.hess.transpose())).sum() +
           (pc.sigma.cwiseProduct(phi.domega_grad.transpose())).sum() + phi.grad.dot(pc.beta);
}

}  // namespace shjb
