#pragma once

#include <string>
#include <vector>

#include "shjb/model.hpp"

namespace support {

// Coefficient strings for a small test problem; unset blocks stay zero.
struct ProblemSpec {
    int d = 1;
    int m0 = 0;
    int m1 = 1;
    int n = 1;
    std::vector<double> knots{0.0, 1.0};
    std::vector<std::string> beta{"0"};
    std::vector<std::string> sigma_tilde{};
    std::vector<std::string> sigma_bar{"1"};
    std::string running = "0";
    std::string terminal = "0";
    double bound = 1.0;
};

inline shjb::CoefficientSet build(const ProblemSpec& spec) {
    shjb::CoefficientSet c;
    c.d = spec.d;
    c.m0 = spec.m0;
    c.m1 = spec.m1;
    c.n = spec.n;
    c.knots = spec.knots;
    for (const auto& s : spec.beta) c.beta.push_back(shjb::Expr::parse(s));
    for (const auto& s : spec.sigma_tilde) c.sigma_tilde.push_back(shjb::Expr::parse(s));
    for (const auto& s : spec.sigma_bar) c.sigma_bar.push_back(shjb::Expr::parse(s));
    c.running_cost = shjb::Expr::parse(spec.running);
    c.terminal_cost = shjb::Expr::parse(spec.terminal);
    c.bound_l = spec.bound;
    c.check();
    return c;
}

inline shjb::WienerEnv zero_env(const shjb::CoefficientSet& c) {
    shjb::WienerEnv w;
    w.live.assign(static_cast<std::size_t>(c.m()), 0.0);
    w.knots.assign(static_cast<std::size_t>(c.knot_count() * c.m0), 0.0);
    return w;
}

}  // namespace support
