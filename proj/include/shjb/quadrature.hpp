#pragma once

#include <cstddef>
#include <vector>

namespace shjb {

struct QuadratureRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

// Nodes/weights for E[g(Z)], Z ~ N(0,1); weights sum to 1.
[[nodiscard]] const QuadratureRule& gauss_hermite(std::size_t count);

// Nodes/weights on [-1,1] for the Lebesgue measure.
[[nodiscard]] const QuadratureRule& gauss_legendre(std::size_t count);

inline constexpr std::size_t kHermiteNodes = 9;

// Four-point Lagrange weights for interpolating at `at` from nodes
// x[0..3] (not necessarily uniform).
void lagrange4(const double* x, double at, double* w);

}  // namespace shjb
