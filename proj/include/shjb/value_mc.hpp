#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "shjb/field.hpp"
#include "shjb/lift.hpp"
#include "shjb/model.hpp"
#include "shjb/paths.hpp"
#include "shjb/sde.hpp"

namespace shjb {

struct MCEstimate {
    double mean = 0.0;
    double std_error = 0.0;  // sample standard deviation / sqrt(count)
    std::size_t count = 0;
};

[[nodiscard]] MCEstimate summarize(std::span<const double> samples);

// Per-path realised cost from grid time t: left-endpoint quadrature of f up to
// `stop`, plus G(X_T) when stop is the horizon, or `continuation` at the stop
// time otherwise.
[[nodiscard]] std::vector<double> path_costs(const CoefficientSet& c, const ControlPolicy& policy, double t,
                                             std::span<const double> x, const PathBundle& bundle, double stop,
                                             const ValueField* continuation = nullptr);

[[nodiscard]] MCEstimate cost_functional(const CoefficientSet& c, const ControlPolicy& policy, double t,
                                         std::span<const double> x, const PathBundle& bundle);

// Exhaustive dynamic programming on the (x, y, frozen-knot) mesh with
// Gauss-Hermite transition expectations; mesh.dt is the coarse time step.
[[nodiscard]] ValueField backward_induction_oracle(const IntervalProblem& problem, const ControlLattice& lattice,
                                                   const MeshSpec& mesh);
[[nodiscard]] ValueField backward_induction_oracle(const CoefficientSet& c, const ControlLattice& lattice,
                                                   const MeshSpec& mesh);

struct BruteResult {
    MCEstimate estimate;
    std::vector<std::size_t> schedule;  // lattice index per piece
    std::size_t candidates = 0;
    std::vector<double> samples;        // per-path costs of the best schedule
};

// Min over every piecewise-constant open-loop schedule with `pieces` equal
// pieces on [t, T], all evaluated on the same bundle.
[[nodiscard]] BruteResult brute_value(const CoefficientSet& c, const ControlLattice& lattice, double t,
                                      std::span<const double> x, const PathBundle& bundle, std::size_t pieces,
                                      double budget = 4e8);

struct DppReport {
    double residual = 0.0;
    double lhs = 0.0;
    double rhs = 0.0;
    double std_error = 0.0;
    double mesh_error = 0.0;
    double threshold = 0.0;
    bool pass = false;
};

// Both sides minimise over the same candidate family (the oracle feedback
// plus open-loop schedules with `pieces` pieces on the relevant window).
// Left: cost to T with terminal G. Right: cost to t_hat plus the oracle value
// there. `coarse` supplies the mesh-error estimate.
[[nodiscard]] DppReport dpp_residual(const CoefficientSet& c, const ControlLattice& lattice, double t, double t_hat,
                                     std::span<const double> x, const PathBundle& bundle, std::size_t pieces,
                                     std::shared_ptr<const ValueField> oracle, const ValueField* coarse = nullptr);

struct SupermartingaleReport {
    ValidationReport report;
    std::vector<double> gaps;        // mean of V(t~) + int f - V(t) per window
    std::vector<double> std_errors;
};

[[nodiscard]] SupermartingaleReport supermartingale_check(const CoefficientSet& c, const ValueField& oracle,
                                                          const ControlPolicy& policy, std::span<const double> x,
                                                          const std::vector<double>& times, const PathBundle& bundle,
                                                          double mesh_tolerance);

// Max sampled |V(t,x)-V(t,x')|/|x-x'| over pairs in the box, on the bundle's paths at time t.
[[nodiscard]] double lipschitz_probe(const ValueField& field, double t, std::size_t pair_count,
                                     const PathBundle& bundle, const std::vector<double>& x_lo,
                                     const std::vector<double>& x_hi, std::uint64_t seed);

struct BoundReport {
    ValidationReport report;
    double sup = 0.0;
    double modulus = 0.0;  // max |V(t_{k+1},X)-V(t_k,X)| along paths at the bundle step
};

[[nodiscard]] BoundReport bound_check(const CoefficientSet& c, const ValueField& field, const ControlPolicy& policy,
                                      std::span<const double> x, const PathBundle& bundle, std::size_t samples,
                                      std::uint64_t seed);

}  // namespace shjb
