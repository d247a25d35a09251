#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "shjb/field.hpp"
#include "shjb/lift.hpp"
#include "shjb/model.hpp"

namespace shjb {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// One problem file: coefficients, lattice, grids, meshes, seeds and budgets.
struct RunConfig {
    std::string name;
    std::string text;             // raw file contents, hashed into manifests
    CoefficientSet coeffs;
    ControlLattice lattice = ControlLattice::from_points({{0.0}});
    std::size_t steps = 64;       // Monte Carlo time grid
    std::size_t paths = 2000;
    std::uint64_t seed = 1;
    MeshSpec mesh;                // finite-difference solver
    MeshSpec oracle_mesh;         // backward-induction oracle
    LiftOptions lift;
    std::vector<double> eps_list{0.2, 0.1, 0.05};
    std::size_t pieces = 2;       // open-loop pieces in the DPP candidate family
    double lambda_min = 0.5;      // uniform ellipticity floor for the common-noise-free block
    std::vector<double> sample_x_lo{-2.0};
    std::vector<double> sample_x_hi{2.0};
    std::vector<double> x0;                // start state, zeros when absent
    std::optional<double> reference_value; // known V(0, x0) for error columns
};

[[nodiscard]] RunConfig parse_config(const std::string& text, const std::string& name = "config");
[[nodiscard]] RunConfig load_config(const std::filesystem::path& path);

// FNV-1a 64-bit of a byte string.
[[nodiscard]] std::uint64_t fnv1a(const std::string& bytes);

}  // namespace shjb
