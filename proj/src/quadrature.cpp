#include "shjb/quadrature.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <mutex>

namespace shjb {

namespace {

// Golub-Welsch: eigen-decomposition of the symmetric Jacobi matrix.
QuadratureRule golub_welsch(std::size_t n, double mass, double (*offdiag)(std::size_t)) {
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t k = 1; k < n; ++k) {
        const double b = offdiag(k);
        jacobi(static_cast<Eigen::Index>(k - 1), static_cast<Eigen::Index>(k)) = b;
        jacobi(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k - 1)) = b;
    }
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
    QuadratureRule rule;
    for (std::size_t i = 0; i < n; ++i) {
        const auto col = static_cast<Eigen::Index>(i);
        rule.nodes.push_back(eig.eigenvalues()(col));
        const double v0 = eig.eigenvectors()(0, col);
        rule.weights.push_back(mass * v0 * v0);
    }
    // symmetric rules: pin the exact symmetry lost to round-off
    for (std::size_t i = 0; i < n / 2; ++i) {
        const std::size_t j = n - 1 - i;
        const double node = 0.5 * (rule.nodes[j] - rule.nodes[i]);
        const double weight = 0.5 * (rule.weights[i] + rule.weights[j]);
        rule.nodes[i] = -node;
        rule.nodes[j] = node;
        rule.weights[i] = weight;
        rule.weights[j] = weight;
    }
    if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
    double total = 0.0;
    for (double w : rule.weights) total += w;
    for (double& w : rule.weights) w *= mass / total;
    return rule;
}

double hermite_offdiag(std::size_t k) { return std::sqrt(static_cast<double>(k)); }

double legendre_offdiag(std::size_t k) {
    const double kk = static_cast<double>(k);
    return kk / std::sqrt(4.0 * kk * kk - 1.0);
}

const QuadratureRule& cached(std::map<std::size_t, QuadratureRule>& cache, std::size_t n, double mass,
                             double (*offdiag)(std::size_t)) {
    static std::mutex lock;
    const std::scoped_lock guard(lock);
    auto it = cache.find(n);
    if (it == cache.end()) it = cache.emplace(n, golub_welsch(n, mass, offdiag)).first;
    return it->second;
}

}  // namespace

const QuadratureRule& gauss_hermite(std::size_t count) {
    static std::map<std::size_t, QuadratureRule> cache;
    return cached(cache, count, 1.0, hermite_offdiag);
}

const QuadratureRule& gauss_legendre(std::size_t count) {
    static std::map<std::size_t, QuadratureRule> cache;
    return cached(cache, count, 2.0, legendre_offdiag);
}

void lagrange4(const double* x, double at, double* w) {
    for (int i = 0; i < 4; ++i) {
        double num = 1.0;
        double den = 1.0;
        for (int j = 0; j < 4; ++j) {
            if (j == i) continue;
            num *= at - x[j];
            den *= x[i] - x[j];
        }
        w[i] = num / den;
    }
}

}  // namespace shjb
