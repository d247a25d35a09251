#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace shjb {

enum class VarKind : std::uint8_t { time, state, control, live, knot };

struct VarRef {
    VarKind kind = VarKind::time;
    int index = 0;  // zero based; unused for time

    friend bool operator==(const VarRef&, const VarRef&) = default;
    friend auto operator<=>(const VarRef&, const VarRef&) = default;
};

[[nodiscard]] std::string var_name(VarRef ref);

// Values bound to the variable families while evaluating an expression.
struct EvalEnv {
    double t = 0.0;
    const double* x = nullptr;
    const double* v = nullptr;
    const double* w = nullptr;
    const double* k = nullptr;
};

class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t position)
        : std::runtime_error(what + " at position " + std::to_string(position)), position_(position) {}
    [[nodiscard]] std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

// Division by zero, fractional power of a negative base, or a non-finite result.
class DomainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Op : std::uint8_t { num, var, neg, add, sub, mul, div, pow, exp, sin, cos, tanh, abs, min, max };

struct ExprNode {
    Op op = Op::num;
    double value = 0.0;
    VarRef var{};
    int lhs = -1;
    int rhs = -1;
};

class Expr {
public:
    Expr();  // the constant 0

    [[nodiscard]] static Expr parse(std::string_view src);
    [[nodiscard]] static Expr constant(double c);
    [[nodiscard]] static Expr variable(VarRef ref);
    [[nodiscard]] static Expr binary(Op op, const Expr& a, const Expr& b);
    [[nodiscard]] static Expr unary(Op op, const Expr& a);

    [[nodiscard]] double eval(const EvalEnv& env) const;
    [[nodiscard]] std::string unparse() const;

    [[nodiscard]] const std::vector<VarRef>& free_vars() const noexcept { return vars_; }
    [[nodiscard]] std::set<std::string> free_var_names() const;
    [[nodiscard]] bool references(VarKind kind) const noexcept;
    [[nodiscard]] bool references(VarRef ref) const noexcept;
    [[nodiscard]] int max_index(VarKind kind) const noexcept;  // -1 when absent
    [[nodiscard]] bool is_random() const noexcept {
        return references(VarKind::live) || references(VarKind::knot);
    }
    [[nodiscard]] bool is_constant() const noexcept { return vars_.empty(); }
    [[nodiscard]] bool is_zero_literal() const noexcept;

    // Replace every occurrence of `from` by `to`.
    [[nodiscard]] Expr substitute(VarRef from, const Expr& to) const;

    [[nodiscard]] const std::vector<ExprNode>& nodes() const noexcept { return nodes_; }
    [[nodiscard]] int root() const noexcept { return static_cast<int>(nodes_.size()) - 1; }

    friend bool operator==(const Expr& a, const Expr& b);

private:
    // Nodes are stored in post-order: children precede parents, root is last.
    std::vector<ExprNode> nodes_;
    std::vector<VarRef> vars_;

    void finalize();
    friend class ExprBuilder;
};

}  // namespace shjb
