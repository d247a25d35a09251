#include "shjb/expr.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>

namespace shjb {

namespace {

constexpr std::size_t kInlineSlots = 128;

const char* op_symbol(Op op) {
    switch (op) {
        case Op::add: return "+";
        case Op::sub: return "-";
        case Op::mul: return "*";
        case Op::div: return "/";
        case Op::pow: return "^";
        default: return "?";
    }
}

const char* func_name(Op op) {
    switch (op) {
        case Op::exp: return "exp";
        case Op::sin: return "sin";
        case Op::cos: return "cos";
        case Op::tanh: return "tanh";
        case Op::abs: return "abs";
        case Op::min: return "min";
        case Op::max: return "max";
        default: return nullptr;
    }
}

std::string format_number(double v) {
    std::array<char, 64> buf{};
    std::snprintf(buf.data(), buf.size(), "%.17g", v);
    std::string s(buf.data());
    return v < 0 ? "(" + s + ")" : s;
}

bool equal_subtree(const std::vector<ExprNode>& a, int ia, const std::vector<ExprNode>& b, int ib) {
    const ExprNode& na = a[static_cast<std::size_t>(ia)];
    const ExprNode& nb = b[static_cast<std::size_t>(ib)];
    if (na.op != nb.op) return false;
    switch (na.op) {
        case Op::num: return na.value == nb.value;
        case Op::var: return na.var == nb.var;
        default: break;
    }
    if ((na.lhs < 0) != (nb.lhs < 0) || (na.rhs < 0) != (nb.rhs < 0)) return false;
    if (na.lhs >= 0 && !equal_subtree(a, na.lhs, b, nb.lhs)) return false;
    if (na.rhs >= 0 && !equal_subtree(a, na.rhs, b, nb.rhs)) return false;
    return true;
}

}  // namespace

std::string var_name(VarRef ref) {
    switch (ref.kind) {
        case VarKind::time: return "t";
        case VarKind::state: return "x" + std::to_string(ref.index + 1);
        case VarKind::control: return "v" + std::to_string(ref.index + 1);
        case VarKind::live: return "w" + std::to_string(ref.index + 1);
        case VarKind::knot: return "k" + std::to_string(ref.index + 1);
    }
    return "?";
}

class ExprBuilder {
public:
    static Expr leaf(const ExprNode& node) {
        Expr e;
        e.nodes_ = {node};
        e.finalize();
        return e;
    }

    static Expr combine(Op op, const Expr* a, const Expr* b) {
        Expr e;
        e.nodes_.clear();
        ExprNode parent;
        parent.op = op;
        if (a) parent.lhs = append(e.nodes_, a->nodes_);
        if (b) parent.rhs = append(e.nodes_, b->nodes_);
        e.nodes_.push_back(parent);
        e.finalize();
        return e;
    }

private:
    static int append(std::vector<ExprNode>& dst, const std::vector<ExprNode>& src) {
        const int offset = static_cast<int>(dst.size());
        for (ExprNode n : src) {
            if (n.lhs >= 0) n.lhs += offset;
            if (n.rhs >= 0) n.rhs += offset;
            dst.push_back(n);
        }
        return static_cast<int>(dst.size()) - 1;
    }
};

namespace {

class Parser {
public:
    explicit Parser(std::string_view src) : src_(src) {}

    Expr run() {
        skip_ws();
        if (pos_ >= src_.size()) throw ParseError("empty expression", pos_);
        Expr e = parse_sum();
        skip_ws();
        if (pos_ != src_.size()) throw ParseError(std::string("unexpected '") + src_[pos_] + "'", pos_);
        return e;
    }

private:
    std::string_view src_;
    std::size_t pos_ = 0;

    void skip_ws() {
        while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    }

    bool accept(char c) {
        skip_ws();
        if (pos_ < src_.size() && src_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    void expect(char c) {
        if (!accept(c)) {
            if (pos_ >= src_.size()) throw ParseError(std::string("expected '") + c + "' but input ended", pos_);
            throw ParseError(std::string("expected '") + c + "'", pos_);
        }
    }

    Expr parse_sum() {
        Expr lhs = parse_product();
        for (;;) {
            if (accept('+')) {
                Expr rhs = parse_product();
                lhs = Expr::binary(Op::add, lhs, rhs);
            } else if (accept('-')) {
                Expr rhs = parse_product();
                lhs = Expr::binary(Op::sub, lhs, rhs);
            } else {
                return lhs;
            }
        }
    }

    Expr parse_product() {
        Expr lhs = parse_unary();
        for (;;) {
            if (accept('*')) {
                Expr rhs = parse_unary();
                lhs = Expr::binary(Op::mul, lhs, rhs);
            } else if (accept('/')) {
                Expr rhs = parse_unary();
                lhs = Expr::binary(Op::div, lhs, rhs);
            } else {
                return lhs;
            }
        }
    }

    Expr parse_unary() {
        if (accept('-')) return Expr::unary(Op::neg, parse_unary());
        if (accept('+')) return parse_unary();
        return parse_power();
    }

    Expr parse_power() {
        Expr base = parse_primary();
        if (accept('^')) {
            // right associative; the exponent may carry its own sign
            Expr exponent = parse_unary();
            return Expr::binary(Op::pow, base, exponent);
        }
        return base;
    }

    Expr parse_primary() {
        skip_ws();
        if (pos_ >= src_.size()) throw ParseError("unexpected end of input", pos_);
        const char c = src_[pos_];
        if (c == '(') {
            ++pos_;
            Expr inner = parse_sum();
            expect(')');
            return inner;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return parse_number();
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') return parse_identifier();
        throw ParseError(std::string("unexpected '") + c + "'", pos_);
    }

    Expr parse_number() {
        const std::size_t start = pos_;
        double value = 0.0;
        const char* first = src_.data() + pos_;
        const char* last = src_.data() + src_.size();
        auto [ptr, ec] = std::from_chars(first, last, value, std::chars_format::general);
        if (ec != std::errc{} || ptr == first) throw ParseError("malformed number", start);
        pos_ += static_cast<std::size_t>(ptr - first);
        return Expr::constant(value);
    }

    Expr parse_identifier() {
        const std::size_t start = pos_;
        while (pos_ < src_.size() &&
               (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
            ++pos_;
        const std::string name(src_.substr(start, pos_ - start));
        skip_ws();
        if (pos_ < src_.size() && src_[pos_] == '(') {
            static constexpr std::array<std::pair<const char*, Op>, 7> funcs{{{"exp", Op::exp},
                                                                              {"sin", Op::sin},
                                                                              {"cos", Op::cos},
                                                                              {"tanh", Op::tanh},
                                                                              {"abs", Op::abs},
                                                                              {"min", Op::min},
                                                                              {"max", Op::max}}};
            const auto it = std::find_if(funcs.begin(), funcs.end(), [&](const auto& f) { return name == f.first; });
            if (it == funcs.end()) throw ParseError("unknown function '" + name + "'", start);
            ++pos_;
            Expr first = parse_sum();
            if (it->second == Op::min || it->second == Op::max) {
                expect(',');
                Expr second = parse_sum();
                expect(')');
                return Expr::binary(it->second, first, second);
            }
            expect(')');
            return Expr::unary(it->second, first);
        }
        return Expr::variable(resolve(name, start));
    }

    static VarRef resolve(const std::string& name, std::size_t at) {
        if (name == "t") return {VarKind::time, 0};
        if (name.size() >= 2 && name[1] != '0') {
            const bool digits = std::all_of(name.begin() + 1, name.end(),
                                            [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); });
            if (digits) {
                int index = 0;
                std::from_chars(name.data() + 1, name.data() + name.size(), index);
                switch (name[0]) {
                    case 'x': return {VarKind::state, index - 1};
                    case 'v': return {VarKind::control, index - 1};
                    case 'w': return {VarKind::live, index - 1};
                    case 'k': return {VarKind::knot, index - 1};
                    default: break;
                }
            }
        }
        throw ParseError("unknown identifier '" + name + "'", at);
    }
};

}  // namespace

Expr::Expr() {
    nodes_ = {ExprNode{}};
    finalize();
}

Expr Expr::parse(std::string_view src) { return Parser(src).run(); }

Expr Expr::constant(double c) {
    ExprNode n;
    n.op = Op::num;
    n.value = c;
    return ExprBuilder::leaf(n);
}

Expr Expr::variable(VarRef ref) {
    ExprNode n;
    n.op = Op::var;
    n.var = ref;
    return ExprBuilder::leaf(n);
}

Expr Expr::binary(Op op, const Expr& a, const Expr& b) { return ExprBuilder::combine(op, &a, &b); }

Expr Expr::unary(Op op, const Expr& a) { return ExprBuilder::combine(op, &a, nullptr); }

void Expr::finalize() {
    vars_.clear();
    for (const auto& n : nodes_)
        if (n.op == Op::var) vars_.push_back(n.var);
    std::sort(vars_.begin(), vars_.end());
    vars_.erase(std::unique(vars_.begin(), vars_.end()), vars_.end());
}

double Expr::eval(const EvalEnv& env) const {
    std::array<double, kInlineSlots> inline_vals;
    std::vector<double> heap_vals;
    double* vals = inline_vals.data();
    if (nodes_.size() > kInlineSlots) {
        heap_vals.resize(nodes_.size());
        vals = heap_vals.data();
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const ExprNode& n = nodes_[i];
        const double a = n.lhs >= 0 ? vals[n.lhs] : 0.0;
        const double b = n.rhs >= 0 ? vals[n.rhs] : 0.0;
        double r = 0.0;
        switch (n.op) {
            case Op::num: r = n.value; break;
            case Op::var:
                switch (n.var.kind) {
                    case VarKind::time: r = env.t; break;
                    case VarKind::state: r = env.x[n.var.index]; break;
                    case VarKind::control: r = env.v[n.var.index]; break;
                    case VarKind::live: r = env.w[n.var.index]; break;
                    case VarKind::knot: r = env.k[n.var.index]; break;
                }
                break;
            case Op::neg: r = -a; break;
            case Op::add: r = a + b; break;
            case Op::sub: r = a - b; break;
            case Op::mul: r = a * b; break;
            case Op::div:
                if (b == 0.0) throw DomainError("division by zero");
                r = a / b;
                break;
            case Op::pow:
                if (a < 0.0 && std::trunc(b) != b) throw DomainError("fractional power of a negative base");
                if (a == 0.0 && b < 0.0) throw DomainError("negative power of zero");
                r = std::pow(a, b);
                break;
            case Op::exp: r = std::exp(a); break;
            case Op::sin: r = std::sin(a); break;
            case Op::cos: r = std::cos(a); break;
            case Op::tanh: r = std::tanh(a); break;
            case Op::abs: r = std::fabs(a); break;
            case Op::min: r = std::min(a, b); break;
            case Op::max: r = std::max(a, b); break;
        }
        vals[i] = r;
    }
    const double out = vals[nodes_.size() - 1];
    if (!std::isfinite(out)) throw DomainError("non-finite result");
    return out;
}

namespace {

std::string unparse_node(const std::vector<ExprNode>& nodes, int i) {
    const ExprNode& n = nodes[static_cast<std::size_t>(i)];
    switch (n.op) {
        case Op::num: return format_number(n.value);
        case Op::var: return var_name(n.var);
        case Op::neg: return "(-" + unparse_node(nodes, n.lhs) + ")";
        case Op::add:
        case Op::sub:
        case Op::mul:
        case Op::div:
        case Op::pow:
            return "(" + unparse_node(nodes, n.lhs) + " " + op_symbol(n.op) + " " + unparse_node(nodes, n.rhs) + ")";
        case Op::min:
        case Op::max:
            return std::string(func_name(n.op)) + "(" + unparse_node(nodes, n.lhs) + ", " + unparse_node(nodes, n.rhs) +
                   ")";
        default: return std::string(func_name(n.op)) + "(" + unparse_node(nodes, n.lhs) + ")";
    }
}

}  // namespace

std::string Expr::unparse() const { return unparse_node(nodes_, root()); }

std::set<std::string> Expr::free_var_names() const {
    std::set<std::string> out;
    for (const auto& v : vars_) out.insert(var_name(v));
    return out;
}

bool Expr::references(VarKind kind) const noexcept {
    return std::any_of(vars_.begin(), vars_.end(), [&](const VarRef& v) { return v.kind == kind; });
}

bool Expr::references(VarRef ref) const noexcept {
    return std::find(vars_.begin(), vars_.end(), ref) != vars_.end();
}

int Expr::max_index(VarKind kind) const noexcept {
    int best = -1;
    for (const auto& v : vars_)
        if (v.kind == kind) best = std::max(best, v.index);
    return best;
}

bool Expr::is_zero_literal() const noexcept {
    return nodes_.size() == 1 && nodes_[0].op == Op::num && nodes_[0].value == 0.0;
}

Expr Expr::substitute(VarRef from, const Expr& to) const {
    if (!references(from)) return *this;
    std::vector<Expr> built(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        const ExprNode& n = nodes_[i];
        if (n.op == Op::var) {
            built[i] = n.var == from ? to : Expr::variable(n.var);
        } else if (n.op == Op::num) {
            built[i] = Expr::constant(n.value);
        } else if (n.rhs >= 0) {
            built[i] = Expr::binary(n.op, built[static_cast<std::size_t>(n.lhs)], built[static_cast<std::size_t>(n.rhs)]);
        } else {
            built[i] = Expr::unary(n.op, built[static_cast<std::size_t>(n.lhs)]);
        }
    }
    return built.back();
}

bool operator==(const Expr& a, const Expr& b) { return equal_subtree(a.nodes_, a.root(), b.nodes_, b.root()); }

}  // namespace shjb
