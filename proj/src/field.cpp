#include "shjb/field.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <stdexcept>

#include "shjb/binary_io.hpp"
#include "shjb/quadrature.hpp"

namespace shjb {

namespace {

void add_weight(Stencil1& s, std::size_t index, double weight) {
    for (std::size_t i = 0; i < s.count; ++i)
        if (s.index[i] == index) {
            s.weight[i] += weight;
            return;
        }
    s.index[s.count] = index;
    s.weight[s.count] = weight;
    ++s.count;
}

Stencil1 single(std::size_t index) {
    Stencil1 s;
    add_weight(s, index, 1.0);
    return s;
}

std::size_t nearest_node(const Axis& a, double p) {
    if (a.n == 1) return 0;
    const double s = std::round((p - a.lo) / a.h());
    return static_cast<std::size_t>(std::clamp(s, 0.0, static_cast<double>(a.n - 1)));
}

std::size_t nearest_of(const std::vector<double>& nodes, double p) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < nodes.size(); ++i)
        if (std::fabs(nodes[i] - p) < std::fabs(nodes[best] - p)) best = i;
    return best;
}

}  // namespace

Stencil1 linear_stencil(const Axis& a, double p, bool& clamped) {
    if (a.n == 1) return single(0);
    if (p < a.lo) {
        clamped = true;
        p = a.lo;
    } else if (p > a.hi) {
        clamped = true;
        p = a.hi;
    }
    const double s = (p - a.lo) / a.h();
    const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(std::max(0.0, std::floor(s))), a.n - 2);
    const double frac = s - static_cast<double>(i);
    Stencil1 out;
    add_weight(out, i, 1.0 - frac);
    add_weight(out, i + 1, frac);
    return out;
}

Stencil1 cubic_stencil(const Axis& a, double p) {
    if (a.n == 1) return single(0);
    const double h = a.h();
    Stencil1 out;
    if (p <= a.lo) {
        const double r = (p - a.lo) / h;
        add_weight(out, 0, 1.0 - r);
        add_weight(out, 1, r);
        return out;
    }
    if (p >= a.hi) {
        const double r = (p - a.hi) / h;
        add_weight(out, a.n - 1, 1.0 + r);
        add_weight(out, a.n - 2, -r);
        return out;
    }
    const double s = (p - a.lo) / h;
    const std::size_t i = std::min<std::size_t>(static_cast<std::size_t>(std::floor(s)), a.n - 2);
    const double r = s - static_cast<double>(i);
    if (a.n == 2) {
        add_weight(out, 0, 1.0 - r);
        add_weight(out, 1, r);
        return out;
    }
    const double w[4] = {-r * (r - 1) * (r - 2) / 6.0, (r + 1) * (r - 1) * (r - 2) / 2.0,
                         -(r + 1) * r * (r - 2) / 2.0, (r + 1) * r * (r - 1) / 6.0};
    for (int k = 0; k < 4; ++k) {
        const long idx = static_cast<long>(i) - 1 + k;
        if (idx < 0) {
            add_weight(out, 0, 2.0 * w[k]);
            add_weight(out, 1, -w[k]);
        } else if (idx >= static_cast<long>(a.n)) {
            add_weight(out, a.n - 1, 2.0 * w[k]);
            add_weight(out, a.n - 2, -w[k]);
        } else {
            add_weight(out, static_cast<std::size_t>(idx), w[k]);
        }
    }
    return out;
}

Stencil1 node_cubic_stencil(const std::vector<double>& nodes, double p) {
    const std::size_t n = nodes.size();
    if (n == 1) return single(0);
    Stencil1 out;
    if (n < 4) {
        std::size_t i = 0;
        while (i + 2 < n && nodes[i + 1] <= p) ++i;
        const double r = (p - nodes[i]) / (nodes[i + 1] - nodes[i]);
        add_weight(out, i, 1.0 - r);
        add_weight(out, i + 1, r);
        return out;
    }
    const auto upper = std::upper_bound(nodes.begin(), nodes.end(), p);
    long j = static_cast<long>(upper - nodes.begin()) - 1;
    j = std::clamp<long>(j, 1, static_cast<long>(n) - 3);
    const std::size_t first = static_cast<std::size_t>(j - 1);
    double w[4];
    lagrange4(nodes.data() + first, p, w);
    for (std::size_t k = 0; k < 4; ++k) add_weight(out, first + k, w[k]);
    return out;
}

std::vector<double> frozen_mesh(double knot_time) {
    const auto& rule = gauss_hermite(kHermiteNodes);
    std::vector<double> out(rule.nodes);
    const double scale = std::sqrt(knot_time);
    for (double& v : out) v *= scale;
    return out;
}

std::size_t instance_index(const std::vector<std::size_t>& digits) {
    std::size_t idx = 0;
    for (std::size_t dgt : digits) idx = idx * kHermiteNodes + dgt;
    return idx;
}

std::size_t IntervalBlock::instances() const noexcept {
    std::size_t count = 1;
    for (const auto& nodes : frozen_nodes) count *= nodes.size();
    return count;
}

std::size_t ValueField::node_count() const noexcept {
    std::size_t count = 1;
    for (const auto& a : axes) count *= a.n;
    return count;
}

std::size_t ValueField::flat_index(std::span<const std::size_t> idx) const noexcept {
    std::size_t flat = 0;
    for (std::size_t k = 0; k < axes.size(); ++k) flat = flat * axes[k].n + idx[k];
    return flat;
}

void ValueField::unflatten(std::size_t flat, std::size_t* idx) const noexcept {
    for (std::size_t k = axes.size(); k-- > 0;) {
        idx[k] = flat % axes[k].n;
        flat /= axes[k].n;
    }
}

std::size_t ValueField::interval_of(double t) const noexcept {
    std::size_t i = 0;
    while (i + 1 < intervals.size() && t >= knots[i + 1]) ++i;
    return i;
}

FieldSample ValueField::eval(double t, std::span<const double> x, const WienerEnv& w) const {
    return eval_block(&IntervalBlock::values, t, x, w);
}

FieldSample ValueField::eval_dy(double t, std::span<const double> x, const WienerEnv& w) const {
    if (!has_y) return {};
    return eval_block(&IntervalBlock::dy, t, x, w);
}

FieldSample ValueField::eval_block(const std::vector<double> IntervalBlock::*data, double t,
                                   std::span<const double> x, const WienerEnv& w) const {
    const IntervalBlock& block = intervals[interval_of(t)];
    const std::vector<double>& table = block.*data;
    FieldSample out;

    // spatial stencils
    const std::size_t dims_count = axes.size();
    Stencil1 spatial[3];
    for (std::size_t k = 0; k < dims_count; ++k) {
        const double p = k < static_cast<std::size_t>(d) ? x[k] : w.live[0];
        spatial[k] = linear_stencil(axes[k], p, out.clamped);
    }
    if (t < block.t0 - 1e-12 || t > block.t1 + 1e-12) out.clamped = true;
    const double tc = std::clamp(t, block.t0, block.t1);
    std::size_t slice = 0;
    while (slice + 2 < block.times.size() && block.times[slice + 1] <= tc) ++slice;
    double tw = 0.0;
    if (block.times.size() > 1) tw = (tc - block.times[slice]) / (block.times[slice + 1] - block.times[slice]);
    tw = std::clamp(tw, 0.0, 1.0);

    // frozen stencils
    std::vector<Stencil1> frozen(block.frozen.size());
    for (std::size_t f = 0; f < block.frozen.size(); ++f) {
        const double value = w.knots[static_cast<std::size_t>(block.frozen[f] - 1) * static_cast<std::size_t>(m0)];
        frozen[f] = node_cubic_stencil(block.frozen_nodes[f], value);
    }

    const std::size_t nodes = node_count();
    const std::size_t slices = block.times.size();
    std::vector<std::size_t> digit(frozen.size(), 0);
    for (;;) {
        double fw = 1.0;
        std::size_t inst = 0;
        for (std::size_t f = 0; f < frozen.size(); ++f) {
            fw *= frozen[f].weight[digit[f]];
            inst = inst * block.frozen_nodes[f].size() + frozen[f].index[digit[f]];
        }
        for (int s = 0; s < 2; ++s) {
            const double sw = s == 0 ? 1.0 - tw : tw;
            if (sw == 0.0) continue;
            const double* base = table.data() + (inst * slices + slice + static_cast<std::size_t>(s)) * nodes;
            std::size_t sd[3] = {0, 0, 0};
            for (;;) {
                double weight = fw * sw;
                std::size_t flat = 0;
                for (std::size_t k = 0; k < dims_count; ++k) {
                    weight *= spatial[k].weight[sd[k]];
                    flat = flat * axes[k].n + spatial[k].index[sd[k]];
                }
                out.value += weight * base[flat];
                std::size_t k = dims_count;
                while (k-- > 0) {
                    if (++sd[k] < spatial[k].count) break;
                    sd[k] = 0;
                }
                if (k == static_cast<std::size_t>(-1)) break;
            }
        }
        std::size_t f = frozen.size();
        while (f-- > 0) {
            if (++digit[f] < frozen[f].count) break;
            digit[f] = 0;
        }
        if (f == static_cast<std::size_t>(-1)) break;
    }
    return out;
}

std::size_t ValueField::policy_index(double t, std::span<const double> x, const WienerEnv& w) const {
    const IntervalBlock& block = intervals[interval_of(t)];
    std::size_t slice = 0;
    while (slice + 2 < block.times.size() && block.times[slice + 1] <= t + 1e-12) ++slice;
    std::size_t inst = 0;
    for (std::size_t f = 0; f < block.frozen.size(); ++f) {
        const double value = w.knots[static_cast<std::size_t>(block.frozen[f] - 1) * static_cast<std::size_t>(m0)];
        inst = inst * block.frozen_nodes[f].size() + nearest_of(block.frozen_nodes[f], value);
    }
    std::size_t flat = 0;
    for (std::size_t k = 0; k < axes.size(); ++k) {
        const double p = k < static_cast<std::size_t>(d) ? x[k] : w.live[0];
        flat = flat * axes[k].n + nearest_node(axes[k], p);
    }
    const std::size_t idx = (inst * block.times.size() + slice) * node_count() + flat;
    return static_cast<std::size_t>(block.argmin[idx]);
}

double ValueField::gradient_bound() const {
    const std::size_t nodes = node_count();
    double bound = 0.0;
    std::vector<std::size_t> idx(axes.size());
    for (const auto& block : intervals) {
        const std::size_t planes = block.instances() * block.times.size();
        for (std::size_t plane = 0; plane < planes; ++plane) {
            const double* u = block.values.data() + plane * nodes;
            for (std::size_t flat = 0; flat < nodes; ++flat) {
                unflatten(flat, idx.data());
                double norm2 = 0.0;
                for (int k = 0; k < d; ++k) {
                    const Axis& a = axes[static_cast<std::size_t>(k)];
                    if (a.n < 2) continue;
                    std::size_t stride = 1;
                    for (std::size_t q = static_cast<std::size_t>(k) + 1; q < axes.size(); ++q) stride *= axes[q].n;
                    const std::size_t i = idx[static_cast<std::size_t>(k)];
                    const std::size_t lo = i == 0 ? 0 : i - 1;
                    const std::size_t hi = i + 1 == a.n ? i : i + 1;
                    const double slope = (u[flat + (hi - i) * stride] - u[flat - (i - lo) * stride]) /
                                         (static_cast<double>(hi - lo) * a.h());
                    norm2 += slope * slope;
                }
                bound = std::max(bound, std::sqrt(norm2));
            }
        }
    }
    return bound;
}

void write_field(const ValueField& f, std::ostream& out) {
    using namespace binio;
    put_magic(out, "SHJBFLD1");
    put_u64(out, static_cast<std::uint64_t>(f.d));
    put_u64(out, static_cast<std::uint64_t>(f.m0));
    put_u64(out, static_cast<std::uint64_t>(f.m1));
    put_u64(out, f.has_y ? 1 : 0);
    put_u64(out, f.producer.size());
    out.write(f.producer.data(), static_cast<std::streamsize>(f.producer.size()));
    put_u64(out, f.axes.size());
    for (const auto& a : f.axes) {
        put_f64(out, a.lo);
        put_f64(out, a.hi);
        put_u64(out, a.n);
    }
    put_u64(out, f.knots.size());
    for (double k : f.knots) put_f64(out, k);
    const ControlLattice& lat = f.lattice;
    put_u64(out, static_cast<std::uint64_t>(lat.dim()));
    put_u64(out, static_cast<std::uint64_t>(lat.level()));
    put_u64(out, lat.is_box() ? 1 : 0);
    put_u64(out, lat.size());
    if (lat.is_box()) {
        for (double v : lat.lo()) put_f64(out, v);
        for (double v : lat.hi()) put_f64(out, v);
    } else {
        for (std::size_t i = 0; i < lat.size(); ++i)
            for (int k = 0; k < lat.dim(); ++k) put_f64(out, lat.point(i)[k]);
    }
    put_u64(out, f.intervals.size());
    for (const auto& b : f.intervals) {
        put_f64(out, b.t0);
        put_f64(out, b.t1);
        put_u64(out, b.steps);
        put_u64(out, b.frozen.size());
        for (std::size_t q = 0; q < b.frozen.size(); ++q) {
            put_u64(out, static_cast<std::uint64_t>(b.frozen[q]));
            put_u64(out, b.frozen_nodes[q].size());
            for (double v : b.frozen_nodes[q]) put_f64(out, v);
        }
        put_u64(out, b.times.size());
        for (double v : b.times) put_f64(out, v);
        put_u64(out, b.values.size());
        for (double v : b.values) put_f64(out, v);
        for (std::int32_t a : b.argmin) put_u64(out, static_cast<std::uint64_t>(a));
        put_u64(out, b.dy.size());
        for (double v : b.dy) put_f64(out, v);
    }
}

ValueField read_field(std::istream& in) {
    using namespace binio;
    expect_magic(in, "SHJBFLD1");
    ValueField f;
    f.d = static_cast<int>(get_u64(in));
    f.m0 = static_cast<int>(get_u64(in));
    f.m1 = static_cast<int>(get_u64(in));
    f.has_y = get_u64(in) != 0;
    f.producer.resize(get_u64(in));
    if (!in.read(f.producer.data(), static_cast<std::streamsize>(f.producer.size())))
        throw std::runtime_error("truncated binary input");
    f.axes.resize(get_u64(in));
    for (auto& a : f.axes) {
        a.lo = get_f64(in);
        a.hi = get_f64(in);
        a.n = get_u64(in);
    }
    f.knots.resize(get_u64(in));
    for (double& k : f.knots) k = get_f64(in);
    const int dim = static_cast<int>(get_u64(in));
    const int level = static_cast<int>(get_u64(in));
    const bool box = get_u64(in) != 0;
    const std::size_t count = get_u64(in);
    if (box) {
        std::vector<double> lo(static_cast<std::size_t>(dim)), hi(static_cast<std::size_t>(dim));
        for (double& v : lo) v = get_f64(in);
        for (double& v : hi) v = get_f64(in);
        f.lattice = ControlLattice::from_box(lo, hi, level);
    } else {
        std::vector<std::vector<double>> pts(count, std::vector<double>(static_cast<std::size_t>(dim)));
        for (auto& p : pts)
            for (double& v : p) v = get_f64(in);
        f.lattice = ControlLattice::from_points(pts);
    }
    f.intervals.resize(get_u64(in));
    for (auto& b : f.intervals) {
        b.t0 = get_f64(in);
        b.t1 = get_f64(in);
        b.steps = get_u64(in);
        const std::size_t frozen = get_u64(in);
        b.frozen.resize(frozen);
        b.frozen_nodes.resize(frozen);
        for (std::size_t q = 0; q < frozen; ++q) {
            b.frozen[q] = static_cast<int>(get_u64(in));
            b.frozen_nodes[q].resize(get_u64(in));
            for (double& v : b.frozen_nodes[q]) v = get_f64(in);
        }
        b.times.resize(get_u64(in));
        for (double& v : b.times) v = get_f64(in);
        b.values.resize(get_u64(in));
        for (double& v : b.values) v = get_f64(in);
        b.argmin.resize(b.values.size());
        for (auto& a : b.argmin) a = static_cast<std::int32_t>(get_u64(in));
        b.dy.resize(get_u64(in));
        for (double& v : b.dy) v = get_f64(in);
    }
    return f;
}

}  // namespace shjb
