#include "conserve/autodiff.hpp"

#include <cmath>
#include <stdexcept>

#include "conserve/errors.hpp"

namespace conserve {

ParamVector::ParamVector(std::vector<double> values, std::vector<std::string> names)
    : values_(std::move(values)), names_(std::move(names)) {
    if (!names_.empty() && names_.size() != values_.size())
        throw DomainError("ParamVector: name count does not match value count");
}

const std::string& ParamVector::name(std::size_t i) const {
    static const std::string empty;
    return i < names_.size() ? names_[i] : empty;
}

int ParamVector::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
        if (names_[i] == name) return static_cast<int>(i);
    return -1;
}

int Tape::push(Node n) {
    nodes_.push_back(n);
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::check(int id) const {
    if (id < 0 || id >= size()) throw DomainError("Tape: operand id out of range");
}

int Tape::leaf(int leaf_index) {
    if (leaf_index < 0) throw DomainError("Tape: negative leaf index");
    if (leaf_index >= static_cast<int>(leaf_to_node_.size()))
        leaf_to_node_.resize(static_cast<std::size_t>(leaf_index) + 1, -1);
    int& slot = leaf_to_node_[static_cast<std::size_t>(leaf_index)];
    if (slot < 0) slot = push({Op::Leaf, leaf_index});
    if (leaf_index >= num_leaves_) num_leaves_ = leaf_index + 1;
    return slot;
}

int Tape::leaf_node(int leaf_index) const {
    if (leaf_index < 0 || leaf_index >= static_cast<int>(leaf_to_node_.size())) return -1;
    return leaf_to_node_[static_cast<std::size_t>(leaf_index)];
}

int Tape::constant(double v) { return push({Op::Const, -1, -1, v}); }
int Tape::add(int a, int b) { check(a); check(b); return push({Op::Add, a, b}); }
int Tape::sub(int a, int b) { check(a); check(b); return push({Op::Sub, a, b}); }
int Tape::mul(int a, int b) { check(a); check(b); return push({Op::Mul, a, b}); }
int Tape::div(int a, int b) { check(a); check(b); return push({Op::Div, a, b}); }
int Tape::sin(int a) { check(a); return push({Op::Sin, a}); }
int Tape::cos(int a) { check(a); return push({Op::Cos, a}); }
int Tape::sq(int a) { check(a); return push({Op::Sq, a}); }
int Tape::tanh(int a) { check(a); return push({Op::Tanh, a}); }

int Tape::dot(std::span<const DotTerm> terms) {
    for (const auto& t : terms) {
        check(t.a);
        if (t.b >= 0) check(t.b);
    }
    Node n{Op::Dot};
    n.dot_begin = static_cast<std::int32_t>(pool_.size());
    n.dot_len = static_cast<std::int32_t>(terms.size());
    pool_.insert(pool_.end(), terms.begin(), terms.end());
    return push(n);
}

std::vector<int> Tape::gradient_nodes(int output, std::span<const int> wrt_leaves) {
    std::vector<int> wrt_nodes;
    wrt_nodes.reserve(wrt_leaves.size());
    for (int li : wrt_leaves) wrt_nodes.push_back(leaf_node(li));
    return gradient_nodes_wrt(output, wrt_nodes);
}

std::vector<int> Tape::gradient_nodes_wrt(int output, std::span<const int> wrt_nodes) {
    check(output);
    // Pending adjoint contributions per node, populated from consumers down.
    std::vector<std::vector<DotTerm>> contrib(static_cast<std::size_t>(output) + 1);
    std::vector<int> adj_node(static_cast<std::size_t>(output) + 1, -1);
    const int one = constant(1.0);
    contrib[static_cast<std::size_t>(output)].push_back({one, -1, 1.0});

    for (int i = output; i >= 0; --i) {
        auto& c = contrib[static_cast<std::size_t>(i)];
        if (c.empty()) continue;
        int ai;
        if (c.size() == 1 && c[0].b < 0 && c[0].w == 1.0) ai = c[0].a;
        else ai = dot(c);
        adj_node[static_cast<std::size_t>(i)] = ai;
        c.clear();
        c.shrink_to_fit();

        const Node n = nodes_[static_cast<std::size_t>(i)];
        auto push_term = [&](int target, DotTerm t) {
            contrib[static_cast<std::size_t>(target)].push_back(t);
        };
        switch (n.op) {
            case Op::Leaf:
            case Op::Const:
                break;
            case Op::Add:
                push_term(n.a, {ai, -1, 1.0});
                push_term(n.b, {ai, -1, 1.0});
                break;
            case Op::Sub:
                push_term(n.a, {ai, -1, 1.0});
                push_term(n.b, {ai, -1, -1.0});
                break;
            case Op::Mul:
                push_term(n.a, {ai, n.b, 1.0});
                push_term(n.b, {ai, n.a, 1.0});
                break;
            case Op::Div: {
                // d(a/b) = da/b - (a/b) db/b
                int r = div(one, n.b);
                int s = mul(i, r);
                push_term(n.a, {ai, r, 1.0});
                push_term(n.b, {ai, s, -1.0});
                break;
            }
            case Op::Sin: {
                int cosa = cos(n.a);
                push_term(n.a, {ai, cosa, 1.0});
                break;
            }
            case Op::Cos: {
                int sina = sin(n.a);
                push_term(n.a, {ai, sina, -1.0});
                break;
            }
            case Op::Sq:
                push_term(n.a, {ai, n.a, 2.0});
                break;
            case Op::Tanh: {
                // d tanh = 1 - tanh^2, with tanh already on tape as node i.
                int t2 = sq(i);
                push_term(n.a, {ai, -1, 1.0});
                push_term(n.a, {ai, t2, -1.0});
                break;
            }
            case Op::Dot: {
                for (std::int32_t k = 0; k < n.dot_len; ++k) {
                    const DotTerm t = pool_[static_cast<std::size_t>(n.dot_begin + k)];
                    push_term(t.a, {ai, t.b, t.w});
                    if (t.b >= 0) push_term(t.b, {ai, t.a, t.w});
                }
                break;
            }
        }
    }

    int zero = -1;
    std::vector<int> out;
    out.reserve(wrt_nodes.size());
    for (int node : wrt_nodes) {
        int ai = node >= 0 && node <= output ? adj_node[static_cast<std::size_t>(node)] : -1;
        if (ai < 0) {
            if (zero < 0) zero = constant(0.0);
            ai = zero;
        }
        out.push_back(ai);
    }
    return out;
}

EvalResult Evaluator::forward(std::span<const double> leaves, int out) {
    const auto& nodes = tape_->nodes();
    const auto& pool = tape_->pool();
    if (out < 0 || out >= static_cast<int>(nodes.size()))
        throw DomainError("Evaluator: output id out of range");
    val_.resize(nodes.size());
    bool ok = true;
    for (int i = 0; i <= out; ++i) {
        const Node& n = nodes[static_cast<std::size_t>(i)];
        double v;
        switch (n.op) {
            case Op::Leaf:
                if (n.a >= static_cast<int>(leaves.size()))
                    throw DomainError("Evaluator: leaf index out of range");
                v = leaves[static_cast<std::size_t>(n.a)];
                break;
            case Op::Const: v = n.imm; break;
            case Op::Add: v = val_[(size_t)n.a] + val_[(size_t)n.b]; break;
            case Op::Sub: v = val_[(size_t)n.a] - val_[(size_t)n.b]; break;
            case Op::Mul: v = val_[(size_t)n.a] * val_[(size_t)n.b]; break;
            case Op::Div: v = val_[(size_t)n.a] / val_[(size_t)n.b]; break;
            case Op::Sin: v = std::sin(val_[(size_t)n.a]); break;
            case Op::Cos: v = std::cos(val_[(size_t)n.a]); break;
            case Op::Sq: { double x = val_[(size_t)n.a]; v = x * x; break; }
            case Op::Tanh: v = std::tanh(val_[(size_t)n.a]); break;
            case Op::Dot: {
                double acc = 0.0;
                for (std::int32_t k = 0; k < n.dot_len; ++k) {
                    const DotTerm& t = pool[static_cast<std::size_t>(n.dot_begin + k)];
                    double prod = t.w * val_[(size_t)t.a];
                    if (t.b >= 0) prod *= val_[(size_t)t.b];
                    acc += prod;
                }
                v = acc;
                break;
            }
            default: v = 0.0; break;
        }
        ok &= std::isfinite(v);
        val_[static_cast<std::size_t>(i)] = v;
    }
    fwd_limit_ = out;
    fwd_ok_ = ok;
    return {val_[static_cast<std::size_t>(out)], ok};
}

bool Evaluator::reverse(int out, std::span<const int> wrt_leaves, std::span<double> grad,
                        double seed) {
    if (out > fwd_limit_) throw DomainError("Evaluator: reverse before forward");
    const auto& nodes = tape_->nodes();
    const auto& pool = tape_->pool();
    adj_.assign(static_cast<std::size_t>(out) + 1, 0.0);
    adj_[static_cast<std::size_t>(out)] = seed;
    for (int i = out; i >= 0; --i) {
        double a = adj_[static_cast<std::size_t>(i)];
        if (a == 0.0) continue;
        const Node& n = nodes[static_cast<std::size_t>(i)];
        switch (n.op) {
            case Op::Leaf:
            case Op::Const: break;
            case Op::Add:
                adj_[(size_t)n.a] += a;
                adj_[(size_t)n.b] += a;
                break;
            case Op::Sub:
                adj_[(size_t)n.a] += a;
                adj_[(size_t)n.b] -= a;
                break;
            case Op::Mul:
                adj_[(size_t)n.a] += a * val_[(size_t)n.b];
                adj_[(size_t)n.b] += a * val_[(size_t)n.a];
                break;
            case Op::Div: {
                double vb = val_[(size_t)n.b];
                adj_[(size_t)n.a] += a / vb;
                adj_[(size_t)n.b] -= a * val_[(size_t)i] / vb;
                break;
            }
            case Op::Sin: adj_[(size_t)n.a] += a * std::cos(val_[(size_t)n.a]); break;
            case Op::Cos: adj_[(size_t)n.a] -= a * std::sin(val_[(size_t)n.a]); break;
            case Op::Sq: adj_[(size_t)n.a] += a * 2.0 * val_[(size_t)n.a]; break;
            case Op::Tanh: {
                double t = val_[(size_t)i];
                adj_[(size_t)n.a] += a * (1.0 - t * t);
                break;
            }
            case Op::Dot: {
                for (std::int32_t k = 0; k < n.dot_len; ++k) {
                    const DotTerm& t = pool[static_cast<std::size_t>(n.dot_begin + k)];
                    if (t.b >= 0) {
                        adj_[(size_t)t.a] += a * t.w * val_[(size_t)t.b];
                        adj_[(size_t)t.b] += a * t.w * val_[(size_t)t.a];
                    } else {
                        adj_[(size_t)t.a] += a * t.w;
                    }
                }
                break;
            }
        }
    }
    bool ok = fwd_ok_;
    for (std::size_t j = 0; j < wrt_leaves.size(); ++j) {
        int node = tape_->leaf_node(wrt_leaves[j]);
        double g = node >= 0 && node <= out ? adj_[static_cast<std::size_t>(node)] : 0.0;
        ok &= std::isfinite(g);
        grad[j] = g;
    }
    return ok;
}

EvalResult evaluate(const Tape& tape, std::span<const double> leaves, int output) {
    Evaluator ev(tape);
    return ev.forward(leaves, output);
}

std::vector<double> gradient(const Tape& tape, std::span<const double> leaves, int output,
                             std::span<const int> wrt_leaves, bool* ok) {
    Evaluator ev(tape);
    EvalResult f = ev.forward(leaves, output);
    std::vector<double> g(wrt_leaves.size(), 0.0);
    bool rok = ev.reverse(output, wrt_leaves, g) && f.ok;
    if (ok) *ok = rok;
    return g;
}

} // namespace conserve
