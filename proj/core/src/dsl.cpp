#include "conserve/dsl.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <limits>
#include <unordered_set>

#include "conserve/errors.hpp"

namespace conserve {

namespace {

// Exponent alphabet is descending so that larger exponents sort first; this
// fixes which member of a functionally equivalent candidate family wins the
// lexicographic tie-break.
constexpr const char* kExpAlphabet = "0123456789abcdefg"; // index 8 - e, e in [-8, 8]

char exp_char(int e) {
    if (e < -8 || e > 8) throw DomainError("unit exponent out of range");
    return kExpAlphabet[8 - e];
}

const char* op_key_token(Op op) {
    switch (op) {
        case Op::Add: return "+";
        case Op::Sub: return "-";
        case Op::Mul: return "*";
        case Op::Div: return "/";
        case Op::Sin: return "sin";
        case Op::Cos: return "cos";
        case Op::Sq: return "sq";
        default: throw DomainError("not a formula op");
    }
}

const char* op_name(Op op) {
    switch (op) {
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Sin: return "sin";
        case Op::Cos: return "cos";
        case Op::Sq: return "sq";
        default: throw DomainError("not a formula op");
    }
}

bool is_unary(Op op) { return op == Op::Sin || op == Op::Cos || op == Op::Sq; }
bool is_commutative(Op op) { return op == Op::Add || op == Op::Mul; }

} // namespace

int Unit::max_abs() const { return std::max(std::abs(int(e[0])), std::abs(int(e[1]))); }

std::string Unit::str() const {
    if (dimensionless()) return "1";
    std::string s;
    const char* names[2] = {"q", "p"};
    for (int d = 0; d < 2; ++d) {
        if (e[d] == 0) continue;
        if (!s.empty()) s += ' ';
        s += names[d];
        s += '^';
        s += std::to_string(int(e[d]));
    }
    return s;
}

int Expr::n_params() const {
    int n = 0;
    for (const auto& nd : nodes) n += nd.kind == ExprKind::Param;
    return n;
}

int Expr::depth() const {
    std::vector<int> d(nodes.size(), 1);
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        const auto& nd = nodes[i];
        if (nd.kind != ExprKind::Operation) continue;
        int dd = d[static_cast<std::size_t>(nd.a)];
        if (nd.b >= 0) dd = std::max(dd, d[static_cast<std::size_t>(nd.b)]);
        d[i] = dd + 1;
    }
    return d.back();
}

std::vector<Unit> Expr::param_units() const {
    std::vector<Unit> out;
    std::function<void(int)> walk = [&](int i) {
        const auto& nd = nodes[static_cast<std::size_t>(i)];
        if (nd.kind == ExprKind::Param) out.push_back(nd.unit);
        if (nd.kind == ExprKind::Operation) {
            walk(nd.a);
            if (nd.b >= 0) walk(nd.b);
        }
    };
    if (!nodes.empty()) walk(root());
    return out;
}

Expr make_input(int index, Unit unit) {
    Expr e;
    ExprNode n;
    n.kind = ExprKind::Input;
    n.input = static_cast<std::int8_t>(index);
    n.unit = unit;
    e.nodes.push_back(n);
    return e;
}

Expr make_param(Unit unit) {
    Expr e;
    ExprNode n;
    n.kind = ExprKind::Param;
    n.unit = unit;
    e.nodes.push_back(n);
    return e;
}

Expr make_unary(Op op, const Expr& a) {
    if (!is_unary(op)) throw DomainError("make_unary: binary op");
    Expr e = a;
    ExprNode n;
    n.kind = ExprKind::Operation;
    n.op = op;
    n.a = static_cast<std::int16_t>(a.root());
    if (op == Op::Sq) n.unit = a.unit().squared();
    e.nodes.push_back(n);
    return e;
}

Expr make_binary(Op op, const Expr& a, const Expr& b) {
    if (is_unary(op)) throw DomainError("make_binary: unary op");
    Expr e = a;
    int shift = a.size();
    for (auto nd : b.nodes) {
        if (nd.kind == ExprKind::Operation) {
            nd.a = static_cast<std::int16_t>(nd.a + shift);
            if (nd.b >= 0) nd.b = static_cast<std::int16_t>(nd.b + shift);
        }
        e.nodes.push_back(nd);
    }
    ExprNode n;
    n.kind = ExprKind::Operation;
    n.op = op;
    n.a = static_cast<std::int16_t>(a.root());
    n.b = static_cast<std::int16_t>(shift + b.root());
    if (op == Op::Add || op == Op::Sub) n.unit = a.unit();
    else if (op == Op::Mul) n.unit = a.unit().times(b.unit());
    else n.unit = a.unit().over(b.unit());
    e.nodes.push_back(n);
    return e;
}

ProblemUnits pendulum_units(int lo, int hi) {
    ProblemUnits u;
    u.input_units = {Unit{{0, 0}}, Unit{{0, 1}}};
    for (int ep = lo; ep <= hi; ++ep)
        u.param_units.push_back(Unit{{0, static_cast<std::int8_t>(ep)}});
    return u;
}

ProblemUnits spring_units(int lo, int hi) {
    ProblemUnits u;
    u.input_units = {Unit{{1, 0}}, Unit{{0, 1}}};
    for (int eq = lo; eq <= hi; ++eq)
        for (int ep = lo; ep <= hi; ++ep)
            u.param_units.push_back(
                Unit{{static_cast<std::int8_t>(eq), static_cast<std::int8_t>(ep)}});
    return u;
}

ProblemUnits units_for(SystemKind kind, int lo, int hi) {
    return kind == SystemKind::IdealSpring ? spring_units(lo, hi) : pendulum_units(lo, hi);
}

namespace {

std::string serialize_node(const Expr& e, int i);

std::string subtree_text(const Expr& e, int i) { return serialize_node(e, i); }

} // namespace

std::optional<Unit> check_units(Expr& e, std::span<const Unit> input_units,
                                std::string* error) {
    auto fail = [&](int i, const std::string& why) -> std::optional<Unit> {
        if (error) *error = why + " at " + subtree_text(e, i);
        return std::nullopt;
    };
    std::vector<Unit> u(e.nodes.size());
    for (std::size_t i = 0; i < e.nodes.size(); ++i) {
        const auto& nd = e.nodes[i];
        switch (nd.kind) {
            case ExprKind::Input:
                if (nd.input < 0 || nd.input >= static_cast<int>(input_units.size()))
                    return fail(static_cast<int>(i), "input index out of range");
                u[i] = input_units[static_cast<std::size_t>(nd.input)];
                break;
            case ExprKind::Param:
                u[i] = nd.unit;
                break;
            case ExprKind::Operation: {
                Unit ua = u[static_cast<std::size_t>(nd.a)];
                Unit ub = nd.b >= 0 ? u[static_cast<std::size_t>(nd.b)] : Unit{};
                switch (nd.op) {
                    case Op::Add:
                    case Op::Sub:
                        if (!(ua == ub))
                            return fail(static_cast<int>(i), "unit mismatch " + ua.str() +
                                                                 " vs " + ub.str());
                        u[i] = ua;
                        break;
                    case Op::Mul: u[i] = ua.times(ub); break;
                    case Op::Div: u[i] = ua.over(ub); break;
                    case Op::Sin:
                    case Op::Cos:
                        if (!ua.dimensionless())
                            return fail(static_cast<int>(i),
                                        "trig argument must be dimensionless, got " + ua.str());
                        u[i] = Unit{};
                        break;
                    case Op::Sq: u[i] = ua.squared(); break;
                    default: return fail(static_cast<int>(i), "unsupported op");
                }
                break;
            }
        }
    }
    for (std::size_t i = 0; i < e.nodes.size(); ++i)
        if (e.nodes[i].kind != ExprKind::Param) e.nodes[i].unit = u[i];
    return u.back();
}

namespace {

std::string key_node(const Expr& e, int i) {
    const auto& nd = e.nodes[static_cast<std::size_t>(i)];
    switch (nd.kind) {
        case ExprKind::Input: return "(in" + std::to_string(int(nd.input)) + ")";
        case ExprKind::Param: {
            std::string s = "(par";
            s += exp_char(nd.unit.e[0]);
            s += exp_char(nd.unit.e[1]);
            s += ')';
            return s;
        }
        case ExprKind::Operation: {
            std::string tok = op_key_token(nd.op);
            if (is_unary(nd.op)) return "(" + tok + key_node(e, nd.a) + ")";
            std::string l = key_node(e, nd.a), r = key_node(e, nd.b);
            if (is_commutative(nd.op) && r < l) std::swap(l, r);
            return "(" + tok + l + r + ")";
        }
    }
    return {};
}

std::string serialize_node(const Expr& e, int i) {
    // Param slots are numbered by traversal order; count them on the way.
    std::function<std::string(int, int&)> walk = [&](int j, int& slot) -> std::string {
        const auto& nd = e.nodes[static_cast<std::size_t>(j)];
        switch (nd.kind) {
            case ExprKind::Input: return "(in " + std::to_string(int(nd.input)) + ")";
            case ExprKind::Param: return "(par P" + std::to_string(slot++) + ")";
            case ExprKind::Operation: {
                std::string s = "(";
                s += op_name(nd.op);
                s += ' ';
                s += walk(nd.a, slot);
                if (nd.b >= 0) {
                    s += ' ';
                    s += walk(nd.b, slot);
                }
                s += ')';
                return s;
            }
        }
        return {};
    };
    int slot = 0;
    return walk(i, slot);
}

} // namespace

std::string canonical_key(const Expr& e) { return key_node(e, e.root()); }

std::string serialize(const Expr& e) { return serialize_node(e, e.root()); }

namespace {

struct SexprParser {
    const std::string& s;
    std::size_t pos = 0;

    void skip_ws() {
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    }
    char peek() {
        skip_ws();
        if (pos >= s.size()) throw IoError("expression text ended early");
        return s[pos];
    }
    void expect(char c) {
        if (peek() != c) throw IoError(std::string("expected '") + c + "' in expression text");
        ++pos;
    }
    std::string atom() {
        skip_ws();
        std::size_t b = pos;
        while (pos < s.size() && s[pos] != '(' && s[pos] != ')' &&
               !std::isspace(static_cast<unsigned char>(s[pos])))
            ++pos;
        if (b == pos) throw IoError("expected atom in expression text");
        return s.substr(b, pos - b);
    }
};

Expr parse_node(SexprParser& p, std::span<const Unit> param_units, int& slot) {
    p.expect('(');
    std::string head = p.atom();
    Expr result;
    if (head == "in") {
        int idx = std::stoi(p.atom());
        result = make_input(idx, Unit{});
    } else if (head == "par") {
        std::string token = p.atom();
        if (token.empty() || token[0] != 'P') throw IoError("bad param token: " + token);
        Unit u{};
        if (slot < static_cast<int>(param_units.size()))
            u = param_units[static_cast<std::size_t>(slot)];
        ++slot;
        result = make_param(u);
    } else {
        Op op;
        if (head == "add") op = Op::Add;
        else if (head == "sub") op = Op::Sub;
        else if (head == "mul") op = Op::Mul;
        else if (head == "div") op = Op::Div;
        else if (head == "sin") op = Op::Sin;
        else if (head == "cos") op = Op::Cos;
        else if (head == "sq") op = Op::Sq;
        else throw IoError("unknown operation: " + head);
        Expr a = parse_node(p, param_units, slot);
        if (is_unary(op)) {
            result = make_unary(op, a);
        } else {
            Expr b = parse_node(p, param_units, slot);
            result = make_binary(op, a, b);
        }
    }
    p.expect(')');
    return result;
}

} // namespace

Expr parse_expr(const std::string& text, std::span<const Unit> param_units) {
    SexprParser p{text};
    int slot = 0;
    Expr e = parse_node(p, param_units, slot);
    p.skip_ws();
    if (p.pos != text.size()) throw IoError("trailing characters in expression text");
    return e;
}

std::vector<Expr> enumerate_exprs(const EnumConfig& cfg, const ProblemUnits& units) {
    if (cfg.max_depth < 1 || cfg.max_nodes < 1) throw DomainError("enumerate: empty size bounds");

    struct Meta {
        Unit unit;
        std::int8_t depth;
        bool has_input;
        std::int8_t n_params;
    };
    std::vector<std::vector<Expr>> exprs(static_cast<std::size_t>(cfg.max_nodes) + 1);
    std::vector<std::vector<Meta>> metas(exprs.size());
    std::vector<std::vector<std::string>> keys(exprs.size());
    std::unordered_set<std::string> seen;
    seen.reserve(1u << 20);

    auto store = [&](int size, Expr e, Meta m, std::string key) {
        if (!seen.insert(key).second) return;
        exprs[static_cast<std::size_t>(size)].push_back(std::move(e));
        metas[static_cast<std::size_t>(size)].push_back(m);
        keys[static_cast<std::size_t>(size)].push_back(std::move(key));
    };

    for (std::size_t i = 0; i < units.input_units.size(); ++i) {
        Expr e = make_input(static_cast<int>(i), units.input_units[i]);
        std::string k = canonical_key(e);
        store(1, std::move(e), {units.input_units[i], 1, true, 0}, std::move(k));
    }
    for (const Unit& u : units.param_units) {
        Expr e = make_param(u);
        std::string k = canonical_key(e);
        store(1, std::move(e), {u, 1, false, 1}, std::move(k));
    }

    for (int n = 2; n <= cfg.max_nodes; ++n) {
        // Unary layer over size n-1.
        {
            const auto& ce = exprs[static_cast<std::size_t>(n - 1)];
            const auto& cm = metas[static_cast<std::size_t>(n - 1)];
            const auto& ck = keys[static_cast<std::size_t>(n - 1)];
            for (std::size_t i = 0; i < ce.size(); ++i) {
                const Meta& m = cm[i];
                if (!m.has_input) continue; // param-only subtree: exact constant
                if (m.depth + 1 > cfg.max_depth) continue;
                if (m.unit.dimensionless()) {
                    for (Op op : {Op::Sin, Op::Cos}) {
                        std::string k = "(" + std::string(op_key_token(op)) + ck[i] + ")";
                        if (seen.count(k)) continue;
                        store(n, make_unary(op, ce[i]),
                              {Unit{}, static_cast<std::int8_t>(m.depth + 1), true, m.n_params},
                              std::move(k));
                    }
                }
                Unit squnit = m.unit.squared();
                if (squnit.max_abs() <= cfg.unit_abs_cap) {
                    std::string k = "(sq" + ck[i] + ")";
                    if (!seen.count(k))
                        store(n, make_unary(Op::Sq, ce[i]),
                              {squnit, static_cast<std::int8_t>(m.depth + 1), true, m.n_params},
                              std::move(k));
                }
            }
        }
        // Binary layers over size pairs (a, n-1-a).
        for (int a = 1; a <= n - 2; ++a) {
            int b = n - 1 - a;
            const auto& le = exprs[static_cast<std::size_t>(a)];
            const auto& lm = metas[static_cast<std::size_t>(a)];
            const auto& lk = keys[static_cast<std::size_t>(a)];
            const auto& re = exprs[static_cast<std::size_t>(b)];
            const auto& rm = metas[static_cast<std::size_t>(b)];
            const auto& rk = keys[static_cast<std::size_t>(b)];
            for (std::size_t li = 0; li < le.size(); ++li) {
                const Meta& l = lm[li];
                if (!l.has_input && a > 1) continue;
                for (std::size_t ri = 0; ri < re.size(); ++ri) {
                    const Meta& r = rm[ri];
                    if (!r.has_input && b > 1) continue;
                    if (!l.has_input && !r.has_input) continue;
                    int np = l.n_params + r.n_params;
                    if (np > cfg.max_params) continue;
                    int depth = std::max(l.depth, r.depth) + 1;
                    if (depth > cfg.max_depth) continue;
                    Meta m{Unit{}, static_cast<std::int8_t>(depth), true,
                           static_cast<std::int8_t>(np)};
                    for (Op op : {Op::Add, Op::Mul, Op::Sub, Op::Div}) {
                        if ((op == Op::Add || op == Op::Sub) && !(l.unit == r.unit)) continue;
                        Unit u;
                        if (op == Op::Add || op == Op::Sub) u = l.unit;
                        else if (op == Op::Mul) u = l.unit.times(r.unit);
                        else u = l.unit.over(r.unit);
                        if (u.max_abs() > cfg.unit_abs_cap) continue;
                        std::string k;
                        if (is_commutative(op)) {
                            const std::string& x = lk[li] <= rk[ri] ? lk[li] : rk[ri];
                            const std::string& y = lk[li] <= rk[ri] ? rk[ri] : lk[li];
                            k = "(" + std::string(op_key_token(op)) + x + y + ")";
                        } else {
                            k = "(" + std::string(op_key_token(op)) + lk[li] + rk[ri] + ")";
                        }
                        if (seen.count(k)) continue;
                        m.unit = u;
                        store(n, make_binary(op, le[li], re[ri]), m, std::move(k));
                    }
                }
            }
        }
    }

    std::vector<Expr> out;
    std::size_t total = 0;
    for (const auto& v : exprs) total += v.size();
    out.reserve(total);
    for (auto& v : exprs)
        for (auto& e : v) out.push_back(std::move(e));
    return out;
}

CompiledExpr compile_expr(const Expr& e, int n_inputs) {
    CompiledExpr ce;
    ce.n_inputs = n_inputs;
    // Param slots follow left-to-right traversal order.
    std::vector<int> slot_of(e.nodes.size(), -1);
    int slots = 0;
    std::function<void(int)> assign = [&](int i) {
        const auto& nd = e.nodes[static_cast<std::size_t>(i)];
        if (nd.kind == ExprKind::Param) slot_of[static_cast<std::size_t>(i)] = slots++;
        if (nd.kind == ExprKind::Operation) {
            assign(nd.a);
            if (nd.b >= 0) assign(nd.b);
        }
    };
    if (e.nodes.empty()) throw DomainError("compile_expr: empty expression");
    assign(e.root());
    ce.n_params = slots;

    std::vector<int> id(e.nodes.size(), -1);
    for (std::size_t i = 0; i < e.nodes.size(); ++i) {
        const auto& nd = e.nodes[i];
        switch (nd.kind) {
            case ExprKind::Param:
                id[i] = ce.tape.leaf(slot_of[i]);
                break;
            case ExprKind::Input:
                if (nd.input < 0 || nd.input >= n_inputs)
                    throw DomainError("compile_expr: input index out of range");
                id[i] = ce.tape.leaf(slots + nd.input);
                break;
            case ExprKind::Operation: {
                int a = id[static_cast<std::size_t>(nd.a)];
                int b = nd.b >= 0 ? id[static_cast<std::size_t>(nd.b)] : -1;
                switch (nd.op) {
                    case Op::Add: id[i] = ce.tape.add(a, b); break;
                    case Op::Sub: id[i] = ce.tape.sub(a, b); break;
                    case Op::Mul: id[i] = ce.tape.mul(a, b); break;
                    case Op::Div: id[i] = ce.tape.div(a, b); break;
                    case Op::Sin: id[i] = ce.tape.sin(a); break;
                    case Op::Cos: id[i] = ce.tape.cos(a); break;
                    case Op::Sq: id[i] = ce.tape.sq(a); break;
                    default: throw DomainError("compile_expr: unsupported op");
                }
                break;
            }
        }
    }
    ce.out = id.back();
    return ce;
}

EvalResult eval_expr(const Expr& e, std::span<const double> params, State s) {
    CompiledExpr ce = compile_expr(e);
    if (static_cast<int>(params.size()) != ce.n_params)
        throw DomainError("eval_expr: param count mismatch");
    std::vector<double> leaves(params.begin(), params.end());
    leaves.push_back(s.q);
    leaves.push_back(s.p);
    return evaluate(ce.tape, leaves, ce.out);
}

namespace {

// Fit/screening driver: per-state node-value rows with parameter-independent
// entries computed once, so each optimizer step touches only the
// parameter-dependent subgraph.
struct ExprProgram {
    CompiledExpr ce;
    int stride = 0;
    int n_states = 0;
    bool static_poison = false;      // non-finite parameter-independent node
    std::vector<int> traj_begin;
    std::vector<double> rows;        // [state][node]
    std::vector<std::uint8_t> dep;   // node depends on params
    std::vector<int> dep_ops;        // dependent Operation node ids, ascending
    std::vector<int> param_nodes;    // tape node id per slot
    std::vector<double> adj;         // reverse scratch

    ExprProgram(const Expr& e, std::span<const Trajectory> data) : ce(compile_expr(e)) {
        const auto& nodes = ce.tape.nodes();
        stride = ce.tape.size();
        dep.assign(static_cast<std::size_t>(stride), 0);
        param_nodes.assign(static_cast<std::size_t>(ce.n_params), -1);
        for (int i = 0; i < stride; ++i) {
            const Node& n = nodes[static_cast<std::size_t>(i)];
            if (n.op == Op::Leaf) {
                if (n.a < ce.n_params) {
                    dep[static_cast<std::size_t>(i)] = 1;
                    param_nodes[static_cast<std::size_t>(n.a)] = i;
                }
            } else if (n.op != Op::Const) {
                bool d = dep[static_cast<std::size_t>(n.a)] ||
                         (n.b >= 0 && dep[static_cast<std::size_t>(n.b)]);
                dep[static_cast<std::size_t>(i)] = d;
                if (d) dep_ops.push_back(i);
            }
        }
        traj_begin.push_back(0);
        for (const auto& t : data) {
            n_states += static_cast<int>(t.states.size());
            traj_begin.push_back(n_states);
        }
        rows.assign(static_cast<std::size_t>(n_states) * static_cast<std::size_t>(stride), 0.0);
        adj.assign(static_cast<std::size_t>(stride), 0.0);

        // Initial full forward fills the parameter-independent entries. A
        // non-finite value in any such entry poisons the candidate even when
        // the output happens to come back finite (x / (y / 0) is 0 in IEEE
        // arithmetic but not a usable formula).
        std::vector<double> leaves(static_cast<std::size_t>(ce.n_params) + 2, 1.0);
        Evaluator ev(ce.tape);
        int s = 0;
        for (const auto& t : data) {
            for (const auto& st : t.states) {
                leaves[static_cast<std::size_t>(ce.n_params)] = st.q;
                leaves[static_cast<std::size_t>(ce.n_params) + 1] = st.p;
                ev.forward(leaves, ce.out);
                double* row = rows.data() + static_cast<std::size_t>(s) * stride;
                for (int i = 0; i < stride; ++i) {
                    double v = ev.values()[static_cast<std::size_t>(i)];
                    row[i] = v;
                    if (!dep[static_cast<std::size_t>(i)] && !std::isfinite(v))
                        static_poison = true;
                }
                ++s;
            }
        }
    }

    int n_trajs() const { return static_cast<int>(traj_begin.size()) - 1; }

    void set_params(std::span<const double> params) {
        for (int k = 0; k < ce.n_params; ++k) {
            int node = param_nodes[static_cast<std::size_t>(k)];
            double v = params[static_cast<std::size_t>(k)];
            for (int s = 0; s < n_states; ++s)
                rows[static_cast<std::size_t>(s) * stride + node] = v;
        }
    }

    // Recomputes dependent nodes for state s; returns g(s), NaN when any
    // recomputed node (or a cached static one) is non-finite.
    double forward_state(int s) {
        double* v = rows.data() + static_cast<std::size_t>(s) * stride;
        const auto& nodes = ce.tape.nodes();
        bool fine = !static_poison;
        for (int i : dep_ops) {
            const Node& n = nodes[static_cast<std::size_t>(i)];
            double x = v[n.a];
            switch (n.op) {
                case Op::Add: v[i] = x + v[n.b]; break;
                case Op::Sub: v[i] = x - v[n.b]; break;
                case Op::Mul: v[i] = x * v[n.b]; break;
                case Op::Div: v[i] = x / v[n.b]; break;
                case Op::Sin: v[i] = std::sin(x); break;
                case Op::Cos: v[i] = std::cos(x); break;
                case Op::Sq: v[i] = x * x; break;
                default: break;
            }
            fine &= std::isfinite(v[i]);
        }
        return fine ? v[ce.out] : std::numeric_limits<double>::quiet_NaN();
    }

    // Seeded reverse over the dependent subgraph, accumulating into grad.
    void reverse_state(int s, double seed, std::span<double> grad) {
        const double* v = rows.data() + static_cast<std::size_t>(s) * stride;
        const auto& nodes = ce.tape.nodes();
        for (int i : dep_ops) adj[static_cast<std::size_t>(i)] = 0.0;
        for (int k = 0; k < ce.n_params; ++k)
            adj[static_cast<std::size_t>(param_nodes[static_cast<std::size_t>(k)])] = 0.0;
        adj[static_cast<std::size_t>(ce.out)] = seed;
        for (auto it = dep_ops.rbegin(); it != dep_ops.rend(); ++it) {
            int i = *it;
            double a = adj[static_cast<std::size_t>(i)];
            if (a == 0.0) continue;
            const Node& n = nodes[static_cast<std::size_t>(i)];
            switch (n.op) {
                case Op::Add:
                    if (dep[(size_t)n.a]) adj[(size_t)n.a] += a;
                    if (dep[(size_t)n.b]) adj[(size_t)n.b] += a;
                    break;
                case Op::Sub:
                    if (dep[(size_t)n.a]) adj[(size_t)n.a] += a;
                    if (dep[(size_t)n.b]) adj[(size_t)n.b] -= a;
                    break;
                case Op::Mul:
                    if (dep[(size_t)n.a]) adj[(size_t)n.a] += a * v[n.b];
                    if (dep[(size_t)n.b]) adj[(size_t)n.b] += a * v[n.a];
                    break;
                case Op::Div:
                    if (dep[(size_t)n.a]) adj[(size_t)n.a] += a / v[n.b];
                    if (dep[(size_t)n.b]) adj[(size_t)n.b] -= a * v[i] / v[n.b];
                    break;
                case Op::Sin:
                    if (dep[(size_t)n.a]) adj[(size_t)n.a] += a * std::cos(v[n.a]);
                    break;
                case Op::Cos:
                    if (dep[(size_t)n.a]) adj[(size_t)n.a] -= a * std::sin(v[n.a]);
                    break;
                case Op::Sq:
                    if (dep[(size_t)n.a]) adj[(size_t)n.a] += a * 2.0 * v[n.a];
                    break;
                default: break;
            }
        }
        for (int k = 0; k < ce.n_params; ++k)
            grad[static_cast<std::size_t>(k)] +=
                adj[static_cast<std::size_t>(param_nodes[static_cast<std::size_t>(k)])];
    }
};

struct StatAccum {
    double stat = 0.0;
    double pooled = 0.0;
    bool ok = true;
    double num = 0.0;   // mean of per-trajectory variances
    double mean_all = 0.0;
    std::vector<double> traj_mean;
};

// Two-pass centered variances; g values already in gv.
StatAccum stat_from_values(const std::vector<double>& gv, const std::vector<int>& traj_begin,
                           double eps) {
    StatAccum a;
    int S = static_cast<int>(traj_begin.size()) - 1;
    int N = static_cast<int>(gv.size());
    a.traj_mean.resize(static_cast<std::size_t>(S));
    double sum_all = 0.0;
    for (double g : gv) {
        if (!std::isfinite(g)) a.ok = false;
        sum_all += g;
    }
    if (!a.ok || N == 0) { a.ok = false; return a; }
    a.mean_all = sum_all / N;
    double var_all = 0.0;
    for (double g : gv) var_all += (g - a.mean_all) * (g - a.mean_all);
    var_all /= N;
    a.pooled = var_all;
    double num = 0.0;
    for (int s = 0; s < S; ++s) {
        int b = traj_begin[static_cast<std::size_t>(s)];
        int e = traj_begin[static_cast<std::size_t>(s) + 1];
        double mu = 0.0;
        for (int i = b; i < e; ++i) mu += gv[static_cast<std::size_t>(i)];
        mu /= (e - b);
        a.traj_mean[static_cast<std::size_t>(s)] = mu;
        double var = 0.0;
        for (int i = b; i < e; ++i)
            var += (gv[static_cast<std::size_t>(i)] - mu) * (gv[static_cast<std::size_t>(i)] - mu);
        var /= (e - b);
        num += var;
    }
    num /= S;
    a.num = num;
    a.stat = num / (var_all + eps);
    a.ok = std::isfinite(a.stat);
    return a;
}

} // namespace

FitResult fit_params(const Expr& e, std::span<const Trajectory> data, const FitConfig& cfg) {
    FitResult res;
    if (data.empty()) throw DomainError("fit_params: empty data");
    ExprProgram prog(e, data);
    const int P = prog.ce.n_params;
    std::vector<double> params(static_cast<std::size_t>(P), cfg.init);
    std::vector<double> gv(static_cast<std::size_t>(prog.n_states));

    auto eval_stat = [&]() {
        prog.set_params(params);
        for (int s = 0; s < prog.n_states; ++s) gv[static_cast<std::size_t>(s)] = prog.forward_state(s);
        return stat_from_values(gv, prog.traj_begin, cfg.eps);
    };

    StatAccum st = eval_stat();
    if (!st.ok) {
        res.ok = false;
        res.stat = std::numeric_limits<double>::infinity();
        res.reason = "non-finite evaluation at initialization";
        res.params = params;
        return res;
    }
    double best_stat = st.stat;
    std::vector<double> best_params = params;

    if (P > 0) {
        std::vector<double> grad(static_cast<std::size_t>(P));
        std::vector<double> m(static_cast<std::size_t>(P), 0.0), v(static_cast<std::size_t>(P), 0.0);
        const int S = prog.n_trajs();
        const int N = prog.n_states;
        for (int step = 1; step <= cfg.steps; ++step) {
            // d stat / d g composed with per-state reverse passes.
            double denom = st.pooled + cfg.eps;
            std::fill(grad.begin(), grad.end(), 0.0);
            for (int s = 0; s < S; ++s) {
                int b = prog.traj_begin[static_cast<std::size_t>(s)];
                int en = prog.traj_begin[static_cast<std::size_t>(s) + 1];
                double mu = st.traj_mean[static_cast<std::size_t>(s)];
                int T = en - b;
                for (int i = b; i < en; ++i) {
                    double g = gv[static_cast<std::size_t>(i)];
                    double seed = (2.0 / S) * (g - mu) / T / denom -
                                  st.num * (2.0 / N) * (g - st.mean_all) / (denom * denom);
                    prog.reverse_state(i, seed, grad);
                }
            }
            bool gok = true;
            for (double g : grad) gok &= std::isfinite(g);
            if (!gok) { res.reason = "non-finite gradient"; break; }
            for (int k = 0; k < P; ++k) {
                m[(size_t)k] = cfg.beta1 * m[(size_t)k] + (1 - cfg.beta1) * grad[(size_t)k];
                v[(size_t)k] = cfg.beta2 * v[(size_t)k] + (1 - cfg.beta2) * grad[(size_t)k] * grad[(size_t)k];
                double mh = m[(size_t)k] / (1 - std::pow(cfg.beta1, step));
                double vh = v[(size_t)k] / (1 - std::pow(cfg.beta2, step));
                params[(size_t)k] -= cfg.lr * mh / (std::sqrt(vh) + cfg.adam_eps);
            }
            st = eval_stat();
            if (!st.ok) { res.reason = "non-finite statistic during fit"; break; }
            if (st.stat < best_stat) {
                best_stat = st.stat;
                best_params = params;
            }
        }
    }

    res.params = std::move(best_params);
    res.stat = best_stat;
    res.ok = std::isfinite(best_stat);
    return res;
}

double pooled_variance(const CompiledExpr& ce, std::span<const double> params,
                       std::span<const Trajectory> data, bool* ok) {
    std::vector<double> leaves(params.begin(), params.end());
    leaves.resize(params.size() + 2);
    Evaluator ev(ce.tape);
    std::vector<double> gv;
    bool fine = true;
    for (const auto& t : data)
        for (const auto& s : t.states) {
            leaves[params.size()] = s.q;
            leaves[params.size() + 1] = s.p;
            EvalResult r = ev.forward(leaves, ce.out);
            fine &= r.ok;
            gv.push_back(r.value);
        }
    if (gv.empty()) fine = false;
    double mean = 0.0, var = 0.0;
    if (fine) {
        for (double g : gv) mean += g;
        mean /= static_cast<double>(gv.size());
        for (double g : gv) var += (g - mean) * (g - mean);
        var /= static_cast<double>(gv.size());
        fine = std::isfinite(var);
    }
    if (ok) *ok = fine;
    return var;
}

StatResult conservation_stat(const CompiledExpr& ce, std::span<const double> params,
                             std::span<const Trajectory> data, double normalizer) {
    std::vector<double> leaves(params.begin(), params.end());
    leaves.resize(params.size() + 2);
    Evaluator ev(ce.tape);
    StatResult out;
    double num = 0.0;
    bool fine = !data.empty() && normalizer > 0.0;
    for (const auto& t : data) {
        double mu = 0.0, var = 0.0;
        std::vector<double> g(t.states.size());
        for (std::size_t i = 0; i < t.states.size(); ++i) {
            leaves[params.size()] = t.states[i].q;
            leaves[params.size() + 1] = t.states[i].p;
            EvalResult r = ev.forward(leaves, ce.out);
            fine &= r.ok;
            g[i] = r.value;
            mu += r.value;
        }
        mu /= static_cast<double>(t.states.size());
        for (double gi : g) var += (gi - mu) * (gi - mu);
        var /= static_cast<double>(t.states.size());
        num += var;
    }
    if (fine) {
        num /= static_cast<double>(data.size());
        out.stat = num / normalizer;
        out.ok = std::isfinite(out.stat);
    }
    return out;
}

bool probe_constant(const CompiledExpr& ce, std::span<const double> params,
                    std::span<const State> probes, double tol) {
    std::vector<double> leaves(params.begin(), params.end());
    leaves.resize(params.size() + 2);
    std::vector<int> wrt = {static_cast<int>(params.size()),
                            static_cast<int>(params.size()) + 1};
    std::vector<double> grad(2);
    Evaluator ev(ce.tape);
    for (const auto& s : probes) {
        leaves[params.size()] = s.q;
        leaves[params.size() + 1] = s.p;
        EvalResult r = ev.forward(leaves, ce.out);
        if (!r.ok) return false; // let screening classify the failure
        if (!ev.reverse(ce.out, wrt, grad)) return false;
        if (std::abs(grad[0]) > tol || std::abs(grad[1]) > tol) return false;
    }
    return true;
}

} // namespace conserve
