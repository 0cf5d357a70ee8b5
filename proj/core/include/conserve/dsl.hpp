#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "conserve/autodiff.hpp"
#include "conserve/dynamics.hpp"

namespace conserve {

// Physical unit as integer exponents over the two base dimensions (q, p).
// Dimensions a problem does not use simply keep exponent zero.
struct Unit {
    std::array<std::int8_t, 2> e{0, 0};

    bool dimensionless() const { return e[0] == 0 && e[1] == 0; }
    friend bool operator==(const Unit&, const Unit&) = default;
    Unit times(const Unit& o) const {
        return Unit{{static_cast<std::int8_t>(e[0] + o.e[0]),
                     static_cast<std::int8_t>(e[1] + o.e[1])}};
    }
    Unit over(const Unit& o) const {
        return Unit{{static_cast<std::int8_t>(e[0] - o.e[0]),
                     static_cast<std::int8_t>(e[1] - o.e[1])}};
    }
    Unit squared() const {
        return Unit{{static_cast<std::int8_t>(2 * e[0]), static_cast<std::int8_t>(2 * e[1])}};
    }
    int max_abs() const;
    std::string str() const; // e.g. "1", "q^2 p^-2"
};

enum class ExprKind : std::uint8_t { Input, Param, Operation };

struct ExprNode {
    ExprKind kind = ExprKind::Input;
    Op op = Op::Add;          // Operation nodes only; restricted to the formula op set
    std::int16_t a = -1;      // child indices into Expr::nodes
    std::int16_t b = -1;
    std::int8_t input = -1;   // Input nodes only
    Unit unit;                // Param: declared unit; others: cached derived unit
};

// Expression tree stored bottom-up: children precede parents, root is last.
struct Expr {
    std::vector<ExprNode> nodes;

    int root() const { return static_cast<int>(nodes.size()) - 1; }
    int size() const { return static_cast<int>(nodes.size()); }
    int n_params() const;
    int depth() const;
    Unit unit() const { return nodes.back().unit; }
    // Units of Param leaves in slot (left-to-right traversal) order.
    std::vector<Unit> param_units() const;
};

// Tree builders (children are copied in).
Expr make_input(int index, Unit unit);
Expr make_param(Unit unit);
Expr make_unary(Op op, const Expr& a);
Expr make_binary(Op op, const Expr& a, const Expr& b);

// Per-problem vocabulary: input units plus the parameter units offered
// during enumeration (every unit with exponents in the configured range over
// the base dimensions the problem uses).
struct ProblemUnits {
    std::vector<Unit> input_units;
    std::vector<Unit> param_units;
};

// Pendulum: q is an angle (dimensionless), p carries the p-dimension.
ProblemUnits pendulum_units(int param_exp_lo = -2, int param_exp_hi = 2);
// Spring: q and p carry distinct dimensions, so cos/sin of raw inputs is not
// unit-valid.
ProblemUnits spring_units(int param_exp_lo = -2, int param_exp_hi = 2);
ProblemUnits units_for(SystemKind kind, int param_exp_lo = -2, int param_exp_hi = 2);

// Recomputes units structurally. Returns the root unit, or nullopt with
// `error` naming the offending subtree. On success the cached units in `e`
// are refreshed.
std::optional<Unit> check_units(Expr& e, std::span<const Unit> input_units,
                                std::string* error = nullptr);

// Key identifying the tree modulo commutativity of add/mul: children of the
// two commutative ops are sorted by their serialized bytes. Param leaves are
// keyed by unit, not slot identity. The byte ordering is also the
// deterministic tie-break order used by winner selection.
std::string canonical_key(const Expr& e);

// External prefix S-expression, e.g. (add (sq (in 1)) (mul (par P0) (sq (in 0)))).
// Param slots are numbered left to right; units travel separately.
std::string serialize(const Expr& e);
// Inverse of serialize. Param units are taken from `param_units` by slot when
// provided (dimensionless otherwise). Throws IoError on malformed input.
Expr parse_expr(const std::string& text, std::span<const Unit> param_units = {});

struct EnumConfig {
    int max_depth = 7;
    int max_nodes = 7;   // candidate size cap; target formulas need 7 nodes
    int max_params = 2;
    int param_exp_lo = -2;
    int param_exp_hi = 2;
    int unit_abs_cap = 8;
};

// Every unit-valid tree within the size/depth/params caps, one representative
// per canonical key, in deterministic order (by size, then generation order).
// Composite subtrees built purely from parameters are pruned (they are exact
// constants); bare Param leaves are kept and rejected later at screening.
std::vector<Expr> enumerate_exprs(const EnumConfig& cfg, const ProblemUnits& units);

// Expression compiled to a tape. Leaf layout: [params (slot order) | q | p].
struct CompiledExpr {
    Tape tape;
    int out = -1;
    int n_params = 0;
    int n_inputs = 0;
};
CompiledExpr compile_expr(const Expr& e, int n_inputs = 2);

EvalResult eval_expr(const Expr& e, std::span<const double> params, State s);

struct FitConfig {
    int steps = 500;
    double lr = 0.05; // full-batch Adam; plain descent at the documented step
                      // size cannot reach the pendulum coefficient
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double init = 1.0;
    double eps = 1e-12; // variance-ratio regularizer
};

struct FitResult {
    std::vector<double> params;
    double stat = 0.0; // best conservation statistic reached (never above init)
    bool ok = false;
    std::string reason; // set when !ok
};

// Minimizes mean over trajectories of Var_t[g] / (pooled Var[g] + eps) over
// the Param slots. Deterministic; returns the best iterate.
FitResult fit_params(const Expr& e, std::span<const Trajectory> data, const FitConfig& cfg);

struct StatResult {
    double stat = 0.0;
    bool ok = false;
};

// Pooled (dataset-wide) variance of g at the given params; ok=false on any
// non-finite evaluation.
double pooled_variance(const CompiledExpr& ce, std::span<const double> params,
                       std::span<const Trajectory> data, bool* ok);

// mean_s Var_t[g] / normalizer, where the caller supplies the normalizer
// (that dataset's own pooled variance + eps, so the statistic is scale-free).
StatResult conservation_stat(const CompiledExpr& ce, std::span<const double> params,
                             std::span<const Trajectory> data, double normalizer);

// True when g has (numerically) zero gradient w.r.t. the inputs at every
// probe state: the expression is a constant and carries no signal.
bool probe_constant(const CompiledExpr& ce, std::span<const double> params,
                    std::span<const State> probes, double tol = 1e-12);

} // namespace conserve
