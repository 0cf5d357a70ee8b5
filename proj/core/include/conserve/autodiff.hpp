#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace conserve {

// Tape primitives: the symbolic-formula operation set, constants, tanh for
// network nonlinearities, and Dot (weighted sum of node products) as the
// fused affine-combination node.
enum class Op : std::uint8_t { Leaf, Const, Add, Sub, Mul, Div, Sin, Cos, Sq, Tanh, Dot };

// One term of a Dot node: contributes w * v[a] * (b < 0 ? 1 : v[b]).
struct DotTerm {
    std::int32_t a;
    std::int32_t b;
    double w;
};

struct Node {
    Op op;
    std::int32_t a = -1; // operand id; leaf index for Leaf
    std::int32_t b = -1;
    double imm = 0.0;    // Const payload
    std::int32_t dot_begin = 0;
    std::int32_t dot_len = 0;
};

// Flat parameter storage with an immutable index <-> name mapping.
class ParamVector {
public:
    ParamVector() = default;
    explicit ParamVector(std::vector<double> values, std::vector<std::string> names = {});

    std::size_t size() const { return values_.size(); }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }
    std::span<const double> values() const { return values_; }
    std::vector<double>& raw() { return values_; }
    const std::vector<double>& raw() const { return values_; }
    const std::string& name(std::size_t i) const;
    // -1 when absent.
    int index_of(const std::string& name) const;

private:
    std::vector<double> values_;
    std::vector<std::string> names_;
};

// Append-only scalar computation graph. Nodes are topologically ordered by
// construction; a node only references smaller ids. Instances are immutable
// once construction finishes and safe to share across threads.
class Tape {
public:
    int leaf(int leaf_index);            // dedups: one node per leaf index
    int constant(double v);
    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int div(int a, int b);
    int sin(int a);
    int cos(int a);
    int sq(int a);
    int tanh(int a);
    int dot(std::span<const DotTerm> terms);

    int size() const { return static_cast<int>(nodes_.size()); }
    int num_leaves() const { return num_leaves_; }
    const std::vector<Node>& nodes() const { return nodes_; }
    const std::vector<DotTerm>& pool() const { return pool_; }
    int leaf_node(int leaf_index) const; // -1 when the leaf was never referenced

    // Appends the reverse pass of `output` as new nodes and returns, per
    // requested leaf, the node id holding d(output)/d(leaf). Leaves that the
    // output does not depend on map to a shared zero constant. The extended
    // tape stays topologically ordered, so taping can continue past the
    // returned nodes and a later numeric reverse yields second-order
    // derivatives.
    std::vector<int> gradient_nodes(int output, std::span<const int> wrt_leaves);

    // Same reverse expansion, but `wrt_nodes` are node ids rather than leaf
    // indices, so derivatives can be taken with respect to derived values
    // (e.g. already-updated parameters when unrolling several update steps).
    std::vector<int> gradient_nodes_wrt(int output, std::span<const int> wrt_nodes);

private:
    int push(Node n);
    void check(int id) const;

    std::vector<Node> nodes_;
    std::vector<DotTerm> pool_;
    std::vector<int> leaf_to_node_;
    int num_leaves_ = 0;
};

struct EvalResult {
    double value = 0.0;
    bool ok = false; // false when any node produced a non-finite value
};

// Reusable evaluation workspace. Forward fills node values; reverse runs a
// numeric adjoint sweep. Neither mutates the tape.
class Evaluator {
public:
    explicit Evaluator(const Tape& tape) : tape_(&tape) {}

    // Evaluates nodes [0, out] with the given leaf values.
    EvalResult forward(std::span<const double> leaves, int out);
    // d(value[out])/d(leaf) for each requested leaf index, into grad.
    // Requires a prior forward covering `out`. Returns false on non-finite
    // adjoints or a failed forward.
    bool reverse(int out, std::span<const int> wrt_leaves, std::span<double> grad,
                 double seed = 1.0);

    double value(int node) const { return val_[static_cast<std::size_t>(node)]; }
    std::span<const double> values() const { return val_; }

private:
    const Tape* tape_;
    std::vector<double> val_;
    std::vector<double> adj_;
    int fwd_limit_ = -1;
    bool fwd_ok_ = false;
};

// One-shot helpers over a fresh workspace.
EvalResult evaluate(const Tape& tape, std::span<const double> leaves, int output);
std::vector<double> gradient(const Tape& tape, std::span<const double> leaves, int output,
                             std::span<const int> wrt_leaves, bool* ok = nullptr);

} // namespace conserve
