#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "conserve/autodiff.hpp"
#include "conserve/dsl.hpp"
#include "conserve/dynamics.hpp"

namespace conserve {

// Fully connected net with tanh hidden layers and a linear output layer.
// Parameter layout per layer: weights row-major [out][in], then biases.
struct MlpSpec {
    int in_dim = 2;
    int out_dim = 2;
    int hidden = 64;
    int hidden_layers = 2;

    int n_params() const;
    friend bool operator==(const MlpSpec&, const MlpSpec&) = default;
};

struct Mlp {
    MlpSpec spec;
    ParamVector params;

    // Xavier-uniform weights, zero biases, deterministic in seed.
    static Mlp init(const MlpSpec& spec, std::uint64_t seed);
    void forward(std::span<const double> in, std::span<double> out) const;
};

// Forward pass with explicit parameters (e.g. a tailored copy).
void mlp_forward(const MlpSpec& spec, std::span<const double> params,
                 std::span<const double> in, std::span<double> out);

// {in, out} sizes per layer, including the linear output layer; the flat
// parameter vector is the concatenation of [weights row-major, biases] in
// this order.
std::vector<std::array<int, 2>> mlp_layer_shapes(const MlpSpec& spec);

// Conserved-quantity embedding: a fitted formula (parameters frozen during
// meta-training) or a trainable network mapping State -> R^k.
struct SymbolicEmbedding {
    Expr expr;
    std::vector<double> params;
};
struct NeuralEmbedding {
    Mlp net; // in_dim 2, out_dim k
};
using Embedding = std::variant<SymbolicEmbedding, NeuralEmbedding>;

int embedding_dim(const Embedding& g);
// Embedding value at a state; sets *ok=false on non-finite output.
std::vector<double> embedding_value(const Embedding& g, State s, bool* ok = nullptr);

// Two placements of the conservation penalty along a predicted sequence:
// AnchorA sums |g(x0) - g(x_t)|^2, PairwiseB sums |g(x_{t-1}) - g(x_t)|^2.
enum class LossVariant : std::uint8_t { AnchorA, PairwiseB };
const char* variant_name(LossVariant v);
LossVariant parse_variant(const std::string& name);

struct TailorConfig {
    LossVariant variant = LossVariant::AnchorA;
    double inner_lr = 0.0;  // adaptation step size; 0 disables adaptation
    int inner_steps = 1;
    int horizon = 10;       // predicted steps per window
    double outer_lr = 1e-2; // predictor meta-update
    double embed_lr = 1e-2; // neural embedding meta-update
    double dt = 0.1;
};

// Euler rollout x_{t+1} = x_t + f(x_t) dt, t = 1..T. Throws DomainError when
// a prediction goes non-finite.
std::vector<State> rollout(const MlpSpec& spec, std::span<const double> params, State x0,
                           int T, double dt);
std::vector<State> rollout(const Mlp& f, State x0, int T, double dt);

// Penalty over precomputed embedding values; seq[0] is g(x0), the rest are
// the predictions in order.
double conservation_loss_values(std::span<const std::vector<double>> seq, LossVariant v);
// Penalty for a predicted sequence; *ok=false on numeric failure.
double conservation_loss(const Embedding& g, State x0, std::span<const State> preds,
                         LossVariant v, bool* ok = nullptr);

// Static graph for one prediction window. Leaves are laid out as
// [theta | phi | inner_lr | x0.q x0.p | ground truth q,p per step], and the
// graph contains: the plain rollout, its conservation penalty, the adapted
// parameters after cfg.inner_steps descent steps (the reverse pass is spliced
// into the graph, so numeric reverse over the result differentiates through
// the adaptation), the re-rollout, and both prediction losses.
class MetaProgram {
public:
    MetaProgram(const MlpSpec& f_spec, const Embedding& g, const TailorConfig& cfg);

    int n_theta() const { return n_theta_; }
    int n_phi() const { return n_phi_; }
    int horizon() const { return cfg_.horizon; }

    struct Losses {
        double inner = 0.0;      // conservation penalty of the plain rollout
        double untailored = 0.0; // prediction MSE of the plain rollout
        double tailored = 0.0;   // prediction MSE after adaptation
        bool ok = false;
    };

    // gt must hold exactly `horizon()` states.
    Losses losses(std::span<const double> theta, std::span<const double> phi,
                  double inner_lr, State x0, std::span<const State> gt);

    // d(tailored MSE)/d(theta, phi), exact through the adaptation step.
    // Accumulates into dtheta/dphi. Returns false on numeric failure.
    bool outer_grads(std::span<const double> theta, std::span<const double> phi,
                     double inner_lr, State x0, std::span<const State> gt,
                     std::span<double> dtheta, std::span<double> dphi,
                     Losses* losses_out = nullptr);

    // Adapted parameters for one window (functional; theta is untouched).
    std::vector<double> adapted_theta(std::span<const double> theta,
                                      std::span<const double> phi, double inner_lr, State x0,
                                      bool* ok = nullptr);

    // d(conservation penalty)/d(theta) at the given parameters, plus the
    // penalty value; drives the repeated-descent probe.
    bool inner_grad(std::span<const double> theta, std::span<const double> phi, State x0,
                    std::span<double> dtheta, double* inner_value);

private:
    void set_leaves(std::span<const double> theta, std::span<const double> phi,
                    double inner_lr, State x0, std::span<const State> gt);

    MlpSpec f_spec_;
    TailorConfig cfg_;
    int n_theta_ = 0;
    int n_phi_ = 0;
    Tape tape_;
    int inner_node_ = -1;
    int untailored_node_ = -1;
    int tailored_node_ = -1;
    std::vector<int> adapted_nodes_; // adapted theta, one node per parameter
    std::vector<int> theta_leaves_, phi_leaves_;
    std::vector<double> leaves_;
    std::unique_ptr<Evaluator> eval_;
};

// One adaptation: theta' = theta - inner_lr * d(conservation penalty)/d(theta),
// applied cfg.inner_steps times with a fresh rollout between steps. Functional.
// *ok=false (and theta returned unchanged) on numeric failure.
ParamVector tailor_step(const Mlp& f, const Embedding& g, State x0, const TailorConfig& cfg,
                        bool* ok = nullptr);

// Rollout from x0 with parameters adapted for this window.
std::vector<State> predict_sequence(const Mlp& f, const Embedding& g, State x0,
                                    const TailorConfig& cfg, bool* ok = nullptr);

// Mean squared error between a predicted sequence and ground truth.
double sequence_mse(std::span<const State> pred, std::span<const State> gt);

struct MetaHistoryRow {
    int epoch = 0; // state before this epoch's update; last row is final state
    double train_untailored = 0.0;
    double train_tailored = 0.0;
    double val_untailored = 0.0;
    double val_tailored = 0.0;
};

struct MetaTrainResult {
    Mlp predictor;
    Embedding embedding;
    std::vector<MetaHistoryRow> history;
    bool ok = false;
    std::string reason; // set when !ok (e.g. divergence diagnostics)
};

// Full-batch meta-training: every epoch evaluates all windows (stride
// `window_stride` within each trajectory), averages exact gradients of the
// adapted prediction loss, and applies one descent step to the predictor and,
// for neural embeddings, the embedding. Symbolic embedding parameters stay
// frozen. Deterministic.
MetaTrainResult meta_train(const Mlp& f, const Embedding& g, std::span<const Trajectory> train,
                           std::span<const Trajectory> val, const TailorConfig& cfg, int epochs,
                           int window_stride = 5);

struct ProbePoint {
    int step = 0;        // 0 = before any adaptation
    double inner = 0.0;  // conservation penalty
    double task = 0.0;   // prediction MSE vs ground truth
};

struct ProbeConfig {
    int max_steps = 50;
    double lr = 1e-3;
    bool adam = false; // plain descent by default; Adam for long probes
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Repeated adaptation on one window, recording both losses after each step.
// Stops early (partial curve) on numeric failure.
std::vector<ProbePoint> multi_inner_step_probe(const Mlp& f, const Embedding& g, State x0,
                                               std::span<const State> ground_truth,
                                               const TailorConfig& cfg, const ProbeConfig& pcfg);

// JSON checkpoint: layer sizes, flat weights, embedding (network weights or
// formula text with parameter units and values), and the config echo.
struct Checkpoint {
    Mlp predictor;
    Embedding embedding;
    TailorConfig cfg;
    std::string system; // producing system tag, free-form
};
void save_checkpoint(const std::string& path, const Checkpoint& c);
Checkpoint load_checkpoint(const std::string& path);

} // namespace conserve
