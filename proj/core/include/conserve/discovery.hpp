#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "conserve/dsl.hpp"
#include "conserve/dynamics.hpp"
#include "conserve/tailoring.hpp"

namespace conserve {

// Per-candidate audit record. `exit_stage` names the last stage the candidate
// reached: "screen", "shortlist", "select", or "winner".
struct CandidateReport {
    int ordinal = -1; // index in enumeration order
    std::string sexpr; // also the final tie-break order
    std::string key;   // canonical form (dedup identity)
    Expr expr;
    int n_nodes = 0;
    std::vector<double> fitted;
    double stat_true = std::numeric_limits<double>::infinity();
    double stat_null = std::numeric_limits<double>::infinity();
    bool accepted = false;
    std::string exit_stage = "screen";
    std::string reject_reason; // empty for the winner
    // Selection stage outputs; NaN until the candidate reaches selection.
    double best_inner_lr = std::numeric_limits<double>::quiet_NaN();
    double tailored_train_mse = std::numeric_limits<double>::quiet_NaN();

    double ratio() const { // screening order: ascending stat_true / stat_null
        if (!std::isfinite(stat_true) || !std::isfinite(stat_null) || !(stat_null > 0.0))
            return std::numeric_limits<double>::infinity();
        return stat_true / stat_null;
    }
};

// Half-decade inner-learning-rate grid 10^-3 .. 10^1.
std::vector<double> default_inner_lr_grid();

struct BaselineConfig {
    int width = 200;
    int hidden_layers = 2;
    int epochs = 2000;
    double lr = 1e-3;
    std::uint64_t seed = 7;
};

struct PipelineConfig {
    DataConfig data;
    EnumConfig enumeration;
    FitConfig fit;
    BaselineConfig baseline;
    TailorConfig tailor;

    double ratio_threshold = 100.0; // stat_null / stat_true acceptance factor
    double degenerate_floor = 1e-10; // reject when even null data conserves
    double stat_eps = 1e-12;         // guards the acceptance ratio
    int shortlist_size = 20;
    int metatailor_epochs = 100;
    std::vector<double> inner_lr_grid; // empty -> default_inner_lr_grid()
    int n_null = 25;                   // null sequences for screening

    // Winner choice: candidates whose best selection MSE is within
    // (1 + select_tie_rel) of the minimum form the tie set; within it, those
    // whose screening statistic is within stat_tie_rel of the best (or below
    // stat_tie_floor) are preferred, then fewer divisions (pole-free
    // embeddings tailor more stably), fewer nodes, then ascending
    // serialization.
    // Equivalent rescalings of one conserved quantity land within a few
    // percent of each other once each has picked its best inner LR, so the
    // window must be wide enough to gather them into one tie set.
    double select_tie_rel = 5e-2;
    double stat_tie_rel = 1.5;
    double stat_tie_floor = 1e-6;

    int final_epochs = 100; // winner fine-tune vs extended-baseline comparison
    int eval_horizon = 20;  // long-horizon evaluation (prediction steps)
    int window_stride = 5;

    int workers = 0; // 0 = all available
    std::string out_dir = "out";
    bool resume = true;
};

// Supervised predictor pretraining on finite-difference targets
// (x_{t+1} - x_t)/dt with full-batch Adam.
struct BaselineResult {
    Mlp model;
    double final_train_mse = 0.0;
    std::vector<double> loss_history; // one entry per epoch
};
BaselineResult train_predictor(std::span<const Trajectory> train, double dt,
                               const BaselineConfig& cfg, const Mlp* warm_start = nullptr);

// Mean squared error of plain rollouts over all windows (stride fixed) at the
// given horizon; infinity on numeric failure.
double rollout_mse(const Mlp& f, std::span<const Trajectory> data, int horizon, double dt,
                   int stride);
// Same, but each window's parameters are first adapted with the embedding
// (tailoring horizon from cfg, evaluation horizon possibly longer).
double tailored_rollout_mse(const Mlp& f, const Embedding& g, const TailorConfig& cfg,
                            std::span<const Trajectory> data, int eval_horizon, int stride);

// Fits every candidate on true data, evaluates the conservation statistic on
// true and null data (each normalized by its own pooled variance), and
// accepts when stat_null / max(stat_true, eps) >= ratio_threshold and
// stat_null stays above the degeneracy floor. Reports come back ordered by
// ascending ratio, ties by ordinal.
std::vector<CandidateReport> screen(std::span<const Expr> candidates,
                                    std::span<const Trajectory> true_data,
                                    std::span<const Trajectory> null_data,
                                    const PipelineConfig& cfg);

struct SelectionResult {
    int winner_index = -1;                    // into reports
    std::vector<CandidateReport> reports;     // shortlist order preserved
    std::vector<double> lr_grid;
    std::vector<std::vector<double>> cell_mse; // [candidate][lr], +inf = diverged
};

// Meta-trains a copy of the pretrained predictor for every (candidate,
// inner-LR) cell, scores candidates by their best long-horizon training MSE,
// and picks the winner (tie chain documented on PipelineConfig). Divergent
// cells record infinity. Deterministic and invariant to shortlist order.
SelectionResult select_by_metatailoring(std::span<const CandidateReport> shortlist,
                                        const Mlp& pretrained,
                                        std::span<const Trajectory> train,
                                        const PipelineConfig& cfg);

struct StageCounts {
    int enumerated = 0;
    int screened = 0;
    int accepted = 0;
    int shortlisted = 0;
    int selected = 0; // candidates with at least one convergent cell
};

struct DiscoveryResult {
    SystemSpec system;
    StageCounts counts;
    CandidateReport winner;
    SelectionResult selection;
    std::vector<CandidateReport> screen_reports;
    Dataset dataset;
    Mlp baseline;
    double baseline_train_mse = 0.0;
    // Long-horizon test RMSE comparison at equal total epochs.
    double baseline_test_rmse = 0.0; // baseline trained final_epochs further
    double tailored_test_rmse = 0.0; // winner-embedding meta-tailored
    double oracle_test_rmse = 0.0;   // known-quantity embedding, same procedure
    Mlp tailored_predictor;
    std::string out_dir;
};

// The known conserved quantity for a system, as a formula with one fitted
// coefficient (used for the oracle comparison and known-answer tests).
Expr known_invariant_expr(SystemKind kind);
std::vector<double> known_invariant_params(SystemKind kind);

// Fills derived defaults: system-dependent data bands, the tailoring dt
// (copied from the data dt), and the inner-LR grid when left empty.
PipelineConfig resolve_pipeline_config(const SystemSpec& system, PipelineConfig cfg);

// Full pipeline: data -> baseline -> enumerate -> screen -> shortlist ->
// select -> final comparison. Every stage persists an artifact under
// cfg.out_dir and is skipped on rerun when the artifact exists, the embedded
// config hash matches, and cfg.resume is set. Stage failures are annotated
// with the stage name.
DiscoveryResult run_pipeline(const SystemSpec& system, const PipelineConfig& cfg);

} // namespace conserve
