#include "conserve/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "config_json.hpp"
#include "conserve/bounds.hpp"
#include "conserve/discovery.hpp"
#include "conserve/dsl.hpp"
#include "conserve/dynamics.hpp"
#include "conserve/errors.hpp"
#include "conserve/tailoring.hpp"
#include "conserve/version.hpp"

namespace conserve {

namespace fs = std::filesystem;
using nlohmann::json;
using cfg_json::jnum;
using cfg_json::load_json_file;
using cfg_json::write_json_file;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Everything a command can consume: the full pipeline configuration plus the
// CLI-only sections (neural embedding shape, meta-training epochs, probe and
// bound settings, file paths).
struct RunConfig {
    SystemSpec system;
    PipelineConfig pipe;

    MlpSpec embed{2, 2, 32, 2}; // neural conserved-quantity embedding
    std::uint64_t embed_seed = 99;
    int train_epochs = 50;

    ProbeConfig probe;

    BoundInputs bound;
    std::string sweep_var = "n";
    double sweep_lo = 100.0;
    double sweep_hi = 10000.0;
    int sweep_steps = 20;

    std::string data_path;       // input trajectories; empty = generate
    std::string checkpoint_path; // model input; empty = <out_dir>/final_model.json
    std::string out_path;        // single-file output override
};

void run_config_from_json(const json& j, RunConfig& rc) {
    cfg_json::check_keys(j,
                         {"system", "data", "enumeration", "fit", "baseline", "tailor", "screen",
                          "select", "final", "out_dir", "workers", "resume", "embedding", "train",
                          "probe", "bound", "sweep", "paths"},
                         "config");
    cfg_json::pipeline_from_json(j, rc.system, rc.pipe);
    if (j.contains("embedding")) {
        const json& e = j.at("embedding");
        cfg_json::check_keys(e, {"hidden", "hidden_layers", "out_dim", "seed"}, "embedding");
        rc.embed.hidden = e.value("hidden", rc.embed.hidden);
        rc.embed.hidden_layers = e.value("hidden_layers", rc.embed.hidden_layers);
        rc.embed.out_dim = e.value("out_dim", rc.embed.out_dim);
        rc.embed_seed = e.value("seed", rc.embed_seed);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        cfg_json::check_keys(t, {"epochs"}, "train");
        rc.train_epochs = t.value("epochs", rc.train_epochs);
    }
    if (j.contains("probe")) {
        const json& p = j.at("probe");
        cfg_json::check_keys(p, {"max_steps", "lr", "adam"}, "probe");
        rc.probe.max_steps = p.value("max_steps", rc.probe.max_steps);
        rc.probe.lr = p.value("lr", rc.probe.lr);
        rc.probe.adam = p.value("adam", rc.probe.adam);
    }
    if (j.contains("bound")) {
        const json& b = j.at("bound");
        cfg_json::check_keys(b, {"C", "R", "zeta", "rho", "delta", "n", "d", "m", "conserved"},
                             "bound");
        rc.bound.C = b.value("C", rc.bound.C);
        rc.bound.R = b.value("R", rc.bound.R);
        rc.bound.zeta = b.value("zeta", rc.bound.zeta);
        rc.bound.rho = b.value("rho", rc.bound.rho);
        rc.bound.delta = b.value("delta", rc.bound.delta);
        rc.bound.n = b.value("n", rc.bound.n);
        rc.bound.d = b.value("d", rc.bound.d);
        rc.bound.m = b.value("m", rc.bound.m);
        rc.bound.conserved = b.value("conserved", rc.bound.conserved);
    }
    if (j.contains("sweep")) {
        const json& s = j.at("sweep");
        cfg_json::check_keys(s, {"var", "lo", "hi", "steps"}, "sweep");
        rc.sweep_var = s.value("var", rc.sweep_var);
        rc.sweep_lo = s.value("lo", rc.sweep_lo);
        rc.sweep_hi = s.value("hi", rc.sweep_hi);
        rc.sweep_steps = s.value("steps", rc.sweep_steps);
    }
    if (j.contains("paths")) {
        const json& p = j.at("paths");
        cfg_json::check_keys(p, {"data", "checkpoint", "out"}, "paths");
        rc.data_path = p.value("data", rc.data_path);
        rc.checkpoint_path = p.value("checkpoint", rc.checkpoint_path);
        rc.out_path = p.value("out", rc.out_path);
    }
}

json run_config_to_json(const RunConfig& rc) {
    json j = cfg_json::pipeline_to_json(rc.system, rc.pipe);
    j["embedding"] = json{{"hidden", rc.embed.hidden},
                          {"hidden_layers", rc.embed.hidden_layers},
                          {"out_dim", rc.embed.out_dim},
                          {"seed", rc.embed_seed}};
    j["train"] = json{{"epochs", rc.train_epochs}};
    j["probe"] =
        json{{"max_steps", rc.probe.max_steps}, {"lr", rc.probe.lr}, {"adam", rc.probe.adam}};
    j["bound"] = json{{"C", rc.bound.C},         {"R", rc.bound.R},
                      {"zeta", rc.bound.zeta},   {"rho", rc.bound.rho},
                      {"delta", rc.bound.delta}, {"n", rc.bound.n},
                      {"d", rc.bound.d},         {"m", rc.bound.m},
                      {"conserved", rc.bound.conserved}};
    j["sweep"] = json{{"var", rc.sweep_var},
                      {"lo", rc.sweep_lo},
                      {"hi", rc.sweep_hi},
                      {"steps", rc.sweep_steps}};
    j["paths"] = json{{"data", rc.data_path},
                      {"checkpoint", rc.checkpoint_path},
                      {"out", rc.out_path}};
    return j;
}

std::string format_sig(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// CSV artifacts carry the version and config hash as comment lines so every
// output is traceable to its configuration.
std::vector<std::string> csv_notes(const RunConfig& rc) {
    return {std::string("version ") + kVersion,
            "config_hash " + cfg_json::hash_hex(run_config_to_json(rc))};
}

fs::path resolve_out(const RunConfig& rc, const char* fallback_name) {
    if (!rc.out_path.empty()) return rc.out_path;
    return fs::path(rc.pipe.out_dir) / fallback_name;
}

void ensure_parent_dir(const fs::path& p) {
    fs::path parent = p.parent_path();
    if (parent.empty()) return;
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw IoError("cannot create directory " + parent.string() + ": " + ec.message());
}

void ensure_out_dir(const RunConfig& rc) {
    std::error_code ec;
    fs::create_directories(rc.pipe.out_dir, ec);
    if (ec)
        throw IoError("cannot create output directory " + rc.pipe.out_dir + ": " + ec.message());
}

std::vector<Trajectory> load_input_data(const RunConfig& rc) {
    return load_trajectories_csv(rc.data_path);
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const RunConfig& rc0) {
    RunConfig rc = rc0;
    rc.pipe = resolve_pipeline_config(rc.system, rc.pipe);
    ensure_out_dir(rc);
    Dataset ds = make_dataset(rc.system, rc.pipe.data);
    fs::path dir(rc.pipe.out_dir);
    auto notes = csv_notes(rc);
    notes.push_back("system " + system_kind_name(rc.system.kind));
    save_trajectories_csv(dir / "train.csv", ds.train, notes);
    save_trajectories_csv(dir / "test.csv", ds.test, notes);

    double h_min = kInf, h_max = -kInf, h_sum = 0.0;
    std::size_t h_n = 0;
    for (const auto& tr : ds.train)
        for (const auto& s : tr.states) {
            double h = hamiltonian(rc.system, s);
            h_min = std::min(h_min, h);
            h_max = std::max(h_max, h);
            h_sum += h;
            ++h_n;
        }
    json manifest{{"version", kVersion},
                  {"config", run_config_to_json(rc)},
                  {"config_hash", cfg_json::hash_hex(run_config_to_json(rc))},
                  {"files", json::array({"train.csv", "test.csv"})},
                  {"n_train", ds.train.size()},
                  {"n_test", ds.test.size()},
                  {"states_per_traj", rc.pipe.data.states_per_traj},
                  {"dt", rc.pipe.data.dt},
                  {"seed", rc.pipe.data.seed},
                  {"energy", json{{"min", jnum(h_min)},
                                  {"max", jnum(h_max)},
                                  {"mean", jnum(h_n ? h_sum / static_cast<double>(h_n) : 0.0)}}}};
    write_json_file(dir / "manifest.json", manifest);
    std::cout << "wrote " << ds.train.size() << " train and " << ds.test.size()
              << " test trajectories to " << dir.string() << "\n";
    return 0;
}

int cmd_train_baseline(const RunConfig& rc0) {
    RunConfig rc = rc0;
    rc.pipe = resolve_pipeline_config(rc.system, rc.pipe);
    ensure_out_dir(rc);
    std::vector<Trajectory> train;
    if (!rc.data_path.empty()) {
        train = load_input_data(rc);
    } else {
        train = make_dataset(rc.system, rc.pipe.data).train;
    }
    BaselineResult br = train_predictor(train, rc.pipe.data.dt, rc.pipe.baseline);
    json pipe_echo = cfg_json::pipeline_to_json(rc.system, rc.pipe);
    json artifact{{"model", json{{"in_dim", br.model.spec.in_dim},
                                 {"out_dim", br.model.spec.out_dim},
                                 {"hidden", br.model.spec.hidden},
                                 {"hidden_layers", br.model.spec.hidden_layers},
                                 {"params", br.model.params.raw()}}},
                  {"final_train_mse", br.final_train_mse},
                  {"loss_history", br.loss_history},
                  {"epochs", rc.pipe.baseline.epochs},
                  {"version", kVersion},
                  {"config", run_config_to_json(rc)},
                  // Matches the discovery pipeline's baseline artifact, so a
                  // discover run over the same configuration reuses it.
                  {"config_hash", cfg_json::hash_hex(pipe_echo)}};
    write_json_file(fs::path(rc.pipe.out_dir) / "baseline.json", artifact);
    std::cout << "baseline predictor trained for " << rc.pipe.baseline.epochs
              << " epochs, final train mse " << br.final_train_mse << "\n";
    return 0;
}

int cmd_discover(const RunConfig& rc0) {
    RunConfig rc = rc0;
    DiscoveryResult res = run_pipeline(rc.system, rc.pipe);
    std::cout << "winner: " << res.winner.sexpr << "\n";
    for (std::size_t i = 0; i < res.winner.fitted.size(); ++i)
        std::cout << "  P" << i << " = " << res.winner.fitted[i] << "\n";
    std::cout << "  conservation stat (true data): " << res.winner.stat_true << "\n"
              << "  conservation stat (null data): " << res.winner.stat_null << "\n"
              << "  inner lr: " << res.winner.best_inner_lr << "\n"
              << "counts: enumerated " << res.counts.enumerated << ", accepted "
              << res.counts.accepted << ", shortlisted " << res.counts.shortlisted << "\n"
              << "test rmse: tailored " << res.tailored_test_rmse << ", baseline "
              << res.baseline_test_rmse << ", known-quantity " << res.oracle_test_rmse << "\n"
              << "artifacts in " << res.out_dir << "\n";
    return 0;
}

int cmd_train_noether(const RunConfig& rc0) {
    RunConfig rc = rc0;
    rc.pipe = resolve_pipeline_config(rc.system, rc.pipe);
    ensure_out_dir(rc);
    Dataset ds;
    if (!rc.data_path.empty()) {
        ds.train = load_input_data(rc);
        ds.test = make_dataset(rc.system, rc.pipe.data).test;
    } else {
        ds = make_dataset(rc.system, rc.pipe.data);
    }

    // Supervised pretraining first, then meta-training of predictor and
    // neural embedding on the post-adaptation prediction loss.
    BaselineResult br = train_predictor(ds.train, rc.pipe.data.dt, rc.pipe.baseline);
    MlpSpec es = rc.embed;
    es.in_dim = 2;
    Embedding g = NeuralEmbedding{Mlp::init(es, rc.embed_seed)};
    MetaTrainResult mt = meta_train(br.model, g, ds.train, ds.test, rc.pipe.tailor,
                                    rc.train_epochs, rc.pipe.window_stride);

    fs::path dir(rc.pipe.out_dir);
    save_checkpoint((dir / "noether_checkpoint.json").string(),
                    Checkpoint{mt.predictor, mt.embedding, rc.pipe.tailor,
                               system_kind_name(rc.system.kind)});
    {
        std::ofstream out(dir / "noether_history.csv");
        if (!out) throw IoError("cannot write " + (dir / "noether_history.csv").string());
        for (const auto& line : csv_notes(rc)) out << "# " << line << "\n";
        out << "epoch,train_untailored,train_tailored,val_untailored,val_tailored\n";
        // One row per completed update; row k is the state after k epochs.
        for (std::size_t i = 1; i < mt.history.size(); ++i) {
            const auto& r = mt.history[i];
            out << r.epoch << ',' << format_sig(r.train_untailored) << ','
                << format_sig(r.train_tailored) << ',' << format_sig(r.val_untailored) << ','
                << format_sig(r.val_tailored) << "\n";
        }
        if (!out) throw IoError("write failed: " + (dir / "noether_history.csv").string());
    }
    json result{{"version", kVersion},
                {"config", run_config_to_json(rc)},
                {"config_hash", cfg_json::hash_hex(run_config_to_json(rc))},
                {"pretrain_mse", br.final_train_mse},
                {"epochs_run", mt.history.empty() ? 0 : mt.history.back().epoch},
                {"ok", mt.ok},
                {"reason", mt.reason},
                {"checkpoint", "noether_checkpoint.json"},
                {"history", "noether_history.csv"}};
    if (!mt.history.empty()) {
        const auto& last = mt.history.back();
        result["final"] = json{{"train_untailored", jnum(last.train_untailored)},
                               {"train_tailored", jnum(last.train_tailored)},
                               {"val_untailored", jnum(last.val_untailored)},
                               {"val_tailored", jnum(last.val_tailored)}};
    }
    write_json_file(dir / "noether_result.json", result);
    if (!mt.ok)
        throw DomainError("meta-training aborted (" + mt.reason +
                          "); last checkpoint retained in " + dir.string());
    const auto& last = mt.history.back();
    std::cout << "meta-trained " << rc.train_epochs << " epochs; val task loss tailored "
              << last.val_tailored << " vs untailored " << last.val_untailored << "\n"
              << "checkpoint: " << (dir / "noether_checkpoint.json").string() << "\n";
    return 0;
}

// Predictions without divergence exceptions: non-finite states simply yield
// non-finite errors, which the curves report as null.
std::vector<State> euler_curve(const MlpSpec& spec, std::span<const double> params, State x0,
                               int T, double dt) {
    std::vector<State> out;
    out.reserve(static_cast<std::size_t>(T));
    double x[2] = {x0.q, x0.p};
    double f[2];
    for (int t = 0; t < T; ++t) {
        mlp_forward(spec, params, x, f);
        x[0] += f[0] * dt;
        x[1] += f[1] * dt;
        if (!std::isfinite(x[0])) x[0] = std::numeric_limits<double>::quiet_NaN();
        if (!std::isfinite(x[1])) x[1] = std::numeric_limits<double>::quiet_NaN();
        out.push_back({x[0], x[1]});
    }
    return out;
}

int cmd_eval(const RunConfig& rc0) {
    RunConfig rc = rc0;
    rc.pipe = resolve_pipeline_config(rc.system, rc.pipe);
    ensure_out_dir(rc);
    std::string ckpt_path = rc.checkpoint_path.empty()
                                ? (fs::path(rc.pipe.out_dir) / "final_model.json").string()
                                : rc.checkpoint_path;
    Checkpoint ckpt = load_checkpoint(ckpt_path);

    std::vector<Trajectory> test;
    if (!rc.data_path.empty()) test = load_input_data(rc);
    else test = make_dataset(rc.system, rc.pipe.data).test;
    if (test.empty()) throw DomainError("empty test set");

    const int H = rc.pipe.eval_horizon;
    const int stride = rc.pipe.window_stride;
    if (H < 1 || stride < 1) throw DomainError("evaluation horizon and stride must be positive");
    const TailorConfig tc = ckpt.cfg;
    MetaProgram prog(ckpt.predictor.spec, ckpt.embedding, tc);
    std::vector<double> phi;
    if (const auto* se = std::get_if<SymbolicEmbedding>(&ckpt.embedding)) phi = se->params;
    else phi = std::get<NeuralEmbedding>(ckpt.embedding).net.params.raw();

    std::vector<double> sq_untail(static_cast<std::size_t>(H), 0.0);
    std::vector<double> sq_tail(static_cast<std::size_t>(H), 0.0);
    int wins = 0;
    for (const auto& tr : test) {
        const int n = static_cast<int>(tr.states.size());
        for (int s = 0; s + H <= n - 1; s += stride) {
            State x0 = tr.states[static_cast<std::size_t>(s)];
            auto gt = std::span<const State>(tr.states)
                          .subspan(static_cast<std::size_t>(s) + 1, static_cast<std::size_t>(H));
            auto plain =
                euler_curve(ckpt.predictor.spec, ckpt.predictor.params.values(), x0, H, tc.dt);
            bool ok = false;
            auto adapted =
                prog.adapted_theta(ckpt.predictor.params.values(), phi, tc.inner_lr, x0, &ok);
            std::vector<State> tail;
            if (ok) tail = euler_curve(ckpt.predictor.spec, adapted, x0, H, tc.dt);
            for (int h = 0; h < H; ++h) {
                auto se_at = [&](const std::vector<State>& pred) {
                    double dq = pred[static_cast<std::size_t>(h)].q -
                                gt[static_cast<std::size_t>(h)].q;
                    double dp = pred[static_cast<std::size_t>(h)].p -
                                gt[static_cast<std::size_t>(h)].p;
                    double e = 0.5 * (dq * dq + dp * dp);
                    return std::isfinite(e) ? e : kInf;
                };
                sq_untail[static_cast<std::size_t>(h)] += se_at(plain);
                sq_tail[static_cast<std::size_t>(h)] += ok ? se_at(tail) : kInf;
            }
            ++wins;
        }
    }
    if (wins == 0)
        throw DomainError("empty test set (no windows of horizon " + std::to_string(H) + ")");

    json horizons = json::array(), rmse_u = json::array(), rmse_t = json::array();
    double tot_u = 0.0, tot_t = 0.0;
    for (int h = 0; h < H; ++h) {
        double mu = sq_untail[static_cast<std::size_t>(h)] / wins;
        double mt = sq_tail[static_cast<std::size_t>(h)] / wins;
        tot_u += mu;
        tot_t += mt;
        horizons.push_back(h + 1);
        rmse_u.push_back(jnum(std::sqrt(mu)));
        rmse_t.push_back(jnum(std::sqrt(mt)));
    }
    double agg_u = std::sqrt(tot_u / H), agg_t = std::sqrt(tot_t / H);
    json metrics{{"version", kVersion},
                 {"config", run_config_to_json(rc)},
                 {"config_hash", cfg_json::hash_hex(run_config_to_json(rc))},
                 {"checkpoint", ckpt_path},
                 {"checkpoint_system", ckpt.system},
                 {"n_windows", wins},
                 {"horizon", horizons},
                 {"rmse_untailored", rmse_u},
                 {"rmse_tailored", rmse_t},
                 {"aggregate_rmse_untailored", jnum(agg_u)},
                 {"aggregate_rmse_tailored", jnum(agg_t)}};
    fs::path out = resolve_out(rc, "metrics.json");
    ensure_parent_dir(out);
    write_json_file(out, metrics);
    std::cout << "aggregate rmse over " << wins << " windows (horizon " << H << "): tailored "
              << agg_t << ", untailored " << agg_u << "\n"
              << "metrics: " << out.string() << "\n";
    return 0;
}

int cmd_probe_inner_steps(const RunConfig& rc0) {
    RunConfig rc = rc0;
    rc.pipe = resolve_pipeline_config(rc.system, rc.pipe);
    ensure_out_dir(rc);
    std::string ckpt_path = rc.checkpoint_path.empty()
                                ? (fs::path(rc.pipe.out_dir) / "final_model.json").string()
                                : rc.checkpoint_path;
    Checkpoint ckpt = load_checkpoint(ckpt_path);

    std::vector<Trajectory> test;
    if (!rc.data_path.empty()) test = load_input_data(rc);
    else test = make_dataset(rc.system, rc.pipe.data).test;
    const int T = ckpt.cfg.horizon;
    const Trajectory* probe_traj = nullptr;
    for (const auto& tr : test)
        if (static_cast<int>(tr.states.size()) > T) {
            probe_traj = &tr;
            break;
        }
    if (!probe_traj)
        throw DomainError("no test trajectory long enough for horizon " + std::to_string(T));
    State x0 = probe_traj->states.front();
    auto gt = std::span<const State>(probe_traj->states).subspan(1, static_cast<std::size_t>(T));

    auto curve = multi_inner_step_probe(ckpt.predictor, ckpt.embedding, x0, gt, ckpt.cfg,
                                        rc.probe);
    fs::path out = resolve_out(rc, "probe.csv");
    ensure_parent_dir(out);
    std::ofstream f(out);
    if (!f) throw IoError("cannot write " + out.string());
    for (const auto& line : csv_notes(rc)) f << "# " << line << "\n";
    f << "# checkpoint " << ckpt_path << "\n";
    f << "step,inner_loss,task_loss\n";
    for (const auto& p : curve)
        f << p.step << ',' << format_sig(p.inner) << ',' << format_sig(p.task) << "\n";
    if (!f) throw IoError("write failed: " + out.string());
    std::cout << "probed " << (curve.empty() ? 0 : curve.back().step) << " adaptation steps; "
              << "curve: " << out.string() << "\n";
    return 0;
}

BoundInputs bound_with(BoundInputs b, const std::string& var, double v) {
    if (var == "C") b.C = v;
    else if (var == "R") b.R = v;
    else if (var == "zeta") b.zeta = v;
    else if (var == "rho") b.rho = static_cast<int>(std::llround(v));
    else if (var == "delta") b.delta = v;
    else if (var == "n") b.n = static_cast<int>(std::llround(v));
    else if (var == "d") b.d = static_cast<int>(std::llround(v));
    else if (var == "m") b.m = static_cast<int>(std::llround(v));
    else throw IoError("unknown sweep variable: " + var +
                       " (expected one of C, R, zeta, rho, delta, n, d, m)");
    return b;
}

int cmd_bound(const RunConfig& rc0) {
    RunConfig rc = rc0;
    ensure_out_dir(rc);
    if (rc.sweep_steps < 1) throw IoError("sweep steps must be at least 1");
    fs::path out = resolve_out(rc, "bound.csv");
    ensure_parent_dir(out);
    std::ofstream f(out);
    if (!f) throw IoError("cannot write " + out.string());
    for (const auto& line : csv_notes(rc)) f << "# " << line << "\n";
    f << "variable,value,bound_conserved,bound_unconserved,gap,error\n";
    int failures = 0;
    for (int i = 0; i < rc.sweep_steps; ++i) {
        double v = rc.sweep_steps == 1
                       ? rc.sweep_lo
                       : rc.sweep_lo + (rc.sweep_hi - rc.sweep_lo) * i / (rc.sweep_steps - 1);
        BoundInputs b = bound_with(rc.bound, rc.sweep_var, v);
        f << rc.sweep_var << ',' << format_sig(v) << ',';
        try {
            BoundComparison cmp = compare_conserved(b);
            f << format_sig(cmp.bound_m) << ',' << format_sig(cmp.bound_d) << ','
              << format_sig(cmp.gap) << ",\n";
        } catch (const DomainError& e) {
            std::string msg = e.what();
            std::replace(msg.begin(), msg.end(), ',', ';');
            f << ",,," << msg << "\n";
            ++failures;
        }
    }
    if (!f) throw IoError("write failed: " + out.string());
    std::cout << "bound sweep over " << rc.sweep_var << " (" << rc.sweep_steps
              << " rows, " << failures << " domain errors): " << out.string() << "\n";
    return 0;
}

int cmd_verify(const RunConfig& rc0, double tol) {
    RunConfig rc = rc0;
    rc.pipe = resolve_pipeline_config(rc.system, rc.pipe);
    std::vector<Trajectory> trajs;
    if (!rc.data_path.empty()) {
        trajs = load_input_data(rc);
    } else {
        Dataset ds = make_dataset(rc.system, rc.pipe.data);
        trajs = ds.train;
        trajs.insert(trajs.end(), ds.test.begin(), ds.test.end());
    }
    if (trajs.empty()) throw DomainError("no trajectories to verify");
    const bool ideal = rc.system.damping == 0.0 && rc.system.noise_std == 0.0 &&
                       rc.system.kind != SystemKind::DissipativePendulum;
    double worst = 0.0;
    int idx = 0;
    for (const auto& tr : trajs) {
        if (tr.states.size() < 2)
            throw DomainError("trajectory " + std::to_string(idx) + ": fewer than 2 states");
        if (!(tr.dt > 0.0))
            throw DomainError("trajectory " + std::to_string(idx) + ": nonpositive dt");
        for (const auto& s : tr.states)
            if (!std::isfinite(s.q) || !std::isfinite(s.p))
                throw DomainError("trajectory " + std::to_string(idx) + ": non-finite state");
        if (ideal) {
            double h0 = hamiltonian(rc.system, tr.states.front());
            double drift = 0.0;
            for (const auto& s : tr.states)
                drift = std::max(drift, std::abs(hamiltonian(rc.system, s) - h0));
            double rel = drift / std::max(std::abs(h0), 1e-12);
            worst = std::max(worst, rel);
            if (rel > tol)
                throw DomainError("trajectory " + std::to_string(idx) +
                                  ": relative energy drift " + std::to_string(rel) +
                                  " exceeds tolerance " + std::to_string(tol));
        }
        ++idx;
    }
    if (ideal)
        std::cout << "verified " << trajs.size() << " trajectories ("
                  << system_kind_name(rc.system.kind) << "): max relative energy drift " << worst
                  << " <= " << tol << "\n";
    else
        std::cout << "verified " << trajs.size() << " trajectories ("
                  << system_kind_name(rc.system.kind) << "): well-formed\n";
    return 0;
}

// --------------------------------------------------------------- front end

struct Cli {
    RunConfig rc;

    std::string config;
    std::string system, variant;
    std::string out_dir, data, checkpoint, out;
    std::uint64_t seed = 0;
    std::uint64_t embed_seed = 0;
    int max_depth = 0, max_nodes = 0, workers = 0, epochs = 0, inner_steps = 0, horizon = 0;
    int shortlist = 0, steps = 0, probe_steps = 0, width = 0;
    double inner_lr = 0.0, outer_lr = 0.0, probe_lr = 0.0, damping = 0.0, noise = 0.0;
    double lo = 0.0, hi = 0.0, tol = 1e-4;
    std::string sweep_var;
    bool resume_on = false, resume_off = false, probe_adam = false;

    std::vector<std::pair<std::string, CLI::Option*>> opts;

    CLI::Option* track(const std::string& name, CLI::Option* o) {
        opts.emplace_back(name, o);
        return o;
    }
    bool has(const std::string& name) const {
        for (const auto& [n, o] : opts)
            if (n == name && o->count() > 0) return true;
        return false;
    }

    void add_common(CLI::App* sub) {
        track("config", sub->add_option("--config", config, "JSON run configuration file"));
        track("system", sub->add_option("--system", system,
                                        "system kind: ideal-spring, ideal-pendulum, "
                                        "dissipative-pendulum"));
        track("damping", sub->add_option("--damping", damping, "damping coefficient"));
        track("noise", sub->add_option("--noise", noise, "observation noise std"));
        track("seed", sub->add_option("--seed", seed, "data generation seed"));
        track("out-dir", sub->add_option("--out-dir", out_dir, "artifact directory"));
        track("workers", sub->add_option("--workers", workers,
                                         "worker threads (0 = all available)"));
    }

    void apply() {
        if (has("config")) run_config_from_json(load_json_file(config), rc);
        if (has("system")) rc.system.kind = parse_system_kind(system);
        if (has("damping")) rc.system.damping = damping;
        if (has("noise")) rc.system.noise_std = noise;
        if (has("seed")) rc.pipe.data.seed = seed;
        if (has("out-dir")) rc.pipe.out_dir = out_dir;
        if (has("workers")) rc.pipe.workers = workers;
        if (has("max-depth")) rc.pipe.enumeration.max_depth = max_depth;
        if (has("max-nodes")) rc.pipe.enumeration.max_nodes = max_nodes;
        if (has("shortlist")) rc.pipe.shortlist_size = shortlist;
        if (has("width")) rc.pipe.baseline.width = width;
        if (resume_on) rc.pipe.resume = true;
        if (resume_off) rc.pipe.resume = false;
        if (has("variant")) rc.pipe.tailor.variant = parse_variant(variant);
        if (has("inner-lr")) rc.pipe.tailor.inner_lr = inner_lr;
        if (has("inner-steps")) rc.pipe.tailor.inner_steps = inner_steps;
        if (has("outer-lr")) rc.pipe.tailor.outer_lr = outer_lr;
        if (has("horizon")) rc.pipe.tailor.horizon = horizon;
        if (has("eval-horizon")) rc.pipe.eval_horizon = steps;
        if (has("epochs")) rc.train_epochs = epochs;
        if (has("embed-seed")) rc.embed_seed = embed_seed;
        if (has("probe-steps")) rc.probe.max_steps = probe_steps;
        if (has("probe-lr")) rc.probe.lr = probe_lr;
        if (probe_adam) rc.probe.adam = true;
        if (has("sweep")) rc.sweep_var = sweep_var;
        if (has("lo")) rc.sweep_lo = lo;
        if (has("hi")) rc.sweep_hi = hi;
        if (has("sweep-steps")) rc.sweep_steps = steps;
        if (has("data")) rc.data_path = data;
        if (has("checkpoint")) rc.checkpoint_path = checkpoint;
        if (has("out")) rc.out_path = out;
    }
};

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"conserved-quantity discovery and prediction-time adaptation toolkit"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    Cli c;

    CLI::App* gen = app.add_subcommand("gen-data", "generate train/test trajectory CSVs");
    c.add_common(gen);

    CLI::App* base = app.add_subcommand("train-baseline", "train the supervised predictor");
    c.add_common(base);
    c.track("epochs", base->add_option("--epochs", c.epochs, "training epochs"));
    c.track("width", base->add_option("--width", c.width, "hidden width"));
    c.track("data", base->add_option("--data", c.data, "trajectory CSV (default: generated)"));

    CLI::App* disc = app.add_subcommand("discover", "run the discovery pipeline");
    c.add_common(disc);
    c.track("max-depth", disc->add_option("--max-depth", c.max_depth, "candidate depth cap"));
    c.track("max-nodes", disc->add_option("--max-nodes", c.max_nodes, "candidate size cap"));
    c.track("shortlist", disc->add_option("--shortlist", c.shortlist, "selection shortlist size"));
    c.track("variant", disc->add_option("--variant", c.variant,
                                        "conservation loss placement: anchor or pairwise"));
    disc->add_flag("--resume", c.resume_on, "reuse stage artifacts with a matching config");
    disc->add_flag("--no-resume", c.resume_off, "recompute every stage");

    CLI::App* noe = app.add_subcommand("train-noether",
                                       "meta-train predictor plus neural embedding");
    c.add_common(noe);
    c.track("epochs", noe->add_option("--epochs", c.epochs, "meta-training epochs"));
    c.track("variant", noe->add_option("--variant", c.variant,
                                       "conservation loss placement: anchor or pairwise"));
    c.track("inner-lr", noe->add_option("--inner-lr", c.inner_lr, "adaptation step size"));
    c.track("inner-steps", noe->add_option("--inner-steps", c.inner_steps, "adaptation steps"));
    c.track("outer-lr", noe->add_option("--outer-lr", c.outer_lr, "meta update step size"));
    c.track("horizon", noe->add_option("--horizon", c.horizon, "prediction window length"));
    c.track("embed-seed", noe->add_option("--embed-seed", c.embed_seed,
                                          "neural embedding init seed"));
    c.track("data", noe->add_option("--data", c.data, "trajectory CSV (default: generated)"));

    CLI::App* ev = app.add_subcommand("eval", "per-horizon RMSE of a checkpoint");
    c.add_common(ev);
    c.track("checkpoint", ev->add_option("--checkpoint", c.checkpoint,
                                         "model checkpoint (default <out-dir>/final_model.json)"));
    c.track("data", ev->add_option("--data", c.data, "test CSV (default: generated test set)"));
    c.track("eval-horizon", ev->add_option("--eval-horizon", c.steps, "evaluation horizon"));
    c.track("out", ev->add_option("--out", c.out, "metrics JSON path"));

    CLI::App* pr = app.add_subcommand("probe-inner-steps",
                                      "repeated-adaptation loss curves on one window");
    c.add_common(pr);
    c.track("checkpoint", pr->add_option("--checkpoint", c.checkpoint,
                                         "model checkpoint (default <out-dir>/final_model.json)"));
    c.track("data", pr->add_option("--data", c.data, "test CSV (default: generated test set)"));
    c.track("probe-steps", pr->add_option("--steps", c.probe_steps, "adaptation steps"));
    c.track("probe-lr", pr->add_option("--lr", c.probe_lr, "adaptation step size"));
    pr->add_flag("--adam", c.probe_adam, "adapt with Adam instead of plain descent");
    c.track("out", pr->add_option("--out", c.out, "curve CSV path"));

    CLI::App* bo = app.add_subcommand("bound", "sample-complexity bound sweep CSV");
    c.add_common(bo);
    c.track("sweep", bo->add_option("--sweep", c.sweep_var,
                                    "variable to sweep: C, R, zeta, rho, delta, n, d, m"));
    c.track("lo", bo->add_option("--lo", c.lo, "sweep start value"));
    c.track("hi", bo->add_option("--hi", c.hi, "sweep end value"));
    c.track("sweep-steps", bo->add_option("--steps", c.steps, "number of sweep rows"));
    c.track("out", bo->add_option("--out", c.out, "sweep CSV path"));

    CLI::App* ver = app.add_subcommand("verify", "check trajectory data (energy drift on "
                                                 "ideal systems, well-formedness otherwise)");
    c.add_common(ver);
    c.track("data", ver->add_option("--data", c.data, "trajectory CSV (default: generated)"));
    ver->add_option("--tol", c.tol, "relative energy drift tolerance");

    std::vector<std::string> rev(args.rbegin(), args.rend());
    try {
        app.parse(std::move(rev));
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        c.apply();
        if (gen->parsed()) return cmd_gen_data(c.rc);
        if (base->parsed()) {
            if (c.has("epochs")) c.rc.pipe.baseline.epochs = c.epochs;
            return cmd_train_baseline(c.rc);
        }
        if (disc->parsed()) return cmd_discover(c.rc);
        if (noe->parsed()) return cmd_train_noether(c.rc);
        if (ev->parsed()) return cmd_eval(c.rc);
        if (pr->parsed()) return cmd_probe_inner_steps(c.rc);
        if (bo->parsed()) return cmd_bound(c.rc);
        if (ver->parsed()) return cmd_verify(c.rc, c.tol);
        std::cerr << "error: no command\n";
        return 2;
    } catch (const DomainError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace conserve
