#include "conserve/discovery.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "config_json.hpp"
#include "conserve/errors.hpp"
#include "conserve/parallel.hpp"
#include "conserve/version.hpp"

namespace conserve {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

using cfg_json::jnum;
using cfg_json::jnum_back;
using cfg_json::load_json_file;
using cfg_json::write_json_file;

json mlp_to_json(const Mlp& m) {
    return json{{"in_dim", m.spec.in_dim},
                {"out_dim", m.spec.out_dim},
                {"hidden", m.spec.hidden},
                {"hidden_layers", m.spec.hidden_layers},
                {"params", m.params.raw()}};
}

Mlp mlp_from_json(const json& j) {
    MlpSpec spec{j.at("in_dim").get<int>(), j.at("out_dim").get<int>(),
                 j.at("hidden").get<int>(), j.at("hidden_layers").get<int>()};
    std::vector<double> p = j.at("params").get<std::vector<double>>();
    if (static_cast<int>(p.size()) != spec.n_params())
        throw IoError("predictor artifact: parameter count mismatch");
    return Mlp{spec, ParamVector(std::move(p))};
}

json report_to_json(const CandidateReport& r) {
    json pu = json::array();
    for (const Unit& u : r.expr.param_units())
        pu.push_back(json::array({static_cast<int>(u.e[0]), static_cast<int>(u.e[1])}));
    return json{{"ordinal", r.ordinal},
                {"sexpr", r.sexpr},
                {"n_nodes", r.n_nodes},
                {"param_units", std::move(pu)},
                {"fitted", r.fitted},
                {"stat_true", jnum(r.stat_true)},
                {"stat_null", jnum(r.stat_null)},
                {"accepted", r.accepted},
                {"exit_stage", r.exit_stage},
                {"reject_reason", r.reject_reason},
                {"best_inner_lr", jnum(r.best_inner_lr)},
                {"tailored_train_mse", jnum(r.tailored_train_mse)}};
}

CandidateReport report_from_json(const json& j, std::span<const Unit> input_units) {
    CandidateReport r;
    r.ordinal = j.at("ordinal").get<int>();
    r.sexpr = j.at("sexpr").get<std::string>();
    std::vector<Unit> pu;
    for (const auto& u : j.at("param_units"))
        pu.push_back(Unit{{static_cast<std::int8_t>(u.at(0).get<int>()),
                           static_cast<std::int8_t>(u.at(1).get<int>())}});
    r.expr = parse_expr(r.sexpr, pu);
    std::string err;
    if (!check_units(r.expr, input_units, &err))
        throw IoError("candidate artifact failed unit check: " + err);
    r.key = canonical_key(r.expr);
    r.n_nodes = r.expr.size();
    r.fitted = j.at("fitted").get<std::vector<double>>();
    r.stat_true = jnum_back(j.at("stat_true"), kInf);
    r.stat_null = jnum_back(j.at("stat_null"), kInf);
    r.accepted = j.at("accepted").get<bool>();
    r.exit_stage = j.at("exit_stage").get<std::string>();
    r.reject_reason = j.at("reject_reason").get<std::string>();
    r.best_inner_lr = jnum_back(j.at("best_inner_lr"), std::numeric_limits<double>::quiet_NaN());
    r.tailored_train_mse =
        jnum_back(j.at("tailored_train_mse"), std::numeric_limits<double>::quiet_NaN());
    return r;
}

void write_screen_csv(const fs::path& p, const std::vector<CandidateReport>& reports) {
    std::ofstream out(p);
    if (!out) throw IoError("cannot write " + p.string());
    out << "ordinal,n_nodes,stat_true,stat_null,ratio,accepted,reason,formula\n";
    char buf[128];
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.6g,%.6g,%.6g,%d,", r.ordinal, r.n_nodes,
                      r.stat_true, r.stat_null, r.ratio(), r.accepted ? 1 : 0);
        out << buf << r.reject_reason << ',' << r.sexpr << '\n';
    }
    if (!out) throw IoError("write failed: " + p.string());
}

// Artifact caching for one pipeline run. A stage result is reused only when
// its file exists, parses, and carries the current config hash.
struct StageIo {
    fs::path dir;
    std::string hash;
    bool resume = true;

    fs::path file(const char* name) const { return dir / name; }

    std::optional<json> fresh(const char* name) const {
        if (!resume) return std::nullopt;
        fs::path p = file(name);
        std::error_code ec;
        if (!fs::exists(p, ec)) return std::nullopt;
        json j;
        try {
            j = load_json_file(p);
        } catch (const IoError&) {
            return std::nullopt;
        }
        if (!j.is_object() || j.value("config_hash", std::string()) != hash)
            return std::nullopt;
        return j;
    }

    void write(const char* name, json payload) const {
        payload["version"] = kVersion;
        payload["config_hash"] = hash;
        write_json_file(file(name), payload);
    }
};

template <typename F>
auto run_stage(const char* name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const DomainError& e) {
        throw DomainError("stage " + std::string(name) + ": " + e.what());
    } catch (const IoError& e) {
        throw IoError("stage " + std::string(name) + ": " + e.what());
    }
}

} // namespace

std::vector<double> default_inner_lr_grid() {
    std::vector<double> grid;
    grid.reserve(9);
    for (int i = -6; i <= 2; ++i) grid.push_back(std::pow(10.0, 0.5 * i));
    return grid;
}

BaselineResult train_predictor(std::span<const Trajectory> train, double dt,
                               const BaselineConfig& cfg, const Mlp* warm_start) {
    std::vector<double> xs, ys; // packed [sample][q p]
    for (const auto& tr : train) {
        double d = tr.dt > 0.0 ? tr.dt : dt;
        if (!(d > 0.0)) throw DomainError("predictor training: nonpositive dt");
        for (std::size_t t = 0; t + 1 < tr.states.size(); ++t) {
            xs.push_back(tr.states[t].q);
            xs.push_back(tr.states[t].p);
            ys.push_back((tr.states[t + 1].q - tr.states[t].q) / d);
            ys.push_back((tr.states[t + 1].p - tr.states[t].p) / d);
        }
    }
    const int N = static_cast<int>(xs.size() / 2);
    if (N == 0) throw DomainError("predictor training: no transition pairs");

    Mlp model = warm_start ? *warm_start
                           : Mlp::init(MlpSpec{2, 2, cfg.width, cfg.hidden_layers}, cfg.seed);
    const MlpSpec spec = model.spec;
    const auto shapes = mlp_layer_shapes(spec);
    const int L = static_cast<int>(shapes.size());
    const int P = spec.n_params();
    std::vector<double>& w = model.params.raw();

    std::vector<std::size_t> offs(static_cast<std::size_t>(L));
    {
        std::size_t off = 0;
        for (int l = 0; l < L; ++l) {
            offs[static_cast<std::size_t>(l)] = off;
            off += static_cast<std::size_t>(shapes[static_cast<std::size_t>(l)][1]) *
                       shapes[static_cast<std::size_t>(l)][0] +
                   shapes[static_cast<std::size_t>(l)][1];
        }
    }

    std::vector<std::vector<double>> act(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l)
        act[static_cast<std::size_t>(l)].assign(
            static_cast<std::size_t>(N) * shapes[static_cast<std::size_t>(l)][1], 0.0);

    auto forward_all = [&]() -> double {
        const double* in = xs.data();
        for (int l = 0; l < L; ++l) {
            const int id = shapes[static_cast<std::size_t>(l)][0];
            const int od = shapes[static_cast<std::size_t>(l)][1];
            const double* W = w.data() + offs[static_cast<std::size_t>(l)];
            const double* b = W + static_cast<std::size_t>(od) * id;
            double* out = act[static_cast<std::size_t>(l)].data();
            const bool last = l + 1 == L;
            for (int n = 0; n < N; ++n) {
                const double* x = in + static_cast<std::size_t>(n) * id;
                double* o = out + static_cast<std::size_t>(n) * od;
                for (int u = 0; u < od; ++u) {
                    double acc = b[u];
                    const double* row = W + static_cast<std::size_t>(u) * id;
                    for (int i = 0; i < id; ++i) acc += row[i] * x[i];
                    o[u] = last ? acc : std::tanh(acc);
                }
            }
            in = out;
        }
        double loss = 0.0;
        const double* pred = act[static_cast<std::size_t>(L - 1)].data();
        for (std::size_t k = 0; k < ys.size(); ++k) {
            double d = pred[k] - ys[k];
            loss += d * d;
        }
        return loss / static_cast<double>(ys.size());
    };

    std::vector<double> gw(static_cast<std::size_t>(P), 0.0);
    std::vector<double> delta, delta_prev;
    auto backward_all = [&]() {
        std::fill(gw.begin(), gw.end(), 0.0);
        delta.assign(ys.size(), 0.0);
        const double* pred = act[static_cast<std::size_t>(L - 1)].data();
        const double s = 2.0 / static_cast<double>(ys.size());
        for (std::size_t k = 0; k < ys.size(); ++k) delta[k] = s * (pred[k] - ys[k]);
        for (int l = L - 1; l >= 0; --l) {
            const int id = shapes[static_cast<std::size_t>(l)][0];
            const int od = shapes[static_cast<std::size_t>(l)][1];
            const double* in = l == 0 ? xs.data() : act[static_cast<std::size_t>(l - 1)].data();
            double* gW = gw.data() + offs[static_cast<std::size_t>(l)];
            double* gb = gW + static_cast<std::size_t>(od) * id;
            const double* W = w.data() + offs[static_cast<std::size_t>(l)];
            if (l > 0) delta_prev.assign(static_cast<std::size_t>(N) * id, 0.0);
            for (int n = 0; n < N; ++n) {
                const double* x = in + static_cast<std::size_t>(n) * id;
                const double* dl = delta.data() + static_cast<std::size_t>(n) * od;
                double* dp = l > 0 ? delta_prev.data() + static_cast<std::size_t>(n) * id
                                   : nullptr;
                for (int u = 0; u < od; ++u) {
                    const double du = dl[u];
                    double* gRow = gW + static_cast<std::size_t>(u) * id;
                    const double* wRow = W + static_cast<std::size_t>(u) * id;
                    for (int i = 0; i < id; ++i) {
                        gRow[i] += du * x[i];
                        if (dp) dp[i] += du * wRow[i];
                    }
                    gb[u] += du;
                }
            }
            if (l > 0) {
                const double* a = act[static_cast<std::size_t>(l - 1)].data();
                for (std::size_t k = 0; k < delta_prev.size(); ++k)
                    delta_prev[k] *= 1.0 - a[k] * a[k];
                delta.swap(delta_prev);
            }
        }
    };

    BaselineResult R;
    R.loss_history.reserve(static_cast<std::size_t>(std::max(cfg.epochs, 0)));
    std::vector<double> m(static_cast<std::size_t>(P), 0.0), v(static_cast<std::size_t>(P), 0.0);
    constexpr double kB1 = 0.9, kB2 = 0.999, kAdamEps = 1e-8;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double loss = forward_all();
        if (!std::isfinite(loss))
            throw DomainError("predictor training diverged at epoch " + std::to_string(epoch));
        R.loss_history.push_back(loss);
        backward_all();
        const double b1c = 1.0 - std::pow(kB1, epoch);
        const double b2c = 1.0 - std::pow(kB2, epoch);
        for (int i = 0; i < P; ++i) {
            std::size_t k = static_cast<std::size_t>(i);
            m[k] = kB1 * m[k] + (1.0 - kB1) * gw[k];
            v[k] = kB2 * v[k] + (1.0 - kB2) * gw[k] * gw[k];
            w[k] -= cfg.lr * (m[k] / b1c) / (std::sqrt(v[k] / b2c) + kAdamEps);
        }
    }
    R.final_train_mse = forward_all();
    if (!std::isfinite(R.final_train_mse))
        throw DomainError("predictor training produced non-finite loss");
    R.model = std::move(model);
    return R;
}

double rollout_mse(const Mlp& f, std::span<const Trajectory> data, int horizon, double dt,
                   int stride) {
    if (horizon < 1 || stride < 1)
        throw DomainError("rollout evaluation: horizon and stride must be positive");
    double total = 0.0;
    int wins = 0;
    for (const auto& tr : data) {
        const int n = static_cast<int>(tr.states.size());
        for (int s = 0; s + horizon <= n - 1; s += stride) {
            try {
                auto preds = rollout(f, tr.states[static_cast<std::size_t>(s)], horizon, dt);
                total += sequence_mse(preds,
                                      std::span<const State>(tr.states)
                                          .subspan(static_cast<std::size_t>(s) + 1,
                                                   static_cast<std::size_t>(horizon)));
            } catch (const DomainError&) {
                return kInf;
            }
            ++wins;
        }
    }
    if (wins == 0) throw DomainError("rollout evaluation: no windows (trajectories too short)");
    double mse = total / static_cast<double>(wins);
    return std::isfinite(mse) ? mse : kInf;
}

double tailored_rollout_mse(const Mlp& f, const Embedding& g, const TailorConfig& cfg,
                            std::span<const Trajectory> data, int eval_horizon, int stride) {
    if (eval_horizon < 1 || stride < 1)
        throw DomainError("rollout evaluation: horizon and stride must be positive");
    MetaProgram prog(f.spec, g, cfg);
    std::vector<double> phi;
    if (const auto* se = std::get_if<SymbolicEmbedding>(&g)) phi = se->params;
    else phi = std::get<NeuralEmbedding>(g).net.params.raw();
    double total = 0.0;
    int wins = 0;
    for (const auto& tr : data) {
        const int n = static_cast<int>(tr.states.size());
        for (int s = 0; s + eval_horizon <= n - 1; s += stride) {
            State x0 = tr.states[static_cast<std::size_t>(s)];
            bool ok = false;
            auto adapted = prog.adapted_theta(f.params.values(), phi, cfg.inner_lr, x0, &ok);
            if (!ok) return kInf;
            try {
                auto preds = rollout(f.spec, adapted, x0, eval_horizon, cfg.dt);
                total += sequence_mse(preds,
                                      std::span<const State>(tr.states)
                                          .subspan(static_cast<std::size_t>(s) + 1,
                                                   static_cast<std::size_t>(eval_horizon)));
            } catch (const DomainError&) {
                return kInf;
            }
            ++wins;
        }
    }
    if (wins == 0) throw DomainError("rollout evaluation: no windows (trajectories too short)");
    double mse = total / static_cast<double>(wins);
    return std::isfinite(mse) ? mse : kInf;
}

std::vector<CandidateReport> screen(std::span<const Expr> candidates,
                                    std::span<const Trajectory> true_data,
                                    std::span<const Trajectory> null_data,
                                    const PipelineConfig& cfg) {
    if (true_data.empty()) throw DomainError("screening: empty training data");
    if (null_data.empty()) throw DomainError("screening: empty null data");
    std::vector<State> probes;
    for (const auto& tr : true_data) {
        if (tr.states.empty()) continue;
        probes.push_back(tr.states.front());
        if (probes.size() >= 16) break;
        probes.push_back(tr.states[tr.states.size() / 2]);
        if (probes.size() >= 16) break;
    }
    if (probes.empty()) throw DomainError("screening: no probe states");

    const int n = static_cast<int>(candidates.size());
    std::vector<CandidateReport> reports(static_cast<std::size_t>(n));
    parallel_for(n, cfg.workers, [&](int i) {
        CandidateReport& r = reports[static_cast<std::size_t>(i)];
        r.ordinal = i;
        r.expr = candidates[static_cast<std::size_t>(i)];
        r.sexpr = serialize(r.expr);
        r.key = canonical_key(r.expr);
        r.n_nodes = r.expr.size();
        CompiledExpr ce = compile_expr(r.expr);
        std::vector<double> init(static_cast<std::size_t>(ce.n_params), cfg.fit.init);
        if (probe_constant(ce, init, probes)) {
            r.stat_true = 0.0;
            r.stat_null = 0.0;
            r.reject_reason = "constant";
            return;
        }
        FitResult fr = fit_params(r.expr, true_data, cfg.fit);
        r.fitted = fr.params;
        if (!fr.ok) {
            r.reject_reason = "unfittable: " + fr.reason;
            return;
        }
        r.stat_true = fr.stat;
        // Each dataset is normalized by its own pooled variance, so the
        // statistic is scale-free and stat_null cannot be inflated by
        // expressions that merely blow up on null states.
        bool ok = true;
        double norm = pooled_variance(ce, r.fitted, null_data, &ok) + cfg.fit.eps;
        StatResult sn;
        if (ok) sn = conservation_stat(ce, r.fitted, null_data, norm);
        if (!sn.ok) {
            r.stat_null = kInf;
            r.reject_reason = "null-eval-failure";
            return;
        }
        r.stat_null = sn.stat;
        r.accepted = r.stat_null > cfg.degenerate_floor &&
                     r.stat_null >= cfg.ratio_threshold * std::max(r.stat_true, cfg.stat_eps);
        if (!r.accepted)
            r.reject_reason = r.stat_null <= cfg.degenerate_floor ? "degenerate" : "ratio";
    });
    std::stable_sort(reports.begin(), reports.end(),
                     [](const CandidateReport& a, const CandidateReport& b) {
                         double ra = a.ratio(), rb = b.ratio();
                         if (ra != rb) return ra < rb;
                         return a.ordinal < b.ordinal;
                     });
    return reports;
}

SelectionResult select_by_metatailoring(std::span<const CandidateReport> shortlist,
                                        const Mlp& pretrained,
                                        std::span<const Trajectory> train,
                                        const PipelineConfig& cfg) {
    if (shortlist.empty()) throw DomainError("selection: empty shortlist");
    SelectionResult res;
    res.reports.assign(shortlist.begin(), shortlist.end());
    res.lr_grid = cfg.inner_lr_grid.empty() ? default_inner_lr_grid() : cfg.inner_lr_grid;
    const int nc = static_cast<int>(res.reports.size());
    const int nl = static_cast<int>(res.lr_grid.size());
    res.cell_mse.assign(static_cast<std::size_t>(nc),
                        std::vector<double>(static_cast<std::size_t>(nl), kInf));

    parallel_for(nc * nl, cfg.workers, [&](int idx) {
        const int c = idx / nl, l = idx % nl;
        TailorConfig tc = cfg.tailor;
        tc.inner_lr = res.lr_grid[static_cast<std::size_t>(l)];
        const auto& rep = res.reports[static_cast<std::size_t>(c)];
        Embedding g = SymbolicEmbedding{rep.expr, rep.fitted};
        MetaTrainResult mt =
            meta_train(pretrained, g, train, {}, tc, cfg.metatailor_epochs, cfg.window_stride);
        if (!mt.ok) return; // cell stays infinite
        double mse = tailored_rollout_mse(mt.predictor, mt.embedding, tc, train,
                                          cfg.eval_horizon, cfg.window_stride);
        if (std::isfinite(mse))
            res.cell_mse[static_cast<std::size_t>(c)][static_cast<std::size_t>(l)] = mse;
    });

    std::vector<double> best(static_cast<std::size_t>(nc), kInf);
    for (int c = 0; c < nc; ++c) {
        int bl = -1;
        double bv = kInf;
        for (int l = 0; l < nl; ++l) {
            double cur = res.cell_mse[static_cast<std::size_t>(c)][static_cast<std::size_t>(l)];
            if (cur < bv) {
                bv = cur;
                bl = l;
            }
        }
        auto& rep = res.reports[static_cast<std::size_t>(c)];
        rep.exit_stage = "select";
        if (bl >= 0) {
            best[static_cast<std::size_t>(c)] = bv;
            rep.best_inner_lr = res.lr_grid[static_cast<std::size_t>(bl)];
            rep.tailored_train_mse = bv;
            rep.reject_reason = "lost-selection";
        } else {
            rep.reject_reason = "diverged";
        }
    }

    const double min_mse = *std::min_element(best.begin(), best.end());
    if (!std::isfinite(min_mse))
        throw DomainError("selection: every (candidate, inner-LR) cell diverged");

    // Near-ties on prediction error are resolved by conservation quality,
    // then by simplicity, then by canonical order.
    std::vector<int> tie;
    for (int c = 0; c < nc; ++c)
        if (best[static_cast<std::size_t>(c)] <= min_mse * (1.0 + cfg.select_tie_rel))
            tie.push_back(c);
    double min_stat = kInf;
    for (int c : tie) min_stat = std::min(min_stat, res.reports[static_cast<std::size_t>(c)].stat_true);
    const double cls = std::max(cfg.stat_tie_rel * min_stat, cfg.stat_tie_floor);
    std::vector<int> pool;
    for (int c : tie)
        if (res.reports[static_cast<std::size_t>(c)].stat_true <= cls) pool.push_back(c);
    if (pool.empty()) pool = tie;

    auto n_divs = [](const Expr& e) {
        int d = 0;
        for (const auto& n : e.nodes)
            d += n.kind == ExprKind::Operation && n.op == Op::Div;
        return d;
    };
    int w = pool.front();
    for (int c : pool) {
        const auto& a = res.reports[static_cast<std::size_t>(c)];
        const auto& b = res.reports[static_cast<std::size_t>(w)];
        if (std::tuple(n_divs(a.expr), a.n_nodes, a.sexpr, a.ordinal) <
            std::tuple(n_divs(b.expr), b.n_nodes, b.sexpr, b.ordinal))
            w = c;
    }
    res.winner_index = w;
    auto& wrep = res.reports[static_cast<std::size_t>(w)];
    wrep.exit_stage = "winner";
    wrep.reject_reason.clear();
    return res;
}

Expr known_invariant_expr(SystemKind kind) {
    ProblemUnits pu = units_for(kind);
    Expr q = make_input(0, pu.input_units[0]);
    Expr p = make_input(1, pu.input_units[1]);
    Expr e;
    if (kind == SystemKind::IdealSpring) {
        Expr par = make_param(pu.input_units[0].squared().over(pu.input_units[1].squared()));
        e = make_binary(Op::Add, make_unary(Op::Sq, q),
                        make_binary(Op::Mul, par, make_unary(Op::Sq, p)));
    } else {
        Expr par = make_param(pu.input_units[1].squared());
        e = make_binary(Op::Add, make_unary(Op::Sq, p),
                        make_binary(Op::Mul, par, make_unary(Op::Cos, q)));
    }
    std::string err;
    if (!check_units(e, pu.input_units, &err))
        throw DomainError("known invariant failed the unit check: " + err);
    return e;
}

std::vector<double> known_invariant_params(SystemKind kind) {
    return kind == SystemKind::IdealSpring ? std::vector<double>{1.0}
                                           : std::vector<double>{-3.0};
}

PipelineConfig resolve_pipeline_config(const SystemSpec& system, PipelineConfig cfg) {
    cfg.data = resolve_data_config(system, cfg.data);
    cfg.tailor.dt = cfg.data.dt;
    if (cfg.inner_lr_grid.empty()) cfg.inner_lr_grid = default_inner_lr_grid();
    return cfg;
}

DiscoveryResult run_pipeline(const SystemSpec& system, const PipelineConfig& raw_cfg) {
    const PipelineConfig cfg = resolve_pipeline_config(system, raw_cfg);
    const json cfg_echo = cfg_json::pipeline_to_json(system, cfg);
    const std::string hash = cfg_json::hash_hex(cfg_echo);
    const fs::path dir(cfg.out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec)
        throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    StageIo io{dir, hash, cfg.resume};
    io.write("manifest.json", json{{"config", cfg_echo}});

    DiscoveryResult R;
    R.system = system;
    R.out_dir = dir.string();

    // Data is cheap and deterministic in the seed, so it is regenerated in
    // memory every run; the CSV artifacts exist for inspection.
    Dataset ds;
    std::vector<Trajectory> null_data;
    const std::uint64_t null_seed = cfg.data.seed * 2654435761ull + 424243ull;
    run_stage("data", [&] {
        ds = make_dataset(system, cfg.data);
        null_data = sample_null_sequences(ds.train, cfg.n_null, null_seed);
        if (!io.fresh("data.json")) {
            std::vector<std::string> note{"config_hash " + hash};
            save_trajectories_csv(dir / "train.csv", ds.train, note);
            save_trajectories_csv(dir / "test.csv", ds.test, note);
            save_trajectories_csv(dir / "null.csv", null_data, note);
            io.write("data.json",
                     json{{"system", cfg_json::system_to_json(system)},
                          {"n_train", ds.train.size()},
                          {"n_test", ds.test.size()},
                          {"n_null", null_data.size()},
                          {"seed", cfg.data.seed},
                          {"null_seed", null_seed},
                          {"dt", cfg.data.dt},
                          {"states_per_traj", cfg.data.states_per_traj}});
        }
    });
    R.dataset = ds;

    BaselineResult base;
    run_stage("baseline", [&] {
        if (auto j = io.fresh("baseline.json")) {
            base.model = mlp_from_json(j->at("model"));
            base.final_train_mse = j->at("final_train_mse").get<double>();
            base.loss_history = j->at("loss_history").get<std::vector<double>>();
            return;
        }
        base = train_predictor(ds.train, cfg.data.dt, cfg.baseline);
        io.write("baseline.json", json{{"model", mlp_to_json(base.model)},
                                       {"final_train_mse", base.final_train_mse},
                                       {"loss_history", base.loss_history},
                                       {"epochs", cfg.baseline.epochs}});
    });
    R.baseline = base.model;
    R.baseline_train_mse = base.final_train_mse;

    const ProblemUnits units =
        units_for(system.kind, cfg.enumeration.param_exp_lo, cfg.enumeration.param_exp_hi);
    std::vector<Expr> candidates;
    run_stage("enumerate", [&] {
        candidates = enumerate_exprs(cfg.enumeration, units);
        if (candidates.empty()) throw DomainError("no candidate expressions enumerated");
        if (!io.fresh("enumerate.json"))
            io.write("enumerate.json", json{{"count", candidates.size()},
                                            {"max_depth", cfg.enumeration.max_depth},
                                            {"max_nodes", cfg.enumeration.max_nodes},
                                            {"max_params", cfg.enumeration.max_params}});
    });
    R.counts.enumerated = static_cast<int>(candidates.size());

    std::vector<CandidateReport> reports;
    run_stage("screen", [&] {
        if (auto j = io.fresh("screen.json")) {
            for (const auto& rj : j->at("reports"))
                reports.push_back(report_from_json(rj, units.input_units));
            return;
        }
        reports = screen(candidates, ds.train, null_data, cfg);
        json arr = json::array();
        for (const auto& r : reports) arr.push_back(report_to_json(r));
        io.write("screen.json", json{{"reports", std::move(arr)}});
        write_screen_csv(dir / "screen.csv", reports);
    });
    R.counts.screened = static_cast<int>(reports.size());

    std::vector<CandidateReport> shortlist;
    run_stage("shortlist", [&] {
        for (auto& r : reports) {
            if (!r.accepted) continue;
            ++R.counts.accepted;
            r.exit_stage = "shortlist";
            if (static_cast<int>(shortlist.size()) < cfg.shortlist_size) shortlist.push_back(r);
            else r.reject_reason = "below-cut";
        }
        if (shortlist.empty()) throw DomainError("no candidate passed conservation screening");
        if (!io.fresh("shortlist.json")) {
            json ords = json::array();
            for (const auto& r : shortlist) ords.push_back(r.ordinal);
            io.write("shortlist.json",
                     json{{"ordinals", std::move(ords)}, {"size", shortlist.size()}});
        }
    });
    R.counts.shortlisted = static_cast<int>(shortlist.size());

    SelectionResult sel;
    run_stage("select", [&] {
        if (auto j = io.fresh("selection.json")) {
            sel.lr_grid = j->at("lr_grid").get<std::vector<double>>();
            sel.winner_index = j->at("winner_index").get<int>();
            for (const auto& rj : j->at("reports"))
                sel.reports.push_back(report_from_json(rj, units.input_units));
            for (const auto& row : j->at("cell_mse")) {
                std::vector<double> r;
                for (const auto& c : row) r.push_back(jnum_back(c, kInf));
                sel.cell_mse.push_back(std::move(r));
            }
            if (sel.winner_index < 0 ||
                sel.winner_index >= static_cast<int>(sel.reports.size()))
                throw IoError("selection artifact: winner index out of range");
            return;
        }
        sel = select_by_metatailoring(shortlist, base.model, ds.train, cfg);
        json rep = json::array();
        for (const auto& r : sel.reports) rep.push_back(report_to_json(r));
        json cells = json::array();
        for (const auto& row : sel.cell_mse) {
            json jr = json::array();
            for (double c : row) jr.push_back(jnum(c));
            cells.push_back(std::move(jr));
        }
        io.write("selection.json", json{{"lr_grid", sel.lr_grid},
                                        {"winner_index", sel.winner_index},
                                        {"reports", std::move(rep)},
                                        {"cell_mse", std::move(cells)}});
    });
    for (const auto& r : sel.reports)
        if (std::isfinite(r.tailored_train_mse)) ++R.counts.selected;
    // Fold the selection outcomes back into the full audit list.
    for (auto& r : reports)
        for (const auto& s : sel.reports)
            if (s.ordinal == r.ordinal) {
                r = s;
                break;
            }
    const CandidateReport winner = sel.reports[static_cast<std::size_t>(sel.winner_index)];
    R.selection = sel;
    R.winner = winner;

    run_stage("final", [&] {
        TailorConfig tw = cfg.tailor;
        tw.inner_lr = winner.best_inner_lr;
        if (auto j = io.fresh("final.json")) {
            R.tailored_test_rmse = jnum_back(j->at("tailored_test_rmse"), kInf);
            R.baseline_test_rmse = jnum_back(j->at("baseline_test_rmse"), kInf);
            R.oracle_test_rmse = jnum_back(j->at("oracle_test_rmse"), kInf);
            Checkpoint c = load_checkpoint((dir / "final_model.json").string());
            R.tailored_predictor = c.predictor;
            return;
        }
        if (!std::isfinite(tw.inner_lr))
            throw DomainError("winner has no convergent inner learning rate");
        Embedding wg = SymbolicEmbedding{winner.expr, winner.fitted};
        MetaTrainResult mt =
            meta_train(base.model, wg, ds.train, ds.test, tw, cfg.final_epochs,
                       cfg.window_stride);
        if (!mt.ok) throw DomainError("winner meta-training failed: " + mt.reason);
        double t_mse = tailored_rollout_mse(mt.predictor, mt.embedding, tw, ds.test,
                                            cfg.eval_horizon, cfg.window_stride);

        // Equal-total-epochs reference: keep training the pretrained
        // predictor on the supervised objective for the same extra epochs.
        BaselineConfig ext = cfg.baseline;
        ext.epochs = cfg.final_epochs;
        BaselineResult extb = train_predictor(ds.train, cfg.data.dt, ext, &base.model);
        double b_mse =
            rollout_mse(extb.model, ds.test, cfg.eval_horizon, cfg.data.dt, cfg.window_stride);

        // Known-quantity reference run with the identical two-phase
        // procedure, including its own inner-LR choice: the right step size
        // scales with the embedding, so borrowing the winner's LR would
        // handicap a differently-scaled reference formula.
        Embedding og = SymbolicEmbedding{known_invariant_expr(system.kind),
                                         known_invariant_params(system.kind)};
        const auto lrs = cfg.inner_lr_grid.empty() ? default_inner_lr_grid() : cfg.inner_lr_grid;
        TailorConfig to = tw;
        double probe_best = kInf;
        for (double lr : lrs) {
            TailorConfig tc = cfg.tailor;
            tc.inner_lr = lr;
            MetaTrainResult m = meta_train(base.model, og, ds.train, {}, tc,
                                           cfg.metatailor_epochs, cfg.window_stride);
            if (!m.ok) continue;
            double mse = tailored_rollout_mse(m.predictor, m.embedding, tc, ds.train,
                                              cfg.eval_horizon, cfg.window_stride);
            if (mse < probe_best) {
                probe_best = mse;
                to = tc;
            }
        }
        double o_mse = kInf;
        if (std::isfinite(probe_best)) {
            MetaTrainResult omt = meta_train(base.model, og, ds.train, ds.test, to,
                                             cfg.final_epochs, cfg.window_stride);
            if (omt.ok)
                o_mse = tailored_rollout_mse(omt.predictor, omt.embedding, to, ds.test,
                                             cfg.eval_horizon, cfg.window_stride);
        }

        R.tailored_test_rmse = std::sqrt(t_mse);
        R.baseline_test_rmse = std::sqrt(b_mse);
        R.oracle_test_rmse = std::sqrt(o_mse);
        R.tailored_predictor = mt.predictor;
        save_checkpoint((dir / "final_model.json").string(),
                        Checkpoint{mt.predictor, mt.embedding, tw,
                                   system_kind_name(system.kind)});
        io.write("final.json", json{{"tailored_test_rmse", jnum(R.tailored_test_rmse)},
                                    {"baseline_test_rmse", jnum(R.baseline_test_rmse)},
                                    {"oracle_test_rmse", jnum(R.oracle_test_rmse)},
                                    {"winner_ordinal", winner.ordinal},
                                    {"winner_sexpr", winner.sexpr},
                                    {"winner_inner_lr", jnum(winner.best_inner_lr)},
                                    {"oracle_inner_lr", jnum(to.inner_lr)},
                                    {"final_epochs", cfg.final_epochs},
                                    {"eval_horizon", cfg.eval_horizon}});
    });

    io.write("result.json",
             json{{"config", cfg_echo},
                  {"system", system_kind_name(system.kind)},
                  {"counts", json{{"enumerated", R.counts.enumerated},
                                  {"screened", R.counts.screened},
                                  {"accepted", R.counts.accepted},
                                  {"shortlisted", R.counts.shortlisted},
                                  {"selected", R.counts.selected}}},
                  {"winner", report_to_json(winner)},
                  {"tailored_test_rmse", jnum(R.tailored_test_rmse)},
                  {"baseline_test_rmse", jnum(R.baseline_test_rmse)},
                  {"oracle_test_rmse", jnum(R.oracle_test_rmse)}});
    R.screen_reports = std::move(reports);
    return R;
}

} // namespace conserve
