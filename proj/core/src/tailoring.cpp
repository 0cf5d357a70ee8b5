#include "conserve/tailoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <random>

#include <nlohmann/json.hpp>

#include "conserve/errors.hpp"
#include "conserve/version.hpp"

namespace conserve {

namespace {

using nlohmann::json;

struct LayerShape {
    int in, out;
};

std::vector<LayerShape> layer_shapes(const MlpSpec& s) {
    std::vector<LayerShape> shapes;
    int in = s.in_dim;
    for (int l = 0; l < s.hidden_layers; ++l) {
        shapes.push_back({in, s.hidden});
        in = s.hidden;
    }
    shapes.push_back({in, s.out_dim});
    return shapes;
}

} // namespace

int MlpSpec::n_params() const {
    int n = 0;
    for (const auto& sh : layer_shapes(*this)) n += sh.out * sh.in + sh.out;
    return n;
}

std::vector<std::array<int, 2>> mlp_layer_shapes(const MlpSpec& spec) {
    std::vector<std::array<int, 2>> out;
    for (const auto& sh : layer_shapes(spec)) out.push_back({sh.in, sh.out});
    return out;
}

Mlp Mlp::init(const MlpSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(spec.n_params()));
    for (const auto& sh : layer_shapes(spec)) {
        double s = std::sqrt(6.0 / (sh.in + sh.out));
        std::uniform_real_distribution<double> dist(-s, s);
        for (int i = 0; i < sh.out * sh.in; ++i) w.push_back(dist(rng));
        for (int i = 0; i < sh.out; ++i) w.push_back(0.0);
    }
    return Mlp{spec, ParamVector(std::move(w))};
}

void mlp_forward(const MlpSpec& spec, std::span<const double> params,
                 std::span<const double> in, std::span<double> out) {
    if (static_cast<int>(params.size()) != spec.n_params())
        throw DomainError("mlp_forward: parameter count mismatch");
    std::vector<double> cur(in.begin(), in.end());
    std::vector<double> next;
    std::size_t off = 0;
    auto shapes = layer_shapes(spec);
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        const auto& sh = shapes[l];
        next.assign(static_cast<std::size_t>(sh.out), 0.0);
        for (int u = 0; u < sh.out; ++u) {
            double acc = params[off + static_cast<std::size_t>(sh.out) * sh.in + u]; // bias
            const double* wrow = params.data() + off + static_cast<std::size_t>(u) * sh.in;
            for (int i = 0; i < sh.in; ++i) acc += wrow[i] * cur[static_cast<std::size_t>(i)];
            next[static_cast<std::size_t>(u)] =
                l + 1 == shapes.size() ? acc : std::tanh(acc);
        }
        off += static_cast<std::size_t>(sh.out) * sh.in + sh.out;
        cur.swap(next);
    }
    std::copy(cur.begin(), cur.end(), out.begin());
}

void Mlp::forward(std::span<const double> in, std::span<double> out) const {
    mlp_forward(spec, params.values(), in, out);
}

int embedding_dim(const Embedding& g) {
    if (std::holds_alternative<SymbolicEmbedding>(g)) return 1;
    return std::get<NeuralEmbedding>(g).net.spec.out_dim;
}

std::vector<double> embedding_value(const Embedding& g, State s, bool* ok) {
    if (const auto* se = std::get_if<SymbolicEmbedding>(&g)) {
        EvalResult r = eval_expr(se->expr, se->params, s);
        if (ok) *ok = r.ok;
        return {r.value};
    }
    const auto& ne = std::get<NeuralEmbedding>(g);
    std::vector<double> out(static_cast<std::size_t>(ne.net.spec.out_dim));
    double in[2] = {s.q, s.p};
    ne.net.forward(in, out);
    if (ok) {
        *ok = true;
        for (double v : out) *ok &= std::isfinite(v);
    }
    return out;
}

const char* variant_name(LossVariant v) {
    return v == LossVariant::AnchorA ? "anchor" : "pairwise";
}

LossVariant parse_variant(const std::string& name) {
    if (name == "anchor" || name == "a" || name == "A") return LossVariant::AnchorA;
    if (name == "pairwise" || name == "b" || name == "B") return LossVariant::PairwiseB;
    throw IoError("unknown loss variant: " + name);
}

std::vector<State> rollout(const MlpSpec& spec, std::span<const double> params, State x0,
                           int T, double dt) {
    if (T < 1) throw DomainError("rollout: horizon must be at least 1");
    std::vector<State> out;
    out.reserve(static_cast<std::size_t>(T));
    double x[2] = {x0.q, x0.p};
    double f[2];
    for (int t = 0; t < T; ++t) {
        mlp_forward(spec, params, x, f);
        x[0] += f[0] * dt;
        x[1] += f[1] * dt;
        if (!std::isfinite(x[0]) || !std::isfinite(x[1]))
            throw DomainError("prediction rollout diverged at step " + std::to_string(t + 1));
        out.push_back({x[0], x[1]});
    }
    return out;
}

std::vector<State> rollout(const Mlp& f, State x0, int T, double dt) {
    return rollout(f.spec, f.params.values(), x0, T, dt);
}

double conservation_loss_values(std::span<const std::vector<double>> seq, LossVariant v) {
    if (seq.size() < 2) throw DomainError("conservation loss needs at least one prediction");
    double loss = 0.0;
    for (std::size_t t = 1; t < seq.size(); ++t) {
        const auto& ref = v == LossVariant::AnchorA ? seq[0] : seq[t - 1];
        const auto& cur = seq[t];
        for (std::size_t k = 0; k < cur.size(); ++k) {
            double d = ref[k] - cur[k];
            loss += d * d;
        }
    }
    return loss;
}

double conservation_loss(const Embedding& g, State x0, std::span<const State> preds,
                         LossVariant v, bool* ok) {
    bool fine = true;
    std::vector<std::vector<double>> seq;
    seq.reserve(preds.size() + 1);
    bool o = true;
    seq.push_back(embedding_value(g, x0, &o));
    fine &= o;
    for (const auto& s : preds) {
        seq.push_back(embedding_value(g, s, &o));
        fine &= o;
    }
    double loss = conservation_loss_values(seq, v);
    fine &= std::isfinite(loss);
    if (ok) *ok = fine;
    return loss;
}

namespace {

// Emits an MLP forward pass; parameters and inputs are existing tape nodes.
std::vector<int> emit_mlp(Tape& t, const MlpSpec& spec, std::span<const int> pnodes,
                          std::span<const int> in_nodes) {
    std::vector<int> cur(in_nodes.begin(), in_nodes.end());
    std::vector<int> next;
    std::size_t off = 0;
    std::vector<DotTerm> terms;
    auto shapes = layer_shapes(spec);
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        const auto& sh = shapes[l];
        next.clear();
        for (int u = 0; u < sh.out; ++u) {
            terms.clear();
            for (int i = 0; i < sh.in; ++i)
                terms.push_back({pnodes[off + static_cast<std::size_t>(u) * sh.in + i],
                                 cur[static_cast<std::size_t>(i)], 1.0});
            terms.push_back(
                {pnodes[off + static_cast<std::size_t>(sh.out) * sh.in + u], -1, 1.0});
            int id = t.dot(terms);
            next.push_back(l + 1 == shapes.size() ? id : t.tanh(id));
        }
        off += static_cast<std::size_t>(sh.out) * sh.in + sh.out;
        cur.swap(next);
    }
    return cur;
}

// Emits a formula; Param slots map to phi_nodes in traversal order.
int emit_expr(Tape& t, const Expr& e, std::span<const int> in_nodes,
              std::span<const int> phi_nodes) {
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
    assign(e.root());
    if (slots > static_cast<int>(phi_nodes.size()))
        throw DomainError("embedding formula has more parameters than provided");
    std::vector<int> id(e.nodes.size(), -1);
    for (std::size_t i = 0; i < e.nodes.size(); ++i) {
        const auto& nd = e.nodes[i];
        switch (nd.kind) {
            case ExprKind::Param: id[i] = phi_nodes[static_cast<std::size_t>(slot_of[i])]; break;
            case ExprKind::Input:
                if (nd.input < 0 || nd.input >= static_cast<int>(in_nodes.size()))
                    throw DomainError("embedding formula input out of range");
                id[i] = in_nodes[static_cast<std::size_t>(nd.input)];
                break;
            case ExprKind::Operation: {
                int a = id[static_cast<std::size_t>(nd.a)];
                int b = nd.b >= 0 ? id[static_cast<std::size_t>(nd.b)] : -1;
                switch (nd.op) {
                    case Op::Add: id[i] = t.add(a, b); break;
                    case Op::Sub: id[i] = t.sub(a, b); break;
                    case Op::Mul: id[i] = t.mul(a, b); break;
                    case Op::Div: id[i] = t.div(a, b); break;
                    case Op::Sin: id[i] = t.sin(a); break;
                    case Op::Cos: id[i] = t.cos(a); break;
                    case Op::Sq: id[i] = t.sq(a); break;
                    default: throw DomainError("embedding formula op unsupported");
                }
                break;
            }
        }
    }
    return id.back();
}

std::vector<int> emit_embedding(Tape& t, const Embedding& g, std::span<const int> in_nodes,
                                std::span<const int> phi_nodes) {
    if (const auto* se = std::get_if<SymbolicEmbedding>(&g))
        return {emit_expr(t, se->expr, in_nodes, phi_nodes)};
    return emit_mlp(t, std::get<NeuralEmbedding>(g).net.spec, phi_nodes, in_nodes);
}

} // namespace

MetaProgram::MetaProgram(const MlpSpec& f_spec, const Embedding& g, const TailorConfig& cfg)
    : f_spec_(f_spec), cfg_(cfg) {
    if (cfg.horizon < 1 || cfg.inner_steps < 1)
        throw DomainError("tailoring config: horizon and inner_steps must be at least 1");
    n_theta_ = f_spec.n_params();
    if (const auto* se = std::get_if<SymbolicEmbedding>(&g))
        n_phi_ = static_cast<int>(se->params.size());
    else
        n_phi_ = std::get<NeuralEmbedding>(g).net.spec.n_params();

    const int T = cfg.horizon;
    const int lambda_idx = n_theta_ + n_phi_;
    const int x0_idx = lambda_idx + 1;
    const int gt_idx = x0_idx + 2;

    for (int i = 0; i < n_theta_; ++i) theta_leaves_.push_back(tape_.leaf(i));
    for (int i = 0; i < n_phi_; ++i) phi_leaves_.push_back(tape_.leaf(n_theta_ + i));
    const int lambda_node = tape_.leaf(lambda_idx);
    const int x0q = tape_.leaf(x0_idx), x0p = tape_.leaf(x0_idx + 1);
    std::vector<int> gt_nodes;
    for (int i = 0; i < 2 * T; ++i) gt_nodes.push_back(tape_.leaf(gt_idx + i));

    auto build_rollout = [&](const std::vector<int>& th) {
        std::vector<std::array<int, 2>> preds;
        int cq = x0q, cp = x0p;
        for (int t = 0; t < T; ++t) {
            int in[2] = {cq, cp};
            auto f = emit_mlp(tape_, f_spec_, th, in);
            DotTerm nq[2] = {{cq, -1, 1.0}, {f[0], -1, cfg_.dt}};
            DotTerm np[2] = {{cp, -1, 1.0}, {f[1], -1, cfg_.dt}};
            cq = tape_.dot(nq);
            cp = tape_.dot(np);
            preds.push_back({cq, cp});
        }
        return preds;
    };
    const int g0q = x0q, g0p = x0p;
    int in0[2] = {g0q, g0p};
    std::vector<int> g_at_x0 = emit_embedding(tape_, g, in0, phi_leaves_);
    auto build_penalty = [&](const std::vector<std::array<int, 2>>& preds) {
        std::vector<std::vector<int>> gv;
        gv.push_back(g_at_x0);
        for (const auto& pr : preds) {
            int in[2] = {pr[0], pr[1]};
            gv.push_back(emit_embedding(tape_, g, in, phi_leaves_));
        }
        std::vector<DotTerm> terms;
        for (std::size_t s = 1; s < gv.size(); ++s) {
            const auto& ref = cfg_.variant == LossVariant::AnchorA ? gv[0] : gv[s - 1];
            for (std::size_t k = 0; k < gv[s].size(); ++k) {
                int d = tape_.sub(ref[k], gv[s][k]);
                terms.push_back({tape_.sq(d), -1, 1.0});
            }
        }
        return tape_.dot(terms);
    };
    auto build_mse = [&](const std::vector<std::array<int, 2>>& preds) {
        std::vector<DotTerm> terms;
        double w = 1.0 / (2.0 * T);
        for (int t = 0; t < T; ++t) {
            for (int d = 0; d < 2; ++d) {
                int diff = tape_.sub(preds[static_cast<std::size_t>(t)][static_cast<std::size_t>(d)],
                                     gt_nodes[static_cast<std::size_t>(2 * t + d)]);
                terms.push_back({tape_.sq(diff), -1, w});
            }
        }
        return tape_.dot(terms);
    };

    auto preds0 = build_rollout(theta_leaves_);
    inner_node_ = build_penalty(preds0);
    untailored_node_ = build_mse(preds0);

    std::vector<int> cur = theta_leaves_;
    int penalty = inner_node_;
    for (int s = 0; s < cfg_.inner_steps; ++s) {
        auto adj = tape_.gradient_nodes_wrt(penalty, cur);
        std::vector<int> next(cur.size());
        for (std::size_t i = 0; i < cur.size(); ++i) {
            DotTerm upd[2] = {{cur[i], -1, 1.0}, {lambda_node, adj[i], -1.0}};
            next[i] = tape_.dot(upd);
        }
        cur = std::move(next);
        if (s + 1 < cfg_.inner_steps) penalty = build_penalty(build_rollout(cur));
    }
    adapted_nodes_ = cur;
    tailored_node_ = build_mse(build_rollout(adapted_nodes_));

    leaves_.assign(static_cast<std::size_t>(gt_idx + 2 * T), 0.0);
    eval_ = std::make_unique<Evaluator>(tape_);
}

void MetaProgram::set_leaves(std::span<const double> theta, std::span<const double> phi,
                             double inner_lr, State x0, std::span<const State> gt) {
    if (static_cast<int>(theta.size()) != n_theta_ || static_cast<int>(phi.size()) != n_phi_)
        throw DomainError("meta graph: parameter size mismatch");
    std::copy(theta.begin(), theta.end(), leaves_.begin());
    std::copy(phi.begin(), phi.end(), leaves_.begin() + n_theta_);
    leaves_[static_cast<std::size_t>(n_theta_ + n_phi_)] = inner_lr;
    leaves_[static_cast<std::size_t>(n_theta_ + n_phi_) + 1] = x0.q;
    leaves_[static_cast<std::size_t>(n_theta_ + n_phi_) + 2] = x0.p;
    std::size_t base = static_cast<std::size_t>(n_theta_ + n_phi_) + 3;
    for (std::size_t t = 0; t < gt.size(); ++t) {
        leaves_[base + 2 * t] = gt[t].q;
        leaves_[base + 2 * t + 1] = gt[t].p;
    }
}

MetaProgram::Losses MetaProgram::losses(std::span<const double> theta,
                                        std::span<const double> phi, double inner_lr,
                                        State x0, std::span<const State> gt) {
    if (static_cast<int>(gt.size()) != cfg_.horizon)
        throw DomainError("meta graph: ground truth length must equal the horizon");
    set_leaves(theta, phi, inner_lr, x0, gt);
    EvalResult r = eval_->forward(leaves_, tailored_node_);
    Losses L;
    L.inner = eval_->value(inner_node_);
    L.untailored = eval_->value(untailored_node_);
    L.tailored = eval_->value(tailored_node_);
    L.ok = std::isfinite(L.inner) && std::isfinite(L.untailored) && std::isfinite(L.tailored) &&
           r.ok;
    return L;
}

bool MetaProgram::outer_grads(std::span<const double> theta, std::span<const double> phi,
                              double inner_lr, State x0, std::span<const State> gt,
                              std::span<double> dtheta, std::span<double> dphi,
                              Losses* losses_out) {
    Losses L = losses(theta, phi, inner_lr, x0, gt);
    if (losses_out) *losses_out = L;
    if (!L.ok) return false;
    std::vector<int> wrt;
    wrt.reserve(static_cast<std::size_t>(n_theta_ + n_phi_));
    for (int i = 0; i < n_theta_ + n_phi_; ++i) wrt.push_back(i);
    std::vector<double> grad(wrt.size());
    if (!eval_->reverse(tailored_node_, wrt, grad)) return false;
    for (int i = 0; i < n_theta_; ++i) dtheta[static_cast<std::size_t>(i)] += grad[static_cast<std::size_t>(i)];
    for (int i = 0; i < n_phi_; ++i)
        dphi[static_cast<std::size_t>(i)] += grad[static_cast<std::size_t>(n_theta_ + i)];
    return true;
}

std::vector<double> MetaProgram::adapted_theta(std::span<const double> theta,
                                               std::span<const double> phi, double inner_lr,
                                               State x0, bool* ok) {
    set_leaves(theta, phi, inner_lr, x0, {});
    EvalResult r = eval_->forward(leaves_, adapted_nodes_.back());
    std::vector<double> out(static_cast<std::size_t>(n_theta_));
    bool fine = r.ok;
    for (int i = 0; i < n_theta_; ++i) {
        out[static_cast<std::size_t>(i)] = eval_->value(adapted_nodes_[static_cast<std::size_t>(i)]);
        fine &= std::isfinite(out[static_cast<std::size_t>(i)]);
    }
    if (ok) *ok = fine;
    return out;
}

bool MetaProgram::inner_grad(std::span<const double> theta, std::span<const double> phi,
                             State x0, std::span<double> dtheta, double* inner_value) {
    set_leaves(theta, phi, 0.0, x0, {});
    EvalResult r = eval_->forward(leaves_, inner_node_);
    if (inner_value) *inner_value = eval_->value(inner_node_);
    if (!r.ok) return false;
    std::vector<int> wrt;
    wrt.reserve(static_cast<std::size_t>(n_theta_));
    for (int i = 0; i < n_theta_; ++i) wrt.push_back(i);
    return eval_->reverse(inner_node_, wrt, dtheta);
}

ParamVector tailor_step(const Mlp& f, const Embedding& g, State x0, const TailorConfig& cfg,
                        bool* ok) {
    MetaProgram prog(f.spec, g, cfg);
    std::vector<double> phi;
    if (const auto* se = std::get_if<SymbolicEmbedding>(&g)) phi = se->params;
    else phi = std::get<NeuralEmbedding>(g).net.params.raw();
    bool fine = false;
    std::vector<double> adapted =
        prog.adapted_theta(f.params.values(), phi, cfg.inner_lr, x0, &fine);
    if (ok) *ok = fine;
    if (!fine) return f.params;
    return ParamVector(std::move(adapted));
}

std::vector<State> predict_sequence(const Mlp& f, const Embedding& g, State x0,
                                    const TailorConfig& cfg, bool* ok) {
    bool fine = false;
    ParamVector adapted = tailor_step(f, g, x0, cfg, &fine);
    if (!fine) {
        if (!ok) throw DomainError("tailoring failed: non-finite adaptation");
        *ok = false;
        return {};
    }
    try {
        auto preds = rollout(f.spec, adapted.values(), x0, cfg.horizon, cfg.dt);
        if (ok) *ok = true;
        return preds;
    } catch (const DomainError&) {
        if (!ok) throw;
        *ok = false;
        return {};
    }
}

double sequence_mse(std::span<const State> pred, std::span<const State> gt) {
    if (pred.size() != gt.size() || pred.empty())
        throw DomainError("sequence_mse: length mismatch");
    double acc = 0.0;
    for (std::size_t t = 0; t < pred.size(); ++t) {
        double dq = pred[t].q - gt[t].q, dp = pred[t].p - gt[t].p;
        acc += dq * dq + dp * dp;
    }
    return acc / (2.0 * static_cast<double>(pred.size()));
}

namespace {

struct Window {
    State x0;
    std::span<const State> gt;
};

std::vector<Window> make_windows(std::span<const Trajectory> trajs, int T, int stride) {
    std::vector<Window> wins;
    for (const auto& tr : trajs) {
        int n = static_cast<int>(tr.states.size());
        for (int t0 = 0; t0 + T <= n - 1; t0 += stride)
            wins.push_back({tr.states[static_cast<std::size_t>(t0)],
                            std::span<const State>(tr.states).subspan(
                                static_cast<std::size_t>(t0) + 1, static_cast<std::size_t>(T))});
    }
    return wins;
}

} // namespace

MetaTrainResult meta_train(const Mlp& f, const Embedding& g, std::span<const Trajectory> train,
                           std::span<const Trajectory> val, const TailorConfig& cfg, int epochs,
                           int window_stride) {
    MetaTrainResult R;
    R.predictor = f;
    R.embedding = g;
    if (epochs < 0 || window_stride < 1) throw DomainError("meta_train: bad schedule");
    auto train_wins = make_windows(train, cfg.horizon, window_stride);
    auto val_wins = make_windows(val, cfg.horizon, window_stride);
    if (train_wins.empty())
        throw DomainError("meta_train: no training windows (trajectories shorter than horizon+1)");

    MetaProgram prog(f.spec, g, cfg);
    std::vector<double> theta = f.params.raw();
    std::vector<double> phi;
    bool neural = std::holds_alternative<NeuralEmbedding>(g);
    if (neural) phi = std::get<NeuralEmbedding>(g).net.params.raw();
    else phi = std::get<SymbolicEmbedding>(g).params;

    auto finish = [&]() {
        R.predictor.params = ParamVector(std::move(theta));
        if (neural) std::get<NeuralEmbedding>(R.embedding).net.params = ParamVector(std::move(phi));
    };

    std::vector<double> dtheta(theta.size()), dphi(phi.size());
    auto eval_set = [&](const std::vector<Window>& wins, double& unt, double& tl) -> bool {
        unt = tl = 0.0;
        if (wins.empty()) return true;
        for (const auto& w : wins) {
            auto L = prog.losses(theta, phi, cfg.inner_lr, w.x0, w.gt);
            if (!L.ok) return false;
            unt += L.untailored;
            tl += L.tailored;
        }
        unt /= static_cast<double>(wins.size());
        tl /= static_cast<double>(wins.size());
        return true;
    };

    for (int epoch = 0; epoch <= epochs; ++epoch) {
        MetaHistoryRow row;
        row.epoch = epoch;
        std::fill(dtheta.begin(), dtheta.end(), 0.0);
        std::fill(dphi.begin(), dphi.end(), 0.0);
        bool last = epoch == epochs;
        double unt = 0.0, tl = 0.0;
        if (last) {
            if (!eval_set(train_wins, unt, tl)) {
                R.reason = "non-finite training loss at epoch " + std::to_string(epoch);
                finish();
                return R;
            }
        } else {
            for (const auto& w : train_wins) {
                MetaProgram::Losses L;
                if (!prog.outer_grads(theta, phi, cfg.inner_lr, w.x0, w.gt, dtheta, dphi, &L)) {
                    R.reason = "non-finite training loss at epoch " + std::to_string(epoch);
                    finish();
                    return R;
                }
                unt += L.untailored;
                tl += L.tailored;
            }
            unt /= static_cast<double>(train_wins.size());
            tl /= static_cast<double>(train_wins.size());
        }
        row.train_untailored = unt;
        row.train_tailored = tl;
        if (!eval_set(val_wins, row.val_untailored, row.val_tailored)) {
            R.reason = "non-finite validation loss at epoch " + std::to_string(epoch);
            finish();
            return R;
        }
        R.history.push_back(row);
        if (last) break;
        double scale = 1.0 / static_cast<double>(train_wins.size());
        for (std::size_t i = 0; i < theta.size(); ++i)
            theta[i] -= cfg.outer_lr * scale * dtheta[i];
        if (neural)
            for (std::size_t i = 0; i < phi.size(); ++i)
                phi[i] -= cfg.embed_lr * scale * dphi[i];
        bool fin = true;
        for (double v : theta) fin &= std::isfinite(v);
        for (double v : phi) fin &= std::isfinite(v);
        if (!fin) {
            R.reason = "parameters diverged at epoch " + std::to_string(epoch);
            finish();
            return R;
        }
    }
    R.ok = true;
    finish();
    return R;
}

std::vector<ProbePoint> multi_inner_step_probe(const Mlp& f, const Embedding& g, State x0,
                                               std::span<const State> ground_truth,
                                               const TailorConfig& cfg, const ProbeConfig& pcfg) {
    if (pcfg.max_steps < 1) throw DomainError("probe: max_steps must be at least 1");
    if (ground_truth.empty()) throw DomainError("probe: empty ground truth");
    MetaProgram prog(f.spec, g, cfg);
    std::vector<double> theta = f.params.raw();
    std::vector<double> phi;
    if (const auto* se = std::get_if<SymbolicEmbedding>(&g)) phi = se->params;
    else phi = std::get<NeuralEmbedding>(g).net.params.raw();

    std::vector<double> grad(theta.size()), m(theta.size(), 0.0), v(theta.size(), 0.0);
    std::vector<ProbePoint> out;
    for (int step = 0; step <= pcfg.max_steps; ++step) {
        double inner = 0.0;
        if (!prog.inner_grad(theta, phi, x0, grad, &inner)) break;
        double task;
        try {
            auto preds = rollout(f.spec, theta, x0, static_cast<int>(ground_truth.size()), cfg.dt);
            task = sequence_mse(preds, ground_truth);
        } catch (const DomainError&) {
            break;
        }
        if (!std::isfinite(inner) || !std::isfinite(task)) break;
        out.push_back({step, inner, task});
        if (step == pcfg.max_steps) break;
        if (pcfg.adam) {
            for (std::size_t i = 0; i < theta.size(); ++i) {
                m[i] = pcfg.beta1 * m[i] + (1 - pcfg.beta1) * grad[i];
                v[i] = pcfg.beta2 * v[i] + (1 - pcfg.beta2) * grad[i] * grad[i];
                double mh = m[i] / (1 - std::pow(pcfg.beta1, step + 1));
                double vh = v[i] / (1 - std::pow(pcfg.beta2, step + 1));
                theta[i] -= pcfg.lr * mh / (std::sqrt(vh) + pcfg.eps);
            }
        } else {
            for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= pcfg.lr * grad[i];
        }
    }
    return out;
}

namespace {

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
    auto params = j.at("params").get<std::vector<double>>();
    if (static_cast<int>(params.size()) != spec.n_params())
        throw IoError("checkpoint: parameter count does not match layer sizes");
    return Mlp{spec, ParamVector(std::move(params))};
}

json config_to_json(const TailorConfig& c) {
    return json{{"variant", variant_name(c.variant)}, {"inner_lr", c.inner_lr},
                {"inner_steps", c.inner_steps},      {"horizon", c.horizon},
                {"outer_lr", c.outer_lr},            {"embed_lr", c.embed_lr},
                {"dt", c.dt}};
}

TailorConfig config_from_json(const json& j) {
    TailorConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.inner_lr = j.at("inner_lr").get<double>();
    c.inner_steps = j.at("inner_steps").get<int>();
    c.horizon = j.at("horizon").get<int>();
    c.outer_lr = j.at("outer_lr").get<double>();
    c.embed_lr = j.at("embed_lr").get<double>();
    c.dt = j.at("dt").get<double>();
    return c;
}

} // namespace

void save_checkpoint(const std::string& path, const Checkpoint& c) {
    json j;
    j["version"] = kVersion;
    j["system"] = c.system;
    j["config"] = config_to_json(c.cfg);
    j["predictor"] = mlp_to_json(c.predictor);
    if (const auto* se = std::get_if<SymbolicEmbedding>(&c.embedding)) {
        json units = json::array();
        for (const Unit& u : se->expr.param_units())
            units.push_back(json::array({int(u.e[0]), int(u.e[1])}));
        j["embedding"] = {{"kind", "symbolic"},
                          {"expr", serialize(se->expr)},
                          {"param_units", units},
                          {"params", se->params}};
    } else {
        j["embedding"] = mlp_to_json(std::get<NeuralEmbedding>(c.embedding).net);
        j["embedding"]["kind"] = "neural";
    }
    std::ofstream out(path);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    json j;
    try {
        in >> j;
        if (j.value("version", "") != std::string(kVersion))
            throw IoError("checkpoint version mismatch in " + path);
        Checkpoint c;
        c.system = j.value("system", "");
        c.cfg = config_from_json(j.at("config"));
        c.predictor = mlp_from_json(j.at("predictor"));
        const json& e = j.at("embedding");
        if (e.at("kind").get<std::string>() == "symbolic") {
            std::vector<Unit> units;
            for (const auto& u : e.at("param_units"))
                units.push_back(Unit{{static_cast<std::int8_t>(u.at(0).get<int>()),
                                      static_cast<std::int8_t>(u.at(1).get<int>())}});
            SymbolicEmbedding se;
            se.expr = parse_expr(e.at("expr").get<std::string>(), units);
            se.params = e.at("params").get<std::vector<double>>();
            if (se.params.size() != units.size() ||
                static_cast<int>(se.params.size()) != se.expr.n_params())
                throw IoError("checkpoint: embedding parameter count mismatch");
            c.embedding = std::move(se);
        } else {
            c.embedding = NeuralEmbedding{mlp_from_json(e)};
        }
        return c;
    } catch (const json::exception& ex) {
        throw IoError("malformed checkpoint " + path + ": " + ex.what());
    }
}

} // namespace conserve
