#include <benchmark/benchmark.h>

#include <vector>

#include "conserve/autodiff.hpp"
#include "conserve/dsl.hpp"
#include "conserve/dynamics.hpp"
#include "conserve/tailoring.hpp"

using namespace conserve;

namespace {

Dataset pendulum_data(int n_train) {
    DataConfig dc;
    dc.n_train = n_train;
    dc.n_test = 2;
    dc.states_per_traj = 30;
    return make_dataset({SystemKind::IdealPendulum}, dc);
}

// Pendulum energy shape: p^2 + P0 * cos(q).
Expr energy_expr() {
    Expr q = make_input(0, Unit{});
    Expr p = make_input(1, Unit{{0, 1}});
    return make_binary(Op::Add, make_unary(Op::Sq, p),
                       make_binary(Op::Mul, make_param(Unit{{0, 2}}), make_unary(Op::Cos, q)));
}

} // namespace

static void BM_TapeForward(benchmark::State& state) {
    Tape t;
    int q = t.leaf(0), p = t.leaf(1);
    int out = t.add(t.sq(p), t.mul(t.constant(-3.0), t.cos(q)));
    Evaluator ev(t);
    std::vector<double> leaves{0.3, 0.7};
    for (auto _ : state) {
        leaves[0] += 1e-9; // defeat value caching
        benchmark::DoNotOptimize(ev.forward(leaves, out).value);
    }
}
BENCHMARK(BM_TapeForward);

static void BM_TapeReverse(benchmark::State& state) {
    Tape t;
    int q = t.leaf(0), p = t.leaf(1);
    int out = t.add(t.sq(p), t.mul(t.constant(-3.0), t.cos(q)));
    Evaluator ev(t);
    std::vector<double> leaves{0.3, 0.7};
    std::vector<int> wrt{0, 1};
    std::vector<double> grad(2);
    ev.forward(leaves, out);
    for (auto _ : state) {
        ev.reverse(out, wrt, grad);
        benchmark::DoNotOptimize(grad.data());
    }
}
BENCHMARK(BM_TapeReverse);

static void BM_Integrate(benchmark::State& state) {
    SystemSpec spec{SystemKind::IdealPendulum};
    State x0{0.8, 0.0};
    const int steps = static_cast<int>(state.range(0));
    for (auto _ : state) {
        benchmark::DoNotOptimize(integrate(spec, x0, 0.1, steps, 7));
    }
    state.SetItemsProcessed(state.iterations() * steps);
}
BENCHMARK(BM_Integrate)->Arg(30)->Arg(1000);

static void BM_FitParams(benchmark::State& state) {
    auto data = pendulum_data(8);
    Expr e = energy_expr();
    FitConfig fc;
    fc.steps = static_cast<int>(state.range(0));
    for (auto _ : state) {
        benchmark::DoNotOptimize(fit_params(e, data.train, fc));
    }
}
BENCHMARK(BM_FitParams)->Arg(50)->Arg(500)->Unit(benchmark::kMillisecond);

static void BM_Enumerate(benchmark::State& state) {
    EnumConfig cfg;
    cfg.max_depth = static_cast<int>(state.range(0));
    cfg.max_nodes = 7;
    ProblemUnits units = units_for(SystemKind::IdealPendulum);
    for (auto _ : state) {
        auto exprs = enumerate_exprs(cfg, units);
        benchmark::DoNotOptimize(exprs.size());
    }
}
BENCHMARK(BM_Enumerate)->Arg(3)->Arg(5)->Unit(benchmark::kMillisecond);

static void BM_MetaOuterGrads(benchmark::State& state) {
    auto data = pendulum_data(4);
    MlpSpec ms;
    ms.hidden = 32;
    ms.hidden_layers = 2;
    Mlp f = Mlp::init(ms, 3);
    Embedding g = SymbolicEmbedding{energy_expr(), {-3.0}};
    TailorConfig tc;
    tc.horizon = 10;
    tc.inner_lr = 1e-3;
    MetaProgram mp(ms, g, tc);
    const auto& tr = data.train.front();
    State x0 = tr.states.front();
    std::vector<State> gt(tr.states.begin() + 1, tr.states.begin() + 1 + tc.horizon);
    std::vector<double> dtheta(static_cast<std::size_t>(mp.n_theta()));
    std::vector<double> dphi(static_cast<std::size_t>(mp.n_phi()));
    std::vector<double> phi; // symbolic embedding: no trainable phi
    for (auto _ : state) {
        std::fill(dtheta.begin(), dtheta.end(), 0.0);
        benchmark::DoNotOptimize(
            mp.outer_grads(f.params.values(), phi, tc.inner_lr, x0, gt, dtheta, dphi));
    }
    state.SetLabel("hidden-32 horizon-10");
}
BENCHMARK(BM_MetaOuterGrads)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
