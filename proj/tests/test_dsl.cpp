#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "conserve/dsl.hpp"
#include "conserve/dynamics.hpp"
#include "conserve/errors.hpp"
#include "enum_oracle.hpp"

using namespace conserve;

namespace {

const Unit kDimless{};
const Unit kP{{0, 1}};
const Unit kP2{{0, 2}};

// Spring: q and p carry distinct base dimensions.
Expr spring_q() { return make_input(0, Unit{{1, 0}}); }
Expr spring_p() { return make_input(1, kP); }
// Pendulum: q is an angle.
Expr pend_q() { return make_input(0, kDimless); }
Expr pend_p() { return make_input(1, kP); }

Expr pendulum_energy_shape() {
    // p^2 + P0 * cos(q)
    return make_binary(Op::Add, make_unary(Op::Sq, pend_p()),
                       make_binary(Op::Mul, make_param(kP2), make_unary(Op::Cos, pend_q())));
}

Expr spring_energy_shape() {
    // q^2 + P0 * p^2
    return make_binary(Op::Add, make_unary(Op::Sq, spring_q()),
                       make_binary(Op::Mul, make_param(Unit{{2, -2}}),
                                   make_unary(Op::Sq, spring_p())));
}

} // namespace

TEST_CASE("unit checking enforces dimensional rules") {
    ProblemUnits su = spring_units();
    ProblemUnits pu = pendulum_units();

    SUBCASE("additive mismatch is rejected with a located error") {
        Expr e = make_binary(Op::Add, spring_q(), spring_p());
        std::string err;
        CHECK_FALSE(check_units(e, su.input_units, &err).has_value());
        CHECK_FALSE(err.empty());
    }
    SUBCASE("matched quadratic form carries the squared unit") {
        Expr e = spring_energy_shape();
        auto u = check_units(e, su.input_units);
        REQUIRE(u.has_value());
        CHECK(*u == Unit{{2, 0}});
    }
    SUBCASE("sin of a dimensional argument is rejected") {
        Expr e = make_unary(Op::Sin, spring_p());
        CHECK_FALSE(check_units(e, su.input_units).has_value());
    }
    SUBCASE("cos q is legal for the pendulum, illegal for the spring") {
        Expr pend_cos = make_unary(Op::Cos, pend_q());
        CHECK(check_units(pend_cos, pu.input_units).has_value());
        Expr spring_cos = make_unary(Op::Cos, spring_q());
        CHECK_FALSE(check_units(spring_cos, su.input_units).has_value());
    }
    SUBCASE("division combines exponents subtractively") {
        Expr e = make_binary(Op::Div, spring_q(), spring_p());
        auto u = check_units(e, su.input_units);
        REQUIRE(u.has_value());
        CHECK(*u == Unit{{1, -1}});
    }
    SUBCASE("pendulum energy shape is dimensionally sound") {
        Expr e = pendulum_energy_shape();
        auto u = check_units(e, pu.input_units);
        REQUIRE(u.has_value());
        CHECK(*u == kP2);
    }
}

TEST_CASE("problem unit vocabularies") {
    ProblemUnits pu = pendulum_units();
    REQUIRE(pu.input_units.size() == 2);
    CHECK(pu.input_units[0] == kDimless);
    CHECK(pu.input_units[1] == kP);
    // Angle is dimensionless, so parameters range over the p dimension only.
    CHECK(pu.param_units.size() == 5);

    ProblemUnits su = spring_units();
    CHECK(su.input_units[0] == Unit{{1, 0}});
    CHECK(su.param_units.size() == 25);
}

TEST_CASE("canonical keys collapse commutative reorderings and nothing else") {
    SUBCASE("q + p*p equals p*p + q") {
        Expr a = make_binary(Op::Add, pend_q(), make_binary(Op::Mul, pend_p(), pend_p()));
        Expr b = make_binary(Op::Add, make_binary(Op::Mul, pend_p(), pend_p()), pend_q());
        CHECK(canonical_key(a) == canonical_key(b));
        CHECK(serialize(a) != serialize(b)); // presentation differs, identity does not
    }
    SUBCASE("subtraction order matters") {
        Expr a = make_binary(Op::Sub, pend_q(), make_unary(Op::Sq, pend_p()));
        Expr b = make_binary(Op::Sub, make_unary(Op::Sq, pend_p()), pend_q());
        CHECK(canonical_key(a) != canonical_key(b));
    }
    SUBCASE("key ignores parameter slot numbering") {
        // The bare parameter is slot 0 on one side and slot 1 on the other.
        Expr a = make_binary(Op::Add, make_param(kP2),
                             make_binary(Op::Mul, pend_q(), make_param(kP2)));
        Expr b = make_binary(Op::Add, make_binary(Op::Mul, pend_q(), make_param(kP2)),
                             make_param(kP2));
        CHECK(canonical_key(a) == canonical_key(b));
    }
    SUBCASE("key distinguishes parameter units") {
        Expr a = make_binary(Op::Mul, pend_q(), make_param(kP2));
        Expr b = make_binary(Op::Mul, pend_q(), make_param(kP));
        CHECK(canonical_key(a) != canonical_key(b));
    }
    SUBCASE("nested commutative sorting is recursive") {
        Expr a = make_binary(Op::Mul, make_binary(Op::Add, pend_q(), make_unary(Op::Sq, pend_p())),
                             pend_q());
        Expr b = make_binary(Op::Mul, pend_q(),
                             make_binary(Op::Add, make_unary(Op::Sq, pend_p()), pend_q()));
        CHECK(canonical_key(a) == canonical_key(b));
    }
}

TEST_CASE("expression evaluation") {
    SUBCASE("p^2 - 3 cos q at the origin") {
        Expr e = make_binary(Op::Sub, make_unary(Op::Sq, pend_p()),
                             make_binary(Op::Mul, make_param(kP2), make_unary(Op::Cos, pend_q())));
        EvalResult r = eval_expr(e, std::vector<double>{3.0}, {0.0, 0.0});
        CHECK(r.ok);
        CHECK(r.value == doctest::Approx(-3.0));
    }
    SUBCASE("division by a zero parameter reports failure") {
        Expr e = make_binary(Op::Div, pend_q(), make_param(kDimless));
        EvalResult r = eval_expr(e, std::vector<double>{0.0}, {1.0, 0.0});
        CHECK_FALSE(r.ok);
    }
    SUBCASE("a bare parameter evaluates to its value") {
        Expr e = make_param(kP2);
        EvalResult r = eval_expr(e, std::vector<double>{2.5}, {0.3, -0.7});
        CHECK(r.ok);
        CHECK(r.value == 2.5);
    }
    SUBCASE("compiled leaf layout is params then q then p") {
        Expr e = pendulum_energy_shape();
        CompiledExpr ce = compile_expr(e);
        CHECK(ce.n_params == 1);
        CHECK(ce.n_inputs == 2);
        EvalResult r = evaluate(ce.tape, std::vector<double>{-3.0, 0.0, 2.0}, ce.out);
        CHECK(r.ok);
        CHECK(r.value == doctest::Approx(4.0 - 3.0));
    }
}

TEST_CASE("serialization round-trips") {
    Expr e = pendulum_energy_shape();
    std::string text = serialize(e);
    CHECK(text == "(add (sq (in 1)) (mul (par P0) (cos (in 0))))");

    Expr back = parse_expr(text, e.param_units());
    CHECK(serialize(back) == text);
    CHECK(canonical_key(back) == canonical_key(e));
    CHECK(back.param_units() == e.param_units());

    SUBCASE("parse without units defaults parameters to dimensionless") {
        Expr d = parse_expr("(mul (par P0) (in 0))");
        CHECK(d.param_units() == std::vector<Unit>{kDimless});
    }
    SUBCASE("malformed inputs throw") {
        CHECK_THROWS_AS(parse_expr("(add (in 0)"), IoError);       // unbalanced
        CHECK_THROWS_AS(parse_expr("(frobnicate (in 0))"), IoError); // unknown head
        CHECK_THROWS_AS(parse_expr(""), IoError);
        CHECK_THROWS_AS(parse_expr("(add (in 0) (in 0) (in 0))"), IoError); // arity
        CHECK_THROWS_AS(parse_expr("(sin)"), IoError);
    }
    SUBCASE("whitespace variants parse to the same tree") {
        Expr w = parse_expr("( add ( sq ( in 1 ) )\n (mul (par P0) (cos (in 0))) )",
                            e.param_units());
        CHECK(serialize(w) == text);
    }
}

TEST_CASE("enumeration base case lists inputs and parameter leaves") {
    EnumConfig cfg;
    cfg.max_depth = 1;
    ProblemUnits pu = pendulum_units();
    auto exprs = enumerate_exprs(cfg, pu);
    CHECK(exprs.size() == 2 + pu.param_units.size());
    int inputs = 0, params = 0;
    for (const auto& e : exprs) {
        REQUIRE(e.size() == 1);
        if (e.nodes[0].kind == ExprKind::Input) ++inputs;
        if (e.nodes[0].kind == ExprKind::Param) ++params;
    }
    CHECK(inputs == 2);
    CHECK(params == static_cast<int>(pu.param_units.size()));
}

TEST_CASE("enumeration dedups commutative twins and is deterministic") {
    EnumConfig cfg;
    cfg.max_depth = 2;
    ProblemUnits pu = pendulum_units();
    auto exprs = enumerate_exprs(cfg, pu);

    std::set<std::string> keys;
    for (const auto& e : exprs) CHECK(keys.insert(canonical_key(e)).second);

    std::string qp = canonical_key(make_binary(Op::Mul, pend_q(), pend_p()));
    int hits = 0;
    for (const auto& e : exprs) hits += canonical_key(e) == qp;
    CHECK(hits == 1);

    auto again = enumerate_exprs(cfg, pu);
    REQUIRE(again.size() == exprs.size());
    for (std::size_t i = 0; i < exprs.size(); ++i)
        CHECK(serialize(again[i]) == serialize(exprs[i]));

    SUBCASE("output is ordered by size") {
        for (std::size_t i = 1; i < exprs.size(); ++i)
            CHECK(exprs[i - 1].size() <= exprs[i].size());
    }
}

TEST_CASE("depth-3 enumeration equals the brute-force oracle") {
    EnumConfig cfg;
    cfg.max_depth = 3;
    for (SystemKind kind : {SystemKind::IdealPendulum, SystemKind::IdealSpring}) {
        ProblemUnits units = units_for(kind);
        auto keys = enum_oracle::brute_force_keys(units, cfg);
        auto exprs = enumerate_exprs(cfg, units);
        std::set<std::string> got;
        for (const auto& e : exprs) got.insert(canonical_key(e));
        CHECK(got.size() == exprs.size()); // no duplicates
        CHECK(got == keys);                // exact membership match
    }
}

TEST_CASE("every enumerated expression up to depth 4 is unit-sound and in caps") {
    EnumConfig cfg;
    cfg.max_depth = 4;
    for (SystemKind kind : {SystemKind::IdealPendulum, SystemKind::IdealSpring}) {
        ProblemUnits units = units_for(kind);
        auto exprs = enumerate_exprs(cfg, units);
        CHECK(exprs.size() > 100);
        for (auto& e : exprs) {
            CHECK(check_units(e, units.input_units).has_value());
            CHECK(e.depth() <= cfg.max_depth);
            CHECK(e.size() <= cfg.max_nodes);
            CHECK(e.n_params() <= cfg.max_params);
            CHECK(enum_oracle::has_input_under_every_op(e));
        }
    }
}

TEST_CASE("parameter fitting recovers the target coefficients") {
    DataConfig dc;
    dc.n_train = 8;
    dc.n_test = 2;
    dc.states_per_traj = 25;
    dc.seed = 5;
    FitConfig fc;
    fc.steps = 300;

    SUBCASE("spring: q^2 + theta p^2") {
        Dataset ds = make_dataset({SystemKind::IdealSpring}, dc);
        FitResult fr = fit_params(spring_energy_shape(), ds.train, fc);
        REQUIRE(fr.ok);
        REQUIRE(fr.params.size() == 1);
        CHECK(fr.params[0] > 0.95);
        CHECK(fr.params[0] < 1.05);
    }
    SUBCASE("pendulum: p^2 + theta cos q") {
        Dataset ds = make_dataset({SystemKind::IdealPendulum}, dc);
        FitResult fr = fit_params(pendulum_energy_shape(), ds.train, fc);
        REQUIRE(fr.ok);
        REQUIRE(fr.params.size() == 1);
        CHECK(fr.params[0] > -3.1);
        CHECK(fr.params[0] < -2.9);
    }
}

TEST_CASE("fitting degenerate and parameter-free cases") {
    DataConfig dc;
    dc.n_train = 5;
    dc.n_test = 1;
    dc.states_per_traj = 20;
    Dataset ds = make_dataset({SystemKind::IdealSpring}, dc);
    FitConfig fc;

    SUBCASE("zero-parameter expression: loss is just the statistic") {
        Expr e = make_unary(Op::Sq, spring_p());
        FitResult fr = fit_params(e, ds.train, fc);
        REQUIRE(fr.ok);
        CHECK(fr.params.empty());
        CompiledExpr ce = compile_expr(e);
        bool ok = true;
        double norm = pooled_variance(ce, {}, ds.train, &ok) + fc.eps;
        REQUIRE(ok);
        StatResult sr = conservation_stat(ce, {}, ds.train, norm);
        REQUIRE(sr.ok);
        CHECK(fr.stat == doctest::Approx(sr.stat));
    }
    SUBCASE("descent property: final statistic never above the init statistic") {
        std::vector<Expr> candidates;
        candidates.push_back(spring_energy_shape());
        candidates.push_back(make_binary(Op::Mul, make_param(Unit{{-1, 0}}), spring_q()));
        candidates.push_back(make_binary(
            Op::Div, make_unary(Op::Sq, spring_q()),
            make_binary(Op::Mul, make_param(kDimless), make_unary(Op::Sq, spring_q()))));
        for (auto& e : candidates) {
            FitResult fr = fit_params(e, ds.train, fc);
            if (!fr.ok) continue;
            CompiledExpr ce = compile_expr(e);
            std::vector<double> init(static_cast<std::size_t>(ce.n_params), fc.init);
            bool ok = true;
            double norm = pooled_variance(ce, init, ds.train, &ok) + fc.eps;
            if (!ok) continue;
            StatResult s0 = conservation_stat(ce, init, ds.train, norm);
            REQUIRE(s0.ok);
            CHECK(fr.stat <= s0.stat + 1e-12);
        }
    }
    SUBCASE("expression that launders division blowups into zeros is unfittable") {
        // q / (p / (q - q)) is identically 0 through IEEE semantics.
        Expr zero = make_binary(Op::Sub, spring_q(), spring_q());
        Expr inner = make_binary(Op::Div, spring_p(), zero);
        Expr e = make_binary(Op::Div, spring_q(), inner);
        FitResult fr = fit_params(e, ds.train, fc);
        CHECK_FALSE(fr.ok);
        CHECK_FALSE(fr.reason.empty());
    }
    SUBCASE("constant probe flags parameter-only and input-free signals") {
        Expr c = make_param(kDimless);
        CompiledExpr ce = compile_expr(c);
        std::vector<State> probes{{0.1, 0.2}, {-0.4, 0.3}, {0.9, -0.8}};
        CHECK(probe_constant(ce, std::vector<double>{1.7}, probes));
        Expr live = make_unary(Op::Sq, spring_p());
        CompiledExpr cl = compile_expr(live);
        CHECK_FALSE(probe_constant(cl, {}, probes));
    }
}
