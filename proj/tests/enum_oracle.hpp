#pragma once

// Brute-force reference enumerator used to cross-check enumerate_exprs: builds
// every tree level by level, filters by the same documented rules (unit
// validity, size/param caps, exponent cap, no composite parameter-only
// subtree), and dedups by canonical key at the end. Independent of the
// production enumerator's construction order.

#include <set>
#include <string>
#include <vector>

#include "conserve/dsl.hpp"

namespace enum_oracle {

inline bool has_input_under_every_op(const conserve::Expr& e) {
    std::vector<char> has_input(e.nodes.size(), 0);
    for (std::size_t i = 0; i < e.nodes.size(); ++i) {
        const auto& n = e.nodes[i];
        if (n.kind == conserve::ExprKind::Input) {
            has_input[i] = 1;
        } else if (n.kind == conserve::ExprKind::Operation) {
            bool h = has_input[static_cast<std::size_t>(n.a)];
            if (n.b >= 0) h = h || has_input[static_cast<std::size_t>(n.b)];
            if (!h) return false;
            has_input[i] = 1;
        }
    }
    return true;
}

inline bool oracle_valid(conserve::Expr& e, const conserve::ProblemUnits& units,
                         const conserve::EnumConfig& cfg) {
    if (e.size() > cfg.max_nodes) return false;
    if (e.n_params() > cfg.max_params) return false;
    if (e.depth() > cfg.max_depth) return false;
    if (!has_input_under_every_op(e)) return false;
    if (!conserve::check_units(e, units.input_units)) return false;
    for (const auto& n : e.nodes)
        if (n.unit.max_abs() > cfg.unit_abs_cap) return false;
    return true;
}

// Canonical keys of every valid tree with depth <= cfg.max_depth.
inline std::set<std::string> brute_force_keys(const conserve::ProblemUnits& units,
                                              const conserve::EnumConfig& cfg) {
    using namespace conserve;
    std::vector<Expr> pool; // all valid trees of depth <= current level
    for (std::size_t i = 0; i < units.input_units.size(); ++i)
        pool.push_back(make_input(static_cast<int>(i), units.input_units[i]));
    for (Unit u : units.param_units) pool.push_back(make_param(u));

    std::set<std::string> keys;
    for (auto& e : pool) keys.insert(canonical_key(e));

    for (int level = 2; level <= cfg.max_depth; ++level) {
        std::vector<Expr> next;
        auto consider = [&](Expr e) {
            if (!oracle_valid(e, units, cfg)) return;
            if (keys.insert(canonical_key(e)).second) next.push_back(std::move(e));
        };
        for (const auto& a : pool) {
            for (Op op : {Op::Sin, Op::Cos, Op::Sq}) consider(make_unary(op, a));
            for (const auto& b : pool)
                for (Op op : {Op::Add, Op::Sub, Op::Mul, Op::Div})
                    consider(make_binary(op, a, b));
        }
        pool.insert(pool.end(), std::make_move_iterator(next.begin()),
                    std::make_move_iterator(next.end()));
    }
    return keys;
}

} // namespace enum_oracle
