#include "config_json.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "conserve/errors.hpp"

namespace conserve::cfg_json {

json load_json_file(const std::filesystem::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw IoError("malformed JSON in " + p.string());
    return j;
}

void write_json_file(const std::filesystem::path& p, const json& j) {
    std::filesystem::path tmp = p;
    tmp += ".tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw IoError("cannot write " + tmp.string());
        out << j.dump(2) << '\n';
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, p, ec);
    if (ec) throw IoError("cannot replace " + p.string() + ": " + ec.message());
}

json jnum(double v) { return std::isfinite(v) ? json(v) : json(); }

double jnum_back(const json& j, double fallback) {
    return j.is_null() ? fallback : j.get<double>();
}

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
    if (!j.is_object()) throw IoError("config: " + where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* k : allowed) known |= it.key() == k;
        if (!known) throw IoError("config: unknown key \"" + it.key() + "\" in " + where);
    }
}

json system_to_json(const SystemSpec& s) {
    return json{{"kind", system_kind_name(s.kind)},
                {"damping", s.damping},
                {"noise_std", s.noise_std}};
}

SystemSpec system_from_json(const json& j, SystemSpec base) {
    check_keys(j, {"kind", "damping", "noise_std"}, "system");
    if (j.contains("kind")) base.kind = parse_system_kind(j.at("kind").get<std::string>());
    base.damping = j.value("damping", base.damping);
    base.noise_std = j.value("noise_std", base.noise_std);
    return base;
}

namespace {

json data_to_json(const DataConfig& c) {
    return json{{"dt", c.dt},
                {"states_per_traj", c.states_per_traj},
                {"n_train", c.n_train},
                {"n_test", c.n_test},
                {"energy_lo", c.energy_lo},
                {"energy_hi", c.energy_hi},
                {"seed", c.seed}};
}

DataConfig data_from_json(const json& j, DataConfig c) {
    check_keys(j, {"dt", "states_per_traj", "n_train", "n_test", "energy_lo", "energy_hi", "seed"},
               "data");
    c.dt = j.value("dt", c.dt);
    c.states_per_traj = j.value("states_per_traj", c.states_per_traj);
    c.n_train = j.value("n_train", c.n_train);
    c.n_test = j.value("n_test", c.n_test);
    c.energy_lo = j.value("energy_lo", c.energy_lo);
    c.energy_hi = j.value("energy_hi", c.energy_hi);
    c.seed = j.value("seed", c.seed);
    return c;
}

json enum_to_json(const EnumConfig& c) {
    return json{{"max_depth", c.max_depth},    {"max_nodes", c.max_nodes},
                {"max_params", c.max_params},  {"param_exp_lo", c.param_exp_lo},
                {"param_exp_hi", c.param_exp_hi}, {"unit_abs_cap", c.unit_abs_cap}};
}

EnumConfig enum_from_json(const json& j, EnumConfig c) {
    check_keys(j, {"max_depth", "max_nodes", "max_params", "param_exp_lo", "param_exp_hi",
                   "unit_abs_cap"},
               "enumeration");
    c.max_depth = j.value("max_depth", c.max_depth);
    c.max_nodes = j.value("max_nodes", c.max_nodes);
    c.max_params = j.value("max_params", c.max_params);
    c.param_exp_lo = j.value("param_exp_lo", c.param_exp_lo);
    c.param_exp_hi = j.value("param_exp_hi", c.param_exp_hi);
    c.unit_abs_cap = j.value("unit_abs_cap", c.unit_abs_cap);
    return c;
}

json fit_to_json(const FitConfig& c) {
    return json{{"steps", c.steps},   {"lr", c.lr},           {"beta1", c.beta1},
                {"beta2", c.beta2},   {"adam_eps", c.adam_eps}, {"init", c.init},
                {"eps", c.eps}};
}

FitConfig fit_from_json(const json& j, FitConfig c) {
    check_keys(j, {"steps", "lr", "beta1", "beta2", "adam_eps", "init", "eps"}, "fit");
    c.steps = j.value("steps", c.steps);
    c.lr = j.value("lr", c.lr);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.init = j.value("init", c.init);
    c.eps = j.value("eps", c.eps);
    return c;
}

json baseline_to_json(const BaselineConfig& c) {
    return json{{"width", c.width},
                {"hidden_layers", c.hidden_layers},
                {"epochs", c.epochs},
                {"lr", c.lr},
                {"seed", c.seed}};
}

BaselineConfig baseline_from_json(const json& j, BaselineConfig c) {
    check_keys(j, {"width", "hidden_layers", "epochs", "lr", "seed"}, "baseline");
    c.width = j.value("width", c.width);
    c.hidden_layers = j.value("hidden_layers", c.hidden_layers);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.seed = j.value("seed", c.seed);
    return c;
}

json tailor_to_json(const TailorConfig& c) {
    return json{{"variant", variant_name(c.variant)},
                {"inner_lr", c.inner_lr},
                {"inner_steps", c.inner_steps},
                {"horizon", c.horizon},
                {"outer_lr", c.outer_lr},
                {"embed_lr", c.embed_lr},
                {"dt", c.dt}};
}

TailorConfig tailor_from_json(const json& j, TailorConfig c) {
    check_keys(j, {"variant", "inner_lr", "inner_steps", "horizon", "outer_lr", "embed_lr", "dt"},
               "tailor");
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    c.inner_lr = j.value("inner_lr", c.inner_lr);
    c.inner_steps = j.value("inner_steps", c.inner_steps);
    c.horizon = j.value("horizon", c.horizon);
    c.outer_lr = j.value("outer_lr", c.outer_lr);
    c.embed_lr = j.value("embed_lr", c.embed_lr);
    c.dt = j.value("dt", c.dt);
    return c;
}

} // namespace

json pipeline_to_json(const SystemSpec& system, const PipelineConfig& cfg) {
    json j;
    j["system"] = system_to_json(system);
    j["data"] = data_to_json(cfg.data);
    j["enumeration"] = enum_to_json(cfg.enumeration);
    j["fit"] = fit_to_json(cfg.fit);
    j["baseline"] = baseline_to_json(cfg.baseline);
    j["tailor"] = tailor_to_json(cfg.tailor);
    j["screen"] = json{{"ratio_threshold", cfg.ratio_threshold},
                       {"degenerate_floor", cfg.degenerate_floor},
                       {"stat_eps", cfg.stat_eps},
                       {"shortlist_size", cfg.shortlist_size},
                       {"n_null", cfg.n_null}};
    j["select"] = json{{"metatailor_epochs", cfg.metatailor_epochs},
                       {"inner_lr_grid", cfg.inner_lr_grid},
                       {"select_tie_rel", cfg.select_tie_rel},
                       {"stat_tie_rel", cfg.stat_tie_rel},
                       {"stat_tie_floor", cfg.stat_tie_floor}};
    j["final"] = json{{"final_epochs", cfg.final_epochs},
                      {"eval_horizon", cfg.eval_horizon},
                      {"window_stride", cfg.window_stride}};
    j["out_dir"] = cfg.out_dir;
    j["workers"] = cfg.workers;
    j["resume"] = cfg.resume;
    return j;
}

void pipeline_from_json(const json& j, SystemSpec& system, PipelineConfig& base) {
    if (j.contains("system")) system = system_from_json(j.at("system"), system);
    if (j.contains("data")) base.data = data_from_json(j.at("data"), base.data);
    if (j.contains("enumeration"))
        base.enumeration = enum_from_json(j.at("enumeration"), base.enumeration);
    if (j.contains("fit")) base.fit = fit_from_json(j.at("fit"), base.fit);
    if (j.contains("baseline"))
        base.baseline = baseline_from_json(j.at("baseline"), base.baseline);
    if (j.contains("tailor")) base.tailor = tailor_from_json(j.at("tailor"), base.tailor);
    if (j.contains("screen")) {
        const json& s = j.at("screen");
        check_keys(s, {"ratio_threshold", "degenerate_floor", "stat_eps", "shortlist_size",
                       "n_null"},
                   "screen");
        base.ratio_threshold = s.value("ratio_threshold", base.ratio_threshold);
        base.degenerate_floor = s.value("degenerate_floor", base.degenerate_floor);
        base.stat_eps = s.value("stat_eps", base.stat_eps);
        base.shortlist_size = s.value("shortlist_size", base.shortlist_size);
        base.n_null = s.value("n_null", base.n_null);
    }
    if (j.contains("select")) {
        const json& s = j.at("select");
        check_keys(s, {"metatailor_epochs", "inner_lr_grid", "select_tie_rel", "stat_tie_rel",
                       "stat_tie_floor"},
                   "select");
        base.metatailor_epochs = s.value("metatailor_epochs", base.metatailor_epochs);
        if (s.contains("inner_lr_grid"))
            base.inner_lr_grid = s.at("inner_lr_grid").get<std::vector<double>>();
        base.select_tie_rel = s.value("select_tie_rel", base.select_tie_rel);
        base.stat_tie_rel = s.value("stat_tie_rel", base.stat_tie_rel);
        base.stat_tie_floor = s.value("stat_tie_floor", base.stat_tie_floor);
    }
    if (j.contains("final")) {
        const json& s = j.at("final");
        check_keys(s, {"final_epochs", "eval_horizon", "window_stride"}, "final");
        base.final_epochs = s.value("final_epochs", base.final_epochs);
        base.eval_horizon = s.value("eval_horizon", base.eval_horizon);
        base.window_stride = s.value("window_stride", base.window_stride);
    }
    base.out_dir = j.value("out_dir", base.out_dir);
    base.workers = j.value("workers", base.workers);
    base.resume = j.value("resume", base.resume);
}

std::string hash_hex(const json& j) {
    std::string s = j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return std::string(buf);
}

} // namespace conserve::cfg_json
