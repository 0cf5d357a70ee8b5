#include "conserve/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "conserve/errors.hpp"

namespace conserve {

namespace {

bool is_pendulum(SystemKind k) {
    return k == SystemKind::IdealPendulum || k == SystemKind::DissipativePendulum;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void validate_system_spec(const SystemSpec& spec) {
    if (spec.damping < 0.0) throw DomainError("system: damping must be nonnegative");
    if (spec.noise_std < 0.0) throw DomainError("system: noise_std must be nonnegative");
    if (spec.kind != SystemKind::DissipativePendulum && spec.damping != 0.0)
        throw DomainError("system: ideal kinds require zero damping");
}

} // namespace

std::string system_kind_name(SystemKind kind) {
    switch (kind) {
        case SystemKind::IdealSpring: return "ideal-spring";
        case SystemKind::IdealPendulum: return "ideal-pendulum";
        case SystemKind::DissipativePendulum: return "dissipative-pendulum";
    }
    return "unknown";
}

SystemKind parse_system_kind(const std::string& name) {
    if (name == "ideal-spring") return SystemKind::IdealSpring;
    if (name == "ideal-pendulum") return SystemKind::IdealPendulum;
    if (name == "dissipative-pendulum") return SystemKind::DissipativePendulum;
    throw IoError("unknown system kind: " + name);
}

double hamiltonian(const SystemSpec& spec, State s) {
    if (is_pendulum(spec.kind)) return 3.0 * (1.0 - std::cos(s.q)) + s.p * s.p;
    return 0.5 * (s.q * s.q + s.p * s.p);
}

State vector_field(const SystemSpec& spec, State s) {
    State d;
    if (is_pendulum(spec.kind)) {
        d.q = 2.0 * s.p;
        d.p = -3.0 * std::sin(s.q);
    } else {
        d.q = s.p;
        d.p = -s.q;
    }
    if (spec.kind == SystemKind::DissipativePendulum) d.p -= spec.damping * s.p;
    return d;
}

Trajectory integrate(const SystemSpec& spec, State x0, double dt, int steps,
                     std::uint64_t seed) {
    validate_system_spec(spec);
    if (dt <= 0.0) throw DomainError("integrate: dt must be positive");
    if (steps < 0) throw DomainError("integrate: negative step count");
    Trajectory out;
    out.dt = dt;
    out.system_tag = system_kind_name(spec.kind);
    out.states.reserve(static_cast<std::size_t>(steps) + 1);
    out.states.push_back(x0);
    State x = x0;
    for (int i = 0; i < steps; ++i) {
        State k1 = vector_field(spec, x);
        State k2 = vector_field(spec, {x.q + 0.5 * dt * k1.q, x.p + 0.5 * dt * k1.p});
        State k3 = vector_field(spec, {x.q + 0.5 * dt * k2.q, x.p + 0.5 * dt * k2.p});
        State k4 = vector_field(spec, {x.q + dt * k3.q, x.p + dt * k3.p});
        x.q += dt / 6.0 * (k1.q + 2.0 * k2.q + 2.0 * k3.q + k4.q);
        x.p += dt / 6.0 * (k1.p + 2.0 * k2.p + 2.0 * k3.p + k4.p);
        if (!std::isfinite(x.q) || !std::isfinite(x.p))
            throw DomainError("integrate: state diverged at step " + std::to_string(i + 1));
        out.states.push_back(x);
    }
    if (spec.noise_std > 0.0) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> noise(0.0, spec.noise_std);
        for (auto& s : out.states) {
            s.q += noise(rng);
            s.p += noise(rng);
        }
    }
    return out;
}

DataConfig resolve_data_config(const SystemSpec& spec, DataConfig cfg) {
    validate_system_spec(spec);
    if (cfg.dt <= 0.0) throw DomainError("data config: dt must be positive");
    if (cfg.n_train < 0 || cfg.n_test < 0)
        throw DomainError("data config: negative trajectory count");
    if (cfg.energy_lo == 0.0 && cfg.energy_hi == 0.0) {
        if (is_pendulum(spec.kind)) {
            cfg.energy_lo = 0.5;
            cfg.energy_hi = 2.5;
        } else {
            cfg.energy_lo = 0.02;
            cfg.energy_hi = 0.5;
        }
    }
    if (!(cfg.energy_lo >= 0.0) || !(cfg.energy_hi > cfg.energy_lo))
        throw DomainError("data config: invalid energy band");
    if (is_pendulum(spec.kind) && cfg.energy_hi >= 6.0)
        throw DomainError("data config: pendulum energy band must stay below the separatrix");
    if (cfg.states_per_traj < 2) throw DomainError("data config: need at least 2 states");
    return cfg;
}

namespace {

State sample_initial_state(const SystemSpec& spec, const DataConfig& cfg,
                           std::mt19937_64& rng) {
    double qmax, pmax;
    if (is_pendulum(spec.kind)) {
        qmax = std::acos(1.0 - cfg.energy_hi / 3.0);
        pmax = std::sqrt(cfg.energy_hi);
    } else {
        qmax = pmax = std::sqrt(2.0 * cfg.energy_hi);
    }
    std::uniform_real_distribution<double> uq(-qmax, qmax), up(-pmax, pmax);
    SystemSpec ideal = spec;
    ideal.noise_std = 0.0;
    for (int tries = 0; tries < 100000; ++tries) {
        State s{uq(rng), up(rng)};
        double h = hamiltonian(ideal, s);
        if (h >= cfg.energy_lo && h <= cfg.energy_hi) return s;
    }
    throw DomainError("data config: energy band rejection sampling did not converge");
}

} // namespace

Dataset make_dataset(const SystemSpec& spec, const DataConfig& raw_cfg) {
    DataConfig cfg = resolve_data_config(spec, raw_cfg);
    Dataset out;
    std::mt19937_64 rng(cfg.seed);
    auto gen = [&](int count, std::vector<Trajectory>& dst, std::uint64_t noise_base) {
        dst.reserve(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            State x0 = sample_initial_state(spec, cfg, rng);
            dst.push_back(integrate(spec, x0, cfg.dt, cfg.states_per_traj - 1,
                                    noise_base + static_cast<std::uint64_t>(i)));
        }
    };
    gen(cfg.n_train, out.train, cfg.seed * 2654435761ULL + 1);
    gen(cfg.n_test, out.test, cfg.seed * 2654435761ULL + 100003);
    return out;
}

void save_trajectory_csv(const std::filesystem::path& path, const Trajectory& t,
                         const std::vector<std::string>& comment_lines) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    for (const auto& c : comment_lines) f << "# " << c << "\n";
    f << "t,q,p\n";
    for (std::size_t i = 0; i < t.states.size(); ++i) {
        f << format_double(static_cast<double>(i) * t.dt) << ','
          << format_double(t.states[i].q) << ',' << format_double(t.states[i].p) << "\n";
    }
    if (!f) throw IoError("write failed: " + path.string());
}

void save_trajectories_csv(const std::filesystem::path& path,
                           const std::vector<Trajectory>& trajs,
                           const std::vector<std::string>& comment_lines) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path.string());
    for (const auto& c : comment_lines) f << "# " << c << "\n";
    f << "t,q,p\n";
    double base = 0.0;
    for (const auto& t : trajs) {
        for (std::size_t i = 0; i < t.states.size(); ++i) {
            f << format_double(base + static_cast<double>(i) * t.dt) << ','
              << format_double(t.states[i].q) << ',' << format_double(t.states[i].p) << "\n";
        }
        base += static_cast<double>(t.states.size() - 1) * t.dt + 10.0 * t.dt;
    }
    if (!f) throw IoError("write failed: " + path.string());
}

std::vector<Trajectory> load_trajectories_csv(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open: " + path.string());
    std::vector<double> ts;
    std::vector<State> xs;
    std::string line;
    int lineno = 0;
    bool header_seen = false;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            header_seen = true; // header row `t,q,p`
            continue;
        }
        std::istringstream ss(line);
        double v[3];
        char comma;
        if (!(ss >> v[0] >> comma >> v[1] >> comma >> v[2]))
            throw IoError("malformed row at " + path.string() + ":" + std::to_string(lineno));
        ts.push_back(v[0]);
        xs.push_back({v[1], v[2]});
    }
    std::vector<Trajectory> out;
    if (xs.empty()) return out;
    if (xs.size() == 1) throw IoError("trajectory file has a single state: " + path.string());

    std::vector<double> gaps;
    gaps.reserve(ts.size() - 1);
    for (std::size_t i = 1; i < ts.size(); ++i) gaps.push_back(ts[i] - ts[i - 1]);
    std::vector<double> sorted = gaps;
    std::sort(sorted.begin(), sorted.end());
    double median = sorted[sorted.size() / 2];
    if (!(median > 0.0)) throw IoError("non-increasing time column: " + path.string());

    std::vector<std::size_t> starts{0};
    for (std::size_t i = 0; i < gaps.size(); ++i)
        if (gaps[i] > 2.0 * median) starts.push_back(i + 1);
    starts.push_back(xs.size());

    for (std::size_t s = 0; s + 1 < starts.size(); ++s) {
        std::size_t b = starts[s], e = starts[s + 1];
        if (e - b < 2) continue; // a lone sample between gaps carries no dynamics
        Trajectory t;
        std::vector<double> seg(gaps.begin() + static_cast<long>(b),
                                gaps.begin() + static_cast<long>(e - 1));
        std::sort(seg.begin(), seg.end());
        t.dt = seg[seg.size() / 2];
        t.states.assign(xs.begin() + static_cast<long>(b), xs.begin() + static_cast<long>(e));
        t.system_tag = "loaded";
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<Trajectory> load_real_pendulum(const std::filesystem::path& path) {
    auto trajs = load_trajectories_csv(path);
    for (auto& t : trajs) t.system_tag = "real-pendulum";
    return trajs;
}

std::vector<Trajectory> sample_null_sequences(const std::vector<Trajectory>& reference,
                                              int n, std::uint64_t seed) {
    if (n <= 0) return {};
    if (reference.empty()) throw DomainError("sample_null_sequences: empty reference");
    double qlo = reference[0].states[0].q, qhi = qlo;
    double plo = reference[0].states[0].p, phi = plo;
    for (const auto& t : reference)
        for (const auto& s : t.states) {
            qlo = std::min(qlo, s.q);
            qhi = std::max(qhi, s.q);
            plo = std::min(plo, s.p);
            phi = std::max(phi, s.p);
        }
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pick(0, reference.size() - 1);
    std::uniform_real_distribution<double> uq(qlo, qhi), up(plo, phi);
    std::vector<Trajectory> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Trajectory& ref = reference[pick(rng)];
        Trajectory t;
        t.dt = ref.dt;
        t.system_tag = "null";
        t.states.resize(ref.states.size());
        for (auto& s : t.states) {
            s.q = uq(rng);
            s.p = up(rng);
        }
        out.push_back(std::move(t));
    }
    return out;
}

} // namespace conserve
