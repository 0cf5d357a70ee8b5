#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace conserve {

struct State {
    double q = 0.0;
    double p = 0.0;
};

enum class SystemKind { IdealSpring, IdealPendulum, DissipativePendulum };

std::string system_kind_name(SystemKind kind);
SystemKind parse_system_kind(const std::string& name);

// damping must be zero for ideal kinds so the flow stays Hamiltonian.
struct SystemSpec {
    SystemKind kind = SystemKind::IdealSpring;
    double damping = 0.0;
    double noise_std = 0.0;
};

struct Trajectory {
    std::vector<State> states;
    double dt = 0.0;
    std::string system_tag;
};

// Pendulum: H = 3(1 - cos q) + p^2. Spring: H = (q^2 + p^2)/2.
double hamiltonian(const SystemSpec& spec, State s);

// Hamilton's equations; dissipative kind subtracts damping*p from dp/dt.
State vector_field(const SystemSpec& spec, State s);

// Classical RK4 rollout of `steps` steps (trajectory length steps+1), then
// Gaussian observation noise of spec.noise_std, deterministic in seed.
// Throws DomainError when the state leaves the finite range.
Trajectory integrate(const SystemSpec& spec, State x0, double dt, int steps,
                     std::uint64_t seed);

struct DataConfig {
    double dt = 0.1;
    int states_per_traj = 30;
    int n_train = 25;
    int n_test = 25;
    double energy_lo = 0.0; // 0/0 selects the per-system default band
    double energy_hi = 0.0;
    std::uint64_t seed = 0;
};

// Fills energy_lo/hi with the per-system default band when unset.
DataConfig resolve_data_config(const SystemSpec& spec, DataConfig cfg);

struct Dataset {
    std::vector<Trajectory> train;
    std::vector<Trajectory> test;
};

// Initial conditions drawn uniformly over the configured energy band
// (rejection sampling in the state box), then integrated.
Dataset make_dataset(const SystemSpec& spec, const DataConfig& cfg);

// CSV schema: optional leading '#' comment lines, header `t,q,p`, one row
// per state, full round-trip precision.
void save_trajectory_csv(const std::filesystem::path& path, const Trajectory& t,
                         const std::vector<std::string>& comment_lines = {});

// Several trajectories in one file on a continuous time axis, separated by
// 10*dt gaps so the loader's gap rule recovers the boundaries.
void save_trajectories_csv(const std::filesystem::path& path,
                           const std::vector<Trajectory>& trajs,
                           const std::vector<std::string>& comment_lines = {});

// Loads rows and splits into trajectories on time gaps larger than
// 2 x median(dt). Also serves as the real-pendulum dataset loader.
std::vector<Trajectory> load_trajectories_csv(const std::filesystem::path& path);
std::vector<Trajectory> load_real_pendulum(const std::filesystem::path& path);

// Null sequences for conservation screening: each sequence copies the length
// and dt of a uniformly chosen reference trajectory with states i.i.d.
// uniform over the per-dimension bounding box of the reference data.
std::vector<Trajectory> sample_null_sequences(const std::vector<Trajectory>& reference,
                                              int n, std::uint64_t seed);

} // namespace conserve
