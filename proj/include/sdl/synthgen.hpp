#pragma once

#include "sdl/binary_io.hpp"
#include "sdl/rng.hpp"
#include "sdl/tensor.hpp"

#include <json.hpp>

#include <array>
#include <complex>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace sdl::synth {

/// Stochastically forced barotropic vorticity with a passive tracer on [0, 2pi)^2.
struct SystemConfig {
  Index grid = 64;
  double viscosity = 1e-4;
  double drag = 0.02;
  double forcing_kmin = 3.0;
  double forcing_kmax = 5.0;
  double forcing_std = 0.3;
  double dt = 1e-3;
  Index stride = 200;  // integrator steps per stored sample
  double diffusivity = 1e-4;
  // Tracer: fixed zero-mean source s(x, y) = a (sin 2x + cos 3y), relaxation
  // of the non-mean part at rate tracer_drag. Without them the tracer would
  // diffuse to a constant.
  double tracer_source = 0.1;
  double tracer_drag = 0.1;
  double init_amplitude = 0.5;  // rms vorticity of the initial condition
  Index spinup = 5000;          // strides discarded before recording

  void validate() const;
};

nlohmann::json to_json(const SystemConfig& c);
SystemConfig system_config_from_json(const nlohmann::json& j);

class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pseudo-spectral RK4 integrator, 2/3-rule dealiasing, double precision.
/// Forcing for stride s is drawn from key (seed, trajectory, 0, s, data_forcing)
/// and held fixed over the stride.
class Solver {
 public:
  Solver(const SystemConfig& config, std::uint64_t seed, std::uint32_t trajectory);
  ~Solver();
  Solver(Solver&&) noexcept;
  Solver& operator=(Solver&&) noexcept;

  const SystemConfig& config() const;
  /// Strides advanced since the initial condition.
  std::uint64_t stride_index() const;

  void advance_stride();
  void advance(Index strides);

  /// (1, 3, H, W): vorticity, tracer, speed.
  TensorF observe() const;
  /// Physical fields in double, each H * W row-major.
  std::vector<double> vorticity() const;
  std::vector<double> tracer() const;
  void velocity(std::vector<double>& u, std::vector<double>& v) const;

  double kinetic_energy() const;  // domain mean of (u^2 + v^2) / 2
  double enstrophy() const;       // domain mean of zeta^2 / 2
  /// Kinetic energy summed over rings n - 1/2 < |k| <= n + 1/2, n = 0..grid/2.
  std::vector<double> energy_spectrum() const;
  /// Tracer mean from the k = 0 coefficient.
  double tracer_mean() const;
  /// Raw k = 0 tracer coefficient; constant under the dynamics.
  std::complex<double> tracer_mean_mode() const;
  /// Largest |u| dt / dx seen since the last call.
  double take_max_cfl();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Runs spin-up and then hands n_states consecutive observations to `sink`.
void integrate(const SystemConfig& config, std::uint64_t seed, std::uint32_t trajectory, Index n_states,
               const std::function<void(Index, const TensorF&)>& sink);
std::vector<TensorF> integrate(const SystemConfig& config, std::uint64_t seed, std::uint32_t trajectory,
                               Index n_states);

/// Regenerates stored state `index` of a trajectory by re-integration.
TensorF regenerate_state(const SystemConfig& config, std::uint64_t seed, std::uint32_t trajectory, Index index);

/// Dataset file: "SDLD", u32 version, u64 header length, JSON header
/// (config, seed, trajectory, stride, first_index, states, variables, grid),
/// float32 states (V, H, W) in time order, trailing u64 FNV-1a of the states.
/// Sample i pairs state i with state i + 1.
struct DatasetHeader {
  SystemConfig config;
  std::uint64_t seed = 0;
  std::uint32_t trajectory = 0;
  Index first_index = 0;  // stride index (after spin-up) of state 0
  Index states = 0;
  std::vector<std::string> variables{"vorticity", "tracer", "speed"};
};

class Dataset {
 public:
  Dataset() = default;
  Dataset(DatasetHeader header, std::vector<float> data);

  static Dataset load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const DatasetHeader& header() const { return header_; }
  Index states() const { return header_.states; }
  /// Number of (t, t + 1) pairs.
  Index samples() const { return header_.states > 0 ? header_.states - 1 : 0; }
  Index variables() const { return static_cast<Index>(header_.variables.size()); }
  Index grid() const { return header_.config.grid; }

  /// State t as (1, V, H, W).
  TensorF state(Index t) const;
  /// The listed states stacked on the batch axis.
  TensorF states(std::span<const Index> indices) const;
  /// Contiguous sub-range [first, first + count).
  Dataset slice(Index first, Index count) const;

 private:
  DatasetHeader header_;
  std::vector<float> data_;
};

struct SplitSizes {
  Index train = 0, val = 0, test = 0;
};

/// Contiguous block sizes for fractions summing to 1; remainders go to train.
SplitSizes make_splits(Index records, const std::array<double, 3>& fractions);

struct GenerateOptions {
  SystemConfig config;
  std::uint64_t seed = 0;
  SplitSizes sizes{20000, 2000, 2000};
  unsigned workers = 1;  // splits generated concurrently
};

/// Generates train/val/test from three independent trajectories (ids 0, 1, 2)
/// into `out`, with manifest.json listing counts and SHA-256 checksums.
nlohmann::json generate_dataset(const GenerateOptions& options, const std::filesystem::path& out,
                                const std::function<void(const std::string&)>& log = {});

}  // namespace sdl::synth
