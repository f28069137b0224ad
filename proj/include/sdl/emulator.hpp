#pragma once

#include "sdl/binary_io.hpp"
#include "sdl/graph.hpp"
#include "sdl/rng.hpp"
#include "sdl/sdl_layer.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sdl {

/// Where the coarsest injection sits: on the bottleneck grid (levels at
/// grid/8, grid/4, grid/2) or after the first upsample (grid/4, grid/2, grid).
enum class InjectionPlacement { bottleneck, after_upsample };

struct ModelConfig {
  Index grid = 64;
  std::array<Index, 4> widths{32, 48, 64, 96};  // fine to coarse
  Index variables = 3;
  Index latent_depth = 16;
  double alpha = 0.235;
  LatentMode latent_mode = LatentMode::spatial;
  InjectionPlacement placement = InjectionPlacement::bottleneck;
  bool stochastic = false;  // SDL layers present
  std::uint64_t init_seed = 1;
  std::vector<std::string> variable_names{"vorticity", "tracer", "speed"};

  void validate() const;
  /// Level 1..3 grids and channel counts for the configured placement.
  std::array<LevelGrid, 3> level_grids() const;
  /// Bytes of float32 latents per member per step.
  Index latent_bytes_per_step() const;
};

/// Per-variable affine map between physical and network units.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  TensorF normalize(const TensorF& physical) const;
  TensorF denormalize(const TensorF& network) const;
};

/// Noise inputs for one forecast step of one batch item.
struct StepNoise {
  LatentSet latents;
  std::array<RngKey, 3> pixel_keys;
  /// Optional per-level mix of a second R stream; weight 0 disables it.
  std::array<PixelBlend, 3> pixel_blend{};
};

/// Keys for (member, step): latents under role latent, R under role pixel_noise,
/// layer_id = injection level.
RngKey latent_key(std::uint64_t seed, std::uint32_t member, std::uint32_t step);
std::array<RngKey, 3> pixel_keys(std::uint64_t seed, std::uint32_t member, std::uint32_t step);

template <typename Scalar>
struct ResBlock {
  Parameter<Scalar> w1, b1, w2, b2;
};

/// Convolutional U-Net with three decoder injection points.
template <typename Scalar>
class Emulator {
 public:
  using G = Graph<Scalar>;
  using Var = typename G::Var;

  explicit Emulator(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  bool stochastic() const { return config_.stochastic; }
  /// Adds three freshly initialized SDL layers (M = 1, W ~ N(0, 0.02^2)).
  void insert_sdl(std::uint64_t seed);

  struct StepOutput {
    Var output;
    std::vector<SdlPerturbationRecord<Scalar>> records;
  };

  /// One step on network-unit state (B, V, H, W). `noise` holds one entry per
  /// batch item; nullptr selects deterministic mode (SDL layers bypassed).
  StepOutput forward(G& graph, Var state, const std::vector<StepNoise>* noise, bool keep_records = false);

  /// Graph-free forward of one step.
  Tensor<Scalar> step(const Tensor<Scalar>& state, const std::vector<StepNoise>* noise,
                      std::vector<SdlPerturbationRecord<Scalar>>* records = nullptr);

  /// All parameters in checkpoint order.
  std::vector<Parameter<Scalar>*> parameters();
  std::vector<const Parameter<Scalar>*> parameters() const;
  std::vector<Parameter<Scalar>*> sdl_parameters();
  Index parameter_count() const;
  void zero_grad();
  void set_trainable(bool base, bool sdl);

  SdlLayer<Scalar>& sdl_layer(int level) { return sdl_[static_cast<std::size_t>(level - 1)]; }

  template <typename Other>
  Emulator<Other> cast() const;

 private:
  template <typename>
  friend class Emulator;

  Var res_block(G& g, Var x, ResBlock<Scalar>& p);
  Var inject(G& g, Var x, int level, const std::vector<StepNoise>* noise, bool keep,
             std::vector<SdlPerturbationRecord<Scalar>>& records);

  ModelConfig config_;
  Parameter<Scalar> stem_w_, stem_b_;
  std::array<ResBlock<Scalar>, 4> enc_;
  std::array<Parameter<Scalar>, 3> down_w_, down_b_;
  std::array<Parameter<Scalar>, 3> up_w_, up_b_;
  std::array<Parameter<Scalar>, 3> fuse_w_, fuse_b_;
  std::array<ResBlock<Scalar>, 3> dec_;
  Parameter<Scalar> head_w_, head_b_;
  std::vector<SdlLayer<Scalar>> sdl_;
};

extern template class Emulator<float>;
extern template class Emulator<double>;

/// Trajectory of one ensemble member plus the noise that produced it.
struct MemberTrajectory {
  std::uint32_t member = 0;
  std::vector<TensorF> states;  // n_steps + 1 physical states (1, V, H, W); index 0 is the initial condition
  std::vector<StepNoise> noise;  // per step; base latents (gain 1)
  bool failed = false;
  std::string diagnostic;
};

struct EnsembleBatch {
  std::uint64_t seed = 0;
  std::array<double, 3> beta{1.0, 1.0, 1.0};
  bool deterministic = false;
  Index n_steps = 0;
  std::vector<MemberTrajectory> members;
};

struct RolloutOptions {
  Index n_steps = 1;
  Index members = 1;
  std::array<double, 3> beta{1.0, 1.0, 1.0};
  std::uint64_t seed = 0;
  bool deterministic = false;
  unsigned workers = 1;
};

/// Physical-unit checkpoint wrapper used by inference pipelines.
struct ModelState {
  Emulator<float> model;
  Normalizer normalizer;
};

/// Autoregressive ensemble from one physical initial state (1, V, H, W).
EnsembleBatch rollout(ModelState& state, const TensorF& initial, const RolloutOptions& options);

/// Runs one member given explicit per-step noise and per-level gains.
MemberTrajectory run_member(ModelState& state, const TensorF& initial, std::uint32_t member,
                            const std::vector<StepNoise>& noise, bool deterministic);

/// Checkpoint IO: "SDLM", u32 version, u64 header length, JSON header, float32
/// parameter blobs in parameters() order. All integers little-endian.
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);
nlohmann::json model_config_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace sdl
