#pragma once

#include "sdl/emulator.hpp"
#include "sdl/losses.hpp"
#include "sdl/synthgen.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdl {

using synth::Dataset;

enum class LossKind { mse, afcrps };

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
};

struct Phase {
  std::string name;
  LossKind loss = LossKind::mse;
  Index rollout_steps = 1;
  std::int64_t epochs = 1;
  std::int64_t batches_per_epoch = 1;
  std::int64_t batch_size = 1;
  std::int64_t members = 0;  // ensemble replication, afcrps only
  double learning_rate = 3e-4;
  AdamConfig adam;

  /// epochs * batches * batch_size * rollout_steps * max(members, 1)
  std::int64_t forward_passes() const;
  void validate() const;
};

nlohmann::json to_json(const Phase& phase);
Phase phase_from_json(const nlohmann::json& j);

/// The five deterministic phases and the fine-tuning phase of the reference run.
std::vector<Phase> reference_baseline_phases();
Phase reference_finetune_phase();
/// Forward-pass counts as published for those phases, in the same order. The
/// first differs from its own epochs x batches x batch size product.
std::vector<std::int64_t> published_baseline_passes();
std::int64_t published_finetune_passes();
/// Desk-scale defaults: 1/2/4-step MSE curriculum and single-step afcrps fine-tuning.
std::vector<Phase> desk_baseline_phases();
Phase desk_finetune_phase();

struct CostLedger {
  struct Entry {
    std::string phase;
    std::int64_t forward = 0;
    std::int64_t backward = 0;
  };
  std::vector<Entry> entries;

  /// Adds passes to the named phase, creating it on first use.
  void record(const std::string& phase, std::int64_t forward, std::int64_t backward);
  std::int64_t forward_total() const;
  std::int64_t backward_total() const;
  const Entry* find(const std::string& phase) const;
  /// Planned counts, one entry per phase with backward == forward.
  static CostLedger planned(std::span<const Phase> phases);
  nlohmann::json to_json() const;
};

struct CostRatio {
  std::int64_t numerator = 0;    // reduced forward-pass ratio
  std::int64_t denominator = 1;
  double value = 0.0;            // (fwd_f + w bwd_f) / (fwd_b + w bwd_b)
};

/// Throws std::domain_error for an empty baseline.
CostRatio cost_ratio(const CostLedger& baseline, const CostLedger& finetune, double backward_weight = 2.0);

/// Adam over the trainable parameters, with global-norm clipping.
class Adam {
 public:
  Adam(std::vector<Parameter<float>*> params, double learning_rate, AdamConfig config = {});
  /// Applies one update and returns the gradient norm before clipping.
  double step();
  void set_learning_rate(double lr) { lr_ = lr; }
  std::int64_t steps() const { return t_; }

 private:
  std::vector<Parameter<float>*> params_;
  std::vector<Eigen::ArrayXd> m_, v_;
  double lr_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

/// Per-variable mean and standard deviation over every state of a dataset.
Normalizer fit_normalizer(const Dataset& data);

struct TrainingConfig {
  ModelConfig model;
  std::vector<Phase> phases = desk_baseline_phases();
  Phase finetune = desk_finetune_phase();
  std::uint64_t seed = 1;
  std::uint64_t sdl_init_seed = 2;
  double alpha_loss = 0.95;
  bool freeze_base = false;        // fine-tune only the SDL parameters
  Index validation_samples = 64;   // evenly spaced over the validation split
  Index validation_members = 10;

  nlohmann::json to_json() const;
  static TrainingConfig from_json(const nlohmann::json& j);
};

struct EpochRecord {
  std::string phase;
  std::int64_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;          // MSE (deterministic) or afcrps (fine-tune), network units
  std::optional<double> val_spread;
  std::optional<double> val_mae;  // deterministic-mode MAE during fine-tuning
  double grad_norm = 0.0;         // mean pre-clip norm
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

struct TrainResult {
  ModelState state;
  CostLedger ledger;
  std::vector<EpochRecord> log;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::filesystem::path last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const std::filesystem::path& last_good() const { return last_good_; }

 private:
  std::filesystem::path last_good_;
};

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
  std::filesystem::path checkpoint_dir;  // last_good.sdlm is written here on divergence
};

/// Deterministic curriculum over `config.phases` from a fresh model.
TrainResult train_deterministic(const TrainingConfig& config, const Dataset& train, const Dataset& val,
                                const TrainHooks& hooks = {});

/// Inserts SDL layers into `base` and runs the afcrps phase.
TrainResult finetune_sdl(ModelState base, const TrainingConfig& config, const Dataset& train, const Dataset& val,
                         const TrainHooks& hooks = {});

struct EnsembleScore {
  double crps = 0.0;    // afcrps, network units
  double spread = 0.0;  // sqrt of mean ensemble variance
  double mae = 0.0;     // deterministic mode
};

/// One-step scores over the given sample indices of `data`.
EnsembleScore score_one_step(ModelState& state, const Dataset& data, std::span<const Index> samples, Index members,
                             std::uint64_t key_seed, double alpha_loss);
/// One-step weighted MSE of deterministic forecasts (network units).
double one_step_mse(ModelState& state, const Dataset& data, std::span<const Index> samples);
/// Weighted MSE of using state t as the forecast for t + 1 (network units of `normalizer`).
double persistence_mse(const Normalizer& normalizer, const Dataset& data, std::span<const Index> samples);
/// `count` indices spread evenly over [0, limit).
std::vector<Index> spaced_indices(Index limit, Index count);

}  // namespace sdl
