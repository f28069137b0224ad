#pragma once

#include "sdl/emulator.hpp"
#include "sdl/verify.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdl {

using BetaVector = std::array<double, 3>;

class ChecksumMismatch : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArchiveHeader {
  std::uint32_t version = 1;
  std::string model_sha256;
  ModelConfig config;
  std::uint64_t seed = 0;
  Index members = 0;
  Index n_steps = 0;
  BetaVector beta{1.0, 1.0, 1.0};
  TensorF initial;  // physical units, (1, V, H, W)
  nlohmann::json provenance = nlohmann::json::object();

  nlohmann::json to_json() const;
  /// Ignores fields it does not know.
  static ArchiveHeader from_json(const nlohmann::json& j);
};

/// Latents (gain 1, before beta) and pixel-noise keys of every member and step.
struct LatentArchive {
  ArchiveHeader header;
  std::vector<std::vector<StepNoise>> noise;  // [member][step]

  const std::vector<StepNoise>& member(Index m) const;
  /// Bytes after the header: latents, keys and the trailing checksum.
  Index payload_bytes() const;
};

/// Collects the noise records of a stochastic ensemble run.
LatentArchive make_archive(const EnsembleBatch& batch, const TensorF& initial, const ModelConfig& config,
                           std::string model_sha256, nlohmann::json provenance = nlohmann::json::object());

/// "SDLA", u32 version, u64 header length, JSON header, then per member, step
/// and level: float32 Z (row-major H, W, d_z) and the R key as five u64s
/// (seed, member, layer, step, role). Trailing u64 FNV-1a of the payload.
void archive_write(const LatentArchive& archive, const std::filesystem::path& path);
LatentArchive archive_read(const std::filesystem::path& path);

/// A checkpoint together with the SHA-256 of its file.
struct LoadedModel {
  ModelState state;
  std::string sha256;
};
LoadedModel open_checkpoint(const std::filesystem::path& path);

/// Regenerates one member. Without an override the archived beta is used.
/// Throws ChecksumMismatch when the model is not the one that wrote the archive.
MemberTrajectory replay_member(const LatentArchive& archive, LoadedModel& model, Index member,
                               const std::optional<BetaVector>& beta_override = std::nullopt);
std::vector<MemberTrajectory> replay_all(const LatentArchive& archive, LoadedModel& model,
                                         const std::optional<BetaVector>& beta_override = std::nullopt,
                                         unsigned workers = 1);

struct InterpolationOptions {
  bool interpolate_pixel_noise = false;  // mix R of both members instead of taking the nearer one's keys
};

/// Per-step noise of Z_e = (1 - e) Z_i + e Z_j, before beta.
std::vector<StepNoise> interpolated_noise(const LatentArchive& archive, Index member_i, Index member_j, double e,
                                          const InterpolationOptions& options = {});
MemberTrajectory interpolate_members(const LatentArchive& archive, LoadedModel& model, Index member_i,
                                     Index member_j, double e, const InterpolationOptions& options = {});

/// Hex SHA-256 over the float32 bytes of states 0..T.
std::string trajectory_sha256(const MemberTrajectory& trajectory);

/// States 1..T of a trajectory as (T, V, H, W).
TensorF lead_tensor(const MemberTrajectory& trajectory);

struct SweepPoint {
  double beta = 0.0;
  VerificationReport report;
};

/// One archive with the truth (T, V, H, W) for its leads.
struct SweepCase {
  const LatentArchive* archive = nullptr;
  TensorF truth;
};

/// Replays all members of every case at (b, b, b) for each b and scores them.
std::vector<SweepPoint> spread_sweep(std::span<const SweepCase> cases, LoadedModel& model, std::span<const double> betas,
                                     const SpatialWeights& weights, double alpha_loss = 0.95, unsigned workers = 1);

struct AttributionValue {
  double value = 0.0;
  TensorF anomaly;                // (T, V, H, W), member minus beta = (1, 1, 1)
  std::vector<double> rms;        // weighted RMS of the anomaly per variable over all leads
  Spectrum spectrum;              // KE of the vorticity anomaly at `lead`
  TensorF first_perturbation;     // the varied level's step-1 perturbation
};

struct AttributionOptions {
  Index member = 0;
  Index lead = 1;
  Index vorticity_variable = 0;
};

/// Varies beta at one level with the others held at 1 and records member anomalies.
std::vector<AttributionValue> beta_layer_attribution(const LatentArchive& archive, LoadedModel& model, int level,
                                                     std::span<const double> values,
                                                     const AttributionOptions& options = {});

}  // namespace sdl
