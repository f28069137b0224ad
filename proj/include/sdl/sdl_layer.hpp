#pragma once

#include "sdl/graph.hpp"
#include "sdl/rng.hpp"

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

namespace sdl {

/// Stochastic input of one injection level. Values are stored row-major as
/// (H, W, d_z); `gain` is a pending scalar factor that the layer applies after
/// the style map, so rescaling by beta stays exactly linear in the output.
struct LatentTensor {
  int level = 0;
  Index height = 0;
  Index width = 0;
  Index depth = 0;
  Eigen::ArrayXf values;
  float gain = 1.0f;

  Index size() const { return height * width * depth; }
  /// gain * values, elementwise.
  Eigen::ArrayXf effective() const { return values * gain; }
  bool all_finite() const { return values.isFinite().all() && std::isfinite(gain); }
  /// (1, d_z, H, W) view for the style map.
  template <typename Scalar>
  Tensor<Scalar> channels_first() const;
};

using LatentSet = std::array<LatentTensor, 3>;

/// Grid of one injection level.
struct LevelGrid {
  int level = 0;
  Index height = 0;
  Index width = 0;
  Index channels = 0;
};

enum class LatentMode {
  spatial,    // Z is (H, W, d_z); S varies per location
  broadcast,  // Z is (1, 1, d_z); S is (B, C, 1, 1)
};

/// One residual noise-injection layer: out = in + alpha * R * S(Z) * M.
template <typename Scalar>
struct SdlLayer {
  int level = 0;
  Scalar alpha = Scalar(0.235);
  LatentMode mode = LatentMode::spatial;
  Index latent_depth = 16;
  Parameter<Scalar> style_map;   // (C, d_z, 1, 1), no bias
  Parameter<Scalar> modulation;  // (1, C, 1, 1)

  SdlLayer() = default;
  /// W ~ N(0, init_std^2) from `init_key`, M = 1.
  SdlLayer(int level, Index channels, Index latent_depth, Scalar alpha, LatentMode mode, const RngKey& init_key,
           double init_std = 0.02);

  Index channels() const { return modulation.value.shape().c; }
};

template <typename Scalar>
struct SdlPerturbationRecord {
  int level = 0;
  Tensor<Scalar> style;        // S, (B, C, H, W) or (B, C, 1, 1)
  Tensor<Scalar> pixel_noise;  // R, (B, C, H, W)
  Tensor<Scalar> perturbation; // alpha * R * S * M * gain
  std::vector<RngKey> pixel_keys;
};

template <typename Scalar>
struct SdlResult {
  typename Graph<Scalar>::Var output;
  std::optional<SdlPerturbationRecord<Scalar>> record;
};

/// Per-pixel noise for one batch item: gaussian_stream(key, C * H * W).
template <typename Scalar>
Tensor<Scalar> pixel_noise(const RngKey& key, Index channels, Index height, Index width);

/// features + alpha * (noise * style) * modulation. `style` is either the
/// shape of `noise` or (B, C, 1, 1).
template <typename Scalar>
typename Graph<Scalar>::Var sdl_combine(Graph<Scalar>& graph, typename Graph<Scalar>::Var features,
                                        typename Graph<Scalar>::Var noise, typename Graph<Scalar>::Var style,
                                        typename Graph<Scalar>::Var modulation, Scalar alpha);

/// Second pixel-noise stream mixed into R: (1 - weight) R(key) + weight R(other).
struct PixelBlend {
  RngKey other;
  float weight = 0.0f;
};

/// Applies the layer to features (B, C, H, W). `latents` and `pixel_keys` hold
/// one entry per batch item; `blends` is empty or also one per item.
template <typename Scalar>
SdlResult<Scalar> sdl_forward(Graph<Scalar>& graph, typename Graph<Scalar>::Var features,
                              std::span<const LatentTensor> latents, std::span<const RngKey> pixel_keys,
                              SdlLayer<Scalar>& layer, bool keep_record = false,
                              std::span<const PixelBlend> blends = {});

/// Graph-free evaluation for a single batch of features.
template <typename Scalar>
std::pair<Tensor<Scalar>, SdlPerturbationRecord<Scalar>> sdl_forward(const Tensor<Scalar>& features,
                                                                     std::span<const LatentTensor> latents,
                                                                     std::span<const RngKey> pixel_keys,
                                                                     SdlLayer<Scalar>& layer);

/// Draws Z_1..Z_3 from key (role must be latent); level l uses layer_id l.
LatentSet sample_latents(const RngKey& key, std::span<const LevelGrid> grids, Index latent_depth, LatentMode mode);

/// Copies with each level's gain multiplied by its beta.
LatentSet apply_beta(const LatentSet& latents, const std::array<double, 3>& beta);

/// (1 - e) * a + e * b. A gain shared by both inputs stays pending; otherwise
/// effective values are blended and the result has gain 1.
LatentTensor interpolate(const LatentTensor& a, const LatentTensor& b, double e);

}  // namespace sdl
