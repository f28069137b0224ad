#include "sdl/sdl_layer.hpp"

#include <stdexcept>
#include <string>

namespace sdl {

template <typename Scalar>
Tensor<Scalar> LatentTensor::channels_first() const {
  Tensor<Scalar> t(Shape{1, depth, height, width});
  for (Index y = 0; y < height; ++y)
    for (Index x = 0; x < width; ++x)
      for (Index d = 0; d < depth; ++d) t(0, d, y, x) = static_cast<Scalar>(values[(y * width + x) * depth + d]);
  return t;
}

template <typename Scalar>
SdlLayer<Scalar>::SdlLayer(int lvl, Index channels, Index depth, Scalar a, LatentMode m, const RngKey& init_key,
                           double init_std)
    : level(lvl), alpha(a), mode(m), latent_depth(depth) {
  Tensor<Scalar> w(Shape{channels, depth, 1, 1});
  const auto g = gaussian_stream(init_key, static_cast<std::size_t>(w.size()));
  for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(init_std * g[static_cast<std::size_t>(i)]);
  style_map = Parameter<Scalar>("sdl" + std::to_string(lvl) + ".style_map", std::move(w));
  modulation = Parameter<Scalar>("sdl" + std::to_string(lvl) + ".modulation",
                                 Tensor<Scalar>(Shape{1, channels, 1, 1}, Scalar(1)));
}

template <typename Scalar>
Tensor<Scalar> pixel_noise(const RngKey& key, Index channels, Index height, Index width) {
  Tensor<Scalar> r(Shape{1, channels, height, width});
  fill_gaussian<Scalar>(key, r.array());
  return r;
}

template <typename Scalar>
typename Graph<Scalar>::Var sdl_combine(Graph<Scalar>& graph, typename Graph<Scalar>::Var features,
                                        typename Graph<Scalar>::Var noise, typename Graph<Scalar>::Var style,
                                        typename Graph<Scalar>::Var modulation, Scalar alpha) {
  const bool full = graph.value(style).shape() == graph.value(noise).shape();
  const auto rs = full ? graph.mul(noise, style) : graph.bcast_mul(noise, style);
  return graph.add(features, graph.scale(graph.bcast_mul(rs, modulation), alpha));
}

template <typename Scalar>
SdlResult<Scalar> sdl_forward(Graph<Scalar>& graph, typename Graph<Scalar>::Var features,
                              std::span<const LatentTensor> latents, std::span<const RngKey> pixel_keys,
                              SdlLayer<Scalar>& layer, bool keep_record, std::span<const PixelBlend> blends) {
  const Shape fs = graph.value(features).shape();
  if (!blends.empty() && static_cast<Index>(blends.size()) != fs.n) {
    throw std::invalid_argument("sdl_forward: need one pixel blend per batch item");
  }
  if (static_cast<Index>(latents.size()) != fs.n || static_cast<Index>(pixel_keys.size()) != fs.n) {
    throw std::invalid_argument("sdl_forward: need one latent and one pixel key per batch item (batch " +
                                std::to_string(fs.n) + ")");
  }
  if (fs.c != layer.channels()) {
    throw ShapeError("sdl_forward", "features", fs, "channels " + std::to_string(layer.channels()));
  }
  const bool spatial = layer.mode == LatentMode::spatial;
  const Index zh = spatial ? fs.h : 1;
  const Index zw = spatial ? fs.w : 1;
  Tensor<Scalar> z(Shape{fs.n, layer.latent_depth, zh, zw});
  Tensor<Scalar> r(fs);
  Tensor<Scalar> gains(Shape{fs.n, fs.c, 1, 1});
  bool unit_gain = true;
  for (Index b = 0; b < fs.n; ++b) {
    const LatentTensor& lt = latents[static_cast<std::size_t>(b)];
    if (lt.level != layer.level) {
      throw std::invalid_argument("sdl_forward: latent level " + std::to_string(lt.level) + " fed to layer level " +
                                  std::to_string(layer.level));
    }
    if (lt.height != zh || lt.width != zw || lt.depth != layer.latent_depth) {
      throw ShapeError("sdl_forward", "latent", Shape{1, lt.depth, lt.height, lt.width},
                       Shape{1, layer.latent_depth, zh, zw}.str());
    }
    if (!lt.all_finite()) throw std::domain_error("sdl_forward: non-finite latent at level " + std::to_string(lt.level));
    z.set_batch(b, lt.channels_first<Scalar>());
    Tensor<Scalar> rb = pixel_noise<Scalar>(pixel_keys[static_cast<std::size_t>(b)], fs.c, fs.h, fs.w);
    if (!blends.empty() && blends[static_cast<std::size_t>(b)].weight != 0.0f) {
      const PixelBlend& pb = blends[static_cast<std::size_t>(b)];
      const auto w = static_cast<Scalar>(pb.weight);
      rb.array() = (Scalar(1) - w) * rb.array() + w * pixel_noise<Scalar>(pb.other, fs.c, fs.h, fs.w).array();
    }
    r.set_batch(b, rb);
    gains.array().segment(b * fs.c, fs.c).setConstant(static_cast<Scalar>(lt.gain));
    unit_gain = unit_gain && lt.gain == 1.0f;
  }

  using Var = typename Graph<Scalar>::Var;
  const Var style = graph.conv1x1(graph.constant(std::move(z)), graph.param(layer.style_map));
  const Var noise = graph.constant(std::move(r));
  const Var rs = spatial ? graph.mul(noise, style) : graph.bcast_mul(noise, style);
  Var pert = graph.scale(graph.bcast_mul(rs, graph.param(layer.modulation)), layer.alpha);
  if (!unit_gain) pert = graph.bcast_mul(pert, graph.constant(std::move(gains)));

  SdlResult<Scalar> result;
  result.output = graph.add(features, pert);
  if (keep_record) {
    SdlPerturbationRecord<Scalar> rec;
    rec.level = layer.level;
    rec.style = graph.value(style);
    rec.pixel_noise = graph.value(noise);
    rec.perturbation = graph.value(pert);
    rec.pixel_keys.assign(pixel_keys.begin(), pixel_keys.end());
    result.record = std::move(rec);
  }
  return result;
}

template <typename Scalar>
std::pair<Tensor<Scalar>, SdlPerturbationRecord<Scalar>> sdl_forward(const Tensor<Scalar>& features,
                                                                     std::span<const LatentTensor> latents,
                                                                     std::span<const RngKey> pixel_keys,
                                                                     SdlLayer<Scalar>& layer) {
  Graph<Scalar> graph;
  auto res = sdl_forward(graph, graph.constant(features), latents, pixel_keys, layer, true);
  return {graph.value(res.output), std::move(*res.record)};
}

LatentSet sample_latents(const RngKey& key, std::span<const LevelGrid> grids, Index latent_depth, LatentMode mode) {
  if (key.role != RngRole::latent) throw std::invalid_argument("sample_latents: key role must be latent");
  if (grids.size() != 3) throw std::invalid_argument("sample_latents: expected three level grids");
  LatentSet out;
  for (std::size_t i = 0; i < 3; ++i) {
    const LevelGrid& g = grids[i];
    LatentTensor& z = out[i];
    z.level = g.level;
    z.height = mode == LatentMode::spatial ? g.height : 1;
    z.width = mode == LatentMode::spatial ? g.width : 1;
    z.depth = latent_depth;
    z.values.resize(z.size());
    fill_gaussian<float>(key.with_layer(static_cast<std::uint32_t>(g.level)), z.values);
  }
  return out;
}

LatentSet apply_beta(const LatentSet& latents, const std::array<double, 3>& beta) {
  LatentSet out = latents;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!std::isfinite(beta[i])) throw std::invalid_argument("apply_beta: non-finite beta");
    out[i].gain = latents[i].gain * static_cast<float>(beta[i]);
  }
  return out;
}

LatentTensor interpolate(const LatentTensor& a, const LatentTensor& b, double e) {
  if (!(e >= 0.0 && e <= 1.0)) throw std::invalid_argument("interpolate: e must lie in [0, 1]");
  if (a.level != b.level || a.size() != b.size()) throw std::invalid_argument("interpolate: latent layout mismatch");
  const float ef = static_cast<float>(e);
  const float cf = 1.0f - ef;
  LatentTensor out = a;
  if (a.gain == b.gain) {
    out.values = cf * a.values + ef * b.values;
  } else {
    out.values = cf * a.effective() + ef * b.effective();
    out.gain = 1.0f;
  }
  return out;
}

template Tensor<float> LatentTensor::channels_first<float>() const;
template Tensor<double> LatentTensor::channels_first<double>() const;

#define SDL_INSTANTIATE(S)                                                                                     \
  template struct SdlLayer<S>;                                                                                 \
  template Tensor<S> pixel_noise<S>(const RngKey&, Index, Index, Index);                                       \
  template Graph<S>::Var sdl_combine<S>(Graph<S>&, Graph<S>::Var, Graph<S>::Var, Graph<S>::Var, Graph<S>::Var, S); \
  template SdlResult<S> sdl_forward<S>(Graph<S>&, Graph<S>::Var, std::span<const LatentTensor>,                \
                                       std::span<const RngKey>, SdlLayer<S>&, bool, std::span<const PixelBlend>); \
  template std::pair<Tensor<S>, SdlPerturbationRecord<S>> sdl_forward<S>(                                      \
      const Tensor<S>&, std::span<const LatentTensor>, std::span<const RngKey>, SdlLayer<S>&);

SDL_INSTANTIATE(float)
SDL_INSTANTIATE(double)

}  // namespace sdl
