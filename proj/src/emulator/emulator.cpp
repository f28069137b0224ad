#include "sdl/emulator.hpp"

#include <cmath>
#include <stdexcept>
#include <thread>

namespace sdl {

void ModelConfig::validate() const {
  if (grid <= 0 || grid % 8 != 0) throw std::invalid_argument("ModelConfig: grid must be a positive multiple of 8");
  for (Index w : widths)
    if (w <= 0) throw std::invalid_argument("ModelConfig: channel widths must be positive");
  if (variables <= 0) throw std::invalid_argument("ModelConfig: need at least one variable");
  if (latent_depth <= 0) throw std::invalid_argument("ModelConfig: latent depth must be positive");
  if (!std::isfinite(alpha)) throw std::invalid_argument("ModelConfig: alpha must be finite");
  if (static_cast<Index>(variable_names.size()) != variables) {
    throw std::invalid_argument("ModelConfig: variable_names must have one entry per variable");
  }
}

std::array<LevelGrid, 3> ModelConfig::level_grids() const {
  if (placement == InjectionPlacement::bottleneck) {
    return {LevelGrid{1, grid / 8, grid / 8, widths[3]}, LevelGrid{2, grid / 4, grid / 4, widths[2]},
            LevelGrid{3, grid / 2, grid / 2, widths[1]}};
  }
  return {LevelGrid{1, grid / 4, grid / 4, widths[2]}, LevelGrid{2, grid / 2, grid / 2, widths[1]},
          LevelGrid{3, grid, grid, widths[0]}};
}

Index ModelConfig::latent_bytes_per_step() const {
  Index total = 0;
  for (const LevelGrid& g : level_grids()) {
    total += latent_mode == LatentMode::spatial ? g.height * g.width * latent_depth : latent_depth;
  }
  return total * 4;
}

TensorF Normalizer::normalize(const TensorF& physical) const {
  TensorF out = physical;
  const Shape& s = out.shape();
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      auto p = out.plane(n, c);
      p = ((p.array() - static_cast<float>(mean[static_cast<std::size_t>(c)])) /
           static_cast<float>(stddev[static_cast<std::size_t>(c)]))
              .matrix();
    }
  return out;
}

TensorF Normalizer::denormalize(const TensorF& network) const {
  TensorF out = network;
  const Shape& s = out.shape();
  for (Index n = 0; n < s.n; ++n)
    for (Index c = 0; c < s.c; ++c) {
      auto p = out.plane(n, c);
      p = (p.array() * static_cast<float>(stddev[static_cast<std::size_t>(c)]) +
           static_cast<float>(mean[static_cast<std::size_t>(c)]))
              .matrix();
    }
  return out;
}

RngKey latent_key(std::uint64_t seed, std::uint32_t member, std::uint32_t step) {
  return RngKey{seed, member, 0, step, RngRole::latent};
}

std::array<RngKey, 3> pixel_keys(std::uint64_t seed, std::uint32_t member, std::uint32_t step) {
  return {RngKey{seed, member, 1, step, RngRole::pixel_noise}, RngKey{seed, member, 2, step, RngRole::pixel_noise},
          RngKey{seed, member, 3, step, RngRole::pixel_noise}};
}

namespace {

template <typename Scalar>
Parameter<Scalar> make_param(const std::string& name, const Shape& shape, double std, std::uint64_t seed,
                             std::uint32_t index) {
  Tensor<Scalar> t(shape);
  if (std > 0.0) {
    const auto g = gaussian_stream(RngKey{seed, 0, index, 0, RngRole::init_perturbation},
                                   static_cast<std::size_t>(t.size()));
    for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(std * g[static_cast<std::size_t>(i)]);
  }
  return Parameter<Scalar>(name, std::move(t));
}

}  // namespace

template <typename Scalar>
Emulator<Scalar>::Emulator(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& w = config_.widths;
  const Index v = config_.variables;
  const std::uint64_t seed = config_.init_seed;
  std::uint32_t index = 0;
  auto conv = [&](const std::string& name, Index cout, Index cin, Index k, double gain) {
    return make_param<Scalar>(name, Shape{cout, cin, k, k}, gain * std::sqrt(2.0 / static_cast<double>(cin * k * k)),
                              seed, index++);
  };
  auto bias = [&](const std::string& name, Index c) { return make_param<Scalar>(name, Shape{1, c, 1, 1}, 0.0, seed, index++); };
  auto block = [&](const std::string& name, Index c) {
    ResBlock<Scalar> b;
    b.w1 = conv(name + ".w1", c, c, 3, 1.0);
    b.b1 = bias(name + ".b1", c);
    b.w2 = conv(name + ".w2", c, c, 3, 0.1);
    b.b2 = bias(name + ".b2", c);
    return b;
  };

  stem_w_ = conv("stem.w", w[0], v, 3, 1.0);
  stem_b_ = bias("stem.b", w[0]);
  for (std::size_t i = 0; i < 4; ++i) enc_[i] = block("enc" + std::to_string(i), w[i]);
  for (std::size_t i = 0; i < 3; ++i) {
    down_w_[i] = conv("down" + std::to_string(i) + ".w", w[i + 1], w[i], 1, 0.7);
    down_b_[i] = bias("down" + std::to_string(i) + ".b", w[i + 1]);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    up_w_[i] = conv("up" + std::to_string(i) + ".w", w[i], w[i + 1], 1, 0.7);
    up_b_[i] = bias("up" + std::to_string(i) + ".b", w[i]);
    fuse_w_[i] = conv("fuse" + std::to_string(i) + ".w", w[i], 2 * w[i], 1, 0.7);
    fuse_b_[i] = bias("fuse" + std::to_string(i) + ".b", w[i]);
    dec_[i] = block("dec" + std::to_string(i), w[i]);
  }
  head_w_ = conv("head.w", v, w[0], 3, 0.01);
  head_b_ = bias("head.b", v);
  if (config_.stochastic) {
    config_.stochastic = false;
    insert_sdl(seed);
  }
}

template <typename Scalar>
void Emulator<Scalar>::insert_sdl(std::uint64_t seed) {
  sdl_.clear();
  for (const LevelGrid& g : config_.level_grids()) {
    sdl_.emplace_back(g.level, g.channels, config_.latent_depth, static_cast<Scalar>(config_.alpha),
                      config_.latent_mode,
                      RngKey{seed, 0, static_cast<std::uint32_t>(1000 + g.level), 0, RngRole::init_perturbation});
  }
  config_.stochastic = true;
}

template <typename Scalar>
auto Emulator<Scalar>::res_block(G& g, Var x, ResBlock<Scalar>& p) -> Var {
  Var h = g.conv3x3(g.gelu(x), g.param(p.w1), g.param(p.b1));
  h = g.conv3x3(g.gelu(h), g.param(p.w2), g.param(p.b2));
  return g.add(x, h);
}

template <typename Scalar>
auto Emulator<Scalar>::inject(G& g, Var x, int level, const std::vector<StepNoise>* noise, bool keep,
                              std::vector<SdlPerturbationRecord<Scalar>>& records) -> Var {
  if (!noise || !config_.stochastic) return x;
  const auto lv = static_cast<std::size_t>(level - 1);
  std::vector<LatentTensor> latents;
  std::vector<RngKey> keys;
  std::vector<PixelBlend> blends;
  latents.reserve(noise->size());
  keys.reserve(noise->size());
  bool blended = false;
  for (const StepNoise& n : *noise) {
    latents.push_back(n.latents[lv]);
    keys.push_back(n.pixel_keys[lv]);
    blends.push_back(n.pixel_blend[lv]);
    blended = blended || n.pixel_blend[lv].weight != 0.0f;
  }
  if (!blended) blends.clear();
  auto res = sdl_forward<Scalar>(g, x, latents, keys, sdl_[lv], keep, blends);
  if (res.record) records.push_back(std::move(*res.record));
  return res.output;
}

template <typename Scalar>
auto Emulator<Scalar>::forward(G& g, Var state, const std::vector<StepNoise>* noise, bool keep_records)
    -> StepOutput {
  const Shape s = g.value(state).shape();
  if (s.c != config_.variables || s.h != config_.grid || s.w != config_.grid) {
    throw ShapeError("Emulator::forward", "state", s,
                     "(B," + std::to_string(config_.variables) + "," + std::to_string(config_.grid) + "," +
                         std::to_string(config_.grid) + ")");
  }
  if (noise && config_.stochastic && static_cast<Index>(noise->size()) != s.n) {
    throw std::invalid_argument("Emulator::forward: need one StepNoise per batch item");
  }
  StepOutput out;
  const bool bottleneck = config_.placement == InjectionPlacement::bottleneck;

  std::array<Var, 3> skips;
  Var h = g.conv3x3(state, g.param(stem_w_), g.param(stem_b_));
  h = res_block(g, h, enc_[0]);
  skips[0] = h;
  for (std::size_t i = 0; i < 3; ++i) {
    h = g.conv1x1(g.avgpool2(h), g.param(down_w_[i]), g.param(down_b_[i]));
    h = res_block(g, h, enc_[i + 1]);
    if (i < 2) skips[i + 1] = h;
  }
  if (bottleneck) h = inject(g, h, 1, noise, keep_records, out.records);
  for (int i = 2; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    h = g.conv1x1(g.upsample2(h), g.param(up_w_[ui]), g.param(up_b_[ui]));
    // bottleneck placement: grid/4 -> level 2, grid/2 -> level 3, grid -> none
    const int level = bottleneck ? (i == 2 ? 2 : i == 1 ? 3 : 0) : 3 - i;
    if (level > 0) h = inject(g, h, level, noise, keep_records, out.records);
    h = g.conv1x1(g.concat(h, skips[ui]), g.param(fuse_w_[ui]), g.param(fuse_b_[ui]));
    h = res_block(g, h, dec_[ui]);
  }
  Var delta = g.conv3x3(g.gelu(h), g.param(head_w_), g.param(head_b_));
  out.output = g.add(state, delta);
  return out;
}

template <typename Scalar>
Tensor<Scalar> Emulator<Scalar>::step(const Tensor<Scalar>& state, const std::vector<StepNoise>* noise,
                                      std::vector<SdlPerturbationRecord<Scalar>>* records) {
  G g;
  auto out = forward(g, g.constant(state), noise, records != nullptr);
  if (records) *records = std::move(out.records);
  return g.value(out.output);
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> Emulator<Scalar>::parameters() {
  std::vector<Parameter<Scalar>*> p{&stem_w_, &stem_b_};
  auto blk = [&](ResBlock<Scalar>& b) {
    for (auto* q : {&b.w1, &b.b1, &b.w2, &b.b2}) p.push_back(q);
  };
  for (auto& b : enc_) blk(b);
  for (std::size_t i = 0; i < 3; ++i) {
    p.push_back(&down_w_[i]);
    p.push_back(&down_b_[i]);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    p.push_back(&up_w_[i]);
    p.push_back(&up_b_[i]);
    p.push_back(&fuse_w_[i]);
    p.push_back(&fuse_b_[i]);
    blk(dec_[i]);
  }
  p.push_back(&head_w_);
  p.push_back(&head_b_);
  for (auto& l : sdl_) {
    p.push_back(&l.style_map);
    p.push_back(&l.modulation);
  }
  return p;
}

template <typename Scalar>
std::vector<const Parameter<Scalar>*> Emulator<Scalar>::parameters() const {
  auto mut = const_cast<Emulator*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <typename Scalar>
std::vector<Parameter<Scalar>*> Emulator<Scalar>::sdl_parameters() {
  std::vector<Parameter<Scalar>*> p;
  for (auto& l : sdl_) {
    p.push_back(&l.style_map);
    p.push_back(&l.modulation);
  }
  return p;
}

template <typename Scalar>
Index Emulator<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

template <typename Scalar>
void Emulator<Scalar>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename Scalar>
void Emulator<Scalar>::set_trainable(bool base, bool sdl_layers) {
  for (auto* p : parameters()) p->trainable = base;
  for (auto* p : sdl_parameters()) p->trainable = sdl_layers;
}

template <typename Scalar>
template <typename Other>
Emulator<Other> Emulator<Scalar>::cast() const {
  ModelConfig cfg = config_;
  Emulator<Other> out(cfg);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->value = src[i]->value.template cast<Other>();
    dst[i]->trainable = src[i]->trainable;
  }
  return out;
}

template class Emulator<float>;
template class Emulator<double>;
template Emulator<double> Emulator<float>::cast<double>() const;
template Emulator<float> Emulator<double>::cast<float>() const;

MemberTrajectory run_member(ModelState& state, const TensorF& initial, std::uint32_t member,
                            const std::vector<StepNoise>& noise, bool deterministic) {
  MemberTrajectory traj;
  traj.member = member;
  traj.noise = noise;
  traj.states.reserve(noise.size() + 1);
  traj.states.push_back(initial);
  TensorF x = state.normalizer.normalize(initial);
  for (std::size_t t = 0; t < noise.size(); ++t) {
    const std::vector<StepNoise> batch{noise[t]};
    x = state.model.step(x, deterministic ? nullptr : &batch);
    if (!x.all_finite()) {
      traj.failed = true;
      traj.diagnostic = "member " + std::to_string(member) + ": non-finite state at step " + std::to_string(t + 1);
      break;
    }
    traj.states.push_back(state.normalizer.denormalize(x));
  }
  return traj;
}

EnsembleBatch rollout(ModelState& state, const TensorF& initial, const RolloutOptions& options) {
  if (options.n_steps < 1) throw std::invalid_argument("rollout: n_steps must be >= 1");
  if (options.members < 1) throw std::invalid_argument("rollout: members must be >= 1");
  const ModelConfig& cfg = state.model.config();
  const auto grids = cfg.level_grids();
  EnsembleBatch batch;
  batch.seed = options.seed;
  batch.beta = options.beta;
  batch.deterministic = options.deterministic || !cfg.stochastic;
  batch.n_steps = options.n_steps;
  batch.members.resize(static_cast<std::size_t>(options.members));

  auto run = [&](std::size_t m) {
    const auto member = static_cast<std::uint32_t>(m);
    std::vector<StepNoise> base(static_cast<std::size_t>(options.n_steps));
    std::vector<StepNoise> scaled(base.size());
    for (std::size_t t = 0; t < base.size(); ++t) {
      const auto step = static_cast<std::uint32_t>(t);
      base[t].latents = sample_latents(latent_key(options.seed, member, step), grids, cfg.latent_depth, cfg.latent_mode);
      base[t].pixel_keys = pixel_keys(options.seed, member, step);
      scaled[t] = base[t];
      scaled[t].latents = apply_beta(base[t].latents, options.beta);
    }
    MemberTrajectory traj = run_member(state, initial, member, scaled, batch.deterministic);
    traj.noise = std::move(base);
    batch.members[m] = std::move(traj);
  };

  const unsigned workers = std::max(1u, options.workers);
  if (workers == 1) {
    for (std::size_t m = 0; m < batch.members.size(); ++m) run(m);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t m = w; m < batch.members.size(); m += workers) run(m);
      });
    }
    for (auto& t : pool) t.join();
  }
  return batch;
}

}  // namespace sdl
