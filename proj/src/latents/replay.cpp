#include "sdl/latents.hpp"

#include "sdl/binary_io.hpp"

#include <cmath>
#include <thread>

namespace sdl {

namespace {

void check_model(const LatentArchive& archive, const LoadedModel& model) {
  if (model.sha256 != archive.header.model_sha256) {
    throw ChecksumMismatch("checkpoint sha256 " + model.sha256 + " does not match archive model_sha256 " +
                           archive.header.model_sha256);
  }
}

std::vector<StepNoise> scaled(const std::vector<StepNoise>& noise, const BetaVector& beta) {
  std::vector<StepNoise> out = noise;
  for (StepNoise& s : out) s.latents = apply_beta(s.latents, beta);
  return out;
}

MemberTrajectory run_checked(LoadedModel& model, const TensorF& initial, Index member,
                             const std::vector<StepNoise>& noise) {
  MemberTrajectory t = run_member(model.state, initial, static_cast<std::uint32_t>(member), noise, false);
  if (t.failed) throw std::runtime_error("replay failed: " + t.diagnostic);
  return t;
}

template <typename F>
void parallel_for(std::size_t n, unsigned workers, F&& body) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(n)));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

LoadedModel open_checkpoint(const std::filesystem::path& path) {
  LoadedModel m{load_checkpoint(path), file_sha256(path)};
  return m;
}

MemberTrajectory replay_member(const LatentArchive& archive, LoadedModel& model, Index member,
                               const std::optional<BetaVector>& beta_override) {
  check_model(archive, model);
  const BetaVector beta = beta_override.value_or(archive.header.beta);
  return run_checked(model, archive.header.initial, member, scaled(archive.member(member), beta));
}

std::vector<MemberTrajectory> replay_all(const LatentArchive& archive, LoadedModel& model,
                                         const std::optional<BetaVector>& beta_override, unsigned workers) {
  check_model(archive, model);
  std::vector<MemberTrajectory> out(static_cast<std::size_t>(archive.header.members));
  parallel_for(out.size(), workers,
               [&](std::size_t m) { out[m] = replay_member(archive, model, static_cast<Index>(m), beta_override); });
  return out;
}

std::string trajectory_sha256(const MemberTrajectory& t) {
  Sha256 h;
  for (const TensorF& s : t.states) h.update(s.data(), static_cast<std::size_t>(s.size()) * sizeof(float));
  return h.hex();
}

std::vector<StepNoise> interpolated_noise(const LatentArchive& archive, Index member_i, Index member_j, double e,
                                          const InterpolationOptions& options) {
  if (!(e >= 0.0 && e <= 1.0)) throw std::invalid_argument("interpolate: e must lie in [0, 1]");
  const auto& a = archive.member(member_i);
  const auto& b = archive.member(member_j);
  std::vector<StepNoise> out(a.size());
  for (std::size_t t = 0; t < a.size(); ++t)
    for (std::size_t l = 0; l < 3; ++l) {
      out[t].latents[l] = interpolate(a[t].latents[l], b[t].latents[l], e);
      if (options.interpolate_pixel_noise) {
        out[t].pixel_keys[l] = a[t].pixel_keys[l];
        out[t].pixel_blend[l] = PixelBlend{b[t].pixel_keys[l], static_cast<float>(e)};
      } else {
        out[t].pixel_keys[l] = e < 0.5 ? a[t].pixel_keys[l] : b[t].pixel_keys[l];
      }
    }
  return out;
}

MemberTrajectory interpolate_members(const LatentArchive& archive, LoadedModel& model, Index member_i,
                                     Index member_j, double e, const InterpolationOptions& options) {
  check_model(archive, model);
  const auto noise = scaled(interpolated_noise(archive, member_i, member_j, e, options), archive.header.beta);
  return run_checked(model, archive.header.initial, e < 0.5 ? member_i : member_j, noise);
}

TensorF lead_tensor(const MemberTrajectory& trajectory) {
  if (trajectory.states.size() < 2) throw std::invalid_argument("lead_tensor: trajectory has no forecast steps");
  const Shape s = trajectory.states.front().shape();
  const auto leads = static_cast<Index>(trajectory.states.size() - 1);
  TensorF out(Shape{leads, s.c, s.h, s.w});
  for (Index t = 0; t < leads; ++t) out.set_batch(t, trajectory.states[static_cast<std::size_t>(t + 1)]);
  return out;
}

std::vector<SweepPoint> spread_sweep(std::span<const SweepCase> cases, LoadedModel& model, std::span<const double> betas,
                                     const SpatialWeights& weights, double alpha_loss, unsigned workers) {
  if (cases.empty()) throw std::invalid_argument("spread_sweep: no cases");
  for (double b : betas)
    if (!std::isfinite(b)) throw std::invalid_argument("spread_sweep: non-finite beta");
  const ArchiveHeader& h0 = cases.front().archive->header;
  MetricsOptions opt;
  opt.alpha_loss = alpha_loss;
  std::vector<SweepPoint> out;
  for (double b : betas) {
    MetricsAccumulator acc(h0.config.variable_names, h0.n_steps, h0.members, weights, opt);
    for (const SweepCase& c : cases) {
      const auto members = replay_all(*c.archive, model, BetaVector{b, b, b}, workers);
      std::vector<TensorF> fields;
      for (const auto& m : members) fields.push_back(lead_tensor(m));
      acc.add(fields, c.truth);
    }
    out.push_back({b, acc.finalize()});
  }
  return out;
}

std::vector<AttributionValue> beta_layer_attribution(const LatentArchive& archive, LoadedModel& model, int level,
                                                     std::span<const double> values,
                                                     const AttributionOptions& options) {
  if (level < 1 || level > 3) throw std::invalid_argument("attribution: level must be 1, 2 or 3");
  if (options.lead < 1 || options.lead > archive.header.n_steps) throw std::invalid_argument("attribution: lead out of range");
  const TensorF base = lead_tensor(replay_member(archive, model, options.member, BetaVector{1.0, 1.0, 1.0}));
  const Shape s = base.shape();
  const TensorF x0 = model.state.normalizer.normalize(archive.header.initial);
  std::vector<AttributionValue> out;
  for (double v : values) {
    BetaVector beta{1.0, 1.0, 1.0};
    beta[static_cast<std::size_t>(level - 1)] = v;
    AttributionValue r;
    r.value = v;
    r.anomaly = TensorF(s, lead_tensor(replay_member(archive, model, options.member, beta)).array() - base.array());
    for (Index c = 0; c < s.c; ++c) {
      double ss = 0.0;
      for (Index t = 0; t < s.n; ++t) ss += r.anomaly.plane(t, c).array().square().template cast<double>().sum();
      r.rms.push_back(std::sqrt(ss / static_cast<double>(s.n * s.h * s.w)));
    }
    const float* zp = r.anomaly.data() + r.anomaly.offset(options.lead - 1, options.vorticity_variable, 0, 0);
    std::vector<double> zeta(zp, zp + s.h * s.w), u, w;
    velocity_from_vorticity(zeta, s.h, u, w);
    r.spectrum = ke_spectrum(u, w, s.h);

    const std::vector<StepNoise> step1{scaled({archive.member(options.member).front()}, beta)};
    std::vector<SdlPerturbationRecord<float>> records;
    model.state.model.step(x0, &step1, &records);
    for (auto& rec : records)
      if (rec.level == level) r.first_perturbation = std::move(rec.perturbation);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace sdl
