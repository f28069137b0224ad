#include "sdl/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

namespace sdl {

namespace {

std::string loss_name(LossKind k) { return k == LossKind::mse ? "mse" : "afcrps"; }

LossKind loss_from_name(const std::string& s) {
  if (s == "mse") return LossKind::mse;
  if (s == "afcrps") return LossKind::afcrps;
  throw std::invalid_argument("unknown loss kind '" + s + "'");
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Sampler stream for (seed, phase, epoch).
std::mt19937_64 batch_rng(std::uint64_t seed, std::size_t phase, std::int64_t epoch) {
  return std::mt19937_64(splitmix64(seed ^ splitmix64(phase * 0x10000ull + static_cast<std::uint64_t>(epoch))));
}

// Latent seed for fine-tuning draws, kept apart from forecast seeds.
std::uint64_t finetune_key_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x66696e6574756e65ull); }

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Snapshot {
  std::vector<TensorF> values;
  static Snapshot take(Emulator<float>& m) {
    Snapshot s;
    for (auto* p : m.parameters()) s.values.push_back(p->value);
    return s;
  }
  void restore(Emulator<float>& m) const {
    auto ps = m.parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->value = values[i];
  }
};

[[noreturn]] void diverged(ModelState& state, const Snapshot& good, const TrainHooks& hooks, const std::string& where) {
  good.restore(state.model);
  std::filesystem::path path;
  if (!hooks.checkpoint_dir.empty()) {
    std::filesystem::create_directories(hooks.checkpoint_dir);
    path = hooks.checkpoint_dir / "last_good.sdlm";
    save_checkpoint(state, path);
  }
  throw TrainingDiverged("training diverged: non-finite loss in " + where, path);
}

TensorF normalized_states(const ModelState& s, const Dataset& data, std::span<const Index> idx) {
  return s.normalizer.normalize(data.states(idx));
}

std::vector<Index> shifted(std::span<const Index> idx, Index by) {
  std::vector<Index> out(idx.begin(), idx.end());
  for (Index& i : out) i += by;
  return out;
}

StepNoise draw_noise(const ModelConfig& cfg, std::uint64_t seed, std::uint32_t member, std::uint32_t step) {
  StepNoise n;
  n.latents = sample_latents(latent_key(seed, member, step), cfg.level_grids(), cfg.latent_depth, cfg.latent_mode);
  n.pixel_keys = pixel_keys(seed, member, step);
  return n;
}

// (B, ...) -> (B * M, ...) with item b * M + m = input b.
TensorF replicate(const TensorF& x, Index members) {
  Shape s = x.shape();
  const Index item = s.c * s.h * s.w;
  TensorF out(Shape{s.n * members, s.c, s.h, s.w});
  for (Index b = 0; b < s.n; ++b)
    for (Index m = 0; m < members; ++m) out.array().segment((b * members + m) * item, item) = x.array().segment(b * item, item);
  return out;
}

}  // namespace

// --- phases and cost accounting -------------------------------------------------

std::int64_t Phase::forward_passes() const {
  return epochs * batches_per_epoch * batch_size * static_cast<std::int64_t>(rollout_steps) * std::max<std::int64_t>(members, 1);
}

void Phase::validate() const {
  if (rollout_steps < 1 || epochs < 0 || batches_per_epoch < 1 || batch_size < 1) {
    throw std::invalid_argument("phase '" + name + "': steps, batches and batch size must be positive");
  }
  if (loss == LossKind::afcrps && members < 2) throw std::invalid_argument("phase '" + name + "': afcrps needs members >= 2");
  if (loss == LossKind::mse && members > 1) throw std::invalid_argument("phase '" + name + "': mse phases take no members");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw std::invalid_argument("phase '" + name + "': bad learning rate");
}

nlohmann::json to_json(const Phase& p) {
  return {{"name", p.name},
          {"loss", loss_name(p.loss)},
          {"rollout_steps", p.rollout_steps},
          {"epochs", p.epochs},
          {"batches_per_epoch", p.batches_per_epoch},
          {"batch_size", p.batch_size},
          {"members", p.members},
          {"learning_rate", p.learning_rate},
          {"adam",
           {{"beta1", p.adam.beta1}, {"beta2", p.adam.beta2}, {"epsilon", p.adam.epsilon}, {"clip_norm", p.adam.clip_norm}}}};
}

Phase phase_from_json(const nlohmann::json& j) {
  Phase p;
  p.name = j.value("name", std::string("phase"));
  p.loss = loss_from_name(j.value("loss", std::string("mse")));
  p.rollout_steps = j.value("rollout_steps", Index{1});
  p.epochs = j.value("epochs", std::int64_t{1});
  p.batches_per_epoch = j.value("batches_per_epoch", std::int64_t{1});
  p.batch_size = j.value("batch_size", std::int64_t{1});
  p.members = j.value("members", std::int64_t{0});
  p.learning_rate = j.value("learning_rate", p.loss == LossKind::mse ? 3e-4 : 1e-4);
  if (j.contains("adam")) {
    const auto& a = j.at("adam");
    p.adam.beta1 = a.value("beta1", p.adam.beta1);
    p.adam.beta2 = a.value("beta2", p.adam.beta2);
    p.adam.epsilon = a.value("epsilon", p.adam.epsilon);
    p.adam.clip_norm = a.value("clip_norm", p.adam.clip_norm);
  }
  p.validate();
  return p;
}

std::vector<Phase> reference_baseline_phases() {
  auto mk = [](std::string name, Index steps, std::int64_t epochs, std::int64_t batches) {
    Phase p;
    p.name = std::move(name);
    p.rollout_steps = steps;
    p.epochs = epochs;
    p.batches_per_epoch = batches;
    p.batch_size = 32;
    return p;
  };
  return {mk("1-step", 1, 70, 1781), mk("2-step", 2, 20, 1780), mk("4-step", 4, 20, 1000), mk("8-step", 8, 20, 500),
          mk("16-step", 16, 20, 100)};
}

Phase reference_finetune_phase() {
  Phase p;
  p.name = "sdl-finetune";
  p.loss = LossKind::afcrps;
  p.epochs = 20;
  p.batches_per_epoch = 1000;
  p.batch_size = 1;  // one input replicated into 10 members
  p.members = 10;
  p.learning_rate = 1e-4;
  return p;
}

std::vector<std::int64_t> published_baseline_passes() { return {3988160, 2278400, 2560000, 2560000, 1024000}; }

std::int64_t published_finetune_passes() { return 200000; }

std::vector<Phase> desk_baseline_phases() {
  auto mk = [](std::string name, Index steps, std::int64_t epochs, std::int64_t batches) {
    Phase p;
    p.name = std::move(name);
    p.rollout_steps = steps;
    p.epochs = epochs;
    p.batches_per_epoch = batches;
    p.batch_size = 8;
    p.learning_rate = 3e-4;
    return p;
  };
  return {mk("1-step", 1, 30, 50), mk("2-step", 2, 10, 50), mk("4-step", 4, 10, 25)};
}

Phase desk_finetune_phase() {
  Phase p;
  p.name = "sdl-finetune";
  p.loss = LossKind::afcrps;
  p.epochs = 20;
  p.batches_per_epoch = 50;
  p.batch_size = 2;
  p.members = 10;
  p.learning_rate = 1e-4;
  return p;
}

void CostLedger::record(const std::string& phase, std::int64_t forward, std::int64_t backward) {
  for (Entry& e : entries)
    if (e.phase == phase) {
      e.forward += forward;
      e.backward += backward;
      return;
    }
  entries.push_back({phase, forward, backward});
}

std::int64_t CostLedger::forward_total() const {
  std::int64_t s = 0;
  for (const Entry& e : entries) s += e.forward;
  return s;
}

std::int64_t CostLedger::backward_total() const {
  std::int64_t s = 0;
  for (const Entry& e : entries) s += e.backward;
  return s;
}

const CostLedger::Entry* CostLedger::find(const std::string& phase) const {
  for (const Entry& e : entries)
    if (e.phase == phase) return &e;
  return nullptr;
}

CostLedger CostLedger::planned(std::span<const Phase> phases) {
  CostLedger l;
  for (const Phase& p : phases) l.record(p.name, p.forward_passes(), p.forward_passes());
  return l;
}

nlohmann::json CostLedger::to_json() const {
  nlohmann::json j = nlohmann::json::array();
  for (const Entry& e : entries) j.push_back({{"phase", e.phase}, {"forward", e.forward}, {"backward", e.backward}});
  return {{"phases", j}, {"forward_total", forward_total()}, {"backward_total", backward_total()}};
}

CostRatio cost_ratio(const CostLedger& baseline, const CostLedger& finetune, double backward_weight) {
  const std::int64_t fb = baseline.forward_total(), bb = baseline.backward_total();
  const std::int64_t ff = finetune.forward_total(), bf = finetune.backward_total();
  if (fb == 0) throw std::domain_error("cost_ratio: baseline ledger has no forward passes");
  CostRatio r;
  const std::int64_t g = std::gcd(ff, fb);
  r.numerator = ff / g;
  r.denominator = fb / g;
  if (bb == fb && bf == ff) {
    // (f + w f) / (b + w b): the weight cancels.
    r.value = static_cast<double>(r.numerator) / static_cast<double>(r.denominator);
  } else {
    r.value = (static_cast<double>(ff) + backward_weight * static_cast<double>(bf)) /
              (static_cast<double>(fb) + backward_weight * static_cast<double>(bb));
  }
  return r;
}

// --- optimizer -------------------------------------------------------------------

Adam::Adam(std::vector<Parameter<float>*> params, double learning_rate, AdamConfig config)
    : lr_(learning_rate), cfg_(config) {
  for (auto* p : params)
    if (p->trainable) params_.push_back(p);
  for (auto* p : params_) {
    m_.push_back(Eigen::ArrayXd::Zero(p->value.size()));
    v_.push_back(Eigen::ArrayXd::Zero(p->value.size()));
  }
}

double Adam::step() {
  double sq = 0.0;
  for (auto* p : params_)
    if (p->has_grad()) sq += p->grad.array().template cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter<float>& p = *params_[i];
    if (!p.has_grad()) continue;
    const Eigen::ArrayXd g = p.grad.array().template cast<double>() * clip;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.square();
    const Eigen::ArrayXd update = lr_ * (m_[i] / c1) / ((v_[i] / c2).sqrt() + cfg_.epsilon);
    p.value.array() -= update.cast<float>();
  }
  return norm;
}

// --- data ------------------------------------------------------------------------

Normalizer fit_normalizer(const Dataset& data) {
  const Index v = data.variables(), plane = data.grid() * data.grid();
  if (data.states() < 1) throw std::invalid_argument("fit_normalizer: empty dataset");
  std::vector<double> sum(static_cast<std::size_t>(v), 0.0), sq(static_cast<std::size_t>(v), 0.0);
  for (Index t = 0; t < data.states(); ++t) {
    const TensorF s = data.state(t);
    for (Index c = 0; c < v; ++c) {
      const auto a = s.array().segment(c * plane, plane).template cast<double>();
      sum[static_cast<std::size_t>(c)] += a.sum();
      sq[static_cast<std::size_t>(c)] += a.square().sum();
    }
  }
  for (std::size_t c = 0; c < sum.size(); ++c)
    if (!std::isfinite(sum[c]) || !std::isfinite(sq[c])) {
      throw std::domain_error("fit_normalizer: non-finite values in variable " + std::to_string(c));
    }
  Normalizer n;
  const double count = static_cast<double>(data.states() * plane);
  for (std::size_t c = 0; c < sum.size(); ++c) {
    const double mean = sum[c] / count;
    const double var = std::max(sq[c] / count - mean * mean, 0.0);
    n.mean.push_back(mean);
    n.stddev.push_back(var > 0.0 ? std::sqrt(var) : 1.0);
  }
  return n;
}

std::vector<Index> spaced_indices(Index limit, Index count) {
  if (limit < 1 || count < 1) throw std::invalid_argument("spaced_indices: empty range");
  count = std::min(count, limit);
  std::vector<Index> out;
  for (Index i = 0; i < count; ++i) out.push_back(i * limit / count);
  return out;
}

// --- configuration -----------------------------------------------------------------

nlohmann::json TrainingConfig::to_json() const {
  nlohmann::json phases_j = nlohmann::json::array();
  for (const Phase& p : phases) phases_j.push_back(sdl::to_json(p));
  return {{"model", model_config_json(model)},
          {"phases", phases_j},
          {"finetune", sdl::to_json(finetune)},
          {"seed", seed},
          {"sdl_init_seed", sdl_init_seed},
          {"alpha_loss", alpha_loss},
          {"freeze_base", freeze_base},
          {"validation_samples", validation_samples},
          {"validation_members", validation_members}};
}

TrainingConfig TrainingConfig::from_json(const nlohmann::json& j) {
  TrainingConfig c;
  if (j.contains("model")) {
    // partial model blocks override the defaults
    nlohmann::json m = model_config_json(c.model);
    m.update(j.at("model"));
    c.model = model_config_from_json(m);
  }
  if (j.contains("phases")) {
    c.phases.clear();
    for (const auto& p : j.at("phases")) c.phases.push_back(phase_from_json(p));
  }
  if (j.contains("finetune")) c.finetune = phase_from_json(j.at("finetune"));
  c.seed = j.value("seed", c.seed);
  c.sdl_init_seed = j.value("sdl_init_seed", c.sdl_init_seed);
  c.alpha_loss = j.value("alpha_loss", c.alpha_loss);
  c.freeze_base = j.value("freeze_base", c.freeze_base);
  c.validation_samples = j.value("validation_samples", c.validation_samples);
  c.validation_members = j.value("validation_members", c.validation_members);
  return c;
}

nlohmann::json EpochRecord::to_json() const {
  nlohmann::json j{{"phase", phase},         {"epoch", epoch},         {"train_loss", train_loss},
                   {"val_loss", val_loss},   {"grad_norm", grad_norm}, {"seconds", seconds}};
  if (val_spread) j["val_spread"] = *val_spread;
  if (val_mae) j["val_mae"] = *val_mae;
  return j;
}

// --- evaluation --------------------------------------------------------------------

double one_step_mse(ModelState& state, const Dataset& data, std::span<const Index> samples) {
  const SpatialWeights w = SpatialWeights::uniform(data.grid());
  double total = 0.0;
  for (std::size_t i = 0; i < samples.size(); i += 8) {
    const auto chunk = samples.subspan(i, std::min<std::size_t>(8, samples.size() - i));
    const TensorF pred = state.model.step(normalized_states(state, data, chunk), nullptr);
    const TensorF target = normalized_states(state, data, shifted(chunk, 1));
    total += weighted_mse(pred, target, w) * static_cast<double>(chunk.size());
  }
  return total / static_cast<double>(samples.size());
}

double persistence_mse(const Normalizer& normalizer, const Dataset& data, std::span<const Index> samples) {
  const SpatialWeights w = SpatialWeights::uniform(data.grid());
  double total = 0.0;
  for (Index i : samples) {
    const TensorF a = normalizer.normalize(data.state(i));
    const TensorF b = normalizer.normalize(data.state(i + 1));
    total += weighted_mse(a, b, w);
  }
  return total / static_cast<double>(samples.size());
}

EnsembleScore score_one_step(ModelState& state, const Dataset& data, std::span<const Index> samples, Index members,
                             std::uint64_t key_seed, double alpha_loss) {
  if (members < 2) throw std::invalid_argument("score_one_step: need at least 2 members");
  const ModelConfig& cfg = state.model.config();
  const SpatialWeights w = SpatialWeights::uniform(data.grid());
  EnsembleScore s;
  double var = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Index idx = samples[i];
    const std::array<Index, 1> one{idx};
    const TensorF x = normalized_states(state, data, one);
    const TensorF y = normalized_states(state, data, shifted(one, 1));
    s.mae += weighted_mae(state.model.step(x, nullptr), y, w);
    if (!cfg.stochastic) continue;
    std::vector<StepNoise> noise;
    for (Index m = 0; m < members; ++m) {
      noise.push_back(draw_noise(cfg, key_seed, static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(idx)));
    }
    const TensorF ens = state.model.step(replicate(x, members), &noise);
    s.crps += afcrps_field(ens, y, w, alpha_loss);
    const Index n = ens.size() / members;
    Eigen::ArrayXd mean = Eigen::ArrayXd::Zero(n), sq = Eigen::ArrayXd::Zero(n);
    for (Index m = 0; m < members; ++m) {
      const Eigen::ArrayXd a = ens.array().segment(m * n, n).template cast<double>();
      mean += a;
      sq += a.square();
    }
    mean /= static_cast<double>(members);
    var += ((sq - static_cast<double>(members) * mean.square()) / static_cast<double>(members - 1)).max(0.0).mean();
  }
  const double count = static_cast<double>(samples.size());
  s.mae /= count;
  if (cfg.stochastic) {
    s.crps /= count;
    s.spread = std::sqrt(var / count);
  } else {
    s.crps = s.mae;
  }
  return s;
}

// --- training loops ----------------------------------------------------------------

TrainResult train_deterministic(const TrainingConfig& config, const Dataset& train, const Dataset& val,
                                const TrainHooks& hooks) {
  config.model.validate();
  if (config.model.stochastic) throw std::invalid_argument("train_deterministic: model config must be deterministic");
  if (train.grid() != config.model.grid || val.grid() != config.model.grid) {
    throw std::invalid_argument("train_deterministic: dataset grid does not match the model grid");
  }
  for (const Phase& p : config.phases) {
    p.validate();
    if (p.loss != LossKind::mse) throw std::invalid_argument("train_deterministic: phase '" + p.name + "' is not mse");
    if (train.states() <= p.rollout_steps) throw std::invalid_argument("train_deterministic: dataset too short for " + p.name);
  }
  TrainResult r{ModelState{Emulator<float>(config.model), fit_normalizer(train)}, {}, {}};
  ModelState& st = r.state;
  const SpatialWeights w = SpatialWeights::uniform(train.grid());
  const auto val_idx = spaced_indices(val.samples(), config.validation_samples);

  for (std::size_t pi = 0; pi < config.phases.size(); ++pi) {
    const Phase& ph = config.phases[pi];
    Adam opt(st.model.parameters(), ph.learning_rate, ph.adam);
    const Index k = ph.rollout_steps;
    for (std::int64_t epoch = 0; epoch < ph.epochs; ++epoch) {
      const auto t0 = Clock::now();
      const Snapshot good = Snapshot::take(st.model);
      auto rng = batch_rng(config.seed, pi, epoch);
      std::uniform_int_distribution<Index> pick(0, train.states() - 1 - k);
      double loss_sum = 0.0, norm_sum = 0.0;
      for (std::int64_t b = 0; b < ph.batches_per_epoch; ++b) {
        std::vector<Index> idx(static_cast<std::size_t>(ph.batch_size));
        for (Index& i : idx) i = pick(rng);
        Graph<float> g;
        auto x = g.constant(normalized_states(st, train, idx));
        std::optional<Graph<float>::Var> total;
        for (Index s = 1; s <= k; ++s) {
          // Gradients flow through every step of the unrolled rollout.
          x = st.model.forward(g, x, nullptr).output;
          const auto l = weighted_mse(g, x, g.constant(normalized_states(st, train, shifted(idx, s))), w);
          total = total ? g.add(*total, l) : l;
        }
        const auto loss = g.scale(*total, 1.0f / static_cast<float>(k));
        const double lv = g.item(loss);
        if (!std::isfinite(lv)) diverged(st, good, hooks, ph.name + " epoch " + std::to_string(epoch));
        st.model.zero_grad();
        g.backward(loss);
        norm_sum += opt.step();
        loss_sum += lv;
        const std::int64_t passes = ph.batch_size * k;
        r.ledger.record(ph.name, passes, passes);
      }
      EpochRecord rec;
      rec.phase = ph.name;
      rec.epoch = epoch;
      rec.train_loss = loss_sum / static_cast<double>(ph.batches_per_epoch);
      rec.grad_norm = norm_sum / static_cast<double>(ph.batches_per_epoch);
      rec.val_loss = one_step_mse(st, val, val_idx);
      if (!std::isfinite(rec.val_loss)) diverged(st, good, hooks, ph.name + " validation");
      rec.seconds = seconds_since(t0);
      r.log.push_back(rec);
      if (hooks.on_epoch) hooks.on_epoch(rec);
    }
  }
  return r;
}

TrainResult finetune_sdl(ModelState base, const TrainingConfig& config, const Dataset& train, const Dataset& val,
                         const TrainHooks& hooks) {
  const Phase& ph = config.finetune;
  ph.validate();
  if (ph.loss != LossKind::afcrps) throw std::invalid_argument("finetune_sdl: phase must use afcrps");
  if (ph.rollout_steps != 1) throw std::invalid_argument("finetune_sdl: only single-step fine-tuning is supported");
  if (base.model.stochastic()) throw std::invalid_argument("finetune_sdl: base model already has SDL layers");
  if (train.grid() != base.model.config().grid) throw std::invalid_argument("finetune_sdl: dataset grid mismatch");
  TrainResult r{std::move(base), {}, {}};
  ModelState& st = r.state;
  st.model.insert_sdl(config.sdl_init_seed);
  st.model.set_trainable(!config.freeze_base, true);
  const ModelConfig& cfg = st.model.config();
  const SpatialWeights w = SpatialWeights::uniform(train.grid());
  const auto val_idx = spaced_indices(val.samples(), config.validation_samples);
  const Index members = ph.members;
  const std::uint64_t key_seed = finetune_key_seed(config.seed);
  Adam opt(st.model.parameters(), ph.learning_rate, ph.adam);
  std::uint32_t iteration = 0;
  for (std::int64_t epoch = 0; epoch < ph.epochs; ++epoch) {
    const auto t0 = Clock::now();
    const Snapshot good = Snapshot::take(st.model);
    auto rng = batch_rng(config.seed, 1000, epoch);
    std::uniform_int_distribution<Index> pick(0, train.states() - 2);
    double loss_sum = 0.0, norm_sum = 0.0;
    for (std::int64_t b = 0; b < ph.batches_per_epoch; ++b, ++iteration) {
      std::vector<Index> idx(static_cast<std::size_t>(ph.batch_size));
      for (Index& i : idx) i = pick(rng);
      std::vector<StepNoise> noise;
      for (Index item = 0; item < ph.batch_size * members; ++item) {
        noise.push_back(draw_noise(cfg, key_seed, static_cast<std::uint32_t>(item), iteration));
      }
      Graph<float> g;
      const auto x = g.constant(replicate(normalized_states(st, train, idx), members));
      const auto out = st.model.forward(g, x, &noise).output;
      const auto loss = afcrps_field(g, out, normalized_states(st, train, shifted(idx, 1)), members, w, config.alpha_loss);
      const double lv = g.item(loss);
      if (!std::isfinite(lv)) diverged(st, good, hooks, ph.name + " epoch " + std::to_string(epoch));
      st.model.zero_grad();
      g.backward(loss);
      norm_sum += opt.step();
      loss_sum += lv;
      const std::int64_t passes = ph.batch_size * members;
      r.ledger.record(ph.name, passes, passes);
    }
    EpochRecord rec;
    rec.phase = ph.name;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(ph.batches_per_epoch);
    rec.grad_norm = norm_sum / static_cast<double>(ph.batches_per_epoch);
    const EnsembleScore sc = score_one_step(st, val, val_idx, config.validation_members, key_seed ^ 1u, config.alpha_loss);
    rec.val_loss = sc.crps;
    rec.val_spread = sc.spread;
    rec.val_mae = sc.mae;
    if (!std::isfinite(rec.val_loss)) diverged(st, good, hooks, ph.name + " validation");
    rec.seconds = seconds_since(t0);
    r.log.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);
  }
  st.model.set_trainable(true, true);
  return r;
}

}  // namespace sdl
