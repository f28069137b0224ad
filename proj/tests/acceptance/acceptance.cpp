// Acceptance suite: one PASS/FAIL line per criterion. Pipeline-backed
// criteria read the run under $SDL_ACCEPT_RUN (default /root/sdl_runs/default):
//   sdl/sdl.sdlm, forecast/run.json, verify/report.json, verify/sweep.json

#include "op_cases.hpp"

#include "sdl/gateway.hpp"
#include "sdl/latents.hpp"
#include "sdl/losses.hpp"
#include "sdl/sdl_layer.hpp"
#include "sdl/trainer.hpp"
#include "sdl/verify.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

using namespace sdl;
using namespace sdl::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Pinned tolerances.
constexpr double kOracleRelTol = 1e-12;
constexpr double kOracleSeconds = 5.0;
constexpr double kFairSigmas = 3.0;
constexpr double kFairSeconds = 30.0;
constexpr double kDegeneracyTol = 1e-12;
constexpr double kGradRelTol = 1e-5;
constexpr double kGradSeconds = 120.0;
constexpr double kTieGap = 1e-3;
constexpr double kSsrLo = 0.7, kSsrHi = 1.3;
constexpr Index kSsrFirstLead = 5, kSsrLastLead = 20;
constexpr double kRankP = 0.001;
constexpr double kSymmetryTol = 0.1;
constexpr double kExchangeSsrLo = 0.9, kExchangeSsrHi = 1.1;
constexpr double kExchangeRankP = 0.01;
constexpr double kParsevalTol = 1e-10;

struct Outcome {
  bool pass = false;
  std::string detail;
  bool deviation_applies = true;  // false: the failure is outside the documented known deviation
};

struct Criterion {
  std::string name;
  std::function<Outcome()> run;
  std::string known_deviation;  // non-empty: a FAIL here is expected and explained
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

bool bit_equal(const TensorF& a, const TensorF& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) == 0;
}

fs::path run_root() {
  const char* env = std::getenv("SDL_ACCEPT_RUN");
  return env && *env ? fs::path(env) : fs::path("/root/sdl_runs/default");
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  return json::parse(in);
}

double afcrps_oracle(const std::vector<double>& x, double y, double alpha) {
  const double m = static_cast<double>(x.size());
  double a = 0.0, b = 0.0;
  for (double xi : x) a += std::abs(xi - y);
  for (double xi : x)
    for (double xj : x) b += std::abs(xi - xj);
  const double eps = (1.0 - alpha) / m;
  return a / m - (1.0 - eps) / (2.0 * m * (m - 1.0)) * b;
}

double min_gap(std::vector<double> x, double y) {
  x.push_back(y);
  std::sort(x.begin(), x.end());
  double g = 1e300;
  for (std::size_t i = 1; i < x.size(); ++i) g = std::min(g, x[i] - x[i - 1]);
  return g;
}

Outcome afcrps_oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> msize(2, 12);
  std::uniform_real_distribution<double> val(-5.0, 5.0), alpha(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<double> x(static_cast<std::size_t>(msize(rng)));
    for (double& v : x) v = val(rng);
    const double y = val(rng);
    const double a = alpha(rng);
    const double ref = afcrps_oracle(x, y, a);
    worst = std::max(worst, std::abs(afcrps(x, y, a) - ref) / std::max(std::abs(ref), 1e-300));
  }
  const double t = seconds_since(t0);
  return {worst <= kOracleRelTol && t < kOracleSeconds,
          "10^4 instances, worst rel err " + fmt(worst) + ", " + fmt(t, 3) + " s"};
}

Outcome fair_limit() {
  const auto t0 = std::chrono::steady_clock::now();
  // y ~ N(0,1) against members ~ N(0,1): E[CRPS] = 1/sqrt(pi)
  const double expected = 1.0 / std::sqrt(std::numbers::pi);
  std::mt19937_64 rng(102);
  std::normal_distribution<double> n01;
  const int trials = 10000;
  std::vector<double> x(100);
  double sum = 0.0, sum2 = 0.0, closed = 0.0;
  for (int t = 0; t < trials; ++t) {
    for (double& v : x) v = n01(rng);
    const double y = n01(rng);
    const double s = afcrps(x, y, 1.0);
    sum += s;
    sum2 += s * s;
    closed += gaussian_crps(0.0, 1.0, y);
  }
  const double mean = sum / trials;
  const double se = std::sqrt((sum2 / trials - mean * mean) / (trials - 1));
  const double z = (mean - expected) / se;
  const double t = seconds_since(t0);
  return {std::abs(z) < kFairSigmas && t < kFairSeconds,
          "mean " + fmt(mean, 6) + " vs 1/sqrt(pi) " + fmt(expected, 6) + " (closed form at drawn y " +
              fmt(closed / trials, 6) + "), z " + fmt(z, 3) + ", " + fmt(t, 3) + " s"};
}

Outcome degeneracy() {
  double worst_fair = 0.0, worst_af = 0.0;
  std::mt19937_64 rng(103);
  std::uniform_real_distribution<double> val(-10.0, 10.0);
  for (int trial = 0; trial < 1000; ++trial) {
    const double y = val(rng), d = val(rng);
    const std::vector<double> x{y, y + d};
    const double scale = std::max(1.0, std::abs(d));
    worst_fair = std::max(worst_fair, std::abs(afcrps(x, y, 1.0)) / scale);
    worst_af = std::max(worst_af, std::abs(afcrps(x, y, 0.95) - 0.0125 * std::abs(d)) / scale);
  }
  // the documented example
  const double example = afcrps(std::vector<double>{0.0, 2.0}, 1.0, 0.95);
  const bool ok = worst_fair <= kDegeneracyTol && worst_af <= kDegeneracyTol && std::abs(example - 0.025) <= 1e-15;
  return {ok, "fair max " + fmt(worst_fair) + ", afcrps-0.0125|d| max " + fmt(worst_af) + ", example " +
                  fmt(example, 17)};
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(104);
  double worst = 0.0;
  std::string worst_name;
  int cases = 0;
  for (const OpCase& c : op_cases()) {
    const double e = worst_op_error(c, rng, 20);
    if (e > worst) worst = e, worst_name = c.name;
    ++cases;
  }
  // scalar afcrps subgradient
  for (int done = 0; done < 20;) {
    std::uniform_int_distribution<int> msize(2, 12);
    std::uniform_real_distribution<double> val(-5.0, 5.0);
    std::vector<double> x(static_cast<std::size_t>(msize(rng)));
    for (double& v : x) v = val(rng);
    const double y = val(rng);
    if (min_gap(x, y) < kTieGap) continue;
    std::vector<double> g(x.size());
    afcrps_gradient(x, y, 0.95, g);
    TensorD analytic(Shape{1, 1, 1, static_cast<Index>(x.size())}), args(analytic.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      analytic[static_cast<Index>(i)] = g[i];
      args[static_cast<Index>(i)] = x[i];
    }
    auto f = [&](const std::vector<TensorD>& a) {
      return afcrps(std::span<const double>(a[0].data(), static_cast<std::size_t>(a[0].size())), y, 0.95);
    };
    const double e = relative_error(analytic, numeric_gradient(f, {args}, 0));
    if (e > worst) worst = e, worst_name = "afcrps";
    ++done;
  }
  ++cases;
  // graph afcrps (custom node), grouped members
  const SpatialWeights w{Eigen::ArrayXd::LinSpaced(4, 0.5, 1.5)};
  for (int done = 0; done < 20;) {
    const TensorD ens = random_tensor(Shape{2 * 4, 2, 4, 3}, rng, -2.0, 2.0);
    const TensorD target = random_tensor(Shape{2, 2, 4, 3}, rng, -2.0, 2.0);
    bool ties = false;
    for (Index b = 0; b < 2; ++b)
      for (Index i = 0; i < 24; ++i) {
        std::vector<double> v;
        for (Index m = 0; m < 4; ++m) v.push_back(ens[(b * 4 + m) * 24 + i]);
        ties = ties || min_gap(v, target[b * 24 + i]) < kTieGap;
      }
    if (ties) continue;
    G g;
    auto xv = g.input(ens, true);
    g.backward(afcrps_field(g, xv, target, 4, w, 0.95));
    auto f = [&](const std::vector<TensorD>& a) {
      G h;
      return h.item(afcrps_field(h, h.constant(a[0]), target, 4, w, 0.95));
    };
    const double e = relative_error(g.grad(xv), numeric_gradient(f, {ens}, 0));
    if (e > worst) worst = e, worst_name = "afcrps_field";
    ++done;
  }
  ++cases;
  const double t = seconds_since(t0);
  return {worst < kGradRelTol && t < kGradSeconds,
          std::to_string(cases) + " cases x 20 trials, worst rel err " + fmt(worst) + " (" + worst_name + "), " +
              fmt(t, 3) + " s"};
}

struct LayerConfig {
  Index batch, channels, height, width, depth;
  int level;
  LatentMode mode;
};

LayerConfig random_layer_config(std::mt19937_64& rng, int level) {
  std::uniform_int_distribution<Index> b(1, 3), c(1, 6), hw(1, 4), d(1, 5);
  const Index side = 2 * hw(rng);
  return {b(rng), c(rng), side, side, d(rng), level, rng() % 4 == 0 ? LatentMode::broadcast : LatentMode::spatial};
}

std::vector<LatentTensor> layer_latents(const LayerConfig& c, std::uint64_t seed) {
  std::vector<LatentTensor> out;
  const std::array<LevelGrid, 3> grids{LevelGrid{1, c.height, c.width, c.channels},
                                       LevelGrid{2, c.height, c.width, c.channels},
                                       LevelGrid{3, c.height, c.width, c.channels}};
  for (Index b = 0; b < c.batch; ++b) {
    const LatentSet s = sample_latents(RngKey{seed, static_cast<std::uint32_t>(b), 0, 0, RngRole::latent}, grids,
                                       c.depth, c.mode);
    out.push_back(s[static_cast<std::size_t>(c.level - 1)]);
  }
  return out;
}

std::vector<RngKey> layer_keys(const LayerConfig& c, std::uint64_t seed) {
  std::vector<RngKey> out;
  for (Index b = 0; b < c.batch; ++b)
    out.push_back(RngKey{seed, static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(c.level), 0,
                         RngRole::pixel_noise});
  return out;
}

SdlLayer<float> make_layer(const LayerConfig& c, std::uint64_t seed, float alpha = 0.235f) {
  return SdlLayer<float>(c.level, c.channels, c.depth, alpha, c.mode, RngKey{seed, 0, 77, 0, RngRole::init_perturbation},
                         0.5);
}

TensorF layer_features(const LayerConfig& c, std::mt19937_64& rng) {
  return random_tensor(Shape{c.batch, c.channels, c.height, c.width}, rng, -3.0, 3.0).cast<float>();
}

Outcome identity_collapses() {
  std::mt19937_64 rng(105);
  int failures = 0, checks = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const LayerConfig c = random_layer_config(rng, 1 + trial % 3);
    const TensorF f = layer_features(c, rng);
    const auto keys = layer_keys(c, trial);
    const auto z = layer_latents(c, trial);
    {
      auto layer = make_layer(c, trial, 0.0f);
      failures += !bit_equal(sdl_forward(f, z, keys, layer).first, f);
    }
    {
      auto layer = make_layer(c, trial);
      auto zero = z;
      for (auto& lt : zero) lt.values.setZero();
      failures += !bit_equal(sdl_forward(f, zero, keys, layer).first, f);
    }
    {
      auto layer = make_layer(c, trial);
      layer.modulation.value.array().setZero();
      failures += !bit_equal(sdl_forward(f, z, keys, layer).first, f);
    }
    checks += 3;
  }
  return {failures == 0, "100 configurations x {alpha=0, z=0, M=0}: " + std::to_string(checks - failures) + "/" +
                             std::to_string(checks) + " bit-exact"};
}

Outcome antisymmetry_linearity() {
  std::mt19937_64 rng(106);
  std::uniform_real_distribution<double> beta_dist(-4.0, 4.0);
  int failures = 0, checks = 0;
  for (int trial = 0; trial < 100; ++trial)
    for (int level = 1; level <= 3; ++level) {
      const LayerConfig c = random_layer_config(rng, level);
      const TensorF f = layer_features(c, rng);
      const auto keys = layer_keys(c, 1000 * trial + level);
      auto layer = make_layer(c, 1000 * trial + level);
      const auto z = layer_latents(c, 1000 * trial + level);
      const TensorF p = sdl_forward(f, z, keys, layer).second.perturbation;
      auto neg = z;
      for (auto& lt : neg) lt.values = -lt.values;
      failures += !bit_equal(sdl_forward(f, neg, keys, layer).second.perturbation, TensorF(p.shape(), -p.array()));
      const double beta = beta_dist(rng);
      std::vector<LatentTensor> scaled;
      for (const auto& lt : z) scaled.push_back(apply_beta({lt, lt, lt}, {beta, beta, beta})[0]);
      failures += !bit_equal(sdl_forward(f, scaled, keys, layer).second.perturbation,
                             TensorF(p.shape(), p.array() * static_cast<float>(beta)));
      checks += 2;
    }
  return {failures == 0, "100 trials x 3 levels: " + std::to_string(checks - failures) + "/" + std::to_string(checks) +
                             " exact"};
}

Outcome replay_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  ModelConfig cfg;
  cfg.stochastic = true;
  ModelState state{Emulator<float>(cfg), Normalizer{{0.0, 0.5, 1.0}, {2.0, 1.0, 0.5}}};
  const fs::path dir = fs::temp_directory_path() / "sdl_acceptance";
  fs::create_directories(dir);
  save_checkpoint(state, dir / "model.sdlm");
  LoadedModel model = open_checkpoint(dir / "model.sdlm");

  std::mt19937_64 rng(107);
  std::normal_distribution<float> n01;
  TensorF initial(Shape{1, cfg.variables, cfg.grid, cfg.grid});
  for (Index i = 0; i < initial.size(); ++i) initial[i] = n01(rng);

  RolloutOptions opt;
  opt.members = 10;
  opt.n_steps = 20;
  opt.seed = 2024;
  const EnsembleBatch batch = rollout(model.state, initial, opt);
  archive_write(make_archive(batch, initial, cfg, model.sha256), dir / "replay.sdla");
  const LatentArchive archive = archive_read(dir / "replay.sdla");
  const auto replayed = replay_all(archive, model);

  double max_abs = 0.0;
  bool shapes_ok = replayed.size() == batch.members.size();
  for (std::size_t m = 0; shapes_ok && m < replayed.size(); ++m) {
    shapes_ok = replayed[m].states.size() == batch.members[m].states.size() && !replayed[m].failed;
    for (std::size_t t = 0; shapes_ok && t < replayed[m].states.size(); ++t)
      max_abs = std::max(max_abs, static_cast<double>(
                                      (replayed[m].states[t].array() - batch.members[m].states[t].array()).abs().maxCoeff()));
  }
  // the members must actually differ, otherwise the check is vacuous
  const double spread =
      (batch.members[0].states.back().array() - batch.members[1].states.back().array()).abs().maxCoeff();
  const double t = seconds_since(t0);
  return {shapes_ok && max_abs == 0.0 && spread > 0.0,
          "10 members x 20 steps at grid " + std::to_string(cfg.grid) + ", max abs diff " + fmt(max_abs) +
              ", member 0/1 gap " + fmt(spread) + ", " + fmt(t, 3) + " s"};
}

Outcome cost_ledger() {
  const auto base = reference_baseline_phases();
  const std::array<Phase, 1> ft{reference_finetune_phase()};
  const CostLedger b = CostLedger::planned(base);
  const CostLedger f = CostLedger::planned(ft);
  const CostRatio r = cost_ratio(b, f);
  const double pct = std::round(r.value * 10000.0) / 100.0;
  const bool base_ok = b.forward_total() == 12410560;
  const bool ft_ok = f.forward_total() == 200000;
  const bool ratio_ok = pct == 1.61;
  std::int64_t published = 0;
  for (auto v : published_baseline_passes()) published += v;
  return {base_ok && ft_ok && ratio_ok,
          "baseline " + std::to_string(b.forward_total()) + (base_ok ? " ok" : " != 12410560") + " (published phase sum " +
              std::to_string(published) + "), fine-tune " + std::to_string(f.forward_total()) +
              (ft_ok ? " ok" : " != 200000") + ", ratio " + std::to_string(r.numerator) + "/" +
              std::to_string(r.denominator) + " = " + fmt(pct, 3) + "%" + (ratio_ok ? " ok" : " != 1.61%"),
          ft_ok && ratio_ok && published == 12410560};
}

Outcome calibration() {
  const auto report = VerificationReport::from_json(read_json(run_root() / "verify" / "report.json"));
  bool ok = true, ssr_ok = true;
  double lo = 1e300, hi = -1e300, pmin = 1.0;
  std::string where;
  for (const auto& var : report.variables) {
    for (Index lead = kSsrFirstLead; lead <= kSsrLastLead; ++lead) {
      const auto& c = report.cell(var, lead);
      if (!c.ssr) {
        ok = ssr_ok = false;
        where += " " + var + "@" + std::to_string(lead) + ":undefined";
        continue;
      }
      lo = std::min(lo, *c.ssr);
      hi = std::max(hi, *c.ssr);
      if (*c.ssr < kSsrLo || *c.ssr > kSsrHi) {
        ok = ssr_ok = false;
        where += " " + var + "@" + std::to_string(lead) + ":" + fmt(*c.ssr, 3);
      }
    }
    const double p = report.cell(var, kSsrLastLead).rank_p_value;
    pmin = std::min(pmin, p);
    if (!(p > kRankP)) {
      ok = false;
      where += " " + var + " rank-p " + fmt(p, 3);
    }
  }
  return {ok, "SSR leads 5-20 in [" + fmt(lo, 3) + ", " + fmt(hi, 3) + "], min rank p at lead 20 " + fmt(pmin, 3) +
                  (where.empty() ? "" : "; out of bounds:" + where),
          ssr_ok};
}

Outcome beta_sweep() {
  const json j = read_json(run_root() / "verify" / "sweep.json");
  std::map<double, VerificationReport> by_beta;
  for (const json& p : j.at("points")) by_beta[p.at("beta").get<double>()] = VerificationReport::from_json(p.at("report"));
  const std::vector<double> grid{0.0, 0.5, 1.0, 1.5, 2.0, 3.0};
  for (double b : grid)
    for (double s : {b, -b})
      if (!by_beta.count(s)) return {false, "sweep.json lacks beta " + fmt(s)};
  // lead-averaged spread and ensemble-mean RMSE per variable
  auto avg = [&](double beta, const std::string& var, bool spread) {
    const auto& r = by_beta.at(beta);
    double s = 0.0;
    for (Index lead : r.leads) s += spread ? r.cell(var, lead).spread : r.cell(var, lead).rmse_ens_mean;
    return s / static_cast<double>(r.leads.size());
  };
  bool ok = true;
  std::string notes;
  double worst_sym = 0.0;
  for (const auto& var : by_beta.at(0.0).variables) {
    if (avg(0.0, var, true) != 0.0) ok = false, notes += " " + var + ":std(0)!=0";
    for (double sign : {1.0, -1.0})
      for (std::size_t i = 1; i < grid.size(); ++i)
        if (avg(sign * grid[i], var, true) < avg(sign * grid[i - 1], var, true))
          ok = false, notes += " " + var + ":non-monotone at " + fmt(sign * grid[i]);
    for (double b : {1.0, 2.0, 3.0}) {
      const double rel = std::abs(avg(b, var, true) - avg(-b, var, true)) / avg(b, var, true);
      worst_sym = std::max(worst_sym, rel);
      if (!(rel < kSymmetryTol)) ok = false, notes += " " + var + ":asym " + fmt(rel, 3) + " at " + fmt(b);
    }
    for (double sign : {1.0, -1.0})
      if (avg(sign * 1.0, var, false) > avg(sign * 3.0, var, false))
        ok = false, notes += " " + var + ":rmse(" + fmt(sign) + ")>rmse(" + fmt(3 * sign) + ")";
  }
  return {ok, "monotone std, std(0)=0, worst |std(b)-std(-b)|/std(b) " + fmt(worst_sym, 3) + ", rmse(1)<=rmse(3)" +
                  (notes.empty() ? "" : "; violations:" + notes)};
}

Outcome scale_attribution() {
  const fs::path run_dir = run_root() / "forecast";
  const auto manifest = gateway::RunManifest::load(run_dir);
  if (manifest.cases.empty()) return {false, "run has no cases"};
  LoadedModel model = open_checkpoint(run_dir / manifest.checkpoint);
  const LatentArchive archive = archive_read(run_dir / manifest.cases.front().archive);
  // value 0 removes one level's perturbation; the anomaly is that level's
  // contribution at the first lead. Spectra are summed over members.
  const std::vector<double> values{0.0};
  std::array<Spectrum, 3> sum;
  const Index members = std::min<Index>(archive.header.members, 5);
  for (int level = 1; level <= 3; ++level) {
    for (Index m = 0; m < members; ++m) {
      AttributionOptions opt;
      opt.member = m;
      opt.lead = 1;
      const auto r = beta_layer_attribution(archive, model, level, values, opt);
      const Spectrum& s = r.front().spectrum;
      auto& acc = sum[static_cast<std::size_t>(level - 1)];
      if (acc.energy.empty()) acc.energy.assign(s.energy.size(), 0.0);
      for (std::size_t k = 0; k < s.energy.size(); ++k) acc.energy[k] += s.energy[k];
      acc.total += s.total;
    }
  }
  const double c1 = sum[0].centroid(), c2 = sum[1].centroid(), c3 = sum[2].centroid();
  return {c1 < c3, "centroids at lead 1 over " + std::to_string(members) + " members: level 1 " + fmt(c1) +
                       ", level 2 " + fmt(c2) + ", level 3 " + fmt(c3)};
}

Outcome interpolation_endpoints() {
  ModelConfig cfg;
  cfg.grid = 32;
  cfg.widths = {8, 12, 16, 24};
  cfg.latent_depth = 4;
  cfg.stochastic = true;
  cfg.init_seed = 9;
  ModelState state{Emulator<float>(cfg), Normalizer{{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}}};
  for (int l = 1; l <= 3; ++l) state.model.sdl_layer(l).style_map.value.array() *= 20.0f;
  const fs::path dir = fs::temp_directory_path() / "sdl_acceptance";
  fs::create_directories(dir);
  save_checkpoint(state, dir / "interp.sdlm");
  LoadedModel model = open_checkpoint(dir / "interp.sdlm");
  std::mt19937_64 rng(108);
  std::normal_distribution<float> n01;
  TensorF initial(Shape{1, cfg.variables, cfg.grid, cfg.grid});
  for (Index i = 0; i < initial.size(); ++i) initial[i] = n01(rng);
  RolloutOptions opt;
  opt.members = 3;
  opt.n_steps = 8;
  opt.seed = 31;
  const EnsembleBatch batch = rollout(model.state, initial, opt);
  const LatentArchive archive = make_archive(batch, initial, cfg, model.sha256);

  auto same = [](const MemberTrajectory& a, const MemberTrajectory& b) {
    if (a.states.size() != b.states.size()) return false;
    for (std::size_t t = 0; t < a.states.size(); ++t)
      if (!bit_equal(a.states[t], b.states[t])) return false;
    return true;
  };
  int end_fail = 0, end_checks = 0;
  for (bool mix : {false, true})
    for (auto [i, j] : {std::pair<Index, Index>{0, 2}, {1, 0}}) {
      const InterpolationOptions o{mix};
      end_fail += !same(interpolate_members(archive, model, i, j, 0.0, o), batch.members[static_cast<std::size_t>(i)]);
      end_fail += !same(interpolate_members(archive, model, i, j, 1.0, o), batch.members[static_cast<std::size_t>(j)]);
      end_checks += 2;
    }
  int affine_fail = 0, affine_checks = 0;
  for (double e : {0.1, 0.25, 0.5, 0.7, 0.9}) {
    const auto noise = interpolated_noise(archive, 0, 1, e);
    const float ef = static_cast<float>(e);
    for (Index t = 0; t < opt.n_steps; ++t)
      for (std::size_t l = 0; l < 3; ++l) {
        const auto& zi = archive.member(0)[static_cast<std::size_t>(t)].latents[l].values;
        const auto& zj = archive.member(1)[static_cast<std::size_t>(t)].latents[l].values;
        const Eigen::ArrayXf expect = (1.0f - ef) * zi + ef * zj;
        const Eigen::ArrayXf got = noise[static_cast<std::size_t>(t)].latents[l].effective();
        affine_fail += !(got.size() == expect.size() &&
                         std::memcmp(got.data(), expect.data(), static_cast<std::size_t>(got.size()) * sizeof(float)) == 0);
        ++affine_checks;
      }
  }
  return {end_fail == 0 && affine_fail == 0,
          "endpoints " + std::to_string(end_checks - end_fail) + "/" + std::to_string(end_checks) +
              " bit-exact, affine latents " + std::to_string(affine_checks - affine_fail) + "/" +
              std::to_string(affine_checks) + " exact"};
}

Outcome verification_self_tests() {
  std::mt19937_64 rng(109);
  std::normal_distribution<float> n01;
  const Index m = 10, n = 32;
  MetricsAccumulator acc({"x"}, 1, m, SpatialWeights::uniform(n));
  auto field = [&] {
    TensorF t(Shape{1, 1, n, n});
    for (Index i = 0; i < t.size(); ++i) t[i] = n01(rng);
    return t;
  };
  for (int c = 0; c < 100; ++c) {  // 100 x 32 x 32 = 102400 points
    std::vector<TensorF> members;
    for (Index j = 0; j < m; ++j) members.push_back(field());
    acc.add(members, field());
  }
  const auto cell = acc.finalize().cell("x", 1);
  const double ssr = cell.ssr.value_or(std::nan(""));

  std::normal_distribution<double> d01;
  const Index g = 64;
  std::vector<double> u(static_cast<std::size_t>(g * g)), v(u.size());
  for (auto& x : u) x = d01(rng);
  for (auto& x : v) x = d01(rng);
  const Spectrum s = ke_spectrum(u, v, g);
  double sum = 0.0;
  for (double e : s.energy) sum += e;
  const double parseval = std::abs(sum - s.total) / s.total;
  const bool ok = ssr >= kExchangeSsrLo && ssr <= kExchangeSsrHi && cell.rank_p_value > kExchangeRankP &&
                  cell.samples >= 100000 && parseval < kParsevalTol;
  return {ok, std::to_string(cell.samples) + " samples: SSR " + fmt(ssr, 4) + ", rank p " + fmt(cell.rank_p_value, 3) +
                  ", Parseval residual " + fmt(parseval, 3)};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"afcrps oracle equivalence", afcrps_oracle_equivalence, ""},
      {"fair-crps gaussian limit", fair_limit, ""},
      {"degeneracy guard", degeneracy, ""},
      {"gradient suite", gradient_suite, ""},
      {"identity collapses", identity_collapses, ""},
      {"replay exactness", replay_exactness, ""},
      {"antisymmetry and linearity", antisymmetry_linearity, ""},
      {"cost ledger", cost_ledger,
       "70 x 1781 x 32 = 3,989,440 passes for the first phase; the published per-phase figure is 3,988,160, so "
       "the stated inputs cannot reach the 12,410,560 total"},
      {"desk-scale calibration", calibration,
       "SSR is within bounds; the lead-20 rank histograms of the 20-epoch desk fine-tune keep visible edge and "
       "skew structure, which the chi-square test resolves at 1920 spatially correlated rank samples"},
      {"beta-sweep structure", beta_sweep, ""},
      {"scale attribution", scale_attribution, ""},
      {"interpolation endpoints", interpolation_endpoints, ""},
      {"verification self-tests", verification_self_tests, ""},
  };
  int unexpected = 0, failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what(), false};
    }
    const double t = seconds_since(t0);
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail << " [" << fmt(t, 3) << " s]";
    if (!o.pass) {
      ++failed;
      if (c.known_deviation.empty() || !o.deviation_applies)
        ++unexpected;
      else
        std::cout << " (known deviation: " << c.known_deviation << ")";
    }
    std::cout << std::endl;
  }
  std::cout << criteria.size() - static_cast<std::size_t>(failed) << "/" << criteria.size() << " criteria passed, "
            << unexpected << " unexpected failure(s)" << std::endl;
  return unexpected == 0 ? 0 : 1;
}
