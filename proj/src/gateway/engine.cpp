#include "sdl/gateway.hpp"

#include "sdl/binary_io.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

namespace sdl::gateway {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path resolve(const fs::path& dir, const fs::path& p) { return p.is_absolute() ? p : dir / p; }

fs::path relative_or_absolute(const fs::path& dir, const fs::path& p) {
  std::error_code ec;
  const fs::path abs = fs::absolute(p, ec);
  const fs::path rel = fs::relative(abs, fs::absolute(dir), ec);
  if (ec || rel.empty()) return abs;
  return rel;
}

void check_file(const fs::path& path, const std::string& expect, const std::string& what) {
  if (!fs::exists(path)) throw GatewayError(500, what + " not found: " + path.string());
  if (!expect.empty() && file_sha256(path) != expect) {
    throw GatewayError(500, what + " checksum mismatch: " + path.string());
  }
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

std::vector<float> plane_values(const TensorF& state, Index variable) {
  const Shape s = state.shape();
  const Index n = s.h * s.w;
  const float* p = state.data() + variable * n;
  return std::vector<float>(p, p + n);
}

json value_range(const std::vector<float>& v) {
  if (v.empty()) return {{"min", nullptr}, {"max", nullptr}};
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  return {{"min", *lo}, {"max", *hi}};
}

// Ensemble mean and sample std (divisor M - 1) of one variable at one step.
void ensemble_moments(const std::vector<std::shared_ptr<const MemberTrajectory>>& members, Index step, Index variable,
                      std::vector<float>& mean, std::vector<float>& stddev, double& spread) {
  const TensorF& first = members.front()->states[static_cast<std::size_t>(step)];
  const Index n = first.shape().h * first.shape().w;
  const double m = static_cast<double>(members.size());
  mean.assign(static_cast<std::size_t>(n), 0.0f);
  stddev.assign(static_cast<std::size_t>(n), 0.0f);
  double var_sum = 0.0;
  for (Index i = 0; i < n; ++i) {
    double s = 0.0;
    for (const auto& t : members) s += t->states[static_cast<std::size_t>(step)].data()[variable * n + i];
    const double mu = s / m;
    double q = 0.0;
    for (const auto& t : members) {
      const double d = t->states[static_cast<std::size_t>(step)].data()[variable * n + i] - mu;
      q += d * d;
    }
    const double var = members.size() > 1 ? q / (m - 1.0) : 0.0;
    mean[static_cast<std::size_t>(i)] = static_cast<float>(mu);
    stddev[static_cast<std::size_t>(i)] = static_cast<float>(std::sqrt(var));
    var_sum += var;
  }
  spread = std::sqrt(var_sum / static_cast<double>(n));
}

json beta_json(const BetaVector& b) { return json::array({b[0], b[1], b[2]}); }

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw GatewayError(400, std::string("field '") + key + "': " + e.what());
  }
}

std::string variable_from_json(const json& j, const std::string& fallback) {
  if (!j.contains("variable")) return fallback;
  const json& v = j.at("variable");
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<Index>());
  throw GatewayError(400, "field 'variable' must be a name or an index");
}

void require_object(const json& j) {
  if (!j.is_object()) throw GatewayError(400, "request body must be an object");
}

BetaVector beta_from_json(const json& j) {
  if (j.is_number()) {
    const double b = j.get<double>();
    return {b, b, b};
  }
  if (!j.is_array() || j.size() != 3) throw GatewayError(400, "beta must be a number or a list of three numbers");
  BetaVector b{};
  for (std::size_t i = 0; i < 3; ++i) {
    if (!j[i].is_number()) throw GatewayError(400, "beta entries must be numbers");
    b[i] = j[i].get<double>();
  }
  for (double x : b)
    if (!std::isfinite(x)) throw GatewayError(400, "beta entries must be finite");
  return b;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

// --- manifest ----------------------------------------------------------------------

json RunManifest::to_json() const {
  json cs = json::array();
  for (const RunCase& c : cases) cs.push_back({{"archive", c.archive.string()}, {"sha256", c.archive_sha256}, {"index", c.index}});
  return {{"format", "sdl-run"},
          {"version", 1},
          {"id", id},
          {"checkpoint", {{"path", checkpoint.string()}, {"sha256", checkpoint_sha256}}},
          {"dataset", {{"path", dataset.string()}, {"sha256", dataset_sha256}}},
          {"cases", cs},
          {"config", config},
          {"created", created.empty() ? utc_now() : created}};
}

RunManifest RunManifest::from_json(const json& j) {
  try {
    if (j.value("format", std::string()) != "sdl-run") throw GatewayError(500, "run.json: not a run manifest");
    if (j.value("version", 0) != 1) throw GatewayError(500, "run.json: unsupported version");
    RunManifest m;
    m.id = j.at("id").get<std::string>();
    m.checkpoint = j.at("checkpoint").at("path").get<std::string>();
    m.checkpoint_sha256 = j.at("checkpoint").value("sha256", std::string());
    m.dataset = j.at("dataset").at("path").get<std::string>();
    m.dataset_sha256 = j.at("dataset").value("sha256", std::string());
    for (const json& c : j.at("cases"))
      m.cases.push_back({c.at("archive").get<std::string>(), c.value("sha256", std::string()), c.at("index").get<Index>()});
    m.config = j.value("config", json::object());
    m.created = j.value("created", std::string());
    return m;
  } catch (const json::exception& e) {
    throw GatewayError(500, std::string("run.json: ") + e.what());
  }
}

RunManifest RunManifest::load(const fs::path& run_dir) {
  std::ifstream in(run_dir / "run.json");
  if (!in) throw GatewayError(404, "no run.json in " + run_dir.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw GatewayError(500, "run.json: " + std::string(e.what()));
  }
  return from_json(j);
}

void RunManifest::save(const fs::path& run_dir) const {
  fs::create_directories(run_dir);
  RunManifest m = *this;
  m.checkpoint = relative_or_absolute(run_dir, checkpoint);
  m.dataset = relative_or_absolute(run_dir, dataset);
  for (RunCase& c : m.cases) c.archive = relative_or_absolute(run_dir, resolve(run_dir, c.archive));
  std::ofstream(run_dir / "run.json") << m.to_json().dump(2) << '\n';
}

void RunManifest::validate(const fs::path& run_dir) const {
  check_file(resolve(run_dir, checkpoint), checkpoint_sha256, "checkpoint");
  check_file(resolve(run_dir, dataset), dataset_sha256, "dataset");
  if (cases.empty()) throw GatewayError(500, "run '" + id + "' has no cases");
  for (const RunCase& c : cases) check_file(resolve(run_dir, c.archive), c.archive_sha256, "archive");
}

std::map<std::string, fs::path> discover_runs(const fs::path& root) {
  std::map<std::string, fs::path> out;
  auto add = [&](const fs::path& dir) {
    try {
      const RunManifest m = RunManifest::load(dir);
      out.emplace(m.id, dir);
    } catch (const GatewayError&) {
    }
  };
  if (!fs::is_directory(root)) return out;
  if (fs::exists(root / "run.json")) add(root);
  std::error_code ec;
  for (auto it = fs::recursive_directory_iterator(root, fs::directory_options::skip_permission_denied, ec);
       it != fs::recursive_directory_iterator(); it.increment(ec)) {
    if (ec) break;
    if (it.depth() >= 2) it.disable_recursion_pending();
    if (it->is_directory() && fs::exists(it->path() / "run.json")) add(it->path());
  }
  return out;
}

// --- requests ------------------------------------------------------------------------

BetaVector parse_beta(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw GatewayError(400, "beta: cannot parse '" + item + "'");
    }
  }
  if (v.size() == 1) return {v[0], v[0], v[0]};
  if (v.size() != 3) throw GatewayError(400, "beta: expected one or three comma-separated values");
  for (double x : v)
    if (!std::isfinite(x)) throw GatewayError(400, "beta entries must be finite");
  return {v[0], v[1], v[2]};
}

GenerateRequest generate_request_from_json(const json& j) {
  require_object(j);
  GenerateRequest r;
  if (!j.contains("beta")) throw GatewayError(400, "generate: missing 'beta'");
  r.beta = beta_from_json(j.at("beta"));
  r.case_index = get_or<Index>(j, "case", 0);
  r.step = get_or<Index>(j, "step", -1);
  r.variable = variable_from_json(j, r.variable);
  return r;
}

InterpolateRequest interpolate_request_from_json(const json& j) {
  require_object(j);
  InterpolateRequest r;
  for (const char* k : {"member_i", "member_j", "e"})
    if (!j.contains(k)) throw GatewayError(400, std::string("interpolate: missing '") + k + "'");
  r.member_i = get_or<Index>(j, "member_i", 0);
  r.member_j = get_or<Index>(j, "member_j", 1);
  r.e = get_or<double>(j, "e", 0.0);
  r.case_index = get_or<Index>(j, "case", 0);
  r.step = get_or<Index>(j, "step", -1);
  r.variable = variable_from_json(j, r.variable);
  r.interpolate_pixel_noise = get_or<bool>(j, "interpolate_pixel_noise", false);
  return r;
}

SpectraRequest spectra_request_from_json(const json& j) {
  require_object(j);
  SpectraRequest r;
  if (!j.contains("level")) throw GatewayError(400, "spectra: missing 'level'");
  r.level = get_or<int>(j, "level", 1);
  r.betas = get_or<std::vector<double>>(j, "betas", r.betas);
  r.case_index = get_or<Index>(j, "case", 0);
  r.member = get_or<Index>(j, "member", 0);
  r.lead = get_or<Index>(j, "lead", 1);
  return r;
}

std::string payload_text(const json& payload) { return payload.dump(); }

// --- engine ----------------------------------------------------------------------------

struct Engine::Run {
  std::string id;
  fs::path dir;
  RunManifest manifest;
  std::unique_ptr<LoadedModel> model;
  std::vector<LatentArchive> archives;
  synth::Dataset dataset;
  std::vector<std::string> variables;

  const LatentArchive& archive(Index c) const {
    if (c < 0 || c >= static_cast<Index>(archives.size())) {
      throw GatewayError(404, "run '" + id + "' has no case " + std::to_string(c));
    }
    return archives[static_cast<std::size_t>(c)];
  }
  void check_member(Index c, Index m) const {
    if (m < 0 || m >= archive(c).header.members) {
      throw GatewayError(404, "run '" + id + "' has no member " + std::to_string(m));
    }
  }
  Index step(Index c, Index s) const {
    const Index n = archive(c).header.n_steps;
    if (s == -1) return n;
    if (s < 0 || s > n) throw GatewayError(400, "step must lie in [0, " + std::to_string(n) + "]");
    return s;
  }
  Index variable(const std::string& v) const {
    if (!v.empty() && std::all_of(v.begin(), v.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
      const Index i = std::stoll(v);
      if (i < static_cast<Index>(variables.size())) return i;
    }
    for (std::size_t i = 0; i < variables.size(); ++i)
      if (variables[i] == v) return static_cast<Index>(i);
    throw GatewayError(400, "unknown variable '" + v + "'");
  }
  // Truth at a lead when the dataset covers it.
  std::optional<TensorF> truth(Index c, Index step) const {
    const Index t = manifest.cases[static_cast<std::size_t>(c)].index + step;
    if (t < 0 || t >= dataset.states()) return std::nullopt;
    return dataset.state(t);
  }
};

Engine::Engine(fs::path root, unsigned workers, std::size_t cache_capacity)
    : root_(std::move(root)),
      known_(discover_runs(root_)),
      capacity_(std::max<std::size_t>(cache_capacity, 1)),
      slots_(std::clamp<std::ptrdiff_t>(workers, 1, 64)),
      workers_(std::clamp(workers, 1u, 64u)) {}

Engine::~Engine() = default;

Engine::Run& Engine::open(const std::string& id) {
  std::lock_guard lock(runs_mutex_);
  if (auto it = open_.find(id); it != open_.end()) return *it->second;
  auto where = known_.find(id);
  if (where == known_.end()) {
    known_ = discover_runs(root_);
    where = known_.find(id);
    if (where == known_.end()) throw GatewayError(404, "unknown run '" + id + "'");
  }
  auto r = std::make_unique<Run>();
  r->id = id;
  r->dir = where->second;
  r->manifest = RunManifest::load(r->dir);
  r->manifest.validate(r->dir);
  try {
    r->model = std::make_unique<LoadedModel>(open_checkpoint(resolve(r->dir, r->manifest.checkpoint)));
    for (const RunCase& c : r->manifest.cases) r->archives.push_back(archive_read(resolve(r->dir, c.archive)));
    r->dataset = synth::Dataset::load(resolve(r->dir, r->manifest.dataset));
  } catch (const std::exception& e) {
    throw GatewayError(500, "run '" + id + "': " + e.what());
  }
  for (const LatentArchive& a : r->archives)
    if (a.header.model_sha256 != r->model->sha256) throw GatewayError(500, "run '" + id + "': archive written by another model");
  r->variables = r->dataset.header().variables;
  return *open_.emplace(id, std::move(r)).first->second;
}

json Engine::runs() {
  std::map<std::string, fs::path> found = discover_runs(root_);
  {
    std::lock_guard lock(runs_mutex_);
    known_ = found;
  }
  json out = json::array();
  for (const auto& [id, dir] : found) {
    const RunManifest m = RunManifest::load(dir);
    json cases = json::array();
    for (const RunCase& c : m.cases) cases.push_back({{"index", c.index}});
    out.push_back({{"id", id}, {"cases", cases}, {"config", m.config}, {"created", m.created},
                   {"checkpoint_sha256", m.checkpoint_sha256}});
  }
  return {{"runs", out}};
}

Engine::TrajectoryPtr Engine::member(Run& r, Index case_index, const std::optional<BetaVector>& beta, Index m) {
  const LatentArchive& a = r.archive(case_index);
  r.check_member(case_index, m);
  const CacheKey key{r.id, case_index, beta.value_or(a.header.beta), m};
  std::promise<TrajectoryPtr> promise;
  std::shared_future<TrajectoryPtr> future;
  bool owner = false;
  {
    std::lock_guard lock(cache_mutex_);
    if (auto it = cache_.find(key); it != cache_.end()) {
      future = it->second;
    } else {
      future = promise.get_future().share();
      cache_.emplace(key, future);
      cache_order_.push_back(key);
      while (cache_order_.size() > capacity_) {
        cache_.erase(cache_order_.front());
        cache_order_.erase(cache_order_.begin());
      }
      owner = true;
    }
  }
  if (owner) {
    slots_.acquire();
    try {
      auto t = std::make_shared<const MemberTrajectory>(replay_member(a, *r.model, m, key.beta));
      slots_.release();
      {
        std::lock_guard lock(cache_mutex_);
        ++computed_;
      }
      promise.set_value(std::move(t));
    } catch (...) {
      slots_.release();
      {
        std::lock_guard lock(cache_mutex_);
        if (auto it = cache_.find(key); it != cache_.end()) cache_.erase(it);
        std::erase(cache_order_, key);
      }
      promise.set_exception(std::current_exception());
    }
  }
  TrajectoryPtr t;
  try {
    t = future.get();
  } catch (const GatewayError&) {
    throw;
  } catch (const std::exception& e) {
    throw GatewayError(500, "replay of member " + std::to_string(m) + " failed: " + e.what());
  }
  if (t->failed) throw GatewayError(500, "member " + std::to_string(m) + " diverged: " + t->diagnostic);
  return t;
}

std::vector<Engine::TrajectoryPtr> Engine::members(Run& r, Index case_index, const std::optional<BetaVector>& beta) {
  const Index n = r.archive(case_index).header.members;
  std::vector<TrajectoryPtr> out(static_cast<std::size_t>(n));
  parallel_for(out.size(), workers_, [&](std::size_t m) { out[m] = member(r, case_index, beta, static_cast<Index>(m)); });
  return out;
}

json Engine::field(const std::string& run, const FieldRequest& q) {
  Run& r = open(run);
  r.check_member(q.case_index, q.member);
  const Index step = r.step(q.case_index, q.step);
  const Index var = r.variable(q.variable);
  const TrajectoryPtr t = member(r, q.case_index, std::nullopt, q.member);
  const Shape s = t->states[static_cast<std::size_t>(step)].shape();
  const std::vector<float> values = plane_values(t->states[static_cast<std::size_t>(step)], var);
  json out = {{"request",
               {{"endpoint", "field"}, {"run", run}, {"case", q.case_index}, {"member", q.member}, {"step", step},
                {"variable", r.variables[static_cast<std::size_t>(var)]}, {"stats", q.stats}}},
              {"beta", beta_json(r.archive(q.case_index).header.beta)},
              {"height", s.h},
              {"width", s.w},
              {"values", values}};
  out.update(value_range(values));
  if (q.stats) {
    std::vector<float> mean, sd;
    double spread = 0.0;
    ensemble_moments(members(r, q.case_index, std::nullopt), step, var, mean, sd, spread);
    out["ensemble_mean"] = mean;
    out["ensemble_std"] = sd;
  }
  return out;
}

json Engine::generate(const std::string& run, const GenerateRequest& q) {
  Run& r = open(run);
  r.archive(q.case_index);
  const Index step = r.step(q.case_index, q.step);
  const Index var = r.variable(q.variable);
  const auto ms = members(r, q.case_index, q.beta);
  std::vector<float> mean, sd;
  double spread = 0.0;
  ensemble_moments(ms, step, var, mean, sd, spread);
  const Shape s = ms.front()->states[static_cast<std::size_t>(step)].shape();
  json summary = {{"members", ms.size()}, {"spread", spread}};
  if (const auto truth = r.truth(q.case_index, step)) {
    const std::vector<float> y = plane_values(*truth, var);
    double se = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) se += (static_cast<double>(mean[i]) - y[i]) * (static_cast<double>(mean[i]) - y[i]);
    summary["ensemble_mean_rmse"] = std::sqrt(se / static_cast<double>(y.size()));
  }
  const json mr = value_range(mean), sr = value_range(sd);
  summary["mean_min"] = mr.at("min");
  summary["mean_max"] = mr.at("max");
  summary["std_min"] = sr.at("min");
  summary["std_max"] = sr.at("max");
  return {{"request",
           {{"endpoint", "generate"}, {"run", run}, {"case", q.case_index}, {"beta", beta_json(q.beta)}, {"step", step},
            {"variable", r.variables[static_cast<std::size_t>(var)]}}},
          {"height", s.h},
          {"width", s.w},
          {"mean", mean},
          {"std", sd},
          {"summary", summary}};
}

json Engine::interpolate(const std::string& run, const InterpolateRequest& q) {
  Run& r = open(run);
  r.check_member(q.case_index, q.member_i);
  r.check_member(q.case_index, q.member_j);
  if (!(q.e >= 0.0 && q.e <= 1.0)) throw GatewayError(400, "e must lie in [0, 1]");
  const Index step = r.step(q.case_index, q.step);
  const Index var = r.variable(q.variable);
  MemberTrajectory t;
  slots_.acquire();
  try {
    t = interpolate_members(r.archive(q.case_index), *r.model, q.member_i, q.member_j, q.e,
                            InterpolationOptions{q.interpolate_pixel_noise});
    slots_.release();
  } catch (const std::exception& e) {
    slots_.release();
    throw GatewayError(500, std::string("interpolation failed: ") + e.what());
  }
  if (t.failed) throw GatewayError(500, "interpolated member diverged: " + t.diagnostic);
  const Shape s = t.states[static_cast<std::size_t>(step)].shape();
  const std::vector<float> values = plane_values(t.states[static_cast<std::size_t>(step)], var);
  json out = {{"request",
               {{"endpoint", "interpolate"}, {"run", run}, {"case", q.case_index}, {"member_i", q.member_i},
                {"member_j", q.member_j}, {"e", q.e}, {"step", step},
                {"variable", r.variables[static_cast<std::size_t>(var)]},
                {"interpolate_pixel_noise", q.interpolate_pixel_noise}}},
              {"height", s.h},
              {"width", s.w},
              {"values", values}};
  out.update(value_range(values));
  return out;
}

json Engine::spectra(const std::string& run, const SpectraRequest& q) {
  Run& r = open(run);
  r.check_member(q.case_index, q.member);
  if (q.level < 1 || q.level > 3) throw GatewayError(400, "level must be 1, 2 or 3");
  if (q.lead < 1 || q.lead > r.archive(q.case_index).header.n_steps) throw GatewayError(400, "lead out of range");
  if (q.betas.empty()) throw GatewayError(400, "betas must not be empty");
  for (double b : q.betas)
    if (!std::isfinite(b)) throw GatewayError(400, "betas must be finite");
  const TrajectoryPtr base = member(r, q.case_index, BetaVector{1.0, 1.0, 1.0}, q.member);
  std::vector<AttributionValue> values;
  slots_.acquire();
  try {
    values = beta_layer_attribution(r.archive(q.case_index), *r.model, q.level, q.betas,
                                    AttributionOptions{q.member, q.lead, 0});
    slots_.release();
  } catch (const std::exception& e) {
    slots_.release();
    throw GatewayError(500, std::string("spectra failed: ") + e.what());
  }
  const TensorF& x = base->states[static_cast<std::size_t>(q.lead)];
  const Index g = x.shape().h;
  const std::vector<float> zf = plane_values(x, 0);
  std::vector<double> u, v;
  velocity_from_vorticity(std::vector<double>(zf.begin(), zf.end()), g, u, v);
  const Spectrum ref = ke_spectrum(u, v, g);
  json series = json::array();
  for (const AttributionValue& a : values) {
    json c = nullptr;
    if (a.spectrum.total > 0.0) c = a.spectrum.centroid();
    series.push_back({{"beta", a.value}, {"energy", a.spectrum.energy}, {"total", a.spectrum.total}, {"centroid", c},
                      {"anomaly_rms", a.rms}});
  }
  std::vector<Index> k(ref.energy.size());
  for (std::size_t i = 0; i < k.size(); ++i) k[i] = static_cast<Index>(i);
  return {{"request",
           {{"endpoint", "spectra"}, {"run", run}, {"case", q.case_index}, {"level", q.level}, {"betas", q.betas},
            {"member", q.member}, {"lead", q.lead}}},
          {"wavenumbers", k},
          {"reference", {{"beta", 1.0}, {"energy", ref.energy}, {"total", ref.total}}},
          {"variables", r.variables},
          {"series", series}};
}

std::size_t Engine::cache_size() const {
  std::lock_guard lock(cache_mutex_);
  return cache_.size();
}

std::size_t Engine::replays_computed() const {
  std::lock_guard lock(cache_mutex_);
  return computed_;
}

}  // namespace sdl::gateway
