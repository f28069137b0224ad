#include "sdl/cli.hpp"

#include "sdl/binary_io.hpp"
#include "sdl/gateway.hpp"
#include "sdl/trainer.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <thread>

namespace sdl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class CliError : public std::runtime_error {
 public:
  CliError(std::string kind, const std::string& what) : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

unsigned default_workers() { return std::max(1u, std::thread::hardware_concurrency()); }

fs::path under_root(const std::string& p) {
  if (p.empty()) return {};
  const fs::path path(p);
  const char* root = std::getenv(data_root_env);
  if (path.is_absolute() || root == nullptr || *root == '\0') return path;
  return fs::path(root) / path;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw CliError("not_found", "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw CliError("bad_config", path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CliError("io", "cannot write " + path.string());
  out << text;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw CliError("bad_argument", "cannot parse number '" + item + "'");
    }
  }
  if (v.empty()) throw CliError("bad_argument", "empty list");
  return v;
}

// Config-file values become flag tokens placed before the user's own, so that
// with take-last semantics the command line wins.
std::vector<std::string> config_tokens(const json& section) {
  std::vector<std::string> out;
  if (!section.is_object()) throw CliError("bad_config", "config section must be an object");
  for (const auto& [key, value] : section.items()) {
    const std::string flag = "--" + key;
    if (value.is_boolean()) {
      out.push_back(flag + "=" + (value.get<bool>() ? "true" : "false"));
    } else if (value.is_array()) {
      std::string joined;
      for (const json& x : value) joined += (joined.empty() ? "" : ",") + (x.is_string() ? x.get<std::string>() : x.dump());
      out.push_back(flag);
      out.push_back(joined);
    } else if (value.is_string()) {
      out.push_back(flag);
      out.push_back(value.get<std::string>());
    } else if (value.is_number()) {
      out.push_back(flag);
      out.push_back(value.dump());
    } else {
      throw CliError("bad_config", "unsupported value for '" + key + "'");
    }
  }
  return out;
}

fs::path dataset_file(const fs::path& p, const std::string& split) {
  if (fs::is_directory(p)) return p / (split + ".sdld");
  return p;
}

synth::Dataset load_dataset(const fs::path& p) {
  if (!fs::exists(p)) throw CliError("not_found", "dataset not found: " + p.string());
  return synth::Dataset::load(p);
}

TrainingConfig training_config(const std::string& file) {
  if (file.empty()) return TrainingConfig{};
  return TrainingConfig::from_json(read_json(under_root(file)));
}

void print_epoch(std::ostream& out, const EpochRecord& e) {
  out << std::setprecision(6) << e.phase << " epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss;
  if (e.val_spread) out << " spread " << *e.val_spread;
  if (e.val_mae) out << " mae " << *e.val_mae;
  out << " grad " << e.grad_norm << " " << std::setprecision(3) << e.seconds << "s" << std::endl;
}

TrainHooks epoch_hooks(std::ostream& out, const fs::path& dir, std::ofstream& log) {
  TrainHooks h;
  h.checkpoint_dir = dir;
  h.on_epoch = [&out, &log](const EpochRecord& e) {
    print_epoch(out, e);
    log << e.to_json().dump() << '\n' << std::flush;
  };
  return h;
}

std::uint64_t case_seed(std::uint64_t seed, Index c) {
  return seed ^ (static_cast<std::uint64_t>(c) * 0x9e3779b97f4a7c15ull);
}

// Truth leads 1..T of a case as (T, V, H, W).
TensorF truth_tensor(const synth::Dataset& data, Index index, Index steps) {
  if (index < 0 || index + steps >= data.states()) throw CliError("bad_argument", "truth does not cover the forecast leads");
  std::vector<Index> idx(static_cast<std::size_t>(steps));
  std::iota(idx.begin(), idx.end(), index + 1);
  return data.states(idx);
}

struct Options {
  // shared
  std::string out, data, run, checkpoint, config_file, beta = "1,1,1", split = "test", variable = "vorticity";
  std::uint64_t seed = 1;
  unsigned workers = default_workers();
  // gen-data
  Index n_train = 20000, n_val = 2000, n_test = 2000, grid = 64, spinup = -1, stride = -1;
  // training
  std::string base, training_config;
  bool freeze_base = false;
  // forecast / replay / views
  Index cases = 1, index = -1, members = 10, steps = 20, case_index = 0, replay_case = -1, step = -1, member = 0,
        lead = 1, member_i = 0, member_j = 1;
  std::string id;
  double e = 0.0;
  bool pixel_noise = false, write_fields = false;
  int level = 1;
  std::string betas = "-1,0,1,2";
  // verify
  std::string archive, truth, sweep;
  Index rank_stride = 8;
  double alpha = 0.95;
  bool ssr_correction = false;
  // cost-ledger
  std::string phases = "paper", baseline_ledger, finetune_ledger;
  double backward_weight = 2.0;
  // serve
  std::string root, host = "127.0.0.1";
  int port = 8080;
  std::size_t cache = 256;
};

// --- subcommands --------------------------------------------------------------------------

void cmd_gen_data(const Options& o, std::ostream& out) {
  synth::GenerateOptions g;
  g.seed = o.seed;
  g.sizes = {o.n_train, o.n_val, o.n_test};
  g.config.grid = o.grid;
  if (o.spinup >= 0) g.config.spinup = o.spinup;
  if (o.stride > 0) g.config.stride = o.stride;
  g.workers = o.workers;
  const fs::path dir = under_root(o.out);
  fs::create_directories(dir);
  const json manifest = synth::generate_dataset(g, dir, [&](const std::string& s) { out << s << std::endl; });
  out << "wrote " << (dir / "manifest.json").string() << std::endl;
}

void cmd_train_base(const Options& o, std::ostream& out) {
  TrainingConfig cfg = training_config(o.training_config);
  cfg.seed = o.seed;
  const fs::path data = under_root(o.data), dir = under_root(o.out);
  const synth::Dataset train = load_dataset(dataset_file(data, "train")), val = load_dataset(dataset_file(data, "val"));
  fs::create_directories(dir);
  write_text(dir / "training_config.json", cfg.to_json().dump(2) + "\n");
  std::ofstream log(dir / "train_log.jsonl");
  const TrainResult r = train_deterministic(cfg, train, val, epoch_hooks(out, dir, log));
  save_checkpoint(r.state, dir / "base.sdlm");
  write_text(dir / "ledger.json", r.ledger.to_json().dump(2) + "\n");
  out << "wrote " << (dir / "base.sdlm").string() << std::endl;
}

void cmd_finetune_sdl(const Options& o, std::ostream& out) {
  TrainingConfig cfg = training_config(o.training_config);
  cfg.seed = o.seed;
  if (o.freeze_base) cfg.freeze_base = true;
  const fs::path data = under_root(o.data), dir = under_root(o.out), base = under_root(o.base);
  if (!fs::exists(base)) throw CliError("not_found", "checkpoint not found: " + base.string());
  const synth::Dataset train = load_dataset(dataset_file(data, "train")), val = load_dataset(dataset_file(data, "val"));
  fs::create_directories(dir);
  write_text(dir / "training_config.json", cfg.to_json().dump(2) + "\n");
  std::ofstream log(dir / "train_log.jsonl");
  const TrainResult r = finetune_sdl(load_checkpoint(base), cfg, train, val, epoch_hooks(out, dir, log));
  save_checkpoint(r.state, dir / "sdl.sdlm");
  write_text(dir / "ledger.json", r.ledger.to_json().dump(2) + "\n");
  out << "wrote " << (dir / "sdl.sdlm").string() << std::endl;
}

void cmd_forecast(const Options& o, std::ostream& out) {
  const fs::path ckpt = under_root(o.checkpoint), dir = under_root(o.out);
  const fs::path data_path = dataset_file(under_root(o.data), o.split);
  if (!fs::exists(ckpt)) throw CliError("not_found", "checkpoint not found: " + ckpt.string());
  const synth::Dataset data = load_dataset(data_path);
  LoadedModel model = open_checkpoint(ckpt);
  const BetaVector beta = gateway::parse_beta(o.beta);
  if (o.members < 2) throw CliError("bad_argument", "forecast needs at least 2 members");
  if (o.steps < 1) throw CliError("bad_argument", "forecast needs at least 1 step");
  std::vector<Index> starts;
  if (o.index >= 0) {
    starts.push_back(o.index);
  } else {
    if (data.states() <= o.steps) throw CliError("bad_argument", "dataset shorter than the forecast");
    starts = spaced_indices(data.states() - o.steps, o.cases);
  }
  fs::create_directories(dir);
  const std::string data_sha = file_sha256(data_path);
  gateway::RunManifest m;
  m.id = o.id.empty() ? fs::absolute(dir).filename().string() : o.id;
  m.checkpoint = fs::absolute(ckpt);
  m.checkpoint_sha256 = model.sha256;
  m.dataset = fs::absolute(data_path);
  m.dataset_sha256 = data_sha;
  m.config = {{"members", o.members}, {"steps", o.steps}, {"beta", {beta[0], beta[1], beta[2]}}, {"seed", o.seed},
              {"split", o.split}, {"variables", data.header().variables}, {"grid", data.grid()}};
  for (std::size_t c = 0; c < starts.size(); ++c) {
    const Index idx = starts[c];
    if (idx < 0 || idx >= data.states()) throw CliError("bad_argument", "index out of range");
    const TensorF initial = data.state(idx);
    RolloutOptions ro;
    ro.n_steps = o.steps;
    ro.members = o.members;
    ro.beta = beta;
    ro.seed = case_seed(o.seed, static_cast<Index>(c));
    ro.workers = o.workers;
    const EnsembleBatch batch = rollout(model.state, initial, ro);
    json sums = json::array();
    for (const MemberTrajectory& t : batch.members) sums.push_back(trajectory_sha256(t));
    const json provenance = {{"dataset_sha256", data_sha}, {"split", o.split}, {"index", idx},
                             {"case", c}, {"member_sha256", sums}};
    const LatentArchive a = make_archive(batch, initial, model.state.model.config(), model.sha256, provenance);
    std::ostringstream name;
    name << "case_" << std::setw(3) << std::setfill('0') << c << ".sdla";
    archive_write(a, dir / name.str());
    m.cases.push_back({name.str(), file_sha256(dir / name.str()), idx});
    std::size_t failed = 0;
    for (const MemberTrajectory& t : batch.members) failed += t.failed;
    out << "case " << c << " index " << idx << " members " << batch.members.size() << " failed " << failed << std::endl;
  }
  m.save(dir);
  out << "wrote " << (dir / "run.json").string() << std::endl;
}

struct OpenedRun {
  fs::path dir;
  gateway::RunManifest manifest;
  LoadedModel model;
  std::vector<LatentArchive> archives;
};

OpenedRun open_run(const std::string& run) {
  const fs::path dir = under_root(run);
  gateway::RunManifest m = gateway::RunManifest::load(dir);
  m.validate(dir);
  auto at = [&](const fs::path& p) { return p.is_absolute() ? p : dir / p; };
  OpenedRun r{dir, m, open_checkpoint(at(m.checkpoint)), {}};
  for (const auto& c : m.cases) r.archives.push_back(archive_read(at(c.archive)));
  return r;
}

void cmd_replay(const Options& o, std::ostream& out) {
  OpenedRun r = open_run(o.run);
  const fs::path dir = under_root(o.out);
  fs::create_directories(dir);
  std::optional<BetaVector> beta;
  if (!o.beta.empty()) beta = gateway::parse_beta(o.beta);
  json cases = json::array();
  bool all_match = true;
  for (std::size_t c = 0; c < r.archives.size(); ++c) {
    if (o.replay_case >= 0 && static_cast<Index>(c) != o.replay_case) continue;
    const LatentArchive& a = r.archives[c];
    const auto members = replay_all(a, r.model, beta, o.workers);
    const json& recorded = a.header.provenance.value("member_sha256", json::array());
    const bool same_beta = !beta || *beta == a.header.beta;
    json ms = json::array();
    for (const MemberTrajectory& t : members) {
      const std::string sha = trajectory_sha256(t);
      json row = {{"member", t.member}, {"failed", t.failed}, {"sha256", sha}};
      if (same_beta && t.member < recorded.size()) {
        const bool match = recorded[t.member].get<std::string>() == sha;
        row["matches_forecast"] = match;
        all_match = all_match && match;
      }
      ms.push_back(row);
      if (o.write_fields) {
        std::ostringstream name;
        name << "case_" << std::setw(3) << std::setfill('0') << c << "_member_" << std::setw(3) << t.member << ".f32";
        std::ofstream f(dir / name.str(), std::ios::binary);
        for (const TensorF& s : t.states)
          f.write(reinterpret_cast<const char*>(s.data()), static_cast<std::streamsize>(s.size() * sizeof(float)));
      }
    }
    cases.push_back({{"case", c}, {"beta", beta ? json{(*beta)[0], (*beta)[1], (*beta)[2]} : json(a.header.beta)},
                     {"members", ms}});
  }
  const json report = {{"run", r.manifest.id}, {"cases", cases}, {"all_match", all_match}};
  write_text(dir / "replay.json", report.dump(2) + "\n");
  out << "replay " << (all_match ? "matches" : "differs from") << " the recorded forecast" << std::endl;
  if (!all_match) throw CliError("replay_mismatch", "replayed trajectories differ from the recorded checksums");
}

void cmd_rescale(const Options& o, std::ostream& out) {
  const fs::path run_dir = under_root(o.run), dir = under_root(o.out);
  gateway::Engine engine(run_dir, o.workers);
  gateway::GenerateRequest q;
  q.case_index = o.case_index;
  q.beta = gateway::parse_beta(o.beta);
  q.step = o.step;
  q.variable = o.variable;
  const std::string text = gateway::payload_text(engine.generate(gateway::RunManifest::load(run_dir).id, q));
  fs::create_directories(dir);
  write_text(dir / "rescale.json", text);
  out << "wrote " << (dir / "rescale.json").string() << std::endl;
}

void cmd_interpolate(const Options& o, std::ostream& out) {
  const fs::path run_dir = under_root(o.run), dir = under_root(o.out);
  gateway::Engine engine(run_dir, o.workers);
  gateway::InterpolateRequest q;
  q.case_index = o.case_index;
  q.member_i = o.member_i;
  q.member_j = o.member_j;
  q.e = o.e;
  q.step = o.step;
  q.variable = o.variable;
  q.interpolate_pixel_noise = o.pixel_noise;
  const std::string text = gateway::payload_text(engine.interpolate(gateway::RunManifest::load(run_dir).id, q));
  fs::create_directories(dir);
  write_text(dir / "interpolate.json", text);
  out << "wrote " << (dir / "interpolate.json").string() << std::endl;
}

void cmd_spectra(const Options& o, std::ostream& out) {
  const fs::path run_dir = under_root(o.run), dir = under_root(o.out);
  gateway::Engine engine(run_dir, o.workers);
  gateway::SpectraRequest q;
  q.case_index = o.case_index;
  q.level = o.level;
  q.betas = parse_list(o.betas);
  q.member = o.member;
  q.lead = o.lead;
  const std::string text = gateway::payload_text(engine.spectra(gateway::RunManifest::load(run_dir).id, q));
  fs::create_directories(dir);
  write_text(dir / "spectra.json", text);
  out << "wrote " << (dir / "spectra.json").string() << std::endl;
}

void print_report(std::ostream& out, const VerificationReport& r) {
  for (const MetricCell& c : r.cells) {
    if (c.lead != 1 && c.lead % 5 != 0) continue;
    out << std::setprecision(4) << c.variable << " lead " << c.lead << " rmse " << c.rmse_ens_mean << " spread "
        << c.spread << " ssr " << (c.ssr ? std::to_string(*c.ssr) : std::string("n/a")) << " crps " << c.crps
        << " rank-p " << c.rank_p_value << std::endl;
  }
}

void cmd_verify(const Options& o, std::ostream& out) {
  const fs::path dir = under_root(o.out);
  std::vector<LatentArchive> archives;
  std::vector<TensorF> truths;
  std::optional<LoadedModel> model;
  std::vector<std::string> variables;
  if (!o.run.empty()) {
    OpenedRun r = open_run(o.run);
    const fs::path ds = r.manifest.dataset.is_absolute() ? r.manifest.dataset : r.dir / r.manifest.dataset;
    const synth::Dataset data = load_dataset(ds);
    variables = data.header().variables;
    for (std::size_t c = 0; c < r.archives.size(); ++c)
      truths.push_back(truth_tensor(data, r.manifest.cases[c].index, r.archives[c].header.n_steps));
    archives = std::move(r.archives);
    model.emplace(std::move(r.model));
  } else {
    if (o.archive.empty() || o.truth.empty() || o.checkpoint.empty()) {
      throw CliError("bad_argument", "verify needs --run, or --archive with --truth and --checkpoint");
    }
    archives.push_back(archive_read(under_root(o.archive)));
    const synth::Dataset data = load_dataset(under_root(o.truth));
    variables = data.header().variables;
    const Index idx = o.index >= 0 ? o.index : archives[0].header.provenance.value("index", Index{-1});
    if (idx < 0) throw CliError("bad_argument", "archive records no initial index; pass --index");
    truths.push_back(truth_tensor(data, idx, archives[0].header.n_steps));
    model.emplace(open_checkpoint(under_root(o.checkpoint)));
  }
  std::optional<BetaVector> beta;
  if (!o.beta.empty()) beta = gateway::parse_beta(o.beta);
  const Index steps = archives[0].header.n_steps, members = archives[0].header.members;
  const SpatialWeights weights = SpatialWeights::uniform(archives[0].header.config.grid);
  MetricsOptions mo;
  mo.alpha_loss = o.alpha;
  mo.ssr_correction = o.ssr_correction;
  mo.rank_stride = o.rank_stride;
  mo.tie_key.global_seed = o.seed;
  MetricsAccumulator acc(variables, steps, members, weights, mo);
  for (std::size_t c = 0; c < archives.size(); ++c) {
    const LatentArchive& a = archives[c];
    if (a.header.n_steps != steps || a.header.members != members) throw CliError("bad_argument", "cases differ in shape");
    const auto ms = replay_all(a, *model, beta, o.workers);
    std::vector<TensorF> fields;
    for (const MemberTrajectory& t : ms) {
      if (t.failed) throw CliError("replay_failed", "member " + std::to_string(t.member) + ": " + t.diagnostic);
      fields.push_back(lead_tensor(t));
    }
    // beta = 0 silences every SDL layer: the deterministic forecast
    const TensorF det = lead_tensor(replay_member(a, *model, 0, BetaVector{0.0, 0.0, 0.0}));
    acc.add(fields, truths[c], &det);
  }
  const VerificationReport report = acc.finalize();
  fs::create_directories(dir);
  json j = report.to_json();
  j["cases"] = archives.size();
  write_text(dir / "report.json", j.dump(2) + "\n");
  write_text(dir / "report.csv", report.to_csv());
  print_report(out, report);
  if (!o.sweep.empty()) {
    const std::vector<double> betas = parse_list(o.sweep);
    std::vector<SweepCase> cases;
    for (std::size_t c = 0; c < archives.size(); ++c) cases.push_back({&archives[c], truths[c]});
    const auto points = spread_sweep(cases, *model, betas, weights, o.alpha, o.workers);
    json pj = json::array();
    for (const SweepPoint& p : points) {
      pj.push_back({{"beta", p.beta}, {"report", p.report.to_json()}});
      double spread = 0.0, rmse = 0.0;
      for (const MetricCell& c : p.report.cells) {
        spread += c.spread;
        rmse += c.rmse_ens_mean;
      }
      const double n = static_cast<double>(p.report.cells.size());
      out << "sweep beta " << p.beta << " mean spread " << spread / n << " mean rmse " << rmse / n << std::endl;
    }
    write_text(dir / "sweep.json", json{{"cases", archives.size()}, {"points", pj}}.dump(2) + "\n");
  }
  out << "wrote " << (dir / "report.json").string() << std::endl;
}

std::string grouped(std::int64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

CostLedger ledger_from_json(const json& j) {
  CostLedger l;
  for (const json& e : j.at("phases")) l.record(e.at("phase"), e.at("forward"), e.at("backward"));
  return l;
}

void cmd_cost_ledger(const Options& o, std::ostream& out) {
  CostLedger base, fine;
  std::vector<std::int64_t> reported;
  std::int64_t reported_fine = -1;
  if (!o.baseline_ledger.empty() || !o.finetune_ledger.empty()) {
    if (o.baseline_ledger.empty() || o.finetune_ledger.empty()) {
      throw CliError("bad_argument", "--baseline-ledger and --finetune-ledger go together");
    }
    base = ledger_from_json(read_json(under_root(o.baseline_ledger)));
    fine = ledger_from_json(read_json(under_root(o.finetune_ledger)));
  } else if (o.phases == "paper") {
    base = CostLedger::planned(reference_baseline_phases());
    const std::array<Phase, 1> f{reference_finetune_phase()};
    fine = CostLedger::planned(f);
    reported = published_baseline_passes();
    reported_fine = published_finetune_passes();
  } else if (o.phases == "desk") {
    base = CostLedger::planned(desk_baseline_phases());
    const std::array<Phase, 1> f{desk_finetune_phase()};
    fine = CostLedger::planned(f);
  } else {
    throw CliError("bad_argument", "--phases must be 'paper' or 'desk'");
  }
  const std::string column = reported.empty() ? "" : "  published";
  out << "phase            forward passes" << column << "\n";
  for (std::size_t i = 0; i < base.entries.size(); ++i) {
    out << std::left << std::setw(16) << base.entries[i].phase << " " << std::right << std::setw(14)
        << grouped(base.entries[i].forward);
    if (i < reported.size()) out << "  " << std::setw(9) << grouped(reported[i]);
    out << "\n";
  }
  std::int64_t reported_total = 0;
  for (auto v : reported) reported_total += v;
  out << std::left << std::setw(16) << "baseline total" << " " << std::right << std::setw(14) << grouped(base.forward_total());
  if (!reported.empty()) out << "  " << std::setw(9) << grouped(reported_total);
  out << "\n";
  out << std::left << std::setw(16) << "fine-tune total" << " " << std::right << std::setw(14) << grouped(fine.forward_total());
  if (reported_fine >= 0) out << "  " << std::setw(9) << grouped(reported_fine);
  out << "\n";
  const CostRatio r = cost_ratio(base, fine, o.backward_weight);
  auto pct = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << v * 100.0 << "%";
    return s.str();
  };
  out << "fine-tune / baseline: " << r.numerator << "/" << r.denominator << " = " << pct(r.value);
  if (!reported.empty()) {
    CostLedger pub;
    for (std::size_t i = 0; i < reported.size(); ++i) pub.record(base.entries[i].phase, reported[i], reported[i]);
    CostLedger pub_fine;
    pub_fine.record("sdl-finetune", reported_fine, reported_fine);
    const CostRatio p = cost_ratio(pub, pub_fine, o.backward_weight);
    out << " (published counts: " << p.numerator << "/" << p.denominator << " = " << pct(p.value) << ")";
  }
  out << std::endl;
  if (!o.out.empty()) {
    const fs::path dir = under_root(o.out);
    fs::create_directories(dir);
    json j = {{"baseline", base.to_json()}, {"finetune", fine.to_json()},
              {"ratio", {{"numerator", r.numerator}, {"denominator", r.denominator}, {"value", r.value}}},
              {"backward_weight", o.backward_weight}};
    if (!reported.empty()) j["published"] = {{"baseline", reported}, {"baseline_total", reported_total}, {"finetune", reported_fine}};
    write_text(dir / "cost_ledger.json", j.dump(2) + "\n");
  }
}

void cmd_serve(const Options& o, std::ostream& out) {
  std::string root = o.root;
  if (root.empty()) {
    const char* env = std::getenv(data_root_env);
    root = env != nullptr && *env != '\0' ? env : ".";
  }
  gateway::Engine engine(root, o.workers, o.cache);
  gateway::Server server(engine);
  out << "serving " << root << " on http://" << o.host << ":" << o.port << std::endl;
  if (!server.listen(o.host, o.port)) throw CliError("io", "cannot bind " + o.host + ":" + std::to_string(o.port));
}

void error_line(std::ostream& err, const std::string& sub, const std::string& kind, const std::string& message) {
  err << json{{"error", {{"subcommand", sub}, {"kind", kind}, {"message", message}}}}.dump() << std::endl;
}

}  // namespace

int run(const std::vector<std::string>& args_in, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Stochastic decomposition layer toolkit", "sdl"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.add_option("--config", o.config_file, "JSON file with one object of flag values per subcommand");

  std::map<CLI::App*, std::function<void()>> commands;
  auto sub = [&](const std::string& name, const std::string& help, std::function<void(const Options&, std::ostream&)> fn) {
    CLI::App* s = app.add_subcommand(name, help);
    commands[s] = [fn, &o, &out] { fn(o, out); };
    return s;
  };
  auto seed = [&](CLI::App* s) { s->add_option("--seed", o.seed, "Seed for every random draw")->capture_default_str(); };
  auto workers = [&](CLI::App* s) { s->add_option("--workers", o.workers, "Worker threads"); };

  CLI::App* s = sub("gen-data", "Integrate the toy system into train/val/test datasets", cmd_gen_data);
  s->add_option("--out", o.out, "Output directory")->required();
  seed(s);
  workers(s);
  s->add_option("--train", o.n_train, "Training states")->capture_default_str();
  s->add_option("--val", o.n_val, "Validation states")->capture_default_str();
  s->add_option("--test", o.n_test, "Test states")->capture_default_str();
  s->add_option("--grid", o.grid, "Grid points per side")->capture_default_str();
  s->add_option("--spinup", o.spinup, "Strides discarded before recording");
  s->add_option("--stride", o.stride, "Integrator steps per stored state");

  s = sub("train-base", "Train the deterministic emulator", cmd_train_base);
  s->add_option("--data", o.data, "Directory with train.sdld and val.sdld")->required();
  s->add_option("--out", o.out, "Output directory")->required();
  s->add_option("--training-config", o.training_config, "Training configuration JSON");
  seed(s);

  s = sub("finetune-sdl", "Insert SDL layers and fine-tune with afCRPS", cmd_finetune_sdl);
  s->add_option("--data", o.data, "Directory with train.sdld and val.sdld")->required();
  s->add_option("--base", o.base, "Deterministic checkpoint")->required();
  s->add_option("--out", o.out, "Output directory")->required();
  s->add_option("--training-config", o.training_config, "Training configuration JSON");
  s->add_flag("--freeze-base", o.freeze_base, "Train only the SDL parameters");
  seed(s);

  s = sub("forecast", "Run ensemble forecasts and archive their latents", cmd_forecast);
  s->add_option("--checkpoint", o.checkpoint, "Model checkpoint")->required();
  s->add_option("--data", o.data, "Dataset file or directory")->required();
  s->add_option("--split", o.split, "Split used when --data is a directory")->capture_default_str();
  s->add_option("--out", o.out, "Run directory")->required();
  s->add_option("--id", o.id, "Run id (default: directory name)");
  s->add_option("--cases", o.cases, "Initial conditions spread evenly over the split")->capture_default_str();
  s->add_option("--index", o.index, "Single initial state index (overrides --cases)");
  s->add_option("--members", o.members, "Ensemble size")->capture_default_str();
  s->add_option("--steps", o.steps, "Forecast steps")->capture_default_str();
  s->add_option("--beta", o.beta, "Per-level latent scale, b or b1,b2,b3")->capture_default_str();
  seed(s);
  workers(s);

  s = sub("replay", "Regenerate archived members and check them against the forecast", cmd_replay);
  s->add_option("--run", o.run, "Run directory")->required();
  s->add_option("--out", o.out, "Output directory")->required();
  s->add_option("--case", o.replay_case, "Only this case");
  s->add_option("--beta", o.beta, "Override beta, b or b1,b2,b3");
  s->add_flag("--write-fields", o.write_fields, "Also write raw float32 trajectories");
  workers(s);

  s = sub("rescale", "Replay every member with a beta override; ensemble mean and std", cmd_rescale);
  s->add_option("--run", o.run, "Run directory")->required();
  s->add_option("--out", o.out, "Output directory")->required();
  s->add_option("--beta", o.beta, "b or b1,b2,b3")->required();
  s->add_option("--case", o.case_index, "Case index");
  s->add_option("--step", o.step, "Step (-1: last)");
  s->add_option("--variable", o.variable, "Variable name or index");
  workers(s);

  s = sub("interpolate", "Forecast from interpolated latents of two members", cmd_interpolate);
  s->add_option("--run", o.run, "Run directory")->required();
  s->add_option("--out", o.out, "Output directory")->required();
  s->add_option("--i", o.member_i, "First member")->required();
  s->add_option("--j", o.member_j, "Second member")->required();
  s->add_option("--e", o.e, "Weight of the second member in [0, 1]")->required();
  s->add_option("--case", o.case_index, "Case index");
  s->add_option("--step", o.step, "Step (-1: last)");
  s->add_option("--variable", o.variable, "Variable name or index");
  s->add_flag("--pixel-noise", o.pixel_noise, "Interpolate the per-pixel noise as well");
  workers(s);

  s = sub("verify", "Score the ensembles of a run against the truth", cmd_verify);
  s->add_option("--run", o.run, "Run directory");
  s->add_option("--archive", o.archive, "Single archive (with --truth and --checkpoint)");
  s->add_option("--truth", o.truth, "Dataset holding the verifying states");
  s->add_option("--checkpoint", o.checkpoint, "Model checkpoint for --archive");
  s->add_option("--index", o.index, "Initial state index for --archive");
  s->add_option("--out", o.out, "Output directory")->required();
  s->add_option("--beta", o.beta, "Override beta");
  s->add_option("--rank-stride", o.rank_stride, "Rank histogram uses every n-th point in x and y")->capture_default_str();
  s->add_option("--alpha", o.alpha, "afCRPS alpha")->capture_default_str();
  s->add_flag("--ssr-correction", o.ssr_correction, "Scale SSR by sqrt((M + 1) / M)");
  s->add_option("--sweep", o.sweep, "Comma-separated uniform betas to score as well");
  seed(s);
  workers(s);

  s = sub("spectra", "Kinetic-energy spectra of per-level beta perturbations", cmd_spectra);
  s->add_option("--run", o.run, "Run directory")->required();
  s->add_option("--out", o.out, "Output directory")->required();
  s->add_option("--level", o.level, "SDL level 1..3")->required();
  s->add_option("--betas", o.betas, "Comma-separated beta values")->capture_default_str();
  s->add_option("--member", o.member, "Member");
  s->add_option("--lead", o.lead, "Lead step");
  s->add_option("--case", o.case_index, "Case index");
  workers(s);

  s = sub("cost-ledger", "Forward-pass accounting of baseline training and fine-tuning", cmd_cost_ledger);
  s->add_option("--phases", o.phases, "paper: the reference schedule; desk: the desk-scale defaults")->capture_default_str();
  s->add_option("--baseline-ledger", o.baseline_ledger, "ledger.json of a train-base run");
  s->add_option("--finetune-ledger", o.finetune_ledger, "ledger.json of a finetune-sdl run");
  s->add_option("--backward-weight", o.backward_weight, "Cost of a backward pass in forward passes")->capture_default_str();
  s->add_option("--out", o.out, "Also write cost_ledger.json here");

  s = sub("serve", "HTTP service over the runs under a data root", cmd_serve);
  s->add_option("--root", o.root, std::string("Data root (default: $") + data_root_env + ")");
  s->add_option("--host", o.host)->capture_default_str();
  s->add_option("--port", o.port)->capture_default_str();
  s->add_option("--cache", o.cache, "Cached member trajectories")->capture_default_str();
  workers(s);

  std::vector<std::string> args = args_in;
  std::string name = "sdl";
  try {
    // --config values for the chosen subcommand go in ahead of its own flags
    std::string config;
    std::size_t sub_pos = args.size();
    for (std::size_t i = 0; i < args.size(); ++i) {
      if (args[i] == "--config" && i + 1 < args.size()) {
        config = args[++i];
      } else if (args[i].rfind("--config=", 0) == 0) {
        config = args[i].substr(9);
      } else if (!args[i].empty() && args[i][0] != '-') {
        sub_pos = i;
        break;
      }
    }
    if (sub_pos < args.size()) name = args[sub_pos];
    if (!config.empty() && sub_pos < args.size()) {
      const json j = read_json(under_root(config));
      if (j.contains(name)) {
        const auto toks = config_tokens(j.at(name));
        args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub_pos) + 1, toks.begin(), toks.end());
      }
    }
  } catch (const CliError& e) {
    error_line(err, name, e.kind(), e.what());
    return 1;
  }

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    return 2;
  }

  for (auto& [cmd, fn] : commands) {
    if (!cmd->parsed()) continue;
    try {
      fn();
      return 0;
    } catch (const CliError& e) {
      error_line(err, cmd->get_name(), e.kind(), e.what());
    } catch (const gateway::GatewayError& e) {
      error_line(err, cmd->get_name(), e.status() == 404 ? "not_found" : e.status() == 400 ? "bad_argument" : "failed",
                 e.what());
    } catch (const ChecksumMismatch& e) {
      error_line(err, cmd->get_name(), "checksum_mismatch", e.what());
    } catch (const TrainingDiverged& e) {
      error_line(err, cmd->get_name(), "diverged", std::string(e.what()) + "; last good checkpoint: " + e.last_good().string());
    } catch (const FormatError& e) {
      error_line(err, cmd->get_name(), "format", e.what());
    } catch (const std::invalid_argument& e) {
      error_line(err, cmd->get_name(), "bad_argument", e.what());
    } catch (const std::out_of_range& e) {
      error_line(err, cmd->get_name(), "bad_argument", e.what());
    } catch (const std::exception& e) {
      error_line(err, cmd->get_name(), "failed", e.what());
    }
    return 1;
  }
  return 2;
}

}  // namespace sdl::cli
