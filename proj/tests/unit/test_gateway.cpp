#include "doctest.h"

#include "sdl/binary_io.hpp"
#include "sdl/cli.hpp"
#include "sdl/gateway.hpp"

#include <httplib.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

using namespace sdl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// Tiny dataset, model and two-case run built once through the CLI.
struct Fixture {
  fs::path root;
  Fixture() {
    root = fs::temp_directory_path() / "sdl_test_gateway";
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "tc.json") << R"({"model": {"grid": 16, "widths": [4, 6, 8, 10], "latent_depth": 3, "init_seed": 4},
      "phases": [{"name": "1-step", "epochs": 1, "batches_per_epoch": 4, "batch_size": 4, "learning_rate": 0.003}],
      "finetune": {"name": "sdl-finetune", "loss": "afcrps", "epochs": 1, "batches_per_epoch": 3, "batch_size": 2,
                   "members": 4, "learning_rate": 0.003},
      "validation_samples": 4, "validation_members": 4})";
    const std::string r = root.string();
    auto must = [](const CliResult& c) {
      if (c.code != 0) throw std::runtime_error("fixture step failed: " + c.err);
    };
    must(run_cli({"gen-data", "--out", r + "/data", "--grid", "16", "--train", "40", "--val", "10", "--test", "30",
              "--spinup", "5", "--stride", "20", "--workers", "1"}));
    must(run_cli({"train-base", "--data", r + "/data", "--out", r + "/base", "--training-config", r + "/tc.json"}));
    must(run_cli({"finetune-sdl", "--data", r + "/data", "--base", r + "/base/base.sdlm", "--out", r + "/sdl",
              "--training-config", r + "/tc.json"}));
    must(run_cli({"forecast", "--checkpoint", r + "/sdl/sdl.sdlm", "--data", r + "/data", "--out", r + "/runs/toy", "--id",
              "toy", "--cases", "2", "--members", "4", "--steps", "4", "--seed", "7", "--workers", "1"}));
  }
  std::string run() const { return (root / "runs/toy").string(); }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

std::vector<float> floats(const json& a) { return a.get<std::vector<float>>(); }

}  // namespace

TEST_CASE("forecast is deterministic in its seed") {
  const Fixture& f = fixture();
  const std::string r = f.root.string();
  for (const char* name : {"again", "other"}) {
    const CliResult c = run_cli({"forecast", "--checkpoint", r + "/sdl/sdl.sdlm", "--data", r + "/data", "--out",
                             r + "/" + name, "--cases", "2", "--members", "4", "--steps", "4", "--seed",
                             std::string(name) == "again" ? "7" : "8", "--workers", "1"});
    REQUIRE(c.code == 0);
  }
  for (const char* a : {"case_000.sdla", "case_001.sdla"}) {
    CHECK(file_sha256(f.root / "again" / a) == file_sha256(f.root / "runs/toy" / a));
    CHECK(file_sha256(f.root / "other" / a) != file_sha256(f.root / "runs/toy" / a));
  }
}

TEST_CASE("replay reproduces the recorded trajectories") {
  const Fixture& f = fixture();
  const CliResult c = run_cli({"replay", "--run", f.run(), "--out", (f.root / "replay").string(), "--workers", "2"});
  CHECK(c.code == 0);
  const json j = json::parse(slurp(f.root / "replay/replay.json"));
  CHECK(j.at("all_match") == true);
  CHECK(j.at("cases").size() == 2);
  // an override changes the trajectories and skips the comparison
  const CliResult o = run_cli({"replay", "--run", f.run(), "--out", (f.root / "replay2").string(), "--beta", "2"});
  CHECK(o.code == 0);
  const json k = json::parse(slurp(f.root / "replay2/replay.json"));
  CHECK_FALSE(k["cases"][0]["members"][0].contains("matches_forecast"));
  CHECK(k["cases"][0]["members"][0]["sha256"] != j["cases"][0]["members"][0]["sha256"]);
}

TEST_CASE("cost ledger prints computed and published counts") {
  const CliResult c = run_cli({"cost-ledger", "--phases", "paper"});
  REQUIRE(c.code == 0);
  CHECK(c.out.find("12,411,840") != std::string::npos);
  CHECK(c.out.find("12,410,560") != std::string::npos);
  CHECK(c.out.find("200,000") != std::string::npos);
  CHECK(c.out.find("625/38787 = 1.61%") != std::string::npos);
  CHECK(c.out.find("625/38783 = 1.61%") != std::string::npos);
  CHECK(run_cli({"cost-ledger", "--phases", "huge"}).code == 1);
}

TEST_CASE("usage and runtime errors") {
  const CliResult unknown = run_cli({"forecast", "--no-such-flag"});
  CHECK(unknown.code == 2);
  CHECK(unknown.err.find("Usage") != std::string::npos);
  CHECK(run_cli({"no-such-command"}).code == 2);
  CHECK(run_cli({}).code == 2);
  CHECK(run_cli({"--help"}).code == 0);

  const CliResult missing = run_cli({"forecast", "--checkpoint", "/nonexistent.sdlm", "--data", "/nonexistent", "--out",
                                 (fs::temp_directory_path() / "sdl_never").string()});
  CHECK(missing.code == 1);
  CHECK(std::count(missing.err.begin(), missing.err.end(), '\n') == 1);
  const json e = json::parse(missing.err);
  CHECK(e.at("error").at("kind") == "not_found");
  CHECK(e.at("error").at("subcommand") == "forecast");

  const CliResult bad_beta = run_cli({"rescale", "--run", fixture().run(), "--beta", "1,2", "--out",
                                  (fixture().root / "never").string()});
  CHECK(bad_beta.code == 1);
  CHECK(json::parse(bad_beta.err).at("error").at("kind") == "bad_argument");
}

TEST_CASE("config file values yield to flags") {
  const Fixture& f = fixture();
  const std::string r = f.root.string();
  std::ofstream(f.root / "cfg.json") << R"({"forecast": {"members": 3, "steps": 2, "seed": 7, "workers": 1}})";
  REQUIRE(run_cli({"--config", r + "/cfg.json", "forecast", "--checkpoint", r + "/sdl/sdl.sdlm", "--data", r + "/data",
               "--out", r + "/cfg_a"}).code == 0);
  REQUIRE(run_cli({"--config", r + "/cfg.json", "forecast", "--checkpoint", r + "/sdl/sdl.sdlm", "--data", r + "/data",
               "--out", r + "/cfg_b", "--members", "5"}).code == 0);
  CHECK(archive_read(f.root / "cfg_a/case_000.sdla").header.members == 3);
  CHECK(archive_read(f.root / "cfg_a/case_000.sdla").header.n_steps == 2);
  CHECK(archive_read(f.root / "cfg_b/case_000.sdla").header.members == 5);
}

TEST_CASE("data root resolves relative paths") {
  const Fixture& f = fixture();
  ::setenv(cli::data_root_env, f.root.string().c_str(), 1);
  const CliResult c = run_cli({"rescale", "--run", "runs/toy", "--beta", "1", "--out", "rooted"});
  ::unsetenv(cli::data_root_env);
  CHECK(c.code == 0);
  CHECK(fs::exists(f.root / "rooted/rescale.json"));
}

TEST_CASE("verify writes per-variable per-lead reports") {
  const Fixture& f = fixture();
  const CliResult c = run_cli({"verify", "--run", f.run(), "--out", (f.root / "verify").string(), "--rank-stride", "2",
                           "--sweep", "0,1,2", "--workers", "1"});
  REQUIRE(c.code == 0);
  const VerificationReport r = VerificationReport::from_json(json::parse(slurp(f.root / "verify/report.json")));
  CHECK(r.cells.size() == 3 * 4);
  for (const std::string& v : {"vorticity", "tracer", "speed"})
    for (Index lead = 1; lead <= 4; ++lead) {
      const MetricCell& cell = r.cell(v, lead);
      CHECK(cell.ssr.has_value());
      CHECK(cell.rmse_det.has_value());
    }
  CHECK(slurp(f.root / "verify/report.csv").rfind("variable,lead,metric,value", 0) == 0);
  const json sweep = json::parse(slurp(f.root / "verify/sweep.json"));
  REQUIRE(sweep.at("points").size() == 3);
  const auto zero = VerificationReport::from_json(sweep["points"][0]["report"]);
  for (const MetricCell& cell : zero.cells) CHECK(cell.spread == 0.0);

  // single archive against an explicit truth file
  const CliResult one = run_cli({"verify", "--archive", f.run() + "/case_001.sdla", "--truth",
                             (f.root / "data/test.sdld").string(), "--checkpoint", (f.root / "sdl/sdl.sdlm").string(),
                             "--out", (f.root / "verify1").string()});
  CHECK(one.code == 0);
  CHECK(run_cli({"verify", "--out", (f.root / "verify2").string()}).code == 1);
}

TEST_CASE("manifest references are checked") {
  const Fixture& f = fixture();
  const fs::path copy = f.root / "tampered";
  fs::remove_all(copy);
  fs::copy(f.root / "runs/toy", copy);
  gateway::RunManifest m = gateway::RunManifest::load(copy);
  m.id = "tampered";
  m.checkpoint = fs::absolute(f.root / "sdl/sdl.sdlm");
  m.dataset = fs::absolute(f.root / "data/test.sdld");
  m.save(copy);
  CHECK_NOTHROW(gateway::RunManifest::load(copy).validate(copy));
  {
    std::fstream a(copy / "case_001.sdla", std::ios::in | std::ios::out | std::ios::binary);
    a.seekp(-20, std::ios::end);
    a.put('\x7f');
  }
  try {
    gateway::RunManifest::load(copy).validate(copy);
    FAIL("tampered archive accepted");
  } catch (const gateway::GatewayError& e) {
    CHECK(e.status() == 500);
  }
  CHECK_THROWS_AS(gateway::RunManifest::load(f.root / "nowhere"), gateway::GatewayError);
  fs::remove_all(copy);
}

TEST_CASE("http service") {
  const Fixture& f = fixture();
  const fs::path root = f.root / "runs";
  std::map<std::string, std::string> before;
  for (const auto& e : fs::directory_iterator(root / "toy")) before[e.path().filename()] = file_sha256(e.path());

  {
    // a run whose checkpoint yields non-finite states
    const fs::path dir = root / "broken";
    fs::remove_all(dir);
    fs::create_directories(dir);
    ModelState bad = load_checkpoint(f.root / "sdl/sdl.sdlm");
    bad.model.parameters()[0]->value[0] = std::nanf("");
    save_checkpoint(bad, dir / "bad.sdlm");
    LatentArchive a = archive_read(root / "toy/case_000.sdla");
    a.header.model_sha256 = file_sha256(dir / "bad.sdlm");
    archive_write(a, dir / "case_000.sdla");
    gateway::RunManifest m = gateway::RunManifest::load(root / "toy");
    m.id = "broken";
    m.checkpoint = dir / "bad.sdlm";
    m.checkpoint_sha256 = file_sha256(m.checkpoint);
    m.dataset = fs::absolute(f.root / "data/test.sdld");
    m.cases = {{"case_000.sdla", file_sha256(dir / "case_000.sdla"), m.cases[0].index}};
    m.save(dir);
  }
  gateway::Engine engine(root, 3);
  gateway::Server server(engine);
  const int port = server.start_background();
  REQUIRE(port > 0);
  httplib::Client http("127.0.0.1", port);
  auto post = [&](const std::string& path, const json& body) {
    return http.Post(path, body.dump(), "application/json");
  };

  SUBCASE("runs and fields") {
    auto res = http.Get("/api/runs");
    REQUIRE(res);
    CHECK(res->status == 200);
    const json runs = json::parse(res->body).at("runs");
    REQUIRE(runs.size() == 2);
    CHECK(runs[0].at("id") == "broken");
    CHECK(runs[1].at("id") == "toy");

    res = http.Get("/api/runs/toy/field?member=1&step=3&variable=tracer&stats=1");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    const json field = json::parse(res->body);
    const auto v = floats(field.at("values"));
    CHECK(v.size() == 16 * 16);
    CHECK(field.at("height") == 16);
    CHECK(*std::min_element(v.begin(), v.end()) == field.at("min").get<float>());
    CHECK(*std::max_element(v.begin(), v.end()) == field.at("max").get<float>());
    CHECK(field.at("ensemble_std").size() == 256);
    CHECK(field.at("request").at("variable") == "tracer");
  }

  SUBCASE("generate at beta one equals the archived members") {
    auto res = post("/api/runs/toy/generate", {{"beta", {1, 1, 1}}, {"step", 4}, {"variable", "vorticity"}});
    REQUIRE(res);
    REQUIRE(res->status == 200);
    const json g = json::parse(res->body);
    std::vector<std::vector<float>> ms;
    for (int m = 0; m < 4; ++m) {
      auto r = http.Get("/api/runs/toy/field?member=" + std::to_string(m) + "&step=4");
      ms.push_back(floats(json::parse(r->body).at("values")));
    }
    const auto mean = floats(g.at("mean"));
    const auto sd = floats(g.at("std"));
    for (std::size_t i = 0; i < mean.size(); ++i) {
      double s = 0;
      for (const auto& m : ms) s += m[i];
      const double mu = s / 4.0;
      double q = 0;
      for (const auto& m : ms) q += (m[i] - mu) * (m[i] - mu);
      REQUIRE(mean[i] == static_cast<float>(mu));
      REQUIRE(sd[i] == static_cast<float>(std::sqrt(q / 3.0)));
    }
    CHECK(g.at("summary").contains("ensemble_mean_rmse"));

    // beta = 0 silences the noise
    res = post("/api/runs/toy/generate", {{"beta", 0}});
    const json z = json::parse(res->body);
    for (float x : floats(z.at("std"))) REQUIRE(x == 0.0f);
    CHECK(z.at("summary").at("spread") == 0.0);
  }

  SUBCASE("payloads match the CLI bytewise") {
    const std::string out = (f.root / "cli_payloads").string();
    REQUIRE(run_cli({"rescale", "--run", f.run(), "--beta", "0.5,-1,2", "--step", "2", "--variable", "speed", "--out", out})
                .code == 0);
    auto res = post("/api/runs/toy/generate", {{"beta", {0.5, -1, 2}}, {"step", 2}, {"variable", "speed"}});
    REQUIRE(res);
    CHECK(res->body == slurp(out + "/rescale.json"));

    REQUIRE(run_cli({"interpolate", "--run", f.run(), "--i", "0", "--j", "2", "--e", "0.35", "--pixel-noise", "--out", out})
                .code == 0);
    res = post("/api/runs/toy/interpolate",
               {{"member_i", 0}, {"member_j", 2}, {"e", 0.35}, {"interpolate_pixel_noise", true}});
    CHECK(res->body == slurp(out + "/interpolate.json"));

    REQUIRE(run_cli({"spectra", "--run", f.run(), "--level", "2", "--betas", "-2,1,3", "--lead", "2", "--out", out}).code == 0);
    res = post("/api/runs/toy/spectra", {{"level", 2}, {"betas", {-2, 1, 3}}, {"lead", 2}});
    CHECK(res->body == slurp(out + "/spectra.json"));
    const json s = json::parse(res->body);
    CHECK(s.at("series").size() == 3);
    // beta = 1 is the reference member itself
    CHECK(s.at("series")[1].at("total") == 0.0);
    CHECK(s.at("series")[0].at("total") > 0.0);
  }

  SUBCASE("interpolation endpoints equal member fetches") {
    for (int step : {1, 4}) {
      auto a = http.Get("/api/runs/toy/field?member=1&step=" + std::to_string(step));
      auto b = http.Get("/api/runs/toy/field?member=3&step=" + std::to_string(step));
      auto e0 = post("/api/runs/toy/interpolate", {{"member_i", 1}, {"member_j", 3}, {"e", 0.0}, {"step", step}});
      auto e1 = post("/api/runs/toy/interpolate", {{"member_i", 1}, {"member_j", 3}, {"e", 1.0}, {"step", step}});
      CHECK(json::parse(e0->body).at("values") == json::parse(a->body).at("values"));
      CHECK(json::parse(e1->body).at("values") == json::parse(b->body).at("values"));
    }
  }

  SUBCASE("concurrent identical requests") {
    const json body = {{"beta", {1.5, 1.5, 0.25}}, {"case", 1}};
    const std::size_t before_count = engine.replays_computed();
    std::vector<std::string> bodies(6);
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < bodies.size(); ++i)
      pool.emplace_back([&, i] {
        httplib::Client c("127.0.0.1", port);
        auto r = c.Post("/api/runs/toy/generate", body.dump(), "application/json");
        if (r) bodies[i] = r->body;
      });
    for (auto& t : pool) t.join();
    for (const auto& b : bodies) CHECK(b == bodies[0]);
    CHECK(!bodies[0].empty());
    // each member replayed once despite the overlap
    CHECK(engine.replays_computed() - before_count == 4);
  }

  SUBCASE("errors") {
    auto res = http.Get("/api/runs/nope/field");
    REQUIRE(res);
    CHECK(res->status == 404);
    CHECK(json::parse(res->body).at("error").at("status") == 404);
    CHECK(http.Get("/api/runs/toy/field?member=9")->status == 404);
    CHECK(http.Get("/api/runs/toy/field?case=5")->status == 404);
    CHECK(http.Get("/api/runs/toy/field?step=x")->status == 400);
    CHECK(http.Get("/api/runs/toy/field?step=99")->status == 400);
    CHECK(http.Get("/api/runs/toy/field?variable=pressure")->status == 400);
    CHECK(http.Post("/api/runs/toy/generate", "{not json", "application/json")->status == 400);
    CHECK(post("/api/runs/toy/generate", {{"beta", {1, 2}}})->status == 400);
    CHECK(post("/api/runs/toy/generate", json::object())->status == 400);
    CHECK(post("/api/runs/toy/interpolate", {{"member_i", 0}, {"member_j", 1}, {"e", 1.5}})->status == 400);
    CHECK(post("/api/runs/toy/interpolate", {{"member_i", 0}, {"member_j", 7}, {"e", 0.5}})->status == 404);
    CHECK(post("/api/runs/toy/spectra", {{"level", 4}})->status == 400);
    CHECK(http.Get("/api/nothing")->status == 404);
    // replay failure carries a diagnostic
    res = post("/api/runs/broken/generate", {{"beta", 1}});
    CHECK(res->status == 500);
    CHECK(json::parse(res->body).at("error").at("message").get<std::string>().find("non-finite") != std::string::npos);
  }

  server.stop();
  for (const auto& [name, sha] : before) CHECK(file_sha256(root / "toy" / name) == sha);
}
