#include "doctest.h"

#include "sdl/latents.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

using namespace sdl;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.grid = 16;
  c.widths = {4, 6, 8, 10};
  c.latent_depth = 3;
  c.stochastic = true;
  c.init_seed = 3;
  return c;
}

fs::path scratch_dir() {
  const fs::path p = fs::temp_directory_path() / "sdl_test_latents";
  fs::create_directories(p);
  return p;
}

// Small stochastic model saved to disk so the archive can reference its checksum.
LoadedModel small_model(double w_std = 0.5) {
  ModelState s{Emulator<float>(small_config()), Normalizer{{0.0, 1.0, 2.0}, {1.0, 0.5, 2.0}}};
  for (int l = 1; l <= 3; ++l) s.model.sdl_layer(l).style_map.value.array() *= static_cast<float>(w_std / 0.02);
  const fs::path p = scratch_dir() / ("model_" + std::to_string(w_std) + ".sdlm");
  save_checkpoint(s, p);
  return open_checkpoint(p);
}

TensorF initial_state(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  TensorF t(Shape{1, 3, 16, 16});
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

bool bit_equal(const TensorF& a, const TensorF& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) == 0;
}

bool same_trajectory(const MemberTrajectory& a, const MemberTrajectory& b) {
  if (a.states.size() != b.states.size()) return false;
  for (std::size_t t = 0; t < a.states.size(); ++t)
    if (!bit_equal(a.states[t], b.states[t])) return false;
  return true;
}

bool same_values(const Eigen::ArrayXf& a, const Eigen::ArrayXf& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.size()) * sizeof(float)) == 0;
}

struct Run {
  LoadedModel model;
  TensorF initial;
  EnsembleBatch batch;
  LatentArchive archive;
};

Run small_run(Index members = 4, Index steps = 5, BetaVector beta = {1.0, 1.0, 1.0}) {
  Run r{small_model(), initial_state(11), {}, {}};
  RolloutOptions opt;
  opt.members = members;
  opt.n_steps = steps;
  opt.seed = 7;
  opt.beta = beta;
  r.batch = rollout(r.model.state, r.initial, opt);
  r.archive = make_archive(r.batch, r.initial, r.model.state.model.config(), r.model.sha256, {{"case", "unit"}});
  return r;
}

}  // namespace

TEST_CASE("archive round trip is bit-exact") {
  Run r = small_run();
  const fs::path p = scratch_dir() / "a.sdla";
  archive_write(r.archive, p);
  const LatentArchive back = archive_read(p);
  CHECK(back.header.model_sha256 == r.model.sha256);
  CHECK(back.header.members == 4);
  CHECK(back.header.n_steps == 5);
  CHECK(back.header.seed == 7);
  CHECK(back.header.provenance.at("case") == "unit");
  CHECK(bit_equal(back.header.initial, r.initial));
  for (Index m = 0; m < 4; ++m)
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t l = 0; l < 3; ++l) {
        CHECK(same_values(back.member(m)[t].latents[l].values, r.archive.member(m)[t].latents[l].values));
        CHECK(back.member(m)[t].pixel_keys[l] == r.archive.member(m)[t].pixel_keys[l]);
      }
  // re-writing the read archive reproduces the file
  const fs::path p2 = scratch_dir() / "a2.sdla";
  archive_write(back, p2);
  CHECK(file_sha256(p) == file_sha256(p2));
  CHECK_THROWS_AS(back.member(4), std::out_of_range);
}

TEST_CASE("archive size follows the level grids") {
  // default configuration: (8^2 + 16^2 + 32^2) * 16 * 4 bytes of latents per member-step
  ModelConfig c;
  c.stochastic = true;
  const Index per_step = (8 * 8 + 16 * 16 + 32 * 32) * 16 * 4;
  CHECK(per_step == 86016);
  CHECK(c.latent_bytes_per_step() == per_step);
  LatentArchive a;
  a.header.config = c;
  a.header.members = 10;
  a.header.n_steps = 20;
  a.header.initial = TensorF(Shape{1, 3, 64, 64});
  for (std::uint32_t m = 0; m < 10; ++m) {
    std::vector<StepNoise> steps;
    for (std::uint32_t t = 0; t < 20; ++t) {
      StepNoise s;
      s.latents = sample_latents(latent_key(1, m, t), c.level_grids(), c.latent_depth, c.latent_mode);
      s.pixel_keys = pixel_keys(1, m, t);
      steps.push_back(std::move(s));
    }
    a.noise.push_back(std::move(steps));
  }
  const fs::path p = scratch_dir() / "size.sdla";
  archive_write(a, p);
  const auto header_bytes = a.header.to_json().dump().size() + 16;
  CHECK(fs::file_size(p) == header_bytes + static_cast<std::uintmax_t>(a.payload_bytes()));
  const double target = 10.0 * 20.0 * per_step + static_cast<double>(header_bytes);
  CHECK(std::abs(static_cast<double>(fs::file_size(p)) - target) / target < 0.02);
}

TEST_CASE("archive format guards") {
  Run r = small_run(2, 2);
  const fs::path p = scratch_dir() / "g.sdla";
  archive_write(r.archive, p);
  std::string bytes;
  {
    std::ifstream f(p, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(f), {});
  }
  std::uint64_t header_len;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  auto header = nlohmann::json::parse(bytes.substr(16, header_len));
  const std::string payload = bytes.substr(16 + header_len);
  auto write_with = [&](const nlohmann::json& h, const std::string& body, std::uint32_t version = 1) {
    const std::string text = h.dump();
    const std::uint64_t n = text.size();
    const fs::path q = scratch_dir() / "g2.sdla";
    std::ofstream f(q, std::ios::binary);
    f.write("SDLA", 4);
    f.write(reinterpret_cast<const char*>(&version), 4);
    f.write(reinterpret_cast<const char*>(&n), 8);
    f.write(text.data(), static_cast<std::streamsize>(n));
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    return q;
  };

  SUBCASE("unknown header fields are ignored") {
    header["future_field"] = {{"anything", 1}};
    const LatentArchive a = archive_read(write_with(header, payload));
    CHECK(same_values(a.member(1)[1].latents[2].values, r.archive.member(1)[1].latents[2].values));
  }
  SUBCASE("unknown version is refused") {
    CHECK_THROWS_AS(archive_read(write_with(header, payload, 2)), FormatError);
    header["version"] = 2;
    CHECK_THROWS_AS(archive_read(write_with(header, payload)), FormatError);
  }
  SUBCASE("payload corruption is detected") {
    std::string bad = payload;
    bad[17] = static_cast<char>(bad[17] ^ 0x40);
    CHECK_THROWS_AS(archive_read(write_with(header, bad)), FormatError);
    CHECK_THROWS_AS(archive_read(write_with(header, payload.substr(0, payload.size() - 3))), FormatError);
  }
  SUBCASE("bad magic") {
    std::string b = bytes;
    b[0] = 'X';
    const fs::path q = scratch_dir() / "g3.sdla";
    std::ofstream(q, std::ios::binary) << b;
    CHECK_THROWS_AS(archive_read(q), FormatError);
  }
  SUBCASE("deterministic batches cannot be archived") {
    EnsembleBatch det = r.batch;
    det.deterministic = true;
    CHECK_THROWS_AS(make_archive(det, r.initial, r.model.state.model.config(), r.model.sha256), std::invalid_argument);
    EnsembleBatch partial = r.batch;
    partial.members[1].noise.pop_back();
    CHECK_THROWS_AS(make_archive(partial, r.initial, r.model.state.model.config(), r.model.sha256),
                    std::invalid_argument);
  }
}

TEST_CASE("replay reproduces every member bit-exactly") {
  Run r = small_run(4, 5, {1.5, 0.5, 2.0});
  const fs::path p = scratch_dir() / "r.sdla";
  archive_write(r.archive, p);
  const LatentArchive a = archive_read(p);
  LoadedModel model = open_checkpoint(scratch_dir() / "model_0.500000.sdlm");
  for (Index m = 0; m < 4; ++m) {
    const auto replayed = replay_member(a, model, m);
    float max_diff = 0.0f;
    for (std::size_t t = 0; t < replayed.states.size(); ++t)
      max_diff = std::max(max_diff, (replayed.states[t].array() - r.batch.members[static_cast<std::size_t>(m)].states[t].array()).abs().maxCoeff());
    CHECK(max_diff == 0.0f);
    CHECK(same_trajectory(replayed, r.batch.members[static_cast<std::size_t>(m)]));
  }
  const auto all = replay_all(a, model, std::nullopt, 3);
  for (std::size_t m = 0; m < 4; ++m) CHECK(same_trajectory(all[m], r.batch.members[m]));
  CHECK_THROWS_AS(replay_member(a, model, 4), std::out_of_range);
}

TEST_CASE("replay beta overrides") {
  Run r = small_run(3, 4);
  SUBCASE("explicit (1,1,1) equals no override") {
    for (Index m = 0; m < 3; ++m)
      CHECK(same_trajectory(replay_member(r.archive, r.model, m, BetaVector{1, 1, 1}), replay_member(r.archive, r.model, m)));
  }
  SUBCASE("beta = 0 equals the deterministic rollout") {
    RolloutOptions opt;
    opt.n_steps = 4;
    opt.deterministic = true;
    const auto det = rollout(r.model.state, r.initial, opt);
    for (Index m = 0; m < 3; ++m)
      CHECK(same_trajectory(replay_member(r.archive, r.model, m, BetaVector{0, 0, 0}), det.members[0]));
  }
  SUBCASE("override equals a fresh rollout at that beta") {
    RolloutOptions opt;
    opt.n_steps = 4;
    opt.members = 3;
    opt.seed = 7;
    opt.beta = {2.0, -1.0, 0.25};
    const auto fresh = rollout(r.model.state, r.initial, opt);
    for (Index m = 0; m < 3; ++m)
      CHECK(same_trajectory(replay_member(r.archive, r.model, m, opt.beta), fresh.members[static_cast<std::size_t>(m)]));
  }
}

TEST_CASE("replay refuses a different checkpoint") {
  Run r = small_run(2, 2);
  LoadedModel other = small_model(0.25);
  CHECK_THROWS_AS(replay_member(r.archive, other, 0), ChecksumMismatch);
  CHECK_THROWS_AS(interpolate_members(r.archive, other, 0, 1, 0.5), ChecksumMismatch);
}

TEST_CASE("interpolation") {
  Run r = small_run(3, 4, {1.0, 2.0, 1.0});
  for (bool mix_r : {false, true}) {
    CAPTURE(mix_r);
    const InterpolationOptions opt{mix_r};
    CHECK(same_trajectory(interpolate_members(r.archive, r.model, 0, 2, 0.0, opt), r.batch.members[0]));
    CHECK(same_trajectory(interpolate_members(r.archive, r.model, 0, 2, 1.0, opt), r.batch.members[2]));
  }
  for (double e : {0.0, 0.3, 0.5, 0.8, 1.0}) {
    CAPTURE(e);
    const auto noise = interpolated_noise(r.archive, 0, 1, e);
    const float ef = static_cast<float>(e);
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t l = 0; l < 3; ++l) {
        const Eigen::ArrayXf expect =
            (1.0f - ef) * r.archive.member(0)[t].latents[l].values + ef * r.archive.member(1)[t].latents[l].values;
        CHECK(same_values(noise[t].latents[l].values, expect));
        CHECK(noise[t].latents[l].gain == 1.0f);
        CHECK(noise[t].pixel_keys[l] == r.archive.member(e < 0.5 ? 0 : 1)[t].pixel_keys[l]);
      }
  }
  const auto mid = interpolated_noise(r.archive, 0, 1, 0.5);
  const Eigen::ArrayXf mean = (r.archive.member(0)[2].latents[1].values + r.archive.member(1)[2].latents[1].values) * 0.5f;
  CHECK(same_values(mid[2].latents[1].values, mean));
  CHECK_THROWS_AS(interpolated_noise(r.archive, 0, 1, 1.5), std::invalid_argument);
  CHECK_THROWS_AS(interpolated_noise(r.archive, 0, 1, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(interpolated_noise(r.archive, 0, 3, 0.5), std::out_of_range);
  // the midpoint with mixed R differs from the nearest-key trajectory
  CHECK(!same_trajectory(interpolate_members(r.archive, r.model, 0, 1, 0.5, {true}),
                         interpolate_members(r.archive, r.model, 0, 1, 0.5, {false})));
}

TEST_CASE("spread sweep") {
  Run r = small_run(4, 3);
  TensorF truth = lead_tensor(r.batch.members[3]);
  truth.array() += 0.1f;
  const std::vector<SweepCase> cases{{&r.archive, truth}};
  const std::vector<double> betas{0.0, 0.5, 1.0, -1.0, 2.0};
  const auto sweep = spread_sweep(cases, r.model, betas, SpatialWeights::uniform(16), 0.95, 2);
  REQUIRE(sweep.size() == 5);
  for (const auto& c : sweep[0].report.cells) CHECK(c.spread == 0.0);
  for (const auto& name : r.model.state.model.config().variable_names)
    for (Index lead = 1; lead <= 3; ++lead) {
      CHECK(sweep[1].report.cell(name, lead).spread > 0.0);
      CHECK(sweep[1].report.cell(name, lead).spread <= sweep[2].report.cell(name, lead).spread);
      CHECK(sweep[2].report.cell(name, lead).spread <= sweep[4].report.cell(name, lead).spread);
    }
  // beta = 1 matches scoring the archived members directly
  std::vector<TensorF> fields;
  for (const auto& m : r.batch.members) fields.push_back(lead_tensor(m));
  const auto direct = ensemble_metrics(fields, truth, SpatialWeights::uniform(16), 0.95, r.model.state.model.config().variable_names);
  CHECK(direct.cell("tracer", 2).crps == sweep[2].report.cell("tracer", 2).crps);
  const std::vector<double> bad{std::nan("")};
  CHECK_THROWS_AS(spread_sweep(cases, r.model, bad, SpatialWeights::uniform(16)), std::invalid_argument);
}

TEST_CASE("beta layer attribution") {
  Run r = small_run(2, 3);
  const std::vector<double> values{1.0, -3.0, 3.0};
  for (int level = 1; level <= 3; ++level) {
    CAPTURE(level);
    const auto out = beta_layer_attribution(r.archive, r.model, level, values);
    REQUIRE(out.size() == 3);
    CHECK(out[0].anomaly.array().abs().maxCoeff() == 0.0f);
    CHECK(out[0].rms == std::vector<double>{0.0, 0.0, 0.0});
    CHECK((out[1].first_perturbation.array() == -out[2].first_perturbation.array()).all());
    CHECK(out[1].first_perturbation.array().abs().maxCoeff() > 0.0f);
    CHECK(!bit_equal(out[1].anomaly, out[2].anomaly));
    double sum = 0.0;
    for (double e : out[2].spectrum.energy) sum += e;
    CHECK(std::abs(sum - out[2].spectrum.total) <= 1e-10 * out[2].spectrum.total);
  }
  CHECK_THROWS_AS(beta_layer_attribution(r.archive, r.model, 4, values), std::invalid_argument);
}
