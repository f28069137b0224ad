#include "sdl/latents.hpp"

#include <cmath>

namespace sdl {

namespace {

constexpr std::uint32_t kArchiveVersion = 1;

nlohmann::json tensor_json(const TensorF& t) {
  const Shape s = t.shape();
  return {{"shape", {s.n, s.c, s.h, s.w}},
          {"float32_base64", base64_encode(t.data(), static_cast<std::size_t>(t.size()) * sizeof(float))}};
}

TensorF tensor_from_json(const nlohmann::json& j) {
  const auto dims = j.at("shape").get<std::vector<Index>>();
  if (dims.size() != 4) throw FormatError("archive: initial state needs 4 dims");
  TensorF t(Shape{dims[0], dims[1], dims[2], dims[3]});
  const auto bytes = base64_decode(j.at("float32_base64").get<std::string>());
  if (bytes.size() != static_cast<std::size_t>(t.size()) * sizeof(float)) {
    throw FormatError("archive: initial state size does not match its shape");
  }
  std::memcpy(t.data(), bytes.data(), bytes.size());
  return t;
}

Index latent_values(const LevelGrid& g, const ModelConfig& c) {
  return c.latent_mode == LatentMode::spatial ? g.height * g.width * c.latent_depth : c.latent_depth;
}

}  // namespace

nlohmann::json ArchiveHeader::to_json() const {
  nlohmann::json levels = nlohmann::json::array();
  for (const LevelGrid& g : config.level_grids()) {
    levels.push_back({{"level", g.level}, {"height", g.height}, {"width", g.width}, {"channels", g.channels}});
  }
  return {{"format", "sdl-latent-archive"},
          {"version", version},
          {"model_sha256", model_sha256},
          {"model_config", model_config_json(config)},
          {"seed", seed},
          {"levels", levels},
          {"latent_depth", config.latent_depth},
          {"members", members},
          {"n_steps", n_steps},
          {"beta", beta},
          {"initial_state", tensor_json(initial)},
          {"provenance", provenance}};
}

ArchiveHeader ArchiveHeader::from_json(const nlohmann::json& j) {
  ArchiveHeader h;
  h.version = j.at("version").get<std::uint32_t>();
  if (h.version != kArchiveVersion) {
    throw FormatError("archive: unsupported format version " + std::to_string(h.version));
  }
  h.model_sha256 = j.at("model_sha256").get<std::string>();
  h.config = model_config_from_json(j.at("model_config"));
  h.seed = j.at("seed").get<std::uint64_t>();
  h.members = j.at("members").get<Index>();
  h.n_steps = j.at("n_steps").get<Index>();
  h.beta = j.at("beta").get<BetaVector>();
  h.initial = tensor_from_json(j.at("initial_state"));
  if (j.contains("provenance")) h.provenance = j.at("provenance");
  if (j.at("latent_depth").get<Index>() != h.config.latent_depth) throw FormatError("archive: latent_depth disagrees with model_config");
  const auto grids = h.config.level_grids();
  const auto& levels = j.at("levels");
  if (levels.size() != 3) throw FormatError("archive: expected 3 levels");
  for (std::size_t l = 0; l < 3; ++l) {
    if (levels[l].at("height").get<Index>() != grids[l].height || levels[l].at("width").get<Index>() != grids[l].width) {
      throw FormatError("archive: level grid disagrees with model_config");
    }
  }
  return h;
}

const std::vector<StepNoise>& LatentArchive::member(Index m) const {
  if (m < 0 || m >= static_cast<Index>(noise.size())) {
    throw std::out_of_range("archive: member " + std::to_string(m) + " out of range [0, " +
                            std::to_string(noise.size()) + ")");
  }
  return noise[static_cast<std::size_t>(m)];
}

Index LatentArchive::payload_bytes() const {
  Index per_step = 0;
  for (const LevelGrid& g : header.config.level_grids()) per_step += latent_values(g, header.config) * 4 + 5 * 8;
  return header.members * header.n_steps * per_step + 8;
}

LatentArchive make_archive(const EnsembleBatch& batch, const TensorF& initial, const ModelConfig& config,
                           std::string model_sha256, nlohmann::json provenance) {
  if (batch.deterministic || !config.stochastic) {
    throw std::invalid_argument("archive: deterministic runs carry no latent records");
  }
  LatentArchive a;
  a.header.model_sha256 = std::move(model_sha256);
  a.header.config = config;
  a.header.seed = batch.seed;
  a.header.members = static_cast<Index>(batch.members.size());
  a.header.n_steps = batch.n_steps;
  a.header.beta = batch.beta;
  a.header.initial = initial;
  a.header.provenance = std::move(provenance);
  for (const MemberTrajectory& m : batch.members) {
    if (static_cast<Index>(m.noise.size()) != batch.n_steps) {
      throw std::invalid_argument("archive: member " + std::to_string(m.member) + " has incomplete noise records");
    }
    a.noise.push_back(m.noise);
  }
  return a;
}

void archive_write(const LatentArchive& archive, const std::filesystem::path& path) {
  const ArchiveHeader& h = archive.header;
  const auto grids = h.config.level_grids();
  if (static_cast<Index>(archive.noise.size()) != h.members) throw std::invalid_argument("archive: member count mismatch");
  const std::string header = h.to_json().dump();
  BinaryWriter out(path);
  out.bytes("SDLA", 4);
  out.u32(h.version);
  out.u64(header.size());
  out.bytes(header.data(), header.size());
  out.begin_hash();
  for (const auto& member : archive.noise) {
    if (static_cast<Index>(member.size()) != h.n_steps) throw std::invalid_argument("archive: incomplete noise records");
    for (const StepNoise& s : member)
      for (std::size_t l = 0; l < 3; ++l) {
        const LatentTensor& z = s.latents[l];
        if (z.size() != latent_values(grids[l], h.config) || z.gain != 1.0f) {
          throw std::invalid_argument("archive: latents must be unscaled and match the level grid");
        }
        out.floats(z.values.data(), static_cast<std::size_t>(z.size()));
        const RngKey& k = s.pixel_keys[l];
        out.u64(k.global_seed);
        out.u64(k.member_id);
        out.u64(k.layer_id);
        out.u64(k.step_index);
        out.u64(static_cast<std::uint64_t>(k.role));
      }
  }
  out.u64(out.end_hash());
  out.close();
}

LatentArchive archive_read(const std::filesystem::path& path) {
  BinaryReader in(path);
  if (in.string(4) != "SDLA") throw FormatError(path.string() + ": not a latent archive");
  const std::uint32_t version = in.u32();
  if (version != kArchiveVersion) {
    throw FormatError(path.string() + ": unsupported archive version " + std::to_string(version));
  }
  const std::uint64_t header_len = in.u64();
  if (header_len > (std::uint64_t{1} << 30)) throw FormatError(path.string() + ": implausible header length");
  LatentArchive a;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in.string(header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": header is not valid JSON: " + e.what());
  }
  a.header = ArchiveHeader::from_json(j);
  const ArchiveHeader& h = a.header;
  const auto grids = h.config.level_grids();
  const bool spatial = h.config.latent_mode == LatentMode::spatial;
  in.begin_hash();
  a.noise.resize(static_cast<std::size_t>(h.members));
  for (auto& member : a.noise) {
    member.resize(static_cast<std::size_t>(h.n_steps));
    for (StepNoise& s : member)
      for (std::size_t l = 0; l < 3; ++l) {
        LatentTensor& z = s.latents[l];
        z.level = static_cast<int>(l + 1);
        z.height = spatial ? grids[l].height : 1;
        z.width = spatial ? grids[l].width : 1;
        z.depth = h.config.latent_depth;
        z.values.resize(z.size());
        in.floats(z.values.data(), static_cast<std::size_t>(z.size()));
        RngKey& k = s.pixel_keys[l];
        k.global_seed = in.u64();
        k.member_id = static_cast<std::uint32_t>(in.u64());
        k.layer_id = static_cast<std::uint32_t>(in.u64());
        k.step_index = static_cast<std::uint32_t>(in.u64());
        const std::uint64_t role = in.u64();
        if (role > static_cast<std::uint64_t>(RngRole::init_perturbation)) throw FormatError(path.string() + ": bad key role");
        k.role = static_cast<RngRole>(role);
      }
  }
  const std::uint64_t computed = in.end_hash();
  if (in.u64() != computed) throw FormatError(path.string() + ": payload checksum mismatch");
  if (!in.at_end()) throw FormatError(path.string() + ": trailing bytes after checksum");
  return a;
}

}  // namespace sdl
