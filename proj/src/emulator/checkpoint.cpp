#include "sdl/emulator.hpp"
#include "sdl/binary_io.hpp"

#include <json.hpp>

#include <fstream>

namespace sdl {

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

nlohmann::json config_to_json(const ModelConfig& c) {
  return {
      {"grid", c.grid},
      {"widths", c.widths},
      {"variables", c.variables},
      {"variable_names", c.variable_names},
      {"latent_depth", c.latent_depth},
      {"alpha", c.alpha},
      {"latent_mode", c.latent_mode == LatentMode::spatial ? "spatial" : "broadcast"},
      {"placement", c.placement == InjectionPlacement::bottleneck ? "bottleneck" : "after_upsample"},
      {"stochastic", c.stochastic},
      {"init_seed", c.init_seed},
  };
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.grid = j.at("grid").get<Index>();
  c.widths = j.at("widths").get<std::array<Index, 4>>();
  c.variables = j.at("variables").get<Index>();
  c.variable_names = j.at("variable_names").get<std::vector<std::string>>();
  c.latent_depth = j.at("latent_depth").get<Index>();
  c.alpha = j.at("alpha").get<double>();
  c.latent_mode = j.at("latent_mode").get<std::string>() == "spatial" ? LatentMode::spatial : LatentMode::broadcast;
  c.placement = j.at("placement").get<std::string>() == "bottleneck" ? InjectionPlacement::bottleneck
                                                                      : InjectionPlacement::after_upsample;
  c.stochastic = j.at("stochastic").get<bool>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

}  // namespace

nlohmann::json model_config_json(const ModelConfig& c) { return config_to_json(c); }
ModelConfig model_config_from_json(const nlohmann::json& j) { return config_from_json(j); }

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  nlohmann::json header;
  header["config"] = config_to_json(state.model.config());
  header["normalizer"] = {{"mean", state.normalizer.mean}, {"stddev", state.normalizer.stddev}};
  nlohmann::json params = nlohmann::json::array();
  for (const auto* p : state.model.parameters()) {
    const Shape& s = p->value.shape();
    params.push_back({{"name", p->name}, {"shape", {s.n, s.c, s.h, s.w}}});
  }
  header["parameters"] = params;

  BinaryWriter out(path);
  out.bytes("SDLM", 4);
  out.u32(kCheckpointVersion);
  const std::string text = header.dump();
  out.u64(text.size());
  out.bytes(text.data(), text.size());
  for (const auto* p : state.model.parameters()) out.floats(p->value.data(), static_cast<std::size_t>(p->value.size()));
  out.close();
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  BinaryReader in(path);
  if (in.string(4) != "SDLM") throw FormatError(path.string() + ": not a model checkpoint");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto header = nlohmann::json::parse(in.string(static_cast<std::size_t>(in.u64())));
  ModelState state{Emulator<float>(config_from_json(header.at("config"))), Normalizer{}};
  state.normalizer.mean = header.at("normalizer").at("mean").get<std::vector<double>>();
  state.normalizer.stddev = header.at("normalizer").at("stddev").get<std::vector<double>>();
  auto params = state.model.parameters();
  const auto& listed = header.at("parameters");
  if (listed.size() != params.size()) throw FormatError(path.string() + ": parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto shape = listed[i].at("shape").get<std::array<Index, 4>>();
    const Shape s{shape[0], shape[1], shape[2], shape[3]};
    if (listed[i].at("name").get<std::string>() != params[i]->name || !(s == params[i]->value.shape())) {
      throw FormatError(path.string() + ": parameter layout mismatch at " + params[i]->name);
    }
    in.floats(params[i]->value.data(), static_cast<std::size_t>(s.size()));
  }
  return state;
}

}  // namespace sdl
