#include "sdl/binary_io.hpp"
#include "sdl/synthgen.hpp"

#include <cmath>
#include <thread>

namespace sdl::synth {

namespace {
constexpr std::uint32_t kDatasetVersion = 1;
}

Dataset::Dataset(DatasetHeader header, std::vector<float> data) : header_(std::move(header)), data_(std::move(data)) {
  const Index g = header_.config.grid;
  if (static_cast<Index>(data_.size()) != header_.states * variables() * g * g) {
    throw std::invalid_argument("Dataset: data size does not match header");
  }
}

void Dataset::save(const std::filesystem::path& path) const {
  nlohmann::json h;
  h["config"] = to_json(header_.config);
  h["seed"] = header_.seed;
  h["trajectory"] = header_.trajectory;
  h["stride"] = header_.config.stride;
  h["first_index"] = header_.first_index;
  h["states"] = header_.states;
  h["variables"] = header_.variables;
  h["grid"] = {header_.config.grid, header_.config.grid};
  const std::string text = h.dump();

  BinaryWriter out(path);
  out.bytes("SDLD", 4);
  out.u32(kDatasetVersion);
  out.u64(text.size());
  out.bytes(text.data(), text.size());
  out.begin_hash();
  out.floats(data_.data(), data_.size());
  out.u64(out.end_hash());
  out.close();
}

Dataset Dataset::load(const std::filesystem::path& path) {
  BinaryReader in(path);
  if (in.string(4) != "SDLD") throw FormatError(path.string() + ": not a dataset file");
  const std::uint32_t version = in.u32();
  if (version != kDatasetVersion) throw FormatError(path.string() + ": unsupported dataset version " + std::to_string(version));
  const auto h = nlohmann::json::parse(in.string(static_cast<std::size_t>(in.u64())));
  DatasetHeader header;
  header.config = system_config_from_json(h.at("config"));
  header.seed = h.at("seed").get<std::uint64_t>();
  header.trajectory = h.at("trajectory").get<std::uint32_t>();
  header.first_index = h.at("first_index").get<Index>();
  header.states = h.at("states").get<Index>();
  header.variables = h.at("variables").get<std::vector<std::string>>();
  const Index g = header.config.grid;
  std::vector<float> data(static_cast<std::size_t>(header.states * static_cast<Index>(header.variables.size()) * g * g));
  in.begin_hash();
  in.floats(data.data(), data.size());
  const std::uint64_t computed = in.end_hash();
  if (in.u64() != computed) throw FormatError(path.string() + ": payload checksum mismatch");
  return Dataset(std::move(header), std::move(data));
}

TensorF Dataset::state(Index t) const {
  if (t < 0 || t >= header_.states) throw std::out_of_range("Dataset::state: index " + std::to_string(t));
  const Index g = grid();
  const Index item = variables() * g * g;
  TensorF out(Shape{1, variables(), g, g});
  std::copy_n(data_.data() + t * item, item, out.data());
  return out;
}

TensorF Dataset::states(std::span<const Index> indices) const {
  const Index g = grid();
  const Index item = variables() * g * g;
  TensorF out(Shape{static_cast<Index>(indices.size()), variables(), g, g});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Index t = indices[b];
    if (t < 0 || t >= header_.states) throw std::out_of_range("Dataset::states: index " + std::to_string(t));
    std::copy_n(data_.data() + t * item, item, out.data() + static_cast<Index>(b) * item);
  }
  return out;
}

Dataset Dataset::slice(Index first, Index count) const {
  if (first < 0 || count < 0 || first + count > header_.states) throw std::out_of_range("Dataset::slice");
  const Index item = variables() * grid() * grid();
  DatasetHeader h = header_;
  h.first_index += first;
  h.states = count;
  return Dataset(std::move(h), std::vector<float>(data_.begin() + first * item, data_.begin() + (first + count) * item));
}

SplitSizes make_splits(Index records, const std::array<double, 3>& fractions) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("make_splits: fractions must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("make_splits: fractions must sum to 1");
  SplitSizes s;
  s.val = static_cast<Index>(std::floor(fractions[1] * static_cast<double>(records) + 1e-9));
  s.test = static_cast<Index>(std::floor(fractions[2] * static_cast<double>(records) + 1e-9));
  s.train = records - s.val - s.test;
  if ((fractions[0] > 0 && s.train < 1) || (fractions[1] > 0 && s.val < 1) || (fractions[2] > 0 && s.test < 1)) {
    throw std::invalid_argument("make_splits: too few records (" + std::to_string(records) + ")");
  }
  return s;
}

nlohmann::json generate_dataset(const GenerateOptions& options, const std::filesystem::path& out,
                                const std::function<void(const std::string&)>& log) {
  options.config.validate();
  std::filesystem::create_directories(out);
  struct Job {
    std::string name;
    std::uint32_t trajectory;
    Index samples;
  };
  const std::vector<Job> jobs{{"train", 0, options.sizes.train}, {"val", 1, options.sizes.val}, {"test", 2, options.sizes.test}};
  std::vector<std::string> errors(jobs.size());
  std::mutex log_mutex;

  auto run = [&](std::size_t j) {
    try {
      const Job& job = jobs[j];
      const Index g = options.config.grid;
      const Index item = 3 * g * g;
      const Index states = job.samples + 1;
      std::vector<float> data(static_cast<std::size_t>(states * item));
      integrate(options.config, options.seed, job.trajectory, states, [&](Index t, const TensorF& s) {
        std::copy_n(s.data(), item, data.data() + t * item);
        if (log && (t + 1) % 1000 == 0) {
          std::lock_guard lock(log_mutex);
          log(job.name + ": " + std::to_string(t + 1) + "/" + std::to_string(states) + " states");
        }
      });
      DatasetHeader h;
      h.config = options.config;
      h.seed = options.seed;
      h.trajectory = job.trajectory;
      h.states = states;
      Dataset(std::move(h), std::move(data)).save(out / (job.name + ".sdld"));
    } catch (const std::exception& e) {
      errors[j] = e.what();
    }
  };
  const unsigned workers = std::max(1u, options.workers);
  if (workers == 1) {
    for (std::size_t j = 0; j < jobs.size(); ++j) run(j);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t j = w; j < jobs.size(); j += workers) run(j);
      });
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (!e.empty()) throw SolverError(e);

  nlohmann::json manifest;
  manifest["seed"] = options.seed;
  manifest["config"] = to_json(options.config);
  manifest["variables"] = {"vorticity", "tracer", "speed"};
  for (const Job& job : jobs) {
    const auto file = out / (job.name + ".sdld");
    manifest["splits"][job.name] = {{"file", job.name + ".sdld"},
                                    {"trajectory", job.trajectory},
                                    {"samples", job.samples},
                                    {"states", job.samples + 1},
                                    {"sha256", file_sha256(file)}};
  }
  std::ofstream(out / "manifest.json") << manifest.dump(2) << '\n';
  return manifest;
}

}  // namespace sdl::synth
