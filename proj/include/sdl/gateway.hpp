#pragma once

#include "sdl/latents.hpp"
#include "sdl/synthgen.hpp"

#include <json.hpp>

#include <filesystem>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <stdexcept>
#include <string>
#include <vector>

namespace sdl::gateway {

/// Error with an HTTP-style status: 400 bad request, 404 unknown resource,
/// 500 replay or IO failure.
class GatewayError : public std::runtime_error {
 public:
  GatewayError(int status, const std::string& what) : std::runtime_error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

/// One forecast case: an archive and the dataset state it starts from.
struct RunCase {
  std::filesystem::path archive;
  std::string archive_sha256;
  Index index = 0;  // state index of the initial condition in the dataset
};

/// run.json in a run directory. Relative paths resolve against that directory.
struct RunManifest {
  std::string id;
  std::filesystem::path checkpoint;
  std::string checkpoint_sha256;
  std::filesystem::path dataset;
  std::string dataset_sha256;
  std::vector<RunCase> cases;
  nlohmann::json config = nlohmann::json::object();
  std::string created;  // UTC, ISO 8601

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& j);
  static RunManifest load(const std::filesystem::path& run_dir);
  void save(const std::filesystem::path& run_dir) const;
  /// Throws GatewayError(500) when a reference is missing or its checksum differs.
  void validate(const std::filesystem::path& run_dir) const;
};

/// Directories under `root` (depth <= 3) holding a run.json, keyed by run id.
std::map<std::string, std::filesystem::path> discover_runs(const std::filesystem::path& root);

struct FieldRequest {
  Index case_index = 0;
  Index member = 0;
  Index step = 0;
  std::string variable = "vorticity";
  bool stats = false;  // add ensemble mean and std companions at the archived beta
};

struct GenerateRequest {
  Index case_index = 0;
  BetaVector beta{1.0, 1.0, 1.0};
  Index step = -1;  // -1: last step
  std::string variable = "vorticity";
};

struct InterpolateRequest {
  Index case_index = 0;
  Index member_i = 0;
  Index member_j = 1;
  double e = 0.0;
  Index step = -1;
  std::string variable = "vorticity";
  bool interpolate_pixel_noise = false;
};

struct SpectraRequest {
  Index case_index = 0;
  int level = 1;
  std::vector<double> betas{-1.0, 0.0, 1.0, 2.0};
  Index member = 0;
  Index lead = 1;
};

/// Request parsers shared by the CLI and the HTTP body handlers. Throw
/// GatewayError(400) on malformed input.
GenerateRequest generate_request_from_json(const nlohmann::json& j);
InterpolateRequest interpolate_request_from_json(const nlohmann::json& j);
SpectraRequest spectra_request_from_json(const nlohmann::json& j);
BetaVector parse_beta(const std::string& text);

/// Serialized form of every payload; CLI files and HTTP bodies both use it.
std::string payload_text(const nlohmann::json& payload);

/// Shared engine behind the CLI and the HTTP service. Reads runs, never
/// writes them. Replays are cached by (run, case, beta, member) and run at
/// most `workers` at a time.
class Engine {
 public:
  /// `root` may itself be a run directory.
  explicit Engine(std::filesystem::path root, unsigned workers = 2, std::size_t cache_capacity = 256);
  ~Engine();

  nlohmann::json runs();
  nlohmann::json field(const std::string& run, const FieldRequest& request);
  nlohmann::json generate(const std::string& run, const GenerateRequest& request);
  nlohmann::json interpolate(const std::string& run, const InterpolateRequest& request);
  nlohmann::json spectra(const std::string& run, const SpectraRequest& request);

  std::size_t cache_size() const;
  std::size_t replays_computed() const;

 private:
  struct Run;
  using TrajectoryPtr = std::shared_ptr<const MemberTrajectory>;
  struct CacheKey {
    std::string run;
    Index case_index;
    BetaVector beta;
    Index member;
    auto operator<=>(const CacheKey&) const = default;
  };

  Run& open(const std::string& run);
  TrajectoryPtr member(Run& r, Index case_index, const std::optional<BetaVector>& beta, Index member);
  std::vector<TrajectoryPtr> members(Run& r, Index case_index, const std::optional<BetaVector>& beta);

  std::filesystem::path root_;
  std::map<std::string, std::filesystem::path> known_;
  std::map<std::string, std::unique_ptr<Run>> open_;
  mutable std::mutex runs_mutex_;

  std::map<CacheKey, std::shared_future<TrajectoryPtr>> cache_;
  std::vector<CacheKey> cache_order_;
  std::size_t capacity_;
  std::size_t computed_ = 0;
  mutable std::mutex cache_mutex_;
  std::counting_semaphore<64> slots_;
  unsigned workers_;
};

/// Binds the HTTP routes to `engine` and blocks until stop() is called on the
/// returned server from another thread.
class Server {
 public:
  explicit Server(Engine& engine);
  ~Server();
  /// Binds and serves; returns false if binding fails.
  bool listen(const std::string& host, int port);
  /// Binds to a free port and returns it, serving on a background thread.
  int start_background(const std::string& host = "127.0.0.1");
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace sdl::gateway
