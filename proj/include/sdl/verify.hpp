#pragma once

#include "sdl/losses.hpp"
#include "sdl/rng.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace sdl {

struct MetricCell {
  std::string variable;
  Index lead = 0;
  std::optional<double> rmse_det;
  double rmse_ens_mean = 0.0;
  double crps = 0.0;
  double spread = 0.0;
  std::optional<double> ssr;  // empty when rmse_ens_mean == 0
  std::vector<std::int64_t> rank_histogram;
  double rank_p_value = 1.0;  // chi-square uniformity
  std::int64_t samples = 0;   // grid points x cases
  std::int64_t rank_samples = 0;
};

struct VerificationReport {
  std::vector<std::string> variables;
  std::vector<Index> leads;
  Index members = 0;
  std::vector<MetricCell> cells;  // variable-major

  const MetricCell& cell(const std::string& variable, Index lead) const;
  /// Throws std::domain_error when the ratio is undefined.
  double ssr(const std::string& variable, Index lead) const;
  nlohmann::json to_json() const;
  static VerificationReport from_json(const nlohmann::json& j);
  /// One row per variable, lead and metric.
  std::string to_csv() const;
};

struct MetricsOptions {
  double alpha_loss = 0.95;
  bool ssr_correction = false;  // multiply SSR by sqrt((M + 1) / M)
  Index rank_stride = 1;        // use every rank_stride-th point in x and y
  RngKey tie_key{0x5244a1e7c0ffeeull, 0, 0, 0, RngRole::init_perturbation};
};

/// Accumulates verification statistics over forecast cases. Each case is one
/// initial condition: member trajectories (T, V, H, W) for leads 1..T and the
/// matching truth.
class MetricsAccumulator {
 public:
  MetricsAccumulator(std::vector<std::string> variables, Index leads, Index members, SpatialWeights weights,
                     MetricsOptions options = {});

  void add(const std::vector<TensorF>& members, const TensorF& truth, const TensorF* deterministic = nullptr);
  VerificationReport finalize() const;
  Index cases() const { return cases_; }

 private:
  struct Sums {
    double wsum = 0, se_mean = 0, se_det = 0, var = 0, crps = 0;
    std::int64_t points = 0, rank_points = 0;
    std::vector<std::int64_t> ranks;
  };
  std::vector<std::string> variables_;
  Index leads_, members_;
  SpatialWeights weights_;
  MetricsOptions options_;
  bool has_det_ = false;
  Index cases_ = 0;
  std::vector<Sums> sums_;
};

/// Single-case convenience: forecasts (M) x (T, V, H, W), truth (T, V, H, W).
VerificationReport ensemble_metrics(const std::vector<TensorF>& forecasts, const TensorF& truth,
                                    const SpatialWeights& weights, double alpha_loss,
                                    const std::vector<std::string>& variables);

/// Rank of the truth among M members per point, ties split uniformly at
/// random. forecasts: M x (V, H, W) fields flattened; returns M + 1 counts.
std::vector<std::int64_t> rank_histogram(const std::vector<std::vector<float>>& members, const std::vector<float>& truth,
                                         const RngKey& tie_key);

/// Chi-square test of uniform bins; returns the upper-tail p-value.
double chi_square_uniform_p(const std::vector<std::int64_t>& counts);

struct Spectrum {
  std::vector<double> energy;  // ring n: n - 1/2 < |k| <= n + 1/2
  double total = 0.0;          // domain-mean kinetic energy

  double centroid() const;
};

/// Kinetic-energy spectrum of (u, v) on a doubly periodic square grid.
Spectrum ke_spectrum(const std::vector<double>& u, const std::vector<double>& v, Index grid, bool periodic = true);
/// Velocity of the flow with vorticity zeta (psi = -zeta / k^2, u = -psi_y, v = psi_x).
void velocity_from_vorticity(const std::vector<double>& zeta, Index grid, std::vector<double>& u,
                             std::vector<double>& v);

}  // namespace sdl
