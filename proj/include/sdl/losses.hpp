#pragma once

#include "sdl/graph.hpp"

#include <span>

namespace sdl {

/// Per-row weights with w_j >= 0 and sum_j w_j == number of rows.
struct SpatialWeights {
  Eigen::ArrayXd w;

  static SpatialWeights uniform(Index rows) { return {Eigen::ArrayXd::Ones(rows)}; }
  Index rows() const { return w.size(); }
  template <typename Scalar>
  Eigen::Array<Scalar, Eigen::Dynamic, 1> as() const {
    return w.cast<Scalar>();
  }
};

/// Normalized cosine-latitude weights, w_j = N cos(phi_j) / sum_k cos(phi_k).
SpatialWeights cosine_weights(std::span<const double> latitudes_deg);

struct LossConfig {
  double alpha_loss = 0.95;
  Index members = 10;
  SpatialWeights weights;

  /// (1 - alpha_loss) / members
  double epsilon() const;
  void validate() const;
};

/// Almost-fair CRPS of one ensemble against one target:
///   (1/M) sum_j |x_j - y| - (1 - eps) / (2 M (M - 1)) sum_j sum_k |x_j - x_k|
/// with eps = (1 - alpha_loss) / M and the pair term taken as 0 when M = 1.
double afcrps(std::span<const double> members, double target, double alpha_loss);

/// Subgradient of afcrps w.r.t. each member; sign(0) is taken as 0.
void afcrps_gradient(std::span<const double> members, double target, double alpha_loss, std::span<double> grad);

/// Closed-form CRPS of N(mu, sigma^2) against y.
double gaussian_crps(double mu, double sigma, double y);

/// Row-weighted mean of pointwise afcrps. ensemble: (M, V, H, W); target: (1, V, H, W).
template <typename Scalar>
double afcrps_field(const Tensor<Scalar>& ensemble, const Tensor<Scalar>& target, const SpatialWeights& weights,
                    double alpha_loss);

/// Differentiable afcrps over grouped batches. ensemble: (B * M, V, H, W) with
/// item index b * M + m; target: (B, V, H, W). Returns the row-weighted mean
/// over B, V, H, W.
template <typename Scalar>
typename Graph<Scalar>::Var afcrps_field(Graph<Scalar>& graph, typename Graph<Scalar>::Var ensemble,
                                         const Tensor<Scalar>& target, Index members, const SpatialWeights& weights,
                                         double alpha_loss);

/// Row-weighted mean squared error.
template <typename Scalar>
typename Graph<Scalar>::Var weighted_mse(Graph<Scalar>& graph, typename Graph<Scalar>::Var prediction,
                                         typename Graph<Scalar>::Var target, const SpatialWeights& weights);

template <typename Scalar>
double weighted_mse(const Tensor<Scalar>& prediction, const Tensor<Scalar>& target, const SpatialWeights& weights);

/// Row-weighted mean absolute error.
template <typename Scalar>
double weighted_mae(const Tensor<Scalar>& prediction, const Tensor<Scalar>& target, const SpatialWeights& weights);

}  // namespace sdl
