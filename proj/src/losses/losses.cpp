#include "sdl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace sdl {

SpatialWeights cosine_weights(std::span<const double> latitudes_deg) {
  const auto n = static_cast<Index>(latitudes_deg.size());
  if (n == 0) throw std::invalid_argument("cosine_weights: no rows");
  Eigen::ArrayXd c(n);
  for (Index j = 0; j < n; ++j) {
    const double phi = latitudes_deg[static_cast<std::size_t>(j)];
    if (!(std::abs(phi) < 90.0)) throw std::invalid_argument("cosine_weights: rows must satisfy |lat| < 90");
    c[j] = std::cos(phi * std::numbers::pi / 180.0);
  }
  return {c * (static_cast<double>(n) / c.sum())};
}

double LossConfig::epsilon() const { return (1.0 - alpha_loss) / static_cast<double>(members); }

void LossConfig::validate() const {
  if (!(alpha_loss > 0.0 && alpha_loss <= 1.0)) throw std::invalid_argument("LossConfig: alpha_loss must lie in (0, 1]");
  if (members < 1) throw std::invalid_argument("LossConfig: members must be >= 1");
  if ((weights.w < 0.0).any()) throw std::invalid_argument("LossConfig: negative spatial weight");
}

double afcrps(std::span<const double> x, double y, double alpha_loss) {
  const std::size_t m = x.size();
  if (m == 0) throw std::invalid_argument("afcrps: empty ensemble");
  double skill = 0.0;
  for (double v : x) skill += std::abs(v - y);
  skill /= static_cast<double>(m);
  if (m == 1) return skill;
  // Ordered-pair sum via sorted ranks: sum_{j,k} |x_j - x_k| = 2 sum_i x_(i) (2i - m + 1).
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  double pairs = 0.0;
  for (std::size_t i = 0; i < m; ++i) pairs += sorted[i] * (2.0 * static_cast<double>(i) - static_cast<double>(m) + 1.0);
  pairs *= 2.0;
  const double md = static_cast<double>(m);
  const double eps = (1.0 - alpha_loss) / md;
  return skill - (1.0 - eps) / (2.0 * md * (md - 1.0)) * pairs;
}

void afcrps_gradient(std::span<const double> x, double y, double alpha_loss, std::span<double> grad) {
  const std::size_t m = x.size();
  if (m == 0) throw std::invalid_argument("afcrps_gradient: empty ensemble");
  auto sign = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
  const double md = static_cast<double>(m);
  const double spread_coef = m > 1 ? (1.0 - (1.0 - alpha_loss) / md) / (md * (md - 1.0)) : 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t k = 0; k < m; ++k) s += sign(x[j] - x[k]);
    grad[j] = sign(x[j] - y) / md - spread_coef * s;
  }
}

double gaussian_crps(double mu, double sigma, double y) {
  const double z = (y - mu) / sigma;
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  return sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::sqrt(std::numbers::pi));
}

namespace {

template <typename Scalar>
void check_rows(const char* op, const Shape& s, const SpatialWeights& w) {
  if (w.rows() != s.h) {
    throw ShapeError(op, "weights", Shape{1, 1, w.rows(), 1}, "length " + std::to_string(s.h));
  }
}

// Visits every (group, v, h, w) point with its M member values gathered.
template <typename Scalar, typename Fn>
void for_each_point(const Tensor<Scalar>& ens, Index groups, Index members, Fn&& fn) {
  const Shape& s = ens.shape();
  const Index item = s.c * s.h * s.w;
  std::vector<double> vals(static_cast<std::size_t>(members));
  for (Index g = 0; g < groups; ++g)
    for (Index i = 0; i < item; ++i) {
      for (Index m = 0; m < members; ++m) vals[static_cast<std::size_t>(m)] = ens[(g * members + m) * item + i];
      fn(g, i, vals);
    }
}

}  // namespace

template <typename Scalar>
double afcrps_field(const Tensor<Scalar>& ensemble, const Tensor<Scalar>& target, const SpatialWeights& weights,
                    double alpha_loss) {
  const Shape& es = ensemble.shape();
  const Shape& ts = target.shape();
  if (ts.n != 1 || ts.c != es.c || ts.h != es.h || ts.w != es.w) {
    throw ShapeError("afcrps_field", "target", ts, "(1," + std::to_string(es.c) + "," + std::to_string(es.h) + "," +
                                                       std::to_string(es.w) + ")");
  }
  check_rows<Scalar>("afcrps_field", es, weights);
  double acc = 0.0;
  for_each_point(ensemble, 1, es.n, [&](Index, Index i, const std::vector<double>& vals) {
    const Index row = (i / es.w) % es.h;
    acc += weights.w[row] * afcrps(vals, static_cast<double>(target[i]), alpha_loss);
  });
  return acc / static_cast<double>(ts.size());
}

template <typename Scalar>
typename Graph<Scalar>::Var afcrps_field(Graph<Scalar>& graph, typename Graph<Scalar>::Var ensemble,
                                         const Tensor<Scalar>& target, Index members, const SpatialWeights& weights,
                                         double alpha_loss) {
  const Shape es = graph.value(ensemble).shape();
  const Shape& ts = target.shape();
  if (members < 1 || es.n != ts.n * members || ts.c != es.c || ts.h != es.h || ts.w != es.w) {
    throw ShapeError("afcrps_field", "ensemble", es,
                     "(" + std::to_string(ts.n) + "*" + std::to_string(members) + "," + std::to_string(ts.c) + "," +
                         std::to_string(ts.h) + "," + std::to_string(ts.w) + ")");
  }
  check_rows<Scalar>("afcrps_field", es, weights);
  const Index item = ts.c * ts.h * ts.w;
  const double norm = 1.0 / static_cast<double>(ts.size());
  const Tensor<Scalar>& ens = graph.value(ensemble);
  double acc = 0.0;
  for_each_point(ens, ts.n, members, [&](Index g, Index i, const std::vector<double>& vals) {
    const Index row = (i / ts.w) % ts.h;
    acc += weights.w[row] * afcrps(vals, static_cast<double>(target[g * item + i]), alpha_loss);
  });
  Tensor<Scalar> value(Shape{}, static_cast<Scalar>(acc * norm));

  auto backward = [ens, target, members, weights, alpha_loss, norm, item, ts](const Tensor<Scalar>& out_adj,
                                                                               std::span<Tensor<Scalar>> in_adj) {
    const double seed = static_cast<double>(out_adj[0]) * norm;
    Tensor<Scalar>& gx = in_adj[0];
    std::vector<double> grad(static_cast<std::size_t>(members));
    for_each_point(ens, ts.n, members, [&](Index g, Index i, const std::vector<double>& vals) {
      const Index row = (i / ts.w) % ts.h;
      afcrps_gradient(vals, static_cast<double>(target[g * item + i]), alpha_loss, grad);
      const double scale = seed * weights.w[row];
      for (Index m = 0; m < members; ++m)
        gx[(g * members + m) * item + i] += static_cast<Scalar>(scale * grad[static_cast<std::size_t>(m)]);
    });
  };
  return graph.custom(std::move(value), {ensemble}, std::move(backward), "afcrps_field");
}

template <typename Scalar>
typename Graph<Scalar>::Var weighted_mse(Graph<Scalar>& graph, typename Graph<Scalar>::Var prediction,
                                         typename Graph<Scalar>::Var target, const SpatialWeights& weights) {
  check_rows<Scalar>("weighted_mse", graph.value(prediction).shape(), weights);
  const auto diff = graph.sub(prediction, target);
  const auto rw = weights.as<Scalar>();
  return graph.mean(graph.mul(diff, diff), &rw);
}

template <typename Scalar>
double weighted_mse(const Tensor<Scalar>& prediction, const Tensor<Scalar>& target, const SpatialWeights& weights) {
  if (!(prediction.shape() == target.shape())) throw ShapeError("weighted_mse", "target", target.shape(), prediction.shape().str());
  const Shape& s = prediction.shape();
  check_rows<Scalar>("weighted_mse", s, weights);
  double acc = 0.0;
  for (Index i = 0; i < prediction.size(); ++i) {
    const double d = static_cast<double>(prediction[i]) - static_cast<double>(target[i]);
    acc += weights.w[(i / s.w) % s.h] * d * d;
  }
  return acc / static_cast<double>(s.size());
}

template <typename Scalar>
double weighted_mae(const Tensor<Scalar>& prediction, const Tensor<Scalar>& target, const SpatialWeights& weights) {
  if (!(prediction.shape() == target.shape())) throw ShapeError("weighted_mae", "target", target.shape(), prediction.shape().str());
  const Shape& s = prediction.shape();
  check_rows<Scalar>("weighted_mae", s, weights);
  double acc = 0.0;
  for (Index i = 0; i < prediction.size(); ++i)
    acc += weights.w[(i / s.w) % s.h] * std::abs(static_cast<double>(prediction[i]) - static_cast<double>(target[i]));
  return acc / static_cast<double>(s.size());
}

#define SDL_INSTANTIATE(S)                                                                                       \
  template double afcrps_field<S>(const Tensor<S>&, const Tensor<S>&, const SpatialWeights&, double);            \
  template Graph<S>::Var afcrps_field<S>(Graph<S>&, Graph<S>::Var, const Tensor<S>&, Index,                      \
                                         const SpatialWeights&, double);                                         \
  template Graph<S>::Var weighted_mse<S>(Graph<S>&, Graph<S>::Var, Graph<S>::Var, const SpatialWeights&);        \
  template double weighted_mse<S>(const Tensor<S>&, const Tensor<S>&, const SpatialWeights&);                    \
  template double weighted_mae<S>(const Tensor<S>&, const Tensor<S>&, const SpatialWeights&);

SDL_INSTANTIATE(float)
SDL_INSTANTIATE(double)

}  // namespace sdl
