#include "doctest.h"
#include "fd_oracle.hpp"

#include "sdl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

using namespace sdl;
using sdl::testing::numeric_gradient;
using sdl::testing::random_tensor;
using sdl::testing::relative_error;

namespace {

// Brute force over ordered pairs.
double afcrps_oracle(const std::vector<double>& x, double y, double alpha) {
  const double m = static_cast<double>(x.size());
  double a = 0.0, b = 0.0;
  for (double xi : x) a += std::abs(xi - y);
  for (double xi : x)
    for (double xj : x) b += std::abs(xi - xj);
  if (x.size() == 1) return a / m;
  const double eps = (1.0 - alpha) / m;
  return a / m - (1.0 - eps) / (2.0 * m * (m - 1.0)) * b;
}

double min_gap(std::vector<double> x, double y) {
  x.push_back(y);
  std::sort(x.begin(), x.end());
  double g = 1e300;
  for (std::size_t i = 1; i < x.size(); ++i) g = std::min(g, x[i] - x[i - 1]);
  return g;
}

}  // namespace

TEST_CASE("afcrps examples") {
  CHECK(afcrps(std::vector<double>{1, 1}, 1, 0.95) == 0.0);
  CHECK(afcrps(std::vector<double>{0, 2}, 1, 0.95) == doctest::Approx(0.025).epsilon(1e-14));
  CHECK(afcrps(std::vector<double>{3.5}, 1, 0.95) == 2.5);
  CHECK_THROWS_AS(afcrps(std::vector<double>{}, 1, 0.95), std::invalid_argument);
}

TEST_CASE("degeneracy guard") {
  for (double y : {-2.0, 0.0, 1.3})
    for (double d : {-3.0, -0.5, 0.0, 0.25, 1.0, 4.0}) {
      const std::vector<double> x{y, y + d};
      CHECK(std::abs(afcrps(x, y, 1.0)) <= 1e-12 * std::max(1.0, std::abs(d)));
      CHECK(std::abs(afcrps(x, y, 0.95) - 0.0125 * std::abs(d)) <= 1e-12 * std::max(1.0, std::abs(d)));
    }
}

TEST_CASE("afcrps matches the brute-force oracle") {
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<int> msize(2, 12);
  std::uniform_real_distribution<double> val(-5.0, 5.0), alpha(0.5, 1.0);
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<double> x(static_cast<std::size_t>(msize(rng)));
    for (double& v : x) v = val(rng);
    const double y = val(rng);
    const double a = alpha(rng);
    const double ref = afcrps_oracle(x, y, a);
    CHECK(std::abs(afcrps(x, y, a) - ref) <= 1e-12 * std::max(std::abs(ref), 1e-300));
  }
}

TEST_CASE("afcrps invariances") {
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> val(-5.0, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(7);
    for (double& v : x) v = std::ldexp(std::round(std::ldexp(val(rng), 20)), -20);
    const double y = std::ldexp(std::round(std::ldexp(val(rng), 20)), -20);
    // power-of-two shifts and scales keep the arithmetic exact
    std::vector<double> shifted = x, scaled = x;
    for (double& v : shifted) v += 8.0;
    for (double& v : scaled) v *= 4.0;
    CHECK(afcrps(shifted, y + 8.0, 0.95) == doctest::Approx(afcrps(x, y, 0.95)).epsilon(1e-13));
    CHECK(afcrps(scaled, 4.0 * y, 0.95) == doctest::Approx(4.0 * afcrps(x, y, 0.95)).epsilon(1e-13));
  }
}

TEST_CASE("afcrps is nonnegative for M >= 2") {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> msize(2, 12);
  std::uniform_real_distribution<double> val(-5.0, 5.0), alpha(1e-3, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 1000000; ++trial) {
    std::vector<double> x(static_cast<std::size_t>(msize(rng)));
    for (double& v : x) v = val(rng);
    worst = std::min(worst, afcrps(x, val(rng), alpha(rng)));
  }
  CHECK(worst >= -1e-12);
}

TEST_CASE("fair limit matches the Gaussian closed form") {
  // E over y ~ N(0,1) of CRPS(N(0,1), y) is 1/sqrt(pi).
  const double expected = 1.0 / std::sqrt(std::numbers::pi);
  CHECK(gaussian_crps(0.0, 1.0, 0.0) == doctest::Approx((std::numbers::sqrt2 - 1.0) / std::sqrt(std::numbers::pi)));

  std::mt19937_64 rng(24);
  std::normal_distribution<double> n01;
  const int trials = 10000;
  std::vector<double> x(100);
  double sum = 0.0, sum2 = 0.0;
  for (int t = 0; t < trials; ++t) {
    for (double& v : x) v = n01(rng);
    const double s = afcrps(x, n01(rng), 1.0);
    sum += s;
    sum2 += s * s;
  }
  const double mean = sum / trials;
  const double se = std::sqrt((sum2 / trials - mean * mean) / (trials - 1));
  CHECK(std::abs(mean - expected) < 3.0 * se);
}

TEST_CASE("afcrps gradient matches finite differences away from ties") {
  std::mt19937_64 rng(25);
  std::uniform_int_distribution<int> msize(2, 12);
  std::uniform_real_distribution<double> val(-5.0, 5.0);
  int done = 0;
  while (done < 20) {
    std::vector<double> x(static_cast<std::size_t>(msize(rng)));
    for (double& v : x) v = val(rng);
    const double y = val(rng);
    if (min_gap(x, y) < 1e-3) continue;
    std::vector<double> g(x.size());
    afcrps_gradient(x, y, 0.95, g);
    TensorD analytic(Shape{1, 1, 1, static_cast<Index>(x.size())});
    for (std::size_t i = 0; i < x.size(); ++i) analytic[static_cast<Index>(i)] = g[i];
    TensorD args(analytic.shape());
    for (std::size_t i = 0; i < x.size(); ++i) args[static_cast<Index>(i)] = x[i];
    auto f = [&](const std::vector<TensorD>& a) {
      return afcrps(std::span<const double>(a[0].data(), static_cast<std::size_t>(a[0].size())), y, 0.95);
    };
    CHECK(relative_error(analytic, numeric_gradient(f, {args}, 0)) < 1e-5);
    ++done;
  }
}

TEST_CASE("three-member afcrps backward through the graph") {
  std::mt19937_64 rng(26);
  const auto w = SpatialWeights{Eigen::ArrayXd::LinSpaced(4, 0.5, 1.5)};
  int done = 0;
  while (done < 20) {
    const TensorD ens = random_tensor(Shape{2 * 3, 2, 4, 3}, rng, -2.0, 2.0);
    const TensorD target = random_tensor(Shape{2, 2, 4, 3}, rng, -2.0, 2.0);
    bool ties = false;
    for (Index g = 0; g < 2; ++g)
      for (Index i = 0; i < 24; ++i) {
        std::vector<double> v;
        for (Index m = 0; m < 3; ++m) v.push_back(ens[(g * 3 + m) * 24 + i]);
        ties = ties || min_gap(v, target[g * 24 + i]) < 1e-3;
      }
    if (ties) continue;
    Graph<double> g;
    auto x = g.input(ens, true);
    g.backward(afcrps_field(g, x, target, 3, w, 0.95));
    auto f = [&](const std::vector<TensorD>& a) {
      Graph<double> h;
      return h.item(afcrps_field(h, h.constant(a[0]), target, 3, w, 0.95));
    };
    CHECK(relative_error(g.grad(x), numeric_gradient(f, {ens}, 0)) < 1e-5);
    ++done;
  }
}

TEST_CASE("afcrps_field weighting") {
  SUBCASE("single point equals scalar afcrps") {
    TensorD ens(Shape{3, 1, 1, 1});
    ens[0] = 0.1, ens[1] = -0.7, ens[2] = 1.9;
    const TensorD y(Shape{1, 1, 1, 1}, 0.3);
    CHECK(afcrps_field(ens, y, SpatialWeights::uniform(1), 0.95) ==
          doctest::Approx(afcrps(std::vector<double>{0.1, -0.7, 1.9}, 0.3, 0.95)).epsilon(1e-15));
  }
  SUBCASE("row weights (2, 0)") {
    TensorD ens(Shape{2, 1, 2, 1});
    ens(0, 0, 0, 0) = 0.0, ens(1, 0, 0, 0) = 2.0;  // row 0
    ens(0, 0, 1, 0) = 5.0, ens(1, 0, 1, 0) = 9.0;  // row 1
    TensorD y(Shape{1, 1, 2, 1});
    y[0] = 1.0, y[1] = -4.0;
    const double row0 = afcrps(std::vector<double>{0.0, 2.0}, 1.0, 0.95);
    CHECK(afcrps_field(ens, y, SpatialWeights{Eigen::Array2d(2.0, 0.0)}, 0.95) ==
          doctest::Approx(2.0 * row0 / 2.0).epsilon(1e-15));
  }
  SUBCASE("uniform weights give the plain mean") {
    std::mt19937_64 rng(27);
    const TensorD ens = random_tensor(Shape{4, 2, 3, 5}, rng);
    const TensorD y = random_tensor(Shape{1, 2, 3, 5}, rng);
    double plain = 0.0;
    for (Index i = 0; i < 30; ++i) {
      std::vector<double> v;
      for (Index m = 0; m < 4; ++m) v.push_back(ens[m * 30 + i]);
      plain += afcrps(v, y[i], 0.95);
    }
    CHECK(afcrps_field(ens, y, SpatialWeights::uniform(3), 0.95) == doctest::Approx(plain / 30.0).epsilon(1e-13));
  }
  SUBCASE("shape mismatch") {
    CHECK_THROWS_AS(afcrps_field(TensorD(Shape{2, 1, 2, 2}), TensorD(Shape{1, 1, 2, 3}), SpatialWeights::uniform(2), 0.95),
                    ShapeError);
    CHECK_THROWS_AS(afcrps_field(TensorD(Shape{2, 1, 2, 2}), TensorD(Shape{1, 1, 2, 2}), SpatialWeights::uniform(3), 0.95),
                    ShapeError);
  }
}

TEST_CASE("weighted_mse") {
  std::mt19937_64 rng(28);
  const TensorD p = random_tensor(Shape{1, 1, 4, 4}, rng);
  CHECK(weighted_mse(p, p, SpatialWeights::uniform(4)) == 0.0);
  CHECK(weighted_mse(TensorD(Shape{2, 3, 4, 4}, 1.0), TensorD(Shape{2, 3, 4, 4}), SpatialWeights::uniform(4)) == 1.0);

  const TensorD t = random_tensor(Shape{1, 1, 4, 4}, rng);
  const SpatialWeights w{Eigen::Array4d(0.4, 1.2, 1.6, 0.8)};
  double ref = 0.0;
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) ref += w.w[i] * std::pow(p(0, 0, i, j) - t(0, 0, i, j), 2);
  ref /= 16.0;
  CHECK(std::abs(weighted_mse(p, t, w) - ref) <= 1e-12 * ref);

  Graph<double> g;
  CHECK(std::abs(g.item(weighted_mse(g, g.constant(p), g.constant(t), w)) - ref) <= 1e-12 * ref);
  CHECK_THROWS_AS(weighted_mse(p, TensorD(Shape{1, 1, 4, 5}), w), ShapeError);
}

TEST_CASE("cosine_weights") {
  const auto sym = cosine_weights(std::vector<double>{-45.0, 45.0});
  CHECK(sym.w[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(sym.w[1] == doctest::Approx(1.0).epsilon(1e-15));
  const auto w = cosine_weights(std::vector<double>{0.0, 60.0});
  CHECK(w.w[0] == doctest::Approx(4.0 / 3.0).epsilon(1e-14));
  CHECK(w.w[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  std::vector<double> lats;
  for (int j = 0; j < 37; ++j) lats.push_back(-87.5 + 175.0 * j / 36.0);
  CHECK(std::abs(cosine_weights(lats).w.sum() - 37.0) < 1e-12);
  CHECK_THROWS_AS(cosine_weights(std::vector<double>{0.0, 90.0}), std::invalid_argument);
}

TEST_CASE("LossConfig epsilon") {
  LossConfig c;
  CHECK(c.epsilon() == doctest::Approx(0.005));
  c.alpha_loss = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
