#include "sdl/verify.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <mutex>
#include <stdexcept>

namespace sdl {

namespace {

using cplx = std::complex<double>;

std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

// Unnormalized forward (sign = FFTW_FORWARD) or backward 2-D DFT of a square grid.
std::vector<cplx> dft2(const std::vector<cplx>& in, Index n, int sign) {
  const auto count = static_cast<std::size_t>(n * n);
  auto* a = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * count));
  auto* b = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * count));
  fftw_plan plan;
  {
    std::lock_guard lock(planner_mutex());
    plan = fftw_plan_dft_2d(static_cast<int>(n), static_cast<int>(n), a, b, sign, FFTW_ESTIMATE);
  }
  for (std::size_t i = 0; i < count; ++i) a[i][0] = in[i].real(), a[i][1] = in[i].imag();
  fftw_execute(plan);
  std::vector<cplx> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = {b[i][0], b[i][1]};
  {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(a);
  fftw_free(b);
  return out;
}

double wavenumber(Index i, Index n) { return static_cast<double>(i <= n / 2 ? i : i - n); }

void check_grid(const char* op, std::size_t size, Index grid) {
  if (grid < 1 || size != static_cast<std::size_t>(grid * grid)) {
    throw std::invalid_argument(std::string(op) + ": field size does not match a " + std::to_string(grid) + "^2 grid");
  }
}

}  // namespace

double Spectrum::centroid() const {
  double num = 0.0, den = 0.0;
  for (std::size_t n = 0; n < energy.size(); ++n) num += static_cast<double>(n) * energy[n], den += energy[n];
  if (den <= 0.0) throw std::domain_error("Spectrum::centroid: zero energy");
  return num / den;
}

Spectrum ke_spectrum(const std::vector<double>& u, const std::vector<double>& v, Index grid, bool periodic) {
  if (!periodic) throw std::invalid_argument("ke_spectrum: requires a doubly periodic grid");
  check_grid("ke_spectrum", u.size(), grid);
  check_grid("ke_spectrum", v.size(), grid);
  const std::vector<cplx> uh = dft2(std::vector<cplx>(u.begin(), u.end()), grid, FFTW_FORWARD);
  const std::vector<cplx> vh = dft2(std::vector<cplx>(v.begin(), v.end()), grid, FFTW_FORWARD);
  const double n2 = static_cast<double>(grid * grid);
  // Largest ring reached by the grid corners.
  const auto max_ring = static_cast<std::size_t>(std::ceil(std::sqrt(2.0) * static_cast<double>(grid / 2) - 0.5));
  Spectrum s;
  s.energy.assign(max_ring + 1, 0.0);
  for (Index y = 0; y < grid; ++y)
    for (Index x = 0; x < grid; ++x) {
      const double k = std::hypot(wavenumber(x, grid), wavenumber(y, grid));
      const auto ring = static_cast<std::size_t>(std::max(0.0, std::ceil(k - 0.5)));
      const auto i = static_cast<std::size_t>(y * grid + x);
      s.energy[ring] += 0.5 * (std::norm(uh[i]) + std::norm(vh[i])) / (n2 * n2);
    }
  double ke = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) ke += 0.5 * (u[i] * u[i] + v[i] * v[i]);
  s.total = ke / n2;
  return s;
}

void velocity_from_vorticity(const std::vector<double>& zeta, Index grid, std::vector<double>& u,
                             std::vector<double>& v) {
  check_grid("velocity_from_vorticity", zeta.size(), grid);
  const std::vector<cplx> zh = dft2(std::vector<cplx>(zeta.begin(), zeta.end()), grid, FFTW_FORWARD);
  std::vector<cplx> uh(zh.size()), vh(zh.size());
  const cplx I(0.0, 1.0);
  for (Index y = 0; y < grid; ++y)
    for (Index x = 0; x < grid; ++x) {
      const auto i = static_cast<std::size_t>(y * grid + x);
      // Nyquist derivatives are dropped so the result stays real.
      const double kx = (grid % 2 == 0 && x == grid / 2) ? 0.0 : wavenumber(x, grid);
      const double ky = (grid % 2 == 0 && y == grid / 2) ? 0.0 : wavenumber(y, grid);
      const double k2 = wavenumber(x, grid) * wavenumber(x, grid) + wavenumber(y, grid) * wavenumber(y, grid);
      if (k2 == 0.0) continue;
      uh[i] = I * ky * zh[i] / k2;
      vh[i] = -I * kx * zh[i] / k2;
    }
  const auto ub = dft2(uh, grid, FFTW_BACKWARD);
  const auto vb = dft2(vh, grid, FFTW_BACKWARD);
  const double n2 = static_cast<double>(grid * grid);
  u.resize(zeta.size());
  v.resize(zeta.size());
  for (std::size_t i = 0; i < zeta.size(); ++i) u[i] = ub[i].real() / n2, v[i] = vb[i].real() / n2;
}

}  // namespace sdl
