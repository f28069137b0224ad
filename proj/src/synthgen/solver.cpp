#include "sdl/synthgen.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace sdl::synth {

void SystemConfig::validate() const {
  if (grid < 8 || grid % 2 != 0) throw std::invalid_argument("SystemConfig: grid must be even and >= 8");
  if (viscosity < 0 || drag < 0 || diffusivity < 0 || tracer_drag < 0) {
    throw std::invalid_argument("SystemConfig: dissipation coefficients must be nonnegative");
  }
  if (!(forcing_kmin > 0 && forcing_kmax >= forcing_kmin)) throw std::invalid_argument("SystemConfig: bad forcing band");
  if (forcing_std < 0) throw std::invalid_argument("SystemConfig: forcing_std must be nonnegative");
  if (!(dt > 0) || stride < 1 || spinup < 0) throw std::invalid_argument("SystemConfig: bad time stepping");
}

nlohmann::json to_json(const SystemConfig& c) {
  return {{"grid", c.grid},
          {"viscosity", c.viscosity},
          {"drag", c.drag},
          {"forcing_kmin", c.forcing_kmin},
          {"forcing_kmax", c.forcing_kmax},
          {"forcing_std", c.forcing_std},
          {"dt", c.dt},
          {"stride", c.stride},
          {"diffusivity", c.diffusivity},
          {"tracer_source", c.tracer_source},
          {"tracer_drag", c.tracer_drag},
          {"init_amplitude", c.init_amplitude},
          {"spinup", c.spinup}};
}

SystemConfig system_config_from_json(const nlohmann::json& j) {
  SystemConfig c;
  c.grid = j.value("grid", c.grid);
  c.viscosity = j.value("viscosity", c.viscosity);
  c.drag = j.value("drag", c.drag);
  c.forcing_kmin = j.value("forcing_kmin", c.forcing_kmin);
  c.forcing_kmax = j.value("forcing_kmax", c.forcing_kmax);
  c.forcing_std = j.value("forcing_std", c.forcing_std);
  c.dt = j.value("dt", c.dt);
  c.stride = j.value("stride", c.stride);
  c.diffusivity = j.value("diffusivity", c.diffusivity);
  c.tracer_source = j.value("tracer_source", c.tracer_source);
  c.tracer_drag = j.value("tracer_drag", c.tracer_drag);
  c.init_amplitude = j.value("init_amplitude", c.init_amplitude);
  c.spinup = j.value("spinup", c.spinup);
  c.validate();
  return c;
}

namespace {

using cplx = std::complex<double>;

std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

template <typename T>
struct FftwBuffer {
  T* p = nullptr;
  std::size_t n = 0;
  explicit FftwBuffer(std::size_t count = 0) : n(count) {
    if (count) {
      p = static_cast<T*>(fftw_malloc(sizeof(T) * count));
      if (!p) throw std::bad_alloc();
      std::fill(p, p + count, T{});
    }
  }
  FftwBuffer(const FftwBuffer& o) : FftwBuffer(o.n) { std::copy(o.p, o.p + n, p); }
  FftwBuffer& operator=(const FftwBuffer& o) {
    if (this != &o) std::copy(o.p, o.p + n, p);
    return *this;
  }
  ~FftwBuffer() {
    if (p) fftw_free(p);
  }
  T& operator[](std::size_t i) { return p[i]; }
  const T& operator[](std::size_t i) const { return p[i]; }
  fftw_complex* fc() { return reinterpret_cast<fftw_complex*>(p); }
};

}  // namespace

struct Solver::Impl {
  SystemConfig cfg;
  std::uint64_t seed;
  std::uint32_t trajectory;
  std::uint64_t stride = 0;
  std::size_t n, nc, m;  // grid, r2c columns, spectral size
  double norm;           // 1 / n^2

  std::vector<double> kx, ky, k2, inv_k2, mask;
  FftwBuffer<cplx> zh, qh, fh, sh;
  // RK work
  FftwBuffer<cplx> z1, q1, dz[4], dq[4];
  // transform scratch
  FftwBuffer<cplx> spec;
  FftwBuffer<double> u, v, gx, gy, prod;
  fftw_plan r2c = nullptr, c2r = nullptr;
  double max_cfl = 0.0;

  Impl(const SystemConfig& c, std::uint64_t s, std::uint32_t t)
      : cfg(c),
        seed(s),
        trajectory(t),
        n(static_cast<std::size_t>(c.grid)),
        nc(n / 2 + 1),
        m(n * nc),
        norm(1.0 / static_cast<double>(n * n)),
        zh(m), qh(m), fh(m), sh(m), z1(m), q1(m),
        dz{FftwBuffer<cplx>(m), FftwBuffer<cplx>(m), FftwBuffer<cplx>(m), FftwBuffer<cplx>(m)},
        dq{FftwBuffer<cplx>(m), FftwBuffer<cplx>(m), FftwBuffer<cplx>(m), FftwBuffer<cplx>(m)},
        spec(m), u(n * n), v(n * n), gx(n * n), gy(n * n), prod(n * n) {
    kx.resize(m), ky.resize(m), k2.resize(m), inv_k2.resize(m), mask.resize(m);
    const double kcut = static_cast<double>(n) / 3.0;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < nc; ++x) {
        const std::size_t i = y * nc + x;
        kx[i] = static_cast<double>(x);
        ky[i] = y <= n / 2 ? static_cast<double>(y) : static_cast<double>(y) - static_cast<double>(n);
        k2[i] = kx[i] * kx[i] + ky[i] * ky[i];
        inv_k2[i] = k2[i] > 0 ? 1.0 / k2[i] : 0.0;
        mask[i] = (std::abs(kx[i]) < kcut && std::abs(ky[i]) < kcut) ? 1.0 : 0.0;
      }
    {
      // ESTIMATE keeps plan selection, and therefore results, reproducible.
      std::lock_guard lock(planner_mutex());
      const int dim = static_cast<int>(n);
      r2c = fftw_plan_dft_r2c_2d(dim, dim, prod.p, spec.fc(), FFTW_ESTIMATE);
      c2r = fftw_plan_dft_c2r_2d(dim, dim, spec.fc(), prod.p, FFTW_ESTIMATE);
    }
    build_source();
    build_initial();
  }

  ~Impl() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(r2c);
    fftw_destroy_plan(c2r);
  }

  void forward(double* in, FftwBuffer<cplx>& out) { fftw_execute_dft_r2c(r2c, in, out.fc()); }
  // c2r overwrites its input, so it always runs from `spec`, which callers
  // fill with coefficients already scaled by 1 / n^2.
  void inverse(double* out) { fftw_execute_dft_c2r(c2r, spec.fc(), out); }

  // Full-plane count of modes with kmin <= |k| <= kmax.
  double band_modes(double kmin, double kmax) const {
    double count = 0;
    const auto half = static_cast<long>(n / 2);
    for (long a = -half + 1; a <= half; ++a)
      for (long b = -half + 1; b <= half; ++b) {
        const double k = std::sqrt(static_cast<double>(a * a + b * b));
        if (k >= kmin && k <= kmax) count += 1;
      }
    return count;
  }

  // Band-limited Gaussian field with expected physical rms `rms`, into `out`.
  void band_noise(const RngKey& key, double kmin, double kmax, double rms, FftwBuffer<cplx>& out) {
    const auto g = gaussian_stream(key, n * n);
    std::copy(g.begin(), g.end(), prod.p);
    forward(prod.p, out);
    const double scale = rms * static_cast<double>(n) / std::sqrt(band_modes(kmin, kmax));
    for (std::size_t i = 0; i < m; ++i) {
      const double k = std::sqrt(k2[i]);
      out[i] = (k >= kmin && k <= kmax) ? out[i] * scale * mask[i] : cplx{};
    }
  }

  void build_source() {
    const double a = cfg.tracer_source;
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double px = 2.0 * std::numbers::pi * static_cast<double>(x) / static_cast<double>(n);
        const double py = 2.0 * std::numbers::pi * static_cast<double>(y) / static_cast<double>(n);
        prod[y * n + x] = a * (std::sin(2.0 * px) + std::cos(3.0 * py));
      }
    forward(prod.p, sh);
    sh[0] = 0.0;
  }

  void build_initial() {
    band_noise(RngKey{seed, trajectory, 0, 0, RngRole::init_perturbation}, 1.0, 8.0, cfg.init_amplitude, zh);
    zh[0] = 0.0;
    std::fill(qh.p, qh.p + m, cplx{});
  }

  void build_forcing() {
    if (cfg.forcing_std == 0.0) {
      std::fill(fh.p, fh.p + m, cplx{});
      return;
    }
    band_noise(RngKey{seed, trajectory, 0, static_cast<std::uint32_t>(stride), RngRole::data_forcing},
               cfg.forcing_kmin, cfg.forcing_kmax, cfg.forcing_std, fh);
    fh[0] = 0.0;
  }

  // i * k * c without going through the generic complex product.
  static cplx ik(double k, const cplx& c) { return {-k * c.imag(), k * c.real()}; }

  // Physical field of i * k_dir * a (or a itself when dir == 0).
  void physical(const FftwBuffer<cplx>& a, int dir, double* out) {
    for (std::size_t i = 0; i < m; ++i) spec[i] = dir == 0 ? a[i] * norm : ik((dir == 1 ? kx[i] : ky[i]) * norm, a[i]);
    inverse(out);
  }

  void velocities(const FftwBuffer<cplx>& z) {
    // psi = -zeta / k^2; u = -psi_y, v = psi_x
    for (std::size_t i = 0; i < m; ++i) spec[i] = ik(ky[i] * inv_k2[i] * norm, z[i]);
    inverse(u.p);
    for (std::size_t i = 0; i < m; ++i) spec[i] = ik(-kx[i] * inv_k2[i] * norm, z[i]);
    inverse(v.p);
  }

  void tendency(const FftwBuffer<cplx>& z, const FftwBuffer<cplx>& q, FftwBuffer<cplx>& dzo, FftwBuffer<cplx>& dqo,
                bool track_cfl) {
    velocities(z);
    if (track_cfl) {
      double umax = 0.0;
      for (std::size_t i = 0; i < n * n; ++i) umax = std::max({umax, std::abs(u[i]), std::abs(v[i])});
      const double dx = 2.0 * std::numbers::pi / static_cast<double>(n);
      max_cfl = std::max(max_cfl, umax * cfg.dt / dx);
    }
    physical(z, 1, gx.p);
    physical(z, 2, gy.p);
    for (std::size_t i = 0; i < n * n; ++i) prod[i] = u[i] * gx[i] + v[i] * gy[i];
    forward(prod.p, dzo);
    physical(q, 1, gx.p);
    physical(q, 2, gy.p);
    for (std::size_t i = 0; i < n * n; ++i) prod[i] = u[i] * gx[i] + v[i] * gy[i];
    forward(prod.p, dqo);
    for (std::size_t i = 0; i < m; ++i) {
      dzo[i] = mask[i] * (-dzo[i] + fh[i]) - (cfg.viscosity * k2[i] + cfg.drag) * z[i];
      dqo[i] = mask[i] * (-dqo[i] + sh[i]) - (cfg.diffusivity * k2[i] + cfg.tracer_drag) * q[i];
    }
    dzo[0] = 0.0;
    dqo[0] = 0.0;  // tracer mean is left untouched
  }

  void rk4_step() {
    const double dt = cfg.dt;
    tendency(zh, qh, dz[0], dq[0], true);
    for (std::size_t i = 0; i < m; ++i) z1[i] = zh[i] + 0.5 * dt * dz[0][i], q1[i] = qh[i] + 0.5 * dt * dq[0][i];
    tendency(z1, q1, dz[1], dq[1], false);
    for (std::size_t i = 0; i < m; ++i) z1[i] = zh[i] + 0.5 * dt * dz[1][i], q1[i] = qh[i] + 0.5 * dt * dq[1][i];
    tendency(z1, q1, dz[2], dq[2], false);
    for (std::size_t i = 0; i < m; ++i) z1[i] = zh[i] + dt * dz[2][i], q1[i] = qh[i] + dt * dq[2][i];
    tendency(z1, q1, dz[3], dq[3], false);
    for (std::size_t i = 0; i < m; ++i) {
      zh[i] += dt / 6.0 * (dz[0][i] + 2.0 * dz[1][i] + 2.0 * dz[2][i] + dz[3][i]);
      qh[i] += dt / 6.0 * (dq[0][i] + 2.0 * dq[1][i] + 2.0 * dq[2][i] + dq[3][i]);
    }
  }

  // Half-plane storage weight: columns kx = 0 and kx = n/2 appear once.
  double weight(std::size_t i) const {
    const std::size_t x = i % nc;
    return (x == 0 || x == n / 2) ? 1.0 : 2.0;
  }

  std::vector<double> ring_energy() const {
    std::vector<double> ring(n / 2 + 1, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const auto r = static_cast<std::size_t>(std::ceil(std::sqrt(k2[i]) - 0.5));
      if (r < ring.size()) ring[r] += weight(i) * std::norm(zh[i]) * inv_k2[i] * 0.5 * norm * norm;
    }
    return ring;
  }

  std::string spectrum_diagnostic() const {
    const auto ring = ring_energy();
    std::ostringstream os;
    os << "KE by ring:";
    for (std::size_t r = 0; r < ring.size(); ++r) os << ' ' << r << ':' << ring[r];
    return os.str();
  }

  void advance_stride() {
    build_forcing();
    for (Index s = 0; s < cfg.stride; ++s) rk4_step();
    ++stride;
    bool finite = true;
    for (std::size_t i = 0; i < m && finite; ++i) finite = std::isfinite(zh[i].real()) && std::isfinite(zh[i].imag());
    if (!finite || max_cfl >= 0.5) {
      std::ostringstream os;
      os << "solver blow-up at stride " << stride << " (trajectory " << trajectory << ", max CFL " << max_cfl
         << "); " << spectrum_diagnostic();
      throw SolverError(os.str());
    }
  }
};

Solver::Solver(const SystemConfig& config, std::uint64_t seed, std::uint32_t trajectory) {
  config.validate();
  impl_ = std::make_unique<Impl>(config, seed, trajectory);
}
Solver::~Solver() = default;
Solver::Solver(Solver&&) noexcept = default;
Solver& Solver::operator=(Solver&&) noexcept = default;

const SystemConfig& Solver::config() const { return impl_->cfg; }
std::uint64_t Solver::stride_index() const { return impl_->stride; }
void Solver::advance_stride() { impl_->advance_stride(); }
void Solver::advance(Index strides) {
  for (Index s = 0; s < strides; ++s) impl_->advance_stride();
}

std::vector<double> Solver::vorticity() const {
  std::vector<double> out(impl_->n * impl_->n);
  impl_->physical(impl_->zh, 0, out.data());
  return out;
}

std::vector<double> Solver::tracer() const {
  std::vector<double> out(impl_->n * impl_->n);
  impl_->physical(impl_->qh, 0, out.data());
  return out;
}

void Solver::velocity(std::vector<double>& u, std::vector<double>& v) const {
  impl_->velocities(impl_->zh);
  u.assign(impl_->u.p, impl_->u.p + impl_->n * impl_->n);
  v.assign(impl_->v.p, impl_->v.p + impl_->n * impl_->n);
}

TensorF Solver::observe() const {
  const auto n = static_cast<Index>(impl_->n);
  TensorF out(Shape{1, 3, n, n});
  const auto z = vorticity();
  const auto q = tracer();
  std::vector<double> u, v;
  velocity(u, v);
  for (Index i = 0; i < n * n; ++i) {
    const auto k = static_cast<std::size_t>(i);
    out[i] = static_cast<float>(z[k]);
    out[n * n + i] = static_cast<float>(q[k]);
    out[2 * n * n + i] = static_cast<float>(std::sqrt(u[k] * u[k] + v[k] * v[k]));
  }
  return out;
}

double Solver::kinetic_energy() const {
  const Impl& s = *impl_;
  double e = 0.0;
  for (std::size_t i = 0; i < s.m; ++i) e += s.weight(i) * std::norm(s.zh[i]) * s.inv_k2[i];
  return 0.5 * e * s.norm * s.norm;
}

double Solver::enstrophy() const {
  const Impl& s = *impl_;
  double e = 0.0;
  for (std::size_t i = 0; i < s.m; ++i) e += s.weight(i) * std::norm(s.zh[i]);
  return 0.5 * e * s.norm * s.norm;
}

std::vector<double> Solver::energy_spectrum() const { return impl_->ring_energy(); }

double Solver::tracer_mean() const { return impl_->qh[0].real() * impl_->norm; }
std::complex<double> Solver::tracer_mean_mode() const { return impl_->qh[0]; }

double Solver::take_max_cfl() {
  const double c = impl_->max_cfl;
  impl_->max_cfl = 0.0;
  return c;
}

void integrate(const SystemConfig& config, std::uint64_t seed, std::uint32_t trajectory, Index n_states,
               const std::function<void(Index, const TensorF&)>& sink) {
  if (n_states < 1) throw std::invalid_argument("integrate: n_states must be >= 1");
  Solver solver(config, seed, trajectory);
  solver.advance(config.spinup);
  for (Index t = 0; t < n_states; ++t) {
    if (t > 0) solver.advance_stride();
    sink(t, solver.observe());
  }
}

std::vector<TensorF> integrate(const SystemConfig& config, std::uint64_t seed, std::uint32_t trajectory,
                               Index n_states) {
  std::vector<TensorF> out;
  integrate(config, seed, trajectory, n_states, [&](Index, const TensorF& s) { out.push_back(s); });
  return out;
}

TensorF regenerate_state(const SystemConfig& config, std::uint64_t seed, std::uint32_t trajectory, Index index) {
  if (index < 0) throw std::invalid_argument("regenerate_state: negative index");
  Solver solver(config, seed, trajectory);
  solver.advance(config.spinup + index);
  return solver.observe();
}

}  // namespace sdl::synth
