#include "sdl/rng.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace sdl {

std::string to_string(RngRole role) {
  switch (role) {
    case RngRole::latent: return "latent";
    case RngRole::pixel_noise: return "pixel_noise";
    case RngRole::data_forcing: return "data_forcing";
    case RngRole::init_perturbation: return "init_perturbation";
  }
  return "unknown";
}

RngRole role_from_string(const std::string& name) {
  if (name == "latent") return RngRole::latent;
  if (name == "pixel_noise") return RngRole::pixel_noise;
  if (name == "data_forcing") return RngRole::data_forcing;
  if (name == "init_perturbation") return RngRole::init_perturbation;
  throw std::invalid_argument("unknown rng role: " + name);
}

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(p >> 32);
  lo = static_cast<std::uint32_t>(p);
}

// 2^-32
constexpr double kInv32 = 1.0 / 4294967296.0;

}  // namespace

PhiloxCounter philox4x32_10(PhiloxCounter ctr, PhiloxKey key) {
  for (int round = 0; round < 10; ++round) {
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMul0, ctr[0], hi0, lo0);
    mulhilo(kMul1, ctr[2], hi1, lo1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

PhiloxCounter philox_block(const RngKey& key, std::uint32_t block) {
  const PhiloxKey k{static_cast<std::uint32_t>(key.global_seed),
                    static_cast<std::uint32_t>(key.global_seed >> 32)};
  const PhiloxCounter c{block, key.member_id,
                        (key.layer_id & 0x00FFFFFFu) | (static_cast<std::uint32_t>(key.role) << 24),
                        key.step_index};
  return philox4x32_10(c, k);
}

std::vector<double> uniform_stream(const RngKey& key, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; i += 4) {
    const auto words = philox_block(key, static_cast<std::uint32_t>(i / 4));
    for (std::size_t j = 0; j < 4 && i + j < n; ++j) out[i + j] = words[j] * kInv32;
  }
  return out;
}

std::vector<double> gaussian_stream(const RngKey& key, std::size_t n) {
  std::vector<double> out(n);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t i = 0; i < n; i += 4) {
    const auto words = philox_block(key, static_cast<std::uint32_t>(i / 4));
    double z[4];
    for (int pair = 0; pair < 2; ++pair) {
      // u1 in (0, 1] keeps the log finite.
      const double u1 = (static_cast<double>(words[2 * pair]) + 1.0) * kInv32;
      const double u2 = static_cast<double>(words[2 * pair + 1]) * kInv32;
      const double r = std::sqrt(-2.0 * std::log(u1));
      z[2 * pair] = r * std::cos(two_pi * u2);
      z[2 * pair + 1] = r * std::sin(two_pi * u2);
    }
    for (std::size_t j = 0; j < 4 && i + j < n; ++j) out[i + j] = z[j];
  }
  return out;
}

}  // namespace sdl
