#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace sdl {

enum class RngRole : std::uint8_t {
  latent = 0,
  pixel_noise = 1,
  data_forcing = 2,
  init_perturbation = 3,
};

std::string to_string(RngRole role);
RngRole role_from_string(const std::string& name);

/// Address of one random stream. Streams are stateless: the same key always
/// produces the same sequence and any element can be computed directly.
struct RngKey {
  std::uint64_t global_seed = 0;
  std::uint32_t member_id = 0;
  std::uint32_t layer_id = 0;
  std::uint32_t step_index = 0;
  RngRole role = RngRole::latent;

  bool operator==(const RngKey&) const = default;

  RngKey with_role(RngRole r) const {
    RngKey k = *this;
    k.role = r;
    return k;
  }
  RngKey with_layer(std::uint32_t layer) const {
    RngKey k = *this;
    k.layer_id = layer;
    return k;
  }
};

/// Philox4x32-10 block function (Salmon et al., SC'11 constants).
using PhiloxCounter = std::array<std::uint32_t, 4>;
using PhiloxKey = std::array<std::uint32_t, 2>;
PhiloxCounter philox4x32_10(PhiloxCounter counter, PhiloxKey key);

/// Maps a key tuple and block index onto Philox key/counter words:
///   key     = (seed low 32, seed high 32)
///   counter = (block index, member_id, layer_id[0:24) | role << 24, step_index)
PhiloxCounter philox_block(const RngKey& key, std::uint32_t block);

/// Uniform samples in [0, 1) with 32-bit resolution.
std::vector<double> uniform_stream(const RngKey& key, std::size_t n);

/// Standard normal samples. Each Philox block yields four 32-bit words that
/// feed two Box-Muller pairs, so element i depends only on block i / 4.
std::vector<double> gaussian_stream(const RngKey& key, std::size_t n);

/// Fills `out` with gaussian_stream(key, out.size()) converted to Scalar.
template <typename Scalar, typename Out>
void fill_gaussian(const RngKey& key, Out& out) {
  const auto g = gaussian_stream(key, static_cast<std::size_t>(out.size()));
  for (std::size_t i = 0; i < g.size(); ++i) out[static_cast<long>(i)] = static_cast<Scalar>(g[i]);
}

}  // namespace sdl
