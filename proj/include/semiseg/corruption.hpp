#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/rng.hpp"
#include "semiseg/tensor.hpp"
#include "semiseg/volumes.hpp"

namespace semiseg {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double sample(Rng& rng) const { return rng.uniform(lo, hi); }
};

inline void to_json(nlohmann::json& j, const Interval& i) { j = {i.lo, i.hi}; }
inline void from_json(const nlohmann::json& j, Interval& i) {
  i.lo = j.at(0).get<double>();
  i.hi = j.at(1).get<double>();
}

/// Stage-1 corruption settings. A zero cube extent means "patch extent / 8" on that axis.
struct CorruptionConfig {
  Interval noise_sigma{0.0, 0.2};
  Interval downsample_factor{1.0, 2.0};
  Extent3 cube_size{0, 0, 0};
  double mask_ratio = 0.3;

  Extent3 cube_for(Extent3 patch) const {
    Extent3 c = cube_size;
    for (int a = 0; a < 3; ++a)
      if (c[a] <= 0) c[a] = std::max(1, patch[a] / 8);
    return c;
  }

  void validate(Extent3 patch) const {
    require(noise_sigma.lo >= 0.0 && noise_sigma.lo <= noise_sigma.hi, "CorruptionConfig: bad noise_sigma range");
    require(downsample_factor.lo >= 1.0 && downsample_factor.lo <= downsample_factor.hi,
            "CorruptionConfig: downsample_factor range must be >= 1");
    require(mask_ratio >= 0.0 && mask_ratio <= 0.5, "CorruptionConfig: mask_ratio must be in [0, 0.5]");
    const Extent3 c = cube_for(patch);
    for (int a = 0; a < 3; ++a)
      require(c[a] >= 1 && c[a] < patch[a], "CorruptionConfig: cube must be strictly smaller than the patch");
  }
};

inline void to_json(nlohmann::json& j, const CorruptionConfig& c) {
  j = {{"noise_sigma_range", c.noise_sigma},
       {"downsample_factor_range", c.downsample_factor},
       {"cube_size", {c.cube_size.d, c.cube_size.h, c.cube_size.w}},
       {"mask_ratio", c.mask_ratio}};
}
inline void from_json(const nlohmann::json& j, CorruptionConfig& c) {
  CorruptionConfig d;
  c.noise_sigma = j.value("noise_sigma_range", d.noise_sigma);
  c.downsample_factor = j.value("downsample_factor_range", d.downsample_factor);
  if (j.contains("cube_size")) {
    const auto& s = j.at("cube_size");
    c.cube_size = {s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
  }
  c.mask_ratio = j.value("mask_ratio", d.mask_ratio);
}

template <class T>
Tensor<T> add_noise(const Tensor<T>& x, double sigma, Rng& rng) {
  require(sigma >= 0.0, "add_noise: sigma must be >= 0");
  Tensor<T> out = x;
  if (sigma == 0.0) return out;
  for (auto& v : out.values()) v += static_cast<T>(rng.normal(0.0, sigma));
  return out;
}

/// Linear downsampling by `factor` followed by linear upsampling back to the original extent.
template <class T>
Tensor<T> degrade_resolution(const Tensor<T>& x, double factor) {
  require(factor >= 1.0, "degrade_resolution: factor must be >= 1");
  const Extent3 e = x.extent();
  Extent3 low;
  for (int a = 0; a < 3; ++a) low[a] = std::max(1, static_cast<int>(std::lround(e[a] / factor)));
  if (low == e) return x;
  return resize_linear(resize_linear(x, low), e);
}

struct Cube {
  std::array<int, 3> offset{};
  Extent3 size{};
  bool contains(int z, int y, int x) const {
    return z >= offset[0] && z < offset[0] + size.d && y >= offset[1] && y < offset[1] + size.h && x >= offset[2] &&
           x < offset[2] + size.w;
  }
};

template <class T>
struct MaskedPatch {
  Tensor<T> data;
  Tensor<std::uint8_t> mask;  // 1 = zeroed
  std::vector<Cube> cubes;
};

/// Zeroes randomly placed cubes (overlap allowed) until the masked share reaches `mask_ratio`.
template <class T>
MaskedPatch<T> mask_cubes(const Tensor<T>& x, const CorruptionConfig& cfg, Rng& rng) {
  const Extent3 e = x.extent();
  cfg.validate(e);
  const Extent3 cube = cfg.cube_for(e);
  MaskedPatch<T> out{x, Tensor<std::uint8_t>(1, e, std::uint8_t{0}), {}};
  const auto target = static_cast<std::size_t>(std::ceil(cfg.mask_ratio * static_cast<double>(e.voxels())));
  std::size_t masked = 0;
  while (masked < target) {
    Cube c{{rng.uniform_int(0, e.d - cube.d), rng.uniform_int(0, e.h - cube.h), rng.uniform_int(0, e.w - cube.w)}, cube};
    for (int z = c.offset[0]; z < c.offset[0] + cube.d; ++z)
      for (int y = c.offset[1]; y < c.offset[1] + cube.h; ++y)
        for (int xx = c.offset[2]; xx < c.offset[2] + cube.w; ++xx) {
          auto& m = out.mask.at(0, z, y, xx);
          if (!m) {
            m = 1;
            ++masked;
          }
        }
    out.cubes.push_back(c);
  }
  for (int ch = 0; ch < x.channels(); ++ch)
    for (std::size_t v = 0; v < x.voxels(); ++v)
      if (out.mask[v]) out.data.channel(ch)[v] = T{0};
  return out;
}

/// Noise, then resolution degradation, then cube masking (so masked voxels stay exactly zero).
template <class T>
MaskedPatch<T> corrupt(const Tensor<T>& x, const CorruptionConfig& cfg, Rng& rng) {
  cfg.validate(x.extent());
  Tensor<T> y = add_noise(x, cfg.noise_sigma.sample(rng), rng);
  y = degrade_resolution(y, cfg.downsample_factor.sample(rng));
  return mask_cubes(y, cfg, rng);
}

}  // namespace semiseg
