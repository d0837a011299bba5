#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "semiseg/rng.hpp"
#include "semiseg/tensor.hpp"

namespace semiseg {

/// Scalar intensity volume in (depth, height, width) order with voxel spacing in mm.
struct Volume {
  Tensor<float> data;  // single channel
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  Volume() = default;
  Volume(Tensor<float> d, Vec3 sp, Vec3 org = {0.0, 0.0, 0.0}) : data(std::move(d)), spacing(sp), origin(org) {
    validate();
  }

  const Extent3& extent() const { return data.extent(); }

  void validate() const {
    require(data.channels() == 1, "Volume: expected a single channel");
    const Extent3 e = data.extent();
    require(e.d >= 1 && e.h >= 1 && e.w >= 1, "Volume: every extent must be >= 1");
    for (double s : spacing) require(s > 0.0 && std::isfinite(s), "Volume: spacing must be positive");
    for (float v : data.values()) require(std::isfinite(v), "Volume: non-finite intensity");
  }
};

/// Per-voxel class indices; 0 is background.
struct SegLabel {
  Tensor<std::uint8_t> data;  // single channel
  int num_classes = 2;

  SegLabel() = default;
  SegLabel(Tensor<std::uint8_t> d, int classes) : data(std::move(d)), num_classes(classes) { validate(); }

  const Extent3& extent() const { return data.extent(); }

  void validate() const {
    require(data.channels() == 1, "SegLabel: expected a single channel");
    require(num_classes >= 2 && num_classes <= 256, "SegLabel: num_classes must be in [2, 256]");
    for (auto v : data.values()) require(v < num_classes, "SegLabel: class index out of range");
  }
};

/// A training or evaluation case. Labeled cases belong to the labeled set.
struct Case {
  std::string id;
  Volume volume;
  std::optional<SegLabel> label;

  bool labeled() const { return label.has_value(); }
  void validate() const {
    volume.validate();
    if (label) {
      label->validate();
      require(label->extent() == volume.extent(),
              "Case '" + id + "': label shape " + label->extent().str() + " does not match volume shape " +
                  volume.extent().str());
    }
  }
};

struct Patch {
  Tensor<float> data;
  std::optional<Tensor<std::uint8_t>> label;
  std::array<int, 3> source_offset{0, 0, 0};
  std::size_t padded_voxels = 0;
};

// ---------------------------------------------------------------------------
// Resampling

inline Extent3 resampled_extent(Extent3 extent, const Vec3& spacing, const Vec3& target) {
  Extent3 out;
  for (int a = 0; a < 3; ++a) {
    require(target[a] > 0.0, "resample: target spacing must be positive");
    out[a] = std::max(1, static_cast<int>(std::lround(extent[a] * spacing[a] / target[a])));
  }
  return out;
}

namespace detail {

// Maps output index to continuous input index (cell-centred, extent-aligned).
inline double source_coord(int i, int in_n, int out_n) {
  const double scale = static_cast<double>(in_n) / static_cast<double>(out_n);
  double s = (i + 0.5) * scale - 0.5;
  return std::clamp(s, 0.0, static_cast<double>(in_n - 1));
}

}  // namespace detail

/// Trilinear resampling of every channel onto `out_extent`.
template <class T>
Tensor<T> resize_linear(const Tensor<T>& in, Extent3 out_extent) {
  const Extent3 e = in.extent();
  if (out_extent == e) return in;
  Tensor<T> out(in.channels(), out_extent);
  struct Tap {
    int i0, i1;
    double f;
  };
  auto taps = [](int in_n, int out_n) {
    std::vector<Tap> t(static_cast<std::size_t>(out_n));
    for (int i = 0; i < out_n; ++i) {
      const double s = detail::source_coord(i, in_n, out_n);
      const int i0 = static_cast<int>(std::floor(s));
      const int i1 = std::min(i0 + 1, in_n - 1);
      t[static_cast<std::size_t>(i)] = {i0, i1, s - i0};
    }
    return t;
  };
  const auto tz = taps(e.d, out_extent.d), ty = taps(e.h, out_extent.h), tx = taps(e.w, out_extent.w);
  for (int c = 0; c < in.channels(); ++c)
    for (int z = 0; z < out_extent.d; ++z) {
      const Tap& a = tz[static_cast<std::size_t>(z)];
      for (int y = 0; y < out_extent.h; ++y) {
        const Tap& b = ty[static_cast<std::size_t>(y)];
        for (int x = 0; x < out_extent.w; ++x) {
          const Tap& g = tx[static_cast<std::size_t>(x)];
          auto v = [&](int zz, int yy, int xx) { return static_cast<double>(in.at(c, zz, yy, xx)); };
          const double c00 = v(a.i0, b.i0, g.i0) * (1 - g.f) + v(a.i0, b.i0, g.i1) * g.f;
          const double c01 = v(a.i0, b.i1, g.i0) * (1 - g.f) + v(a.i0, b.i1, g.i1) * g.f;
          const double c10 = v(a.i1, b.i0, g.i0) * (1 - g.f) + v(a.i1, b.i0, g.i1) * g.f;
          const double c11 = v(a.i1, b.i1, g.i0) * (1 - g.f) + v(a.i1, b.i1, g.i1) * g.f;
          const double c0 = c00 * (1 - b.f) + c01 * b.f;
          const double c1 = c10 * (1 - b.f) + c11 * b.f;
          out.at(c, z, y, x) = static_cast<T>(c0 * (1 - a.f) + c1 * a.f);
        }
      }
    }
  return out;
}

/// Nearest-neighbour resampling, used for class-index grids.
template <class T>
Tensor<T> resize_nearest(const Tensor<T>& in, Extent3 out_extent) {
  const Extent3 e = in.extent();
  if (out_extent == e) return in;
  Tensor<T> out(in.channels(), out_extent);
  auto idx = [](int in_n, int out_n) {
    std::vector<int> m(static_cast<std::size_t>(out_n));
    for (int i = 0; i < out_n; ++i)
      m[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(detail::source_coord(i, in_n, out_n)));
    return m;
  };
  const auto mz = idx(e.d, out_extent.d), my = idx(e.h, out_extent.h), mx = idx(e.w, out_extent.w);
  for (int c = 0; c < in.channels(); ++c)
    for (int z = 0; z < out_extent.d; ++z)
      for (int y = 0; y < out_extent.h; ++y)
        for (int x = 0; x < out_extent.w; ++x)
          out.at(c, z, y, x) =
              in.at(c, mz[static_cast<std::size_t>(z)], my[static_cast<std::size_t>(y)], mx[static_cast<std::size_t>(x)]);
  return out;
}

inline Volume resample(const Volume& v, const Vec3& target_spacing) {
  const Extent3 out_extent = resampled_extent(v.extent(), v.spacing, target_spacing);
  Volume out;
  out.data = resize_linear(v.data, out_extent);
  out.spacing = v.spacing;
  // Record the realized spacing (physical size / new extent) so that resampling back restores the extent.
  for (int a = 0; a < 3; ++a)
    if (out_extent[a] != v.extent()[a]) out.spacing[static_cast<std::size_t>(a)] = v.extent()[a] * v.spacing[static_cast<std::size_t>(a)] / out_extent[a];
  out.origin = v.origin;
  return out;
}

inline SegLabel resample(const SegLabel& label, const Vec3& spacing, const Vec3& target_spacing) {
  const Extent3 out_extent = resampled_extent(label.extent(), spacing, target_spacing);
  SegLabel out;
  out.data = resize_nearest(label.data, out_extent);
  out.num_classes = label.num_classes;
  return out;
}

// ---------------------------------------------------------------------------
// Intensity normalization

/// Linear-interpolated percentile (p in [0, 100]) of a value multiset.
template <class Range>
double percentile(const Range& input, double p) {
  std::vector<typename Range::value_type> values(std::begin(input), std::end(input));
  require(!values.empty(), "percentile: empty input");
  require(p >= 0.0 && p <= 100.0, "percentile: p must be in [0, 100]");
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
  const double a = static_cast<double>(values[lo]);
  if (frac == 0.0 || lo + 1 >= values.size()) return a;
  const double b = static_cast<double>(*std::min_element(values.begin() + static_cast<std::ptrdiff_t>(lo) + 1, values.end()));
  return a + frac * (b - a);
}

/// Clips to the [p_low, p_high] percentiles of this volume, then z-scores.
inline Volume clip_normalize(const Volume& v, double p_low = 0.5, double p_high = 99.5) {
  require(0.0 <= p_low && p_low < p_high && p_high <= 100.0, "clip_normalize: need 0 <= p_low < p_high <= 100");
  const double lo = percentile(v.data.values(), p_low);
  const double hi = percentile(v.data.values(), p_high);
  std::vector<double> clipped(v.data.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < clipped.size(); ++i) {
    clipped[i] = std::clamp(static_cast<double>(v.data[i]), lo, hi);
    sum += clipped[i];
  }
  const double mean = sum / static_cast<double>(clipped.size());
  double sq = 0.0;
  for (double c : clipped) sq += (c - mean) * (c - mean);
  const double sd = std::max(std::sqrt(sq / static_cast<double>(clipped.size())), 1e-8);
  Volume out = v;
  for (std::size_t i = 0; i < clipped.size(); ++i) out.data[i] = static_cast<float>((clipped[i] - mean) / sd);
  return out;
}

// ---------------------------------------------------------------------------
// Patch sampling

inline std::vector<std::array<int, 3>> foreground_voxels(const Tensor<std::uint8_t>& label) {
  std::vector<std::array<int, 3>> out;
  const Extent3 e = label.extent();
  for (int z = 0; z < e.d; ++z)
    for (int y = 0; y < e.h; ++y)
      for (int x = 0; x < e.w; ++x)
        if (label.at(0, z, y, x) > 0) out.push_back({z, y, x});
  return out;
}

/// Crops a patch at `offset` (may be negative or overhang; the outside is zero).
inline Patch extract_patch(const Case& c, std::array<int, 3> offset, Extent3 patch_size) {
  Patch p;
  p.source_offset = offset;
  p.data = crop(c.volume.data, offset, patch_size, 0.0f);
  if (c.label) p.label = crop(c.label->data, offset, patch_size, std::uint8_t{0});
  const Extent3 e = c.volume.extent();
  std::size_t inside = 1;
  for (int a = 0; a < 3; ++a) {
    const int lo = std::max(0, offset[static_cast<std::size_t>(a)]);
    const int hi = std::min(e[a], offset[static_cast<std::size_t>(a)] + patch_size[a]);
    inside *= static_cast<std::size_t>(std::max(0, hi - lo));
  }
  p.padded_voxels = patch_size.voxels() - inside;
  return p;
}

/// Samples a training patch. With probability `foreground_bias` (labeled cases only)
/// the crop is centred on a uniformly chosen foreground voxel; otherwise the offset is uniform.
inline Patch sample_patch(const Case& c, Extent3 patch_size, double foreground_bias, Rng& rng,
                          const std::vector<std::array<int, 3>>* foreground = nullptr) {
  require(patch_size.d >= 1 && patch_size.h >= 1 && patch_size.w >= 1, "sample_patch: empty patch size");
  const Extent3 e = c.volume.extent();
  std::array<int, 3> offset{};
  bool centred = false;
  if (c.label && rng.bernoulli(foreground_bias)) {
    std::vector<std::array<int, 3>> local;
    if (foreground == nullptr) {
      local = foreground_voxels(c.label->data);
      foreground = &local;
    }
    if (!foreground->empty()) {
      const auto& v = (*foreground)[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(foreground->size()) - 1))];
      for (int a = 0; a < 3; ++a) offset[static_cast<std::size_t>(a)] = v[static_cast<std::size_t>(a)] - patch_size[a] / 2;
      centred = true;
    }
  }
  if (!centred) {
    for (int a = 0; a < 3; ++a) {
      const int lo = std::min(0, e[a] - patch_size[a]);
      const int hi = std::max(0, e[a] - patch_size[a]);
      offset[static_cast<std::size_t>(a)] = rng.uniform_int(lo, hi);
    }
  }
  return extract_patch(c, offset, patch_size);
}

// ---------------------------------------------------------------------------
// Synthetic data

struct Ellipsoid {
  Vec3 center{};
  Vec3 radii{};
  int label = 1;

  /// Normalized radial distance; < 1 inside.
  double level(double z, double y, double x) const {
    const double a = (z - center[0]) / radii[0];
    const double b = (y - center[1]) / radii[1];
    const double c = (x - center[2]) / radii[2];
    return a * a + b * b + c * c;
  }
};

struct SyntheticTooth {
  Ellipsoid crown;
  Ellipsoid pulp;
};

struct SyntheticCase {
  Case data;
  std::vector<SyntheticTooth> teeth;  // teeth.size() is the number actually placed
  int requested = 0;
};

/// Bright ellipsoidal "teeth" with a dimmer nested "pulp" core over a noisy background.
/// Tooth classes cycle over 1..num_classes-2; pulp is num_classes-1. Deterministic in `seed`.
inline SyntheticCase generate_synthetic_case(std::uint64_t seed, Extent3 extent, int num_teeth, int num_classes,
                                             const std::string& id = "") {
  require(extent.d >= 16 && extent.h >= 16 && extent.w >= 16, "generate_synthetic_case: extents must be >= 16");
  require(num_classes >= 3 && num_classes <= 255, "generate_synthetic_case: num_classes must be >= 3");
  require(num_teeth >= 0, "generate_synthetic_case: num_teeth must be >= 0");
  Rng rng(seed);
  SyntheticCase out;
  out.requested = num_teeth;
  const int min_extent = std::min({extent.d, extent.h, extent.w});
  const double r_lo = 0.12 * min_extent, r_hi = 0.22 * min_extent;
  const int tooth_classes = num_classes - 2;
  const int pulp_class = num_classes - 1;

  for (int t = 0; t < num_teeth; ++t) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      Ellipsoid crown;
      for (int a = 0; a < 3; ++a) {
        crown.radii[static_cast<std::size_t>(a)] = rng.uniform(r_lo, r_hi);
        const double r = crown.radii[static_cast<std::size_t>(a)];
        crown.center[static_cast<std::size_t>(a)] = rng.uniform(r + 1.0, extent[a] - r - 2.0);
      }
      const double reach = std::max({crown.radii[0], crown.radii[1], crown.radii[2]});
      bool overlaps = false;
      for (const auto& other : out.teeth) {
        const double other_reach = std::max({other.crown.radii[0], other.crown.radii[1], other.crown.radii[2]});
        double dist2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double d = crown.center[static_cast<std::size_t>(a)] - other.crown.center[static_cast<std::size_t>(a)];
          dist2 += d * d;
        }
        if (std::sqrt(dist2) < reach + other_reach + 1.5) overlaps = true;
      }
      if (overlaps) continue;
      crown.label = 1 + static_cast<int>(out.teeth.size()) % tooth_classes;
      Ellipsoid pulp = crown;
      for (auto& r : pulp.radii) r *= 0.45;
      pulp.label = pulp_class;
      out.teeth.push_back({crown, pulp});
      placed = true;
    }
  }

  Tensor<float> image(1, extent);
  Tensor<std::uint8_t> label(1, extent, std::uint8_t{0});
  Rng noise = rng.derive("noise");
  for (int z = 0; z < extent.d; ++z)
    for (int y = 0; y < extent.h; ++y)
      for (int x = 0; x < extent.w; ++x) {
        float intensity = 0.0f;
        std::uint8_t cls = 0;
        for (const auto& tooth : out.teeth) {
          if (tooth.crown.level(z, y, x) < 1.0) {
            cls = static_cast<std::uint8_t>(tooth.crown.label);
            intensity = 1.0f + 0.35f * static_cast<float>(tooth.crown.label - 1);
            if (tooth.pulp.level(z, y, x) < 1.0) {
              cls = static_cast<std::uint8_t>(pulp_class);
              intensity = 0.45f;
            }
          }
        }
        image.at(0, z, y, x) = intensity + static_cast<float>(noise.normal(0.0, 0.12));
        label.at(0, z, y, x) = cls;
      }
  out.data.id = id.empty() ? "synth_" + std::to_string(seed) : id;
  out.data.volume = Volume(std::move(image), {1.0, 1.0, 1.0});
  out.data.label = SegLabel(std::move(label), num_classes);
  return out;
}

}  // namespace semiseg
