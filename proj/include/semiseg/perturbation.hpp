#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/corruption.hpp"
#include "semiseg/model.hpp"
#include "semiseg/rng.hpp"
#include "semiseg/tensor.hpp"
#include "semiseg/volumes.hpp"

namespace semiseg {

enum class FeatureMode { spatial_dropout, activation_dropout, noise_injection, random_per_map };

inline std::string to_string(FeatureMode m) {
  switch (m) {
    case FeatureMode::spatial_dropout: return "spatial_dropout";
    case FeatureMode::activation_dropout: return "activation_dropout";
    case FeatureMode::noise_injection: return "noise_injection";
    case FeatureMode::random_per_map: return "random_per_map";
  }
  return "?";
}
inline FeatureMode feature_mode_from_string(const std::string& s) {
  for (auto m : {FeatureMode::spatial_dropout, FeatureMode::activation_dropout, FeatureMode::noise_injection,
                 FeatureMode::random_per_map})
    if (to_string(m) == s) return m;
  throw std::invalid_argument("unknown feature_mode '" + s + "'");
}

struct RandomTransform {
  double probability = 0.5;
  Interval range{};
};

inline void to_json(nlohmann::json& j, const RandomTransform& t) { j = {{"p", t.probability}, {"range", t.range}}; }
inline void from_json(const nlohmann::json& j, RandomTransform& t) {
  t.probability = j.value("p", t.probability);
  if (j.contains("range")) t.range = j.at("range").get<Interval>();
}

/// Intensity-only input perturbations (applied in this order) plus the feature-space perturbation settings.
struct PerturbationConfig {
  RandomTransform median{0.5, {3, 3}};  // range = kernel size (odd)
  RandomTransform blur{0.5, {0.5, 1.0}};
  RandomTransform noise{0.5, {0.0, 0.1}};
  RandomTransform brightness{0.5, {0.75, 1.25}};
  RandomTransform contrast{0.5, {0.75, 1.25}};
  RandomTransform low_resolution{0.5, {1.0, 2.0}};
  RandomTransform sharpen{0.5, {0.1, 0.5}};

  FeatureMode feature_mode = FeatureMode::random_per_map;
  double spatial_dropout_p = 0.5;
  Interval activation_quantile{0.7, 0.9};
  double noise_amplitude = 0.3;

  std::array<RandomTransform*, 7> transforms() {
    return {&median, &blur, &noise, &brightness, &contrast, &low_resolution, &sharpen};
  }
  std::array<const RandomTransform*, 7> transforms() const {
    return {&median, &blur, &noise, &brightness, &contrast, &low_resolution, &sharpen};
  }

  void set_all_probabilities(double p) {
    for (auto* t : transforms()) t->probability = p;
  }

  void validate() const {
    for (const auto* t : transforms()) require(t->probability >= 0.0 && t->probability <= 1.0, "PerturbationConfig: probability out of [0, 1]");
    const int k = static_cast<int>(median.range.lo);
    require(k >= 1 && k % 2 == 1 && median.range.lo == median.range.hi, "PerturbationConfig: median kernel must be odd");
    require(spatial_dropout_p >= 0.0 && spatial_dropout_p < 1.0, "PerturbationConfig: spatial_dropout_p must be in [0, 1)");
    require(activation_quantile.lo > 0.0 && activation_quantile.hi < 1.0 && activation_quantile.lo <= activation_quantile.hi,
            "PerturbationConfig: activation quantile range must lie in (0, 1)");
    require(noise_amplitude >= 0.0 && noise_amplitude < 1.0, "PerturbationConfig: noise_amplitude must be in [0, 1)");
  }
};

inline void to_json(nlohmann::json& j, const PerturbationConfig& c) {
  j = {{"median", c.median},
       {"blur", c.blur},
       {"noise", c.noise},
       {"brightness", c.brightness},
       {"contrast", c.contrast},
       {"low_resolution", c.low_resolution},
       {"sharpen", c.sharpen},
       {"feature_mode", to_string(c.feature_mode)},
       {"spatial_dropout_p", c.spatial_dropout_p},
       {"activation_quantile", c.activation_quantile},
       {"noise_amplitude", c.noise_amplitude}};
}
inline void from_json(const nlohmann::json& j, PerturbationConfig& c) {
  PerturbationConfig d;
  c.median = j.value("median", d.median);
  c.blur = j.value("blur", d.blur);
  c.noise = j.value("noise", d.noise);
  c.brightness = j.value("brightness", d.brightness);
  c.contrast = j.value("contrast", d.contrast);
  c.low_resolution = j.value("low_resolution", d.low_resolution);
  c.sharpen = j.value("sharpen", d.sharpen);
  c.feature_mode = feature_mode_from_string(j.value("feature_mode", to_string(d.feature_mode)));
  c.spatial_dropout_p = j.value("spatial_dropout_p", d.spatial_dropout_p);
  c.activation_quantile = j.value("activation_quantile", d.activation_quantile);
  c.noise_amplitude = j.value("noise_amplitude", d.noise_amplitude);
}

// ---------------------------------------------------------------------------
// Local intensity filters (replicate border)

namespace detail {
inline int clampi(int v, int hi) { return std::clamp(v, 0, hi - 1); }
}  // namespace detail

template <class T>
Tensor<T> median_filter(const Tensor<T>& x, int kernel) {
  require(kernel >= 1 && kernel % 2 == 1, "median_filter: kernel must be odd");
  const Extent3 e = x.extent();
  const int r = kernel / 2;
  Tensor<T> out(x.channels(), e);
  std::vector<T> window(static_cast<std::size_t>(kernel * kernel * kernel));
  for (int c = 0; c < x.channels(); ++c)
    for (int z = 0; z < e.d; ++z)
      for (int y = 0; y < e.h; ++y)
        for (int xx = 0; xx < e.w; ++xx) {
          std::size_t n = 0;
          for (int dz = -r; dz <= r; ++dz)
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx)
                window[n++] = x.at(c, detail::clampi(z + dz, e.d), detail::clampi(y + dy, e.h), detail::clampi(xx + dx, e.w));
          std::nth_element(window.begin(), window.begin() + static_cast<std::ptrdiff_t>(n / 2), window.end());
          out.at(c, z, y, xx) = window[n / 2];
        }
  return out;
}

/// Separable Gaussian blur, kernel radius ceil(3 sigma).
template <class T>
Tensor<T> gaussian_blur(const Tensor<T>& x, double sigma) {
  if (sigma <= 0.0) return x;
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double s = 0.0;
  for (int i = -r; i <= r; ++i) s += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  Tensor<T> cur = x;
  const Extent3 e = x.extent();
  for (int axis = 0; axis < 3; ++axis) {
    Tensor<T> next(x.channels(), e);
    for (int c = 0; c < x.channels(); ++c)
      for (int z = 0; z < e.d; ++z)
        for (int y = 0; y < e.h; ++y)
          for (int xx = 0; xx < e.w; ++xx) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) {
              int p[3] = {z, y, xx};
              p[axis] = detail::clampi(p[axis] + i, e[axis]);
              acc += k[static_cast<std::size_t>(i + r)] * static_cast<double>(cur.at(c, p[0], p[1], p[2]));
            }
            next.at(c, z, y, xx) = static_cast<T>(acc);
          }
    cur = std::move(next);
  }
  return cur;
}

/// Unsharp masking: x + amount * (x - blur(x)).
template <class T>
Tensor<T> sharpen(const Tensor<T>& x, double amount) {
  const Tensor<T> b = gaussian_blur(x, 1.0);
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(x[i] + amount * (x[i] - b[i]));
  return out;
}

template <class T>
Tensor<T> scale_brightness(const Tensor<T>& x, double factor) {
  Tensor<T> out = x;
  for (auto& v : out.values()) v = static_cast<T>(v * factor);
  return out;
}

/// Scales deviations from the patch mean.
template <class T>
Tensor<T> scale_contrast(const Tensor<T>& x, double factor) {
  double mean = 0.0;
  for (T v : x.values()) mean += static_cast<double>(v);
  mean /= static_cast<double>(std::max<std::size_t>(1, x.size()));
  Tensor<T> out = x;
  for (auto& v : out.values()) v = static_cast<T>((v - mean) * factor + mean);
  return out;
}

// ---------------------------------------------------------------------------
// Input perturbation

/// Applies each intensity transform independently with its probability. No transform moves voxels.
template <class T>
Tensor<T> perturb_input(const Tensor<T>& x, const PerturbationConfig& cfg, Rng& rng) {
  cfg.validate();
  Tensor<T> y = x;
  if (rng.bernoulli(cfg.median.probability)) y = median_filter(y, static_cast<int>(cfg.median.range.lo));
  if (rng.bernoulli(cfg.blur.probability)) y = gaussian_blur(y, cfg.blur.range.sample(rng));
  if (rng.bernoulli(cfg.noise.probability)) y = add_noise(y, cfg.noise.range.sample(rng), rng);
  if (rng.bernoulli(cfg.brightness.probability)) y = scale_brightness(y, cfg.brightness.range.sample(rng));
  if (rng.bernoulli(cfg.contrast.probability)) y = scale_contrast(y, cfg.contrast.range.sample(rng));
  if (rng.bernoulli(cfg.low_resolution.probability)) y = degrade_resolution(y, cfg.low_resolution.range.sample(rng));
  if (rng.bernoulli(cfg.sharpen.probability)) y = sharpen(y, cfg.sharpen.range.sample(rng));
  return y;
}

/// Perturbs the image of a patch; the label grid is carried over untouched.
inline Patch perturb_input(const Patch& p, const PerturbationConfig& cfg, Rng& rng) {
  Patch out = p;
  out.data = perturb_input(p.data, cfg, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Feature perturbations. Each is an element-wise multiplier, returned so the
// backward pass can reuse it.

template <class T>
Tensor<T> spatial_dropout_mask(const Tensor<T>& z, double p, Rng& rng) {
  require(p >= 0.0 && p < 1.0, "spatial_dropout: p must be in [0, 1)");
  Tensor<T> m(z.channels(), z.extent());
  const T keep = static_cast<T>(1.0 / (1.0 - p));
  for (int c = 0; c < z.channels(); ++c) {
    const T v = rng.bernoulli(p) ? T{0} : keep;
    for (auto& e : m.channel(c)) e = v;
  }
  return m;
}

/// Zeroes every activation strictly above the `gamma` quantile of the whole map.
template <class T>
Tensor<T> activation_dropout_mask(const Tensor<T>& z, double gamma) {
  require(!z.empty(), "activation_dropout: empty feature map");
  const double threshold = percentile(z.values(), gamma * 100.0);
  Tensor<T> m(z.channels(), z.extent());
  for (std::size_t i = 0; i < z.size(); ++i) m[i] = static_cast<double>(z[i]) > threshold ? T{0} : T{1};
  return m;
}

/// Multiplier 1 + N with N ~ U(-amplitude, amplitude), i.e. Z + Z * N.
template <class T>
Tensor<T> noise_injection_mask(const Tensor<T>& z, double amplitude, Rng& rng) {
  Tensor<T> m(z.channels(), z.extent());
  for (auto& v : m.values()) v = static_cast<T>(1.0 + rng.uniform(-amplitude, amplitude));
  return m;
}

template <class T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "multiply");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

template <class T>
Tensor<T> spatial_dropout(const Tensor<T>& z, double p, Rng& rng) {
  return multiply(z, spatial_dropout_mask(z, p, rng));
}

template <class T>
Tensor<T> activation_dropout(const Tensor<T>& z, Rng& rng, std::optional<double> gamma = std::nullopt,
                             Interval range = {0.7, 0.9}) {
  const double g = gamma ? *gamma : range.sample(rng);
  return multiply(z, activation_dropout_mask(z, g));
}

template <class T>
Tensor<T> inject_noise(const Tensor<T>& z, Rng& rng, double amplitude = 0.3) {
  return multiply(z, noise_injection_mask(z, amplitude, rng));
}

template <class T>
struct PerturbedFeatures {
  FeatureMaps<T> features;
  std::vector<Tensor<T>> multipliers;
  std::vector<FeatureMode> applied;  // the concrete perturbation chosen per map
};

/// Applies one feature perturbation to every encoder map (skip inputs and bottleneck).
template <class T>
PerturbedFeatures<T> perturb_features_with_masks(const FeatureMaps<T>& f, const PerturbationConfig& cfg, Rng& rng) {
  cfg.validate();
  PerturbedFeatures<T> out;
  for (const auto& z : f.stages) {
    FeatureMode mode = cfg.feature_mode;
    if (mode == FeatureMode::random_per_map) mode = static_cast<FeatureMode>(rng.uniform_int(0, 2));
    Tensor<T> m;
    switch (mode) {
      case FeatureMode::spatial_dropout: m = spatial_dropout_mask(z, cfg.spatial_dropout_p, rng); break;
      case FeatureMode::activation_dropout: m = activation_dropout_mask(z, cfg.activation_quantile.sample(rng)); break;
      default: m = noise_injection_mask(z, cfg.noise_amplitude, rng); break;
    }
    out.features.stages.push_back(multiply(z, m));
    out.multipliers.push_back(std::move(m));
    out.applied.push_back(mode);
  }
  return out;
}

template <class T>
FeatureMaps<T> perturb_features(const FeatureMaps<T>& f, const PerturbationConfig& cfg, Rng& rng) {
  return perturb_features_with_masks(f, cfg, rng).features;
}

// ---------------------------------------------------------------------------
// Labeled-data augmentation

struct AugmentConfig {
  double rotation_p = 0.2;
  double max_rotation_deg = 30.0;
  double scaling_p = 0.2;
  Interval scale{0.7, 1.4};
  RandomTransform noise{0.1, {0.0, 0.1}};
  RandomTransform blur{0.2, {0.5, 1.0}};
  RandomTransform brightness{0.15, {0.75, 1.25}};
  RandomTransform contrast{0.15, {0.75, 1.25}};
  RandomTransform low_resolution{0.25, {1.0, 2.0}};
  double mirror_p = 0.5;  // per axis

  static AugmentConfig disabled() {
    AugmentConfig c;
    c.rotation_p = c.scaling_p = c.mirror_p = 0.0;
    c.noise.probability = c.blur.probability = c.brightness.probability = c.contrast.probability =
        c.low_resolution.probability = 0.0;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = {{"rotation_p", c.rotation_p}, {"max_rotation_deg", c.max_rotation_deg}, {"scaling_p", c.scaling_p},
       {"scale", c.scale}, {"noise", c.noise}, {"blur", c.blur}, {"brightness", c.brightness},
       {"contrast", c.contrast}, {"low_resolution", c.low_resolution}, {"mirror_p", c.mirror_p}};
}
inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  AugmentConfig d;
  c.rotation_p = j.value("rotation_p", d.rotation_p);
  c.max_rotation_deg = j.value("max_rotation_deg", d.max_rotation_deg);
  c.scaling_p = j.value("scaling_p", d.scaling_p);
  c.scale = j.value("scale", d.scale);
  c.noise = j.value("noise", d.noise);
  c.blur = j.value("blur", d.blur);
  c.brightness = j.value("brightness", d.brightness);
  c.contrast = j.value("contrast", d.contrast);
  c.low_resolution = j.value("low_resolution", d.low_resolution);
  c.mirror_p = j.value("mirror_p", d.mirror_p);
}

/// Rotation by `angle_rad` in the plane of (axis_a, axis_b) combined with isotropic `scale`, about the
/// patch centre. Image: trilinear; label: nearest. Outside samples become 0.
inline Patch affine_transform(const Patch& p, int axis_a, int axis_b, double angle_rad, double scale) {
  const Extent3 e = p.data.extent();
  Patch out = p;
  out.data = Tensor<float>(1, e);
  if (p.label) out.label = Tensor<std::uint8_t>(1, e, std::uint8_t{0});
  const double ca = std::cos(angle_rad), sa = std::sin(angle_rad);
  const std::array<double, 3> centre{(e.d - 1) / 2.0, (e.h - 1) / 2.0, (e.w - 1) / 2.0};
  for (int z = 0; z < e.d; ++z)
    for (int y = 0; y < e.h; ++y)
      for (int x = 0; x < e.w; ++x) {
        std::array<double, 3> q{z - centre[0], y - centre[1], x - centre[2]};
        // inverse map: rotate by -angle, divide by scale
        const double qa = q[static_cast<std::size_t>(axis_a)], qb = q[static_cast<std::size_t>(axis_b)];
        q[static_cast<std::size_t>(axis_a)] = ca * qa + sa * qb;
        q[static_cast<std::size_t>(axis_b)] = -sa * qa + ca * qb;
        for (int a = 0; a < 3; ++a) q[static_cast<std::size_t>(a)] = q[static_cast<std::size_t>(a)] / scale + centre[static_cast<std::size_t>(a)];
        if (p.label) {
          const int nz = static_cast<int>(std::lround(q[0])), ny = static_cast<int>(std::lround(q[1])),
                    nx = static_cast<int>(std::lround(q[2]));
          if (nz >= 0 && nz < e.d && ny >= 0 && ny < e.h && nx >= 0 && nx < e.w)
            out.label->at(0, z, y, x) = p.label->at(0, nz, ny, nx);
        }
        const int z0 = static_cast<int>(std::floor(q[0])), y0 = static_cast<int>(std::floor(q[1])),
                  x0 = static_cast<int>(std::floor(q[2]));
        const double fz = q[0] - z0, fy = q[1] - y0, fx = q[2] - x0;
        double acc = 0.0;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int zz = z0 + dz, yy = y0 + dy, xx = x0 + dx;
              if (zz < 0 || zz >= e.d || yy < 0 || yy >= e.h || xx < 0 || xx >= e.w) continue;
              const double w = (dz ? fz : 1 - fz) * (dy ? fy : 1 - fy) * (dx ? fx : 1 - fx);
              acc += w * p.data.at(0, zz, yy, xx);
            }
        out.data.at(0, z, y, x) = static_cast<float>(acc);
      }
  return out;
}

/// Spatial transforms (rotation, scaling, mirroring) on image and label alike; intensity transforms on the image.
inline Patch augment_labeled(const Patch& p, const AugmentConfig& cfg, Rng& rng) {
  require(p.label.has_value(), "augment_labeled: patch has no label");
  Patch out = p;
  const bool rotate = rng.bernoulli(cfg.rotation_p);
  const bool rescale = rng.bernoulli(cfg.scaling_p);
  if (rotate || rescale) {
    const int plane = rng.uniform_int(0, 2);
    const int a = plane == 0 ? 1 : 0, b = plane == 2 ? 1 : 2;
    const double angle = rotate ? rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * M_PI / 180.0 : 0.0;
    const double s = rescale ? cfg.scale.sample(rng) : 1.0;
    out = affine_transform(out, a, b, angle, s);
  }
  if (rng.bernoulli(cfg.noise.probability)) out.data = add_noise(out.data, cfg.noise.range.sample(rng), rng);
  if (rng.bernoulli(cfg.blur.probability)) out.data = gaussian_blur(out.data, cfg.blur.range.sample(rng));
  if (rng.bernoulli(cfg.brightness.probability)) out.data = scale_brightness(out.data, cfg.brightness.range.sample(rng));
  if (rng.bernoulli(cfg.contrast.probability)) out.data = scale_contrast(out.data, cfg.contrast.range.sample(rng));
  if (rng.bernoulli(cfg.low_resolution.probability))
    out.data = degrade_resolution(out.data, cfg.low_resolution.range.sample(rng));
  for (int axis = 0; axis < 3; ++axis) {
    if (rng.bernoulli(cfg.mirror_p)) {
      out.data = flip(out.data, axis);
      out.label = flip(*out.label, axis);
    }
  }
  return out;
}

}  // namespace semiseg
