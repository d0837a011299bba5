#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "semiseg/model.hpp"
#include "semiseg/objectives.hpp"
#include "semiseg/tensor.hpp"
#include "semiseg/volumes.hpp"

namespace semiseg {

enum class StitchWeighting { gaussian, uniform };

inline std::string to_string(StitchWeighting w) { return w == StitchWeighting::gaussian ? "gaussian" : "uniform"; }
inline StitchWeighting weighting_from_string(const std::string& s) {
  if (s == "gaussian") return StitchWeighting::gaussian;
  if (s == "uniform") return StitchWeighting::uniform;
  throw std::invalid_argument("unknown weighting '" + s + "' (expected gaussian or uniform)");
}

/// Mirror axes: 0 superior/inferior (depth), 1 anterior/posterior (height), 2 left/right (width).
struct InferenceConfig {
  Extent3 patch_size{32, 32, 32};
  double step_fraction = 0.5;
  std::vector<int> mirror_axes;
  StitchWeighting weighting = StitchWeighting::gaussian;

  void validate() const {
    require(step_fraction > 0.0 && step_fraction <= 1.0, "InferenceConfig: step_fraction must be in (0, 1]");
    require(patch_size.d >= 1 && patch_size.h >= 1 && patch_size.w >= 1, "InferenceConfig: empty patch size");
    std::set<int> seen;
    for (int a : mirror_axes) {
      require(a >= 0 && a <= 2, "InferenceConfig: mirror axes must be in {0, 1, 2}");
      require(seen.insert(a).second, "InferenceConfig: duplicate mirror axis");
    }
  }
};

/// Parses "1,2" style axis lists; the empty string means no mirroring.
inline std::vector<int> parse_mirror_axes(const std::string& text) {
  std::vector<int> axes;
  std::string token;
  auto flush = [&] {
    const auto b = token.find_first_not_of(" \t");
    if (b == std::string::npos) {
      token.clear();
      return;
    }
    const std::string t = token.substr(b, token.find_last_not_of(" \t") - b + 1);
    if (t != "0" && t != "1" && t != "2") throw std::invalid_argument("invalid mirror axis '" + t + "'");
    const int a = t[0] - '0';
    if (std::find(axes.begin(), axes.end(), a) != axes.end()) throw std::invalid_argument("duplicate mirror axis " + t);
    axes.push_back(a);
    token.clear();
  };
  for (char c : text) {
    if (c == ',') {
      if (token.find_first_not_of(" \t") == std::string::npos) throw std::invalid_argument("empty mirror axis in '" + text + "'");
      flush();
    } else {
      token += c;
    }
  }
  if (!text.empty()) {
    if (token.find_first_not_of(" \t") == std::string::npos) throw std::invalid_argument("empty mirror axis in '" + text + "'");
    flush();
  }
  std::sort(axes.begin(), axes.end());
  return axes;
}

inline std::string format_mirror_axes(const std::vector<int>& axes) {
  std::string s;
  for (std::size_t i = 0; i < axes.size(); ++i) s += (i ? "," : "") + std::to_string(axes[i]);
  return s;
}

/// Evenly spaced tile offsets along one axis, first tile at 0 and last flush with the end.
inline std::vector<int> axis_offsets(int extent, int patch, double step_fraction) {
  require(step_fraction > 0.0 && step_fraction <= 1.0, "tile_positions: step_fraction must be in (0, 1]");
  if (extent <= patch) return {0};
  const double target_step = step_fraction * patch;
  const int steps = static_cast<int>(std::ceil((extent - patch) / target_step - 1e-9)) + 1;
  std::vector<int> out(static_cast<std::size_t>(steps));
  const double actual = static_cast<double>(extent - patch) / (steps - 1);
  for (int i = 0; i < steps; ++i) out[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(actual * i));
  return out;
}

/// Cartesian product of per-axis offsets, raster order. Extents smaller than the patch are padded up first.
inline std::vector<std::array<int, 3>> tile_positions(Extent3 extent, Extent3 patch, double step_fraction) {
  const auto oz = axis_offsets(extent.d, patch.d, step_fraction);
  const auto oy = axis_offsets(extent.h, patch.h, step_fraction);
  const auto ox = axis_offsets(extent.w, patch.w, step_fraction);
  std::vector<std::array<int, 3>> out;
  out.reserve(oz.size() * oy.size() * ox.size());
  for (int z : oz)
    for (int y : oy)
      for (int x : ox) out.push_back({z, y, x});
  return out;
}

/// Per-voxel tile weight: separable Gaussian (sigma = patch / 8, max 1, floor 1e-8) or all ones.
inline Tensor<float> stitch_weight(Extent3 patch, StitchWeighting weighting) {
  Tensor<float> w(1, patch, 1.0f);
  if (weighting == StitchWeighting::uniform) return w;
  std::array<std::vector<double>, 3> g;
  for (int a = 0; a < 3; ++a) {
    const double sigma = patch[a] / 8.0;
    const double centre = (patch[a] - 1) / 2.0;
    g[static_cast<std::size_t>(a)].resize(static_cast<std::size_t>(patch[a]));
    for (int i = 0; i < patch[a]; ++i) {
      const double d = i - centre;
      g[static_cast<std::size_t>(a)][static_cast<std::size_t>(i)] = sigma > 0 ? std::exp(-0.5 * d * d / (sigma * sigma)) : 1.0;
    }
    const double mx = *std::max_element(g[static_cast<std::size_t>(a)].begin(), g[static_cast<std::size_t>(a)].end());
    for (auto& v : g[static_cast<std::size_t>(a)]) v /= mx;
  }
  for (int z = 0; z < patch.d; ++z)
    for (int y = 0; y < patch.h; ++y)
      for (int x = 0; x < patch.w; ++x)
        w.at(0, z, y, x) = static_cast<float>(std::max(
            1e-8, g[0][static_cast<std::size_t>(z)] * g[1][static_cast<std::size_t>(y)] * g[2][static_cast<std::size_t>(x)]));
  return w;
}

/// Maps a normalized single-channel patch to per-class probabilities (C x patch).
using Predictor = std::function<Tensor<float>(const Tensor<float>&)>;

template <class T>
Predictor make_predictor(const UNet<T>& net) {
  return [&net](const Tensor<float>& x) {
    if constexpr (std::is_same_v<T, float>) {
      return softmax(net.forward(x));
    } else {
      return softmax(net.forward(x.template cast<T>())).template cast<float>();
    }
  };
}

struct InferenceStats {
  std::size_t tiles = 0;
  std::size_t forward_passes = 0;
};

/// Averages the predictor's probabilities over every flip combination of `mirror_axes`.
/// The sum is kept in double, so identical members average back to themselves bit for bit.
inline Tensor<float> tta_mirror(const Predictor& predict, const Tensor<float>& patch, const std::vector<int>& mirror_axes,
                                InferenceStats* stats = nullptr) {
  const std::size_t combos = std::size_t{1} << mirror_axes.size();
  Tensor<float> first;
  std::vector<double> acc;
  for (std::size_t mask = 0; mask < combos; ++mask) {
    Tensor<float> x = patch;
    for (std::size_t b = 0; b < mirror_axes.size(); ++b)
      if (mask & (std::size_t{1} << b)) x = flip(x, mirror_axes[b]);
    Tensor<float> p = predict(x);
    if (stats) ++stats->forward_passes;
    for (std::size_t b = mirror_axes.size(); b-- > 0;)
      if (mask & (std::size_t{1} << b)) p = flip(p, mirror_axes[b]);
    if (combos == 1) return p;
    if (first.empty()) {
      acc.assign(p.values().begin(), p.values().end());
      first = std::move(p);
    } else {
      require_same_shape(first, p, "tta_mirror");
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += p[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(combos);
  for (std::size_t i = 0; i < acc.size(); ++i) first[i] = static_cast<float>(acc[i] * inv);
  return first;
}

/// Tiled prediction over a whole (preprocessed) volume; returns C x extent probabilities.
inline Tensor<float> sliding_window_predict(const Predictor& predict, const Tensor<float>& volume, int num_classes,
                                            const InferenceConfig& cfg, InferenceStats* stats = nullptr) {
  cfg.validate();
  require(volume.channels() == 1, "sliding_window_predict: expected a single-channel volume");
  const Extent3 orig = volume.extent();
  const Extent3 patch = cfg.patch_size;
  Extent3 padded;
  for (int a = 0; a < 3; ++a) padded[a] = std::max(orig[a], patch[a]);
  const Tensor<float> vol = padded == orig ? volume : crop(volume, {0, 0, 0}, padded, 0.0f);

  const Tensor<float> weight = stitch_weight(patch, cfg.weighting);
  Tensor<float> acc(num_classes, padded, 0.0f);
  Tensor<float> wsum(1, padded, 0.0f);
  const auto tiles = tile_positions(padded, patch, cfg.step_fraction);
  for (const auto& off : tiles) {
    const Tensor<float> probs = tta_mirror(predict, crop(vol, off, patch, 0.0f), cfg.mirror_axes, stats);
    require(probs.channels() == num_classes && probs.extent() == patch, "sliding_window_predict: predictor output shape mismatch");
    for (int z = 0; z < patch.d; ++z)
      for (int y = 0; y < patch.h; ++y)
        for (int x = 0; x < patch.w; ++x) {
          const float w = weight.at(0, z, y, x);
          const int vz = z + off[0], vy = y + off[1], vx = x + off[2];
          for (int c = 0; c < num_classes; ++c) acc.at(c, vz, vy, vx) += w * probs.at(c, z, y, x);
          wsum.at(0, vz, vy, vx) += w;
        }
  }
  if (stats) stats->tiles += tiles.size();
  Tensor<float> out(num_classes, orig);
  for (int c = 0; c < num_classes; ++c)
    for (int z = 0; z < orig.d; ++z)
      for (int y = 0; y < orig.h; ++y)
        for (int x = 0; x < orig.w; ++x) out.at(c, z, y, x) = acc.at(c, z, y, x) / wsum.at(0, z, y, x);
  return out;
}

/// Per-voxel argmax over classes (ties resolve to the lower index).
inline SegLabel argmax_label(const Tensor<float>& probs) {
  const int C = probs.channels();
  const std::size_t V = probs.voxels();
  Tensor<std::uint8_t> lab(1, probs.extent());
  for (std::size_t v = 0; v < V; ++v) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (probs[static_cast<std::size_t>(c) * V + v] > probs[static_cast<std::size_t>(best) * V + v]) best = c;
    lab[v] = static_cast<std::uint8_t>(best);
  }
  return SegLabel(std::move(lab), C);
}

/// Preprocessing used for both training and inference.
struct Preprocessing {
  std::optional<Vec3> target_spacing;  // resample to this spacing when set
  double p_low = 0.5;
  double p_high = 99.5;

  Volume apply(const Volume& v) const {
    const Volume r = target_spacing ? resample(v, *target_spacing) : v;
    return clip_normalize(r, p_low, p_high);
  }
};

/// Full-volume prediction in the original voxel grid: preprocess, tile, argmax, resample back.
inline SegLabel predict_case(const Predictor& predict, const Volume& volume, int num_classes, const InferenceConfig& cfg,
                             const Preprocessing& prep, InferenceStats* stats = nullptr) {
  const Volume pre = prep.apply(volume);
  SegLabel lab = argmax_label(sliding_window_predict(predict, pre.data, num_classes, cfg, stats));
  if (lab.extent() != volume.extent()) lab.data = resize_nearest(lab.data, volume.extent());
  return lab;
}

}  // namespace semiseg
