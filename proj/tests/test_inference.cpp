#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <vector>

#include "semiseg/inference.hpp"

using namespace semiseg;

namespace {

Tensor<float> random_volume(Extent3 e, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(1, e);
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

/// Three-class voxel-wise predictor: probabilities depend only on the voxel's own intensity.
Tensor<float> pointwise_probs(const Tensor<float>& x) {
  Tensor<float> logits(3, x.extent());
  const std::size_t V = x.voxels();
  for (std::size_t v = 0; v < V; ++v) {
    logits[v] = x[v];
    logits[V + v] = -x[v];
    logits[2 * V + v] = 0.5f * x[v] * x[v];
  }
  return softmax(logits);
}

/// Reference placement: brute-force check that `offs` starts at 0, ends flush, and is evenly spaced.
void expect_even_flush(const std::vector<int>& offs, int extent, int patch) {
  ASSERT_FALSE(offs.empty());
  EXPECT_EQ(offs.front(), 0);
  if (extent <= patch) {
    EXPECT_EQ(offs.size(), 1u);
    return;
  }
  EXPECT_EQ(offs.back(), extent - patch);
  if (offs.size() < 3) return;
  const double ideal = static_cast<double>(extent - patch) / static_cast<double>(offs.size() - 1);
  for (std::size_t i = 1; i < offs.size(); ++i) EXPECT_LE(std::abs((offs[i] - offs[i - 1]) - ideal), 1.0);
}

}  // namespace

// ---- tile placement ---------------------------------------------------------------

TEST(TilePositions, WorkedExamples) {
  EXPECT_EQ(axis_offsets(100, 64, 0.5), (std::vector<int>{0, 18, 36}));
  EXPECT_EQ(axis_offsets(100, 64, 0.9), (std::vector<int>{0, 36}));
  EXPECT_EQ(axis_offsets(64, 64, 0.5), (std::vector<int>{0}));
  EXPECT_EQ(axis_offsets(40, 64, 0.5), (std::vector<int>{0}));
  EXPECT_EQ(tile_positions({64, 64, 64}, {64, 64, 64}, 0.3).size(), 1u);
}

TEST(TilePositions, StepCountFollowsCeilingRule) {
  // steps = ceil((extent - patch) / (f * patch)) + 1
  EXPECT_EQ(axis_offsets(128, 80, 0.5).size(), 3u);
  EXPECT_EQ(axis_offsets(128, 80, 0.9).size(), 2u);
  EXPECT_EQ(tile_positions({128, 128, 128}, {80, 80, 80}, 0.5).size(), 27u);
  EXPECT_EQ(tile_positions({128, 128, 128}, {80, 80, 80}, 0.9).size(), 8u);
  // exact multiples do not add a spurious extra step
  EXPECT_EQ(axis_offsets(96, 32, 1.0), (std::vector<int>{0, 32, 64}));
  EXPECT_EQ(axis_offsets(96, 32, 0.5), (std::vector<int>{0, 16, 32, 48, 64}));
}

TEST(TilePositions, RandomGeometriesCoverEveryVoxelAndAreMonotone) {
  Rng rng(1);
  const std::vector<double> fractions{0.25, 0.33, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  for (int trial = 0; trial < 200; ++trial) {
    Extent3 patch{rng.uniform_int(4, 24), rng.uniform_int(4, 24), rng.uniform_int(4, 24)};
    Extent3 extent{patch.d + rng.uniform_int(0, 60), patch.h + rng.uniform_int(0, 60), patch.w + rng.uniform_int(0, 60)};
    std::size_t previous = std::numeric_limits<std::size_t>::max();
    for (double f : fractions) {
      const auto tiles = tile_positions(extent, patch, f);
      EXPECT_LE(tiles.size(), previous) << "non-monotone at f=" << f;
      previous = tiles.size();
      for (int a = 0; a < 3; ++a) {
        const auto offs = axis_offsets(extent[a], patch[a], f);
        expect_even_flush(offs, extent[a], patch[a]);
        const int expected = static_cast<int>(std::ceil((extent[a] - patch[a]) / (f * patch[a]) - 1e-9)) + 1;
        EXPECT_EQ(static_cast<int>(offs.size()), extent[a] == patch[a] ? 1 : expected);
        std::vector<char> covered(static_cast<std::size_t>(extent[a]), 0);
        for (int o : offs) {
          ASSERT_GE(o, 0);
          ASSERT_LE(o + patch[a], extent[a]);
          for (int i = o; i < o + patch[a]; ++i) covered[static_cast<std::size_t>(i)] = 1;
        }
        EXPECT_TRUE(std::all_of(covered.begin(), covered.end(), [](char c) { return c == 1; }));
      }
    }
  }
}

TEST(TilePositions, RejectsStepFractionOutsideUnitInterval) {
  EXPECT_THROW(axis_offsets(100, 64, 0.0), std::invalid_argument);
  EXPECT_THROW(axis_offsets(100, 64, 1.5), std::invalid_argument);
}

// ---- stitch weights -----------------------------------------------------------------

TEST(StitchWeight, UniformIsAllOnes) {
  const auto w = stitch_weight({5, 6, 7}, StitchWeighting::uniform);
  for (float v : w.values()) EXPECT_EQ(v, 1.0f);
}

TEST(StitchWeight, GaussianPeaksAtOneAndMatchesClosedForm) {
  const Extent3 p{17, 16, 9};
  const auto w = stitch_weight(p, StitchWeighting::gaussian);
  EXPECT_FLOAT_EQ(*std::max_element(w.values().begin(), w.values().end()), 1.0f);
  EXPECT_FLOAT_EQ(w.at(0, 8, 7, 4), 1.0f);
  EXPECT_FLOAT_EQ(w.at(0, 8, 8, 4), 1.0f);
  // odd axis: centre 8, sigma 17/8
  const double s = 17.0 / 8.0;
  EXPECT_NEAR(w.at(0, 5, 7, 4), std::exp(-0.5 * 9.0 / (s * s)), 1e-6);
  for (float v : w.values()) EXPECT_GE(v, 1e-8f);
}

TEST(StitchWeight, GaussianIsFlipSymmetricAndDecreasesTowardFaces) {
  const Extent3 p{12, 15, 10};
  const auto w = stitch_weight(p, StitchWeighting::gaussian);
  for (int a = 0; a < 3; ++a) EXPECT_EQ(flip(w, a), w);
  // along each centre line, from the centre outwards
  for (int z = 6; z + 1 < p.d; ++z) EXPECT_GT(w.at(0, z, 7, 5), w.at(0, z + 1, 7, 5));
  for (int y = 7; y + 1 < p.h; ++y) EXPECT_GT(w.at(0, 6, y, 5), w.at(0, 6, y + 1, 5));
  for (int x = 5; x + 1 < p.w; ++x) EXPECT_GT(w.at(0, 6, 7, x), w.at(0, 6, 7, x + 1));
}

TEST(StitchWeight, FloorAppliesForLargePatches) {
  const auto w = stitch_weight({128, 128, 128}, StitchWeighting::gaussian);
  EXPECT_EQ(w.at(0, 0, 0, 0), 1e-8f);
}

// ---- mirror TTA -------------------------------------------------------------------

TEST(MirrorAxes, ParsesCommaLists) {
  EXPECT_EQ(parse_mirror_axes("1,2"), (std::vector<int>{1, 2}));
  EXPECT_EQ(parse_mirror_axes(""), (std::vector<int>{}));
  EXPECT_EQ(parse_mirror_axes("2, 0"), (std::vector<int>{0, 2}));
  EXPECT_EQ(parse_mirror_axes("0,1,2"), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(format_mirror_axes({1, 2}), "1,2");
  EXPECT_THROW(parse_mirror_axes("3"), std::invalid_argument);
  EXPECT_THROW(parse_mirror_axes("1,1"), std::invalid_argument);
  EXPECT_THROW(parse_mirror_axes("1,"), std::invalid_argument);
  EXPECT_THROW(parse_mirror_axes("x"), std::invalid_argument);
}

TEST(TtaMirror, PointwiseModelIsAnExactNoOp) {
  const auto x = random_volume({8, 10, 6}, 2);
  const Predictor predict = pointwise_probs;
  const auto plain = predict(x);
  for (const auto& axes : std::vector<std::vector<int>>{{}, {0}, {1, 2}, {0, 1, 2}}) {
    const auto tta = tta_mirror(predict, x, axes);
    ASSERT_TRUE(tta.same_shape(plain));
    EXPECT_EQ(tta, plain);
  }
}

TEST(TtaMirror, ForwardPassCountIsTwoToTheNumberOfAxes) {
  const auto x = random_volume({4, 4, 4}, 3);
  int calls = 0;
  const Predictor counting = [&calls](const Tensor<float>& t) {
    ++calls;
    return pointwise_probs(t);
  };
  const std::vector<std::pair<std::vector<int>, int>> cases{{{}, 1}, {{2}, 2}, {{1, 2}, 4}, {{0, 1, 2}, 8}};
  for (const auto& [axes, expected] : cases) {
    calls = 0;
    InferenceStats stats;
    tta_mirror(counting, x, axes, &stats);
    EXPECT_EQ(calls, expected);
    EXPECT_EQ(stats.forward_passes, static_cast<std::size_t>(expected));
  }
}

TEST(TtaMirror, UndoesTheFlipBeforeAveraging) {
  // A predictor that marks voxel (0,0,0) of whatever it sees: after un-flipping, each flip
  // combination marks a different corner, so the average spreads mass over 4 corners.
  const Predictor corner = [](const Tensor<float>& t) {
    Tensor<float> p(2, t.extent(), 0.0f);
    for (std::size_t v = 0; v < t.voxels(); ++v) p[v] = 1.0f;
    p[0] = 0.0f;
    p[t.voxels()] = 1.0f;
    return p;
  };
  const auto out = tta_mirror(corner, random_volume({4, 4, 4}, 4), {1, 2});
  EXPECT_FLOAT_EQ(out.at(1, 0, 0, 0), 0.25f);
  EXPECT_FLOAT_EQ(out.at(1, 0, 3, 0), 0.25f);
  EXPECT_FLOAT_EQ(out.at(1, 0, 0, 3), 0.25f);
  EXPECT_FLOAT_EQ(out.at(1, 0, 3, 3), 0.25f);
  EXPECT_FLOAT_EQ(out.at(1, 3, 0, 0), 0.0f);
}

// ---- sliding window ---------------------------------------------------------------

TEST(SlidingWindow, SingleTileEqualsDirectForward) {
  ModelConfig cfg;
  cfg.patch_size = {16, 16, 16};
  cfg.num_stages = 3;
  const UNet<float> net(cfg, 5);
  const auto x = random_volume(cfg.patch_size, 6);
  const Predictor predict = make_predictor(net);
  const auto direct = predict(x);
  for (auto w : {StitchWeighting::gaussian, StitchWeighting::uniform}) {
    InferenceConfig ic;
    ic.patch_size = cfg.patch_size;
    ic.weighting = w;
    InferenceStats stats;
    const auto tiled = sliding_window_predict(predict, x, cfg.num_classes, ic, &stats);
    EXPECT_EQ(stats.tiles, 1u);
    for (std::size_t i = 0; i < direct.size(); ++i) ASSERT_NEAR(tiled[i], direct[i], 1e-6);
  }
}

TEST(SlidingWindow, ConstantStubGivesConstantOutputUnderOverlap) {
  const Predictor constant = [](const Tensor<float>& t) {
    Tensor<float> p(3, t.extent());
    const std::size_t V = t.voxels();
    for (std::size_t v = 0; v < V; ++v) {
      p[v] = 0.2f;
      p[V + v] = 0.3f;
      p[2 * V + v] = 0.5f;
    }
    return p;
  };
  for (auto w : {StitchWeighting::uniform, StitchWeighting::gaussian}) {
    InferenceConfig ic;
    ic.patch_size = {8, 8, 8};
    ic.step_fraction = 0.4;
    ic.weighting = w;
    const auto out = sliding_window_predict(constant, random_volume({21, 13, 17}, 7), 3, ic);
    const std::size_t V = out.voxels();
    for (std::size_t v = 0; v < V; ++v) {
      ASSERT_NEAR(out[v], 0.2f, 1e-6);
      ASSERT_NEAR(out[V + v], 0.3f, 1e-6);
      ASSERT_NEAR(out[2 * V + v], 0.5f, 1e-6);
    }
  }
}

TEST(SlidingWindow, OutputIsAPerVoxelSimplex) {
  InferenceConfig ic;
  ic.patch_size = {8, 8, 8};
  ic.step_fraction = 0.5;
  ic.mirror_axes = {0, 2};
  const auto out = sliding_window_predict(pointwise_probs, random_volume({19, 11, 23}, 8), 3, ic);
  const std::size_t V = out.voxels();
  for (std::size_t v = 0; v < V; ++v) {
    const double s = static_cast<double>(out[v]) + out[V + v] + out[2 * V + v];
    ASSERT_NEAR(s, 1.0, 1e-5);
  }
}

TEST(SlidingWindow, PointwiseModelIsReproducedExactlyAcrossTiles) {
  const auto x = random_volume({20, 20, 20}, 9);
  InferenceConfig ic;
  ic.patch_size = {8, 8, 8};
  ic.step_fraction = 0.5;
  const auto tiled = sliding_window_predict(pointwise_probs, x, 3, ic);
  const auto direct = pointwise_probs(x);
  for (std::size_t i = 0; i < direct.size(); ++i) ASSERT_NEAR(tiled[i], direct[i], 1e-6);
}

TEST(SlidingWindow, SmallVolumeIsPaddedUpToThePatch) {
  const auto x = random_volume({5, 9, 3}, 10);
  InferenceConfig ic;
  ic.patch_size = {8, 8, 8};
  InferenceStats stats;
  const auto out = sliding_window_predict(pointwise_probs, x, 3, ic, &stats);
  EXPECT_EQ(out.extent(), x.extent());
  EXPECT_EQ(stats.tiles, 2u);  // only the height axis needs two tiles
  const auto direct = pointwise_probs(x);
  for (std::size_t i = 0; i < direct.size(); ++i) ASSERT_NEAR(out[i], direct[i], 1e-6);
}

TEST(SlidingWindow, ForwardPassesScaleWithTilesTimesFlips) {
  const auto x = random_volume({128, 128, 128}, 11);
  const Predictor cheap = [](const Tensor<float>& t) { return Tensor<float>(2, t.extent(), 0.5f); };
  for (const auto& [f, tiles] : std::vector<std::pair<double, std::size_t>>{{0.5, 27}, {0.9, 8}}) {
    InferenceConfig ic;
    ic.patch_size = {80, 80, 80};
    ic.step_fraction = f;
    ic.mirror_axes = {0, 1, 2};
    InferenceStats stats;
    sliding_window_predict(cheap, x, 2, ic, &stats);
    EXPECT_EQ(stats.tiles, tiles);
    EXPECT_EQ(stats.forward_passes, 8 * tiles);
  }
}

TEST(SlidingWindow, ArgmaxLabelPrefersLowerIndexOnTies) {
  Tensor<float> p(3, {1, 1, 2});
  p[0] = 0.4f, p[1] = 0.2f;
  p[2] = 0.4f, p[3] = 0.2f;
  p[4] = 0.2f, p[5] = 0.6f;
  const SegLabel lab = argmax_label(p);
  EXPECT_EQ(lab.data[0], 0);
  EXPECT_EQ(lab.data[1], 2);
  EXPECT_EQ(lab.num_classes, 3);
}

TEST(PredictCase, ReturnsLabelOnTheOriginalGrid) {
  Tensor<float> img = random_volume({12, 20, 10}, 12);
  const Volume v(img, {1.0, 0.5, 1.0});
  Preprocessing prep;
  prep.target_spacing = Vec3{1.0, 1.0, 1.0};
  InferenceConfig ic;
  ic.patch_size = {8, 8, 8};
  const SegLabel lab = predict_case(pointwise_probs, v, 3, ic, prep);
  EXPECT_EQ(lab.extent(), v.extent());
}

TEST(InferenceConfig, ValidationRejectsBadSettings) {
  InferenceConfig c;
  c.step_fraction = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = InferenceConfig{};
  c.mirror_axes = {1, 1};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.mirror_axes = {3};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_EQ(weighting_from_string("uniform"), StitchWeighting::uniform);
  EXPECT_THROW(weighting_from_string("box"), std::invalid_argument);
}
