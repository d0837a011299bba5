#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "semiseg/corruption.hpp"
#include "semiseg/objectives.hpp"

using namespace semiseg;

namespace {

Tensor<float> random_patch(Extent3 e, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<float> t(1, e);
  for (auto& v : t.values()) v = static_cast<float>(rng.normal());
  return t;
}

double total_variation(const Tensor<float>& t) {
  const Extent3 e = t.extent();
  double tv = 0.0;
  for (int z = 0; z < e.d; ++z)
    for (int y = 0; y < e.h; ++y)
      for (int x = 0; x < e.w; ++x) {
        if (z + 1 < e.d) tv += std::abs(t.at(0, z + 1, y, x) - t.at(0, z, y, x));
        if (y + 1 < e.h) tv += std::abs(t.at(0, z, y + 1, x) - t.at(0, z, y, x));
        if (x + 1 < e.w) tv += std::abs(t.at(0, z, y, x + 1) - t.at(0, z, y, x));
      }
  return tv;
}

CorruptionConfig identity_config() {
  CorruptionConfig c;
  c.noise_sigma = {0.0, 0.0};
  c.downsample_factor = {1.0, 1.0};
  c.mask_ratio = 0.0;
  return c;
}

}  // namespace

TEST(AddNoise, ZeroSigmaIsBitExact) {
  const auto x = random_patch({8, 8, 8}, 1);
  Rng rng(2);
  EXPECT_EQ(add_noise(x, 0.0, rng), x);
}

TEST(AddNoise, SampleMomentsMatchSigma) {
  const Extent3 e{64, 64, 64};
  const auto x = random_patch(e, 3);
  const double sigma = 0.1;
  Rng rng(4);
  const auto y = add_noise(x, sigma, rng);
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) mean += static_cast<double>(y[i]) - x[i];
  mean /= n;
  double var = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(y[i]) - x[i] - mean;
    var += d * d;
  }
  var /= n - 1;
  EXPECT_NEAR(var, sigma * sigma, 0.05 * sigma * sigma);
  EXPECT_LE(std::abs(mean), 3.0 * sigma / std::sqrt(n));
}

TEST(AddNoise, NegativeSigmaRejected) {
  Rng rng(0);
  EXPECT_THROW(add_noise(random_patch({2, 2, 2}, 0), -0.1, rng), std::invalid_argument);
}

TEST(DegradeResolution, UnitFactorIsIdentity) {
  const auto x = random_patch({12, 10, 8}, 5);
  const auto y = degrade_resolution(x, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-6);
}

TEST(DegradeResolution, ConstantPatchUnchangedForAnyFactor) {
  const Tensor<float> x(1, {16, 16, 16}, 0.625f);
  for (double f : {1.0, 1.3, 2.0, 2.7, 4.0}) {
    const auto y = degrade_resolution(x, f);
    ASSERT_EQ(y.extent(), x.extent());
    for (float v : y.values()) EXPECT_NEAR(v, 0.625f, 1e-6);
  }
}

TEST(DegradeResolution, StripesBecomeSmoother) {
  Tensor<float> x(1, {16, 16, 16});
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int xx = 0; xx < 16; ++xx) x.at(0, z, y, xx) = static_cast<float>(xx % 2);
  const auto y = degrade_resolution(x, 2.0);
  EXPECT_EQ(y.extent(), x.extent());
  EXPECT_LT(total_variation(y), total_variation(x));
}

TEST(DegradeResolution, FactorBelowOneRejected) {
  EXPECT_THROW(degrade_resolution(random_patch({4, 4, 4}, 0), 0.5), std::invalid_argument);
}

TEST(MaskCubes, ZeroRatioLeavesPatchUntouched) {
  const auto x = random_patch({16, 16, 16}, 6);
  CorruptionConfig cfg;
  cfg.mask_ratio = 0.0;
  Rng rng(7);
  const auto m = mask_cubes(x, cfg, rng);
  EXPECT_EQ(m.data, x);
  for (auto v : m.mask.values()) EXPECT_EQ(v, 0);
  EXPECT_TRUE(m.cubes.empty());
}

TEST(MaskCubes, AchievedFractionWithinOneCubeOfTarget) {
  const Extent3 e{32, 32, 32};
  const auto x = random_patch(e, 8);
  for (double ratio : {0.05, 0.2, 0.3, 0.5}) {
    CorruptionConfig cfg;
    cfg.mask_ratio = ratio;
    const Extent3 cube = cfg.cube_for(e);
    const double cube_share = static_cast<double>(cube.voxels()) / static_cast<double>(e.voxels());
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      const auto m = mask_cubes(x, cfg, rng);
      std::size_t count = 0;
      for (auto v : m.mask.values()) count += v;
      const double frac = static_cast<double>(count) / static_cast<double>(e.voxels());
      EXPECT_GE(frac, ratio);
      EXPECT_LE(frac, ratio + cube_share + 1e-12);
    }
  }
}

TEST(MaskCubes, MaskIsExactlyTheUnionOfPlacedCubes) {
  const Extent3 e{16, 24, 20};
  const auto x = random_patch(e, 9);
  CorruptionConfig cfg;
  cfg.cube_size = {3, 5, 4};
  cfg.mask_ratio = 0.4;
  Rng rng(10);
  const auto m = mask_cubes(x, cfg, rng);
  for (int z = 0; z < e.d; ++z)
    for (int y = 0; y < e.h; ++y)
      for (int xx = 0; xx < e.w; ++xx) {
        bool covered = false;
        for (const auto& c : m.cubes) covered = covered || c.contains(z, y, xx);
        EXPECT_EQ(m.mask.at(0, z, y, xx) != 0, covered);
        if (covered) {
          EXPECT_EQ(m.data.at(0, z, y, xx), 0.0f);
        } else {
          EXPECT_EQ(m.data.at(0, z, y, xx), x.at(0, z, y, xx));
        }
      }
}

TEST(MaskCubes, DefaultCubeIsOneEighthOfThePatch) {
  CorruptionConfig cfg;
  EXPECT_EQ(cfg.cube_for({32, 64, 16}), (Extent3{4, 8, 2}));
}

TEST(CorruptionConfig, RejectsInvalidSettings) {
  const Extent3 patch{16, 16, 16};
  CorruptionConfig c;
  c.mask_ratio = 0.6;
  EXPECT_THROW(c.validate(patch), std::invalid_argument);
  c = CorruptionConfig{};
  c.cube_size = {16, 2, 2};
  EXPECT_THROW(c.validate(patch), std::invalid_argument);
  c = CorruptionConfig{};
  c.downsample_factor = {0.5, 2.0};
  EXPECT_THROW(c.validate(patch), std::invalid_argument);
  c = CorruptionConfig{};
  c.noise_sigma = {-0.1, 0.2};
  EXPECT_THROW(c.validate(patch), std::invalid_argument);
  EXPECT_NO_THROW(CorruptionConfig{}.validate(patch));
}

TEST(Corrupt, IdentitySettingsReturnInput) {
  const auto x = random_patch({16, 16, 16}, 11);
  Rng rng(12);
  const auto m = corrupt(x, identity_config(), rng);
  EXPECT_EQ(m.data, x);
}

TEST(Corrupt, DeterministicForFixedSeed) {
  const auto x = random_patch({16, 16, 16}, 13);
  const CorruptionConfig cfg;
  Rng a(99), b(99);
  const auto ma = corrupt(x, cfg, a);
  const auto mb = corrupt(x, cfg, b);
  EXPECT_EQ(ma.data, mb.data);
  EXPECT_EQ(ma.mask, mb.mask);
}

TEST(Corrupt, MaskedVoxelsAreExactlyZeroAndShapeIsKept) {
  const auto x = random_patch({32, 32, 32}, 14);
  CorruptionConfig cfg;
  cfg.noise_sigma = {0.2, 0.2};
  cfg.downsample_factor = {2.0, 2.0};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    const auto m = corrupt(x, cfg, rng);
    ASSERT_TRUE(m.data.same_shape(x));
    std::size_t masked = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (m.mask[i]) {
        ++masked;
        EXPECT_EQ(m.data[i], 0.0f);
      }
    EXPECT_GT(masked, 0u);
  }
}

TEST(DaeLoss, NonNegativeSymmetricAndZeroOnlyWhenEqual) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto a = random_patch({4, 4, 4}, seed);
    const auto b = random_patch({4, 4, 4}, seed + 100);
    const double ab = dae_loss(a, b).value, ba = dae_loss(b, a).value;
    EXPECT_GT(ab, 0.0);
    EXPECT_DOUBLE_EQ(ab, ba);
    EXPECT_EQ(dae_loss(a, a).value, 0.0);
  }
}

TEST(DaeLoss, PerfectAutoencoderUnderIdentityCorruptionHasZeroLoss) {
  const auto x = random_patch({16, 16, 16}, 15);
  Rng rng(16);
  const auto m = corrupt(x, identity_config(), rng);
  EXPECT_EQ(dae_loss(m.data, x).value, 0.0);
}
