#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "semiseg/metrics.hpp"

using namespace semiseg;

namespace {

constexpr int kClasses = 4;

SegLabel noise_label(Extent3 e, std::uint64_t seed, int classes = kClasses) {
  Rng rng(seed);
  Tensor<std::uint8_t> t(1, e);
  for (auto& v : t.values()) v = static_cast<std::uint8_t>(rng.uniform_int(0, classes - 1));
  return SegLabel(std::move(t), classes);
}

/// A few random boxes painted over background; gives contiguous regions with real surfaces.
SegLabel blob_label(Extent3 e, std::uint64_t seed, int classes = kClasses) {
  Rng rng(seed);
  Tensor<std::uint8_t> t(1, e, std::uint8_t{0});
  const int boxes = rng.uniform_int(1, 5);
  for (int b = 0; b < boxes; ++b) {
    const auto cls = static_cast<std::uint8_t>(rng.uniform_int(1, classes - 1));
    std::array<int, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
      lo[static_cast<std::size_t>(a)] = rng.uniform_int(0, e[a] - 1);
      hi[static_cast<std::size_t>(a)] = std::min(e[a], lo[static_cast<std::size_t>(a)] + rng.uniform_int(1, e[a]));
    }
    for (int z = lo[0]; z < hi[0]; ++z)
      for (int y = lo[1]; y < hi[1]; ++y)
        for (int x = lo[2]; x < hi[2]; ++x) t.at(0, z, y, x) = cls;
  }
  return SegLabel(std::move(t), classes);
}

SegLabel perturbed(const SegLabel& base, std::uint64_t seed, double flip_rate) {
  Rng rng(seed);
  SegLabel out = base;
  for (auto& v : out.data.values())
    if (rng.bernoulli(flip_rate)) v = static_cast<std::uint8_t>(rng.uniform_int(0, base.num_classes - 1));
  return out;
}

/// Instance generator mixing noisy labels, blobs, and near-copies.
std::pair<SegLabel, SegLabel> random_instance(std::uint64_t seed, Extent3 e = {8, 8, 8}) {
  switch (seed % 3) {
    case 0: return {noise_label(e, seed), noise_label(e, seed + 7919)};
    case 1: return {blob_label(e, seed), blob_label(e, seed + 7919)};
    default: {
      const SegLabel g = blob_label(e, seed);
      return {perturbed(g, seed + 1, 0.1), g};
    }
  }
}

/// Oracle IA for one case: fraction of gt-present foreground classes with IoU above one half.
std::optional<double> oracle_case_ia(const SegLabel& p, const SegLabel& g) {
  int present = 0, hit = 0;
  for (int c = 1; c < g.num_classes; ++c) {
    if (oracle::class_counts(p.data, g.data, c).b == 0) continue;
    ++present;
    hit += oracle::iou(p.data, g.data, c).value() > 0.5;
  }
  if (present == 0) return std::nullopt;
  return static_cast<double>(hit) / present;
}

std::optional<double> mean_defined(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  int n = 0;
  for (const auto& x : v)
    if (x) s += *x, ++n;
  if (n == 0) return std::nullopt;
  return s / n;
}

void expect_same(const std::optional<double>& a, const std::optional<double>& b, double tol = 1e-6) {
  ASSERT_EQ(a.has_value(), b.has_value());
  if (a) {
    EXPECT_NEAR(*a, *b, tol);
  }
}

SegLabel from_mask(Extent3 e, const std::vector<std::array<int, 3>>& voxels, int cls = 1, int classes = 2) {
  Tensor<std::uint8_t> t(1, e, std::uint8_t{0});
  for (const auto& v : voxels) t.at(0, v[0], v[1], v[2]) = static_cast<std::uint8_t>(cls);
  return SegLabel(std::move(t), classes);
}

}  // namespace

// ---- oracle equivalence -------------------------------------------------------------

TEST(MetricsOracle, AllFourMetricsMatchLoopOraclesOnHundredInstances) {
  const std::vector<Vec3> spacings{{1.0, 1.0, 1.0}, {0.3, 0.25, 0.25}, {2.0, 1.0, 0.5}};
  std::vector<std::vector<double>> ia_table;
  std::vector<std::optional<double>> oracle_ia_rows;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto [p, g] = random_instance(seed);
    const auto d = dsc(p, g), j = miou(p, g);
    const Vec3 sp = spacings[seed % spacings.size()];
    const double tol = seed % 2 ? 1.0 : 2.0;
    const auto s = nsd(p, g, tol, sp);
    std::vector<std::optional<double>> od, oj, os;
    for (int c = 1; c < kClasses; ++c) {
      od.push_back(oracle::dsc(p.data, g.data, c));
      oj.push_back(oracle::iou(p.data, g.data, c));
      os.push_back(oracle::nsd(p.data, g.data, c, tol, sp));
      expect_same(d.values[static_cast<std::size_t>(c - 1)], od.back());
      expect_same(j.values[static_cast<std::size_t>(c - 1)], oj.back());
      expect_same(s.values[static_cast<std::size_t>(c - 1)], os.back());
    }
    expect_same(d.mean, mean_defined(od));
    expect_same(j.mean, mean_defined(oj));
    expect_same(s.mean, mean_defined(os));

    const CaseMetrics cm = evaluate_case("c" + std::to_string(seed), p, g, tol, sp);
    expect_same(cm.ia, oracle_case_ia(p, g));
    ia_table.push_back(cm.gt_present_iou());
    oracle_ia_rows.push_back(oracle_case_ia(p, g));
  }
  expect_same(ia(ia_table), mean_defined(oracle_ia_rows));
}

TEST(MetricsOracle, DistanceTransformMatchesBruteForceAt12Cubed) {
  const Extent3 e{12, 12, 12};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    std::vector<std::uint8_t> set(e.voxels(), 0);
    const double density = seed == 0 ? 0.002 : rng.uniform(0.01, 0.2);
    std::vector<std::array<int, 3>> pts;
    for (int z = 0; z < e.d; ++z)
      for (int y = 0; y < e.h; ++y)
        for (int x = 0; x < e.w; ++x)
          if (rng.bernoulli(density)) {
            set[(static_cast<std::size_t>(z) * e.h + y) * e.w + x] = 1;
            pts.push_back({z, y, x});
          }
    if (pts.empty()) {
      set[0] = 1;
      pts.push_back({0, 0, 0});
    }
    const Vec3 sp{rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0)};
    const auto d2 = squared_distance_transform(set, e, sp);
    for (int z = 0; z < e.d; ++z)
      for (int y = 0; y < e.h; ++y)
        for (int x = 0; x < e.w; ++x) {
          double best = std::numeric_limits<double>::infinity();
          for (const auto& q : pts) {
            const double dz = (z - q[0]) * sp[0], dy = (y - q[1]) * sp[1], dx = (x - q[2]) * sp[2];
            best = std::min(best, dz * dz + dy * dy + dx * dx);
          }
          ASSERT_NEAR(d2[(static_cast<std::size_t>(z) * e.h + y) * e.w + x], best, 1e-6 * std::max(1.0, best));
        }
  }
}

TEST(MetricsOracle, FastNsdMatchesBruteForceOnRandom12CubedMasks) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto [p, g] = random_instance(seed, {12, 12, 12});
    for (double tol : {0.5, 1.0, 1.5, 2.0, 3.0}) {
      const auto s = nsd(p, g, tol, {0.7, 1.0, 1.3});
      for (int c = 1; c < kClasses; ++c)
        expect_same(s.values[static_cast<std::size_t>(c - 1)], oracle::nsd(p.data, g.data, c, tol, {0.7, 1.0, 1.3}));
    }
  }
}

// ---- worked examples ---------------------------------------------------------------------

TEST(Dsc, WorkedExamples) {
  const Extent3 e{4, 4, 4};
  std::vector<std::array<int, 3>> a, b;
  for (int i = 0; i < 8; ++i) a.push_back({0, i / 4, i % 4});
  for (int i = 4; i < 12; ++i) b.push_back({0, i / 4, i % 4});
  const SegLabel pa = from_mask(e, a), gb = from_mask(e, b);
  EXPECT_DOUBLE_EQ(*dsc(pa, gb).mean, 0.5);
  EXPECT_DOUBLE_EQ(*miou(pa, gb).mean, 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(*dsc(pa, pa).mean, 1.0);
  std::vector<std::array<int, 3>> far;
  for (int i = 0; i < 8; ++i) far.push_back({3, i / 4, i % 4});
  EXPECT_DOUBLE_EQ(*dsc(pa, from_mask(e, far)).mean, 0.0);
}

TEST(Dsc, ClassAbsentFromBothIsExcludedAndFromOneIsZero) {
  Tensor<std::uint8_t> g(1, {2, 2, 2}, std::uint8_t{0}), p(1, {2, 2, 2}, std::uint8_t{0});
  g[0] = 1, p[0] = 1;  // class 1 perfect
  p[1] = 2;            // class 2 only predicted
  const SegLabel pl(p, 4), gl(g, 4);
  const auto d = dsc(pl, gl);
  EXPECT_DOUBLE_EQ(*d.values[0], 1.0);
  EXPECT_DOUBLE_EQ(*d.values[1], 0.0);
  EXPECT_FALSE(d.values[2].has_value());
  EXPECT_DOUBLE_EQ(*d.mean, 0.5);
  const auto s = nsd(pl, gl, 2.0);
  EXPECT_DOUBLE_EQ(*s.values[0], 1.0);
  EXPECT_DOUBLE_EQ(*s.values[1], 0.0);
  EXPECT_FALSE(s.values[2].has_value());
}

TEST(Dsc, ShapeOrClassMismatchThrows) {
  EXPECT_THROW(dsc(noise_label({2, 2, 2}, 1), noise_label({2, 2, 3}, 1)), std::invalid_argument);
  EXPECT_THROW(miou(noise_label({2, 2, 2}, 1, 3), noise_label({2, 2, 2}, 1, 4)), std::invalid_argument);
}

TEST(Nsd, ParallelUnitSpacedSlabs) {
  const Extent3 e{8, 8, 8};
  std::vector<std::array<int, 3>> a, b;
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      a.push_back({2, y, x});
      b.push_back({3, y, x});
    }
  const SegLabel p = from_mask(e, a), g = from_mask(e, b);
  EXPECT_DOUBLE_EQ(*nsd(p, g, 1.5).mean, 1.0);
  EXPECT_DOUBLE_EQ(*nsd(p, g, 0.5).mean, 0.0);
  // physical units: doubling the slice spacing doubles the gap
  EXPECT_DOUBLE_EQ(*nsd(p, g, 1.5, {2.0, 1.0, 1.0}).mean, 0.0);
  EXPECT_DOUBLE_EQ(*nsd(p, g, 2.0, {2.0, 1.0, 1.0}).mean, 1.0);
}

TEST(Nsd, IdenticalMasksScoreOne) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SegLabel g = blob_label({10, 9, 8}, seed);
    const auto s = nsd(g, g, 0.0);
    for (const auto& v : s.values) {
      if (v) {
        EXPECT_DOUBLE_EQ(*v, 1.0);
      }
    }
  }
}

TEST(Ia, WorkedExamples) {
  EXPECT_DOUBLE_EQ(*ia({{0.6, 0.4}, {0.9}}), 0.75);
  EXPECT_DOUBLE_EQ(*ia({{1.0, 1.0}, {1.0}}), 1.0);
  EXPECT_DOUBLE_EQ(*ia({{0.5}, {0.51}}), 0.5);  // exactly one half does not count
  EXPECT_DOUBLE_EQ(*ia({{0.6, 0.4}, {}, {0.9}}), 0.75);  // no foreground: excluded
  EXPECT_FALSE(ia({{}, {}}).has_value());
}

TEST(Ia, DenominatorIsTheClassesPresentInTheGroundTruth) {
  // gt holds class 1 only; the prediction adds a spurious class 2. IA stays 1 for this case.
  Tensor<std::uint8_t> g(1, {2, 2, 2}, std::uint8_t{0}), p(1, {2, 2, 2}, std::uint8_t{0});
  g[0] = g[1] = 1;
  p[0] = p[1] = 1;
  p[2] = 2;
  const CaseMetrics cm = evaluate_case("x", SegLabel(p, 3), SegLabel(g, 3), 2.0, {1, 1, 1});
  EXPECT_EQ(cm.gt_present_iou().size(), 1u);
  EXPECT_DOUBLE_EQ(*cm.ia, 1.0);
  EXPECT_DOUBLE_EQ(*cm.dsc, 0.5);
}

TEST(AverageScore, WorkedExamples) {
  EXPECT_NEAR(average_score(0.969, 0.998, 0.940, 0.806), 0.92825, 1e-12);
  EXPECT_DOUBLE_EQ(average_score(1, 1, 1, 1), 1.0);
  EXPECT_DOUBLE_EQ(average_score(0, 1, 1, 1), 0.75);
  EXPECT_DOUBLE_EQ(average_score(1, 1, 1, 0), 0.75);
}

TEST(MetricReport, PerfectPredictionScoresOneEverywhere) {
  MetricReport r;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const SegLabel g = blob_label({12, 12, 12}, seed);
    add_case(r, "case" + std::to_string(seed), g, g, {0.5, 0.5, 0.5});
  }
  ASSERT_TRUE(r.complete());
  EXPECT_DOUBLE_EQ(*r.dsc, 1.0);
  EXPECT_DOUBLE_EQ(*r.nsd, 1.0);
  EXPECT_DOUBLE_EQ(*r.miou, 1.0);
  EXPECT_DOUBLE_EQ(*r.ia, 1.0);
  EXPECT_DOUBLE_EQ(r.average_score(), 1.0);
}

// ---- properties ----------------------------------------------------------------------------

TEST(MetricsProperty, DiceIouIdentityHoldsPerClass) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto [p, g] = random_instance(seed);
    const auto d = dsc(p, g), j = miou(p, g);
    for (std::size_t c = 0; c < d.values.size(); ++c) {
      ASSERT_EQ(d.values[c].has_value(), j.values[c].has_value());
      if (d.values[c]) {
        EXPECT_NEAR(*d.values[c], 2.0 * *j.values[c] / (1.0 + *j.values[c]), 1e-12);
      }
    }
  }
}

TEST(MetricsProperty, SymmetricInArguments) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto [p, g] = random_instance(seed);
    const auto d1 = dsc(p, g), d2 = dsc(g, p);
    const auto j1 = miou(p, g), j2 = miou(g, p);
    const auto s1 = nsd(p, g, 1.5, {1.0, 0.5, 2.0}), s2 = nsd(g, p, 1.5, {1.0, 0.5, 2.0});
    for (std::size_t c = 0; c < d1.values.size(); ++c) {
      expect_same(d1.values[c], d2.values[c], 1e-15);
      expect_same(j1.values[c], j2.values[c], 1e-15);
      expect_same(s1.values[c], s2.values[c], 1e-15);
    }
  }
}

TEST(MetricsProperty, InvariantUnderConsistentRelabeling) {
  const std::array<std::uint8_t, kClasses> perm{0, 3, 1, 2};  // foreground permutation, background fixed
  auto relabel = [&](SegLabel l) {
    for (auto& v : l.data.values()) v = perm[v];
    return l;
  };
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto [p, g] = random_instance(seed);
    const auto pp = relabel(p), gg = relabel(g);
    const auto d = dsc(p, g), dp = dsc(pp, gg);
    const auto s = nsd(p, g, 1.0), sp = nsd(pp, gg, 1.0);
    for (int c = 1; c < kClasses; ++c) {
      expect_same(d.values[static_cast<std::size_t>(c - 1)], dp.values[static_cast<std::size_t>(perm[c] - 1)], 1e-15);
      expect_same(s.values[static_cast<std::size_t>(c - 1)], sp.values[static_cast<std::size_t>(perm[c] - 1)], 1e-15);
    }
    expect_same(d.mean, dp.mean, 1e-12);
    expect_same(miou(p, g).mean, miou(pp, gg).mean, 1e-12);
    expect_same(s.mean, sp.mean, 1e-12);
    expect_same(evaluate_case("a", p, g, 1.0, {1, 1, 1}).ia, evaluate_case("a", pp, gg, 1.0, {1, 1, 1}).ia, 1e-15);
  }
}

TEST(MetricsProperty, EveryMetricLiesInTheUnitInterval) {
  MetricReport r;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto [p, g] = random_instance(seed);
    add_case(r, std::to_string(seed), p, g, {1, 1, 1});
  }
  for (const auto& c : r.cases)
    for (const auto& k : c.classes)
      for (const auto& v : {k.dsc, k.iou, k.nsd})
        if (v) {
          EXPECT_GE(*v, 0.0);
          EXPECT_LE(*v, 1.0);
        }
  for (const auto& v : {r.dsc, r.nsd, r.miou, r.ia}) {
    ASSERT_TRUE(v.has_value());
    EXPECT_GE(*v, 0.0);
    EXPECT_LE(*v, 1.0);
  }
}

// ---- reporting -------------------------------------------------------------------------------

TEST(MetricReport, CsvAndJsonCarryTheAggregates) {
  MetricReport r;
  r.tolerance_mm = 1.5;
  const auto [p1, g1] = random_instance(1);
  const auto [p2, g2] = random_instance(2);
  add_case(r, "alpha", p1, g1, {1, 1, 1});
  add_case(r, "beta", p2, g2, {1, 1, 1});

  const nlohmann::json j = summary_json(r);
  EXPECT_DOUBLE_EQ(j.at("dsc").get<double>(), *r.dsc);
  EXPECT_DOUBLE_EQ(j.at("average_score").get<double>(), r.average_score());
  EXPECT_DOUBLE_EQ(j.at("nsd_tolerance_mm").get<double>(), 1.5);
  EXPECT_EQ(j.at("cases").size(), 2u);
  EXPECT_EQ(j.at("cases")[1].at("id"), "beta");

  std::ostringstream os;
  write_csv(os, r);
  std::istringstream is(os.str());
  std::vector<std::string> lines;
  for (std::string line; std::getline(is, line);) lines.push_back(line);
  // header + (3 classes + mean) per case + aggregate
  ASSERT_EQ(lines.size(), 1u + 2u * 4u + 1u);
  EXPECT_EQ(lines.front(), "case_id,class,dsc,iou,nsd,ia,gt_present,pred_present");
  EXPECT_EQ(lines.back().rfind("aggregate,mean,", 0), 0u);
}
