#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/tensor.hpp"
#include "semiseg/volumes.hpp"

namespace semiseg {

/// Per-foreground-class values (index c-1 holds class c) and their mean over defined entries.
struct ClassValues {
  std::vector<std::optional<double>> values;
  std::optional<double> mean;
};

namespace detail {

inline void require_comparable(const SegLabel& pred, const SegLabel& gt, const char* what) {
  require(pred.num_classes == gt.num_classes, std::string(what) + ": class count mismatch");
  require(pred.extent() == gt.extent(), std::string(what) + ": shape mismatch (" + pred.extent().str() + " vs " +
                                            gt.extent().str() + ")");
}

/// counts[p * C + g] = voxels with predicted class p and true class g.
inline std::vector<std::size_t> confusion(const SegLabel& pred, const SegLabel& gt) {
  const auto C = static_cast<std::size_t>(gt.num_classes);
  std::vector<std::size_t> counts(C * C, 0);
  const auto& p = pred.data.values();
  const auto& g = gt.data.values();
  for (std::size_t i = 0; i < p.size(); ++i) ++counts[p[i] * C + g[i]];
  return counts;
}

inline std::optional<double> mean_of(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& x : v)
    if (x) {
      s += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

struct Overlap {
  std::size_t pred = 0, gt = 0, inter = 0;
};

inline std::vector<Overlap> overlaps(const SegLabel& pred, const SegLabel& gt) {
  const auto counts = confusion(pred, gt);
  const auto C = static_cast<std::size_t>(gt.num_classes);
  std::vector<Overlap> out(C);
  for (std::size_t p = 0; p < C; ++p)
    for (std::size_t g = 0; g < C; ++g) {
      out[p].pred += counts[p * C + g];
      out[g].gt += counts[p * C + g];
    }
  for (std::size_t c = 0; c < C; ++c) out[c].inter = counts[c * C + c];
  return out;
}

}  // namespace detail

inline ClassValues dsc(const SegLabel& pred, const SegLabel& gt) {
  detail::require_comparable(pred, gt, "dsc");
  const auto ov = detail::overlaps(pred, gt);
  ClassValues out;
  for (std::size_t c = 1; c < ov.size(); ++c) {
    const auto& o = ov[c];
    if (o.pred + o.gt == 0) {
      out.values.emplace_back();
    } else {
      out.values.emplace_back(2.0 * static_cast<double>(o.inter) / static_cast<double>(o.pred + o.gt));
    }
  }
  out.mean = detail::mean_of(out.values);
  return out;
}

inline ClassValues miou(const SegLabel& pred, const SegLabel& gt) {
  detail::require_comparable(pred, gt, "miou");
  const auto ov = detail::overlaps(pred, gt);
  ClassValues out;
  for (std::size_t c = 1; c < ov.size(); ++c) {
    const auto& o = ov[c];
    const std::size_t uni = o.pred + o.gt - o.inter;
    if (uni == 0) {
      out.values.emplace_back();
    } else {
      out.values.emplace_back(static_cast<double>(o.inter) / static_cast<double>(uni));
    }
  }
  out.mean = detail::mean_of(out.values);
  return out;
}

/// Mask voxels with at least one face neighbour outside the mask; the volume exterior counts as outside.
inline std::vector<std::uint8_t> boundary_mask(const Tensor<std::uint8_t>& label, std::uint8_t cls) {
  const Extent3 e = label.extent();
  std::vector<std::uint8_t> out(e.voxels(), 0);
  auto inside = [&](int z, int y, int x) {
    return z >= 0 && y >= 0 && x >= 0 && z < e.d && y < e.h && x < e.w && label.at(0, z, y, x) == cls;
  };
  for (int z = 0; z < e.d; ++z)
    for (int y = 0; y < e.h; ++y)
      for (int x = 0; x < e.w; ++x) {
        if (label.at(0, z, y, x) != cls) continue;
        const bool edge = !inside(z - 1, y, x) || !inside(z + 1, y, x) || !inside(z, y - 1, x) || !inside(z, y + 1, x) ||
                          !inside(z, y, x - 1) || !inside(z, y, x + 1);
        if (edge) out[label.index(0, z, y, x)] = 1;
      }
  return out;
}

namespace detail {

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher) over the finite entries of f, sample spacing s.
inline void distance_1d(const double* f, int n, double s, double* out, std::vector<int>& v, std::vector<double>& zb) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<std::size_t>(n), 0);
  zb.assign(static_cast<std::size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (!std::isfinite(f[q])) continue;
    const double xq = q * s;
    while (k >= 0) {
      const int p = v[static_cast<std::size_t>(k)];
      const double xp = p * s;
      const double cross = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
      if (cross <= zb[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        zb[static_cast<std::size_t>(k)] = cross;
        zb[static_cast<std::size_t>(k) + 1] = inf;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      zb[0] = -inf;
      zb[1] = inf;
    }
  }
  if (k < 0) {
    std::fill(out, out + n, inf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double xq = q * s;
    while (zb[static_cast<std::size_t>(j) + 1] < xq) ++j;
    const int p = v[static_cast<std::size_t>(j)];
    const double d = xq - p * s;
    out[q] = d * d + f[p];
  }
}

}  // namespace detail

/// Squared Euclidean distance (physical units) from every voxel to the nearest set voxel; +inf if the set is empty.
inline std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& set, Extent3 e, const Vec3& spacing) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(set.size());
  for (std::size_t i = 0; i < set.size(); ++i) d[i] = set[i] ? 0.0 : inf;
  const int n_max = std::max({e.d, e.h, e.w});
  std::vector<double> line(static_cast<std::size_t>(n_max)), res(static_cast<std::size_t>(n_max)), zb;
  std::vector<int> v;
  const std::size_t sd = static_cast<std::size_t>(e.h) * e.w, sh = static_cast<std::size_t>(e.w), sw = 1;
  auto pass = [&](int n, std::size_t stride, double sp, auto&& starts) {
    for (std::size_t base : starts) {
      for (int i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = d[base + i * stride];
      detail::distance_1d(line.data(), n, sp, res.data(), v, zb);
      for (int i = 0; i < n; ++i) d[base + i * stride] = res[static_cast<std::size_t>(i)];
    }
  };
  std::vector<std::size_t> starts;
  for (int y = 0; y < e.h; ++y)
    for (int x = 0; x < e.w; ++x) starts.push_back(y * sh + x);
  pass(e.d, sd, spacing[0], starts);
  starts.clear();
  for (int z = 0; z < e.d; ++z)
    for (int x = 0; x < e.w; ++x) starts.push_back(z * sd + x);
  pass(e.h, sh, spacing[1], starts);
  starts.clear();
  for (int z = 0; z < e.d; ++z)
    for (int y = 0; y < e.h; ++y) starts.push_back(z * sd + y * sh);
  pass(e.w, sw, spacing[2], starts);
  return d;
}

/// Normalized surface distance per foreground class at the given tolerance (same units as spacing).
inline ClassValues nsd(const SegLabel& pred, const SegLabel& gt, double tolerance_mm, const Vec3& spacing = {1.0, 1.0, 1.0}) {
  detail::require_comparable(pred, gt, "nsd");
  require(tolerance_mm >= 0.0, "nsd: tolerance must be >= 0");
  for (double s : spacing) require(s > 0.0, "nsd: spacing must be positive");
  const Extent3 e = gt.extent();
  const double tol2 = tolerance_mm * tolerance_mm;
  ClassValues out;
  for (int c = 1; c < gt.num_classes; ++c) {
    const auto cls = static_cast<std::uint8_t>(c);
    const auto bp = boundary_mask(pred.data, cls);
    const auto bg = boundary_mask(gt.data, cls);
    const auto np = static_cast<std::size_t>(std::count(bp.begin(), bp.end(), 1));
    const auto ng = static_cast<std::size_t>(std::count(bg.begin(), bg.end(), 1));
    if (np == 0 && ng == 0) {
      out.values.emplace_back();
      continue;
    }
    if (np == 0 || ng == 0) {
      out.values.emplace_back(0.0);
      continue;
    }
    const auto dist_to_g = squared_distance_transform(bg, e, spacing);
    const auto dist_to_p = squared_distance_transform(bp, e, spacing);
    std::size_t close = 0;
    for (std::size_t i = 0; i < bp.size(); ++i) {
      if (bp[i] && dist_to_g[i] <= tol2) ++close;
      if (bg[i] && dist_to_p[i] <= tol2) ++close;
    }
    out.values.emplace_back(static_cast<double>(close) / static_cast<double>(np + ng));
  }
  out.mean = detail::mean_of(out.values);
  return out;
}

/// Each inner list holds the IoUs of the classes present in that case's ground truth.
inline std::optional<double> ia(const std::vector<std::vector<double>>& per_case_gt_present_iou) {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& row : per_case_gt_present_iou) {
    if (row.empty()) continue;
    const auto hits = std::count_if(row.begin(), row.end(), [](double v) { return v > 0.5; });
    s += static_cast<double>(hits) / static_cast<double>(row.size());
    ++n;
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

inline double average_score(double dsc_mean, double nsd_mean, double miou_mean, double ia_mean) {
  return (dsc_mean + nsd_mean + miou_mean + ia_mean) / 4.0;
}

struct ClassScores {
  int cls = 0;
  bool gt_present = false;
  bool pred_present = false;
  std::optional<double> dsc, iou, nsd;
};

struct CaseMetrics {
  std::string id;
  std::vector<ClassScores> classes;
  std::optional<double> dsc, iou, nsd;
  std::optional<double> ia;  // fraction of gt-present classes with IoU above 0.5

  std::vector<double> gt_present_iou() const {
    std::vector<double> out;
    for (const auto& c : classes)
      if (c.gt_present) out.push_back(c.iou.value_or(0.0));
    return out;
  }
};

inline CaseMetrics evaluate_case(const std::string& id, const SegLabel& pred, const SegLabel& gt, double tolerance_mm,
                                 const Vec3& spacing) {
  const auto d = dsc(pred, gt);
  const auto j = miou(pred, gt);
  const auto s = nsd(pred, gt, tolerance_mm, spacing);
  const auto ov = detail::overlaps(pred, gt);
  CaseMetrics cm;
  cm.id = id;
  for (int c = 1; c < gt.num_classes; ++c) {
    const auto i = static_cast<std::size_t>(c - 1);
    cm.classes.push_back({c, ov[static_cast<std::size_t>(c)].gt > 0, ov[static_cast<std::size_t>(c)].pred > 0, d.values[i],
                          j.values[i], s.values[i]});
  }
  cm.dsc = d.mean;
  cm.iou = j.mean;
  cm.nsd = s.mean;
  cm.ia = ia({cm.gt_present_iou()});
  return cm;
}

struct MetricReport {
  std::vector<CaseMetrics> cases;
  double tolerance_mm = 2.0;
  std::optional<double> dsc, nsd, miou, ia;

  void aggregate() {
    auto avg = [&](auto member) {
      std::vector<std::optional<double>> v;
      for (const auto& c : cases) v.push_back(c.*member);
      return detail::mean_of(v);
    };
    dsc = avg(&CaseMetrics::dsc);
    nsd = avg(&CaseMetrics::nsd);
    miou = avg(&CaseMetrics::iou);
    std::vector<std::vector<double>> table;
    for (const auto& c : cases) table.push_back(c.gt_present_iou());
    ia = semiseg::ia(table);
  }

  bool complete() const { return dsc && nsd && miou && ia; }

  double average_score() const {
    require(complete(), "average_score: one of the four aggregates is undefined");
    return semiseg::average_score(*dsc, *nsd, *miou, *ia);
  }
};

inline void add_case(MetricReport& report, const std::string& id, const SegLabel& pred, const SegLabel& gt,
                     const Vec3& spacing) {
  report.cases.push_back(evaluate_case(id, pred, gt, report.tolerance_mm, spacing));
  report.aggregate();
}

namespace detail {
inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
inline std::string opt_csv(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(10);
  os << *v;
  return os.str();
}
}  // namespace detail

inline nlohmann::json summary_json(const MetricReport& r) {
  nlohmann::json j = {{"dsc", detail::opt_json(r.dsc)},
                      {"nsd", detail::opt_json(r.nsd)},
                      {"miou", detail::opt_json(r.miou)},
                      {"ia", detail::opt_json(r.ia)},
                      {"nsd_tolerance_mm", r.tolerance_mm},
                      {"num_cases", r.cases.size()}};
  j["average_score"] = r.complete() ? nlohmann::json(r.average_score()) : nlohmann::json(nullptr);
  nlohmann::json per_case = nlohmann::json::array();
  for (const auto& c : r.cases)
    per_case.push_back({{"id", c.id},
                        {"dsc", detail::opt_json(c.dsc)},
                        {"nsd", detail::opt_json(c.nsd)},
                        {"miou", detail::opt_json(c.iou)},
                        {"ia", detail::opt_json(c.ia)}});
  j["cases"] = per_case;
  return j;
}

/// One row per case and class, a per-case mean row, and a final aggregate row.
inline void write_csv(std::ostream& os, const MetricReport& r) {
  using detail::opt_csv;
  os << "case_id,class,dsc,iou,nsd,ia,gt_present,pred_present\n";
  for (const auto& c : r.cases) {
    for (const auto& k : c.classes)
      os << c.id << ',' << k.cls << ',' << opt_csv(k.dsc) << ',' << opt_csv(k.iou) << ',' << opt_csv(k.nsd) << ",,"
         << int(k.gt_present) << ',' << int(k.pred_present) << '\n';
    os << c.id << ",mean," << opt_csv(c.dsc) << ',' << opt_csv(c.iou) << ',' << opt_csv(c.nsd) << ',' << opt_csv(c.ia)
       << ",,\n";
  }
  os << "aggregate,mean," << opt_csv(r.dsc) << ',' << opt_csv(r.miou) << ',' << opt_csv(r.nsd) << ',' << opt_csv(r.ia)
     << ",,\n";
}

}  // namespace semiseg
