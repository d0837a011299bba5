#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "semiseg/case_io.hpp"
#include "semiseg/inference.hpp"
#include "semiseg/metrics.hpp"

namespace semiseg {

/// Grid of sliding-window settings to time and score.
struct SweepSpec {
  std::vector<double> step_fractions{0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<std::vector<int>> mirror_sets = all_mirror_sets();
  int repetitions = 3;

  static std::vector<std::vector<int>> all_mirror_sets() {
    return {{}, {0}, {1}, {2}, {0, 1}, {0, 2}, {1, 2}, {0, 1, 2}};
  }

  void validate() const {
    require(!step_fractions.empty(), "SweepSpec: step_fractions must not be empty");
    require(!mirror_sets.empty(), "SweepSpec: mirror_sets must not be empty");
    require(repetitions >= 1, "SweepSpec: repetitions must be >= 1");
    for (double f : step_fractions) require(f > 0.0 && f <= 1.0, "SweepSpec: step fractions must be in (0, 1]");
  }
};

/// "0.5,0.7,0.9" -> {0.5, 0.7, 0.9}
inline std::vector<double> parse_step_fractions(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string tok; std::getline(ss, tok, ',');) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      throw std::invalid_argument("invalid step fraction '" + tok + "'");
    }
    if (tok.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument("invalid step fraction '" + tok + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("no step fractions given");
  return out;
}

/// Mirror sets separated by ';', axes by ','; "none" or an empty entry is the set without mirroring.
inline std::vector<std::vector<int>> parse_mirror_sets(const std::string& text) {
  std::vector<std::vector<int>> out;
  std::stringstream ss(text);
  for (std::string tok; std::getline(ss, tok, ';');) out.push_back(tok == "none" ? std::vector<int>{} : parse_mirror_axes(tok));
  if (!text.empty() && text.back() == ';') out.push_back({});
  if (out.empty()) out.push_back({});
  return out;
}

inline std::string mirror_label(const std::vector<int>& axes) { return axes.empty() ? "none" : format_mirror_axes(axes); }

struct SweepCell {
  double step_fraction = 0.5;
  std::vector<int> mirror_axes;
  std::size_t tiles = 0;           // summed over cases
  std::size_t forward_passes = 0;  // summed over cases
  double dsc = 0, nsd = 0, miou = 0, ia = 0, average = 0;
  double seconds = 0.0;  // median over repetitions of the whole case set
  std::vector<double> repetition_seconds;
};

inline double median(std::vector<double> v) {
  require(!v.empty(), "median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Runs every (step fraction, mirror set) cell sequentially on preprocessed labeled cases.
inline std::vector<SweepCell> run_sweep(const Predictor& predict, const std::vector<Case>& cases, int num_classes,
                                        const InferenceConfig& base, double tolerance_mm, const SweepSpec& spec,
                                        const std::function<void(const SweepCell&)>& on_cell = {}) {
  spec.validate();
  require(!cases.empty(), "run_sweep: no cases");
  for (const auto& c : cases) require(c.labeled(), "run_sweep: case " + c.id + " has no label");
  std::vector<SweepCell> out;
  for (double f : spec.step_fractions) {
    for (const auto& axes : spec.mirror_sets) {
      InferenceConfig cfg = base;
      cfg.step_fraction = f;
      cfg.mirror_axes = axes;
      cfg.validate();
      SweepCell cell;
      cell.step_fraction = f;
      cell.mirror_axes = axes;
      std::vector<SegLabel> preds;
      for (int r = 0; r < spec.repetitions; ++r) {
        preds.clear();
        InferenceStats stats;
        const auto t0 = std::chrono::steady_clock::now();
        for (const auto& c : cases) {
          InferenceStats s;
          preds.push_back(argmax_label(sliding_window_predict(predict, c.volume.data, num_classes, cfg, &s)));
          stats.tiles += s.tiles;
          stats.forward_passes += s.forward_passes;
        }
        cell.repetition_seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        cell.tiles = stats.tiles;
        cell.forward_passes = stats.forward_passes;
      }
      cell.seconds = median(cell.repetition_seconds);
      MetricReport rep;
      rep.tolerance_mm = tolerance_mm;
      for (std::size_t i = 0; i < cases.size(); ++i)
        rep.cases.push_back(evaluate_case(cases[i].id, preds[i], *cases[i].label, tolerance_mm, cases[i].volume.spacing));
      rep.aggregate();
      cell.dsc = rep.dsc.value_or(0.0);
      cell.nsd = rep.nsd.value_or(0.0);
      cell.miou = rep.miou.value_or(0.0);
      cell.ia = rep.ia.value_or(0.0);
      cell.average = average_score(cell.dsc, cell.nsd, cell.miou, cell.ia);
      if (on_cell) on_cell(cell);
      out.push_back(std::move(cell));
    }
  }
  return out;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepCell>& cells) {
  os << "step_fraction,mirror_axes,tiles,forward_passes,dsc,nsd,miou,ia,average,seconds\n";
  os << std::setprecision(10);
  for (const auto& c : cells)
    os << c.step_fraction << ',' << '"' << mirror_label(c.mirror_axes) << '"' << ',' << c.tiles << ',' << c.forward_passes
       << ',' << c.dsc << ',' << c.nsd << ',' << c.miou << ',' << c.ia << ',' << c.average << ',' << c.seconds << '\n';
}

/// One series of a two-axis line chart: score on the left axis, seconds on the right.
struct DualAxisChart {
  std::string title;
  std::string x_label;
  std::vector<std::string> categories;
  std::vector<double> score;
  std::vector<double> seconds;
};

namespace detail {

inline std::string fmt(double v, int precision = 3) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

inline std::pair<double, double> padded_range(const std::vector<double>& v) {
  double lo = *std::min_element(v.begin(), v.end()), hi = *std::max_element(v.begin(), v.end());
  const double pad = hi > lo ? 0.1 * (hi - lo) : std::max(1e-3, 0.05 * std::abs(hi));
  return {lo - pad, hi + pad};
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace detail

inline void write_dual_axis_svg(std::ostream& os, const DualAxisChart& chart) {
  require(!chart.categories.empty() && chart.categories.size() == chart.score.size() &&
              chart.categories.size() == chart.seconds.size(),
          "write_dual_axis_svg: series lengths differ");
  const double W = 640, H = 400, left = 70, right = 70, top = 40, bottom = 60;
  const double pw = W - left - right, ph = H - top - bottom;
  const std::size_t n = chart.categories.size();
  auto xpos = [&](std::size_t i) { return left + (n == 1 ? pw / 2 : pw * static_cast<double>(i) / static_cast<double>(n - 1)); };
  const auto [s_lo, s_hi] = detail::padded_range(chart.score);
  const auto [t_lo, t_hi] = detail::padded_range(chart.seconds);
  auto ys = [&](double v) { return top + ph * (1.0 - (v - s_lo) / (s_hi - s_lo)); };
  auto yt = [&](double v) { return top + ph * (1.0 - (v - t_lo) / (t_hi - t_lo)); };
  const char* score_color = "#1f77b4";
  const char* time_color = "#d62728";

  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << detail::xml_escape(chart.title) << "</text>\n";
  os << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double fy = top + ph * k / 4.0;
    const double sv = s_hi - (s_hi - s_lo) * k / 4.0, tv = t_hi - (t_hi - t_lo) * k / 4.0;
    os << "<line x1=\"" << left << "\" y1=\"" << fy << "\" x2=\"" << left + pw << "\" y2=\"" << fy
       << "\" stroke=\"#ddd\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << fy + 4 << "\" text-anchor=\"end\" fill=\"" << score_color << "\">"
       << detail::fmt(sv, 4) << "</text>\n";
    os << "<text x=\"" << left + pw + 6 << "\" y=\"" << fy + 4 << "\" fill=\"" << time_color << "\">" << detail::fmt(tv, 3)
       << "</text>\n";
  }
  for (std::size_t i = 0; i < n; ++i)
    os << "<text x=\"" << xpos(i) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">"
       << detail::xml_escape(chart.categories[i]) << "</text>\n";
  os << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 15 << "\" text-anchor=\"middle\">" << detail::xml_escape(chart.x_label)
     << "</text>\n";
  os << "<text transform=\"translate(18," << top + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\" fill=\"" << score_color
     << "\">average score</text>\n";
  os << "<text transform=\"translate(" << W - 14 << "," << top + ph / 2 << ") rotate(90)\" text-anchor=\"middle\" fill=\""
     << time_color << "\">seconds</text>\n";
  auto series = [&](const std::vector<double>& v, auto ymap, const char* color, const char* dash) {
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" stroke-dasharray=\"" << dash << "\" points=\"";
    for (std::size_t i = 0; i < n; ++i) os << xpos(i) << ',' << ymap(v[i]) << ' ';
    os << "\"/>\n";
    for (std::size_t i = 0; i < n; ++i)
      os << "<circle cx=\"" << xpos(i) << "\" cy=\"" << ymap(v[i]) << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
  };
  series(chart.score, ys, score_color, "none");
  series(chart.seconds, yt, time_color, "6,4");
  os << "</svg>\n";
}

/// The two panels: score and time against tile step (at `mirror_for_steps`) and against the
/// mirror set (at `step_for_mirrors`). Missing anchors fall back to the first grid value.
inline std::pair<DualAxisChart, DualAxisChart> sweep_charts(const std::vector<SweepCell>& cells,
                                                            const std::vector<int>& mirror_for_steps,
                                                            double step_for_mirrors) {
  require(!cells.empty(), "sweep_charts: no cells");
  auto has_mirror = [&](const std::vector<int>& m) {
    return std::any_of(cells.begin(), cells.end(), [&](const SweepCell& c) { return c.mirror_axes == m; });
  };
  auto has_step = [&](double f) {
    return std::any_of(cells.begin(), cells.end(), [&](const SweepCell& c) { return c.step_fraction == f; });
  };
  const std::vector<int> m = has_mirror(mirror_for_steps) ? mirror_for_steps : cells.front().mirror_axes;
  const double f = has_step(step_for_mirrors) ? step_for_mirrors : cells.front().step_fraction;
  DualAxisChart a{"Score and time vs. tile step (mirror axes: " + mirror_label(m) + ")", "tile step fraction", {}, {}, {}};
  DualAxisChart b{"Score and time vs. mirror axes (tile step " + detail::fmt(f) + ")", "mirror axes", {}, {}, {}};
  for (const auto& c : cells) {
    if (c.mirror_axes == m) {
      a.categories.push_back(detail::fmt(c.step_fraction));
      a.score.push_back(c.average);
      a.seconds.push_back(c.seconds);
    }
    if (c.step_fraction == f) {
      b.categories.push_back(mirror_label(c.mirror_axes));
      b.score.push_back(c.average);
      b.seconds.push_back(c.seconds);
    }
  }
  return {a, b};
}

}  // namespace semiseg
