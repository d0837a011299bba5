#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/case_io.hpp"
#include "semiseg/rng.hpp"
#include "semiseg/volumes.hpp"

namespace semiseg {

// A synthetic dataset directory:
//   manifest.json   generator settings and the train / val / unlabeled id lists
//   cases/          one case per id; only train and val cases carry label files

struct SynthOptions {
  std::uint64_t seed = 0;
  int cases = 30;
  double labeled_fraction = 1.0;
  double val_fraction = 1.0 / 3.0;  // of the labeled cases
  Extent3 extent{48, 48, 48};
  int num_classes = 3;
  int teeth_min = 2;
  int teeth_max = 4;
  Vec3 spacing{1.0, 1.0, 1.0};

  void validate() const {
    require(cases >= 1, "synth: --cases must be >= 1");
    require(labeled_fraction >= 0.0 && labeled_fraction <= 1.0, "synth: --labeled-fraction must be in [0, 1]");
    require(val_fraction >= 0.0 && val_fraction < 1.0, "synth: --val-fraction must be in [0, 1)");
    require(num_classes >= 3, "synth: --classes must be >= 3 (background, tooth, pulp)");
    require(teeth_min >= 1 && teeth_min <= teeth_max, "synth: need 1 <= teeth-min <= teeth-max");
    require(extent.d >= 16 && extent.h >= 16 && extent.w >= 16, "synth: extents must be >= 16");
  }
};

struct DatasetManifest {
  nlohmann::json generator = nlohmann::json::object();
  std::vector<std::string> train, val, unlabeled;

  bool labeled_empty() const { return train.empty() && val.empty(); }

  const std::vector<std::string>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "unlabeled") return unlabeled;
    throw std::invalid_argument("unknown split '" + name + "' (train, val, unlabeled, all)");
  }
};

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = {{"format", "semiseg-dataset-1"},
       {"generator", m.generator},
       {"splits", {{"train", m.train}, {"val", m.val}, {"unlabeled", m.unlabeled}}},
       {"counts", {{"train", m.train.size()}, {"val", m.val.size()}, {"unlabeled", m.unlabeled.size()}}},
       {"labeled_empty", m.labeled_empty()}};
}

inline std::string case_id(int i) {
  std::string s = std::to_string(i);
  return "case_" + std::string(s.size() < 3 ? 3 - s.size() : 0, '0') + s;
}

/// Generates `opt.cases` synthetic cases. The first round(fraction * N) keep their labels and are split
/// into train and val; the rest are written without labels.
inline DatasetManifest synthesize_dataset(const SynthOptions& opt, const fs::path& out) {
  opt.validate();
  fs::create_directories(out / "cases");
  const int labeled = static_cast<int>(std::lround(opt.labeled_fraction * opt.cases));
  const int val = static_cast<int>(std::lround(opt.val_fraction * labeled));
  DatasetManifest m;
  Rng counts = Rng(opt.seed).derive("teeth");
  for (int i = 0; i < opt.cases; ++i) {
    const std::string id = case_id(i);
    const int teeth = counts.uniform_int(opt.teeth_min, opt.teeth_max);
    Case c = generate_synthetic_case(mix_seed(opt.seed * 1000003ULL + static_cast<std::uint64_t>(i)), opt.extent, teeth,
                                     opt.num_classes, id)
                 .data;
    c.volume.spacing = opt.spacing;
    if (i >= labeled) {
      c.label.reset();
      m.unlabeled.push_back(id);
    } else if (i >= labeled - val) {
      m.val.push_back(id);
    } else {
      m.train.push_back(id);
    }
    save_case(out / "cases", c);
  }
  m.generator = {{"seed", opt.seed},
                 {"cases", opt.cases},
                 {"labeled_fraction", opt.labeled_fraction},
                 {"val_fraction", opt.val_fraction},
                 {"extent", {opt.extent.d, opt.extent.h, opt.extent.w}},
                 {"spacing", opt.spacing},
                 {"num_classes", opt.num_classes},
                 {"teeth", {opt.teeth_min, opt.teeth_max}}};
  detail::write_json(out / "manifest.json", m);
  return m;
}

inline bool is_dataset_dir(const fs::path& dir) { return fs::exists(dir / "manifest.json"); }

inline DatasetManifest load_manifest(const fs::path& dir) {
  const nlohmann::json j = detail::read_json(dir / "manifest.json");
  try {
    if (j.value("format", std::string()) != "semiseg-dataset-1")
      throw DataError((dir / "manifest.json").string() + ": not a dataset manifest");
    DatasetManifest m;
    m.generator = j.value("generator", nlohmann::json::object());
    const auto& s = j.at("splits");
    m.train = s.at("train").get<std::vector<std::string>>();
    m.val = s.at("val").get<std::vector<std::string>>();
    m.unlabeled = s.at("unlabeled").get<std::vector<std::string>>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError((dir / "manifest.json").string() + ": " + e.what());
  }
}

/// Loads a case set. A dataset directory is read through its manifest (`split` = train | val | unlabeled | all);
/// any other directory is read as a flat folder of cases and `split` must be "all".
inline std::vector<Case> load_cases(const fs::path& dir, const std::string& split = "all") {
  std::vector<fs::path> stems;
  if (is_dataset_dir(dir)) {
    const DatasetManifest m = load_manifest(dir);
    std::vector<std::string> ids;
    if (split == "all") {
      for (const auto* v : {&m.train, &m.val, &m.unlabeled}) ids.insert(ids.end(), v->begin(), v->end());
    } else {
      ids = m.split(split);
    }
    for (const auto& id : ids) stems.push_back(dir / "cases" / id);
  } else {
    if (split != "all") throw std::invalid_argument("--split needs a dataset directory with manifest.json");
    stems = list_cases(dir);
  }
  std::vector<Case> out;
  out.reserve(stems.size());
  for (const auto& s : stems) out.push_back(load_case(s));
  return out;
}

}  // namespace semiseg
