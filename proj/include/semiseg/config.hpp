#pragma once

#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "semiseg/corruption.hpp"
#include "semiseg/inference.hpp"
#include "semiseg/model.hpp"
#include "semiseg/objectives.hpp"
#include "semiseg/optimizer.hpp"
#include "semiseg/perturbation.hpp"

namespace semiseg {

/// Raised for malformed or inconsistent run configuration.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Per-stage epoch structure, learning-rate schedule and unlabeled-batch ramp.
struct StageSchedule {
  int total_epochs = 500;
  int iterations_per_epoch = 250;
  double lr0 = 0.01;
  double lr_exponent = 0.9;
  double unlabeled_start = 0.10;
  double unlabeled_end = 0.50;
  double unlabeled_ramp_fraction = 0.4;

  static StageSchedule for_stage(Stage s) {
    StageSchedule out;
    if (s == Stage::pl) {
      out.unlabeled_start = 0.30;
      out.unlabeled_ramp_fraction = 0.2;
    }
    return out;
  }
};

inline void to_json(nlohmann::json& j, const StageSchedule& s) {
  j = {{"total_epochs", s.total_epochs},
       {"iterations_per_epoch", s.iterations_per_epoch},
       {"lr0", s.lr0},
       {"lr_exponent", s.lr_exponent},
       {"unlabeled_start", s.unlabeled_start},
       {"unlabeled_end", s.unlabeled_end},
       {"unlabeled_ramp_fraction", s.unlabeled_ramp_fraction}};
}

struct ValidationConfig {
  int every_epochs = 0;  // 0: validate after the last epoch only
  double nsd_tolerance_mm = 2.0;
  InferenceConfig inference;
};

inline void to_json(nlohmann::json& j, const ValidationConfig& v) {
  j = {{"every_epochs", v.every_epochs},
       {"nsd_tolerance_mm", v.nsd_tolerance_mm},
       {"step_fraction", v.inference.step_fraction},
       {"mirror_axes", v.inference.mirror_axes},
       {"weighting", to_string(v.inference.weighting)}};
}

inline void to_json(nlohmann::json& j, const Preprocessing& p) {
  j = {{"target_spacing", p.target_spacing ? nlohmann::json(*p.target_spacing) : nlohmann::json(nullptr)},
       {"percentile_low", p.p_low},
       {"percentile_high", p.p_high}};
}

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = {{"w_cr", w.w_cr}, {"w_pl", w.w_pl}, {"lambda_conf", w.lambda_conf}, {"cr_ramp_fraction", w.cr_ramp_fraction}};
}

/// Everything one training stage needs. Serialized as one JSON document with a section per module.
struct RunConfig {
  Stage stage = Stage::cr;
  std::uint64_t seed = 0;
  ModelConfig model;
  CorruptionConfig corruption;
  PerturbationConfig perturbation;
  AugmentConfig augmentation;
  LossWeights loss;
  SgdConfig optimizer;
  StageSchedule schedule;
  int batch_size = 2;
  double foreground_bias = 0.33;
  Preprocessing preprocessing;
  ValidationConfig validation;

  /// Full-size settings: 7-stage network, 128x256x256 patches, 500 epochs of 250 iterations.
  static RunConfig paper(Stage s) {
    RunConfig c;
    c.stage = s;
    c.model = ModelConfig::paper_preset();
    c.model.head = s == Stage::pretrain ? Head::reconstruction : Head::segmentation;
    c.schedule = StageSchedule::for_stage(s);
    c.validation.inference.patch_size = c.model.patch_size;
    return c;
  }

  /// Desk-scale settings: 4-stage network at 32^3 with the same loss weights and optimizer.
  static RunConfig test(Stage s) {
    RunConfig c = paper(s);
    c.model = ModelConfig::test_preset();
    c.model.head = s == Stage::pretrain ? Head::reconstruction : Head::segmentation;
    c.validation.inference.patch_size = c.model.patch_size;
    return c;
  }

  void validate() const {
    try {
      model.validate();
      corruption.validate(model.patch_size);
      perturbation.validate();
      loss.validate();
      optimizer.validate();
      validation.inference.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    auto check = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError("RunConfig: " + msg);
    };
    check(batch_size >= 1, "batch_size must be >= 1");
    check(schedule.total_epochs >= 1, "total_epochs must be >= 1");
    check(schedule.iterations_per_epoch >= 1, "iterations_per_epoch must be >= 1");
    check(schedule.lr0 > 0.0, "lr0 must be positive");
    check(0.0 <= schedule.unlabeled_start && schedule.unlabeled_start <= schedule.unlabeled_end &&
              schedule.unlabeled_end <= 1.0,
          "unlabeled fractions must satisfy 0 <= start <= end <= 1");
    check(schedule.unlabeled_ramp_fraction > 0.0 && schedule.unlabeled_ramp_fraction <= 1.0,
          "unlabeled_ramp_fraction must be in (0, 1]");
    check(foreground_bias >= 0.0 && foreground_bias <= 1.0, "foreground_bias must be in [0, 1]");
    check(validation.every_epochs >= 0, "validation.every_epochs must be >= 0");
    check(validation.nsd_tolerance_mm >= 0.0, "validation.nsd_tolerance_mm must be >= 0");
    const Head want = stage == Stage::pretrain ? Head::reconstruction : Head::segmentation;
    check(model.head == want, "stage " + to_string(stage) + " needs a " + to_string(want) + " head");
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"stage", to_string(c.stage)},
       {"seed", c.seed},
       {"model", c.model},
       {"corruption", c.corruption},
       {"perturbation", c.perturbation},
       {"augmentation", c.augmentation},
       {"loss", c.loss},
       {"optimizer", c.optimizer},
       {"schedule", c.schedule},
       {"batch_size", c.batch_size},
       {"foreground_bias", c.foreground_bias},
       {"preprocessing", c.preprocessing},
       {"validation", c.validation}};
}

/// Missing keys fall back to the stage defaults of the chosen preset ("preset": "test" | "paper").
inline RunConfig run_config_from_json(const nlohmann::json& j, std::optional<Stage> stage_override = std::nullopt) {
  try {
    if (!j.is_object()) throw ConfigError("run config must be a JSON object");
    const Stage stage = stage_override ? *stage_override : stage_from_string(j.value("stage", std::string("cr")));
    const std::string preset = j.value("preset", std::string("test"));
    if (preset != "test" && preset != "paper") throw ConfigError("unknown preset '" + preset + "'");
    RunConfig c = preset == "paper" ? RunConfig::paper(stage) : RunConfig::test(stage);
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) {
      nlohmann::json m = c.model;
      m.merge_patch(j.at("model"));
      c.model = m.get<ModelConfig>();
      c.model.head = stage == Stage::pretrain ? Head::reconstruction : Head::segmentation;
      c.validation.inference.patch_size = c.model.patch_size;
    }
    if (j.contains("corruption")) c.corruption = j.at("corruption").get<CorruptionConfig>();
    if (j.contains("perturbation")) c.perturbation = j.at("perturbation").get<PerturbationConfig>();
    if (j.contains("augmentation")) c.augmentation = j.at("augmentation").get<AugmentConfig>();
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      c.loss.w_cr = l.value("w_cr", c.loss.w_cr);
      c.loss.w_pl = l.value("w_pl", c.loss.w_pl);
      c.loss.lambda_conf = l.value("lambda_conf", c.loss.lambda_conf);
      c.loss.cr_ramp_fraction = l.value("cr_ramp_fraction", c.loss.cr_ramp_fraction);
    }
    if (j.contains("optimizer")) c.optimizer = j.at("optimizer").get<SgdConfig>();
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      auto& d = c.schedule;
      d.total_epochs = s.value("total_epochs", d.total_epochs);
      d.iterations_per_epoch = s.value("iterations_per_epoch", d.iterations_per_epoch);
      d.lr0 = s.value("lr0", d.lr0);
      d.lr_exponent = s.value("lr_exponent", d.lr_exponent);
      d.unlabeled_start = s.value("unlabeled_start", d.unlabeled_start);
      d.unlabeled_end = s.value("unlabeled_end", d.unlabeled_end);
      d.unlabeled_ramp_fraction = s.value("unlabeled_ramp_fraction", d.unlabeled_ramp_fraction);
    }
    c.batch_size = j.value("batch_size", c.batch_size);
    c.foreground_bias = j.value("foreground_bias", c.foreground_bias);
    if (j.contains("preprocessing")) {
      const auto& p = j.at("preprocessing");
      if (p.contains("target_spacing") && !p.at("target_spacing").is_null())
        c.preprocessing.target_spacing = p.at("target_spacing").get<Vec3>();
      c.preprocessing.p_low = p.value("percentile_low", c.preprocessing.p_low);
      c.preprocessing.p_high = p.value("percentile_high", c.preprocessing.p_high);
    }
    if (j.contains("validation")) {
      const auto& v = j.at("validation");
      c.validation.every_epochs = v.value("every_epochs", c.validation.every_epochs);
      c.validation.nsd_tolerance_mm = v.value("nsd_tolerance_mm", c.validation.nsd_tolerance_mm);
      c.validation.inference.step_fraction = v.value("step_fraction", c.validation.inference.step_fraction);
      if (v.contains("mirror_axes")) c.validation.inference.mirror_axes = v.at("mirror_axes").get<std::vector<int>>();
      if (v.contains("weighting"))
        c.validation.inference.weighting = weighting_from_string(v.at("weighting").get<std::string>());
    }
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::string& path, std::optional<Stage> stage_override = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  return run_config_from_json(j, stage_override);
}

}  // namespace semiseg
