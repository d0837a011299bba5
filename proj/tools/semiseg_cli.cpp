// semiseg: dataset synthesis, the three training stages, inference, evaluation and the inference sweep.
//
// Exit codes: 0 success, 2 configuration or usage error, 3 data error, 1 anything else.
// Progress is written to stdout as JSON lines; errors go to stderr as a single JSON line.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "semiseg/dataset.hpp"
#include "semiseg/sweep.hpp"
#include "semiseg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace semiseg;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

void emit(json j) { std::cout << j.dump() << std::endl; }

Extent3 parse_extent(const std::string& text) {
  std::vector<int> v;
  std::stringstream ss(text);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      v.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw ConfigError("invalid extent '" + text + "'");
    }
  }
  if (v.size() == 1) v = {v[0], v[0], v[0]};
  if (v.size() != 3 || v[0] < 1 || v[1] < 1 || v[2] < 1) throw ConfigError("extent must be N or D,H,W with positive values");
  return {v[0], v[1], v[2]};
}

// ---- synth ------------------------------------------------------------------------------

struct SynthArgs {
  SynthOptions opt;
  std::string extent = "48";
  std::string out;
};

void add_synth(CLI::App& app, SynthArgs& a) {
  auto* c = app.add_subcommand("synth", "Generate a synthetic labeled/unlabeled dataset with a split manifest");
  c->add_option("--seed", a.opt.seed, "Generator seed")->capture_default_str();
  c->add_option("--cases", a.opt.cases, "Number of cases")->capture_default_str();
  c->add_option("--labeled-fraction", a.opt.labeled_fraction, "Fraction of cases that keep labels")->capture_default_str();
  c->add_option("--val-fraction", a.opt.val_fraction, "Fraction of labeled cases held out for validation")
      ->capture_default_str();
  c->add_option("--extent", a.extent, "Volume extent: N or D,H,W")->capture_default_str();
  c->add_option("--classes", a.opt.num_classes, "Classes including background")->capture_default_str();
  c->add_option("--teeth-min", a.opt.teeth_min)->capture_default_str();
  c->add_option("--teeth-max", a.opt.teeth_max)->capture_default_str();
  c->add_option("--out", a.out, "Output dataset directory")->required();
}

int run_synth(SynthArgs& a) {
  a.opt.extent = parse_extent(a.extent);
  try {
    a.opt.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const DatasetManifest m = synthesize_dataset(a.opt, a.out);
  emit({{"event", "synth_done"},
        {"out", a.out},
        {"train", m.train.size()},
        {"val", m.val.size()},
        {"unlabeled", m.unlabeled.size()},
        {"labeled_empty", m.labeled_empty()}});
  return 0;
}

// ---- training stages ----------------------------------------------------------------------

struct TrainArgs {
  Stage stage = Stage::cr;
  std::string config, preset = "test", data, out, init;
  bool from_scratch = false, force = false, supervised_only = false;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs, iterations, validate_every;
};

CLI::App* add_train(CLI::App& app, const std::string& name, const std::string& help, TrainArgs& a) {
  auto* c = app.add_subcommand(name, help);
  c->add_option("--config", a.config, "Run config JSON (missing keys take preset defaults)");
  c->add_option("--preset", a.preset, "Preset when no config file is given: test | paper")->capture_default_str();
  c->add_option("--data", a.data, "Dataset directory (manifest.json) or flat case directory")->required();
  c->add_option("--out", a.out, "Output run directory")->required();
  c->add_option("--seed", a.seed, "Override the config seed");
  c->add_option("--epochs", a.epochs, "Override schedule.total_epochs");
  c->add_option("--iterations", a.iterations, "Override schedule.iterations_per_epoch");
  c->add_flag("--force", a.force, "Accept an init checkpoint whose stage tag does not match the handoff contract");
  return c;
}

RunConfig resolve_config(const TrainArgs& a) {
  json j = json::object();
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw ConfigError("cannot open config file " + a.config);
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config file " + a.config + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config file " + a.config + " must hold a JSON object");
  } else {
    j["preset"] = a.preset;
  }
  if (a.seed) j["seed"] = *a.seed;
  if (a.epochs) j["schedule"]["total_epochs"] = *a.epochs;
  if (a.iterations) j["schedule"]["iterations_per_epoch"] = *a.iterations;
  if (a.validate_every) j["validation"]["every_epochs"] = *a.validate_every;
  return run_config_from_json(j, a.stage);
}

/// Enforces the stage handoff: cr starts from pretrain (or --from-scratch), pl starts from cr.
std::optional<Checkpoint> resolve_init(const TrainArgs& a) {
  const std::string stage = to_string(a.stage);
  if (a.from_scratch && !a.init.empty()) throw ConfigError("--from-scratch and --init are mutually exclusive");
  if (a.init.empty()) {
    if (a.stage == Stage::cr && !a.from_scratch)
      throw ConfigError("stage cr starts from a stage pretrain checkpoint: pass --init <checkpoint> or --from-scratch");
    if (a.stage == Stage::pl) throw ConfigError("stage pl starts from a stage cr checkpoint: pass --init <checkpoint>");
    return std::nullopt;
  }
  Checkpoint ck = load_checkpoint(a.init);
  const Stage want = a.stage == Stage::pl ? Stage::cr : Stage::pretrain;
  if (ck.stage != want && !a.force) {
    throw ConfigError("stage " + stage + " expects an init checkpoint from stage " + to_string(want) + ", got stage " +
                      to_string(ck.stage) + " (pass --force to override)");
  }
  return ck;
}

void check_labels(const std::vector<Case>& cases, int num_classes) {
  for (const auto& c : cases)
    if (c.label && c.label->num_classes != num_classes)
      throw DataError("case " + c.id + " has " + std::to_string(c.label->num_classes) + " classes, the model expects " +
                      std::to_string(num_classes));
}

std::vector<Case> preprocess_all(const std::vector<Case>& cases, const Preprocessing& prep) {
  std::vector<Case> out;
  out.reserve(cases.size());
  for (const auto& c : cases) out.push_back(preprocess_case(c, prep));
  return out;
}

int run_train(const TrainArgs& a) {
  const RunConfig cfg = resolve_config(a);
  const std::optional<Checkpoint> init = resolve_init(a);

  std::vector<Case> train, val, unlabeled;
  if (is_dataset_dir(a.data)) {
    train = load_cases(a.data, "train");
    val = load_cases(a.data, "val");
    unlabeled = load_cases(a.data, "unlabeled");
  } else {
    for (auto& c : load_cases(a.data)) (c.labeled() ? train : unlabeled).push_back(std::move(c));
  }
  check_labels(train, cfg.model.num_classes);
  check_labels(val, cfg.model.num_classes);

  TrainData data;
  data.labeled = preprocess_all(train, cfg.preprocessing);
  for (const auto& c : preprocess_all(unlabeled, cfg.preprocessing)) data.unlabeled.push_back(c.volume);
  const std::vector<Case> validation = preprocess_all(val, cfg.preprocessing);

  fs::create_directories(a.out);
  detail::write_json(fs::path(a.out) / "config.json", cfg);
  std::ofstream log(fs::path(a.out) / "train_log.jsonl");
  if (!log) throw DataError("cannot write " + (fs::path(a.out) / "train_log.jsonl").string());

  TrainHooks hooks;
  hooks.log = &log;
  hooks.save = [&](const Checkpoint& ck, const std::string& tag) { save_checkpoint(fs::path(a.out) / tag, ck); };
  hooks.on_epoch = [&](const EpochRecord& e) {
    json j = to_json(e);
    j["event"] = "epoch";
    j["stage"] = to_string(cfg.stage);
    emit(j);
  };

  emit({{"event", "start"},
        {"stage", to_string(cfg.stage)},
        {"seed", cfg.seed},
        {"train", data.labeled.size()},
        {"val", validation.size()},
        {"unlabeled", data.unlabeled.size()},
        {"init", a.init.empty() ? json(nullptr) : json(a.init)}});
  const auto t0 = std::chrono::steady_clock::now();
  StageResult res;
  if (cfg.stage == Stage::pretrain) {
    const std::vector<Volume> volumes = data.all_volumes();
    Trainer t(cfg, init_model_for_stage(cfg, init ? &*init : nullptr), hooks);
    res = t.run_pretrain(volumes);
  } else {
    Trainer t(cfg, init_model_for_stage(cfg, init ? &*init : nullptr), hooks);
    res = t.run_segmentation(data, validation, a.supervised_only);
  }
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json done = {{"event", "done"},
               {"stage", to_string(cfg.stage)},
               {"seconds", seconds},
               {"checkpoint", (fs::path(a.out) / "final").string()}};
  if (res.last_validation) done["validation"] = summary_json(*res.last_validation);
  if (res.best_checkpoint) done["best_dsc"] = *res.best_checkpoint->best_dsc;
  emit(done);
  return 0;
}

// ---- inference ------------------------------------------------------------------------------

struct InferArgs {
  std::string checkpoint, cases, split = "all", out, mirror_axes = "1,2", weighting = "gaussian", patch;
  double step_fraction = 0.9;
};

void add_inference_options(CLI::App* c, std::string& checkpoint, std::string& cases, std::string& split,
                           std::string& out, std::string& weighting, std::string& patch) {
  c->add_option("--checkpoint", checkpoint, "Segmentation checkpoint (stem, .json or .bin)")->required();
  c->add_option("--cases", cases, "Dataset directory or flat case directory")->required();
  c->add_option("--split", split, "Manifest split: train | val | unlabeled | all")->capture_default_str();
  c->add_option("--out", out, "Output directory")->required();
  c->add_option("--weighting", weighting, "Stitch weighting: gaussian | uniform")->capture_default_str();
  c->add_option("--patch", patch, "Sliding-window patch extent (default: training patch)");
}

struct LoadedModel {
  UNet<float> net;
  Preprocessing prep;
  InferenceConfig inference;
};

LoadedModel load_segmentation_model(const std::string& path, const std::string& weighting, const std::string& patch) {
  const Checkpoint ck = load_checkpoint(path);
  if (ck.model.head != Head::segmentation)
    throw ConfigError("checkpoint " + path + " has a " + to_string(ck.model.head) + " head; inference needs segmentation");
  LoadedModel m{restore_model(ck), {}, {}};
  if (!ck.run_config.empty()) m.prep = run_config_from_json(ck.run_config, ck.stage).preprocessing;
  m.inference.patch_size = patch.empty() ? ck.model.patch_size : parse_extent(patch);
  if (!ck.model.accepts(m.inference.patch_size))
    throw ConfigError("patch " + m.inference.patch_size.str() + " is not divisible by the model's downsampling factor");
  try {
    m.inference.weighting = weighting_from_string(weighting);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return m;
}

int run_infer(const InferArgs& a) {
  LoadedModel m = load_segmentation_model(a.checkpoint, a.weighting, a.patch);
  m.inference.step_fraction = a.step_fraction;
  try {
    m.inference.mirror_axes = parse_mirror_axes(a.mirror_axes);
    m.inference.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const std::vector<Case> cases = load_cases(a.cases, a.split);
  if (cases.empty()) throw DataError("no cases found in " + a.cases);
  const Predictor predict = make_predictor(m.net);
  json per_case = json::array();
  double total = 0.0;
  for (const auto& c : cases) {
    InferenceStats stats;
    const auto t0 = std::chrono::steady_clock::now();
    const SegLabel pred = predict_case(predict, c.volume, m.net.config().num_classes, m.inference, m.prep, &stats);
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    total += s;
    save_label(a.out, c.id, pred, c.volume.spacing);
    per_case.push_back({{"id", c.id}, {"seconds", s}, {"tiles", stats.tiles}, {"forward_passes", stats.forward_passes}});
    emit({{"event", "case"}, {"id", c.id}, {"seconds", s}, {"tiles", stats.tiles}});
  }
  const json timings = {{"checkpoint", a.checkpoint},
                        {"step_fraction", a.step_fraction},
                        {"mirror_axes", m.inference.mirror_axes},
                        {"weighting", to_string(m.inference.weighting)},
                        {"patch_size", {m.inference.patch_size.d, m.inference.patch_size.h, m.inference.patch_size.w}},
                        {"total_seconds", total},
                        {"cases", per_case}};
  detail::write_json(fs::path(a.out) / "timings.json", timings);
  emit({{"event", "done"}, {"cases", cases.size()}, {"total_seconds", total}, {"out", a.out}});
  return 0;
}

// ---- evaluation -------------------------------------------------------------------------------

struct EvalArgs {
  std::string pred, gt, split = "all", out;
  double tolerance = 2.0;
};

int run_eval(const EvalArgs& a) {
  if (!(a.tolerance >= 0.0)) throw ConfigError("--tolerance must be >= 0");
  std::vector<Case> gt;
  for (auto& c : load_cases(a.gt, a.split))
    if (c.labeled()) gt.push_back(std::move(c));
  if (gt.empty()) throw DataError("no labeled ground-truth cases in " + a.gt);
  if (!fs::is_directory(a.pred)) throw DataError("prediction directory " + a.pred + " does not exist");
  std::vector<std::string> missing;
  for (const auto& c : gt)
    if (!fs::exists(fs::path(a.pred) / (c.id + ".json"))) missing.push_back(c.id);
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    throw DataError("missing predictions for " + std::to_string(missing.size()) + " case(s): " + ids);
  }
  MetricReport report;
  report.tolerance_mm = a.tolerance;
  for (const auto& c : gt) {
    const SegLabel p = load_label_file(fs::path(a.pred) / c.id);
    if (p.extent() != c.label->extent() || p.num_classes != c.label->num_classes)
      throw DataError("prediction " + c.id + " does not match its ground truth in shape or class count");
    add_case(report, c.id, p, *c.label, c.volume.spacing);
  }
  const fs::path out = a.out.empty() ? fs::path(a.pred) : fs::path(a.out);
  fs::create_directories(out);
  {
    std::ofstream csv(out / "metrics.csv");
    if (!csv) throw DataError("cannot write " + (out / "metrics.csv").string());
    write_csv(csv, report);
  }
  const json summary = summary_json(report);
  detail::write_json(out / "summary.json", summary);
  json line = summary;
  line.erase("cases");
  line["event"] = "done";
  emit(line);
  return 0;
}

// ---- sweep ------------------------------------------------------------------------------------

struct SweepArgs {
  std::string checkpoint, cases, split = "all", out, weighting = "gaussian", patch;
  std::string step_fractions = "0.5,0.6,0.7,0.8,0.9,1.0";
  std::string mirror_sets = "none;0;1;2;0,1;0,2;1,2;0,1,2";
  std::string panel_mirror = "1,2";
  double panel_step = 0.9;
  int repetitions = 3;
  double tolerance = 2.0;
};

int run_sweep_cmd(const SweepArgs& a) {
  LoadedModel m = load_segmentation_model(a.checkpoint, a.weighting, a.patch);
  SweepSpec spec;
  std::vector<int> panel_mirror;
  try {
    spec.step_fractions = parse_step_fractions(a.step_fractions);
    spec.mirror_sets = parse_mirror_sets(a.mirror_sets);
    spec.repetitions = a.repetitions;
    spec.validate();
    panel_mirror = a.panel_mirror == "none" ? std::vector<int>{} : parse_mirror_axes(a.panel_mirror);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  std::vector<Case> cases;
  for (auto& c : load_cases(a.cases, a.split))
    if (c.labeled()) cases.push_back(preprocess_case(c, m.prep));
  if (cases.empty()) throw DataError("sweep needs labeled cases; none found in " + a.cases);
  check_labels(cases, m.net.config().num_classes);

  const auto cells = run_sweep(make_predictor(m.net), cases, m.net.config().num_classes, m.inference, a.tolerance, spec,
                               [](const SweepCell& c) {
                                 emit({{"event", "cell"},
                                       {"step_fraction", c.step_fraction},
                                       {"mirror_axes", mirror_label(c.mirror_axes)},
                                       {"tiles", c.tiles},
                                       {"average", c.average},
                                       {"seconds", c.seconds}});
                               });
  const fs::path out(a.out);
  fs::create_directories(out);
  {
    std::ofstream csv(out / "sweep.csv");
    if (!csv) throw DataError("cannot write " + (out / "sweep.csv").string());
    write_sweep_csv(csv, cells);
  }
  const auto [by_step, by_mirror] = sweep_charts(cells, panel_mirror, a.panel_step);
  {
    std::ofstream svg(out / "sweep_tile_step.svg");
    write_dual_axis_svg(svg, by_step);
  }
  {
    std::ofstream svg(out / "sweep_mirror_axes.svg");
    write_dual_axis_svg(svg, by_mirror);
  }
  emit({{"event", "done"}, {"cells", cells.size()}, {"out", a.out}});
  return 0;
}

json error_line(const std::string& kind, const std::string& msg, int code) {
  return {{"event", "error"}, {"kind", kind}, {"message", msg}, {"exit_code", code}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semi-supervised 3D segmentation: synthesis, training stages, inference, evaluation, sweep"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "semiseg 1.0");

  SynthArgs synth;
  add_synth(app, synth);

  TrainArgs pre, cr, pl;
  pre.stage = Stage::pretrain;
  cr.stage = Stage::cr;
  pl.stage = Stage::pl;
  auto* c_pre = add_train(app, "pretrain", "Stage 1: reconstruction pretraining on all training volumes", pre);
  c_pre->add_option("--init", pre.init, "Resume from a stage pretrain checkpoint");
  auto* c_cr = add_train(app, "train-cr", "Stage 2: supervised loss plus consistency regularization", cr);
  c_cr->add_option("--init", cr.init, "Stage pretrain checkpoint to start from");
  c_cr->add_flag("--from-scratch", cr.from_scratch, "Start from random weights instead of a pretrain checkpoint");
  c_cr->add_flag("--supervised-only", cr.supervised_only, "Ignore unlabeled data (baseline runs)");
  c_cr->add_option("--validate-every", cr.validate_every, "Validate every N epochs (0: after the last epoch)");
  auto* c_pl = add_train(app, "train-pl", "Stage 3: stage 2 losses plus pseudo labels", pl);
  c_pl->add_option("--init", pl.init, "Stage cr checkpoint to start from")->required();
  c_pl->add_option("--validate-every", pl.validate_every, "Validate every N epochs (0: after the last epoch)");

  InferArgs infer;
  auto* c_inf = app.add_subcommand("infer", "Sliding-window inference with optional mirror TTA");
  add_inference_options(c_inf, infer.checkpoint, infer.cases, infer.split, infer.out, infer.weighting, infer.patch);
  c_inf->add_option("--step-fraction", infer.step_fraction, "Tile step as a fraction of the patch")->capture_default_str();
  c_inf->add_option("--mirror-axes", infer.mirror_axes, "Mirror axes for TTA, e.g. \"1,2\"; empty disables TTA")
      ->capture_default_str();

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Score predictions against ground truth (DSC, NSD, mIoU, IA)");
  c_eval->add_option("--pred", eval.pred, "Prediction directory written by infer")->required();
  c_eval->add_option("--gt", eval.gt, "Dataset directory or flat labeled case directory")->required();
  c_eval->add_option("--split", eval.split, "Manifest split")->capture_default_str();
  c_eval->add_option("--tolerance", eval.tolerance, "NSD tolerance in mm")->capture_default_str();
  c_eval->add_option("--out", eval.out, "Report directory (default: the prediction directory)");

  SweepArgs sweep;
  auto* c_sw = app.add_subcommand("sweep", "Time and score a grid of tile steps and mirror-axis sets");
  add_inference_options(c_sw, sweep.checkpoint, sweep.cases, sweep.split, sweep.out, sweep.weighting, sweep.patch);
  c_sw->add_option("--step-fractions", sweep.step_fractions, "Comma-separated tile steps")->capture_default_str();
  c_sw->add_option("--mirror-sets", sweep.mirror_sets, "Mirror sets separated by ';' (\"none\" = no TTA)")
      ->capture_default_str();
  c_sw->add_option("--repetitions", sweep.repetitions, "Timing repetitions per cell (median reported)")
      ->capture_default_str();
  c_sw->add_option("--tolerance", sweep.tolerance, "NSD tolerance in mm")->capture_default_str();
  c_sw->add_option("--panel-mirror", sweep.panel_mirror, "Mirror set for the tile-step panel")->capture_default_str();
  c_sw->add_option("--panel-step", sweep.panel_step, "Tile step for the mirror-set panel")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << error_line("usage", e.what(), kExitConfig).dump() << std::endl;
    return kExitConfig;
  }

  try {
    if (*app.get_subcommand("synth")) return run_synth(synth);
    if (*c_pre) return run_train(pre);
    if (*c_cr) return run_train(cr);
    if (*c_pl) return run_train(pl);
    if (*c_inf) return run_infer(infer);
    if (*c_eval) return run_eval(eval);
    if (*c_sw) return run_sweep_cmd(sweep);
  } catch (const ConfigError& e) {
    std::cerr << error_line("config", e.what(), kExitConfig).dump() << std::endl;
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << error_line("data", e.what(), kExitData).dump() << std::endl;
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << error_line("config", e.what(), kExitConfig).dump() << std::endl;
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << error_line("internal", e.what(), 1).dump() << std::endl;
    return 1;
  }
  return 0;
}
