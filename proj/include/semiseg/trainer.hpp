#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/checkpoint.hpp"
#include "semiseg/config.hpp"
#include "semiseg/corruption.hpp"
#include "semiseg/inference.hpp"
#include "semiseg/metrics.hpp"
#include "semiseg/model.hpp"
#include "semiseg/objectives.hpp"
#include "semiseg/optimizer.hpp"
#include "semiseg/perturbation.hpp"

namespace semiseg {

/// Resamples (if configured) and intensity-normalizes a case; the label follows the volume grid.
inline Case preprocess_case(const Case& c, const Preprocessing& prep) {
  Case out;
  out.id = c.id;
  out.volume = prep.apply(c.volume);
  if (c.label) {
    out.label = c.label->extent() == out.volume.extent()
                    ? *c.label
                    : resample(*c.label, c.volume.spacing, out.volume.spacing);
  }
  out.validate();
  return out;
}

/// Preprocessed training pools. Stage 1 consumes only volumes; labels are reachable only from `labeled`.
struct TrainData {
  std::vector<Case> labeled;
  std::vector<Volume> unlabeled;

  std::vector<Volume> all_volumes() const {
    std::vector<Volume> v;
    for (const auto& c : labeled) v.push_back(c.volume);
    v.insert(v.end(), unlabeled.begin(), unlabeled.end());
    return v;
  }
};

/// Uniform crop with zero padding where the patch overhangs the volume.
inline Tensor<float> random_crop(const Tensor<float>& volume, Extent3 patch, Rng& rng) {
  std::array<int, 3> off{};
  for (int a = 0; a < 3; ++a) {
    const int slack = volume.extent()[a] - patch[a];
    off[static_cast<std::size_t>(a)] = rng.uniform_int(std::min(0, slack), std::max(0, slack));
  }
  return crop(volume, off, patch, 0.0f);
}

/// Loss terms and schedule values of one optimizer iteration.
struct StepRecord {
  int epoch = 0;
  int iter = 0;
  Stage stage = Stage::pretrain;
  bool unlabeled = false;
  std::optional<double> l_dae, l_s, l_cr, l_pl;
  double omega_cr = 0.0;
  double lr = 0.0;
  double unlabeled_fraction = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  bool applied = true;  // false when the gradient was identically zero and the step was skipped
};

inline nlohmann::json to_json_line(const StepRecord& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", r.epoch},
          {"iter", r.iter},
          {"stage", to_string(r.stage)},
          {"batch", r.unlabeled ? "unlabeled" : "labeled"},
          {"L_DAE", opt(r.l_dae)},
          {"L_S", opt(r.l_s)},
          {"L_CR", opt(r.l_cr)},
          {"L_PL", opt(r.l_pl)},
          {"omega_cr", r.omega_cr},
          {"lr", r.lr},
          {"unlabeled_fraction", r.unlabeled_fraction},
          {"total", r.total},
          {"grad_norm", r.grad_norm},
          {"applied", r.applied}};
}

struct EpochRecord {
  int epoch = 0;
  double mean_total = 0.0;
  std::optional<double> mean_dae, mean_s, mean_cr, mean_pl;
  int volume_batches = 0;  // stage 1 reconstruction batches
  int labeled_batches = 0;
  int unlabeled_batches = 0;
  std::optional<double> val_dsc;
  std::optional<double> val_average;
};

inline nlohmann::json to_json(const EpochRecord& e) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"epoch", e.epoch},          {"mean_total", e.mean_total}, {"mean_L_DAE", opt(e.mean_dae)},
          {"mean_L_S", opt(e.mean_s)}, {"mean_L_CR", opt(e.mean_cr)}, {"mean_L_PL", opt(e.mean_pl)},
          {"volume_batches", e.volume_batches}, {"labeled_batches", e.labeled_batches},
          {"unlabeled_batches", e.unlabeled_batches},
          {"val_dsc", opt(e.val_dsc)}, {"val_average_score", opt(e.val_average)}};
}

/// Sliding-window evaluation of a segmentation model on preprocessed labeled cases.
inline MetricReport validate(const Predictor& predict, std::span<const Case> cases, int num_classes,
                             const ValidationConfig& cfg) {
  MetricReport report;
  report.tolerance_mm = cfg.nsd_tolerance_mm;
  for (const auto& c : cases) {
    require(c.labeled(), "validate: case " + c.id + " has no label");
    const SegLabel pred = argmax_label(sliding_window_predict(predict, c.volume.data, num_classes, cfg.inference));
    report.cases.push_back(evaluate_case(c.id, pred, *c.label, report.tolerance_mm, c.volume.spacing));
  }
  report.aggregate();
  return report;
}

inline MetricReport validate(const UNet<float>& net, std::span<const Case> cases, const ValidationConfig& cfg) {
  ValidationConfig v = cfg;
  v.inference.patch_size = net.config().patch_size;
  return validate(make_predictor(net), cases, net.config().num_classes, v);
}

/// Builds the starting model for a stage. A reconstruction checkpoint is converted to a segmentation
/// model (trunk copied, head re-initialized); a segmentation checkpoint with matching classes is reused.
inline UNet<float> init_model_for_stage(const RunConfig& cfg, const Checkpoint* init) {
  if (!init) return UNet<float>(cfg.model, mix_seed(cfg.seed ^ 0x6d6f64656cULL));
  UNet<float> source = restore_model(*init);
  if (!source.config().same_trunk(cfg.model))
    throw ConfigError("init checkpoint trunk does not match the configured model");
  if (cfg.model.head == Head::reconstruction) {
    if (init->model.head != Head::reconstruction) throw ConfigError("stage pretrain cannot start from a segmentation head");
    return source;
  }
  if (init->model.head == Head::segmentation && init->model.num_classes == cfg.model.num_classes) return source;
  ModelConfig target = cfg.model;
  target.patch_size = cfg.model.patch_size;
  return convert_head(source, target, mix_seed(cfg.seed ^ 0x68656164ULL));
}

struct TrainHooks {
  std::ostream* log = nullptr;  // JSON lines, one per iteration
  std::function<void(const Checkpoint&, const std::string& tag)> save;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct StageResult {
  std::vector<EpochRecord> history;
  Checkpoint final_checkpoint;
  std::optional<Checkpoint> best_checkpoint;
  std::optional<MetricReport> last_validation;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, UNet<float> net, TrainHooks hooks = {})
      : cfg_(std::move(cfg)), net_(std::move(net)), opt_(cfg_.optimizer), hooks_(std::move(hooks)),
        rng_(Rng(cfg_.seed).derive("train:" + to_string(cfg_.stage))) {
    cfg_.validate();
    if (!(net_.config().same_trunk(cfg_.model) && net_.config().head == cfg_.model.head &&
          net_.config().output_channels() == cfg_.model.output_channels()))
      throw ConfigError("Trainer: model does not match the run config");
  }

  const RunConfig& config() const { return cfg_; }
  UNet<float>& model() { return net_; }
  const UNet<float>& model() const { return net_; }
  Sgd<float>& optimizer() { return opt_; }
  Rng& rng() { return rng_; }

  // ---- single iterations --------------------------------------------------

  /// Stage 1: corrupt each clean patch and regress it back with L1.
  StepRecord pretrain_step(const std::vector<Tensor<float>>& clean, double lr) {
    require(!clean.empty(), "pretrain_step: empty batch");
    StepRecord r;
    r.stage = Stage::pretrain;
    r.lr = lr;
    net_.zero_grad();
    const float scale = 1.0f / static_cast<float>(clean.size());
    double sum = 0.0;
    for (const auto& x : clean) {
      const auto corrupted = corrupt(x, cfg_.corruption, rng_);
      typename UNet<float>::Tape tape;
      const FeatureMaps<float> f = net_.encode(corrupted.data, &tape.encode);
      const Tensor<float> recon = net_.decode(f, &tape.decode);
      auto loss = dae_loss(recon, x);
      sum += loss.value;
      for (auto& g : loss.grad.values()) g *= scale;
      net_.encode_backward(tape.encode, net_.decode_backward(tape.decode, loss.grad));
    }
    r.l_dae = sum / static_cast<double>(clean.size());
    r.total = *r.l_dae;
    finish_step(r);
    return r;
  }

  /// Supervised Dice+CE on (already augmented) labeled patches.
  StepRecord labeled_step(const std::vector<Patch>& batch, double lr) {
    require(!batch.empty(), "labeled_step: empty batch");
    StepRecord r;
    r.stage = cfg_.stage;
    r.lr = lr;
    net_.zero_grad();
    const float scale = 1.0f / static_cast<float>(batch.size());
    double sum = 0.0;
    for (const auto& p : batch) {
      require(p.label.has_value(), "labeled_step: patch without label");
      typename UNet<float>::Tape tape;
      const FeatureMaps<float> f = net_.encode(p.data, &tape.encode);
      const Tensor<float> logits = net_.decode(f, &tape.decode);
      auto loss = dice_ce_loss(logits, *p.label);
      sum += loss.value;
      for (auto& g : loss.grad.values()) g *= scale;
      net_.encode_backward(tape.encode, net_.decode_backward(tape.decode, loss.grad));
    }
    r.l_s = sum / static_cast<double>(batch.size());
    r.total = *r.l_s;
    finish_step(r);
    return r;
  }

  /// Consistency (and, in stage 3, pseudo-label) update on unlabeled patches. One detached forward
  /// of the unperturbed patch supplies both the consistency target and the pseudo labels.
  StepRecord unlabeled_step(const std::vector<Tensor<float>>& batch, double omega_cr, double lr) {
    require(!batch.empty(), "unlabeled_step: empty batch");
    require(cfg_.stage != Stage::pretrain, "unlabeled_step: not available in the pretraining stage");
    StepRecord r;
    r.stage = cfg_.stage;
    r.unlabeled = true;
    r.lr = lr;
    r.omega_cr = omega_cr;
    const bool with_pl = cfg_.stage == Stage::pl;
    net_.zero_grad();
    const float scale = 1.0f / static_cast<float>(batch.size());
    double sum_cr = 0.0, sum_pl = 0.0;
    for (const auto& x : batch) {
      const Tensor<float> target = softmax(net_.forward(x));
      const Tensor<float> xp = perturb_input(x, cfg_.perturbation, rng_);
      typename UNet<float>::Tape tape;
      const FeatureMaps<float> f = net_.encode(xp, &tape.encode);
      const auto pf = perturb_features_with_masks(f, cfg_.perturbation, rng_);
      const Tensor<float> logits = net_.decode(pf.features, &tape.decode);
      const Tensor<float> probs = softmax(logits);

      const auto cr = consistency_loss(target, probs);
      sum_cr += cr.value;
      Tensor<float> grad = softmax_backward(probs, cr.grad);
      for (auto& g : grad.values()) g *= static_cast<float>(omega_cr) * scale;
      if (with_pl) {
        const PseudoLabels pl = pseudo_label(target, cfg_.loss.lambda_conf);
        const auto lp = pseudo_loss(logits, pl.labels, pl.keep);
        sum_pl += lp.value;
        const float w = static_cast<float>(cfg_.loss.w_pl) * scale;
        if (!lp.empty)
          for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += w * lp.grad[i];
      }
      FeatureMaps<float> gf = net_.decode_backward(tape.decode, grad);
      for (std::size_t s = 0; s < gf.size(); ++s) gf[s] = multiply(gf[s], pf.multipliers[s]);
      net_.encode_backward(tape.encode, gf);
    }
    r.l_cr = sum_cr / static_cast<double>(batch.size());
    r.total = omega_cr * *r.l_cr;
    if (with_pl) {
      r.l_pl = sum_pl / static_cast<double>(batch.size());
      r.total += cfg_.loss.w_pl * *r.l_pl;
    }
    finish_step(r);
    return r;
  }

  // ---- batch sampling -----------------------------------------------------

  std::vector<Tensor<float>> sample_volume_batch(std::span<const Volume> volumes) {
    std::vector<Tensor<float>> out;
    for (int b = 0; b < cfg_.batch_size; ++b) {
      const auto& v = volumes[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(volumes.size()) - 1))];
      out.push_back(random_crop(v.data, cfg_.model.patch_size, rng_));
    }
    return out;
  }

  std::vector<Patch> sample_labeled_batch(std::span<const Case> cases) {
    if (fg_cache_.size() != cases.size()) {
      fg_cache_.clear();
      for (const auto& c : cases) fg_cache_.push_back(foreground_voxels(c.label->data));
    }
    std::vector<Patch> out;
    for (int b = 0; b < cfg_.batch_size; ++b) {
      const auto i = static_cast<std::size_t>(rng_.uniform_int(0, static_cast<int>(cases.size()) - 1));
      const Patch p = sample_patch(cases[i], cfg_.model.patch_size, cfg_.foreground_bias, rng_, &fg_cache_[i]);
      out.push_back(augment_labeled(p, cfg_.augmentation, rng_));
    }
    return out;
  }

  // ---- whole stages ---------------------------------------------------------

  /// Stage 1 on volumes only.
  StageResult run_pretrain(std::span<const Volume> volumes) {
    require(cfg_.stage == Stage::pretrain, "run_pretrain: run config is not a pretraining config");
    if (volumes.empty()) throw DataError("stage 1 needs at least one volume");
    StageResult res;
    const int T = cfg_.schedule.total_epochs;
    for (int epoch = 0; epoch < T; ++epoch) {
      const ScheduleState s{epoch, T};
      const double lr = poly_lr(s, cfg_.schedule.lr0, cfg_.schedule.lr_exponent);
      EpochAccumulator acc(epoch);
      for (int it = 0; it < cfg_.schedule.iterations_per_epoch; ++it) {
        StepRecord r = pretrain_step(sample_volume_batch(volumes), lr);
        r.epoch = epoch;
        r.iter = it;
        log(r);
        acc.add(r);
      }
      res.history.push_back(acc.finish());
      end_epoch(res, epoch, {});
    }
    res.final_checkpoint = snapshot(T, res);
    if (hooks_.save) hooks_.save(res.final_checkpoint, "final");
    return res;
  }

  /// Stage 2 or 3; with `supervised_only` every batch is labeled (baseline runs).
  StageResult run_segmentation(const TrainData& data, std::span<const Case> validation, bool supervised_only = false) {
    require(cfg_.stage != Stage::pretrain, "run_segmentation: run config is a pretraining config");
    if (data.labeled.empty()) throw DataError("stage " + to_string(cfg_.stage) + " needs labeled cases");
    for (const auto& c : data.labeled)
      if (!c.labeled()) throw DataError("case " + c.id + " is in the labeled pool without a label");
    const bool use_unlabeled = !supervised_only && !data.unlabeled.empty();
    if (!supervised_only && data.unlabeled.empty() && hooks_.log)
      *hooks_.log << nlohmann::json{{"warning", "no unlabeled data; training is supervised only"}}.dump() << '\n';
    StageResult res;
    const int T = cfg_.schedule.total_epochs;
    const auto& sch = cfg_.schedule;
    for (int epoch = 0; epoch < T; ++epoch) {
      const ScheduleState s{epoch, T};
      const double lr = poly_lr(s, sch.lr0, sch.lr_exponent);
      const double omega = ramp_weight(s, cfg_.loss.w_cr, cfg_.loss.cr_ramp_fraction);
      const double frac =
          use_unlabeled ? unlabeled_fraction(s, sch.unlabeled_start, sch.unlabeled_end, sch.unlabeled_ramp_fraction) : 0.0;
      EpochAccumulator acc(epoch);
      for (int it = 0; it < sch.iterations_per_epoch; ++it) {
        StepRecord r;
        if (use_unlabeled && rng_.bernoulli(frac)) {
          r = unlabeled_step(sample_volume_batch(data.unlabeled), omega, lr);
        } else {
          r = labeled_step(sample_labeled_batch(data.labeled), lr);
          r.omega_cr = omega;
        }
        r.epoch = epoch;
        r.iter = it;
        r.unlabeled_fraction = frac;
        log(r);
        acc.add(r);
      }
      res.history.push_back(acc.finish());
      end_epoch(res, epoch, validation);
    }
    if (!validation.empty() && !res.last_validation) run_validation(res, T - 1, validation);
    res.final_checkpoint = snapshot(T, res);
    if (hooks_.save) hooks_.save(res.final_checkpoint, "final");
    return res;
  }

 private:
  struct EpochAccumulator {
    explicit EpochAccumulator(int e) { rec.epoch = e; }
    EpochRecord rec;
    double total = 0, dae = 0, s = 0, cr = 0, pl = 0;
    int n = 0, n_dae = 0, n_s = 0, n_cr = 0, n_pl = 0;
    void add(const StepRecord& r) {
      total += r.total;
      ++n;
      if (r.l_dae) dae += *r.l_dae, ++n_dae;
      if (r.l_s) s += *r.l_s, ++n_s;
      if (r.l_cr) cr += *r.l_cr, ++n_cr;
      if (r.l_pl) pl += *r.l_pl, ++n_pl;
      if (r.stage == Stage::pretrain) {
        ++rec.volume_batches;
      } else {
        (r.unlabeled ? rec.unlabeled_batches : rec.labeled_batches) += 1;
      }
    }
    EpochRecord finish() {
      rec.mean_total = n ? total / n : 0.0;
      if (n_dae) rec.mean_dae = dae / n_dae;
      if (n_s) rec.mean_s = s / n_s;
      if (n_cr) rec.mean_cr = cr / n_cr;
      if (n_pl) rec.mean_pl = pl / n_pl;
      return rec;
    }
  };

  /// Clips, then updates; a step with an identically zero gradient leaves parameters and momentum untouched.
  void finish_step(StepRecord& r) {
    const auto params = net_.parameters();
    r.grad_norm = grad_norm(params);
    if (r.grad_norm == 0.0) {
      r.applied = false;
      return;
    }
    opt_.step(params, r.lr);
  }

  void log(const StepRecord& r) {
    if (hooks_.log) *hooks_.log << to_json_line(r).dump() << '\n';
  }

  Checkpoint snapshot(int epoch, const StageResult& res) const {
    Checkpoint ck = make_checkpoint(net_, cfg_.stage, epoch, &opt_);
    ck.run_config = cfg_;
    for (const auto& h : res.history) ck.history.push_back(to_json(h));
    if (res.best_checkpoint) {
      ck.best_dsc = res.best_checkpoint->best_dsc;
      ck.best_epoch = res.best_checkpoint->best_epoch;
    }
    return ck;
  }

  void run_validation(StageResult& res, int epoch, std::span<const Case> validation) {
    MetricReport rep = semiseg::validate(net_, validation, cfg_.validation);
    auto& rec = res.history.back();
    rec.val_dsc = rep.dsc;
    if (rep.complete()) rec.val_average = rep.average_score();
    const double d = rep.dsc.value_or(0.0);
    const bool improved = !res.best_checkpoint || d > *res.best_checkpoint->best_dsc;
    if (improved) {
      res.best_checkpoint = make_checkpoint(net_, cfg_.stage, epoch + 1, &opt_);
      res.best_checkpoint->run_config = cfg_;
      res.best_checkpoint->best_dsc = d;
      res.best_checkpoint->best_epoch = epoch;
      if (hooks_.save) hooks_.save(*res.best_checkpoint, "best");
    }
    res.last_validation = std::move(rep);
  }

  void end_epoch(StageResult& res, int epoch, std::span<const Case> validation) {
    const int every = cfg_.validation.every_epochs;
    if (!validation.empty() && every > 0 && ((epoch + 1) % every == 0 || epoch + 1 == cfg_.schedule.total_epochs)) {
      run_validation(res, epoch, validation);
      if (hooks_.save) hooks_.save(snapshot(epoch + 1, res), "latest");
    }
    if (hooks_.on_epoch) hooks_.on_epoch(res.history.back());
  }

  RunConfig cfg_;
  UNet<float> net_;
  Sgd<float> opt_;
  TrainHooks hooks_;
  Rng rng_;
  std::vector<std::vector<std::array<int, 3>>> fg_cache_;
};

// ---- stage entry points -------------------------------------------------------

inline StageResult run_stage1(const RunConfig& cfg, std::span<const Volume> volumes, TrainHooks hooks = {},
                              UNet<float>* model_out = nullptr) {
  Trainer t(cfg, init_model_for_stage(cfg, nullptr), std::move(hooks));
  StageResult r = t.run_pretrain(volumes);
  if (model_out) *model_out = t.model();
  return r;
}

inline StageResult run_stage2(const RunConfig& cfg, const TrainData& data, const Checkpoint* init,
                              std::span<const Case> validation, TrainHooks hooks = {}, UNet<float>* model_out = nullptr) {
  require(cfg.stage == Stage::cr, "run_stage2: config stage must be cr");
  Trainer t(cfg, init_model_for_stage(cfg, init), std::move(hooks));
  StageResult r = t.run_segmentation(data, validation);
  if (model_out) *model_out = t.model();
  return r;
}

inline StageResult run_stage3(const RunConfig& cfg, const TrainData& data, const Checkpoint& init,
                              std::span<const Case> validation, TrainHooks hooks = {}, UNet<float>* model_out = nullptr) {
  require(cfg.stage == Stage::pl, "run_stage3: config stage must be pl");
  if (init.model.head != Head::segmentation) throw ConfigError("stage pl needs a segmentation checkpoint to start from");
  Trainer t(cfg, init_model_for_stage(cfg, &init), std::move(hooks));
  StageResult r = t.run_segmentation(data, validation);
  if (model_out) *model_out = t.model();
  return r;
}

/// Labeled-only training from scratch (or from `init`) with the stage-2 optimizer and schedule.
inline StageResult run_supervised(const RunConfig& cfg, const TrainData& data, const Checkpoint* init,
                                  std::span<const Case> validation, TrainHooks hooks = {},
                                  UNet<float>* model_out = nullptr) {
  Trainer t(cfg, init_model_for_stage(cfg, init), std::move(hooks));
  StageResult r = t.run_segmentation(data, validation, true);
  if (model_out) *model_out = t.model();
  return r;
}

}  // namespace semiseg
