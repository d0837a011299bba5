#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "semiseg/tensor.hpp"

namespace semiseg {

enum class Stage { pretrain, cr, pl };

inline std::string to_string(Stage s) {
  switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::cr: return "cr";
    case Stage::pl: return "pl";
  }
  return "?";
}
inline Stage stage_from_string(const std::string& s) {
  if (s == "pretrain") return Stage::pretrain;
  if (s == "cr") return Stage::cr;
  if (s == "pl") return Stage::pl;
  throw std::invalid_argument("unknown stage '" + s + "'");
}

// ---------------------------------------------------------------------------
// Softmax

/// Softmax over the channel axis at every voxel.
template <class T>
Tensor<T> softmax(const Tensor<T>& logits) {
  const int C = logits.channels();
  const std::size_t V = logits.voxels();
  Tensor<T> p(C, logits.extent());
  for (std::size_t v = 0; v < V; ++v) {
    T mx = logits[v];
    for (int c = 1; c < C; ++c) mx = std::max(mx, logits[static_cast<std::size_t>(c) * V + v]);
    T sum{};
    for (int c = 0; c < C; ++c) {
      const T e = std::exp(logits[static_cast<std::size_t>(c) * V + v] - mx);
      p[static_cast<std::size_t>(c) * V + v] = e;
      sum += e;
    }
    for (int c = 0; c < C; ++c) p[static_cast<std::size_t>(c) * V + v] /= sum;
  }
  return p;
}

/// Vector-Jacobian product of softmax: dL/dlogits from dL/dprobs.
template <class T>
Tensor<T> softmax_backward(const Tensor<T>& probs, const Tensor<T>& grad_probs) {
  const int C = probs.channels();
  const std::size_t V = probs.voxels();
  Tensor<T> g(C, probs.extent());
  for (std::size_t v = 0; v < V; ++v) {
    T dot{};
    for (int c = 0; c < C; ++c) dot += probs[static_cast<std::size_t>(c) * V + v] * grad_probs[static_cast<std::size_t>(c) * V + v];
    for (int c = 0; c < C; ++c) {
      const std::size_t i = static_cast<std::size_t>(c) * V + v;
      g[i] = probs[i] * (grad_probs[i] - dot);
    }
  }
  return g;
}

template <class T>
struct LossResult {
  double value = 0.0;
  Tensor<T> grad;  // dL/dlogits (or dL/dinput for reconstruction)
  bool empty = false;
};

inline constexpr double kDiceSmooth = 1e-5;

// ---------------------------------------------------------------------------
// Supervised losses

/// Mean cross-entropy over included voxels + (1 - mean soft Dice over foreground classes).
/// `include`, when given, selects contributing voxels (non-zero = included).
template <class T>
LossResult<T> masked_dice_ce(const Tensor<T>& logits, const Tensor<std::uint8_t>& labels,
                             const Tensor<std::uint8_t>* include) {
  const int C = logits.channels();
  const std::size_t V = logits.voxels();
  require(C >= 2, "dice_ce_loss: need at least 2 classes");
  require(labels.channels() == 1 && labels.extent() == logits.extent(), "dice_ce_loss: label shape mismatch");
  if (include) require(include->channels() == 1 && include->extent() == logits.extent(), "dice_ce_loss: mask shape mismatch");

  LossResult<T> r;
  r.grad = Tensor<T>(C, logits.extent());
  std::size_t n = 0;
  for (std::size_t v = 0; v < V; ++v)
    if (!include || (*include)[v]) ++n;
  if (n == 0) {
    r.empty = true;
    return r;
  }
  const Tensor<T> p = softmax(logits);
  const auto at = [V](int c, std::size_t v) { return static_cast<std::size_t>(c) * V + v; };

  double ce = 0.0;
  std::vector<double> inter(static_cast<std::size_t>(C), 0.0), denom(static_cast<std::size_t>(C), 0.0);
  for (std::size_t v = 0; v < V; ++v) {
    if (include && !(*include)[v]) continue;
    const int y = labels[v];
    require(y < C, "dice_ce_loss: label index out of range");
    ce -= std::log(std::max(static_cast<double>(p[at(y, v)]), 1e-300));
    for (int c = 1; c < C; ++c) {
      const double pc = static_cast<double>(p[at(c, v)]);
      const double yc = y == c ? 1.0 : 0.0;
      inter[static_cast<std::size_t>(c)] += pc * yc;
      denom[static_cast<std::size_t>(c)] += pc + yc;
    }
  }
  ce /= static_cast<double>(n);
  double dice_mean = 0.0;
  for (int c = 1; c < C; ++c)
    dice_mean += (2.0 * inter[static_cast<std::size_t>(c)] + kDiceSmooth) / (denom[static_cast<std::size_t>(c)] + kDiceSmooth);
  dice_mean /= static_cast<double>(C - 1);
  r.value = ce + (1.0 - dice_mean);

  // Dice gradient w.r.t. probabilities, pushed through the softmax; CE gradient is direct.
  Tensor<T> gp(C, logits.extent());
  for (std::size_t v = 0; v < V; ++v) {
    if (include && !(*include)[v]) continue;
    const int y = labels[v];
    for (int c = 1; c < C; ++c) {
      const auto cu = static_cast<std::size_t>(c);
      const double s = denom[cu] + kDiceSmooth;
      const double dD = (2.0 * (y == c ? 1.0 : 0.0) * s - (2.0 * inter[cu] + kDiceSmooth)) / (s * s);
      gp[at(c, v)] = static_cast<T>(-dD / static_cast<double>(C - 1));
    }
  }
  r.grad = softmax_backward(p, gp);
  const T inv_n = static_cast<T>(1.0 / static_cast<double>(n));
  for (std::size_t v = 0; v < V; ++v) {
    if (include && !(*include)[v]) continue;
    const int y = labels[v];
    for (int c = 0; c < C; ++c) r.grad[at(c, v)] += (p[at(c, v)] - (c == y ? T{1} : T{0})) * inv_n;
  }
  return r;
}

/// Dice + CE; voxels where `ignore_mask` is non-zero are excluded from both terms.
template <class T>
LossResult<T> dice_ce_loss(const Tensor<T>& logits, const Tensor<std::uint8_t>& labels,
                           const Tensor<std::uint8_t>* ignore_mask = nullptr) {
  if (!ignore_mask) return masked_dice_ce(logits, labels, nullptr);
  Tensor<std::uint8_t> include(1, ignore_mask->extent());
  for (std::size_t i = 0; i < include.size(); ++i) include[i] = (*ignore_mask)[i] ? 0 : 1;
  return masked_dice_ce(logits, labels, &include);
}

// ---------------------------------------------------------------------------
// Consistency

/// Mean absolute difference between the (detached) target probabilities and the perturbed-branch
/// probabilities. The gradient is taken w.r.t. the perturbed probabilities only.
template <class T>
LossResult<T> consistency_loss(const Tensor<T>& target_probs, const Tensor<T>& perturbed_probs) {
  require_same_shape(target_probs, perturbed_probs, "consistency_loss");
  LossResult<T> r;
  r.grad = Tensor<T>(perturbed_probs.channels(), perturbed_probs.extent());
  const std::size_t N = perturbed_probs.size();
  require(N > 0, "consistency_loss: empty input");
  double sum = 0.0;
  const T inv = static_cast<T>(1.0 / static_cast<double>(N));
  for (std::size_t i = 0; i < N; ++i) {
    const double d = static_cast<double>(perturbed_probs[i]) - static_cast<double>(target_probs[i]);
    sum += std::abs(d);
    r.grad[i] = d > 0 ? inv : (d < 0 ? -inv : T{0});
  }
  r.value = sum / static_cast<double>(N);
  return r;
}

// ---------------------------------------------------------------------------
// Pseudo labels

struct PseudoLabels {
  Tensor<std::uint8_t> labels;
  Tensor<std::uint8_t> keep;  // 1 where the label is used
};

/// argmax class where its probability exceeds `lambda_conf` and it is not background; elsewhere
/// background and dropped from the loss.
template <class T>
PseudoLabels pseudo_label(const Tensor<T>& probs, double lambda_conf) {
  const int C = probs.channels();
  const std::size_t V = probs.voxels();
  PseudoLabels out{Tensor<std::uint8_t>(1, probs.extent()), Tensor<std::uint8_t>(1, probs.extent())};
  for (std::size_t v = 0; v < V; ++v) {
    int best = 0;
    T best_p = probs[v];
    for (int c = 1; c < C; ++c) {
      const T pc = probs[static_cast<std::size_t>(c) * V + v];
      if (pc > best_p) {
        best_p = pc;
        best = c;
      }
    }
    if (best != 0 && static_cast<double>(best_p) > lambda_conf) {
      out.labels[v] = static_cast<std::uint8_t>(best);
      out.keep[v] = 1;
    }
  }
  return out;
}

/// Dice + CE restricted to kept voxels; zero value and zero gradient when nothing is kept.
template <class T>
LossResult<T> pseudo_loss(const Tensor<T>& logits, const Tensor<std::uint8_t>& labels,
                          const Tensor<std::uint8_t>& keep) {
  return masked_dice_ce(logits, labels, &keep);
}

/// Mean absolute error for the reconstruction objective; gradient w.r.t. `reconstruction`.
template <class T>
LossResult<T> dae_loss(const Tensor<T>& reconstruction, const Tensor<T>& original) {
  require_same_shape(reconstruction, original, "dae_loss");
  const std::size_t N = original.size();
  require(N > 0, "dae_loss: empty input");
  LossResult<T> r;
  r.grad = Tensor<T>(original.channels(), original.extent());
  const T inv = static_cast<T>(1.0 / static_cast<double>(N));
  double sum = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double d = static_cast<double>(reconstruction[i]) - static_cast<double>(original[i]);
    sum += std::abs(d);
    r.grad[i] = d > 0 ? inv : (d < 0 ? -inv : T{0});
  }
  r.value = sum / static_cast<double>(N);
  return r;
}

// ---------------------------------------------------------------------------
// Schedules

struct ScheduleState {
  int epoch = 0;
  int total_epochs = 1;

  void validate() const {
    require(total_epochs >= 1, "ScheduleState: total_epochs must be >= 1");
    require(epoch >= 0 && epoch <= total_epochs, "ScheduleState: epoch must be in [0, total_epochs]");
  }
};

struct LossWeights {
  double w_cr = 50.0;
  double w_pl = 0.1;
  double lambda_conf = 0.75;
  double cr_ramp_fraction = 0.2;

  void validate() const {
    require(w_cr >= 0.0 && w_pl >= 0.0, "LossWeights: weights must be >= 0");
    require(lambda_conf > 0.0 && lambda_conf <= 1.0, "LossWeights: lambda_conf must be in (0, 1]");
    require(cr_ramp_fraction > 0.0 && cr_ramp_fraction <= 1.0, "LossWeights: cr_ramp_fraction must be in (0, 1]");
  }
};

/// Exponential ramp from 0 at t = 0 up to `weight` at t = ramp_fraction * T, flat afterwards.
inline double ramp_weight(const ScheduleState& s, double weight, double ramp_fraction = 0.2) {
  s.validate();
  require(ramp_fraction > 0.0 && ramp_fraction <= 1.0, "ramp_weight: ramp_fraction must be in (0, 1]");
  if (s.epoch == 0) return 0.0;
  const double tau = static_cast<double>(s.epoch) / (ramp_fraction * s.total_epochs);
  if (tau >= 1.0) return weight;
  const double u = 1.0 - tau;
  return weight * std::exp(-5.0 * u * u);
}

/// Linear ramp of the unlabeled-batch share from `start` at t = 0 to `end` at t = ramp_fraction * T.
inline double unlabeled_fraction(const ScheduleState& s, double start, double end, double ramp_fraction) {
  s.validate();
  require(0.0 <= start && start <= end && end <= 1.0, "unlabeled_fraction: need 0 <= start <= end <= 1");
  require(ramp_fraction > 0.0 && ramp_fraction <= 1.0, "unlabeled_fraction: ramp_fraction must be in (0, 1]");
  const double tau = static_cast<double>(s.epoch) / (ramp_fraction * s.total_epochs);
  if (tau >= 1.0) return end;
  return start + (end - start) * tau;
}

inline double poly_lr(const ScheduleState& s, double lr0 = 0.01, double exponent = 0.9) {
  s.validate();
  require(lr0 > 0.0, "poly_lr: lr0 must be positive");
  return lr0 * std::pow(1.0 - static_cast<double>(s.epoch) / s.total_epochs, exponent);
}

struct LossComponents {
  std::optional<double> dae;
  std::optional<double> supervised;
  std::optional<double> consistency;
  std::optional<double> pseudo;
};

/// pretrain: L_DAE; cr: L_S + w_cr(t) L_CR; pl: L_S + w_cr(t) L_CR + W_PL L_PL.
inline double total_loss(Stage stage, const LossComponents& c, const LossWeights& w, const ScheduleState& s) {
  auto need = [&](const std::optional<double>& v, const char* name) {
    if (!v) throw std::invalid_argument(std::string("total_loss: stage ") + to_string(stage) + " needs " + name);
    return *v;
  };
  switch (stage) {
    case Stage::pretrain: return need(c.dae, "L_DAE");
    case Stage::cr:
      return need(c.supervised, "L_S") + ramp_weight(s, w.w_cr, w.cr_ramp_fraction) * need(c.consistency, "L_CR");
    case Stage::pl:
      return need(c.supervised, "L_S") + ramp_weight(s, w.w_cr, w.cr_ramp_fraction) * need(c.consistency, "L_CR") +
             w.w_pl * need(c.pseudo, "L_PL");
  }
  return 0.0;
}

}  // namespace semiseg
