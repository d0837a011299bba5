#pragma once

#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/nn.hpp"

namespace semiseg {

struct SgdConfig {
  double momentum = 0.99;
  bool nesterov = true;
  double weight_decay = 3e-5;
  double clip_norm = 12.0;  // <= 0 disables clipping

  void validate() const {
    require(momentum >= 0.0 && momentum < 1.0, "SgdConfig: momentum must be in [0, 1)");
    require(weight_decay >= 0.0, "SgdConfig: weight_decay must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const SgdConfig& c) {
  j = {{"momentum", c.momentum}, {"nesterov", c.nesterov}, {"weight_decay", c.weight_decay}, {"clip_norm", c.clip_norm}};
}
inline void from_json(const nlohmann::json& j, SgdConfig& c) {
  const SgdConfig d;
  c.momentum = j.value("momentum", d.momentum);
  c.nesterov = j.value("nesterov", d.nesterov);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
}

/// Global L2 norm of all gradients.
template <class T>
double grad_norm(const std::vector<nn::Param<T>*>& params) {
  double s = 0.0;
  for (const auto* p : params)
    for (T g : p->grad) s += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(s);
}

/// Rescales gradients so the global norm does not exceed max_norm; returns the norm before clipping.
template <class T>
double clip_grad_norm(const std::vector<nn::Param<T>*>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const T scale = static_cast<T>(max_norm / (norm + 1e-6));
    for (auto* p : params)
      for (T& g : p->grad) g *= scale;
  }
  return norm;
}

/// SGD with (Nesterov) momentum:
///   d = g + wd * p;  buf = mu * buf + d;  p -= lr * (nesterov ? d + mu * buf : buf)
template <class T>
class Sgd {
 public:
  Sgd() = default;
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  const SgdConfig& config() const { return cfg_; }

  /// Clips, then updates every parameter in place. Returns the pre-clip gradient norm.
  double step(const std::vector<nn::Param<T>*>& params, double lr) {
    if (velocity_.empty()) {
      velocity_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i]->size(), T{});
    }
    require(velocity_.size() == params.size(), "Sgd: parameter list changed between steps");
    const double norm = clip_grad_norm(params, cfg_.clip_norm);
    const T mu = static_cast<T>(cfg_.momentum);
    const T wd = static_cast<T>(cfg_.weight_decay);
    const T rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      auto& buf = velocity_[i];
      require(buf.size() == p.size(), "Sgd: parameter size changed between steps");
      for (std::size_t k = 0; k < p.size(); ++k) {
        const T d = p.grad[k] + wd * p.value[k];
        buf[k] = mu * buf[k] + d;
        p.value[k] -= rate * (cfg_.nesterov ? d + mu * buf[k] : buf[k]);
      }
    }
    ++steps_;
    return norm;
  }

  const std::vector<std::vector<T>>& velocity() const { return velocity_; }
  std::vector<std::vector<T>>& velocity() { return velocity_; }
  long long steps() const { return steps_; }
  void set_steps(long long s) { steps_ = s; }
  void reset() {
    velocity_.clear();
    steps_ = 0;
  }

 private:
  SgdConfig cfg_{};
  std::vector<std::vector<T>> velocity_;
  long long steps_ = 0;
};

}  // namespace semiseg
