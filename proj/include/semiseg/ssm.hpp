#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "semiseg/nn.hpp"

// Selective scalar-decay state-space scan used as the sequence mixer at the
// U-Net bottleneck. For a sequence x_1..x_L of F-dim features:
//
//   a_t = sigmoid(w . x_t + beta)         input-dependent decay in (0, 1)
//   b_t = B x_t,  c_t = C x_t             N-dim input / output projections
//   h_t = a_t h_{t-1} + b_t x_t^T         N x F state
//   y_t = h_t^T c_t
//
// Unrolled, y = M x with M[t][s] = (c_t . b_s) prod_{r=s+1..t} a_r for s <= t,
// i.e. a lower-triangular semiseparable operator applied in O(L N F).

namespace semiseg {

template <class T>
using SeqMat = nn::RowMat<T>;  // L x F, one row per position

/// Parameters of one scan direction.
template <class T>
struct ScanDirection {
  int features = 0;
  int state_dim = 0;
  nn::Param<T> decay_weight;  // F
  nn::Param<T> decay_bias;    // 1
  nn::Param<T> in_proj;       // N x F
  nn::Param<T> out_proj;      // N x F

  ScanDirection() = default;
  ScanDirection(const std::string& name, int f, int n)
      : features(f), state_dim(n), decay_weight(name + ".decay_w", static_cast<std::size_t>(f)),
        decay_bias(name + ".decay_b", 1), in_proj(name + ".in_proj", static_cast<std::size_t>(n) * f),
        out_proj(name + ".out_proj", static_cast<std::size_t>(n) * f) {}

  void init(Rng& rng) {
    nn::init_normal(decay_weight, 0.1 / std::sqrt(static_cast<double>(features)), rng);
    decay_bias.value[0] = static_cast<T>(1.5);
    nn::init_normal(in_proj, 1.0 / std::sqrt(static_cast<double>(features)), rng);
    nn::init_normal(out_proj, 0.1 / std::sqrt(static_cast<double>(features * state_dim)), rng);
  }

  template <class V>
  void collect(V& out) {
    out.push_back(&decay_weight);
    out.push_back(&decay_bias);
    out.push_back(&in_proj);
    out.push_back(&out_proj);
  }
  template <class V>
  void collect(V& out) const {
    out.push_back(&decay_weight);
    out.push_back(&decay_bias);
    out.push_back(&in_proj);
    out.push_back(&out_proj);
  }
};

/// Per-position quantities of one scan, as computed from the input.
template <class T>
struct ScanCoefficients {
  std::vector<T> decay;  // a_t, L
  SeqMat<T> b;           // L x N
  SeqMat<T> c;           // L x N
};

template <class T>
ScanCoefficients<T> scan_coefficients(const ScanDirection<T>& p, const SeqMat<T>& x) {
  require(x.cols() == p.features, "selective_scan: feature dimension mismatch");
  const auto L = x.rows();
  ScanCoefficients<T> k;
  k.decay.resize(static_cast<std::size_t>(L));
  nn::ConstMatMap<T> B(p.in_proj.value.data(), p.state_dim, p.features, Eigen::OuterStride<>(p.features));
  nn::ConstMatMap<T> C(p.out_proj.value.data(), p.state_dim, p.features, Eigen::OuterStride<>(p.features));
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> w(p.decay_weight.value.data(), p.features);
  for (Eigen::Index t = 0; t < L; ++t) {
    const T z = x.row(t).dot(w.transpose()) + p.decay_bias.value[0];
    k.decay[static_cast<std::size_t>(t)] = T{1} / (T{1} + std::exp(-z));
  }
  k.b = x * B.transpose();
  k.c = x * C.transpose();
  return k;
}

template <class T>
struct ScanCache {
  SeqMat<T> input;
  ScanCoefficients<T> coeff;
  std::vector<SeqMat<T>> states;  // h_t, each N x F
};

/// Linear-time recurrence with precomputed coefficients.
template <class T>
SeqMat<T> scan_recurrence(const ScanCoefficients<T>& k, const SeqMat<T>& x, std::vector<SeqMat<T>>* states) {
  const auto L = x.rows();
  const auto F = x.cols();
  const auto N = k.b.cols();
  SeqMat<T> y(L, F);
  SeqMat<T> h = SeqMat<T>::Zero(N, F);
  if (states) states->resize(static_cast<std::size_t>(L));
  for (Eigen::Index t = 0; t < L; ++t) {
    h *= k.decay[static_cast<std::size_t>(t)];
    h.noalias() += k.b.row(t).transpose() * x.row(t);
    y.row(t).noalias() = k.c.row(t) * h;
    if (states) (*states)[static_cast<std::size_t>(t)] = h;
  }
  return y;
}

template <class T>
SeqMat<T> selective_scan(const ScanDirection<T>& p, const SeqMat<T>& x, ScanCache<T>* cache = nullptr) {
  require(x.rows() >= 1, "selective_scan: sequence must be non-empty");
  ScanCoefficients<T> k = scan_coefficients(p, x);
  SeqMat<T> y = scan_recurrence(k, x, cache ? &cache->states : nullptr);
  if (cache) {
    cache->input = x;
    cache->coeff = std::move(k);
  }
  return y;
}

/// Accumulates parameter gradients; returns dL/dx.
template <class T>
SeqMat<T> selective_scan_backward(ScanDirection<T>& p, const ScanCache<T>& cache, const SeqMat<T>& gy) {
  const SeqMat<T>& x = cache.input;
  const auto& k = cache.coeff;
  const auto L = x.rows();
  const auto F = x.cols();
  const auto N = static_cast<Eigen::Index>(p.state_dim);
  SeqMat<T> gx = SeqMat<T>::Zero(L, F);
  SeqMat<T> gb(L, N), gc(L, N);
  std::vector<T> gz(static_cast<std::size_t>(L));
  SeqMat<T> gh = SeqMat<T>::Zero(N, F);
  for (Eigen::Index t = L - 1; t >= 0; --t) {
    const auto tu = static_cast<std::size_t>(t);
    const SeqMat<T>& h = cache.states[tu];
    gh.noalias() += k.c.row(t).transpose() * gy.row(t);
    gc.row(t).noalias() = (h * gy.row(t).transpose()).transpose();
    T ga{};
    if (t > 0) ga = (cache.states[tu - 1].array() * gh.array()).sum();
    gb.row(t).noalias() = (gh * x.row(t).transpose()).transpose();
    gx.row(t).noalias() += k.b.row(t) * gh;
    const T a = k.decay[tu];
    gz[tu] = ga * a * (T{1} - a);
    gh *= a;
  }
  nn::ConstMatMap<T> B(p.in_proj.value.data(), N, F, Eigen::OuterStride<>(F));
  nn::ConstMatMap<T> C(p.out_proj.value.data(), N, F, Eigen::OuterStride<>(F));
  nn::MatMap<T> gB(p.in_proj.grad.data(), N, F, Eigen::OuterStride<>(F));
  nn::MatMap<T> gC(p.out_proj.grad.data(), N, F, Eigen::OuterStride<>(F));
  gB.noalias() += gb.transpose() * x;
  gC.noalias() += gc.transpose() * x;
  gx.noalias() += gb * B + gc * C;
  for (Eigen::Index t = 0; t < L; ++t) {
    const T g = gz[static_cast<std::size_t>(t)];
    p.decay_bias.grad[0] += g;
    for (Eigen::Index f = 0; f < F; ++f) {
      p.decay_weight.grad[static_cast<std::size_t>(f)] += g * x(t, f);
      gx(t, f) += g * p.decay_weight.value[static_cast<std::size_t>(f)];
    }
  }
  return gx;
}

template <class T>
SeqMat<T> reverse_rows(const SeqMat<T>& m) {
  return m.colwise().reverse();
}

/// Bidirectional mixer: forward scan + reversed scan + per-feature skip d.
template <class T>
class SsmBlock {
 public:
  struct Cache {
    ScanCache<T> forward, backward;
    SeqMat<T> input;
  };

  SsmBlock() = default;
  SsmBlock(const std::string& name, int features, int state_dim)
      : fwd_(name + ".fwd", features, state_dim), bwd_(name + ".bwd", features, state_dim),
        skip_(name + ".skip", static_cast<std::size_t>(features)) {}

  void init(Rng& rng) {
    fwd_.init(rng);
    bwd_.init(rng);
    std::fill(skip_.value.begin(), skip_.value.end(), T{});
  }

  int features() const { return fwd_.features; }
  ScanDirection<T>& forward_direction() { return fwd_; }
  ScanDirection<T>& backward_direction() { return bwd_; }
  const ScanDirection<T>& forward_direction() const { return fwd_; }
  const ScanDirection<T>& backward_direction() const { return bwd_; }
  AlignedVector<T>& skip() { return skip_.value; }

  SeqMat<T> mix(const SeqMat<T>& x, Cache* cache = nullptr) const {
    SeqMat<T> y = selective_scan(fwd_, x, cache ? &cache->forward : nullptr);
    y += reverse_rows<T>(selective_scan(bwd_, reverse_rows<T>(x), cache ? &cache->backward : nullptr));
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> d(skip_.value.data(), x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) y.row(t).array() += x.row(t).array() * d.array();
    if (cache) cache->input = x;
    return y;
  }

  SeqMat<T> mix_backward(const Cache& cache, const SeqMat<T>& gy) {
    SeqMat<T> gx = selective_scan_backward(fwd_, cache.forward, gy);
    gx += reverse_rows<T>(selective_scan_backward(bwd_, cache.backward, reverse_rows<T>(gy)));
    const auto F = gy.cols();
    for (Eigen::Index t = 0; t < gy.rows(); ++t)
      for (Eigen::Index f = 0; f < F; ++f) {
        skip_.grad[static_cast<std::size_t>(f)] += gy(t, f) * cache.input(t, f);
        gx(t, f) += gy(t, f) * skip_.value[static_cast<std::size_t>(f)];
      }
    return gx;
  }

  template <class V>
  void collect(V& out) {
    fwd_.collect(out);
    bwd_.collect(out);
    out.push_back(&skip_);
  }
  template <class V>
  void collect(V& out) const {
    fwd_.collect(out);
    bwd_.collect(out);
    out.push_back(&skip_);
  }

 private:
  ScanDirection<T> fwd_, bwd_;
  nn::Param<T> skip_;
};

/// Raster-order flattening of a C x D x H x W map into an L x C sequence.
template <class T>
SeqMat<T> to_sequence(const Tensor<T>& m) {
  const auto L = static_cast<Eigen::Index>(m.voxels());
  nn::ConstMatMap<T> cv(m.data(), m.channels(), L, Eigen::OuterStride<>(L));
  return cv.transpose();
}

template <class T>
Tensor<T> from_sequence(const SeqMat<T>& s, Extent3 extent) {
  Tensor<T> m(static_cast<int>(s.cols()), extent);
  const auto L = static_cast<Eigen::Index>(extent.voxels());
  nn::MatMap<T> cv(m.data(), s.cols(), L, Eigen::OuterStride<>(L));
  cv = s.transpose();
  return m;
}

}  // namespace semiseg
