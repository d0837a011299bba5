#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "semiseg/rng.hpp"
#include "semiseg/tensor.hpp"

// Layers with explicit forward/backward. Forward passes are const and keep no
// state; whatever backward needs is returned in a caller-owned cache, so
// several forward passes of one model can be in flight at once.

namespace semiseg::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
struct Param {
  std::string name;
  AlignedVector<T> value;
  AlignedVector<T> grad;

  Param() = default;
  Param(std::string n, std::size_t size, T fill = T{}) : name(std::move(n)), value(size, fill), grad(size, T{}) {}
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T{}); }
};

template <class T>
void init_normal(Param<T>& p, double stddev, Rng& rng) {
  for (auto& v : p.value) v = static_cast<T>(rng.normal(0.0, stddev));
}

inline constexpr double kLeakySlope = 0.01;
inline constexpr double kNormEps = 1e-5;

/// 3-D convolution, cubic kernel (1 or 3), stride 1 or 2, "same" zero padding.
template <class T>
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(std::string name, int in_channels, int out_channels, int kernel, int stride)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride),
        weight_(name + ".weight", static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel * kernel),
        bias_(name + ".bias", static_cast<std::size_t>(out_channels)) {
    require(kernel == 1 || kernel == 3, "Conv3d: kernel must be 1 or 3");
    require(stride == 1 || stride == 2, "Conv3d: stride must be 1 or 2");
  }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }

  void init(Rng& rng) {
    init_normal(weight_, std::sqrt(2.0 / (in_ * k_ * k_ * k_)), rng);
    std::fill(bias_.value.begin(), bias_.value.end(), T{});
  }

  Extent3 output_extent(Extent3 e) const {
    if (stride_ == 1) return e;
    return {(e.d + 1) / 2, (e.h + 1) / 2, (e.w + 1) / 2};
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    require(x.channels() == in_, "Conv3d " + weight_.name + ": expected " + std::to_string(in_) + " channels, got " +
                                     std::to_string(x.channels()));
    const Extent3 oe = output_extent(x.extent());
    Tensor<T> y(out_, oe);
    const auto K = static_cast<Eigen::Index>(in_ * k_ * k_ * k_);
    ConstMatMap<T> W(weight_.value.data(), out_, K, Eigen::OuterStride<>(K));
    const auto V = static_cast<Eigen::Index>(oe.voxels());
    RowMat<T> cols;
    for_each_chunk(oe, [&](std::size_t v0, std::size_t v1) {
      const auto start = static_cast<Eigen::Index>(v0);
      const auto n = static_cast<Eigen::Index>(v1 - v0);
      MatMap<T> Y(y.data() + start, out_, n, Eigen::OuterStride<>(V));
      if (pointwise()) {
        ConstMatMap<T> X(x.data() + start, in_, n, Eigen::OuterStride<>(V));
        Y.noalias() = W * X;
      } else {
        cols.resize(K, n);
        im2col(x, oe, v0, v1, cols.data());
        Y.noalias() = W * cols;
      }
      for (int c = 0; c < out_; ++c) Y.row(c).array() += bias_.value[static_cast<std::size_t>(c)];
    });
    return y;
  }

  /// Accumulates parameter gradients and returns dL/dx.
  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& gy) {
    const Extent3 oe = output_extent(x.extent());
    require(gy.channels() == out_ && gy.extent() == oe, "Conv3d backward: gradient shape mismatch");
    Tensor<T> gx(in_, x.extent());
    const auto K = static_cast<Eigen::Index>(in_ * k_ * k_ * k_);
    ConstMatMap<T> W(weight_.value.data(), out_, K, Eigen::OuterStride<>(K));
    MatMap<T> gW(weight_.grad.data(), out_, K, Eigen::OuterStride<>(K));
    const auto V = static_cast<Eigen::Index>(oe.voxels());
    for (int c = 0; c < out_; ++c) {
      T s{};
      for (T g : gy.channel(c)) s += g;
      bias_.grad[static_cast<std::size_t>(c)] += s;
    }
    RowMat<T> cols;
    for_each_chunk(oe, [&](std::size_t v0, std::size_t v1) {
      const auto start = static_cast<Eigen::Index>(v0);
      const auto n = static_cast<Eigen::Index>(v1 - v0);
      ConstMatMap<T> GY(gy.data() + start, out_, n, Eigen::OuterStride<>(V));
      if (pointwise()) {
        ConstMatMap<T> X(x.data() + start, in_, n, Eigen::OuterStride<>(V));
        gW.noalias() += GY * X.transpose();
        MatMap<T> GX(gx.data() + start, in_, n, Eigen::OuterStride<>(V));
        GX.noalias() = W.transpose() * GY;
      } else {
        cols.resize(K, n);
        im2col(x, oe, v0, v1, cols.data());
        gW.noalias() += GY * cols.transpose();
        if (stride_ != 1) {
          cols.noalias() = W.transpose() * GY;
          col2im(cols.data(), oe, v0, v1, gx);
        }
      }
    });
    if (stride_ == 1 && !pointwise()) {
      // The adjoint of a stride-1 "same" convolution is the same convolution with the kernel
      // flipped and the channel roles swapped.
      Conv3d<T> adjoint("adjoint", out_, in_, k_, 1);
      const int taps = k_ * k_ * k_;
      for (int co = 0; co < out_; ++co)
        for (int ci = 0; ci < in_; ++ci)
          for (int t = 0; t < taps; ++t)
            adjoint.weight_.value[(static_cast<std::size_t>(ci) * out_ + co) * taps + t] =
                weight_.value[(static_cast<std::size_t>(co) * in_ + ci) * taps + (taps - 1 - t)];
      gx = adjoint.forward(gy);
    }
    return gx;
  }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  void collect(std::vector<const Param<T>*>& out) const {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1; }

  // Column blocks small enough for the im2col buffer to stay cache resident.
  template <class F>
  void for_each_chunk(Extent3 oe, F&& f) const {
    const std::size_t K = static_cast<std::size_t>(in_ * k_ * k_ * k_);
    const std::size_t step = std::max<std::size_t>(256, (std::size_t{1} << 18) / K);
    const std::size_t V = oe.voxels();
    for (std::size_t v0 = 0; v0 < V; v0 += step) f(v0, std::min(V, v0 + step));
  }

  // Calls seg(oz, oy, x_begin, x_end, column offset) for each width-run of [v0, v1).
  template <class F>
  static void for_each_run(Extent3 oe, std::size_t v0, std::size_t v1, F&& seg) {
    std::size_t v = v0;
    while (v < v1) {
      const auto row = v / static_cast<std::size_t>(oe.w);
      const int ox0 = static_cast<int>(v % static_cast<std::size_t>(oe.w));
      const int oy = static_cast<int>(row % static_cast<std::size_t>(oe.h));
      const int oz = static_cast<int>(row / static_cast<std::size_t>(oe.h));
      const int ox1 = static_cast<int>(std::min<std::size_t>(oe.w, ox0 + (v1 - v)));
      seg(oz, oy, ox0, ox1, v - v0);
      v += static_cast<std::size_t>(ox1 - ox0);
    }
  }

  // Output-x range [lo, hi) whose input column ox*stride + kx - pad lies inside [0, in_w).
  void valid_x(int kx, int in_w, int ox0, int ox1, int& lo, int& hi) const {
    const int pad = k_ / 2;
    lo = ox0;
    while (lo < ox1 && lo * stride_ + kx - pad < 0) ++lo;
    hi = ox1;
    while (hi > lo && (hi - 1) * stride_ + kx - pad >= in_w) --hi;
  }

  void im2col(const Tensor<T>& x, Extent3 oe, std::size_t v0, std::size_t v1, T* cols) const {
    const Extent3 ie = x.extent();
    const int pad = k_ / 2;
    const std::size_t n = v1 - v0;
    for_each_run(oe, v0, v1, [&](int oz, int oy, int ox0, int ox1, std::size_t off) {
      int lo[3], hi[3];
      for (int kx = 0; kx < k_; ++kx) valid_x(kx, ie.w, ox0, ox1, lo[kx], hi[kx]);
      std::size_t row = 0;
      for (int c = 0; c < in_; ++c)
        for (int kz = 0; kz < k_; ++kz) {
          const int iz = oz * stride_ + kz - pad;
          for (int ky = 0; ky < k_; ++ky) {
            const int iy = oy * stride_ + ky - pad;
            const bool inside = iz >= 0 && iz < ie.d && iy >= 0 && iy < ie.h;
            const T* src = inside ? x.data() + x.index(c, iz, iy, 0) : nullptr;
            for (int kx = 0; kx < k_; ++kx, ++row) {
              T* d = cols + row * n + off - ox0;
              if (!inside) {
                std::fill(d + ox0, d + ox1, T{});
                continue;
              }
              std::fill(d + ox0, d + lo[kx], T{});
              if (stride_ == 1) {
                std::copy(src + lo[kx] + kx - pad, src + hi[kx] + kx - pad, d + lo[kx]);
              } else {
                for (int ox = lo[kx]; ox < hi[kx]; ++ox) d[ox] = src[ox * stride_ + kx - pad];
              }
              std::fill(d + hi[kx], d + ox1, T{});
            }
          }
        }
    });
  }

  static void accumulate(T* __restrict dst, const T* __restrict src, int n) {
    for (int i = 0; i < n; ++i) dst[i] += src[i];
  }

  void col2im(const T* cols, Extent3 oe, std::size_t v0, std::size_t v1, Tensor<T>& gx) const {
    const Extent3 ie = gx.extent();
    const int pad = k_ / 2;
    const std::size_t n = v1 - v0;
    for_each_run(oe, v0, v1, [&](int oz, int oy, int ox0, int ox1, std::size_t off) {
      int lo[3], hi[3];
      for (int kx = 0; kx < k_; ++kx) valid_x(kx, ie.w, ox0, ox1, lo[kx], hi[kx]);
      std::size_t row = 0;
      for (int c = 0; c < in_; ++c)
        for (int kz = 0; kz < k_; ++kz) {
          const int iz = oz * stride_ + kz - pad;
          for (int ky = 0; ky < k_; ++ky) {
            const int iy = oy * stride_ + ky - pad;
            if (iz < 0 || iz >= ie.d || iy < 0 || iy >= ie.h) {
              row += static_cast<std::size_t>(k_);
              continue;
            }
            T* dst = gx.data() + gx.index(c, iz, iy, 0);
            for (int kx = 0; kx < k_; ++kx, ++row) {
              const T* s = cols + row * n + off - ox0;
              if (stride_ == 1) {
                accumulate(dst + kx - pad + lo[kx], s + lo[kx], hi[kx] - lo[kx]);
              } else {
                for (int ox = lo[kx]; ox < hi[kx]; ++ox) dst[ox * stride_ + kx - pad] += s[ox];
              }
            }
          }
        }
    });
  }

  int in_ = 0, out_ = 0, k_ = 3, stride_ = 1;
  Param<T> weight_, bias_;
};

/// Transposed convolution with kernel 2 and stride 2 (exact 2x upsampling).
template <class T>
class UpConv3d {
 public:
  UpConv3d() = default;
  UpConv3d(std::string name, int in_channels, int out_channels)
      : in_(in_channels), out_(out_channels),
        weight_(name + ".weight", static_cast<std::size_t>(out_channels) * 8 * in_channels),
        bias_(name + ".bias", static_cast<std::size_t>(out_channels)) {}

  void init(Rng& rng) {
    init_normal(weight_, std::sqrt(1.0 / in_), rng);
    std::fill(bias_.value.begin(), bias_.value.end(), T{});
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    require(x.channels() == in_, "UpConv3d " + weight_.name + ": channel mismatch");
    const Extent3 ie = x.extent();
    const Extent3 oe{ie.d * 2, ie.h * 2, ie.w * 2};
    const auto V = static_cast<Eigen::Index>(ie.voxels());
    ConstMatMap<T> W(weight_.value.data(), out_ * 8, in_, Eigen::OuterStride<>(in_));
    ConstMatMap<T> X(x.data(), in_, V, Eigen::OuterStride<>(V));
    RowMat<T> Y = W * X;
    Tensor<T> y(out_, oe);
    scatter_gather(ie, [&](int c, int k, std::size_t v, std::size_t o) {
      y[o] = Y(c * 8 + k, static_cast<Eigen::Index>(v)) + bias_.value[static_cast<std::size_t>(c)];
    });
    return y;
  }

  Tensor<T> backward(const Tensor<T>& x, const Tensor<T>& gy) {
    const Extent3 ie = x.extent();
    const auto V = static_cast<Eigen::Index>(ie.voxels());
    RowMat<T> GY(out_ * 8, V);
    scatter_gather(ie, [&](int c, int k, std::size_t v, std::size_t o) {
      GY(c * 8 + k, static_cast<Eigen::Index>(v)) = gy[o];
    });
    for (int c = 0; c < out_; ++c) {
      T s{};
      for (T g : gy.channel(c)) s += g;
      bias_.grad[static_cast<std::size_t>(c)] += s;
    }
    ConstMatMap<T> W(weight_.value.data(), out_ * 8, in_, Eigen::OuterStride<>(in_));
    MatMap<T> gW(weight_.grad.data(), out_ * 8, in_, Eigen::OuterStride<>(in_));
    ConstMatMap<T> X(x.data(), in_, V, Eigen::OuterStride<>(V));
    gW.noalias() += GY * X.transpose();
    Tensor<T> gx(in_, ie);
    MatMap<T> GX(gx.data(), in_, V, Eigen::OuterStride<>(V));
    GX.noalias() = W.transpose() * GY;
    return gx;
  }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  void collect(std::vector<const Param<T>*>& out) const {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  // f(channel, kernel offset index, input voxel, output flat index)
  template <class F>
  void scatter_gather(Extent3 ie, F&& f) const {
    const Extent3 oe{ie.d * 2, ie.h * 2, ie.w * 2};
    for (int c = 0; c < out_; ++c)
      for (int z = 0; z < oe.d; ++z)
        for (int y = 0; y < oe.h; ++y)
          for (int x = 0; x < oe.w; ++x) {
            const int k = ((z & 1) * 2 + (y & 1)) * 2 + (x & 1);
            const std::size_t v = (static_cast<std::size_t>(z >> 1) * ie.h + (y >> 1)) * ie.w + (x >> 1);
            const std::size_t o = ((static_cast<std::size_t>(c) * oe.d + z) * oe.h + y) * oe.w + x;
            f(c, k, v, o);
          }
  }

  int in_ = 0, out_ = 0;
  Param<T> weight_, bias_;
};

/// Per-sample, per-channel normalization with affine scale/shift, followed by leaky ReLU.
template <class T>
class InstanceNormAct {
 public:
  struct Cache {
    Tensor<T> normalized;
    Tensor<T> activated_input;  // affine output before the nonlinearity
    std::vector<T> inv_std;
  };

  InstanceNormAct() = default;
  InstanceNormAct(std::string name, int channels)
      : channels_(channels), gamma_(name + ".gamma", static_cast<std::size_t>(channels), T{1}),
        beta_(name + ".beta", static_cast<std::size_t>(channels), T{0}) {}

  void init(Rng&) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), T{1});
    std::fill(beta_.value.begin(), beta_.value.end(), T{0});
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    require(x.channels() == channels_, "InstanceNormAct: channel mismatch");
    Tensor<T> y(channels_, x.extent());
    Cache local;
    Cache& cc = cache ? *cache : local;
    const bool keep = cache != nullptr;
    if (keep) {
      cc.normalized = Tensor<T>(channels_, x.extent());
      cc.activated_input = Tensor<T>(channels_, x.extent());
      cc.inv_std.assign(static_cast<std::size_t>(channels_), T{});
    }
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const auto n = static_cast<Eigen::Index>(x.voxels());
    for (int c = 0; c < channels_; ++c) {
      const auto cu = static_cast<std::size_t>(c);
      Eigen::Map<const Arr> in(x.channel(c).data(), n);
      const T mean = in.mean();
      const T var = (in - mean).square().mean();
      const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var) + kNormEps));
      const T g = gamma_.value[cu], b = beta_.value[cu];
      Eigen::Map<Arr> out(y.channel(c).data(), n);
      if (keep) {
        Eigen::Map<Arr> xhat(cc.normalized.channel(c).data(), n);
        Eigen::Map<Arr> a(cc.activated_input.channel(c).data(), n);
        xhat = (in - mean) * inv;
        a = g * xhat + b;
        out = a.max(static_cast<T>(kLeakySlope) * a);
        cc.inv_std[cu] = inv;
      } else {
        const Arr a = g * (in - mean) * inv + b;
        out = a.max(static_cast<T>(kLeakySlope) * a);
      }
    }
    return y;
  }

  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy) {
    Tensor<T> gx(channels_, gy.extent());
    const auto n = static_cast<T>(gy.voxels());
    for (int c = 0; c < channels_; ++c) {
      auto g = gy.channel(c);
      auto xhat = cache.normalized.channel(c);
      auto a = cache.activated_input.channel(c);
      std::vector<T> ga(g.size());
      T sum_ga{}, sum_ga_xhat{};
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] = a[i] > T{0} ? g[i] : static_cast<T>(kLeakySlope) * g[i];
        sum_ga += ga[i];
        sum_ga_xhat += ga[i] * xhat[i];
      }
      const auto cu = static_cast<std::size_t>(c);
      gamma_.grad[cu] += sum_ga_xhat;
      beta_.grad[cu] += sum_ga;
      const T scale = gamma_.value[cu] * cache.inv_std[cu] / n;
      auto out = gx.channel(c);
      for (std::size_t i = 0; i < g.size(); ++i) out[i] = scale * (n * ga[i] - sum_ga - xhat[i] * sum_ga_xhat);
    }
    return gx;
  }

  void collect(std::vector<Param<T>*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void collect(std::vector<const Param<T>*>& out) const {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

 private:
  int channels_ = 0;
  Param<T> gamma_, beta_;
};

/// Convolution + instance norm + leaky ReLU.
template <class T>
class ConvBlock {
 public:
  struct Cache {
    Tensor<T> input;
    typename InstanceNormAct<T>::Cache norm;
  };

  ConvBlock() = default;
  ConvBlock(const std::string& name, int in_channels, int out_channels, int stride)
      : conv_(name + ".conv", in_channels, out_channels, 3, stride), norm_(name + ".norm", out_channels) {}

  void init(Rng& rng) {
    conv_.init(rng);
    norm_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const {
    if (cache) cache->input = x;
    return norm_.forward(conv_.forward(x), cache ? &cache->norm : nullptr);
  }

  Tensor<T> backward(const Cache& cache, const Tensor<T>& gy) {
    return conv_.backward(cache.input, norm_.backward(cache.norm, gy));
  }

  template <class V>
  void collect(V& out) {
    conv_.collect(out);
    norm_.collect(out);
  }
  template <class V>
  void collect(V& out) const {
    conv_.collect(out);
    norm_.collect(out);
  }

 private:
  Conv3d<T> conv_;
  InstanceNormAct<T> norm_;
};

}  // namespace semiseg::nn
