#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "semiseg/nn.hpp"
#include "semiseg/ssm.hpp"

namespace semiseg {

enum class Head { segmentation, reconstruction };

inline std::string to_string(Head h) { return h == Head::segmentation ? "segmentation" : "reconstruction"; }
inline Head head_from_string(const std::string& s) {
  if (s == "segmentation") return Head::segmentation;
  if (s == "reconstruction") return Head::reconstruction;
  throw std::invalid_argument("unknown head '" + s + "'");
}

struct ModelConfig {
  int num_stages = 4;
  int base_channels = 8;
  double channel_growth = 2.0;
  int max_channels = 320;
  int in_channels = 1;
  Extent3 patch_size{32, 32, 32};
  int num_classes = 3;
  int bottleneck_state_dim = 16;
  Head head = Head::segmentation;

  int stage_channels(int s) const {
    return std::min(max_channels, static_cast<int>(std::lround(base_channels * std::pow(channel_growth, s))));
  }
  int output_channels() const { return head == Head::segmentation ? num_classes : 1; }

  Extent3 stage_extent(int s, Extent3 input) const { return {input.d >> s, input.h >> s, input.w >> s}; }

  /// True when `e` can pass through every downsampling stage exactly.
  bool accepts(Extent3 e) const {
    const int f = 1 << (num_stages - 1);
    return e.d >= f && e.h >= f && e.w >= f && e.d % f == 0 && e.h % f == 0 && e.w % f == 0;
  }

  void validate() const {
    require(num_stages >= 2, "ModelConfig: num_stages must be >= 2");
    require(base_channels >= 1 && channel_growth >= 1.0 && max_channels >= base_channels,
            "ModelConfig: invalid channel settings");
    require(num_classes >= 2, "ModelConfig: num_classes must be >= 2");
    require(bottleneck_state_dim >= 1, "ModelConfig: bottleneck_state_dim must be >= 1");
    require(accepts(patch_size), "ModelConfig: patch extents " + patch_size.str() + " must be divisible by 2^" +
                                     std::to_string(num_stages - 1));
  }

  /// Trunk equality: everything except the head.
  bool same_trunk(const ModelConfig& o) const {
    return num_stages == o.num_stages && base_channels == o.base_channels && channel_growth == o.channel_growth &&
           max_channels == o.max_channels && in_channels == o.in_channels &&
           bottleneck_state_dim == o.bottleneck_state_dim;
  }

  static ModelConfig test_preset() { return {}; }

  /// Full-scale layout: 7 stages on 128x256x256 patches.
  static ModelConfig paper_preset() {
    ModelConfig c;
    c.num_stages = 7;
    c.base_channels = 32;
    c.max_channels = 320;
    c.patch_size = {128, 256, 256};
    c.num_classes = 3;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"num_stages", c.num_stages},
       {"base_channels", c.base_channels},
       {"channel_growth", c.channel_growth},
       {"max_channels", c.max_channels},
       {"in_channels", c.in_channels},
       {"patch_size", {c.patch_size.d, c.patch_size.h, c.patch_size.w}},
       {"num_classes", c.num_classes},
       {"bottleneck_state_dim", c.bottleneck_state_dim},
       {"head", to_string(c.head)}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.num_stages = j.value("num_stages", d.num_stages);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.channel_growth = j.value("channel_growth", d.channel_growth);
  c.max_channels = j.value("max_channels", d.max_channels);
  c.in_channels = j.value("in_channels", d.in_channels);
  if (j.contains("patch_size")) {
    const auto& p = j.at("patch_size");
    c.patch_size = {p.at(0).get<int>(), p.at(1).get<int>(), p.at(2).get<int>()};
  } else {
    c.patch_size = d.patch_size;
  }
  c.num_classes = j.value("num_classes", d.num_classes);
  c.bottleneck_state_dim = j.value("bottleneck_state_dim", d.bottleneck_state_dim);
  c.head = head_from_string(j.value("head", to_string(d.head)));
}

/// Per-stage encoder activations, shallow to deep; the last entry is the bottleneck (after sequence mixing).
template <class T>
struct FeatureMaps {
  std::vector<Tensor<T>> stages;

  std::size_t size() const { return stages.size(); }
  Tensor<T>& operator[](std::size_t i) { return stages[i]; }
  const Tensor<T>& operator[](std::size_t i) const { return stages[i]; }
};

/// U-Net encoder/decoder with a bidirectional selective-scan block at the bottleneck.
template <class T>
class UNet {
 public:
  struct EncodeTape {
    std::vector<typename nn::ConvBlock<T>::Cache> first, second;
    typename SsmBlock<T>::Cache ssm;
    Extent3 bottleneck_extent{};
  };
  struct DecodeTape {
    std::vector<Tensor<T>> up_input;
    std::vector<typename nn::ConvBlock<T>::Cache> first, second;
    Tensor<T> head_input;
  };
  struct Tape {
    EncodeTape encode;
    DecodeTape decode;
  };

  UNet() = default;
  explicit UNet(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    const int S = cfg_.num_stages;
    for (int s = 0; s < S; ++s) {
      const int in = s == 0 ? cfg_.in_channels : cfg_.stage_channels(s - 1);
      const int ch = cfg_.stage_channels(s);
      const std::string n = "enc" + std::to_string(s);
      enc_first_.emplace_back(n + ".0", in, ch, s == 0 ? 1 : 2);
      enc_second_.emplace_back(n + ".1", ch, ch, 1);
    }
    ssm_ = SsmBlock<T>("bottleneck.ssm", cfg_.stage_channels(S - 1), cfg_.bottleneck_state_dim);
    for (int s = 0; s < S - 1; ++s) {
      const int ch = cfg_.stage_channels(s);
      const std::string n = "dec" + std::to_string(s);
      up_.emplace_back(n + ".up", cfg_.stage_channels(s + 1), ch);
      dec_first_.emplace_back(n + ".0", 2 * ch, ch, 1);
      dec_second_.emplace_back(n + ".1", ch, ch, 1);
    }
    head_ = nn::Conv3d<T>("head", cfg_.stage_channels(0), cfg_.output_channels(), 1, 1);
    Rng rng(seed);
    for (auto& b : enc_first_) b.init(rng);
    for (auto& b : enc_second_) b.init(rng);
    ssm_.init(rng);
    for (auto& u : up_) u.init(rng);
    for (auto& b : dec_first_) b.init(rng);
    for (auto& b : dec_second_) b.init(rng);
    head_.init(rng);
  }

  const ModelConfig& config() const { return cfg_; }

  FeatureMaps<T> encode(const Tensor<T>& x, EncodeTape* tape = nullptr) const {
    require(x.channels() == cfg_.in_channels, "encode: expected " + std::to_string(cfg_.in_channels) +
                                                  " input channel(s), got " + std::to_string(x.channels()));
    require(cfg_.accepts(x.extent()), "encode: input extent " + x.extent().str() + " not divisible by 2^" +
                                          std::to_string(cfg_.num_stages - 1));
    const int S = cfg_.num_stages;
    if (tape) {
      tape->first.resize(static_cast<std::size_t>(S));
      tape->second.resize(static_cast<std::size_t>(S));
    }
    FeatureMaps<T> f;
    f.stages.reserve(static_cast<std::size_t>(S));
    const Tensor<T>* in = &x;
    for (int s = 0; s < S; ++s) {
      const auto su = static_cast<std::size_t>(s);
      Tensor<T> h = enc_first_[su].forward(*in, tape ? &tape->first[su] : nullptr);
      f.stages.push_back(enc_second_[su].forward(h, tape ? &tape->second[su] : nullptr));
      in = &f.stages.back();
    }
    Tensor<T>& deep = f.stages.back();
    const SeqMat<T> seq = to_sequence(deep);
    SeqMat<T> mixed = seq + ssm_.mix(seq, tape ? &tape->ssm : nullptr);
    if (tape) tape->bottleneck_extent = deep.extent();
    deep = from_sequence<T>(mixed, deep.extent());
    return f;
  }

  Tensor<T> decode(const FeatureMaps<T>& f, DecodeTape* tape = nullptr) const {
    const int S = cfg_.num_stages;
    require(static_cast<int>(f.size()) == S, "decode: expected " + std::to_string(S) + " feature maps");
    for (int s = 0; s < S; ++s)
      require(f[static_cast<std::size_t>(s)].channels() == cfg_.stage_channels(s), "decode: feature channel mismatch");
    if (tape) {
      tape->up_input.resize(static_cast<std::size_t>(S - 1));
      tape->first.resize(static_cast<std::size_t>(S - 1));
      tape->second.resize(static_cast<std::size_t>(S - 1));
    }
    Tensor<T> cur = f[static_cast<std::size_t>(S - 1)];
    for (int s = S - 2; s >= 0; --s) {
      const auto su = static_cast<std::size_t>(s);
      Tensor<T> up = up_[su].forward(cur);
      if (tape) tape->up_input[su] = std::move(cur);
      require(up.extent() == f[su].extent(), "decode: skip extent mismatch at stage " + std::to_string(s));
      Tensor<T> h = dec_first_[su].forward(concat_channels(up, f[su]), tape ? &tape->first[su] : nullptr);
      cur = dec_second_[su].forward(h, tape ? &tape->second[su] : nullptr);
    }
    Tensor<T> out = head_.forward(cur);
    if (tape) tape->head_input = std::move(cur);
    return out;
  }

  Tensor<T> forward(const Tensor<T>& x) const { return decode(encode(x)); }

  /// Backpropagates through the decoder and head; returns dL/d(feature maps).
  FeatureMaps<T> decode_backward(const DecodeTape& tape, const Tensor<T>& grad_out) {
    const int S = cfg_.num_stages;
    FeatureMaps<T> g;
    g.stages.resize(static_cast<std::size_t>(S));
    Tensor<T> cur = head_.backward(tape.head_input, grad_out);
    for (int s = 0; s < S - 1; ++s) {
      const auto su = static_cast<std::size_t>(s);
      Tensor<T> gh = dec_second_[su].backward(tape.second[su], cur);
      Tensor<T> gcat = dec_first_[su].backward(tape.first[su], gh);
      const int ch = cfg_.stage_channels(s);
      const std::size_t split = static_cast<std::size_t>(ch) * gcat.voxels();
      Tensor<T> gup(ch, gcat.extent(), AlignedVector<T>(gcat.values().begin(), gcat.values().begin() + static_cast<std::ptrdiff_t>(split)));
      g.stages[su] = Tensor<T>(ch, gcat.extent(), AlignedVector<T>(gcat.values().begin() + static_cast<std::ptrdiff_t>(split), gcat.values().end()));
      cur = up_[su].backward(tape.up_input[su], gup);
    }
    g.stages[static_cast<std::size_t>(S - 1)] = std::move(cur);
    return g;
  }

  /// Backpropagates feature-map gradients through the encoder; returns dL/dx.
  Tensor<T> encode_backward(const EncodeTape& tape, const FeatureMaps<T>& grads) {
    const int S = cfg_.num_stages;
    Tensor<T> carry;
    for (int s = S - 1; s >= 0; --s) {
      const auto su = static_cast<std::size_t>(s);
      Tensor<T> g = grads[su];
      if (!carry.empty()) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += carry[i];
      }
      if (s == S - 1) {
        const SeqMat<T> gs = to_sequence(g);
        SeqMat<T> gpre = gs + ssm_.mix_backward(tape.ssm, gs);
        g = from_sequence<T>(gpre, tape.bottleneck_extent);
      }
      Tensor<T> gh = enc_second_[su].backward(tape.second[su], g);
      carry = enc_first_[su].backward(tape.first[su], gh);
    }
    return carry;
  }

  std::vector<nn::Param<T>*> parameters() {
    std::vector<nn::Param<T>*> out;
    collect_trunk(out);
    head_.collect(out);
    return out;
  }
  std::vector<const nn::Param<T>*> parameters() const {
    std::vector<const nn::Param<T>*> out;
    collect_trunk(out);
    head_.collect(out);
    return out;
  }
  std::vector<nn::Param<T>*> trunk_parameters() {
    std::vector<nn::Param<T>*> out;
    collect_trunk(out);
    return out;
  }
  std::vector<const nn::Param<T>*> trunk_parameters() const {
    std::vector<const nn::Param<T>*> out;
    collect_trunk(out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  SsmBlock<T>& bottleneck() { return ssm_; }

 private:
  template <class V>
  void collect_trunk(V& out) const {
    for (const auto& b : enc_first_) b.collect(out);
    for (const auto& b : enc_second_) b.collect(out);
    ssm_.collect(out);
    for (const auto& u : up_) u.collect(out);
    for (const auto& b : dec_first_) b.collect(out);
    for (const auto& b : dec_second_) b.collect(out);
  }
  template <class V>
  void collect_trunk(V& out) {
    for (auto& b : enc_first_) b.collect(out);
    for (auto& b : enc_second_) b.collect(out);
    ssm_.collect(out);
    for (auto& u : up_) u.collect(out);
    for (auto& b : dec_first_) b.collect(out);
    for (auto& b : dec_second_) b.collect(out);
  }

  ModelConfig cfg_;
  std::vector<nn::ConvBlock<T>> enc_first_, enc_second_;
  SsmBlock<T> ssm_;
  std::vector<nn::UpConv3d<T>> up_;
  std::vector<nn::ConvBlock<T>> dec_first_, dec_second_;
  nn::Conv3d<T> head_;
};

/// Flattened parameter values in registration order.
template <class T>
std::vector<T> flat_values(const std::vector<const nn::Param<T>*>& params) {
  std::vector<T> out;
  for (const auto* p : params) out.insert(out.end(), p->value.begin(), p->value.end());
  return out;
}

/// Builds a segmentation model with config `target` whose trunk is copied from `source`
/// and whose head is freshly initialized.
template <class T>
UNet<T> convert_head(const UNet<T>& source, ModelConfig target, std::uint64_t seed) {
  if (!source.config().same_trunk(target)) throw std::invalid_argument("convert_head: trunk config mismatch");
  target.head = Head::segmentation;
  UNet<T> out(target, seed);
  auto dst = out.trunk_parameters();
  auto src = source.trunk_parameters();
  require(dst.size() == src.size(), "convert_head: trunk layout mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    require(dst[i]->size() == src[i]->size() && dst[i]->name == src[i]->name,
            "convert_head: trunk mismatch at " + dst[i]->name);
    dst[i]->value = src[i]->value;
  }
  return out;
}

template <class T>
UNet<T> convert_head(const UNet<T>& source, int num_classes, std::uint64_t seed) {
  ModelConfig cfg = source.config();
  cfg.num_classes = num_classes;
  return convert_head(source, cfg, seed);
}

/// Copies trunk parameters from `source` into `target`; both configs must share the trunk.
template <class T>
void copy_trunk(const UNet<T>& source, UNet<T>& target) {
  require(source.config().same_trunk(target.config()), "copy_trunk: trunk config mismatch");
  auto dst = target.trunk_parameters();
  auto src = source.trunk_parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
}

}  // namespace semiseg
