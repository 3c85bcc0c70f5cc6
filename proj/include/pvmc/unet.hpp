#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pvmc/rng.hpp"
#include "pvmc/tensor.hpp"

namespace pvmc {

/// Encoder-decoder topology. Single channel in and out, transposed-conv
/// upsampling, skip connections always on.
struct NetConfig {
  int depth = 3;
  std::vector<int> channels = {8, 16, 32};  // one entry per level

  int divisor() const { return 1 << (depth - 1); }

  void validate() const {
    if (depth < 2) throw ConfigError("NetConfig: depth must be >= 2");
    if (static_cast<int>(channels.size()) != depth)
      throw ConfigError("NetConfig: channels list must have `depth` entries");
    for (int c : channels)
      if (c < 1) throw ConfigError("NetConfig: channels must be >= 1");
  }
};

template <class T>
struct ConvParam {
  ad::Tensor<T> w, b;
};

template <class T>
class UNet {
 public:
  UNet() = default;

  static UNet init(const NetConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    UNet net;
    net.cfg_ = cfg;
    Rng rng(seed, stream_tag("unet_init"));
    const int d = cfg.depth;
    for (int l = 0; l + 1 < d; ++l) {
      const int in_ch = l == 0 ? 1 : cfg.channels[l - 1];
      net.enc1_.push_back(he_conv(in_ch, cfg.channels[l], 3, rng));
      net.enc2_.push_back(he_conv(cfg.channels[l], cfg.channels[l], 3, rng));
    }
    net.bott1_ = he_conv(cfg.channels[d - 2], cfg.channels[d - 1], 3, rng);
    net.bott2_ = he_conv(cfg.channels[d - 1], cfg.channels[d - 1], 3, rng);
    for (int l = 0; l + 1 < d; ++l) {
      net.up_.push_back(he_tconv(cfg.channels[l + 1], cfg.channels[l], rng));
      net.dec1_.push_back(he_conv(2 * cfg.channels[l], cfg.channels[l], 3, rng));
      net.dec2_.push_back(he_conv(cfg.channels[l], cfg.channels[l], 3, rng));
    }
    // zero-initialized head: the untrained net is the zero denoiser
    net.final_.w = ad::Tensor<T>(ad::Shape{1, cfg.channels[0], 1, 1}, T(0), true);
    net.final_.b = ad::Tensor<T>(ad::Shape{1}, T(0), true);
    return net;
  }

  const NetConfig& config() const { return cfg_; }

  /// x: {N,1,H,W} with H, W divisible by 2^(depth-1). Output has the same
  /// shape; the head activation is identity.
  ad::Tensor<T> forward(const ad::Tensor<T>& x) const {
    if (x.shape().size() != 4 || x.shape()[1] != 1)
      throw ConfigError("UNet::forward: expected {N,1,H,W} input");
    const int div = cfg_.divisor();
    if (x.shape()[2] % div != 0 || x.shape()[3] % div != 0)
      throw ConfigError("UNet::forward: spatial dims must be divisible by " +
                        std::to_string(div));
    ad::Tensor<T> a = x;
    std::vector<ad::Tensor<T>> skips;
    for (std::size_t l = 0; l < enc1_.size(); ++l) {
      a = ad::relu(ad::conv2d(a, enc1_[l].w, enc1_[l].b));
      a = ad::relu(ad::conv2d(a, enc2_[l].w, enc2_[l].b));
      skips.push_back(a);
      a = ad::maxpool2x2(a);
    }
    a = ad::relu(ad::conv2d(a, bott1_.w, bott1_.b));
    a = ad::relu(ad::conv2d(a, bott2_.w, bott2_.b));
    for (std::size_t i = up_.size(); i-- > 0;) {
      a = ad::conv_transpose2d(a, up_[i].w, up_[i].b);
      a = ad::concat_channels(skips[i], a);
      a = ad::relu(ad::conv2d(a, dec1_[i].w, dec1_[i].b));
      a = ad::relu(ad::conv2d(a, dec2_[i].w, dec2_[i].b));
    }
    return ad::conv2d(a, final_.w, final_.b);
  }

  /// Parameters in a fixed, named order.
  std::vector<std::pair<std::string, ad::Tensor<T>>> named_params() const {
    std::vector<std::pair<std::string, ad::Tensor<T>>> out;
    auto push = [&out](const std::string& name, const ConvParam<T>& c) {
      out.emplace_back(name + ".w", c.w);
      out.emplace_back(name + ".b", c.b);
    };
    for (std::size_t l = 0; l < enc1_.size(); ++l) {
      push("enc" + std::to_string(l) + ".c1", enc1_[l]);
      push("enc" + std::to_string(l) + ".c2", enc2_[l]);
    }
    push("bott.c1", bott1_);
    push("bott.c2", bott2_);
    for (std::size_t l = 0; l < up_.size(); ++l) {
      push("dec" + std::to_string(l) + ".up", up_[l]);
      push("dec" + std::to_string(l) + ".c1", dec1_[l]);
      push("dec" + std::to_string(l) + ".c2", dec2_[l]);
    }
    push("final", final_);
    return out;
  }

  std::vector<ad::Tensor<T>> params() const {
    std::vector<ad::Tensor<T>> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : named_params()) n += t.numel();
    return n;
  }

  /// Deep copy (values only, detached from any graph).
  UNet clone() const {
    UNet c;
    c.cfg_ = cfg_;
    auto cp = [](const ConvParam<T>& p) {
      ConvParam<T> q;
      q.w = ad::Tensor<T>::from_data(p.w.shape(), p.w.data(), true);
      q.b = ad::Tensor<T>::from_data(p.b.shape(), p.b.data(), true);
      return q;
    };
    for (const auto& p : enc1_) c.enc1_.push_back(cp(p));
    for (const auto& p : enc2_) c.enc2_.push_back(cp(p));
    c.bott1_ = cp(bott1_);
    c.bott2_ = cp(bott2_);
    for (const auto& p : up_) c.up_.push_back(cp(p));
    for (const auto& p : dec1_) c.dec1_.push_back(cp(p));
    for (const auto& p : dec2_) c.dec2_.push_back(cp(p));
    c.final_ = cp(final_);
    return c;
  }

  /// FNV-1a over all parameter bytes in named order (trajectory tracing).
  std::uint64_t content_hash() const {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& [name, t] : named_params()) {
      const unsigned char* p =
          reinterpret_cast<const unsigned char*>(t.data().data());
      const std::size_t bytes = t.data().size() * sizeof(T);
      for (std::size_t i = 0; i < bytes; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
      }
    }
    return h;
  }

 private:
  static ConvParam<T> he_conv(int in_ch, int out_ch, int k, Rng& rng) {
    ConvParam<T> p;
    p.w = ad::Tensor<T>(ad::Shape{out_ch, in_ch, k, k}, T(0), true);
    const double std_dev = std::sqrt(2.0 / (in_ch * k * k));
    for (auto& v : p.w.data()) v = static_cast<T>(std_dev * rng.normal());
    p.b = ad::Tensor<T>(ad::Shape{out_ch}, T(0), true);
    return p;
  }

  static ConvParam<T> he_tconv(int in_ch, int out_ch, Rng& rng) {
    ConvParam<T> p;
    p.w = ad::Tensor<T>(ad::Shape{in_ch, out_ch, 2, 2}, T(0), true);
    const double std_dev = std::sqrt(2.0 / (in_ch * 2 * 2));
    for (auto& v : p.w.data()) v = static_cast<T>(std_dev * rng.normal());
    p.b = ad::Tensor<T>(ad::Shape{out_ch}, T(0), true);
    return p;
  }

  NetConfig cfg_;
  std::vector<ConvParam<T>> enc1_, enc2_;
  ConvParam<T> bott1_, bott2_;
  std::vector<ConvParam<T>> up_, dec1_, dec2_;
  ConvParam<T> final_;
};

}  // namespace pvmc
