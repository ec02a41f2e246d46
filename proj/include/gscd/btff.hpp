#pragma once

// Bi-temporal feature fusion for the change branch: per-level difference
// and cosine fusion, then bottom-up transposed-conv integration.

#include <array>
#include <cstddef>
#include <string>

#include "gscd/backbone.hpp"
#include "gscd/nn.hpp"
#include "gscd/ops.hpp"
#include "gscd/tensor.hpp"

namespace gscd {

inline constexpr double kCosineEps = 1e-8;

/// Pre-convolution inputs of the composite fusion: the temporal difference
/// X2 - X1 and the per-pixel channel cosine map cos(X2, X1).
struct FusionInputs {
  Tensor difference;
  Tensor cosine;
};

inline FusionInputs fusion_inputs(const Tensor& x1, const Tensor& x2) {
  if (x1.shape() != x2.shape()) {
    throw ShapeError("fuse_pair: temporal shapes differ " + shape_str(x1.shape()) + " vs " + shape_str(x2.shape()));
  }
  return {sub(x2, x1), cosine_similarity(x2, x1, 1, kCosineEps)};
}

struct FusePair {
  Conv2d diff_conv;  // c_l -> width, 3x3
  Conv2d cos_conv;   // 1 -> width, 3x3
  Conv2d mix_conv;   // 2 width -> width, 3x3
  BatchNorm2d bn;
  Conv2d out_conv;   // width -> width, 1x1

  static FusePair make(std::size_t channels, std::size_t width, Rng& rng) {
    return {Conv2d::make(channels, width, 3, 1, 1, rng), Conv2d::make(1, width, 3, 1, 1, rng),
            Conv2d::make(2 * width, width, 3, 1, 1, rng), BatchNorm2d::make(width),
            Conv2d::make(width, width, 1, 1, 0, rng)};
  }

  /// F = Conv1x1(ReLU(BN(Conv3x3(concat[Conv3x3(X2 - X1), Conv3x3(cos(X2, X1))])))).
  Tensor operator()(const Tensor& x1, const Tensor& x2, bool training) {
    const auto in = fusion_inputs(x1, x2);
    const auto d = concat({diff_conv(in.difference), cos_conv(in.cosine)}, 1);
    return out_conv(relu(bn(mix_conv(d), training)));
  }

  void register_into(ParamSet& ps, const std::string& p) const {
    diff_conv.register_into(ps, p + ".diff", ParamGroup::Change);
    cos_conv.register_into(ps, p + ".cos", ParamGroup::Change);
    mix_conv.register_into(ps, p + ".mix", ParamGroup::Change);
    bn.register_into(ps, p + ".bn", ParamGroup::Change);
    out_conv.register_into(ps, p + ".out", ParamGroup::Change);
  }
};

/// F_total = DeConv(DeConv(DeConv(F4) + F3) + F2) + F1.
inline Tensor integrate(const std::array<Tensor, 4>& f, const std::array<ConvTranspose2d, 3>& deconv) {
  Tensor acc = f[3];
  for (std::size_t i = 3; i-- > 0;) {
    auto up = deconv[i](acc);
    if (up.shape() != f[i].shape()) {
      throw ShapeError("integrate: upsampled " + shape_str(up.shape()) + " does not match level " +
                       std::to_string(i + 1) + " " + shape_str(f[i].shape()));
    }
    acc = add(up, f[i]);
  }
  return acc;
}

struct BtffConfig {
  std::size_t fusion_width = 16;
  // Ablation: replace the composite fusion with channel concatenation
  // followed by a 1x1 projection.
  bool concat_fusion = false;
};

class Btff {
 public:
  Btff(const std::array<std::size_t, 4>& channels, const BtffConfig& cfg, Rng& rng) : cfg_(cfg) {
    for (std::size_t l = 0; l < 4; ++l) {
      if (cfg.concat_fusion) {
        concat_proj_[l] = Conv2d::make(2 * channels[l], cfg.fusion_width, 1, 1, 0, rng);
      } else {
        pairs_[l] = FusePair::make(channels[l], cfg.fusion_width, rng);
      }
    }
    // index i upsamples level i+2 onto level i+1
    for (auto& d : deconv_) d = ConvTranspose2d::make(cfg.fusion_width, cfg.fusion_width, 4, 2, 1, rng);
  }

  std::size_t out_channels() const { return cfg_.fusion_width; }
  std::array<ConvTranspose2d, 3>& deconvs() { return deconv_; }

  std::array<Tensor, 4> fuse_levels(const FeaturePyramid& p1, const FeaturePyramid& p2, bool training) {
    std::array<Tensor, 4> f;
    for (std::size_t l = 0; l < 4; ++l) {
      f[l] = cfg_.concat_fusion ? concat_proj_[l](concat({p1.levels[l], p2.levels[l]}, 1))
                                : pairs_[l](p1.levels[l], p2.levels[l], training);
    }
    return f;
  }

  Tensor forward(const FeaturePyramid& p1, const FeaturePyramid& p2, bool training) {
    return integrate(fuse_levels(p1, p2, training), deconv_);
  }

  void register_into(ParamSet& ps) const {
    for (std::size_t l = 0; l < 4; ++l) {
      const std::string p = "btff.level" + std::to_string(l + 1);
      if (cfg_.concat_fusion) {
        concat_proj_[l].register_into(ps, p + ".concat", ParamGroup::Change);
      } else {
        pairs_[l].register_into(ps, p);
      }
    }
    for (std::size_t i = 0; i < 3; ++i) deconv_[i].register_into(ps, "btff.deconv" + std::to_string(i + 1), ParamGroup::Change);
  }

 private:
  BtffConfig cfg_;
  std::array<FusePair, 4> pairs_;
  std::array<Conv2d, 4> concat_proj_;
  std::array<ConvTranspose2d, 3> deconv_;
};

}  // namespace gscd
