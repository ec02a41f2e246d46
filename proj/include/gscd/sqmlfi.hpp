#pragma once

// Self-query multi-level feature interaction for the segmentation branch.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "gscd/backbone.hpp"
#include "gscd/nn.hpp"
#include "gscd/ops.hpp"
#include "gscd/tensor.hpp"

namespace gscd {

/// Q = Sigmoid(Conv3x3(X)).
inline Tensor self_query(const Tensor& x, const Conv2d& query_conv) { return sigmoid(query_conv(x)); }

/// Interpolate(BN(ReLU(Conv3x3(X * Q + X)))) resized to (ref_h, ref_w).
inline Tensor enhance_and_resize(const Tensor& x, const Tensor& q, const Conv2d& refine, BatchNorm2d& bn,
                                 std::size_t ref_h, std::size_t ref_w, bool training) {
  auto enhanced = add(mul(x, q), x);
  auto refined = bn(relu(refine(enhanced)), training);
  if (refined.dim(2) == ref_h && refined.dim(3) == ref_w) return refined;
  return interpolate_bilinear(refined, ref_h, ref_w);
}

/// Stacks the four resized levels on a new axis and fuses them with the
/// level-axis linear map (see level_fc).
inline Tensor merge_levels(const std::array<Tensor, 4>& levels, const Tensor& weight, const Tensor& bias) {
  for (const auto& l : levels) {
    if (l.shape() != levels[0].shape()) {
      throw ShapeError("merge_levels: level shapes differ " + shape_str(levels[0].shape()) + " vs " +
                       shape_str(l.shape()));
    }
  }
  return level_fc(stack({levels[0], levels[1], levels[2], levels[3]}, 1), weight, bias);
}

struct SqmlfiConfig {
  std::size_t fusion_width = 32;
  bool per_channel_fc = false;
};

class Sqmlfi {
 public:
  Sqmlfi(const std::array<std::size_t, 4>& channels, const SqmlfiConfig& cfg, Rng& rng) : cfg_(cfg) {
    for (std::size_t l = 0; l < 4; ++l) {
      levels_[l].query = Conv2d::make(channels[l], channels[l], 3, 1, 1, rng);
      levels_[l].refine = Conv2d::make(channels[l], cfg.fusion_width, 3, 1, 1, rng);
      levels_[l].bn = BatchNorm2d::make(cfg.fusion_width);
    }
    if (cfg.per_channel_fc) {
      fc_weight_ = Tensor::full({cfg.fusion_width, 4}, 0.25, true);
      fc_bias_ = Tensor::zeros({cfg.fusion_width}, true);
    } else {
      fc_weight_ = Tensor::full({4}, 0.25, true);
      fc_bias_ = Tensor::zeros({1}, true);
    }
  }

  std::size_t out_channels() const { return cfg_.fusion_width; }
  Tensor& fc_weight() { return fc_weight_; }
  Tensor& fc_bias() { return fc_bias_; }
  Conv2d& query_conv(std::size_t l) { return levels_.at(l).query; }
  Conv2d& refine_conv(std::size_t l) { return levels_.at(l).refine; }

  Tensor forward(const FeaturePyramid& pyr, bool training) {
    const std::size_t h = pyr.levels[0].dim(2), w = pyr.levels[0].dim(3);
    std::array<Tensor, 4> resized;
    for (std::size_t l = 0; l < 4; ++l) {
      auto& lv = levels_[l];
      const auto q = self_query(pyr.levels[l], lv.query);
      resized[l] = enhance_and_resize(pyr.levels[l], q, lv.refine, lv.bn, h, w, training);
    }
    return merge_levels(resized, fc_weight_, fc_bias_);
  }

  void register_into(ParamSet& ps) const {
    for (std::size_t l = 0; l < 4; ++l) {
      const std::string p = "sqmlfi.level" + std::to_string(l + 1);
      levels_[l].query.register_into(ps, p + ".query", ParamGroup::Segmentation);
      levels_[l].refine.register_into(ps, p + ".refine", ParamGroup::Segmentation);
      levels_[l].bn.register_into(ps, p + ".bn", ParamGroup::Segmentation);
    }
    ps.add_param("sqmlfi.fc.weight", fc_weight_, ParamGroup::Segmentation);
    ps.add_param("sqmlfi.fc.bias", fc_bias_, ParamGroup::Segmentation);
  }

 private:
  struct Level {
    Conv2d query;
    Conv2d refine;
    BatchNorm2d bn;
  };
  SqmlfiConfig cfg_;
  std::array<Level, 4> levels_;
  Tensor fc_weight_;
  Tensor fc_bias_;
};

/// Ablation path: every level interpolated to the level-1 size and
/// concatenated on the channel axis.
inline Tensor concat_levels(const FeaturePyramid& pyr) {
  const std::size_t h = pyr.levels[0].dim(2), w = pyr.levels[0].dim(3);
  std::vector<Tensor> parts;
  for (const auto& l : pyr.levels) parts.push_back(l.dim(2) == h && l.dim(3) == w ? l : interpolate_bilinear(l, h, w));
  return concat(parts, 1);
}

}  // namespace gscd
