#pragma once

// Siamese convolutional encoder producing a 4-level feature pyramid at
// strides {4, 8, 16, 32} with channels {b, 2b, 4b, 8b}.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

#include "gscd/nn.hpp"
#include "gscd/rng.hpp"
#include "gscd/tensor.hpp"

namespace gscd {

inline constexpr std::array<std::size_t, 4> kPyramidStrides{4, 8, 16, 32};

struct EncoderConfig {
  std::size_t base_channels = 8;
  std::size_t height = 64;
  std::size_t width = 64;
  std::uint64_t seed = 0;

  std::array<std::size_t, 4> channels() const {
    return {base_channels, 2 * base_channels, 4 * base_channels, 8 * base_channels};
  }
};

struct FeaturePyramid {
  std::array<Tensor, 4> levels;
  std::array<std::size_t, 4> channels{};
};

inline void check_input_size(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
    throw ShapeError("input spatial size " + std::to_string(height) + "x" + std::to_string(width) +
                     " must be divisible by 32");
  }
}

/// Each stage is conv3x3 -> BatchNorm -> ReLU -> strided conv3x3. The first
/// stage's leading conv is strided as well, giving the x4 reduction.
class Backbone {
 public:
  explicit Backbone(const EncoderConfig& cfg) : cfg_(cfg) {
    if (cfg.base_channels == 0) throw ConfigError("base_channels must be positive");
    Rng rng(cfg.seed);
    const auto ch = cfg.channels();
    std::size_t cin = 3;
    for (std::size_t l = 0; l < 4; ++l) {
      stages_[l].conv = Conv2d::make(cin, ch[l], 3, l == 0 ? 2 : 1, 1, rng);
      stages_[l].bn = BatchNorm2d::make(ch[l]);
      stages_[l].down = Conv2d::make(ch[l], ch[l], 3, 2, 1, rng);
      cin = ch[l];
    }
  }

  const EncoderConfig& config() const { return cfg_; }

  FeaturePyramid encode(const Tensor& image, bool training) {
    if (image.rank() != 4 || image.dim(1) != 3) {
      throw ShapeError("backbone expects B x 3 x H x W, got " + shape_str(image.shape()));
    }
    check_input_size(image.dim(2), image.dim(3));
    FeaturePyramid out;
    out.channels = cfg_.channels();
    Tensor x = image;
    for (std::size_t l = 0; l < 4; ++l) {
      auto& s = stages_[l];
      x = s.down(relu(s.bn(s.conv(x), training)));
      out.levels[l] = x;
    }
    return out;
  }

  void register_into(ParamSet& ps) const {
    for (std::size_t l = 0; l < 4; ++l) {
      const std::string p = "backbone.stage" + std::to_string(l + 1);
      stages_[l].conv.register_into(ps, p + ".conv", ParamGroup::Backbone);
      stages_[l].bn.register_into(ps, p + ".bn", ParamGroup::Backbone);
      stages_[l].down.register_into(ps, p + ".down", ParamGroup::Backbone);
    }
  }

 private:
  struct Stage {
    Conv2d conv;
    BatchNorm2d bn;
    Conv2d down;
  };
  EncoderConfig cfg_;
  std::array<Stage, 4> stages_;
};

}  // namespace gscd
