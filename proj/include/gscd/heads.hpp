#pragma once

// Segmentation and change heads with their cross-entropy losses.

#include <cstddef>
#include <string>
#include <vector>

#include "gscd/nn.hpp"
#include "gscd/ops.hpp"
#include "gscd/tensor.hpp"

namespace gscd {

/// Two 1x1 convs with a ReLU between, producing N_c logits at stride 4.
class SegHead {
 public:
  SegHead(std::size_t in_channels, std::size_t hidden, std::size_t n_classes, Rng& rng)
      : c1_(Conv2d::make(in_channels, hidden, 1, 1, 0, rng)), c2_(Conv2d::make(hidden, n_classes, 1, 1, 0, rng)) {}

  Tensor logits(const Tensor& x) const { return c2_(relu(c1_(x))); }
  Conv2d& conv1() { return c1_; }
  Conv2d& conv2() { return c2_; }

  void register_into(ParamSet& ps) const {
    c1_.register_into(ps, "seg_head.conv1", ParamGroup::Segmentation);
    c2_.register_into(ps, "seg_head.conv2", ParamGroup::Segmentation);
  }

 private:
  Conv2d c1_;
  Conv2d c2_;
};

/// 3x3 conv, ReLU, 1x1 conv to the two change/no-change logits.
class ChangeHead {
 public:
  ChangeHead(std::size_t in_channels, std::size_t hidden, Rng& rng)
      : c1_(Conv2d::make(in_channels, hidden, 3, 1, 1, rng)), c2_(Conv2d::make(hidden, 2, 1, 1, 0, rng)) {}

  Tensor logits(const Tensor& x) const { return c2_(relu(c1_(x))); }
  Conv2d& conv1() { return c1_; }
  Conv2d& conv2() { return c2_; }

  void register_into(ParamSet& ps) const {
    c1_.register_into(ps, "change_head.conv1", ParamGroup::Change);
    c2_.register_into(ps, "change_head.conv2", ParamGroup::Change);
  }

 private:
  Conv2d c1_;
  Conv2d c2_;
};

inline Tensor upsample_logits(const Tensor& logits, std::size_t height, std::size_t width) {
  if (logits.dim(2) == height && logits.dim(3) == width) return logits;
  return interpolate_bilinear(logits, height, width);
}

/// Per-pixel class probabilities at full resolution.
inline Tensor probabilities(const Tensor& logits, std::size_t height, std::size_t width) {
  return softmax(upsample_logits(logits, height, width), 1);
}

/// Arg-max class per pixel of B x C x H x W scores.
inline std::vector<int> argmax_classes(const Tensor& scores) {
  const std::size_t B = scores.dim(0), C = scores.dim(1), HW = scores.dim(2) * scores.dim(3);
  auto d = scores.data();
  std::vector<int> out(B * HW);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < HW; ++p) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < C; ++c)
        if (d[(b * C + c) * HW + p] > d[(b * C + best) * HW + p]) best = c;
      out[b * HW + p] = static_cast<int>(best);
    }
  return out;
}

/// Mean per-pixel cross-entropy, computed from log-softmax of the logits.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  return nll_mean(log_softmax(logits, 1), labels);
}

/// (CE(T1) + CE(T2)) / 2 on full-resolution logits.
inline Tensor seg_loss(const Tensor& logits_t1, const Tensor& logits_t2, const std::vector<int>& y1,
                       const std::vector<int>& y2) {
  return affine(add(cross_entropy(logits_t1, y1), cross_entropy(logits_t2, y2)), 0.5);
}

inline Tensor change_loss(const Tensor& logits_cd, const std::vector<int>& y_cd) {
  if (logits_cd.dim(1) != 2) throw ShapeError("change_loss: expected 2 logits, got " + shape_str(logits_cd.shape()));
  return cross_entropy(logits_cd, y_cd);
}

}  // namespace gscd
