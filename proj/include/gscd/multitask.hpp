#pragma once

// Joint optimization: uncertainty-weighted loss merging, gradient rotation
// between the merged classification loss and the prototype loss, and the
// parameter update.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gscd/nn.hpp"
#include "gscd/ops.hpp"
#include "gscd/tensor.hpp"

namespace gscd {

/// s_i = log sigma_i^2, so sigma_i^2 = exp(s_i) > 0 for any finite s_i.
struct UncertaintyWeights {
  Tensor s1 = Tensor::scalar(0.0, true);
  Tensor s2 = Tensor::scalar(0.0, true);

  double sigma_sq1() const { return std::exp(s1.item()); }
  double sigma_sq2() const { return std::exp(s2.item()); }

  void register_into(ParamSet& ps) const {
    ps.add_param("uncertainty.log_var_seg", s1, ParamGroup::Uncertainty);
    ps.add_param("uncertainty.log_var_change", s2, ParamGroup::Uncertainty);
  }
};

/// L_ss / (2 sigma1^2) + L_cd / (2 sigma2^2) + ln(1 + sigma1^2) + ln(1 + sigma2^2)
/// with sigma_i^2 = exp(s_i).
inline Tensor merge_losses(const Tensor& l_ss, const Tensor& l_cd, const UncertaintyWeights& w) {
  auto weight = [](const Tensor& s) { return affine(exp(affine(s, -1.0)), 0.5); };
  auto reg = [](const Tensor& s) { return log(affine(exp(s), 1.0, 1.0)); };
  return add(add(mul(l_ss, weight(w.s1)), mul(l_cd, weight(w.s2))), add(reg(w.s1), reg(w.s2)));
}

struct RotatedGradients {
  std::vector<double> a;
  std::vector<double> b;
  bool conflict = false;
};

/// When cos(g_a, g_b) < 0, projects each gradient onto the normal plane of
/// the other; both projections use the original inputs. A zero vector never
/// conflicts.
inline RotatedGradients rotate_gradients(std::span<const double> ga, std::span<const double> gb) {
  if (ga.size() != gb.size()) {
    throw ShapeError("rotate_gradients: lengths " + std::to_string(ga.size()) + " and " + std::to_string(gb.size()));
  }
  RotatedGradients out{{ga.begin(), ga.end()}, {gb.begin(), gb.end()}, false};
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    dot += ga[i] * gb[i];
    na += ga[i] * ga[i];
    nb += gb[i] * gb[i];
  }
  if (na == 0.0 || nb == 0.0 || !(dot < 0.0)) return out;
  out.conflict = true;
  const double ca = dot / nb, cb = dot / na;
  for (std::size_t i = 0; i < ga.size(); ++i) {
    out.a[i] = ga[i] - ca * gb[i];
    out.b[i] = gb[i] - cb * ga[i];
  }
  return out;
}

using GradientList = std::vector<std::vector<double>>;

inline GradientList snapshot_grads(const std::vector<NamedTensor>& params) {
  GradientList out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
  return out;
}

struct CombineStats {
  bool conflict = false;
  double cosine = 0.0;  // between the shared parts of g_a and g_b
};

/// Per-parameter update direction. Shared parameters get g'_a + g'_b
/// (rotated when `rotate`); every other parameter gets g_a + g_b, which is
/// its own task's gradient since the other term is zero.
inline GradientList combine_task_gradients(const std::vector<NamedTensor>& params, const GradientList& ga,
                                           const GradientList& gb, const std::vector<ParamGroup>& shared_groups,
                                           bool rotate, CombineStats* stats = nullptr) {
  if (ga.size() != params.size() || gb.size() != params.size()) {
    throw ShapeError("combine_task_gradients: gradient lists do not match the parameter list");
  }
  auto is_shared = [&](ParamGroup g) {
    for (auto s : shared_groups)
      if (s == g) return true;
    return false;
  };
  std::vector<double> fa, fb;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!is_shared(params[i].group)) continue;
    fa.insert(fa.end(), ga[i].begin(), ga[i].end());
    fb.insert(fb.end(), gb[i].begin(), gb[i].end());
  }
  RotatedGradients rot{fa, fb, false};
  if (rotate) rot = rotate_gradients(fa, fb);
  if (stats) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < fa.size(); ++i) {
      dot += fa[i] * fb[i];
      na += fa[i] * fa[i];
      nb += fb[i] * fb[i];
    }
    stats->conflict = rot.conflict;
    stats->cosine = (na > 0.0 && nb > 0.0) ? dot / std::sqrt(na * nb) : 0.0;
  }
  GradientList out(params.size());
  std::size_t off = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    out[i].resize(ga[i].size());
    if (is_shared(params[i].group)) {
      for (std::size_t k = 0; k < ga[i].size(); ++k) out[i][k] = rot.a[off + k] + rot.b[off + k];
      off += ga[i].size();
    } else {
      for (std::size_t k = 0; k < ga[i].size(); ++k) out[i][k] = ga[i][k] + gb[i][k];
    }
  }
  return out;
}

inline void check_finite_grads(const std::vector<NamedTensor>& params, const GradientList& grads) {
  for (std::size_t i = 0; i < params.size(); ++i)
    for (double g : grads[i])
      if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + params[i].name);
}

/// theta <- theta - lr * g.
inline void sgd_step(const std::vector<NamedTensor>& params, const GradientList& grads, double lr) {
  check_finite_grads(params, grads);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].tensor;
    auto d = t.mutable_data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] -= lr * grads[i][k];
  }
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;
};

/// Adam with L2 weight decay folded into the gradient. Moments accumulate
/// whatever direction it is handed, i.e. gradients after rotation.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::size_t steps() const { return steps_; }
  const GradientList& first_moments() const { return m_; }
  const GradientList& second_moments() const { return v_; }
  GradientList& first_moments() { return m_; }
  GradientList& second_moments() { return v_; }
  void set_steps(std::size_t s) { steps_ = s; }

  void step(const std::vector<NamedTensor>& params, const GradientList& grads, double lr) {
    check_finite_grads(params, grads);
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.tensor.numel(), 0.0);
        v_.emplace_back(p.tensor.numel(), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ShapeError("adam: parameter list changed between steps");
    ++steps_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto t = params[i].tensor;
      auto d = t.mutable_data();
      for (std::size_t k = 0; k < d.size(); ++k) {
        const double g = grads[i][k] + cfg_.weight_decay * d[k];
        m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g;
        v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g * g;
        d[k] -= lr * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + cfg_.eps);
      }
    }
  }

 private:
  AdamConfig cfg_;
  std::size_t steps_ = 0;
  GradientList m_;
  GradientList v_;
};

/// Cosine annealing from `base` at epoch 0 towards 0 at `total` epochs.
inline double cosine_lr(double base, std::size_t epoch, std::size_t total) {
  if (total == 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total)));
}

}  // namespace gscd
