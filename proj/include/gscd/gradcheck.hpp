#pragma once

// Central finite-difference gradient checking. The numeric side only calls
// forward ops, so it is independent of every backward rule it audits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gscd/ops.hpp"
#include "gscd/rng.hpp"
#include "gscd/tensor.hpp"

namespace gscd {

struct GradcheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  // Coordinates checked per leaf; 0 means all of them.
  std::size_t max_coords_per_leaf = 0;
  std::uint64_t coord_seed = 0;
  // Scales every analytic gradient by this factor (fault injection).
  double analytic_scale = 1.0;
  // Lower bound on the relative-error denominator; gradients whose norm is
  // below it are compared in absolute terms.
  double norm_floor = 1e-8;
};

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  bool passed = false;
};

/// ||a - n|| / max(||a||, ||n||, floor).
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                             double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  diff = std::sqrt(diff);
  const double scale = std::max({std::sqrt(na), std::sqrt(nn), floor});
  return diff / scale;
}

/// Compares backward() of `loss_fn` against central differences for every
/// leaf. `loss_fn` must rebuild the graph from the leaves on each call.
inline GradcheckResult check_gradients(const std::string& name, std::vector<Tensor> leaves,
                                       const std::function<Tensor()>& loss_fn,
                                       const GradcheckOptions& opt = {}) {
  GradcheckResult result{name, 0.0, 0, true};
  for (auto& leaf : leaves) leaf.zero_grad();
  loss_fn().backward();

  Rng pick(opt.coord_seed);
  for (auto& leaf : leaves) {
    const std::size_t n = leaf.numel();
    std::vector<std::size_t> coords(n);
    for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    if (opt.max_coords_per_leaf && n > opt.max_coords_per_leaf) {
      for (std::size_t i = 0; i < opt.max_coords_per_leaf; ++i) {
        std::swap(coords[i], coords[i + pick.below(n - i)]);
      }
      coords.resize(opt.max_coords_per_leaf);
    }
    std::vector<double> analytic, numeric;
    auto grad = leaf.grad();
    for (auto c : coords) {
      analytic.push_back(grad[c] * opt.analytic_scale);
      auto data = leaf.mutable_data();
      const double saved = data[c];
      double plus, minus;
      {
        NoGradGuard guard;
        data[c] = saved + opt.step;
        plus = loss_fn().item();
        data[c] = saved - opt.step;
        minus = loss_fn().item();
      }
      data[c] = saved;
      numeric.push_back((plus - minus) / (2.0 * opt.step));
    }
    result.coords_checked += coords.size();
    result.max_rel_error = std::max(result.max_rel_error, relative_error(analytic, numeric, opt.norm_floor));
  }
  for (auto& leaf : leaves) leaf.zero_grad();
  result.passed = result.max_rel_error < opt.tolerance;
  return result;
}

namespace detail {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, for ops with a kink there.
inline Tensor random_off_kink(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return Tensor::from(std::move(shape), std::move(v), true);
}

inline std::size_t small_dim(Rng& rng, std::size_t lo = 2, std::size_t hi = 6) {
  return lo + rng.below(hi - lo + 1);
}

}  // namespace detail

/// Reduces an arbitrary-shape output to a scalar with fixed random weights.
inline Tensor project(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return sum(mul(out, detail::random_tensor(rng, out.shape(), -1.0, 1.0, false)));
}

/// Gradchecks every op family on random small inputs (dims <= 6).
inline std::vector<GradcheckResult> op_family_gradchecks(std::uint64_t seed, const GradcheckOptions& opt = {}) {
  using detail::random_off_kink;
  using detail::random_tensor;
  using detail::small_dim;
  Rng rng(seed);
  std::vector<GradcheckResult> out;
  const auto ps = seed + 17;
  auto run = [&](const std::string& name, std::vector<Tensor> leaves, std::function<Tensor()> f) {
    out.push_back(check_gradients(name, std::move(leaves), f, opt));
  };

  {
    auto a = random_tensor(rng, {small_dim(rng), small_dim(rng)});
    auto b = random_tensor(rng, {a.dim(1), small_dim(rng)});
    run("matmul", {a, b}, [=] { return project(matmul(a, b), ps); });
    run("transpose", {a}, [=] { return project(transpose(a), ps); });
  }
  {
    Shape s{small_dim(rng), small_dim(rng)};
    auto a = random_tensor(rng, s);
    auto b = random_tensor(rng, s, 0.5, 1.5);
    auto c = random_tensor(rng, {1});
    run("add", {a, b}, [=] { return project(add(a, b), ps); });
    run("sub", {a, b}, [=] { return project(sub(a, b), ps); });
    run("mul", {a, b}, [=] { return project(mul(a, b), ps); });
    run("div", {a, b}, [=] { return project(div(a, b), ps); });
    run("mul_scalar", {a, c}, [=] { return project(mul(c, a), ps); });
    run("affine", {a}, [=] { return project(affine(a, -1.5, 0.25), ps); });
    run("exp", {a}, [=] { return project(exp(a), ps); });
    run("log", {b}, [=] { return project(log(b), ps); });
    run("sigmoid", {a}, [=] { return project(sigmoid(a), ps); });
    auto k = random_off_kink(rng, s);
    run("relu", {k}, [=] { return project(relu(k), ps); });
    run("abs", {k}, [=] { return project(abs(k), ps); });
    run("sum", {a}, [=] { return mul(sum(a), sum(a)); });
    run("mean", {a}, [=] { return mul(mean(a), mean(a)); });
  }
  {
    Shape s{small_dim(rng), small_dim(rng), small_dim(rng)};
    auto x = random_tensor(rng, s);
    auto y = random_tensor(rng, s);
    const std::size_t axis = rng.below(3);
    run("softmax", {x}, [=] { return project(softmax(x, axis), ps); });
    run("log_softmax", {x}, [=] { return project(log_softmax(x, axis), ps); });
    run("sum_axis", {x}, [=] { return project(sum_axis(x, axis), ps); });
    run("l2_norm", {x}, [=] { return project(l2_norm(x, axis), ps); });
    run("normalize", {x}, [=] { return project(normalize(x, axis), ps); });
    run("cosine_similarity", {x, y}, [=] { return project(cosine_similarity(x, y, axis), ps); });
    run("permute", {x}, [=] { return project(permute(x, {2, 0, 1}), ps); });
    run("reshape", {x}, [=] { return project(reshape(x, {s[0] * s[1], s[2]}), ps); });
    run("stack", {x, y}, [=] { return project(stack({x, y}, axis), ps); });
    auto z = random_tensor(rng, {s[0], s[1], small_dim(rng)});
    run("concat", {x, z}, [=] { return project(concat({x, z}, 2), ps); });
  }
  {
    const std::size_t n = small_dim(rng), c = small_dim(rng);
    auto logits = random_tensor(rng, {n, c, 2, 2}, -2.0, 2.0);
    std::vector<int> labels(n * 4);
    for (auto& l : labels) l = static_cast<int>(rng.below(c));
    run("nll_mean(log_softmax)", {logits}, [=] { return nll_mean(log_softmax(logits, 1), labels); });
  }
  {
    const std::size_t B = 2, cin = small_dim(rng, 1, 3), cout = small_dim(rng, 1, 3);
    const std::size_t H = small_dim(rng, 3, 6), W = small_dim(rng, 3, 6);
    auto x = random_tensor(rng, {B, cin, H, W});
    auto w3 = random_tensor(rng, {cout, cin, 3, 3});
    auto w1 = random_tensor(rng, {cout, cin, 1, 1});
    auto bias = random_tensor(rng, {cout});
    run("conv2d_3x3", {x, w3, bias}, [=] { return project(conv2d(x, w3, bias, 1, 1), ps); });
    run("conv2d_1x1", {x, w1, bias}, [=] { return project(conv2d(x, w1, bias), ps); });
    run("conv2d_3x3_stride2", {x, w3, bias}, [=] { return project(conv2d(x, w3, bias, 2, 1), ps); });
    auto wt = random_tensor(rng, {cin, cout, 4, 4});
    run("conv_transpose2d", {x, wt, bias}, [=] { return project(conv_transpose2d(x, wt, bias, 2, 1), ps); });
    run("interpolate_bilinear", {x}, [=] { return project(interpolate_bilinear(x, H + 3, W - 1), ps); });
    auto gamma = random_tensor(rng, {cin}, 0.5, 1.5);
    auto beta = random_tensor(rng, {cin});
    run("batch_norm_train", {x, gamma, beta}, [=] {
      auto rm = Tensor::zeros({cin});
      auto rv = Tensor::full({cin}, 1.0);
      return project(batch_norm(x, gamma, beta, rm, rv, true), ps);
    });
    run("batch_norm_eval", {x, gamma, beta}, [=] {
      auto rm = Tensor::full({cin}, 0.1);
      auto rv = Tensor::full({cin}, 0.7);
      return project(batch_norm(x, gamma, beta, rm, rv, false), ps);
    });
  }
  {
    const std::size_t B = 2, L = 4, C = small_dim(rng, 1, 3);
    auto st = random_tensor(rng, {B, L, C, 3, 3});
    auto w = random_tensor(rng, {L});
    auto b = random_tensor(rng, {1});
    auto wc = random_tensor(rng, {C, L});
    auto bc = random_tensor(rng, {C});
    run("level_fc", {st, w, b}, [=] { return project(level_fc(st, w, b), ps); });
    run("level_fc_per_channel", {st, wc, bc}, [=] { return project(level_fc(st, wc, bc), ps); });
  }
  {
    auto F = random_tensor(rng, {small_dim(rng, 3, 6), small_dim(rng)});
    run("gaussian_adjacency", {F}, [=] { return project(gaussian_adjacency(F, 0.8, false), ps); });
    run("gaussian_adjacency_squared", {F}, [=] { return project(gaussian_adjacency(F, 0.8, true), ps); });
    auto A = random_tensor(rng, {F.dim(0), F.dim(0)}, 0.0, 1.0);
    run("gcn_normalize", {A}, [=] { return project(gcn_normalize(A), ps); });
  }
  return out;
}

}  // namespace gscd
