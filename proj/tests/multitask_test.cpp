#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "gscd/gradcheck.hpp"
#include "gscd/multitask.hpp"
#include "oracles.hpp"

using namespace gscd;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

}  // namespace

TEST(MergeLosses, UnitVarianceExamples) {
  UncertaintyWeights w;
  const auto l = merge_losses(Tensor::scalar(0.8), Tensor::scalar(0.3), w);
  EXPECT_NEAR(l.item(), 0.4 + 0.15 + 2 * std::numbers::ln2, 1e-15);
  EXPECT_NEAR(merge_losses(Tensor::scalar(0.0), Tensor::scalar(0.0), w).item(), 2 * std::numbers::ln2, 1e-15);
}

TEST(MergeLosses, LogVarianceGradientMatchesFiniteDifference) {
  UncertaintyWeights w;
  w.s1.mutable_data()[0] = 0.4;
  w.s2.mutable_data()[0] = -0.7;
  const auto lss = Tensor::scalar(1.3), lcd = Tensor::scalar(0.6);
  GradcheckOptions opt;
  opt.tolerance = 1e-6;
  const auto r = check_gradients("merge", {w.s1, w.s2}, [&] { return merge_losses(lss, lcd, w); }, opt);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}

TEST(MergeLosses, LogVarianceHasFiniteMinimizer) {
  // d/ds of L/(2 e^s) + ln(1 + e^s) changes sign for a fixed positive loss.
  UncertaintyWeights w;
  auto grad_at = [&](double s) {
    w.s1.mutable_data()[0] = s;
    w.s1.zero_grad();
    merge_losses(Tensor::scalar(2.0), Tensor::scalar(1.0), w).backward();
    return w.s1.grad()[0];
  };
  EXPECT_LT(grad_at(-3.0), 0.0);
  EXPECT_GT(grad_at(5.0), 0.0);
  EXPECT_GT(w.sigma_sq1(), 0.0);
}

TEST(RotateGradients, NonConflictingUnchanged) {
  const std::vector<double> a{1.0, 2.0}, b{0.5, 0.1};
  const auto r = rotate_gradients(a, b);
  EXPECT_FALSE(r.conflict);
  EXPECT_EQ(r.a, a);
  EXPECT_EQ(r.b, b);
}

TEST(RotateGradients, OppositeCancelsExactly) {
  const std::vector<double> a{0.3, -1.7, 2.2}, b{-0.3, 1.7, -2.2};
  const auto r = rotate_gradients(a, b);
  for (double v : r.a) EXPECT_EQ(v, 0.0);
  for (double v : r.b) EXPECT_EQ(v, 0.0);
}

TEST(RotateGradients, HandProjection) {
  const std::vector<double> a{1.0, 0.0}, b{-1.0, 1.0};
  const auto r = rotate_gradients(a, b);
  EXPECT_TRUE(r.conflict);
  EXPECT_NEAR(r.a[0], 0.5, 1e-15);
  EXPECT_NEAR(r.a[1], 0.5, 1e-15);
  EXPECT_NEAR(r.b[0], 0.0, 1e-15);
  EXPECT_NEAR(r.b[1], 1.0, 1e-15);
  EXPECT_NEAR(dot(r.a, b), 0.0, 1e-15);
  EXPECT_NEAR(dot(r.b, a), 0.0, 1e-15);
}

TEST(RotateGradients, ZeroVectorAndLengthMismatch) {
  const std::vector<double> a{1.0, 2.0}, z{0.0, 0.0};
  EXPECT_FALSE(rotate_gradients(a, z).conflict);
  EXPECT_EQ(rotate_gradients(a, z).a, a);
  EXPECT_THROW(rotate_gradients(a, std::vector<double>{1.0}), ShapeError);
}

TEST(RotateGradients, RandomPairProperties) {
  Rng rng(21);
  for (int i = 0; i < 2000; ++i) {
    const std::size_t n = 1 + rng.below(20);
    const auto a = random_vec(rng, n), b = random_vec(rng, n);
    const auto r = rotate_gradients(a, b);
    const auto o = oracle::rotate(a, b);
    for (std::size_t k = 0; k < n; ++k) {
      EXPECT_NEAR(r.a[k], o.first[k], 1e-14);
      EXPECT_NEAR(r.b[k], o.second[k], 1e-14);
    }
    EXPECT_GE(dot(r.a, b), -1e-12);
    EXPECT_GE(dot(r.b, a), -1e-12);
    EXPECT_LE(dot(r.a, r.a), dot(a, a) * (1 + 1e-12));
    // scale equivariance
    std::vector<double> ca(a);
    for (auto& v : ca) v *= 3.5;
    const auto rc = rotate_gradients(ca, b);
    for (std::size_t k = 0; k < n; ++k) EXPECT_NEAR(rc.a[k], 3.5 * r.a[k], 1e-12);
  }
}

TEST(CombineTaskGradients, SharedRotatedExclusiveSummed) {
  ParamSet ps;
  ps.add_param("shared", Tensor::zeros({2}, true), ParamGroup::Backbone);
  ps.add_param("own", Tensor::zeros({1}, true), ParamGroup::Segmentation);
  const GradientList ga{{1.0, 0.0}, {2.0}}, gb{{-1.0, 1.0}, {0.0}};
  CombineStats st;
  const auto g = combine_task_gradients(ps.params(), ga, gb, {ParamGroup::Backbone}, true, &st);
  EXPECT_TRUE(st.conflict);
  EXPECT_NEAR(g[0][0], 0.5, 1e-15);
  EXPECT_NEAR(g[0][1], 1.5, 1e-15);
  EXPECT_EQ(g[1][0], 2.0);
  const auto plain = combine_task_gradients(ps.params(), ga, gb, {ParamGroup::Backbone}, false);
  EXPECT_EQ(plain[0][0], 0.0);
  EXPECT_EQ(plain[0][1], 1.0);
}

TEST(CombineTaskGradients, ZeroSecondTaskIsBitwiseFirst) {
  ParamSet ps;
  ps.add_param("w", Tensor::zeros({3}, true), ParamGroup::Backbone);
  const GradientList ga{{0.1, -0.2, 0.3}}, gb{{0.0, 0.0, 0.0}};
  EXPECT_EQ(combine_task_gradients(ps.params(), ga, gb, {ParamGroup::Backbone}, true), ga);
}

TEST(Step, LearningRateZeroLeavesParamsUnchanged) {
  ParamSet ps;
  ps.add_param("w", Tensor::from({2}, {1.0, -2.0}, true), ParamGroup::Backbone);
  Adam adam;
  adam.step(ps.params(), {{0.5, 0.5}}, 0.0);
  sgd_step(ps.params(), {{0.5, 0.5}}, 0.0);
  EXPECT_EQ(ps.params()[0].tensor.to_vector(), (std::vector<double>{1.0, -2.0}));
}

TEST(Step, NonFiniteGradientAborts) {
  ParamSet ps;
  ps.add_param("w", Tensor::from({1}, {1.0}, true), ParamGroup::Backbone);
  Adam adam;
  EXPECT_THROW(adam.step(ps.params(), {{std::nan("")}}, 0.1), NumericError);
  EXPECT_EQ(ps.params()[0].tensor[0], 1.0);
}

// Two tasks on two shared parameters:
//   L_a = (x - 1)^2 + (y - 2)^2,  L_b = (x + 1)^2 + 3 (y - 1)^2.
// The trajectory of rotate-then-SGD is recomputed by hand each step.
TEST(Step, QuadraticToyTrajectoryMatchesHandRolledRule) {
  ParamSet ps;
  auto x = Tensor::from({1}, {0.3}, true), y = Tensor::from({1}, {-0.4}, true);
  ps.add_param("x", x, ParamGroup::Backbone);
  ps.add_param("y", y, ParamGroup::Backbone);
  double ox = 0.3, oy = -0.4;
  const double lr = 0.05;
  int conflicts = 0;
  for (int step = 0; step < 100; ++step) {
    ps.zero_grad();
    add(mul(affine(x, 1.0, -1.0), affine(x, 1.0, -1.0)), mul(affine(y, 1.0, -2.0), affine(y, 1.0, -2.0))).backward();
    const auto ga = snapshot_grads(ps.params());
    ps.zero_grad();
    add(mul(affine(x, 1.0, 1.0), affine(x, 1.0, 1.0)), affine(mul(affine(y, 1.0, -1.0), affine(y, 1.0, -1.0)), 3.0))
        .backward();
    const auto gb = snapshot_grads(ps.params());
    CombineStats st;
    sgd_step(ps.params(), combine_task_gradients(ps.params(), ga, gb, {ParamGroup::Backbone}, true, &st), lr);
    conflicts += st.conflict;

    const std::vector<double> a{2 * (ox - 1), 2 * (oy - 2)}, b{2 * (ox + 1), 6 * (oy - 1)};
    const auto [ra, rb] = oracle::rotate(a, b);
    ox -= lr * (ra[0] + rb[0]);
    oy -= lr * (ra[1] + rb[1]);
    ASSERT_NEAR(x[0], ox, 1e-12) << step;
    ASSERT_NEAR(y[0], oy, 1e-12) << step;
  }
  EXPECT_GT(conflicts, 0);
}

TEST(Adam, MatchesHandRolledMoments) {
  ParamSet ps;
  ps.add_param("w", Tensor::from({2}, {0.5, -0.5}, true), ParamGroup::Backbone);
  Adam adam(AdamConfig{0.9, 0.999, 1e-8, 1e-6});
  std::vector<double> w{0.5, -0.5}, m(2, 0.0), v(2, 0.0);
  for (int t = 1; t <= 20; ++t) {
    const std::vector<double> g{0.1 * t, -0.3 + 0.02 * t};
    adam.step(ps.params(), {g}, 0.01);
    for (int i = 0; i < 2; ++i) {
      const double gi = g[i] + 1e-6 * w[i];
      m[i] = 0.9 * m[i] + 0.1 * gi;
      v[i] = 0.999 * v[i] + 0.001 * gi * gi;
      w[i] -= 0.01 * (m[i] / (1 - std::pow(0.9, t))) / (std::sqrt(v[i] / (1 - std::pow(0.999, t))) + 1e-8);
      EXPECT_NEAR(ps.params()[0].tensor[i], w[i], 1e-14);
    }
  }
}

TEST(CosineLr, Endpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(1e-3, 0, 10), 1e-3);
  EXPECT_NEAR(cosine_lr(1e-3, 5, 10), 5e-4, 1e-18);
  EXPECT_NEAR(cosine_lr(1e-3, 10, 10), 0.0, 1e-18);
}
