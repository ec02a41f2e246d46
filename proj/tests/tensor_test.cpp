#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gscd/gradcheck.hpp"
#include "gscd/ops.hpp"
#include "gscd/tensor.hpp"

using namespace gscd;

namespace {

// Direct scatter form of a transposed convolution; shares no code with
// the im2col path.
std::vector<double> scatter_transpose_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad,
                                           std::size_t& out_h, std::size_t& out_w) {
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(1), k = w.dim(2);
  out_h = (H - 1) * stride + k - 2 * pad;
  out_w = (W - 1) * stride + k - 2 * pad;
  std::vector<double> out(B * Cout * out_h * out_w, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ci = 0; ci < Cin; ++ci)
      for (std::size_t iy = 0; iy < H; ++iy)
        for (std::size_t ix = 0; ix < W; ++ix)
          for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const long oy = static_cast<long>(iy * stride + ki) - static_cast<long>(pad);
                const long ox = static_cast<long>(ix * stride + kj) - static_cast<long>(pad);
                if (oy < 0 || ox < 0 || oy >= static_cast<long>(out_h) || ox >= static_cast<long>(out_w)) continue;
                out[((b * Cout + co) * out_h + oy) * out_w + ox] +=
                    x[((b * Cin + ci) * H + iy) * W + ix] * w[((ci * Cout + co) * k + ki) * k + kj];
              }
  return out;
}

std::vector<double> direct_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Cout = w.dim(0), k = w.dim(2);
  const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(B * Cout * Ho * Wo, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t co = 0; co < Cout; ++co)
      for (std::size_t oy = 0; oy < Ho; ++oy)
        for (std::size_t ox = 0; ox < Wo; ++ox) {
          double acc = 0.0;
          for (std::size_t ci = 0; ci < Cin; ++ci)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
                const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                acc += x[((b * Cin + ci) * H + iy) * W + ix] * w[((co * Cin + ci) * k + ki) * k + kj];
              }
          out[((b * Cout + co) * Ho + oy) * Wo + ox] = acc;
        }
  return out;
}

}  // namespace

TEST(TensorTest, ConstructionChecksShape) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor::zeros({2, 0}), ShapeError);
  auto t = Tensor::zeros({2, 3}, true);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.grad().size(), 6u);
}

TEST(TensorTest, IdentityKernelConvReproducesInput) {
  std::vector<double> v(16);
  for (std::size_t i = 0; i < 16; ++i) v[i] = static_cast<double>(i) * 0.5 - 3.0;
  auto x = Tensor::from({1, 1, 4, 4}, v);
  std::vector<double> k(9, 0.0);
  k[4] = 1.0;
  auto w = Tensor::from({1, 1, 3, 3}, k);
  auto y = conv2d(x, w, Tensor(), 1, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  EXPECT_EQ(y.to_vector(), v);
}

TEST(TensorTest, SigmoidOfZeroIsHalf) {
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
}

TEST(TensorTest, BilinearRoundTripKeepsConstants) {
  auto x = Tensor::full({1, 2, 2, 2}, 3.25);
  auto up = interpolate_bilinear(x, 4, 4);
  auto down = interpolate_bilinear(up, 2, 2);
  for (double v : up.data()) EXPECT_DOUBLE_EQ(v, 3.25);
  for (double v : down.data()) EXPECT_DOUBLE_EQ(v, 3.25);
}

TEST(TensorTest, BilinearSameSizeIsIdentity) {
  Rng rng(3);
  auto x = detail::random_tensor(rng, {2, 3, 5, 4}, -1.0, 1.0, false);
  EXPECT_EQ(interpolate_bilinear(x, 5, 4).to_vector(), x.to_vector());
}

TEST(TensorTest, TransposedConvDoublesSpatialDims) {
  Rng rng(11);
  auto x = detail::random_tensor(rng, {2, 3, 8, 8}, -1.0, 1.0, false);
  auto w = detail::random_tensor(rng, {3, 5, 4, 4}, -1.0, 1.0, false);
  auto y = conv_transpose2d(x, w, Tensor(), 2, 1);
  EXPECT_EQ(y.shape(), (Shape{2, 5, 16, 16}));
  std::size_t oh = 0, ow = 0;
  auto expected = scatter_transpose_conv(x, w, 2, 1, oh, ow);
  EXPECT_EQ(oh, 16u);
  EXPECT_EQ(ow, 16u);
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
}

TEST(TensorTest, Conv2dMatchesDirectLoops) {
  Rng rng(5);
  auto x = detail::random_tensor(rng, {2, 3, 7, 6}, -1.0, 1.0, false);
  auto w = detail::random_tensor(rng, {4, 3, 3, 3}, -1.0, 1.0, false);
  for (std::size_t stride : {1u, 2u}) {
    auto y = conv2d(x, w, Tensor(), stride, 1);
    auto expected = direct_conv(x, w, stride, 1);
    ASSERT_EQ(y.numel(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
  }
}

TEST(AutodiffTest, SquareSumGradient) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  sum(mul(x, x)).backward();
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(AutodiffTest, IndependentLeafGetsExactZero) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = Tensor::from({2}, {3, 4}, true);
  sum(exp(y)).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(AutodiffTest, DetachCopiesValuesAndBlocksGradient) {
  auto x = Tensor::from({3}, {0.5, -1.0, 2.0}, true);
  auto d = x.detach();
  EXPECT_EQ(d.to_vector(), x.to_vector());
  EXPECT_FALSE(d.requires_grad());
  auto w = Tensor::from({3}, {1, 1, 1}, true);
  sum(mul(exp(d), w)).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
  EXPECT_NE(w.grad()[0], 0.0);
}

TEST(AutodiffTest, ErrorsAreSurfaced) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(mul(x, x).backward(), AutodiffError);  // non-scalar
  auto loss = sum(mul(x, x));
  loss.backward();
  EXPECT_THROW(loss.backward(), AutodiffError);  // repeated
  EXPECT_THROW(sum(Tensor::from({2}, {1, 2})).backward(), AutodiffError);  // detached
  EXPECT_THROW(log(Tensor::from({1}, {-1.0})), NumericError);
  EXPECT_THROW(exp(Tensor::from({1}, {1e6})), NumericError);
  try {
    add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("add"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("(2,3)"), std::string::npos);
  }
  auto bn_x = Tensor::zeros({1, 2, 2, 2});
  auto g = Tensor::zeros({3}), b = Tensor::zeros({3}), rm = Tensor::zeros({3}), rv = Tensor::zeros({3});
  EXPECT_THROW(batch_norm(bn_x, g, b, rm, rv, true), ShapeError);
}

TEST(AutodiffTest, TapeIsTopologicalAndVisitedOnce) {
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  auto y = matmul(x, x);
  auto z = sum(add(relu(y), sigmoid(y)));
  auto tape = z.tape();
  ASSERT_EQ(tape.size(), 5u);
  for (std::size_t i = 1; i < tape.size(); ++i) EXPECT_GT(tape[i - 1].seq, tape[i].seq);
  for (const auto& e : tape)
    for (auto in : e.input_seqs) EXPECT_LT(in, e.seq);
}

TEST(AutodiffTest, GradientsAreLinearInTheLoss) {
  Rng rng(21);
  auto x = detail::random_tensor(rng, {3, 4});
  auto w = detail::random_tensor(rng, {4, 2});
  auto l1 = [&] { return sum(sigmoid(matmul(x, w))); };
  auto l2 = [&] { return sum(mul(matmul(x, w), matmul(x, w))); };
  l1().backward();
  auto g1 = x.to_vector();
  g1.assign(x.grad().begin(), x.grad().end());
  x.zero_grad();
  w.zero_grad();
  l2().backward();
  std::vector<double> g2(x.grad().begin(), x.grad().end());
  x.zero_grad();
  w.zero_grad();
  const double a = 0.7, b = -1.3;
  add(affine(l1(), a), affine(l2(), b)).backward();
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(x.grad()[i], a * g1[i] + b * g2[i], 1e-10);
}

TEST(AutodiffTest, ZeroKernelGivesZeroOutputAndInputGrad) {
  Rng rng(8);
  auto x = detail::random_tensor(rng, {2, 3, 5, 5});
  auto w = Tensor::zeros({4, 3, 3, 3}, true);
  auto y = conv2d(x, w, Tensor(), 1, 1);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  project(y, 4).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 0.0);
}

TEST(AutodiffTest, SoftmaxIsAPositiveDistribution) {
  Rng rng(9);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto x = detail::random_tensor(rng, {3, 4, 5}, -30.0, 30.0, false);
    auto y = softmax(x, axis);
    auto s = sum_axis(y, axis);
    for (double v : y.data()) EXPECT_GT(v, 0.0);
    for (double v : s.data()) EXPECT_NEAR(v, 1.0, 1e-12);
  }
}

TEST(AutodiffTest, DeterministicOutputsAndGrads) {
  auto run = [] {
    Rng rng(99);
    auto x = detail::random_tensor(rng, {2, 3, 6, 6});
    auto w = detail::random_tensor(rng, {4, 3, 3, 3});
    auto y = relu(conv2d(x, w, Tensor(), 1, 1));
    auto loss = project(interpolate_bilinear(y, 9, 9), 1);
    loss.backward();
    auto out = y.to_vector();
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(AutodiffTest, NoGradGuardSkipsRecording) {
  auto x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = mul(x, x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

class OpFamilyGradcheck : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(OpFamilyGradcheck, AnalyticMatchesCentralDifferences) {
  for (const auto& r : op_family_gradchecks(GetParam())) {
    EXPECT_TRUE(r.passed) << r.name << " rel error " << r.max_rel_error;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpFamilyGradcheck, ::testing::Values(1, 2, 3, 4, 5));

TEST(GradcheckTest, ScaledBackwardIsDetected) {
  GradcheckOptions opt;
  opt.analytic_scale = 1.01;
  for (const auto& r : op_family_gradchecks(7, opt)) EXPECT_FALSE(r.passed) << r.name;
}
