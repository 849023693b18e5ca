#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "arcd/error.hpp"
#include "arcd/gradcheck.hpp"
#include "arcd/ops.hpp"
#include "arcd/random.hpp"
#include "arcd/tensor.hpp"

using namespace arcd;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, bool grad = false) {
  std::vector<double> v(static_cast<std::size_t>(numel(s)));
  for (auto& x : v) x = rng.uniform(-1, 1);
  return Tensor<double>(std::move(s), std::move(v), grad);
}

// Direct nested-loop cross-correlation.
std::vector<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, int stride,
                                 int pad, std::int64_t& oh, std::int64_t& ow) {
  const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  oh = (H + 2 * pad - kh) / stride + 1;
  ow = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(N * K * oh * ow));
  auto xd = x.data();
  auto wd = w.data();
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t k = 0; k < K; ++k)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t z = 0; z < ow; ++z) {
          double acc = b.defined() ? b.data()[k] : 0.0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < kh; ++i)
              for (std::int64_t j = 0; j < kw; ++j) {
                const auto yy = y * stride + i - pad, xx = z * stride + j - pad;
                if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                acc += xd[((n * C + c) * H + yy) * W + xx] * wd[((k * C + c) * kh + i) * kw + j];
              }
          out[((n * K + k) * oh + y) * ow + z] = acc;
        }
  return out;
}

}  // namespace

TEST(Conv2d, ScalarMultiply) {
  Tensor<double> x({1, 1, 1, 1}, 1.0), w({1, 1, 1, 1}, 2.0), b({1}, 0.0);
  EXPECT_EQ(conv2d(x, w, b).item(), 2.0);
}

TEST(Conv2d, SumOfOnes) {
  Tensor<double> x({1, 1, 3, 3}, 1.0), w({1, 1, 3, 3}, 1.0), b({1}, 0.0);
  EXPECT_EQ(conv2d(x, w, b).item(), 9.0);
}

TEST(Conv2d, MatchesLoopOracle) {
  Rng rng(7);
  struct Case { Shape x, w; int stride, pad; };
  for (const auto& c : {Case{{1, 2, 5, 5}, {3, 2, 3, 3}, 1, 0}, Case{{2, 3, 9, 7}, {4, 3, 3, 3}, 2, 1},
                        Case{{1, 4, 6, 6}, {5, 4, 1, 1}, 1, 0}, Case{{2, 2, 8, 8}, {3, 2, 3, 3}, 1, 1}}) {
    auto x = random_tensor(c.x, rng), w = random_tensor(c.w, rng), b = random_tensor({c.w[0]}, rng);
    std::int64_t oh, ow;
    auto want = naive_conv2d(x, w, b, c.stride, c.pad, oh, ow);
    auto got = conv2d(x, w, b, c.stride, c.pad);
    ASSERT_EQ(got.shape(), (Shape{c.x[0], c.w[0], oh, ow}));
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got.data()[i], want[i], 1e-12);
  }
}

TEST(Conv2d, ChannelMismatchThrows) {
  Tensor<double> x({1, 2, 4, 4}, 1.0), w({1, 3, 3, 3}, 1.0);
  EXPECT_THROW(conv2d(x, w, Tensor<double>{}), DimensionError);
}

TEST(Conv3d, TemporalDotProduct) {
  const double a = 0.3, b = -1.7, u = 2.0, v = 0.5;
  Tensor<double> x({1, 1, 2, 1, 1}, std::vector<double>{a, b}), w({1, 1, 2, 1, 1}, std::vector<double>{u, v});
  EXPECT_DOUBLE_EQ(conv3d(x, w, Tensor<double>{}).item(), u * a + v * b);
}

TEST(Conv3d, ZeroInputGivesBias) {
  Rng rng(1);
  Tensor<double> x({1, 2, 2, 3, 3}, 0.0);
  auto w = random_tensor({3, 2, 2, 3, 3}, rng), b = random_tensor({3}, rng);
  auto y = conv3d(x, w, b, {0, 1, 1});
  for (std::int64_t k = 0; k < 3; ++k)
    for (std::int64_t i = 0; i < 9; ++i) EXPECT_EQ(y.data()[k * 9 + i], b.data()[k]);
}

TEST(Conv3d, MatchesLoopOracle) {
  Rng rng(3);
  auto x = random_tensor({1, 2, 2, 4, 4}, rng), w = random_tensor({3, 2, 2, 3, 3}, rng), b = random_tensor({3}, rng);
  for (std::array<int, 3> pad : {std::array<int, 3>{0, 0, 0}, std::array<int, 3>{0, 1, 1}}) {
    auto got = conv3d(x, w, b, pad);
    const std::int64_t D = 2, H = 4, W = 4, od = D - 2 + 1, oh = H + 2 * pad[1] - 2, ow = W + 2 * pad[2] - 2;
    ASSERT_EQ(got.shape(), (Shape{1, 3, od, oh, ow}));
    for (std::int64_t k = 0; k < 3; ++k)
      for (std::int64_t t = 0; t < od; ++t)
        for (std::int64_t y = 0; y < oh; ++y)
          for (std::int64_t z = 0; z < ow; ++z) {
            double acc = b.data()[k];
            for (std::int64_t c = 0; c < 2; ++c)
              for (std::int64_t dt = 0; dt < 2; ++dt)
                for (std::int64_t i = 0; i < 3; ++i)
                  for (std::int64_t j = 0; j < 3; ++j) {
                    const auto yy = y + i - pad[1], xx = z + j - pad[2];
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    acc += x.data()[((c * D + t + dt) * H + yy) * W + xx] *
                           w.data()[(((k * 2 + c) * 2 + dt) * 3 + i) * 3 + j];
                  }
            EXPECT_NEAR(got.data()[((k * od + t) * oh + y) * ow + z], acc, 1e-12);
          }
  }
}

TEST(BatchNorm, TrainModeMatchesFormula) {
  Rng rng(5);
  auto x = random_tensor({3, 2, 4, 5}, rng), gamma = random_tensor({2}, rng), beta = random_tensor({2}, rng);
  RunningStats<double> stats(2);
  auto y = batch_norm(x, gamma, beta, stats, NormMode::train, 0.1, 1e-5);
  const std::int64_t per = 3 * 20;
  for (int c = 0; c < 2; ++c) {
    double m = 0, v = 0;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 20; ++i) m += x.data()[(n * 2 + c) * 20 + i];
    m /= per;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 20; ++i) v += std::pow(x.data()[(n * 2 + c) * 20 + i] - m, 2);
    const double biased = v / per, unbiased = v / (per - 1);
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 20; ++i) {
        const auto k = (n * 2 + c) * 20 + i;
        EXPECT_NEAR(y.data()[k], gamma.data()[c] * (x.data()[k] - m) / std::sqrt(biased + 1e-5) + beta.data()[c],
                    1e-12);
      }
    EXPECT_NEAR(stats.mean[c], 0.1 * m, 1e-12);
    EXPECT_NEAR(stats.var[c], 0.9 + 0.1 * unbiased, 1e-12);
  }
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
  Rng rng(2);
  auto x = random_tensor({2, 3, 4, 4}, rng), beta = random_tensor({3}, rng);
  RunningStats<double> stats(3);
  auto y = batch_norm(x, Tensor<double>({3}, 0.0), beta, stats, NormMode::train);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 16; ++i) EXPECT_EQ(y.data()[(n * 3 + c) * 16 + i], beta.data()[c]);
}

TEST(BatchNorm, EvalUsesRunningStats) {
  RunningStats<double> stats(1);
  stats.mean = {2.0};
  stats.var = {4.0};
  Tensor<double> x({1, 1, 1, 2}, std::vector<double>{2.0, 6.0});
  auto y = batch_norm(x, Tensor<double>({1}, 1.0), Tensor<double>({1}, 0.0), stats, NormMode::eval, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(y.data()[0], 0.0);
  EXPECT_DOUBLE_EQ(y.data()[1], 2.0);
  EXPECT_EQ(stats.mean[0], 2.0);
}

TEST(Elementwise, Definitions) {
  EXPECT_NEAR(one_minus(Tensor<double>::scalar(0.3)).item(), 0.7, 1e-15);
  EXPECT_EQ(sigmoid(Tensor<double>::scalar(0.0)).item(), 0.5);
  EXPECT_EQ(relu(Tensor<double>::scalar(-2.0)).item(), 0.0);
  EXPECT_EQ(relu(Tensor<double>::scalar(2.0)).item(), 2.0);
  EXPECT_THROW(add(Tensor<double>({2}, 1.0), Tensor<double>({3}, 1.0)), DimensionError);
}

TEST(Upsample, BilinearCheckerboard) {
  // The checkerboard c(i,j) = i + j - 2ij is multilinear, so its bilinear
  // interpolation at source coordinates (u, v) is u + v - 2uv. Half-pixel
  // centres with clamping put output rows of a x2 resize at u = 0, .25, .75, 1.
  Tensor<double> x({1, 1, 2, 2}, std::vector<double>{0, 1, 1, 0});
  auto y = upsample_bilinear(x, 2);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 4}));
  const double u[4] = {0, 0.25, 0.75, 1};
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(y.data()[i * 4 + j], u[i] + u[j] - 2 * u[i] * u[j], 1e-15) << i << "," << j;
}

TEST(Upsample, BilinearFactorOneIsIdentity) {
  Rng rng(4);
  auto x = random_tensor({1, 2, 3, 3}, rng);
  auto y = upsample_bilinear(x, 1);
  EXPECT_TRUE(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
}

TEST(Upsample, NearestRepeats) {
  Tensor<double> x({1, 1, 1, 2}, std::vector<double>{3, 4});
  auto y = upsample_nearest(x, 2);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{3, 3, 4, 4, 3, 3, 4, 4}));
}

TEST(Backward, SumGivesOnes) {
  Rng rng(1);
  auto x = random_tensor({2, 3, 4}, rng, true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwoX) {
  Rng rng(2);
  auto x = random_tensor({5, 3}, rng, true);
  backward(sum(mul(x, x)));
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x.data()[i]);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  auto x = Tensor<double>::scalar(3.0, true);
  auto y = mul(x, x);
  backward(add(y, mul(y, x)));  // x^2 + x^3
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 3.0 + 3 * 9.0);
}

TEST(Backward, Contracts) {
  auto x = Tensor<double>({2}, 1.0, true);
  EXPECT_THROW(backward(mul_scalar(x, 2.0)), ContractError);  // not a scalar
  auto loss = sum(x);
  backward(loss);
  EXPECT_THROW(backward(loss), ContractError);  // record consumed
  EXPECT_THROW(backward(sum(Tensor<double>({2}, 1.0))), ContractError);  // nothing requires grad
}

TEST(Backward, NoGradGuardRecordsNothing) {
  auto x = Tensor<double>({2}, 1.0, true);
  NoGradGuard guard;
  EXPECT_FALSE(sum(x).requires_grad());
}

TEST(Gradcheck, SuitePasses) {
  for (const auto& entry : gradcheck_suite()) {
    auto report = gradcheck(entry.name, entry.factory, 0, entry.options);
    EXPECT_TRUE(report.passed()) << format_report(report);
    EXPECT_LT(report.max_rel_error(), entry.composite ? 1e-3 : 1e-4) << entry.name;
  }
}

TEST(Gradcheck, SigmoidChainTight) {
  for (const auto& entry : gradcheck_suite())
    if (entry.name == "sigmoid_chain") {
      auto report = gradcheck(entry.name, entry.factory, 11, entry.options);
      EXPECT_LT(report.max_rel_error(), 1e-6) << format_report(report);
      return;
    }
  FAIL() << "sigmoid_chain missing from the suite";
}

TEST(Gradcheck, DetectsWrongGradient) {
  // Forward is x^2 but the recorded adjoint is wrong (3x).
  CaseFactory factory = [](Rng& rng) {
    auto x = random_tensor({4}, rng, true);
    GradcheckCase c;
    c.inputs.push_back({"x", x});
    c.forward = [x] {
      std::vector<double> v(4);
      for (int i = 0; i < 4; ++i) v[i] = x.data()[i] * x.data()[i];
      return detail::record<double>(Shape{4}, std::move(v), {&x}, [](TensorNode<double>& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (int i = 0; i < 4; ++i) g[i] += self.grad[i] * 3 * self.inputs[0]->data[i];
      });
    };
    return c;
  };
  EXPECT_FALSE(gradcheck("broken", factory, 0).passed());
}
