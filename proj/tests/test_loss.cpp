#include <gtest/gtest.h>

#include <cmath>

#include "arcd/error.hpp"
#include "arcd/gradcheck.hpp"
#include "arcd/loss.hpp"
#include "arcd/ops.hpp"

using namespace arcd;

namespace {

Tensor<double> map(std::vector<double> v) {
  const auto n = static_cast<std::int64_t>(v.size());
  return Tensor<double>(Shape{1, 1, 1, n}, std::move(v));
}

Tensor<double> grid(int h, int w, std::vector<double> v) { return Tensor<double>(Shape{h, w}, std::move(v)); }

}  // namespace

TEST(Bce, WorkedValues) {
  EXPECT_NEAR(bce(map({0.9}), map({1})).item(), -std::log(0.9), 1e-12);
  EXPECT_NEAR(bce(map({0.5, 0.5, 0.5}), map({1, 0, 1})).item(), std::log(2.0), 1e-12);
  EXPECT_LE(bce(map({1, 0, 1, 0}), map({1, 0, 1, 0})).item(), 1e-6);
}

TEST(Bce, NonNegativeAndFinite) {
  Rng rng(1);
  for (int k = 0; k < 50; ++k) {
    std::vector<double> p(16), g(16);
    for (int i = 0; i < 16; ++i) p[i] = rng.uniform(), g[i] = rng.bernoulli(0.5);
    p[0] = 0.0, p[1] = 1.0;  // clamp keeps these finite
    const double v = bce(map(p), map(g)).item();
    EXPECT_GE(v, 0.0);
    EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Bce, Errors) {
  EXPECT_THROW(bce(map({0.5, 0.5}), map({1})), DimensionError);
  EXPECT_THROW(bce(map({std::nan("")}), map({1})), NumericError);
}

TEST(Dice, WorkedValues) {
  EXPECT_NEAR(dice(map({1, 1, 0, 0}), map({0, 0, 1, 1})).item(), 0.8, 1e-12);
  EXPECT_NEAR(dice(map({0, 0, 0, 0}), map({0, 0, 0, 0})).item(), 0.0, 1e-12);
  EXPECT_NEAR(dice(map({1, 0, 1, 1}), map({1, 0, 1, 1})).item(), 0.0, 1e-12);
}

TEST(Dice, WithinUnitInterval) {
  Rng rng(2);
  for (int k = 0; k < 50; ++k) {
    std::vector<double> p(9), g(9);
    for (int i = 0; i < 9; ++i) p[i] = rng.uniform(), g[i] = rng.bernoulli(0.3);
    const double v = dice(map(p), map(g)).item();
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(UncertaintyTarget, WorkedValues) {
  auto gu = uncertainty_target(map({1, 1, 0, 0.7}), map({0, 1, 0, 1}));
  EXPECT_EQ(gu.data()[0], 1.0);
  EXPECT_EQ(gu.data()[1], 0.0);
  EXPECT_EQ(gu.data()[2], 0.0);
  EXPECT_NEAR(gu.data()[3], 0.3, 1e-15);
}

TEST(UncertaintyTarget, SymmetricInArguments) {
  Rng rng(3);
  std::vector<double> p(20), g(20);
  for (int i = 0; i < 20; ++i) p[i] = rng.uniform(), g[i] = rng.uniform();
  auto a = uncertainty_target(map(p), map(g)), b = uncertainty_target(map(g), map(p));
  for (int i = 0; i < 20; ++i) EXPECT_DOUBLE_EQ(a.data()[i], b.data()[i]);
}

TEST(UncertaintyTarget, IsDetached) {
  auto p = Tensor<double>(Shape{1, 1, 1, 2}, std::vector<double>{0.2, 0.8}, true);
  EXPECT_FALSE(uncertainty_target(p, map({1, 0})).requires_grad());
}

TEST(BoundaryTarget, Cases) {
  auto empty = boundary_target(grid(3, 3, std::vector<double>(9, 0.0)));
  for (double v : empty.data()) EXPECT_EQ(v, 0.0);

  std::vector<double> dot(25, 0.0);
  dot[12] = 1;
  auto b = boundary_target(grid(5, 5, dot));
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      const bool want = (y == 2 && x == 2) || (std::abs(y - 2) + std::abs(x - 2) == 1);
      EXPECT_EQ(b.data()[y * 5 + x], want ? 1.0 : 0.0) << y << "," << x;
    }

  std::vector<double> half(36, 0.0);
  for (int y = 0; y < 6; ++y)
    for (int x = 3; x < 6; ++x) half[y * 6 + x] = 1;
  auto h = boundary_target(grid(6, 6, half));
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) EXPECT_EQ(h.data()[y * 6 + x], (x == 2 || x == 3) ? 1.0 : 0.0);

  EXPECT_THROW(boundary_target(Tensor<double>(Shape{1, 2, 3, 3}, 0.0)), DimensionError);
}

namespace {

PredictionBundle<double> bundle_from(const Tensor<double>& value, bool with_uncertainty) {
  PredictionBundle<double> b;
  for (auto& p : b.level_probabilities) p = value;
  b.refined_probabilities = {value, value, value};
  b.change = value;
  if (with_uncertainty) b.uncertainty = Tensor<double>(value.shape(), 0.0);
  return b;
}

}  // namespace

TEST(TotalLoss, PerfectPrediction) {
  auto g = map({1, 0, 0, 1});
  auto lb = total_loss(bundle_from(g, true), g, AblationConfig{});
  EXPECT_LE(lb.total_value, 1e-5);
  EXPECT_EQ(lb.supervised_maps, 8);
}

TEST(TotalLoss, WithoutUncertaintyEqualsChangeLoss) {
  auto g = map({1, 0, 0, 1});
  auto ab = AblationConfig::from_variant("wo-oue");
  auto lb = total_loss(bundle_from(map({0.6, 0.3, 0.2, 0.9}), false), g, ab);
  EXPECT_EQ(lb.l_u, 0.0);
  EXPECT_NEAR(lb.total_value, lb.l_c, 1e-12);
}

TEST(TotalLoss, SumsEveryMap) {
  auto g = map({1, 0, 0, 1});
  auto p = map({0.6, 0.3, 0.2, 0.9});
  auto lb = total_loss(bundle_from(p, true), g, AblationConfig{});
  const double one = bce(p, g).item() + dice(p, g).item();
  EXPECT_NEAR(lb.l_c, 8 * one, 1e-12);
  // p^u = 0 everywhere against g^u = |p - g|
  auto gu = uncertainty_target(p, g);
  EXPECT_NEAR(lb.l_u, bce(Tensor<double>(p.shape(), 0.0), gu).item(), 1e-12);
}

TEST(TotalLoss, BoundarySupervisionUsesEdges) {
  auto g = Tensor<double>(Shape{1, 1, 4, 4}, std::vector<double>{0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1});
  auto b = bundle_from(g, true);
  auto lb = total_loss(b, g, AblationConfig::from_variant("oue-boundary-sup"));
  EXPECT_NEAR(lb.l_u, bce(b.uncertainty, boundary_target(g)).item(), 1e-12);
}

// The prediction-error target for p^u is built from a detached p^c, so
// finite differences through p^c only agree with reverse mode when that
// target is not in play: boundary supervision has a fixed target.
TEST(TotalLoss, GradcheckThroughLogits) {
  const auto supervision = AblationConfig::from_variant("oue-boundary-sup");
  CaseFactory factory = [supervision](Rng& rng) {
    GradcheckCase c;
    std::vector<double> gv(2 * 16);
    for (auto& v : gv) v = rng.bernoulli(0.4);
    auto target = Tensor<double>(Shape{2, 1, 4, 4}, gv);
    for (int i = 0; i < 9; ++i) {
      std::vector<double> z(gv.size());
      for (auto& v : z) v = rng.uniform(-2, 2);
      c.inputs.push_back({"logit" + std::to_string(i), Tensor<double>(Shape{2, 1, 4, 4}, z, true)});
    }
    auto inputs = c.inputs;
    c.forward = [inputs, target, supervision] {
      PredictionBundle<double> b;
      for (int i = 0; i < 4; ++i) b.level_probabilities[i] = sigmoid(inputs[i].value);
      for (int i = 4; i < 7; ++i) b.refined_probabilities.push_back(sigmoid(inputs[i].value));
      b.change = sigmoid(inputs[7].value);
      b.uncertainty = sigmoid(inputs[8].value);
      return total_loss(b, target, supervision).total;
    };
    return c;
  };
  GradcheckOptions opt;
  opt.tolerance = 1e-4;
  auto report = gradcheck("total_loss", factory, 0, opt);
  EXPECT_TRUE(report.passed()) << format_report(report);
}

TEST(TotalLoss, UncertaintyTermSendsNoGradientToChangeMap) {
  auto g = map({1, 0, 0, 1});
  auto change = Tensor<double>(g.shape(), std::vector<double>{0.6, 0.3, 0.2, 0.9}, true);
  auto unc = Tensor<double>(g.shape(), std::vector<double>{0.2, 0.4, 0.1, 0.3}, true);
  PredictionBundle<double> b;
  for (auto& p : b.level_probabilities) p = Tensor<double>(g.shape(), 0.5);
  b.change = change;
  b.uncertainty = unc;
  auto lb = total_loss(b, g, AblationConfig{});
  backward(lb.total);
  // d/dp^c of (bce + dice) alone
  auto c2 = Tensor<double>(g.shape(), std::vector<double>{0.6, 0.3, 0.2, 0.9}, true);
  backward(add(bce(c2, g), dice(c2, g)));
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(change.grad()[i], c2.grad()[i], 1e-15);
  EXPECT_TRUE(unc.has_grad());
}
