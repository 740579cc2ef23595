#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "fedlora/distill.hpp"
#include "fedlora/gradcheck.hpp"
#include "support.hpp"

using namespace fedlora;
using fedlora::testing::random_tensor;

namespace {

// Σ_b Σ_i q log(q/p) / B · T², by hand from scratch.
double kd_oracle(const std::vector<double>& zs, const std::vector<double>& zt, std::size_t classes, double t) {
  const std::size_t rows = zs.size() / classes;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = -1e300, mt = -1e300;
    for (std::size_t i = 0; i < classes; ++i) {
      ms = std::max(ms, zs[r * classes + i] / t);
      mt = std::max(mt, zt[r * classes + i] / t);
    }
    double ss = 0.0, st = 0.0;
    for (std::size_t i = 0; i < classes; ++i) {
      ss += std::exp(zs[r * classes + i] / t - ms);
      st += std::exp(zt[r * classes + i] / t - mt);
    }
    for (std::size_t i = 0; i < classes; ++i) {
      const double q = std::exp(zt[r * classes + i] / t - mt) / st;
      const double p = std::exp(zs[r * classes + i] / t - ms) / ss;
      total += q * std::log(q / p);
    }
  }
  return t * t * total / static_cast<double>(rows);
}

}  // namespace

TEST(DistillConfig, DefaultHyperparameters) {
  DistillConfig c;
  EXPECT_EQ(c.temperature, 2.0);
  EXPECT_EQ(c.alpha, 0.25);
  EXPECT_NO_THROW(c.validate());
  EXPECT_THROW((DistillConfig{0.0, 0.5}.validate()), ConfigError);
  EXPECT_THROW((DistillConfig{2.0, 1.5}.validate()), ConfigError);
}

TEST(CrossEntropy, UniformLogitsGiveLogClassCount) {
  EXPECT_NEAR(cross_entropy(Tensor::zeros({1, 7}), {3}).item(), std::log(7.0), 1e-12);
  EXPECT_NEAR(std::log(7.0), 1.9459, 1e-4);
}

TEST(CrossEntropy, ConfidentCorrectLogitNearZero) {
  std::vector<double> z(7, 0.0);
  z[2] = 30.0;
  EXPECT_LT(cross_entropy(Tensor({1, 7}, z), {2}).item(), 1e-9);
}

TEST(CrossEntropy, BatchIsMeanOfRows) {
  Tensor z = random_tensor({2, 5}, 1, -2.0, 2.0);
  const double a = cross_entropy(ops::slice_rows(z, 0, 1), {1}).item();
  const double b = cross_entropy(ops::slice_rows(z, 1, 2), {4}).item();
  EXPECT_NEAR(cross_entropy(z, {1, 4}).item(), 0.5 * (a + b), 1e-14);
}

TEST(CrossEntropy, OutOfRangeLabelIsDataError) { EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), {3}), DataError); }

TEST(KdLoss, IdenticalLogitsGiveZero) {
  Tensor z = random_tensor({4, 7}, 2, -3.0, 3.0);
  EXPECT_NEAR(kd_loss(z, z, 2.0).item(), 0.0, 1e-12);
}

TEST(KdLoss, HandComputedPair) {
  const double kl = kd_loss(Tensor({1, 2}, {0.0, 0.0}), Tensor({1, 2}, {0.0, std::log(9.0)}), 1.0).item();
  EXPECT_NEAR(kl, 0.1 * std::log(0.2) + 0.9 * std::log(1.8), 1e-12);
  EXPECT_NEAR(kl, 0.368, 1e-4);
}

TEST(KdLoss, NonNegativeAndMatchesOracleOverRandomPairs) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> scale(0.1, 8.0), temp(0.5, 5.0);
  for (unsigned i = 0; i < 1000; ++i) {
    const double s = scale(rng), t = temp(rng);
    Tensor zs = random_tensor({2, 7}, 100 + 2 * i, -s, s), zt = random_tensor({2, 7}, 101 + 2 * i, -s, s);
    const double kd = kd_loss(zs, zt, t).item();
    EXPECT_GE(kd, 0.0);
    EXPECT_NEAR(kd, kd_oracle(zs.values(), zt.values(), 7, t), 1e-10 * std::max(1.0, kd));
  }
}

TEST(KdLoss, HighTemperatureApproachesLogitMatching) {
  // T²·KL tends to Σ(Δ - mean Δ)² / 2C as the softened distributions flatten
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 6.0);
  for (unsigned i = 0; i < 200; ++i) {
    std::vector<double> zs(7), zt(7), d(7);
    for (auto& v : zs) v = n(rng);
    for (auto& v : zt) v = n(rng);
    double mean = 0.0;
    for (std::size_t k = 0; k < 7; ++k) mean += (d[k] = zt[k] - zs[k]) / 7.0;
    double limit = 0.0;
    for (double v : d) limit += (v - mean) * (v - mean) / 14.0;
    const double kd = kd_loss(Tensor({1, 7}, zs), Tensor({1, 7}, zt), 1000.0).item();
    EXPECT_NEAR(kd, limit, 1e-2 * limit);
    EXPECT_LT(kd / 1e6, 1e-3);
  }
}

TEST(KdLoss, ShapeMismatchIsContractError) {
  EXPECT_THROW(kd_loss(Tensor::zeros({1, 3}), Tensor::zeros({1, 4}), 2.0), ContractError);
}

TEST(TotalLoss, BlendWeights) {
  Tensor zs = random_tensor({3, 7}, 5, -2.0, 2.0), zt = random_tensor({3, 7}, 6, -2.0, 2.0);
  const std::vector<std::size_t> y{0, 3, 6};
  const auto r = total_loss(zs, zt, y, DistillConfig{2.0, 0.25});
  EXPECT_NEAR(r.total.item(), 0.25 * r.cross_entropy + 0.75 * r.distillation, 1e-12);
  EXPECT_NEAR(0.25 * 1.0 + 0.75 * 0.2, 0.4, 1e-15);
  EXPECT_NEAR(total_loss(zs, zt, y, DistillConfig{2.0, 1.0}).total.item(), cross_entropy(zs, y).item(), 1e-15);
  EXPECT_NEAR(total_loss(zs, zt, y, DistillConfig{2.0, 0.0}).total.item(), kd_loss(zs, zt, 2.0).item(), 1e-15);
}

TEST(TotalLoss, GradientMatchesFiniteDifferencesAndSparesTeacher) {
  Tensor zs = random_tensor({3, 7}, 7, -2.0, 2.0), zt = random_tensor({3, 7}, 8, -2.0, 2.0);
  const std::vector<std::size_t> y{1, 2, 5};
  EXPECT_LT(grad_check([&](const Tensor& z) { return total_loss(z, zt, y, {}).total; }, zs, 1e-6), 1e-6);
  zt.set_requires_grad(true);
  zs.set_requires_grad(true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(total_loss(zs, zt, y, {}).total);
  }
  EXPECT_TRUE(zs.has_grad());
  EXPECT_FALSE(zt.has_grad());
}

TEST(TeacherHandle, OutputsAreDetached) {
  Tensor w = random_tensor({4, 3}, 9);
  w.set_requires_grad(true);
  TeacherHandle t{"linear", [w](const std::vector<Tensor>& xs) { return ops::matmul(ops::concat_rows(xs), w); }};
  Tensor x = random_tensor({1, 4}, 10);
  Tape tape;
  Tensor out;
  {
    TapeScope scope(tape);
    out = t({x});
  }
  EXPECT_FALSE(out.requires_grad());
  EXPECT_EQ(t({x}).values(), out.values());
}
