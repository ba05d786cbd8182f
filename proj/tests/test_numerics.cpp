#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "support/gradcheck.hpp"
#include "tagbert/autodiff.hpp"
#include "tagbert/ops.hpp"
#include "tagbert/optim.hpp"

using namespace tagbert;
using tagbert::testing::gradcheck;
using tagbert::testing::random_param;

namespace {

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor<double>({r, c}, std::move(v)); }

void expect_small(const std::vector<tagbert::testing::GradCheckResult>& results, double tol) {
  for (const auto& r : results) EXPECT_LE(r.relative_error, tol) << r.name << " max diff " << r.max_abs_diff;
}

}  // namespace

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  auto y = ops::softmax(mat(1, 4, {0, 0, 0, 0}));
  for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Primitives, LayerNormOfConstantRowIsZeroBeforeAffine) {
  Tensor<float> x({2, 5}, 0.1f);
  for (std::size_t i = 5; i < 10; ++i) x[i] = 3.7f;
  Tensor<float> g({5}, 1.0f), b({5}, 0.0f);
  auto y = ops::layer_norm(x, g, b, 1e-12);
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Primitives, GeluFixedPointAtZero) {
  EXPECT_EQ(ops::gelu(0.0), 0.0);
  EXPECT_NEAR(ops::gelu(1.0), 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-15);
}

TEST(Primitives, ShapeMismatchNamesBothShapes) {
  try {
    ops::matmul(mat(2, 3, std::vector<double>(6)), mat(2, 3, std::vector<double>(6)));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2, 3] and [2, 3]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ops::add(mat(1, 2, {1, 2}), mat(2, 1, {1, 2})), ShapeError);
}

TEST(Primitives, SoftmaxRowsSumToOneAndLayerNormMoments) {
  Rng rng(3);
  Tensor<double> x({7, 11});
  for (double& v : x.data()) v = 5 * rng.normal();
  auto s = ops::softmax(x);
  for (std::size_t r = 0; r < 7; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 11; ++c) sum += s(r, c);
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
  Tensor<double> g({11}, 1.0), b({11}, 0.0);
  auto y = ops::layer_norm(x, g, b, 1e-12);
  for (std::size_t r = 0; r < 7; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 11; ++c) m += y(r, c);
    m /= 11;
    for (std::size_t c = 0; c < 11; ++c) v += (y(r, c) - m) * (y(r, c) - m);
    EXPECT_LE(std::abs(m), 1e-6);
    EXPECT_NEAR(v / 11, 1.0, 1e-4);
  }
}

TEST(Primitives, EmbeddingRejectsOutOfRangeIds) {
  Tensor<double> table({3, 2}, 1.0);
  std::vector<std::int32_t> ids{0, 3};
  EXPECT_THROW(ops::embedding_lookup(table, ids), std::out_of_range);
}

TEST(Primitives, ParallelMatmulMatchesSequential) {
  Rng rng(11);
  Tensor<double> a({37, 23}), b({23, 19});
  for (double& v : a.data()) v = rng.normal();
  for (double& v : b.data()) v = rng.normal();
  numerics_options().threads = 1;
  auto seq = ops::matmul(a, b);
  numerics_options().threads = 4;
  auto par = ops::matmul(a, b);
  numerics_options().threads = 1;
  // Naive triple loop as an independent reference.
  for (std::size_t i = 0; i < 37; ++i)
    for (std::size_t j = 0; j < 19; ++j) {
      double ref = 0;
      for (std::size_t k = 0; k < 23; ++k) ref += a(i, k) * b(k, j);
      EXPECT_NEAR(par(i, j), ref, 1e-6);
      EXPECT_NEAR(par(i, j), seq(i, j), 1e-6);
    }
}

TEST(Backward, LinearMapGradientIsOuterProduct) {
  Parameter<double> W{"W", mat(2, 3, {1, 2, 3, 4, 5, 6}), {}};
  Tensor<double> x = mat(3, 1, {0.5, -1.0, 2.0});
  Tape<double> t;
  Var loss = ad::sum(t, ad::matmul(t, t.param(W), t.constant(x)));
  t.backward(loss);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(W.grad(i, j), x[j]);
}

TEST(Backward, NonScalarLossIsRejected) {
  Parameter<double> W{"W", mat(2, 2, {1, 2, 3, 4}), {}};
  Tape<double> t;
  Var y = ad::gelu(t, t.param(W));
  EXPECT_THROW(t.backward(y), ShapeError);
}

TEST(Backward, UnreachedParameterGetsZeroGradient) {
  Rng rng(1);
  auto a = random_param("a", {2, 2}, rng);
  auto b = random_param("b", {2, 2}, rng);
  b.zero_grad();
  Tape<double> t;
  t.param(b);
  t.backward(ad::sum(t, ad::gelu(t, t.param(a))));
  for (double v : b.grad.data()) EXPECT_EQ(v, 0.0);
}

TEST(GradCheck, EveryPrimitiveAgreesWithFiniteDifferences) {
  Rng rng(2024);
  auto x = random_param("x", {6, 4}, rng);
  auto w = random_param("w", {5, 4}, rng);
  auto b = random_param("b", {5}, rng);
  auto g = random_param("gain", {5}, rng);
  auto beta = random_param("beta", {5}, rng);
  auto m = random_param("m", {5, 3}, rng);
  auto r = random_param("mix", {6, 3}, rng);
  auto mixl = random_param("mix_logits", {2}, rng);
  std::vector<std::int32_t> labels{0, -100, 2, 1, 2, -100};
  std::vector<std::size_t> rows{5, 0, 2};

  auto build = [&](Tape<double>& t) {
    Var h = ad::linear(t, t.param(x), t.param(w), t.param(b));
    h = ad::layer_norm(t, h, t.param(g), t.param(beta), 1e-5);
    h = ad::gelu(t, h);
    h = ad::matmul(t, h, t.param(m));
    h = ad::softmax(t, ad::scale(t, h, 2.0));
    std::vector<Var> parts{h, t.param(r)};
    h = ad::weighted_sum(t, std::span<const Var>(parts), t.param(mixl));
    Var picked = ad::gather_rows(t, h, rows);
    Var ce = ad::cross_entropy(t, ad::scale(t, h, 3.0), labels, -100).loss;
    return ad::add(t, ce, ad::sum(t, ad::gelu(t, picked)));
  };
  expect_small(gradcheck(build, {&x, &w, &b, &g, &beta, &m, &r, &mixl}), 1e-4);
}

TEST(GradCheck, MaskedMultiHeadAttention) {
  Rng rng(77);
  const std::size_t B = 2, N = 4, d = 6;
  auto q = random_param("q", {B * N, d}, rng);
  auto k = random_param("k", {B * N, d}, rng);
  auto v = random_param("v", {B * N, d}, rng);
  std::vector<std::uint8_t> mask{1, 1, 1, 0, 1, 1, 1, 1};
  auto build = [&](Tape<double>& t) {
    Var ctx = ad::attention(t, t.param(q), t.param(k), t.param(v), {B, N, 2}, mask);
    return ad::sum(t, ad::gelu(t, ctx));
  };
  expect_small(gradcheck(build, {&q, &k, &v}), 1e-4);
}

TEST(GradCheck, AttentionWithDropoutUsesFixedMask) {
  Rng rng(5);
  const std::size_t B = 1, N = 5, d = 4;
  auto q = random_param("q", {B * N, d}, rng);
  auto k = random_param("k", {B * N, d}, rng);
  auto v = random_param("v", {B * N, d}, rng);
  std::vector<std::uint8_t> mask(N, 1);
  auto build = [&](Tape<double>& t) {
    Rng drop(99);
    Var ctx = ad::attention(t, t.param(q), t.param(k), t.param(v), {B, N, 1}, mask, 0.3, &drop);
    return ad::sum(t, ad::gelu(t, ctx));
  };
  expect_small(gradcheck(build, {&q, &k, &v}), 1e-4);
}

TEST(Attention, PaddingKeysReceiveZeroWeight) {
  Rng rng(8);
  const std::size_t B = 2, N = 3, d = 4;
  Tensor<double> x({B * N, d});
  for (double& v : x.data()) v = rng.normal();
  std::vector<std::uint8_t> mask{1, 1, 0, 1, 0, 0};
  Tape<double> t;
  Var xv = t.constant(x);
  Tensor<double> probs;
  ad::attention(t, xv, xv, xv, {B, N, 2}, mask, 0.0, nullptr, &probs);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
          if (!mask[b * N + j]) EXPECT_EQ(probs[((b * 2 + h) * N + i) * N + j], 0.0);
}

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  Tape<double> t;
  std::vector<std::int32_t> labels{2};
  auto ce = ad::cross_entropy(t, t.constant(Tensor<double>({1, 4}, 0.0)), labels, -100);
  EXPECT_NEAR(t.value(ce.loss).item(), std::log(4.0), 1e-12);
  EXPECT_NEAR(t.value(ce.loss).item(), 1.3863, 1e-4);
}

TEST(CrossEntropy, AllIgnoredIsZeroAndFlaggedEmpty) {
  Tape<double> t;
  std::vector<std::int32_t> labels{-100, -100};
  auto ce = ad::cross_entropy(t, t.constant(Tensor<double>({2, 3}, 1.0)), labels, -100);
  EXPECT_TRUE(ce.empty());
  EXPECT_EQ(t.value(ce.loss).item(), 0.0);
}

TEST(CrossEntropy, IgnoredRowDoesNotDiluteTheMean) {
  Tensor<double> logits = mat(2, 3, {1.0, 2.0, 0.5, 9.0, -3.0, 4.0});
  Tape<double> t;
  std::vector<std::int32_t> both{1, -100}, single{1};
  auto two = ad::cross_entropy(t, t.constant(logits), both, -100);
  auto one = ad::cross_entropy(t, t.constant(mat(1, 3, {1.0, 2.0, 0.5})), single, -100);
  EXPECT_DOUBLE_EQ(t.value(two.loss).item(), t.value(one.loss).item());
  const double manual = -std::log(std::exp(2.0) / (std::exp(1.0) + std::exp(2.0) + std::exp(0.5)));
  EXPECT_NEAR(t.value(one.loss).item(), manual, 1e-12);
}

TEST(CrossEntropy, OutOfRangeLabelIsAnError) {
  Tape<double> t;
  std::vector<std::int32_t> labels{3};
  EXPECT_THROW(ad::cross_entropy(t, t.constant(Tensor<double>({1, 3}, 0.0)), labels, -100), std::out_of_range);
}

TEST(CrossEntropy, PermutationEquivariantAndShiftInvariant) {
  Rng rng(4);
  Tensor<double> logits({5, 6});
  for (double& v : logits.data()) v = 3 * rng.normal();
  std::vector<std::int32_t> labels{0, 5, -100, 2, 3};
  Tape<double> t;
  const double base = t.value(ad::cross_entropy(t, t.constant(logits), labels, -100).loss).item();

  std::vector<std::size_t> perm{3, 0, 4, 2, 1};
  Tensor<double> permuted({5, 6});
  std::vector<std::int32_t> plabels(5);
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 6; ++c) permuted(r, c) = logits(perm[r], c);
    plabels[r] = labels[perm[r]];
  }
  EXPECT_NEAR(t.value(ad::cross_entropy(t, t.constant(permuted), plabels, -100).loss).item(), base, 1e-6);

  Tensor<double> shifted = logits;
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 6; ++c) shifted(r, c) += 10.0 * static_cast<double>(r) - 7.0;
  EXPECT_NEAR(t.value(ad::cross_entropy(t, t.constant(shifted), labels, -100).loss).item(), base, 1e-6);
}

TEST(AdamW, FirstStepMatchesScalarReference) {
  std::vector<Parameter<double>> params(1);
  params[0].name = "p";
  params[0].value = Tensor<double>::scalar(1.0);
  params[0].grad = Tensor<double>::scalar(1.0);
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.0});
  opt.step(params, 0.1);
  // m = 0.1, v = 0.001; bias-corrected both are 1.
  const double m_hat = 0.1 / (1 - 0.9), v_hat = 0.001 / (1 - 0.999);
  const double expected = 1.0 - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
  EXPECT_NEAR(params[0].value.item(), expected, 1e-12);
  EXPECT_NEAR(params[0].value.item(), 0.9, 1e-6);
}

TEST(AdamW, ZeroGradientIsPureDecoupledDecay) {
  std::vector<Parameter<double>> params(1);
  params[0].name = "w.weight";
  params[0].value = Tensor<double>::scalar(2.0);
  params[0].grad = Tensor<double>::scalar(0.0);
  AdamW<double> opt({0.9, 0.999, 1e-8, 0.01});
  opt.step(params, 0.5);
  EXPECT_DOUBLE_EQ(params[0].value.item(), 2.0 * (1 - 0.5 * 0.01));
}

TEST(AdamW, IdenticalParametersGetIdenticalUpdates) {
  std::vector<Parameter<float>> params(2);
  for (auto& p : params) {
    p.name = "x";
    p.value = Tensor<float>({3}, std::vector<float>{0.3f, -1.2f, 4.0f});
    p.grad = Tensor<float>({3}, std::vector<float>{0.5f, 0.25f, -2.0f});
  }
  AdamW<float> opt;
  for (int i = 0; i < 3; ++i) opt.step(params, 1e-3);
  EXPECT_EQ(params[0].value, params[1].value);
}

TEST(AdamW, NoDecayFlagSkipsDecay) {
  std::vector<Parameter<double>> params(1);
  params[0].name = "bias";
  params[0].value = Tensor<double>::scalar(2.0);
  params[0].grad = Tensor<double>::scalar(0.0);
  params[0].decay = false;
  AdamW<double> opt;
  opt.step(params, 0.5);
  EXPECT_DOUBLE_EQ(params[0].value.item(), 2.0);
}

TEST(GradientClipping, RescalesToMaxNorm) {
  std::vector<Parameter<double>> params(2);
  params[0].value = Tensor<double>({2}, 0.0);
  params[0].grad = Tensor<double>({2}, std::vector<double>{3, 0});
  params[1].value = Tensor<double>({1}, 0.0);
  params[1].grad = Tensor<double>({1}, std::vector<double>{4});
  EXPECT_DOUBLE_EQ(clip_grad_norm(params, 1.0), 5.0);
  EXPECT_NEAR(grad_norm(params), 1.0, 1e-12);
  EXPECT_NEAR(params[1].grad[0], 0.8, 1e-12);
}

TEST(Schedule, WarmupAndDecayValues) {
  Schedule s{1e-4, 10000, 100000};
  EXPECT_EQ(lr_at(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 5000), 5e-5);
  EXPECT_DOUBLE_EQ(lr_at(s, 10000), 1e-4);
  EXPECT_EQ(lr_at(s, 100000), 0.0);
  EXPECT_EQ(lr_at(s, 100001), 0.0);
  EXPECT_NEAR(lr_at(s, 55000), 5e-5, 1e-18);
}

TEST(Schedule, ContinuousAtBoundaryAndNonNegative) {
  Schedule s{3e-4, 700, 5000};
  EXPECT_NEAR(lr_at(s, 700), s.peak_lr, 1e-12);
  EXPECT_NEAR(lr_at(s, 701), s.peak_lr, s.peak_lr / 4300 + 1e-12);
  EXPECT_NEAR(lr_at(s, 699), s.peak_lr, s.peak_lr / 700 + 1e-12);
  for (std::size_t step = 0; step <= 5200; ++step) EXPECT_GE(lr_at(s, step), 0.0);
}

TEST(Schedule, InvalidScheduleRejected) {
  EXPECT_THROW((Schedule{1e-4, 0, 10}.validate()), std::invalid_argument);
  EXPECT_THROW((Schedule{1e-4, 10, 10}.validate()), std::invalid_argument);
}
