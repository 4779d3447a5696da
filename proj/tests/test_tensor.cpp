#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cosh/autograd.hpp"
#include "cosh/optim.hpp"
#include "cosh/tensor.hpp"

using namespace coshdit;

namespace {

Tensor random_tensor(RandomStream& rng, std::vector<int> shape, double scale = 1.0) {
  return rng.normal_tensor(std::move(shape), scale);
}

// Scalar-loop evaluation of softmax(q K^T / sqrt(D)) V, independent of the
// tape implementation.
Tensor attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v) {
  const int L = q.rows(), Lp = k.rows(), D = q.cols();
  Tensor out({L, D});
  for (int i = 0; i < L; ++i) {
    std::vector<double> s(Lp, 0.0);
    double mx = -1e300;
    for (int j = 0; j < Lp; ++j) {
      double dot = 0.0;
      for (int c = 0; c < D; ++c) dot += q(i, c) * k(j, c);
      s[j] = dot / std::sqrt(static_cast<double>(D));
      mx = std::max(mx, s[j]);
    }
    double z = 0.0;
    for (int j = 0; j < Lp; ++j) {
      s[j] = std::exp(s[j] - mx);
      z += s[j];
    }
    for (int j = 0; j < Lp; ++j) s[j] /= z;
    for (int c = 0; c < D; ++c) {
      double acc = 0.0;
      for (int j = 0; j < Lp; ++j) acc += s[j] * v(j, c);
      out(i, c) = acc;
    }
  }
  return out;
}

}  // namespace

TEST(Attention, SingletonIsIdentity) {
  Tensor q({1, 3}, {0.3, -2.0, 5.0});
  Tensor k({1, 3}, {1.0, 1.0, 1.0});
  Tensor v({1, 3}, {7.0, -1.0, 0.25});
  Var out = attention(constant(q), constant(k), constant(v));
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(out->value(0, c), v(0, c));
}

TEST(Attention, EqualKeysGiveMeanOfValues) {
  RandomStream rng(7);
  Tensor q = random_tensor(rng, {2, 4});
  Tensor k({3, 4});
  for (int j = 0; j < 3; ++j)
    for (int c = 0; c < 4; ++c) k(j, c) = 0.37;
  Tensor v = random_tensor(rng, {3, 4});
  Var out = attention(constant(q), constant(k), constant(v));
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 4; ++c) {
      const double mean = (v(0, c) + v(1, c) + v(2, c)) / 3.0;
      EXPECT_NEAR(out->value(i, c), mean, 1e-12);
    }
}

TEST(Attention, MatchesScalarLoopOracle) {
  RandomStream rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor q = random_tensor(rng, {3, 4});
    Tensor k = random_tensor(rng, {3, 4});
    Tensor v = random_tensor(rng, {3, 4});
    Var out = attention(constant(q), constant(k), constant(v));
    Tensor expect = attention_oracle(q, k, v);
    for (std::size_t i = 0; i < expect.size(); ++i)
      EXPECT_NEAR(out->value[i], expect[i], 1e-12);
  }
}

TEST(Attention, ShapeMismatchThrows) {
  Tensor q({2, 4});
  Tensor k({3, 5});
  Tensor v({3, 5});
  EXPECT_THROW(attention(constant(q), constant(k), constant(v)), ShapeError);
}

TEST(Softmax, RowsSumToOneAndNonNegative) {
  RandomStream rng(3);
  Tensor x = random_tensor(rng, {8, 17}, 5.0);
  Var y = softmax_rows(constant(x));
  for (int r = 0; r < 8; ++r) {
    double s = 0.0;
    for (int c = 0; c < 17; ++c) {
      EXPECT_GE(y->value(r, c), 0.0);
      s += y->value(r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(LayerNorm, RowMeanZeroVarianceOne) {
  RandomStream rng(11);
  Tensor x = random_tensor(rng, {6, 64}, 3.0);
  Var y = layer_norm_rows(constant(x), 1e-9);
  for (int r = 0; r < 6; ++r) {
    double mean = 0.0;
    for (int c = 0; c < 64; ++c) mean += y->value(r, c);
    mean /= 64.0;
    EXPECT_LT(std::abs(mean), 1e-9);
    double var = 0.0;
    for (int c = 0; c < 64; ++c) var += y->value(r, c) * y->value(r, c);
    var /= 64.0;
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(CrossEntropy, SaturatedLogitsGiveNearZeroLoss) {
  Tensor logits({2, 5});
  std::vector<int> targets = {3, 1};
  for (int r = 0; r < 2; ++r) logits(r, targets[static_cast<std::size_t>(r)]) = 20.0;
  Var loss = cross_entropy_rows(constant(logits), targets, {1, 1});
  EXPECT_LT(loss->value[0], 1e-6);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  Tensor logits({4, 128});
  Var loss = cross_entropy_rows(constant(logits), {0, 17, 64, 127}, {1, 1, 1, 1});
  EXPECT_NEAR(loss->value[0], std::log(128.0), 1e-12);
}

TEST(CrossEntropy, MaskedPositionDoesNotContribute) {
  Tensor logits({2, 4});
  logits(0, 2) = 3.0;
  Var base = cross_entropy_rows(constant(logits), {2, 0}, {1, 0});
  logits(1, 3) = 1e6;  // huge wrong logit at the masked row
  Var altered = cross_entropy_rows(constant(logits), {2, 0}, {1, 0});
  EXPECT_DOUBLE_EQ(base->value[0], altered->value[0]);
}

TEST(CrossEntropy, AllMaskedThrows) {
  Tensor logits({2, 4});
  EXPECT_THROW(cross_entropy_rows(constant(logits), {0, 1}, {0, 0}), DegenerateInputError);
}

TEST(GradCheck, QuadraticExact) {
  Var x = parameter(Tensor::scalar(3.0));
  auto loss = [&] { return mul(x, x); };
  const double err = grad_check(loss, {x}, 1e-5);
  EXPECT_LT(err, 1e-8);
  // analytic gradient is 6 at x = 3
  Var l = loss();
  backward(l);
  EXPECT_NEAR(x->grad[0], 6.0, 1e-12);
}

TEST(GradCheck, ConstantFunctionHasZeroGradient) {
  Var x = parameter(Tensor::scalar(1.5));
  auto loss = [&] { return mul_scalar(detach(x), 0.0); };
  Var l = mul(x, constant(Tensor::scalar(0.0)));
  x->ensure_grad();
  x->zero_grad();
  backward(l);
  EXPECT_EQ(x->grad[0], 0.0);
}

TEST(GradCheck, AttentionLayerNormCrossEntropyComposite) {
  RandomStream rng(5);
  Var wq = parameter(rng.normal_tensor({4, 4}, 0.5));
  Var wk = parameter(rng.normal_tensor({4, 4}, 0.5));
  Var wv = parameter(rng.normal_tensor({4, 4}, 0.5));
  Var wo = parameter(rng.normal_tensor({4, 6}, 0.5));
  Tensor x = rng.normal_tensor({3, 4});
  auto loss = [&] {
    Var xin = constant(x);
    Var att = attention(matmul(xin, wq), matmul(xin, wk), matmul(xin, wv));
    Var normed = layer_norm_rows(att);
    Var logits = matmul(normed, wo);
    return cross_entropy_rows(logits, {1, 4, 0}, {1, 1, 1});
  };
  EXPECT_LT(grad_check(loss, {wq, wk, wv, wo}, 1e-5), 1e-4);
}

// Finite-difference validation of every differentiable op at tiny shapes.
TEST(GradCheck, AllOpsUnderTolerance) {
  RandomStream rng(99);
  {
    Var a = parameter(rng.normal_tensor({3, 4}));
    Var b = parameter(rng.normal_tensor({3, 4}));
    auto loss = [&] { return mean_all(mul(silu(add(a, b)), sub(a, b))); };
    EXPECT_LT(grad_check(loss, {a, b}, 1e-5), 1e-4);
  }
  {
    Var a = parameter(rng.normal_tensor({3, 4}));
    Var b = parameter(rng.normal_tensor({4, 2}));
    auto loss = [&] { return mean_all(matmul(a, b)); };
    EXPECT_LT(grad_check(loss, {a, b}, 1e-5), 1e-4);
  }
  {
    Var a = parameter(rng.normal_tensor({4, 3}));
    Var b = parameter(rng.normal_tensor({4, 2}));
    auto loss = [&] { return mean_all(matmul(a, b, true, false)); };
    EXPECT_LT(grad_check(loss, {a, b}, 1e-5), 1e-4);
  }
  {
    Var a = parameter(rng.normal_tensor({2, 4}));
    Var b = parameter(rng.normal_tensor({3, 4}));
    auto loss = [&] { return mean_all(matmul(a, b, false, true)); };
    EXPECT_LT(grad_check(loss, {a, b}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({4, 5}));
    Var v = parameter(rng.normal_tensor({5}));
    auto loss = [&] { return mean_all(square(mul_rowvec(add_rowvec(x, v), v))); };
    EXPECT_LT(grad_check(loss, {x, v}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({6, 3}));
    auto loss = [&] {
      Var top = slice_rows(x, 0, 2);
      Var rest = slice_rows(x, 2, 6);
      return mean_all(square(concat_rows({rest, top})));
    };
    EXPECT_LT(grad_check(loss, {x}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({3, 6}));
    auto loss = [&] {
      Var a = slice_cols(x, 0, 2);
      Var b = slice_cols(x, 2, 6);
      return mean_all(square(concat_cols({b, a})));
    };
    EXPECT_LT(grad_check(loss, {x}, 1e-5), 1e-4);
  }
  {
    Var t = parameter(rng.normal_tensor({5, 3}));
    auto loss = [&] { return mean_all(square(embedding_rows(t, {4, 0, 0, 2}))); };
    EXPECT_LT(grad_check(loss, {t}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({8, 3}));
    auto loss = [&] { return mean_all(square(avg_pool_rows(x, 4))); };
    EXPECT_LT(grad_check(loss, {x}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({3, 10}));  // Cin=3, L=10
    Var w = parameter(rng.normal_tensor({5, 3 * 4}, 0.4));
    Var b = parameter(rng.normal_tensor({5}, 0.1));
    auto loss = [&] { return mean_all(square(conv1d(x, w, b, 3, 4, 2, 1))); };
    EXPECT_LT(grad_check(loss, {x, w, b}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({3, 5}));  // Cin=3, L=5
    Var w = parameter(rng.normal_tensor({3, 2 * 4}, 0.4));
    Var b = parameter(rng.normal_tensor({2}, 0.1));
    auto loss = [&] { return mean_all(square(conv1d_transpose(x, w, b, 2, 4, 2, 1))); };
    EXPECT_LT(grad_check(loss, {x, w, b}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({2, 6 * 6}));  // Cin=2, 6x6
    Var w = parameter(rng.normal_tensor({3, 2 * 4 * 4}, 0.3));
    Var b = parameter(rng.normal_tensor({3}, 0.1));
    auto loss = [&] { return mean_all(square(conv2d(x, w, b, 2, 6, 6, 4, 4, 2, 1))); };
    EXPECT_LT(grad_check(loss, {x, w, b}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({2, 3 * 3}));  // Cin=2, 3x3
    Var w = parameter(rng.normal_tensor({2, 3 * 4 * 4}, 0.3));
    Var b = parameter(rng.normal_tensor({3}, 0.1));
    auto loss = [&] {
      return mean_all(square(conv2d_transpose(x, w, b, 3, 3, 3, 4, 4, 2, 1)));
    };
    EXPECT_LT(grad_check(loss, {x, w, b}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({4, 6}));
    auto loss = [&] { return mean_all(square(softmax_rows(x))); };
    EXPECT_LT(grad_check(loss, {x}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({4, 6}));
    auto loss = [&] { return mean_all(square(layer_norm_rows(x))); };
    EXPECT_LT(grad_check(loss, {x}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({4, 6}));
    auto loss = [&] { return cross_entropy_rows(x, {0, 5, 2, 2}, {1, 0, 1, 1}); };
    EXPECT_LT(grad_check(loss, {x}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({3, 5}));
    Var t = parameter(rng.normal_tensor({3, 5}));
    Tensor w({5}, {1, 4, 1, 4, 1});
    auto loss = [&] { return weighted_col_mse(x, t, w); };
    EXPECT_LT(grad_check(loss, {x, t}, 1e-5), 1e-4);
  }
  {
    Var x = parameter(rng.normal_tensor({4, 3}));
    auto loss = [&] { return mean_all(square(transpose2d(x))); };
    EXPECT_LT(grad_check(loss, {x}, 1e-5), 1e-4);
  }
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Var x = parameter(Tensor({3}, {1.0, -2.0, 0.5}));
  Adam opt({x}, {.lr = 0.1});
  x->ensure_grad();
  x->zero_grad();
  opt.step();
  EXPECT_DOUBLE_EQ(x->value[0], 1.0);
  EXPECT_DOUBLE_EQ(x->value[1], -2.0);
  EXPECT_DOUBLE_EQ(x->value[2], 0.5);
  EXPECT_EQ(opt.step_count(), 1);
}

TEST(Adam, FirstStepWithUnitGradientMovesByLearningRate) {
  Var x = parameter(Tensor::scalar(0.0));
  Adam opt({x}, {.lr = 0.05});
  x->ensure_grad();
  x->grad[0] = 1.0;
  opt.step();
  // bias corrections cancel on the first step: delta = -lr * 1/(1 + eps)
  EXPECT_NEAR(x->value[0], -0.05, 1e-8);
  EXPECT_EQ(x->grad[0], 0.0);  // zeroed after the step
}

TEST(Adam, ConvergesOnShiftedQuadratic) {
  Var x = parameter(Tensor::scalar(0.0));
  Adam opt({x}, {.lr = 0.05});

  // independent hand evaluation of the same recurrence
  double hx = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 1000; ++t) {
    Var loss = square(sub(x, constant(Tensor::scalar(2.0))));
    backward(loss);
    const double g = 2.0 * (hx - 2.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mhat = m / (1.0 - std::pow(0.9, t));
    const double vhat = v / (1.0 - std::pow(0.999, t));
    hx -= 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
    opt.step();
    ASSERT_NEAR(x->value[0], hx, 1e-12);
  }
  EXPECT_LT(std::abs(x->value[0] - 2.0), 1e-2);
}

TEST(Adam, NonFiniteGradientThrows) {
  Var x = parameter(Tensor::scalar(0.0));
  Adam opt({x});
  x->ensure_grad();
  x->grad[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(opt.step(), NumericError);
}

TEST(Determinism, SameSeedSameBits) {
  RandomStream a(123), b(123);
  Tensor ta = a.normal_tensor({32}, 1.7);
  Tensor tb = b.normal_tensor({32}, 1.7);
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i], tb[i]);

  Var xa = constant(ta), xb = constant(tb);
  Var ya = softmax_rows(reshape(xa, {4, 8}));
  Var yb = softmax_rows(reshape(xb, {4, 8}));
  for (std::size_t i = 0; i < ya->value.size(); ++i) EXPECT_EQ(ya->value[i], yb->value[i]);
}

TEST(Tensor, ShapeDataMismatchThrows) {
  EXPECT_THROW(Tensor({2, 3}, {1.0, 2.0}), ShapeError);
  Tensor t({2, 3});
  EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}
