#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "panokit/autograd.hpp"
#include "panokit/nn.hpp"

using namespace panokit;

namespace {

Tensord columns(std::initializer_list<double> v) { return Tensord({1, 1, v.size()}, std::vector<double>(v)); }

}  // namespace

TEST(Tensor, SizeMatchesShape) {
  Tensord t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_THROW(Tensord({2, 2}, std::vector<double>(3)), DimensionError);
}

TEST(WrapPad, OnePixel) {
  const Tensord out = wrap_pad(columns({0, 1, 2, 3}), 1);
  EXPECT_EQ(out.storage(), (std::vector<double>{3, 0, 1, 2, 3, 0}));
}

TEST(WrapPad, TwoPixels) {
  const Tensord out = wrap_pad(columns({0, 1, 2, 3}), 2);
  EXPECT_EQ(out.storage(), (std::vector<double>{2, 3, 0, 1, 2, 3, 0, 1}));
}

TEST(WrapPad, ZeroIsIdentity) {
  Rng rng(3);
  const Tensord x = oracle::random_tensor(rng, {2, 3, 5});
  EXPECT_EQ(wrap_pad(x, 0), x);
}

TEST(WrapPad, PaddingAtLeastWidthFails) {
  EXPECT_THROW(wrap_pad(columns({0, 1, 2, 3}), 4), DimensionError);
  EXPECT_THROW(conv2d(Tensord({1, 4, 2}), Tensord({1, 1, 5, 5}), Tensord({1}), PadSpec{HorizontalPad::Wrap, VerticalPad::Zero, 2}),
               DimensionError);
}

TEST(Conv2d, IdentityKernel) {
  Rng rng(5);
  const Tensord x = oracle::random_tensor(rng, {3, 4, 6});
  Tensord k({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) k[c * 3 + c] = 1.0;
  EXPECT_EQ(conv2d(x, k, Tensord({3}), PadSpec{}), x);
}

TEST(Conv2d, BoxFilterKeepsConstantOnInteriorRows) {
  const Tensord x({1, 5, 8}, 2.5);
  const Tensord k({1, 1, 3, 3}, 1.0 / 9.0);
  const Tensord y = conv2d(x, k, Tensord({1}), PadSpec{HorizontalPad::Wrap, VerticalPad::Zero, 1});
  for (std::size_t i = 1; i + 1 < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(y.at(0, i, j), 2.5, 1e-14);
}

TEST(Conv2d, WrapMatchesZeroPadOnExplicitlyWrappedInput) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t cin = 1 + rng.index(4), cout = 1 + rng.index(4), h = 3 + rng.index(14), w = 6 + rng.index(11);
    const std::size_t k = rng.uniform() < 0.5 ? 3 : 5, p = (k - 1) / 2;
    const Tensord x = oracle::random_tensor(rng, {cin, h, w});
    const Tensord K = oracle::random_tensor(rng, {cout, cin, k, k});
    const Tensord b = oracle::random_tensor(rng, {cout});
    const Tensord wrapped = conv2d(x, K, b, PadSpec{HorizontalPad::Wrap, VerticalPad::Zero, p});
    const Tensord ref = oracle::crop_columns(
        conv2d(oracle::concat_wrap(x, p), K, b, PadSpec{HorizontalPad::Zero, VerticalPad::Zero, p}), p, w);
    EXPECT_LE(max_abs_diff(wrapped, ref), 1e-12);
    EXPECT_LE(max_abs_diff(wrapped, oracle::direct_conv(x, K, b, true)), 1e-12);
    EXPECT_LE(max_abs_diff(conv2d(x, K, b, PadSpec{HorizontalPad::Zero, VerticalPad::Zero, p}),
                           oracle::direct_conv(x, K, b, false)),
              1e-12);
  }
}

TEST(Conv2d, CyclicShiftEquivariance) {
  Rng rng(12);
  const Tensord x = oracle::random_tensor(rng, {3, 8, 16});
  const Tensord K = oracle::random_tensor(rng, {2, 3, 5, 5});
  const Tensord b = oracle::random_tensor(rng, {2});
  const PadSpec pad{HorizontalPad::Wrap, VerticalPad::Zero, 2};
  for (long s : {1L, 3L, 7L, 15L, -4L})
    EXPECT_LE(max_abs_diff(conv2d(roll_columns(x, s), K, b, pad), roll_columns(conv2d(x, K, b, pad), s)), 1e-9);
}

TEST(Conv2d, EvenKernelRejected) {
  EXPECT_THROW(conv2d(Tensord({1, 4, 8}), Tensord({1, 1, 2, 2}), Tensord({1}), PadSpec{}), DimensionError);
  EXPECT_THROW(conv2d(Tensord({2, 4, 8}), Tensord({1, 1, 3, 3}), Tensord({1}), PadSpec{HorizontalPad::Wrap, VerticalPad::Zero, 1}),
               DimensionError);
}

TEST(Dense, IdentityAndZero) {
  Rng rng(2);
  const Tensord x = oracle::random_tensor(rng, {4, 3});
  Tensord I({3, 3});
  for (std::size_t i = 0; i < 3; ++i) I[i * 3 + i] = 1.0;
  EXPECT_EQ(dense(x, I, Tensord({3})), x);
  const Tensord b = oracle::random_tensor(rng, {5});
  const Tensord y = dense(Tensord({2, 3}), oracle::random_tensor(rng, {5, 3}), b);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t o = 0; o < 5; ++o) EXPECT_EQ(y[r * 5 + o], b[o]);
}

TEST(Dense, MatchesNaiveLoops) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 1 + rng.index(7), din = 1 + rng.index(9), dout = 1 + rng.index(9);
    const Tensord x = oracle::random_tensor(rng, {n, din}), W = oracle::random_tensor(rng, {dout, din}),
                  b = oracle::random_tensor(rng, {dout});
    EXPECT_LE(max_abs_diff(dense(x, W, b), oracle::naive_dense(x, W, b)), 1e-13);
  }
  EXPECT_THROW(dense(Tensord({2, 3}), Tensord({4, 2}), Tensord({4})), DimensionError);
}

TEST(Softmax, KnownValues) {
  const Tensord y = softmax(Tensord({3}, std::vector<double>{0.0, std::log(2.0), std::log(3.0)}), 0);
  EXPECT_NEAR(y[0], 1.0 / 6.0, 1e-15);
  EXPECT_NEAR(y[1], 2.0 / 6.0, 1e-15);
  EXPECT_NEAR(y[2], 3.0 / 6.0, 1e-15);
  const Tensord u = softmax(Tensord({4}, 1.7), 0);
  for (double v : u.storage()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  Rng rng(4);
  Tensord x = oracle::random_tensor(rng, {5, 7}, -5, 5);
  const Tensord a = softmax(x, 1);
  for (auto& v : x.storage()) v += 123.25;
  EXPECT_LE(max_abs_diff(a, softmax(x, 1)), 1e-12);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      EXPECT_GT(a[r * 7 + c], 0.0);
      s += a[r * 7 + c];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, NanFails) {
  EXPECT_THROW(softmax(Tensord({2}, std::vector<double>{0.0, std::nan("")}), 0), NumericError);
}

TEST(Backward, SumOfSquares) {
  Rng rng(1);
  Var<double> x(oracle::random_tensor(rng, {6}), true);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.value()[i]);
}

TEST(Backward, Relu) {
  Var<double> x(Tensord({2}, std::vector<double>{1.5, -0.5}), true);
  backward(sum(relu(x)));
  EXPECT_EQ(x.grad()[0], 1.0);
  EXPECT_EQ(x.grad()[1], 0.0);
}

TEST(Backward, NonScalarLossFails) {
  Var<double> x(Tensord({2}, 1.0), true);
  EXPECT_THROW(backward(mul(x, x)), DimensionError);
}

TEST(Backward, SharedSubexpressionVisitedOnce) {
  Var<double> x(Tensord({1}, 3.0), true);
  const Var<double> y = mul(x, x);
  backward(sum(add(y, y)));  // d/dx 2x^2 = 4x
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(NoGradGuard, SkipsGraph) {
  Var<double> x(Tensord({2}, 1.0), true);
  {
    NoGradGuard g;
    EXPECT_FALSE(mul(x, x).requires_grad());
  }
  EXPECT_TRUE(mul(x, x).requires_grad());
}

TEST(FiniteDiff, SumOfSquares) {
  Rng rng(6);
  const double err = finite_diff_check<double>([](const Var<double>& x) { return sum(mul(x, x)); },
                                               oracle::random_tensor(rng, {10}), 1e-5);
  EXPECT_LT(err, 1e-7);
}

TEST(FiniteDiff, ConstantFunction) {
  Rng rng(6);
  const double err = finite_diff_check<double>(
      [](const Var<double>&) { return Var<double>(Tensord({1}, 4.0)); }, oracle::random_tensor(rng, {5}), 1e-5);
  EXPECT_EQ(err, 0.0);
}

TEST(FiniteDiff, NonFiniteFunctionFails) {
  EXPECT_THROW(finite_diff_check<double>([](const Var<double>&) { return Var<double>(Tensord({1}, std::nan(""))); },
                                         Tensord({2}, 1.0), 1e-5),
               NumericError);
}

// Composite graphs: every op of the model checked against central differences.
class OpGradient : public ::testing::Test {
 protected:
  Rng rng{21};
  double check(const std::function<Var<double>(const Var<double>&)>& f, panokit::Shape s) {
    return finite_diff_check<double>(f, oracle::random_tensor(rng, std::move(s)), 1e-5);
  }
};

TEST_F(OpGradient, ConvDenseSoftmax) {
  const Var<double> K(oracle::random_tensor(rng, {2, 3, 3, 3}), true), b(oracle::random_tensor(rng, {2}), true);
  const Var<double> W(oracle::random_tensor(rng, {4, 2}), true), c(oracle::random_tensor(rng, {4}), true);
  const Tensord target = oracle::random_tensor(rng, {24, 4});
  auto f = [&](const Var<double>& x) {
    const Var<double> y = conv2d_same(x, K, b, HorizontalPad::Wrap);
    const Var<double> p = softmax(dense(map_to_tokens(y), W, c), 1);
    return sum(mul(p, Var<double>(target)));
  };
  EXPECT_LT(check(f, {3, 4, 6}), 1e-6);
}

TEST_F(OpGradient, ConvKernelAndStride) {
  const Tensord x = oracle::random_tensor(rng, {2, 6, 8});
  for (auto mode : {HorizontalPad::Wrap, HorizontalPad::Zero}) {
    auto f = [&](const Var<double>& k) {
      const Var<double> y = conv2d_same(Var<double>(x), k, Var<double>(Tensord({3})), mode, 2);
      return sum(mul(y, y));
    };
    EXPECT_LT(check(f, {3, 2, 3, 3}), 1e-6);
    auto g = [&](const Var<double>& xin) {
      const Var<double> kk(Tensord({3, 2, 5, 5}, 0.1));
      const Var<double> y = conv2d_same(xin, kk, Var<double>(Tensord({3})), mode, 2);
      return sum(mul(y, y));
    };
    EXPECT_LT(check(g, {2, 6, 8}), 1e-6);
  }
}

TEST_F(OpGradient, TransposedConvAndUpsample) {
  const Var<double> K(oracle::random_tensor(rng, {2, 3, 2, 2}), true), b(oracle::random_tensor(rng, {3}), true);
  const Tensord t = oracle::random_tensor(rng, {3, 16, 24});
  for (bool wrap : {true, false}) {
    auto f = [&](const Var<double>& x) {
      return sum(mul(upsample_bilinear(conv_transpose2x2(x, K, b), 2, wrap), Var<double>(t)));
    };
    EXPECT_LT(check(f, {2, 4, 6}), 1e-6);
  }
}

TEST_F(OpGradient, ElementwiseAndStructural) {
  const Tensord t = oracle::random_tensor(rng, {3, 4});
  auto f = [&](const Var<double>& x) {
    const Var<double> a = sigmoid(x), r = relu(sub(x, scale(x, 0.3)));
    const Var<double> cat = concat<double>({a, r, transpose(transpose(x))}, 0);
    const Var<double> s = slice(cat, 0, 2, 7);
    const Var<double> bc = broadcast_rows(reshape(slice(x, 0, 0, 1), {4}), 5);
    return add(mean(mul(s, bc)), sum(mul(add_scalar(a, 1.0), Var<double>(t))));
  };
  EXPECT_LT(check(f, {3, 4}), 1e-6);
}

TEST_F(OpGradient, ChannelAffineAndMatmul) {
  const Tensord m = oracle::random_tensor(rng, {2, 3, 4});
  const Var<double> beta(oracle::random_tensor(rng, {2}), true);
  auto f = [&](const Var<double>& g) {
    const Var<double> y = channel_affine(Var<double>(m), g, beta);
    const Var<double> t = map_to_tokens(y);  // [12, 2]
    return sum(mul(matmul_nt(t, t), matmul(t, transpose(t))));
  };
  EXPECT_LT(check(f, {2}), 1e-6);
}
