#include <gtest/gtest.h>

#include <cmath>

#include "toa/gradcheck.hpp"
#include "toa/tensor.hpp"

using namespace toa;
using Td = Tensor<double>;

namespace {

// Naive loop oracles, independent of the GEMM-backed kernels.
std::vector<double> naive_conv(const Td& x, const Td& k, std::size_t stride, std::size_t pad) {
  const auto B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const auto O = k.size(0), KH = k.size(2), KW = k.size(3);
  const auto OH = (H + 2 * pad - KH) / stride + 1, OW = (W + 2 * pad - KW) / stride + 1;
  std::vector<double> out(B * O * OH * OW, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t oy = 0; oy < OH; ++oy)
        for (std::size_t ox = 0; ox < OW; ++ox) {
          double acc = 0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < KH; ++i)
              for (std::size_t j = 0; j < KW; ++j) {
                const long iy = long(oy * stride + i) - long(pad), ix = long(ox * stride + j) - long(pad);
                if (iy < 0 || ix < 0 || iy >= long(H) || ix >= long(W)) continue;
                acc += x[((b * C + c) * H + iy) * W + ix] * k[((o * C + c) * KH + i) * KW + j];
              }
          out[((b * O + o) * OH + oy) * OW + ox] = acc;
        }
  return out;
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Td eye({2, 2}, {1, 0, 0, 1});
  Td m({2, 2}, {3.5, -1, 2, 7});
  EXPECT_EQ(matmul(eye, m).to_vector(), m.to_vector());
}

TEST(Matmul, HandArithmetic) {
  Td a({2, 2}, {1, 2, 3, 4});
  Td b({2, 1}, {5, 6});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.to_vector(), (std::vector<double>{17, 39}));
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Rng rng(1);
  auto a = randn<double>({3, 4}, rng).set_requires_grad(true);
  auto b = randn<double>({4, 2}, rng);
  sum(matmul(a, b)).backward();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(a.grad()[i * 4 + j], b[j * 2] + b[j * 2 + 1], 1e-12);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Td a({2, 3}), b({2, 3});
  try {
    matmul(a, b);
    FAIL();
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
  }
}

TEST(Matmul, BatchedBroadcastMatchesPerBatchProducts) {
  Rng rng(2);
  auto a = randn<double>({3, 2, 4}, rng);
  auto b = randn<double>({1, 4, 5}, rng);
  auto c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < 4; ++k) acc += a[(n * 2 + i) * 4 + k] * b[k * 5 + j];
        EXPECT_NEAR(c[(n * 2 + i) * 5 + j], acc, 1e-12);
      }
}

TEST(Softmax, UniformForEqualLogits) {
  auto y = softmax(Td({3}, {0, 0, 0}));
  for (double v : y.data()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, StableForLargeLogits) {
  auto y = softmax(Td({3}, {1000, 0, 0}));
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
}

TEST(Softmax, MatchesDirectEvaluation) {
  // exp(k) / (e + e^2 + e^3), evaluated in long double.
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  auto y = softmax(Td({3}, {1, 2, 3}));
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(y[k], double(std::exp(k + 1.0L) / z), 1e-12);
  EXPECT_NEAR(y[0], 0.0900, 1e-4);
  EXPECT_NEAR(y[1], 0.2447, 1e-4);
  EXPECT_NEAR(y[2], 0.6652, 1e-4);
}

TEST(Softmax, RowsSumToOneAndStayInOpenUnitInterval) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = randn<double>({4, 7, 3}, rng, 5.0);
    for (std::ptrdiff_t axis = 0; axis < 3; ++axis) {
      auto y = softmax(x, axis);
      std::size_t outer, extent, inner;
      detail::split_axis(y.shape(), std::size_t(axis), outer, extent, inner);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          double s = 0;
          for (std::size_t k = 0; k < extent; ++k) {
            const double v = y[o * extent * inner + k * inner + i];
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
            s += v;
          }
          EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
  }
}

TEST(Attention, ZeroValuesGiveZeroOutput) {
  Rng rng(4);
  auto q = randn<double>({1, 2, 3, 4}, rng), k = randn<double>({1, 2, 5, 4}, rng);
  auto out = scaled_dot_attention(q, k, Td({1, 2, 5, 4}));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(Attention, SingleKeyReturnsItsValue) {
  Rng rng(5);
  auto q = randn<double>({2, 1, 3, 4}, rng), k = randn<double>({2, 1, 1, 4}, rng), v = randn<double>({2, 1, 1, 4}, rng);
  auto out = scaled_dot_attention(q, k, v);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t d = 0; d < 4; ++d) EXPECT_NEAR(out[(b * 3 + s) * 4 + d], v[b * 4 + d], 1e-15);
}

TEST(Attention, MatchesTripleLoop) {
  Td q({1, 1, 2, 2}, {0.3, -1.2, 0.7, 0.4});
  Td k({1, 1, 2, 2}, {1.1, 0.2, -0.5, 0.9});
  Td v({1, 1, 2, 2}, {2.0, -1.0, 0.5, 3.0});
  auto out = scaled_dot_attention(q, k, v);
  const double sc = 1.0 / std::sqrt(2.0);
  for (int i = 0; i < 2; ++i) {
    double w[2], z = 0;
    for (int j = 0; j < 2; ++j) {
      double dot = 0;
      for (int d = 0; d < 2; ++d) dot += q[i * 2 + d] * k[j * 2 + d];
      w[j] = std::exp(dot * sc);
      z += w[j];
    }
    for (int d = 0; d < 2; ++d) {
      double acc = 0;
      for (int j = 0; j < 2; ++j) acc += w[j] / z * v[j * 2 + d];
      EXPECT_NEAR(out[i * 2 + d], acc, 1e-15);
    }
  }
}

TEST(Attention, MismatchedHeadDimIsDimensionError) {
  EXPECT_THROW(scaled_dot_attention(Td({1, 1, 2, 3}), Td({1, 1, 2, 4}), Td({1, 1, 2, 4})), DimensionError);
}

TEST(Conv2d, OneByOneIdentityKernel) {
  Rng rng(6);
  auto x = randn<double>({2, 3, 4, 5}, rng);
  Td k({3, 3, 1, 1});
  for (std::size_t c = 0; c < 3; ++c) k.mutable_data()[c * 3 + c] = 1.0;
  EXPECT_EQ(conv2d(x, k).to_vector(), x.to_vector());
}

TEST(Conv2d, OnesKernelOnConstantField) {
  Td x({1, 1, 5, 5}, 2.5);
  Td k({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, k, 1, 1);
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t c = 1; c < 4; ++c) EXPECT_EQ(y[r * 5 + c], 9 * 2.5);
  EXPECT_EQ(y[0], 4 * 2.5);  // corner sees four in-bounds taps
}

TEST(Conv2d, MatchesNestedLoops) {
  Rng rng(7);
  for (std::size_t stride : {1u, 2u}) {
    auto x = randn<double>({2, 3, 4, 4}, rng);
    auto k = randn<double>({5, 3, 3, 3}, rng);
    auto y = conv2d(x, k, stride, 1);
    auto ref = naive_conv(x, k, stride, 1);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, NonIntegralOutputIsConfigError) {
  EXPECT_THROW(conv2d(Td({1, 1, 4, 4}), Td({1, 1, 3, 3}), 2, 0), ConfigError);
  EXPECT_THROW(conv2d(Td({1, 1, 4, 4}), Td({1, 1, 2, 2}), 1, 0), ConfigError);
}

TEST(Backward, SumGivesOnes) {
  Td x({2, 3}, 0.7, true);
  sum(x).backward();
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwoX) {
  Rng rng(8);
  auto x = randn<double>({4}, rng).set_requires_grad(true);
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2 * x[i]);
}

TEST(Backward, GradientsAccumulateUntilZeroed) {
  Td x({3}, 1.0, true);
  sum(x).backward();
  sum(x).backward();
  EXPECT_EQ(x.grad()[0], 2.0);
  x.zero_grad();
  EXPECT_EQ(x.grad()[0], 0.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Td x({3}, 1.0, true);
  EXPECT_THROW(scale(x, 2.0).backward(), ContractError);
  Tape<double>::active().clear();
}

TEST(Backward, TapeRunsInReverseOrder) {
  Td x({1}, 3.0, true);
  auto y = mul(x, x);
  auto z = mul(y, x);
  EXPECT_EQ(Tape<double>::active().size(), 2u);
  z.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 27.0);  // d(x^3)/dx
  EXPECT_EQ(Tape<double>::active().size(), 0u);
}

TEST(NumericGuard, NonFiniteResultThrows) {
  Td x({2}, {1e300, 1.0});
  EXPECT_THROW(mul(x, x), NumericError);
}

TEST(FiniteDifference, SumGivesOnes) {
  Rng rng(9);
  auto x = randn<double>({5}, rng);
  auto g = finite_difference_gradient<double>([](const Td& t) { return sum(t); }, x, 1e-5);
  for (double v : g.data()) EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(FiniteDifference, SumOfSquaresAnalytic) {
  auto g = finite_difference_gradient<double>([](const Td& t) { return sum(mul(t, t)); }, Td({2}, {1, 2}), 1e-5);
  EXPECT_NEAR(g[0], 2.0, 1e-8);
  EXPECT_NEAR(g[1], 4.0, 1e-8);
}

TEST(FiniteDifference, AgreesWithBackwardOnEveryOp) {
  for (const auto& r : run_op_gradient_suite(2024, 10)) {
    EXPECT_TRUE(r.passed) << r.name << " rel err " << r.rel_error;
  }
}

TEST(Purity, RepeatedForwardIsBitIdentical) {
  Rng rng(10);
  auto x = randn<double>({2, 3, 6, 6}, rng);
  auto k = randn<double>({4, 3, 3, 3}, rng);
  auto run = [&] { return softmax(layer_norm(silu(conv2d(x, k, 1, 1))), 1).to_vector(); };
  EXPECT_EQ(run(), run());
}
