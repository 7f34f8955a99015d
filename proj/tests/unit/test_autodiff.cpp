#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "toan/autodiff/ops.hpp"
#include "toan/autodiff/tape.hpp"
#include "toan/error.hpp"

namespace toan {
namespace {

using ad::Tensor;
using test::max_grad_error;
using test::probe;
using test::random_tensor;

const Tensor<double>* const kNoBias = nullptr;
const Tensor<float>* const kNoBiasF = nullptr;

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected toan::Error";
  return ErrorCode::kIoError;
}

TEST(Tensor, RejectsWrongValueCount) {
  EXPECT_EQ(code_of([] { Tensor<float>({2, 2}, {1, 2, 3}); }), ErrorCode::kShapeMismatch);
  EXPECT_EQ(Tensor<double>::scalar(3.0).item(), 3.0);
  EXPECT_EQ(Tensor<double>::scalar(3.0).rank(), 0u);
}

TEST(Tape, BackwardTwiceIsTapeReuse) {
  ad::Tape<double> tape;
  auto x = tape.watch(Tensor<double>::scalar(2.0));
  auto y = ad::hadamard(x, x);
  const auto g = tape.backward(y);
  EXPECT_DOUBLE_EQ(g.at(x).item(), 4.0);
  EXPECT_EQ(code_of([&] { tape.backward(y); }), ErrorCode::kTapeReuse);
  EXPECT_EQ(code_of([&] { ad::add(x, x); }), ErrorCode::kTapeReuse);
}

TEST(Tape, NonScalarLossRejected) {
  ad::Tape<double> tape;
  auto x = tape.watch(Tensor<double>::ones({3}));
  EXPECT_EQ(code_of([&] { tape.backward(ad::scale(x, 2.0)); }), ErrorCode::kNonScalarLoss);
}

TEST(Tape, LossFromAnotherTapeRejected) {
  ad::Tape<double> outer;
  auto x = outer.watch(Tensor<double>::scalar(1.0));
  auto loss = ad::scale(x, 3.0);
  ad::Tape<double> inner;
  EXPECT_EQ(code_of([&] { inner.backward(loss); }), ErrorCode::kTapeReuse);
  EXPECT_EQ(outer.backward(loss).at(x).item(), 3.0);
}

TEST(Tape, UntrackedOpsAreNotRecorded) {
  ad::Tape<double> tape;
  auto a = Tensor<double>::ones({2, 2});
  auto b = ad::matmul(a, a);
  EXPECT_FALSE(b.requires_grad());
  EXPECT_EQ(tape.node_count(), 0u);
}

TEST(Tape, UnreachableLeafGetsZeroGradient) {
  ad::Tape<double> tape;
  auto x = tape.watch(Tensor<double>::ones({2}));
  auto unused = tape.watch(Tensor<double>::ones({3}));
  const auto g = tape.backward(ad::sum(x));
  EXPECT_EQ(g.at(unused).to_vector(), std::vector<double>(3, 0.0));
}

TEST(Ops, MatmulMatchesTripleLoop) {
  std::mt19937_64 rng(1);
  const auto a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
  const auto c = ad::matmul(a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 7; ++k) acc += a[i * 7 + k] * b[k * 3 + j];
      EXPECT_NEAR(c[i * 3 + j], acc, 1e-12);
    }
}

TEST(Ops, BmmTransposesAndBroadcasts) {
  std::mt19937_64 rng(2);
  const auto a = random_tensor({3, 4, 2}, rng);  // used as a^T: [3, 2, 4]
  const auto b = random_tensor({4, 5}, rng);     // broadcast
  const auto c = ad::bmm(a, b, true, false);
  ASSERT_EQ(c.shape(), (ad::Shape{3, 2, 5}));
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (std::size_t k = 0; k < 4; ++k) acc += a[(n * 4 + k) * 2 + i] * b[k * 5 + j];
        EXPECT_NEAR(c[(n * 2 + i) * 5 + j], acc, 1e-12);
      }
}

TEST(Ops, Conv2dMatchesDirectLoops) {
  std::mt19937_64 rng(3);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1, 2}) {
      const auto x = random_tensor({2, 3, 6, 5}, rng);
      const auto k = random_tensor({4, 3, 3, 3}, rng);
      const auto bias = random_tensor({4}, rng);
      const auto y = ad::conv2d(x, k, &bias, stride, pad);
      const std::size_t oh = (6 + 2 * pad - 3) / stride + 1, ow = (5 + 2 * pad - 3) / stride + 1;
      ASSERT_EQ(y.shape(), (ad::Shape{2, 4, oh, ow}));
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t o = 0; o < 4; ++o)
          for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) {
              double acc = bias[o];
              for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t u = 0; u < 3; ++u)
                  for (std::size_t v = 0; v < 3; ++v) {
                    const long iy = static_cast<long>(i) * stride - pad + static_cast<long>(u);
                    const long ix = static_cast<long>(j) * stride - pad + static_cast<long>(v);
                    if (iy < 0 || ix < 0 || iy >= 6 || ix >= 5) continue;
                    acc += x[((b * 3 + c) * 6 + iy) * 5 + ix] * k[((o * 3 + c) * 3 + u) * 3 + v];
                  }
              EXPECT_NEAR(y[((b * 4 + o) * oh + i) * ow + j], acc, 1e-12)
                  << "stride " << stride << " pad " << pad;
            }
    }
  }
}

TEST(Ops, Conv2dRejectsBadHyperparameters) {
  const auto x = Tensor<double>::ones({1, 1, 4, 4});
  const auto k = Tensor<double>::ones({1, 1, 3, 3});
  EXPECT_EQ(code_of([&] { ad::conv2d(x, k, kNoBias, 0, 0); }),
            ErrorCode::kInvalidHyperparameter);
  EXPECT_EQ(code_of([&] { ad::conv2d(x, k, kNoBias, 1, -1); }),
            ErrorCode::kInvalidHyperparameter);
  EXPECT_EQ(code_of([&] { ad::conv2d(x, Tensor<double>::ones({1, 2, 3, 3}), kNoBias, 1, 0); }),
            ErrorCode::kShapeMismatch);
}

TEST(Ops, MaxPoolMatchesBruteForce) {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({2, 3, 7, 6}, rng);
  const auto y = ad::max_pool2(x);
  ASSERT_EQ(y.shape(), (ad::Shape{2, 3, 3, 3}));
  for (std::size_t p = 0; p < 6; ++p)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double best = -1e300;
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 2; ++v)
            best = std::max(best, x[(p * 7 + 2 * i + u) * 6 + 2 * j + v]);
        EXPECT_EQ(y[(p * 3 + i) * 3 + j], best);
      }
}

TEST(Ops, MaxPoolTieGoesToFirstInScanOrder) {
  ad::Tape<double> tape;
  auto x = tape.watch(Tensor<double>::ones({1, 2, 2}));
  const auto g = tape.backward(ad::sum(ad::max_pool2(x)));
  EXPECT_EQ(g.at(x).to_vector(), (std::vector<double>{1, 0, 0, 0}));
}

TEST(Ops, SoftmaxRowsAreStochasticAndShiftInvariant) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({4, 9}, rng, -30, 30);
  const auto s = ad::softmax_rows(x);
  const auto shifted = ad::softmax_rows(ad::add(x, Tensor<double>::full({4, 9}, 500.0)));
  for (std::size_t r = 0; r < 4; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      EXPECT_GE(s[r * 9 + c], 0.0);
      EXPECT_NEAR(s[r * 9 + c], shifted[r * 9 + c], 1e-12);
      total += s[r * 9 + c];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Ops, BatchNormTrainModeNormalisesAndUpdatesRunningStats) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor({4, 2, 3}, rng, 2, 5);
  ad::BatchNormState<double> state(2);
  const auto y = ad::batch_norm(x, Tensor<double>::ones({2}), Tensor<double>::zeros({2}), state,
                                ad::Mode::kTrain);
  for (std::size_t c = 0; c < 2; ++c) {
    double m = 0, sq = 0, xm = 0, xsq = 0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 3; ++i) {
        const double v = y[(b * 2 + c) * 3 + i], xv = x[(b * 2 + c) * 3 + i];
        m += v;
        sq += v * v;
        xm += xv;
        xsq += xv * xv;
      }
    EXPECT_NEAR(m / 12, 0.0, 1e-12);
    EXPECT_NEAR(sq / 12, 1.0, 1e-3);
    xm /= 12;
    const double unbiased = (xsq / 12 - xm * xm) * 12 / 11;
    EXPECT_NEAR(state.running_mean[c], 0.1 * xm, 1e-12);
    EXPECT_NEAR(state.running_var[c], 0.9 + 0.1 * unbiased, 1e-12);
  }
  const auto eval = ad::batch_norm(x, Tensor<double>::ones({2}), Tensor<double>::zeros({2}), state,
                                   ad::Mode::kEval);
  EXPECT_NEAR(eval[0], (x[0] - state.running_mean[0]) / std::sqrt(state.running_var[0] + 1e-5),
              1e-12);
}

TEST(Ops, NonFiniteResultIsReported) {
  const auto x = Tensor<double>({2}, {1.0, std::numeric_limits<double>::infinity()});
  EXPECT_EQ(code_of([&] { ad::sub(x, x); }), ErrorCode::kNonFiniteResult);
}

TEST(Ops, ShapeMismatchIsReported) {
  EXPECT_EQ(code_of([] { ad::add(Tensor<double>::ones({2}), Tensor<double>::ones({3})); }),
            ErrorCode::kShapeMismatch);
  EXPECT_EQ(code_of([] { ad::matmul(Tensor<double>::ones({2, 3}), Tensor<double>::ones({2, 3})); }),
            ErrorCode::kShapeMismatch);
}

TEST(Ops, MacCounterCountsMatmul) {
  ad::reset_mac_count();
  ad::matmul(Tensor<double>::ones({3, 4}), Tensor<double>::ones({4, 5}));
  EXPECT_EQ(ad::mac_count(), 60u);
}

// ---- finite-difference checks of every differentiable op -----------------

class GradCheck : public ::testing::Test {
 protected:
  std::mt19937_64 rng{7};
  static constexpr double kTol = 1e-6;
};

TEST_F(GradCheck, Matmul) {
  EXPECT_LT(max_grad_error([](const auto& v) { return probe(ad::matmul(v[0], v[1])); },
                           {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}),
            kTol);
}

TEST_F(GradCheck, BmmAllTransposes) {
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      const auto a = ta ? random_tensor({2, 4, 3}, rng) : random_tensor({2, 3, 4}, rng);
      const auto b = tb ? random_tensor({1, 5, 4}, rng) : random_tensor({1, 4, 5}, rng);
      EXPECT_LT(max_grad_error([=](const auto& v) { return probe(ad::bmm(v[0], v[1], ta, tb)); },
                               {a, b}),
                kTol);
    }
}

TEST_F(GradCheck, BmmGatherRepeatsIndices) {
  const std::vector<std::size_t> ai{0, 1, 1, 0}, bi{2, 0, 1, 2};
  EXPECT_LT(max_grad_error(
                [&](const auto& v) {
                  return probe(ad::bmm_gather(v[0], std::span<const std::size_t>(ai), v[1],
                                              std::span<const std::size_t>(bi), false, true));
                },
                {random_tensor({2, 3, 4}, rng), random_tensor({3, 5, 4}, rng)}),
            kTol);
}

TEST_F(GradCheck, Elementwise) {
  const auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  EXPECT_LT(max_grad_error([](const auto& v) { return probe(ad::add(v[0], v[1])); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](const auto& v) { return probe(ad::sub(v[0], v[1])); }, {a, b}), kTol);
  EXPECT_LT(max_grad_error([](const auto& v) { return probe(ad::hadamard(v[0], v[1])); }, {a, b}),
            kTol);
  EXPECT_LT(max_grad_error([](const auto& v) { return probe(ad::scale(v[0], 0.3)); }, {a}), kTol);
}

TEST_F(GradCheck, ChannelBias) {
  EXPECT_LT(max_grad_error([](const auto& v) { return probe(ad::add_channel_bias(v[0], v[1])); },
                           {random_tensor({2, 3, 4}, rng), random_tensor({3}, rng)}),
            kTol);
}

TEST_F(GradCheck, Activations) {
  // keep inputs away from the ReLU kink
  auto x = random_tensor({20}, rng, 0.05, 1.0);
  std::vector<double> v = x.to_vector();
  for (std::size_t i = 0; i < v.size(); i += 2) v[i] = -v[i];
  x = Tensor<double>({20}, v);
  for (auto act : {ad::Activation::kRelu, ad::Activation::kLeakyRelu, ad::Activation::kSigmoid}) {
    EXPECT_LT(max_grad_error([act](const auto& a) { return probe(ad::activation(a[0], act)); }, {x}),
              kTol);
  }
}

TEST_F(GradCheck, Conv2dWithBiasStrideAndPadding) {
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      const auto bias = random_tensor({3}, rng);
      EXPECT_LT(
          max_grad_error(
              [=](const auto& v) { return probe(ad::conv2d(v[0], v[1], &v[2], stride, pad)); },
              {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), bias}),
          kTol);
    }
}

TEST_F(GradCheck, BatchNormTrainMode) {
  EXPECT_LT(max_grad_error(
                [](const auto& v) {
                  ad::BatchNormState<double> state(3);
                  return probe(ad::batch_norm(v[0], v[1], v[2], state, ad::Mode::kTrain));
                },
                {random_tensor({4, 3, 5}, rng), random_tensor({3}, rng), random_tensor({3}, rng)}),
            1e-5);
}

TEST_F(GradCheck, BatchNormEvalMode) {
  ad::BatchNormState<double> state(3);
  state.running_mean = {0.1, -0.2, 0.3};
  state.running_var = {0.5, 1.5, 2.0};
  EXPECT_LT(max_grad_error(
                [&](const auto& v) {
                  return probe(ad::batch_norm(v[0], v[1], v[2], state, ad::Mode::kEval));
                },
                {random_tensor({2, 3, 4}, rng), random_tensor({3}, rng), random_tensor({3}, rng)}),
            kTol);
}

TEST_F(GradCheck, MaxPool) {
  EXPECT_LT(max_grad_error([](const auto& v) { return probe(ad::max_pool2(v[0])); },
                           {random_tensor({2, 2, 5, 4}, rng)}),
            kTol);
}

TEST_F(GradCheck, SoftmaxRows) {
  EXPECT_LT(max_grad_error([](const auto& v) { return probe(ad::softmax_rows(v[0])); },
                           {random_tensor({2, 3, 6}, rng, -3, 3)}),
            kTol);
}

TEST_F(GradCheck, ShapeOps) {
  const auto x = random_tensor({4, 3, 2}, rng);
  EXPECT_LT(max_grad_error([](const auto& v) { return probe(ad::reshape(v[0], {6, 4})); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](const auto& v) { return probe(ad::slice(v[0], 1, 1, 3)); }, {x}), kTol);
  EXPECT_LT(max_grad_error(
                [](const auto& v) { return probe(ad::concat(std::vector{v[0], v[1], v[0]}, 1)); },
                {x, random_tensor({4, 1, 2}, rng)}),
            kTol);
  const std::vector<std::size_t> idx{3, 0, 3, 1};
  EXPECT_LT(max_grad_error(
                [&](const auto& v) { return probe(ad::gather(v[0], std::span<const std::size_t>(idx))); },
                {x}),
            kTol);
}

TEST_F(GradCheck, Reductions) {
  const auto x = random_tensor({3, 4, 2}, rng);
  EXPECT_LT(max_grad_error([](const auto& v) { return ad::sum(v[0]); }, {x}), kTol);
  EXPECT_LT(max_grad_error([](const auto& v) { return ad::mean(v[0]); }, {x}), kTol);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    EXPECT_LT(max_grad_error([axis](const auto& v) { return probe(ad::sum_axis(v[0], axis)); }, {x}),
              kTol);
    EXPECT_LT(max_grad_error([axis](const auto& v) { return probe(ad::mean_axis(v[0], axis)); }, {x}),
              kTol);
  }
}

TEST(Ops, FloatAndDoubleAgree) {
  std::mt19937_64 rng(8);
  const auto x = random_tensor({2, 3, 6, 6}, rng);
  const auto k = random_tensor({4, 3, 3, 3}, rng);
  const auto yd = ad::conv2d(x, k, kNoBias, 1, 1);
  const auto yf = ad::conv2d(x.cast<float>(), k.cast<float>(), kNoBiasF, 1, 1);
  for (std::size_t i = 0; i < yd.size(); ++i) EXPECT_NEAR(yf[i], yd[i], 1e-5);
}

}  // namespace
}  // namespace toan
