// Copyright 2026 The DropGraph Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>

#include "dropgraph/errors.hpp"
#include "dropgraph/grad_check.hpp"
#include "dropgraph/kernels.hpp"
#include "dropgraph/nn.hpp"
#include "test_util.hpp"

namespace dropgraph {
namespace {

using test::random_tensor;
using test::values;

// Direct sliding-window sum over (n, c_out, y, x, c_in, ky, kx).
std::vector<double> naive_conv(const Tensor& x, const ConvParams& p) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = p.kernel.dim(0), k = p.kernel.dim(2);
  const std::size_t oh = (h + 2 * p.padding - k) / p.stride + 1;
  const std::size_t ow = (w + 2 * p.padding - k) / p.stride + 1;
  std::vector<double> out(n * co * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          long double s = p.bias.defined() ? p.bias.values()[o] : 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(oy * p.stride + ky) - static_cast<long>(p.padding);
                const long ix = static_cast<long>(ox * p.stride + kx) - static_cast<long>(p.padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                s += static_cast<long double>(x.values()[((b * ci + c) * h + iy) * w + ix]) *
                     p.kernel.values()[((o * ci + c) * k + ky) * k + kx];
              }
          out[((b * co + o) * oh + oy) * ow + ox] = static_cast<double>(s);
        }
  return out;
}

ConvParams make_conv(std::size_t ci, std::size_t co, std::size_t k, std::size_t stride,
                     std::size_t pad, RngStream& rng, bool grad = false) {
  ConvParams p;
  p.kernel = random_tensor({co, ci, k, k}, rng, 1.0, grad);
  p.bias = random_tensor({co}, rng, 1.0, grad);
  p.stride = stride;
  p.padding = pad;
  return p;
}

TEST(Conv2d, OneByOneIdentityKernelIsIdentity) {
  RngStream rng(1);
  const Tensor x = random_tensor({2, 3, 4, 5}, rng);
  ConvParams p;
  std::vector<double> eye(9, 0.0);
  for (std::size_t c = 0; c < 3; ++c) eye[c * 3 + c] = 1.0;
  p.kernel = Tensor::from({3, 3, 1, 1}, eye);
  p.bias = Tensor::zeros({3});
  EXPECT_EQ(values(conv2d(x, p)), values(x));
}

TEST(Conv2d, ZeroKernelGivesBroadcastBias) {
  RngStream rng(2);
  const Tensor x = random_tensor({1, 2, 5, 5}, rng);
  ConvParams p;
  p.kernel = Tensor::zeros({3, 2, 3, 3});
  p.bias = Tensor::from({3}, {1.5, -2.0, 0.25});
  p.padding = 1;
  const Tensor y = conv2d(x, p);
  ASSERT_EQ(y.shape(), (Shape{1, 3, 5, 5}));
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(y.values()[o * 25 + i], p.bias.values()[o]);
}

TEST(Conv2d, RampImageMatchesSlidingWindow) {
  std::vector<double> ramp(25);
  for (std::size_t i = 0; i < 25; ++i) ramp[i] = static_cast<double>(i);
  const Tensor x = Tensor::from({1, 1, 5, 5}, ramp);
  ConvParams p;
  p.kernel = Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  p.bias = Tensor::zeros({1});
  const Tensor y = conv2d(x, p);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  EXPECT_EQ(values(y), naive_conv(x, p));
  // Top-left window by hand: sum_k k * ramp.
  EXPECT_EQ(y.values()[0], 1 * 0 + 2 * 1 + 3 * 2 + 4 * 5 + 5 * 6 + 6 * 7 + 7 * 10 + 8 * 11 + 9 * 12);
}

TEST(Conv2d, MatchesNaiveReferenceOnRandomCases) {
  RngStream rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.index(3), ci = 1 + rng.index(4), co = 1 + rng.index(5);
    const std::size_t k = 1 + 2 * rng.index(3), stride = 1 + rng.index(2), pad = rng.index(2);
    const std::size_t h = k + rng.index(6), w = k + rng.index(6);
    const Tensor x = random_tensor({n, ci, h, w}, rng);
    const ConvParams p = make_conv(ci, co, k, stride, pad, rng);
    const auto expect = naive_conv(x, p);
    const Tensor y = conv2d(x, p);
    ASSERT_EQ(y.numel(), expect.size());
    for (std::size_t i = 0; i < expect.size(); ++i) {
      ASSERT_NEAR(y.values()[i], expect[i], 1e-10 * (1.0 + std::abs(expect[i]))) << "trial " << trial;
    }
    // The serial kernel must agree as well.
    std::vector<double> ref(expect.size());
    kernels::reference::conv2d_forward(x.values().data(), n, ci, h, w, p.kernel.values().data(),
                                       p.bias.values().data(), co, k, stride, pad, ref.data());
    for (std::size_t i = 0; i < expect.size(); ++i) {
      ASSERT_NEAR(ref[i], expect[i], 1e-10 * (1.0 + std::abs(expect[i])));
    }
  }
}

TEST(Conv2d, ChannelMismatchIsADimensionError) {
  RngStream rng(4);
  const Tensor x = random_tensor({1, 3, 5, 5}, rng);
  const ConvParams p = make_conv(2, 4, 3, 1, 0, rng);
  EXPECT_THROW(conv2d(x, p), DimensionError);
}

TEST(Conv2d, KernelLargerThanPaddedInputIsRejected) {
  RngStream rng(5);
  const ConvParams p = make_conv(1, 1, 5, 1, 0, rng);
  EXPECT_THROW(conv2d(random_tensor({1, 1, 3, 3}, rng), p), DimensionError);
}

TEST(Conv2d, GradCheckOverInputKernelAndBias) {
  RngStream rng(6);
  const Tensor x = random_tensor({2, 2, 5, 4}, rng, 1.0, true);
  const ConvParams p = make_conv(2, 3, 3, 2, 1, rng, true);
  const Tensor w = random_tensor({2, 3, 3, 2}, rng);
  const auto report = grad_check_report([&] { return sum(mul(conv2d(x, p), w)); },
                                        {x, p.kernel, p.bias});
  EXPECT_LE(report.max_relative_error, 1e-5);
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  const Tensor logits = Tensor::zeros({3, 4});
  const std::vector<std::size_t> labels{0, 1, 3};
  EXPECT_NEAR(cross_entropy(logits, labels).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginDrivesLossToZero) {
  const std::vector<std::size_t> labels{1};
  double previous = INFINITY;
  for (double margin : {1.0, 10.0, 40.0}) {
    const double loss = cross_entropy(Tensor::from({1, 3}, {0, margin, 0}), labels).item();
    EXPECT_GE(loss, 0.0);
    EXPECT_LT(loss, previous);
    previous = loss;
  }
  EXPECT_LT(previous, 1e-15);
}

TEST(CrossEntropy, MatchesHighPrecisionEvaluation) {
  const std::vector<std::size_t> labels{2};
  const double loss = cross_entropy(Tensor::from({1, 3}, {1, 2, 3}), labels).item();
  const long double z = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  EXPECT_NEAR(loss, static_cast<double>(-std::log(std::exp(3.0L) / z)), 1e-15);
}

TEST(CrossEntropy, OutOfRangeLabelIsAContractError) {
  const std::vector<std::size_t> labels{3};
  EXPECT_THROW(cross_entropy(Tensor::zeros({1, 3}), labels), ContractError);
}

TEST(CrossEntropy, NonnegativeAndGradChecked) {
  RngStream rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor logits = random_tensor({4, 5}, rng, 3.0, true);
    std::vector<std::size_t> labels(4);
    for (auto& l : labels) l = rng.index(5);
    EXPECT_GE(cross_entropy(logits, labels).item(), 0.0);
    EXPECT_LE(grad_check([&] { return cross_entropy(logits, labels); }, logits), 1e-5);
  }
}

TEST(GlobalAvgPool, ConstantMapGivesConstant) {
  const Tensor y = global_avg_pool(Tensor::full({2, 3, 4, 4}, 1.75));
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (double v : y.values()) EXPECT_EQ(v, 1.75);
}

TEST(GlobalAvgPool, TwoByTwoMean) {
  EXPECT_EQ(global_avg_pool(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4})).item(), 2.5);
}

TEST(GlobalAvgPool, MatchesSummationOracle) {
  RngStream rng(8);
  const Tensor x = random_tensor({3, 4, 5, 6}, rng);
  const Tensor y = global_avg_pool(x);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t c = 0; c < 4; ++c) {
      long double s = 0.0L;
      for (std::size_t i = 0; i < 30; ++i) s += x.values()[(b * 4 + c) * 30 + i];
      EXPECT_NEAR(y.values()[b * 4 + c], static_cast<double>(s / 30), 1e-14);
    }
}

TEST(BatchNorm, TrainModeNormalizesAndUpdatesRunningStats) {
  RngStream rng(9);
  const Tensor x = random_tensor({4, 2, 3, 3}, rng, 2.0);
  NormState st = NormState::make(2);
  const Tensor y = batch_norm2d(x, st, Mode::kTrain);
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0.0, ss = 0.0, xs = 0.0, xss = 0.0;
    for (std::size_t b = 0; b < 4; ++b)
      for (std::size_t i = 0; i < 9; ++i) {
        const std::size_t idx = (b * 2 + c) * 9 + i;
        s += y.values()[idx];
        ss += y.values()[idx] * y.values()[idx];
        xs += x.values()[idx];
        xss += x.values()[idx] * x.values()[idx];
      }
    EXPECT_NEAR(s / 36, 0.0, 1e-12);
    EXPECT_NEAR(ss / 36, 1.0, 1e-3);  // eps in the denominator
    const double mu = xs / 36, var_unbiased = (xss / 36 - mu * mu) * 36 / 35;
    EXPECT_NEAR(st.running_mean.values()[c], 0.1 * mu, 1e-12);
    // The running variance tracks the unbiased estimate.
    EXPECT_NEAR(st.running_var.values()[c], 0.9 + 0.1 * var_unbiased, 1e-12);
  }
}

TEST(BatchNorm, EvalModeIsAffineAndDoesNotMutate) {
  RngStream rng(10);
  NormState st = NormState::make(3);
  for (int i = 0; i < 3; ++i) batch_norm2d(random_tensor({4, 3, 2, 2}, rng, 3.0), st, Mode::kTrain);
  const auto mean_before = values(st.running_mean), var_before = values(st.running_var);
  const Tensor a = random_tensor({2, 3, 2, 2}, rng), b = random_tensor({2, 3, 2, 2}, rng);
  const Tensor ya = batch_norm2d(a, st, Mode::kEval);
  const Tensor ya2 = batch_norm2d(a, st, Mode::kEval);
  EXPECT_TRUE(test::bit_equal(ya, ya2));
  EXPECT_EQ(values(st.running_mean), mean_before);
  EXPECT_EQ(values(st.running_var), var_before);
  // f(t a + (1 - t) b) = t f(a) + (1 - t) f(b) for an affine f.
  const double t = 0.3;
  const Tensor mix = add(affine(a, t, 0.0), affine(b, 1.0 - t, 0.0));
  const Tensor lhs = batch_norm2d(mix, st, Mode::kEval);
  const Tensor yb = batch_norm2d(b, st, Mode::kEval);
  for (std::size_t i = 0; i < lhs.numel(); ++i) {
    EXPECT_NEAR(lhs.values()[i], t * ya.values()[i] + (1 - t) * yb.values()[i], 1e-12);
  }
}

TEST(BatchNorm, GradCheckInBothModes) {
  RngStream rng(11);
  const Tensor x = random_tensor({3, 2, 3, 2}, rng, 1.0, true);
  const Tensor w = random_tensor({3, 2, 3, 2}, rng);
  NormState st = NormState::make(2);
  for (std::size_t c = 0; c < 2; ++c) {
    st.gamma.mutable_values()[c] = 1.0 + 0.5 * rng.normal();
    st.beta.mutable_values()[c] = rng.normal();
  }
  // Train mode updates running stats on every call; the output does not read them.
  auto train = [&] { return sum(mul(batch_norm2d(x, st, Mode::kTrain), w)); };
  EXPECT_LE(grad_check_report(train, {x, st.gamma, st.beta}).max_relative_error, 1e-5);
  auto eval = [&] { return sum(mul(batch_norm2d(x, st, Mode::kEval), w)); };
  EXPECT_LE(grad_check_report(eval, {x, st.gamma, st.beta}).max_relative_error, 1e-5);
}

TEST(Linear, ComputesAffineMapAndGradChecks) {
  RngStream rng(12);
  LinearParams p = LinearParams::make(3, 2, rng.child(0));
  const Tensor x = random_tensor({4, 3}, rng, 1.0, true);
  const Tensor y = linear(x, p);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = p.bias.values()[j];
      for (std::size_t k = 0; k < 3; ++k) s += x.values()[i * 3 + k] * p.weight.values()[k * 2 + j];
      EXPECT_NEAR(y.values()[i * 2 + j], s, 1e-14);
    }
  EXPECT_LE(grad_check_report([&] { return sum(mul(linear(x, p), linear(x, p))); },
                              {x, p.weight, p.bias})
                .max_relative_error,
            1e-5);
}

TEST(Init, KaimingNormalHasFanInVariance) {
  Tensor t = Tensor::zeros({200, 50, 3, 3});
  kaiming_normal(t, 450, RngStream(13));
  double s = 0.0, ss = 0.0;
  for (double v : t.values()) {
    s += v;
    ss += v * v;
  }
  const double n = static_cast<double>(t.numel());
  EXPECT_NEAR(s / n, 0.0, 0.002);
  EXPECT_NEAR(ss / n, 2.0 / 450, 0.02 * 2.0 / 450);
}

TEST(NodeMaps, RoundTrip) {
  RngStream rng(14);
  const Tensor h = random_tensor({7, 4}, rng);
  const Tensor m = nodes_to_feature_map(h);
  EXPECT_EQ(m.shape(), (Shape{1, 4, 7, 1}));
  EXPECT_EQ(m.at({0, 2, 5, 0}), h.at({5, 2}));
  EXPECT_EQ(values(feature_map_to_nodes(m)), values(h));
}

}  // namespace
}  // namespace dropgraph
