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

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "dropgraph/errors.hpp"
#include "dropgraph/grad_check.hpp"
#include "dropgraph/regularizers.hpp"
#include "test_util.hpp"

namespace dropgraph {
namespace {

using test::bit_equal;
using test::random_tensor;
using test::values;

double zero_fraction(const Tensor& t) {
  std::size_t zeros = 0;
  for (double v : t.values()) zeros += v == 0.0;
  return static_cast<double>(zeros) / static_cast<double>(t.numel());
}

// ---- Dropout ----------------------------------------------------------------------

TEST(Dropout, ZeroRhoAndEvalAreIdentity) {
  RngStream rng(1);
  const Tensor x = random_tensor({4, 5}, rng);
  EXPECT_TRUE(bit_equal(dropout(x, 0.0, rng.child(0), Mode::kTrain), x));
  EXPECT_TRUE(bit_equal(dropout(x, 0.7, rng.child(0), Mode::kEval), x));
}

TEST(Dropout, RhoOfOneIsRejected) {
  EXPECT_THROW(dropout(Tensor::zeros({2}), 1.0, RngStream(0), Mode::kTrain), ContractError);
  EXPECT_THROW(spatial_dropout(Tensor::zeros({1, 1, 2, 2}), 1.2, RngStream(0), Mode::kTrain),
               ContractError);
}

TEST(Dropout, ZeroedFractionMatchesRho) {
  const Tensor x = Tensor::full({1000000}, 1.0);
  const Tensor y = dropout(x, 0.3, RngStream(2), Mode::kTrain);
  EXPECT_NEAR(zero_fraction(y), 0.3, 0.002);
}

TEST(Dropout, UnscaledMeanIsOneMinusRhoTimesX) {
  // Per-coordinate Monte-Carlo mean over 1e5 draws for |x| = 1.
  const std::size_t draws = 100000, dim = 4;
  const Tensor x = Tensor::from({dim}, {1, -1, 1, -1});
  std::vector<double> total(dim, 0.0);
  for (std::size_t d = 0; d < draws; ++d) {
    const Tensor y = dropout(x, 0.25, RngStream(3).child(d), Mode::kTrain);
    for (std::size_t i = 0; i < dim; ++i) total[i] += y.values()[i];
  }
  for (std::size_t i = 0; i < dim; ++i) {
    EXPECT_NEAR(total[i] / draws, 0.75 * x.values()[i], 0.01);
  }
}

TEST(Dropout, RescaleKeepsExpectation) {
  const Tensor x = Tensor::full({200000}, 1.0);
  const Tensor y = dropout(x, 0.4, RngStream(4), Mode::kTrain, true);
  double s = 0.0;
  for (double v : y.values()) {
    EXPECT_TRUE(v == 0.0 || v == 1.0 / 0.6);
    s += v;
  }
  EXPECT_NEAR(s / 200000.0, 1.0, 0.01);
}

TEST(SpatialDropout, DroppedPositionsZeroAllChannels) {
  RngStream rng(5);
  const Tensor x = test::away_from_zero({2, 6, 5, 5}, rng, 0.5, false);
  const Tensor y = spatial_dropout(x, 0.4, rng.child(1), Mode::kTrain);
  std::size_t dropped = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t q = 0; q < 25; ++q) {
      const bool first_zero = y.values()[(b * 6) * 25 + q] == 0.0;
      dropped += first_zero;
      for (std::size_t c = 0; c < 6; ++c) {
        const std::size_t idx = (b * 6 + c) * 25 + q;
        EXPECT_EQ(y.values()[idx] == 0.0, first_zero);
        if (!first_zero) {
          EXPECT_EQ(y.values()[idx], x.values()[idx]);
        }
      }
    }
  EXPECT_GT(dropped, 0u);
  EXPECT_TRUE(bit_equal(spatial_dropout(x, 0.0, rng.child(1), Mode::kTrain), x));
}

TEST(SpatialDropout, PerPositionRateMatchesRho) {
  // 1e5 positions, two channels each.
  const Tensor x = Tensor::full({10, 2, 100, 100}, 1.0);
  const Tensor y = spatial_dropout(x, 0.3, RngStream(6), Mode::kTrain);
  EXPECT_NEAR(zero_fraction(y), 0.3, 0.005);
}

// ---- Block masks ---------------------------------------------------------------------

TEST(BlockMask, ZeroRhoKeepsEverything) {
  const DropMask m = sample_block_mask(3, 8, 8, 3, 0.0, RngStream(7));
  EXPECT_FALSE(m.any_dropped());
  EXPECT_EQ(m.dropped_fraction(), 0.0);
}

TEST(BlockMask, BlockLargerThanMapIsAContractError) {
  EXPECT_THROW(sample_block_mask(1, 4, 6, 5, 0.1, RngStream(8)), ContractError);
}

TEST(BlockMask, SizeOneIsPerPositionBernoulli) {
  EXPECT_DOUBLE_EQ(block_seed_probability(16, 16, 1, 0.2), 0.2);
  EXPECT_DOUBLE_EQ(block_seed_probability_closed_form(16, 16, 1, 0.2), 0.2);
  const DropMask m = sample_block_mask(400, 16, 16, 1, 0.2, RngStream(9));
  EXPECT_NEAR(m.dropped_fraction(), 0.2, 0.005);
}

TEST(BlockMask, GateIsBinaryAndDropsAreUnionsOfFullBlocks) {
  const std::size_t h = 12, w = 10, s = 3;
  const DropMask m = sample_block_mask(20, h, w, s, 0.15, RngStream(10));
  for (std::size_t b = 0; b < 20; ++b) {
    // Every dropped position lies in some fully dropped s x s window.
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double g = m.at(b, y, x);
        ASSERT_TRUE(g == 0.0 || g == 1.0);
        if (g != 0.0) continue;
        bool covered = false;
        for (std::size_t y0 = (y >= s - 1 ? y - (s - 1) : 0); y0 <= std::min(y, h - s) && !covered; ++y0)
          for (std::size_t x0 = (x >= s - 1 ? x - (s - 1) : 0); x0 <= std::min(x, w - s) && !covered; ++x0) {
            bool all = true;
            for (std::size_t dy = 0; dy < s; ++dy)
              for (std::size_t dx = 0; dx < s; ++dx) all = all && m.at(b, y0 + dy, x0 + dx) == 0.0;
            covered = all;
          }
        EXPECT_TRUE(covered) << "position (" << y << ", " << x << ") of item " << b;
      }
  }
  double dropped = 0.0;
  for (double g : m.gate) dropped += 1.0 - g;
  EXPECT_DOUBLE_EQ(m.dropped_fraction(), dropped / static_cast<double>(m.gate.size()));
}

TEST(BlockMask, CalibratedSeedProbabilityHitsRhoInExpectation) {
  // Exact expectation over seed windows, computed independently here.
  for (auto [h, s] : {std::pair<std::size_t, std::size_t>{16, 3}, {32, 3}, {16, 5}}) {
    for (double rho : {0.05, 0.1, 0.2}) {
      const double gamma = block_seed_probability(h, h, s, rho);
      double expect = 0.0;
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < h; ++x) {
          auto cover = [&](std::size_t p) {
            const std::size_t lo = p >= s - 1 ? p - (s - 1) : 0, hi = std::min(p, h - s);
            return hi - lo + 1;
          };
          expect += 1.0 - std::pow(1.0 - gamma, static_cast<double>(cover(y) * cover(x)));
        }
      EXPECT_NEAR(expect / static_cast<double>(h * h), rho, 1e-9) << h << " " << s << " " << rho;
      EXPECT_GE(gamma, block_seed_probability_closed_form(h, h, s, rho) * 0.99);
    }
  }
}

TEST(BlockMask, MonteCarloRateWithinTenPercent) {
  const DropMask m = sample_block_mask(10000, 16, 16, 3, 0.1, RngStream(11));
  EXPECT_NEAR(m.dropped_fraction(), 0.1, 0.01);
}

TEST(BlockMask, ClosedFormMatchesFormula) {
  EXPECT_DOUBLE_EQ(block_seed_probability_closed_form(16, 16, 3, 0.1),
                   0.1 * 256.0 / (9.0 * 14.0 * 14.0));
}

// ---- Vertices -------------------------------------------------------------------------

TEST(Vertices, AlphaOneTakesEveryPosition) {
  RngStream rng(12);
  const Tensor x = random_tensor({2, 3, 4, 5}, rng);
  const VertexSet v = sample_vertices(x, 1.0, rng.child(0));
  EXPECT_EQ(v.size(), 40u);
  EXPECT_EQ(v.count(0), 20u);
  EXPECT_EQ(v.count(1), 20u);
}

TEST(Vertices, AlphaZeroIsEmpty) {
  RngStream rng(13);
  const VertexSet v = sample_vertices(random_tensor({2, 3, 4, 4}, rng), 0.0, rng.child(0));
  EXPECT_EQ(v.size(), 0u);
  EXPECT_FALSE(v.values.defined());
}

TEST(Vertices, RowsMatchFeatureMapAndIndicesAreUnique) {
  RngStream rng(14);
  const Tensor x = random_tensor({3, 4, 6, 6}, rng);
  const VertexSet v = sample_vertices(x, 0.3, rng.child(0));
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> seen;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const Position p = v.indices[i];
    EXPECT_TRUE(seen.insert({p.batch, p.y, p.x}).second);
    EXPECT_GE(i, v.offsets[p.batch]);
    EXPECT_LT(i, v.offsets[p.batch + 1]);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(v.values.at({i, c}), x.at({p.batch, c, p.y, p.x}));
  }
}

TEST(Vertices, EmptyDrawIsPatchedWithOneVertex) {
  RngStream rng(15);
  const Tensor x = random_tensor({50, 1, 2, 2}, rng);
  const VertexSet v = sample_vertices(x, 1e-9, rng.child(0));
  for (std::size_t b = 0; b < 50; ++b) EXPECT_EQ(v.count(b), 1u);
}

TEST(Vertices, MeanCountMatchesBinomial) {
  const Tensor x = Tensor::zeros({10000, 1, 16, 16});
  const VertexSet v = sample_vertices(x, 0.2, RngStream(16));
  const double mean = static_cast<double>(v.size()) / 10000.0;
  EXPECT_NEAR(mean, 51.2, 0.05 * 51.2);
}

TEST(Vertices, TopPicksLargestActivations) {
  std::vector<double> vals(16, 0.0);
  vals[5] = 3.0;
  vals[9] = -4.0;
  vals[2] = 1.0;
  const Tensor x = Tensor::from({1, 1, 4, 4}, vals);
  const VertexSet v = top_vertices(x, 2.0 / 16.0);
  ASSERT_EQ(v.size(), 2u);
  // Chosen by magnitude, listed in position order.
  EXPECT_EQ(v.indices[0], (Position{0, 1, 1}));
  EXPECT_EQ(v.indices[1], (Position{0, 2, 1}));
}

// ---- Adjacency ---------------------------------------------------------------------------

TEST(Adjacency, SingletonEq6IsZero) {
  const AdjacencyMatrix a = build_adjacency(Tensor::from({1, 2}, {3, 4}), AdjacencyMode::kEq6);
  EXPECT_EQ(values(a.entries), (std::vector<double>{0.0}));
}

TEST(Adjacency, IdenticalPairIsHalf) {
  const AdjacencyMatrix a = build_adjacency(Tensor::from({2, 2}, {1, 2, 1, 2}), AdjacencyMode::kEq6);
  EXPECT_EQ(values(a.entries), (std::vector<double>{0.5, 0.5, 0.5, 0.5}));
}

TEST(Adjacency, ThreeVertexEq6MatchesHighPrecision) {
  const Tensor v = Tensor::from({3, 2}, {1, 0, 0, 1, 1, 1});
  const AdjacencyMatrix a = build_adjacency(v, AdjacencyMode::kEq6);
  const long double sim[3][3] = {{1, 0, 1}, {0, 1, 1}, {1, 1, 2}};
  for (std::size_t i = 0; i < 3; ++i) {
    long double z = 0.0L;
    for (std::size_t j = 0; j < 3; ++j) z += std::exp(sim[i][j]);
    for (std::size_t j = 0; j < 3; ++j) {
      const long double expect = (1.0L - std::exp(sim[i][j]) / z) / 2.0L;
      EXPECT_NEAR(a.entries.at({i, j}), static_cast<double>(expect), 1e-15);
    }
  }
}

TEST(Adjacency, AblationModes) {
  RngStream rng(17);
  const Tensor v = random_tensor({4, 3}, rng);
  const auto id = values(build_adjacency(v, AdjacencyMode::kIdentity).entries);
  const auto uni = values(build_adjacency(v, AdjacencyMode::kUniform).entries);
  const auto zero = values(build_adjacency(v, AdjacencyMode::kZero).entries);
  const auto sim = build_adjacency(v, AdjacencyMode::kSimilarity).entries;
  for (std::size_t i = 0; i < 4; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_EQ(id[i * 4 + j], i == j ? 1.0 : 0.0);
      EXPECT_EQ(uni[i * 4 + j], 0.25);
      EXPECT_EQ(zero[i * 4 + j], 0.0);
      row += sim.at({i, j});
    }
    EXPECT_NEAR(row, 1.0, 1e-12);
  }
}

TEST(Adjacency, LearnedModeTilesTheTrainableMatrix) {
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4}, true);
  const Tensor t = tile_crop(m, 3);
  EXPECT_EQ(values(t), (std::vector<double>{1, 2, 1, 3, 4, 3, 1, 2, 1}));
  EXPECT_EQ(values(tile_crop(m, 1)), (std::vector<double>{1}));
  RngStream rng(18);
  const AdjacencyMatrix a = build_adjacency(random_tensor({3, 2}, rng), AdjacencyMode::kLearned, m);
  EXPECT_EQ(values(a.entries), values(t));
  EXPECT_THROW(build_adjacency(random_tensor({3, 2}, rng), AdjacencyMode::kLearned), ContractError);
  sum(t).backward();
  EXPECT_EQ(m.grad(), (std::vector<double>{4, 2, 2, 1}));
}

TEST(Adjacency, Eq6RowsSumToOneAndNormalizedDiagonalIsMinimal) {
  RngStream rng(19);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.index(10), c = 1 + rng.index(6);
    const Tensor v = random_tensor({n, c}, rng, 2.0);
    for (bool normalize : {false, true}) {
      const Tensor a = build_adjacency(v, AdjacencyMode::kEq6, Tensor(), normalize).entries;
      for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          ASSERT_GE(a.at({i, j}), 0.0);
          ASSERT_LE(a.at({i, j}), 1.0);
          row += a.at({i, j});
          if (normalize) {
            ASSERT_LE(a.at({i, i}), a.at({i, j}) + 1e-15);
          }
        }
        ASSERT_NEAR(row, 1.0, 1e-10);
      }
    }
  }
}

// ---- Graph reasoning and generators --------------------------------------------------------

TEST(GraphReasoning, ZeroAdjacencyOrWeightIsIdentity) {
  RngStream rng(20);
  const Tensor x = random_tensor({3, 2}, rng);
  const AdjacencyMatrix zero{Tensor::zeros({3, 3}), AdjacencyMode::kZero};
  EXPECT_EQ(values(graph_reasoning(x, zero, random_tensor({2, 2}, rng))), values(x));
  const AdjacencyMatrix a = build_adjacency(x, AdjacencyMode::kEq6);
  EXPECT_EQ(values(graph_reasoning(x, a, Tensor::zeros({2, 2}))), values(x));
}

TEST(GraphReasoning, MatchesTwoMatmulsAndAdd) {
  RngStream rng(21);
  const Tensor x = random_tensor({2, 2}, rng), w = random_tensor({2, 2}, rng);
  const AdjacencyMatrix a = build_adjacency(x, AdjacencyMode::kEq6);
  const auto av = values(a.entries), xv = values(x), wv = values(w);
  const Tensor y = graph_reasoning(x, a, w);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = xv[i * 2 + j];
      for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t l = 0; l < 2; ++l) s += av[i * 2 + k] * xv[k * 2 + l] * wv[l * 2 + j];
      EXPECT_NEAR(y.at({i, j}), s, 1e-14);
    }
}

TEST(Generator, ZeroAdjacencyOrParamsGiveZero) {
  RngStream rng(22);
  const Tensor v = random_tensor({5, 8}, rng);
  const GraphGeneratorParams p = GraphGeneratorParams::make(8, rng.child(0));
  const AdjacencyMatrix zero = build_adjacency(v, AdjacencyMode::kZero);
  const Tensor from_zero_a = distortion_generator_graph(v, zero, p);
  for (double d : from_zero_a.values()) EXPECT_EQ(d, 0.0);
  GraphGeneratorParams z{Tensor::zeros({8, 2}), Tensor::zeros({2, 2}), Tensor::zeros({2, 8})};
  const Tensor from_zero_p =
      distortion_generator_graph(v, build_adjacency(v, AdjacencyMode::kEq6), z);
  for (double d : from_zero_p.values()) EXPECT_EQ(d, 0.0);
}

TEST(Generator, ChannelsMustBeDivisibleByFour) {
  RegularizerConfig cfg;
  EXPECT_THROW(DropGraph(cfg, 8, 8, 6, RngStream(0)), ConfigError);
}

TEST(Generator, MatchesStepByStepOracle) {
  // n = 2, c = 4: hand-rolled three-stage evaluation with plain arrays.
  RngStream rng(23);
  const Tensor v = random_tensor({2, 4}, rng);
  const GraphGeneratorParams p = GraphGeneratorParams::make(4, rng.child(0));
  const AdjacencyMatrix a = build_adjacency(v, AdjacencyMode::kEq6);
  auto mm = [](const std::vector<double>& x, const std::vector<double>& y, std::size_t m,
               std::size_t k, std::size_t n) {
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t q = 0; q < k; ++q) out[i * n + j] += x[i * k + q] * y[q * n + j];
    return out;
  };
  auto relu_v = [](std::vector<double> x) {
    for (double& e : x) e = std::max(e, 0.0);
    return x;
  };
  const auto A = values(a.entries);
  const auto h1 = relu_v(mm(mm(A, values(v), 2, 2, 4), values(p.w_in), 2, 4, 1));
  auto h2 = mm(mm(A, h1, 2, 2, 1), values(p.w_mid), 2, 1, 1);
  for (std::size_t i = 0; i < h2.size(); ++i) h2[i] += h1[i];
  h2 = relu_v(h2);
  const auto out = mm(mm(A, h2, 2, 2, 1), values(p.w_out), 2, 1, 4);
  const Tensor got = distortion_generator_graph(v, a, p);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(got.values()[i], out[i], 1e-13);
}

TEST(Generator, AvgPoolRowsAreTheMean) {
  const Tensor same = Tensor::from({3, 2}, {1, 5, 1, 5, 1, 5});
  EXPECT_EQ(values(distortion_generator_alt(same, GeneratorKind::kAvgPool, RngStream(0))),
            values(same));
  const Tensor v = Tensor::from({2, 2}, {0, 2, 2, 0});
  EXPECT_EQ(values(distortion_generator_alt(v, GeneratorKind::kAvgPool, RngStream(0))),
            (std::vector<double>{1, 1, 1, 1}));
}

TEST(Generator, RandomNoiseMatchesPerChannelStd) {
  RngStream rng(24);
  // Channel stds 1 and 3.
  std::vector<double> rows(200);
  for (std::size_t i = 0; i < 100; ++i) {
    rows[i * 2] = rng.normal();
    rows[i * 2 + 1] = 3.0 * rng.normal();
  }
  const Tensor v = Tensor::from({100, 2}, rows);
  std::vector<double> sd(2, 0.0), mu(2, 0.0);
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t c = 0; c < 2; ++c) mu[c] += rows[i * 2 + c] / 100;
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t c = 0; c < 2; ++c) sd[c] += (rows[i * 2 + c] - mu[c]) * (rows[i * 2 + c] - mu[c]) / 100;
  std::vector<double> ss(2, 0.0);
  std::size_t count = 0;
  for (std::size_t d = 0; d < 1000; ++d) {
    const Tensor out = distortion_generator_alt(v, GeneratorKind::kRandomNoise, rng.child(d));
    for (std::size_t i = 0; i < 100; ++i)
      for (std::size_t c = 0; c < 2; ++c) ss[c] += out.at({i, c}) * out.at({i, c});
    count += 100;
  }
  for (std::size_t c = 0; c < 2; ++c) {
    const double observed = std::sqrt(ss[c] / static_cast<double>(count));
    const double expected = std::sqrt(sd[c]);
    // Both population and sample std are inside the band.
    EXPECT_NEAR(observed, expected, 0.05 * expected) << "channel " << c;
  }
}

// ---- pool_expand_apply ---------------------------------------------------------------------

TEST(PoolExpand, AllOnesMaskIsIdentity) {
  RngStream rng(25);
  const Tensor x = random_tensor({2, 3, 4, 4}, rng);
  DropMask m{2, 4, 4, std::vector<double>(32, 1.0)};
  const Tensor d = random_tensor({5, 3}, rng);
  const std::vector<std::size_t> offsets{0, 2, 5};
  EXPECT_TRUE(bit_equal(pool_expand_apply(x, m, d, offsets, rng.child(0)), x));
}

TEST(PoolExpand, ZeroDistortionZeroesDroppedPositions) {
  RngStream rng(26);
  const Tensor x = random_tensor({1, 3, 4, 4}, rng);
  DropMask m{1, 4, 4, std::vector<double>(16, 1.0)};
  m.gate[5] = m.gate[6] = 0.0;
  const std::vector<std::size_t> offsets{0, 2};
  const Tensor y = pool_expand_apply(x, m, Tensor::zeros({2, 3}), offsets, rng.child(0));
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t q = 0; q < 16; ++q) {
      const double expect = m.gate[q] == 0.0 ? 0.0 : x.values()[c * 16 + q];
      EXPECT_EQ(y.values()[c * 16 + q], expect);
    }
}

TEST(PoolExpand, SingleDroppedPositionReplaysMultiplier) {
  RngStream rng(27);
  const Tensor x = random_tensor({1, 2, 3, 3}, rng);
  DropMask m{1, 3, 3, std::vector<double>(9, 1.0)};
  m.gate[4] = 0.0;
  const Tensor r = Tensor::from({1, 2}, {0.7, -1.3});
  const std::vector<std::size_t> offsets{0, 1};
  const RngStream mult = rng.child(99);
  const Tensor y = pool_expand_apply(x, m, r, offsets, mult);
  const double u = mult.child(0).uniform_open();
  EXPECT_EQ(y.at({0, 0, 1, 1}), 0.7 * u);
  EXPECT_EQ(y.at({0, 1, 1, 1}), -1.3 * u);
}

TEST(PoolExpand, PoolsEachItemSeparately) {
  const Tensor x = Tensor::full({2, 1, 1, 2}, 9.0);
  DropMask m{2, 1, 2, {0.0, 1.0, 0.0, 1.0}};
  // Item 0 has rows 2 and 4 (mean 3), item 1 has none.
  const Tensor d = Tensor::from({2, 1}, {2, 4});
  const std::vector<std::size_t> offsets{0, 2, 2};
  const RngStream mult(28);
  const Tensor y = pool_expand_apply(x, m, d, offsets, mult);
  EXPECT_EQ(y.values()[0], 3.0 * mult.child(0).uniform_open());
  EXPECT_EQ(y.values()[1], 9.0);
  EXPECT_EQ(y.values()[2], 0.0);
}

// ---- DropGraph module ------------------------------------------------------------------------

StepContext train_ctx(std::uint64_t seed, double rho) {
  return StepContext{Mode::kTrain, RngStream(seed), rho};
}

TEST(DropGraphModule, EvalModeReturnsInputBitExact) {
  RngStream rng(29);
  const DropGraph dg(RegularizerConfig{}, 8, 8, 8, rng.child(0));
  const Tensor x = random_tensor({2, 8, 8, 8}, rng);
  EXPECT_TRUE(bit_equal(dg.forward(x, StepContext{Mode::kEval, RngStream(1), 0.5}), x));
}

TEST(DropGraphModule, ZeroRhoIsIdentity) {
  RngStream rng(30);
  const DropGraph dg(RegularizerConfig{}, 8, 8, 8, rng.child(0));
  const Tensor x = random_tensor({2, 8, 8, 8}, rng);
  EXPECT_TRUE(bit_equal(dg.forward(x, train_ctx(2, 0.0)), x));
}

TEST(DropGraphModule, ZeroAdjacencyEqualsMaskingOnly) {
  RngStream rng(31);
  RegularizerConfig zero_cfg;
  zero_cfg.adjacency_mode = AdjacencyMode::kZero;
  RegularizerConfig none_cfg;
  none_cfg.generator_kind = GeneratorKind::kNone;
  const DropGraph zero(zero_cfg, 8, 8, 8, rng.child(0));
  const DropGraph none(none_cfg, 8, 8, 8, rng.child(0));
  std::size_t with_drops = 0;
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({2, 8, 8, 8}, rng);
    const Tensor a = zero.forward(x, train_ctx(trial, 0.3));
    const Tensor b = none.forward(x, train_ctx(trial, 0.3));
    EXPECT_TRUE(bit_equal(a, b));
    with_drops += zero_fraction(b) > 0.0;
  }
  EXPECT_GT(with_drops, 40u);
}

TEST(DropGraphModule, TrainModeReplacesOnlyDroppedPositions) {
  RngStream rng(32);
  const DropGraph dg(RegularizerConfig{}, 8, 8, 8, rng.child(0));
  const Tensor x = random_tensor({2, 8, 8, 8}, rng);
  const StepContext ctx = train_ctx(3, 0.3);
  const Tensor y = dg.forward(x, ctx);
  const DropMask m = sample_block_mask(2, 8, 8, 3, 0.3, ctx.rng.child(rng_site::kMask));
  ASSERT_TRUE(m.any_dropped());
  std::size_t changed = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 8; ++c)
      for (std::size_t q = 0; q < 64; ++q) {
        const std::size_t idx = (b * 8 + c) * 64 + q;
        if (m.gate[b * 64 + q] != 0.0) {
          EXPECT_EQ(y.values()[idx], x.values()[idx]);
        } else {
          changed += y.values()[idx] != x.values()[idx];
        }
      }
  EXPECT_GT(changed, 0u);
  EXPECT_TRUE(bit_equal(dg.forward(x, ctx), y));
}

TEST(DropGraphModule, GradCheckThroughInputAndGenerator) {
  RngStream rng(33);
  for (AdjacencyMode mode : {AdjacencyMode::kEq6, AdjacencyMode::kLearned}) {
    RegularizerConfig cfg;
    cfg.adjacency_mode = mode;
    cfg.alpha = 0.5;
    const DropGraph dg(cfg, 6, 6, 8, rng.child(0));
    const Tensor x = random_tensor({2, 8, 6, 6}, rng, 1.0, true);
    const Tensor w = random_tensor({2, 8, 6, 6}, rng);
    const StepContext ctx = train_ctx(4, 0.3);
    std::vector<Tensor> inputs{x};
    for (const auto& p : dg.parameters("dg")) inputs.push_back(p.tensor);
    const auto report =
        grad_check_report([&] { return sum(mul(dg.forward(x, ctx), w)); }, inputs);
    EXPECT_LE(report.max_relative_error, 1e-5) << to_string(mode);
  }
}

TEST(DropGraphModule, LearnedAdjacencySizedFromAlpha) {
  RegularizerConfig cfg;
  cfg.adjacency_mode = AdjacencyMode::kLearned;
  cfg.alpha = 0.2;
  const DropGraph dg(cfg, 8, 8, 8, RngStream(0));
  EXPECT_EQ(dg.learned_adjacency().shape(), (Shape{13, 13}));
}

TEST(PartialReasoningModule, ReplacesSampledVectorsAndRespectsApplication) {
  RngStream rng(34);
  RegularizerConfig cfg;
  cfg.kind = RegularizerKind::kPartialReasoning;
  cfg.alpha = 0.25;
  const Tensor x = random_tensor({2, 4, 4, 4}, rng);
  const PartialReasoning train_only(cfg, 4, rng.child(0));
  EXPECT_TRUE(bit_equal(train_only.forward(x, StepContext{Mode::kEval, RngStream(1), 0.0}), x));
  const Tensor y = train_only.forward(x, train_ctx(5, 0.0));
  std::size_t changed_positions = 0;
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t q = 0; q < 16; ++q) changed_positions += y.values()[b * 64 + q] != x.values()[b * 64 + q];
  EXPECT_GT(changed_positions, 0u);
  cfg.application = Application::kTrainAndInfer;
  const PartialReasoning always(cfg, 4, rng.child(0));
  EXPECT_FALSE(bit_equal(always.forward(x, StepContext{Mode::kEval, RngStream(1), 0.0}), x));
}

// ---- Schedulers ----------------------------------------------------------------------------

TEST(Scheduler, EndpointsAndHalfway) {
  for (auto kind : {SchedulerKind::kF1, SchedulerKind::kF2, SchedulerKind::kF3, SchedulerKind::kF4,
                    SchedulerKind::kF5}) {
    EXPECT_EQ(schedule_rho({0, 100, kind, 0.1}), 0.0);
    EXPECT_NEAR(schedule_rho({100, 100, kind, 0.1}), 0.1, 1e-15);
  }
  EXPECT_DOUBLE_EQ(schedule_rho({50, 100, SchedulerKind::kF1, 0.1}), 0.05);
  EXPECT_EQ(schedule_rho({0, 100, SchedulerKind::kConstant, 0.1}), 0.1);
}

TEST(Scheduler, FormsMatchClosedExpressions) {
  const double r = 0.37, rho = 0.2;
  const SchedulerState base{37, 100, SchedulerKind::kF1, rho};
  auto at = [&](SchedulerKind k) {
    SchedulerState s = base;
    s.kind = k;
    return schedule_rho(s);
  };
  EXPECT_NEAR(at(SchedulerKind::kF2), rho * r * r, 1e-15);
  EXPECT_NEAR(at(SchedulerKind::kF3), rho * std::sqrt(r), 1e-15);
  EXPECT_NEAR(at(SchedulerKind::kF4), rho * (1 - std::cos(std::numbers::pi * r)) / 2, 1e-15);
  EXPECT_NEAR(at(SchedulerKind::kF5), rho * r * r * (3 - 2 * r), 1e-15);
}

TEST(Scheduler, MonotoneBoundedAndF2Lowest) {
  const std::size_t total = 1000;
  std::vector<double> prev(5, 0.0);
  for (std::size_t t = 0; t <= total; ++t) {
    double f2 = schedule_rho({t, total, SchedulerKind::kF2, 0.1});
    std::size_t idx = 0;
    for (auto kind : {SchedulerKind::kF1, SchedulerKind::kF2, SchedulerKind::kF3, SchedulerKind::kF4,
                      SchedulerKind::kF5}) {
      const double v = schedule_rho({t, total, kind, 0.1});
      ASSERT_GE(v, prev[idx]);
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 0.1);
      ASSERT_LE(f2, v + 1e-18);
      prev[idx++] = v;
    }
  }
}

TEST(Scheduler, StepPastTotalIsAContractError) {
  EXPECT_THROW(schedule_rho({11, 10, SchedulerKind::kF1, 0.1}), ContractError);
  EXPECT_THROW(schedule_rho({0, 0, SchedulerKind::kF1, 0.1}), ContractError);
}

// ---- Config validation -----------------------------------------------------------------------

std::string field_of(const RegularizerConfig& cfg, std::size_t h = 8, std::size_t c = 8) {
  try {
    cfg.validate_at(h, h, c);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "";
}

TEST(RegularizerConfig, DefaultsMatchRecommendedSettings) {
  const RegularizerConfig cfg;
  EXPECT_EQ(cfg.alpha, 0.2);
  EXPECT_EQ(cfg.rho_target, 0.1);
  EXPECT_EQ(cfg.block_size, 3u);
  EXPECT_EQ(field_of(cfg), "");
}

TEST(RegularizerConfig, ErrorsNameTheField) {
  RegularizerConfig cfg;
  cfg.rho_target = 1.5;
  EXPECT_EQ(field_of(cfg), "regularizer.rho");
  cfg = {};
  cfg.alpha = -0.1;
  EXPECT_EQ(field_of(cfg), "regularizer.alpha");
  cfg = {};
  cfg.block_size = 4;
  EXPECT_EQ(field_of(cfg), "regularizer.block_size");
  cfg = {};
  cfg.block_size = 9;
  EXPECT_EQ(field_of(cfg), "regularizer.block_size");
  cfg = {};
  EXPECT_EQ(field_of(cfg, 8, 6), "regularizer.generator");
}

TEST(RegularizerConfig, NamesRoundTrip) {
  for (auto k : {RegularizerKind::kNone, RegularizerKind::kDropout, RegularizerKind::kSpatialDropout,
                 RegularizerKind::kDropBlock, RegularizerKind::kDropGraph,
                 RegularizerKind::kPartialReasoning}) {
    EXPECT_EQ(parse_regularizer_kind(to_string(k)), k);
  }
  for (auto m : {AdjacencyMode::kEq6, AdjacencyMode::kLearned, AdjacencyMode::kSimilarity,
                 AdjacencyMode::kIdentity, AdjacencyMode::kUniform, AdjacencyMode::kZero}) {
    EXPECT_EQ(parse_adjacency_mode(to_string(m)), m);
  }
  EXPECT_FALSE(parse_scheduler_kind("f6").has_value());
}

}  // namespace
}  // namespace dropgraph
