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

// Compares the OpenMP kernels against the serial reference loops, plus one
// full training step of the default residual network.

#include <benchmark/benchmark.h>

#include <vector>

#include "dropgraph/backbones.hpp"
#include "dropgraph/kernels.hpp"
#include "dropgraph/nn.hpp"
#include "dropgraph/rng.hpp"

namespace {

using namespace dropgraph;

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

template <bool kReference>
void BM_Gemm(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_values(m * k, 1);
  const auto b = random_values(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (kReference) {
      kernels::reference::gemm(kernels::Trans::kNo, kernels::Trans::kNo, m, n, k, a.data(),
                               b.data(), c.data(), false);
    } else {
      kernels::gemm(kernels::Trans::kNo, kernels::Trans::kNo, m, n, k, a.data(), b.data(),
                    c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(
      2.0 * static_cast<double>(m * n * k), benchmark::Counter::kIsIterationInvariantRate,
      benchmark::Counter::kIs1000);
}
BENCHMARK_TEMPLATE(BM_Gemm, false)->Args({16, 144, 1024})->Args({32, 288, 256})->Args({64, 64, 64});
BENCHMARK_TEMPLATE(BM_Gemm, true)->Args({16, 144, 1024})->Args({32, 288, 256})->Args({64, 64, 64});

template <bool kReference>
void BM_Conv2d(benchmark::State& state) {
  const std::size_t batch = 8, c = static_cast<std::size_t>(state.range(0));
  const auto size = static_cast<std::size_t>(state.range(1));
  const auto x = random_values(batch * c * size * size, 3);
  const auto w = random_values(c * c * 9, 4);
  std::vector<double> out(batch * c * size * size);
  for (auto _ : state) {
    if constexpr (kReference) {
      kernels::reference::conv2d_forward(x.data(), batch, c, size, size, w.data(), nullptr, c,
                                         3, 1, 1, out.data());
    } else {
      kernels::conv2d_forward(x.data(), batch, c, size, size, w.data(), nullptr, c, 3, 1, 1,
                              out.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(
      2.0 * static_cast<double>(batch * c * c * 9 * size * size),
      benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}
BENCHMARK_TEMPLATE(BM_Conv2d, false)->Args({16, 32})->Args({32, 16});
BENCHMARK_TEMPLATE(BM_Conv2d, true)->Args({16, 32})->Args({32, 16});

void BM_ResNetTrainStep(benchmark::State& state) {
  TinyResNetConfig cfg;
  cfg.image_size = static_cast<std::size_t>(state.range(0));
  if (state.range(1) != 0) {
    cfg.regularizer = RegularizerConfig{};
  }
  TinyResNet net(cfg, RngStream(7));
  const std::size_t batch = 32;
  const Tensor x = Tensor::from({batch, 3, cfg.image_size, cfg.image_size},
                                random_values(batch * 3 * cfg.image_size * cfg.image_size, 5));
  std::vector<std::size_t> labels(batch);
  for (std::size_t i = 0; i < batch; ++i) labels[i] = i % cfg.classes;
  std::uint64_t step = 0;
  for (auto _ : state) {
    const StepContext ctx{Mode::kTrain, RngStream(9).child(step++), 0.1};
    Tensor loss = cross_entropy(net.forward(x, ctx), labels);
    loss.backward();
    for (auto& p : net.parameters()) p.tensor.zero_grad();
  }
}
BENCHMARK(BM_ResNetTrainStep)->Args({32, 0})->Args({32, 1})->Args({16, 0})->Args({16, 1})
    ->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
