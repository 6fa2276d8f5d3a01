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

#include "dropgraph/verification.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "dropgraph/backbones.hpp"
#include "dropgraph/grad_check.hpp"
#include "dropgraph/nn.hpp"
#include "dropgraph/regularizers.hpp"

namespace dropgraph {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kSuiteGrad = 1, kSuiteIdentity = 2, kSuiteDegenerate = 3,
                        kSuiteAdjacency = 4, kSuiteMask = 5;

Tensor random_tensor(Shape shape, RngStream& rng, double scale = 1.0, bool grad = false) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// Values bounded away from zero, for relu inputs.
Tensor away_from_zero(Shape shape, RngStream& rng, bool grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * (0.05 + rng.uniform());
  return Tensor::from(std::move(shape), std::move(v), grad);
}

// sum(w * t) with fixed random weights, so every output coordinate matters.
Tensor weighted_sum(const Tensor& t, const Tensor& w) { return sum(mul(t, w)); }

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.values().data(), b.values().data(), a.numel() * sizeof(double)) == 0;
}

std::string fmt_sci(double v) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(2) << v;
  return s.str();
}

struct Timed {
  CheckResult result;
  Clock::time_point start = Clock::now();
  explicit Timed(std::string name) { result.name = std::move(name); }
  CheckResult done(bool passed, std::string detail) {
    result.passed = passed;
    result.detail = std::move(detail);
    result.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    return result;
  }
};

// One differentiable program family: builds inputs for instance i and
// returns the scalar program over them.
struct GradCase {
  std::string name;
  std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(RngStream&)> make;
};

std::vector<GradCase> grad_cases() {
  std::vector<GradCase> cases;
  cases.push_back({"matmul", [](RngStream& rng) {
                     Tensor a = random_tensor({3, 4}, rng, 1.0, true);
                     Tensor b = random_tensor({4, 2}, rng, 1.0, true);
                     Tensor w = random_tensor({3, 2}, rng);
                     return std::pair{std::function<Tensor()>(
                                          [=] { return weighted_sum(matmul(a, b), w); }),
                                      std::vector<Tensor>{a, b}};
                   }});
  cases.push_back({"softmax_rows", [](RngStream& rng) {
                     Tensor a = random_tensor({3, 5}, rng, 2.0, true);
                     Tensor w = random_tensor({3, 5}, rng);
                     return std::pair{std::function<Tensor()>(
                                          [=] { return weighted_sum(softmax_rows(a), w); }),
                                      std::vector<Tensor>{a}};
                   }});
  cases.push_back({"relu", [](RngStream& rng) {
                     Tensor a = away_from_zero({4, 3}, rng);
                     Tensor w = random_tensor({4, 3}, rng);
                     return std::pair{
                         std::function<Tensor()>([=] { return weighted_sum(relu(a), w); }),
                         std::vector<Tensor>{a}};
                   }});
  cases.push_back({"conv2d", [](RngStream& rng) {
                     const std::size_t stride = 1 + rng.index(2), pad = rng.index(2);
                     Tensor x = random_tensor({2, 2, 5, 5}, rng, 1.0, true);
                     ConvParams p;
                     p.kernel = random_tensor({3, 2, 3, 3}, rng, 0.5, true);
                     p.bias = random_tensor({3}, rng, 1.0, true);
                     p.stride = stride;
                     p.padding = pad;
                     const std::size_t o = (5 + 2 * pad - 3) / stride + 1;
                     Tensor w = random_tensor({2, 3, o, o}, rng);
                     return std::pair{
                         std::function<Tensor()>([=] { return weighted_sum(conv2d(x, p), w); }),
                         std::vector<Tensor>{x, p.kernel, p.bias}};
                   }});
  cases.push_back({"batch_norm2d", [](RngStream& rng) {
                     Tensor x = random_tensor({3, 2, 3, 3}, rng, 1.5, true);
                     auto state = std::make_shared<NormState>(NormState::make(2));
                     state->gamma = random_tensor({2}, rng, 1.0, true);
                     state->beta = random_tensor({2}, rng, 1.0, true);
                     Tensor w = random_tensor({3, 2, 3, 3}, rng);
                     return std::pair{std::function<Tensor()>([=] {
                                        return weighted_sum(batch_norm2d(x, *state, Mode::kTrain),
                                                            w);
                                      }),
                                      std::vector<Tensor>{x, state->gamma, state->beta}};
                   }});
  cases.push_back({"linear_cross_entropy", [](RngStream& rng) {
                     Tensor x = random_tensor({4, 5}, rng, 1.0, true);
                     LinearParams p{random_tensor({5, 3}, rng, 1.0, true),
                                    random_tensor({3}, rng, 1.0, true)};
                     std::vector<std::size_t> labels(4);
                     for (auto& l : labels) l = rng.index(3);
                     return std::pair{std::function<Tensor()>(
                                          [=] { return cross_entropy(linear(x, p), labels); }),
                                      std::vector<Tensor>{x, p.weight, p.bias}};
                   }});
  cases.push_back({"global_avg_pool", [](RngStream& rng) {
                     Tensor x = random_tensor({2, 3, 4, 4}, rng, 1.0, true);
                     Tensor w = random_tensor({2, 3}, rng);
                     return std::pair{std::function<Tensor()>(
                                          [=] { return weighted_sum(global_avg_pool(x), w); }),
                                      std::vector<Tensor>{x}};
                   }});
  cases.push_back({"graph_reasoning_eq6", [](RngStream& rng) {
                     Tensor x = random_tensor({5, 4}, rng, 1.0, true);
                     Tensor wt = random_tensor({4, 4}, rng, 0.5, true);
                     Tensor w = random_tensor({5, 4}, rng);
                     return std::pair{std::function<Tensor()>([=] {
                                        const auto a = build_adjacency(x, AdjacencyMode::kEq6);
                                        return weighted_sum(graph_reasoning(x, a, wt), w);
                                      }),
                                      std::vector<Tensor>{x, wt}};
                   }});
  auto dropgraph_case = [](AdjacencyMode mode) {
    return [mode](RngStream& rng) {
      RegularizerConfig cfg;
      cfg.alpha = 0.3;
      cfg.rho_target = 0.3;
      cfg.adjacency_mode = mode;
      auto dg = std::make_shared<DropGraph>(cfg, 6, 6, 8, rng.child(1));
      Tensor x = random_tensor({2, 8, 6, 6}, rng, 1.0, true);
      Tensor w = random_tensor({2, 8, 6, 6}, rng);
      const StepContext ctx{Mode::kTrain, rng.child(2), 0.3};
      std::vector<Tensor> inputs{x};
      for (const auto& p : dg->parameters("dg")) inputs.push_back(p.tensor);
      return std::pair{std::function<Tensor()>([=] { return weighted_sum(dg->forward(x, ctx), w); }),
                       inputs};
    };
  };
  cases.push_back({"dropgraph_forward_eq6", dropgraph_case(AdjacencyMode::kEq6)});
  cases.push_back({"dropgraph_forward_learned", dropgraph_case(AdjacencyMode::kLearned)});
  return cases;
}

}  // namespace

VerifyOptions VerifyOptions::quick() {
  VerifyOptions o;
  o.grad_instances = 10;
  o.adjacency_cases = 1000;
  o.degeneration_cases = 100;
  o.masks_per_cell = 2000;
  return o;
}

std::vector<CheckResult> check_gradients(const VerifyOptions& opt) {
  std::vector<CheckResult> out;
  const auto cases = grad_cases();
  for (std::size_t c = 0; c < cases.size(); ++c) {
    Timed t("grad_check/" + cases[c].name);
    double worst = 0.0;
    for (std::size_t i = 0; i < opt.grad_instances; ++i) {
      RngStream rng = RngStream(opt.seed).child({kSuiteGrad, c, i});
      auto [program, inputs] = cases[c].make(rng);
      worst = std::max(worst, grad_check_report(program, inputs, 1e-5).max_relative_error);
    }
    out.push_back(t.done(worst <= 1e-5, std::to_string(opt.grad_instances) +
                                            " instances, max rel err " + fmt_sci(worst)));
  }
  return out;
}

std::vector<CheckResult> check_inference_identity(const VerifyOptions& opt) {
  std::vector<CheckResult> out;

  // Module level: eval forward returns its input for every regularizer config.
  {
    Timed t("inference_identity/modules");
    bool ok = true;
    std::size_t configs = 0;
    RngStream rng = RngStream(opt.seed).child({kSuiteIdentity, 0});
    for (auto adj : {AdjacencyMode::kEq6, AdjacencyMode::kLearned, AdjacencyMode::kSimilarity,
                     AdjacencyMode::kIdentity, AdjacencyMode::kUniform, AdjacencyMode::kZero}) {
      for (auto gen : {GeneratorKind::kGraph, GeneratorKind::kRandomNoise, GeneratorKind::kAvgPool,
                       GeneratorKind::kNone}) {
        RegularizerConfig cfg;
        cfg.adjacency_mode = adj;
        cfg.generator_kind = gen;
        DropGraph dg(cfg, 6, 6, 8, rng.child(configs));
        const Tensor x = random_tensor({2, 8, 6, 6}, rng);
        const StepContext ctx{Mode::kEval, rng.child(1000 + configs), 0.5};
        ok = ok && bit_equal(dg.forward(x, ctx), x);
        ++configs;
      }
    }
    for (auto kind : {RegularizerKind::kDropout, RegularizerKind::kSpatialDropout,
                      RegularizerKind::kDropBlock, RegularizerKind::kPartialReasoning}) {
      RegularizerConfig cfg{.kind = kind};
      Regularizer reg(cfg, 6, 6, 8, rng.child(configs));
      const Tensor x = random_tensor({2, 8, 6, 6}, rng);
      const StepContext ctx{Mode::kEval, rng.child(1000 + configs), 0.5};
      ok = ok && bit_equal(reg.forward(x, ctx), x);
      ++configs;
    }
    out.push_back(t.done(ok, std::to_string(configs) + " configs"));
  }

  // Network level: train a regularized net briefly, copy its backbone into a
  // regularizer-free net, and compare eval outputs.
  {
    Timed t("inference_identity/backbones");
    bool ok = true;
    std::size_t nets = 0;
    std::vector<RegularizerConfig> regs;
    for (auto kind : {RegularizerKind::kDropout, RegularizerKind::kSpatialDropout,
                      RegularizerKind::kDropBlock, RegularizerKind::kPartialReasoning}) {
      regs.push_back({.kind = kind});
    }
    for (auto adj : {AdjacencyMode::kEq6, AdjacencyMode::kLearned, AdjacencyMode::kSimilarity,
                     AdjacencyMode::kIdentity, AdjacencyMode::kUniform, AdjacencyMode::kZero}) {
      regs.push_back({.kind = RegularizerKind::kDropGraph, .adjacency_mode = adj});
    }
    regs.push_back({.kind = RegularizerKind::kDropGraph, .generator_kind = GeneratorKind::kRandomNoise});
    regs.push_back({.kind = RegularizerKind::kDropGraph, .generator_kind = GeneratorKind::kAvgPool});

    for (const auto& reg : regs) {
      RngStream rng = RngStream(opt.seed).child({kSuiteIdentity, 1, nets});
      TinyResNetConfig cfg;
      cfg.image_size = 8;
      cfg.stem_channels = 8;
      cfg.groups = {{1, 8}, {1, 8}};
      cfg.classes = 3;
      cfg.regularize_groups = {0, 1};
      TinyResNetConfig plain_cfg = cfg;
      cfg.regularizer = reg;
      TinyResNet net(cfg, rng.child(0));
      TinyResNet plain(plain_cfg, rng.child(0));
      const Tensor x = random_tensor({4, 3, 8, 8}, rng);
      const std::vector<std::size_t> labels{0, 1, 2, 0};
      for (std::size_t step = 0; step < 2; ++step) {
        const StepContext ctx{Mode::kTrain, rng.child({2, step}), 0.2};
        Tensor loss = cross_entropy(net.forward(x, ctx), labels);
        loss.backward();
        for (auto& p : net.parameters()) {
          Tensor w = p.tensor;
          const auto g = w.grad();
          auto v = w.mutable_values();
          for (std::size_t j = 0; j < v.size(); ++j) v[j] -= 0.05 * g[j];
          w.zero_grad();
        }
      }
      plain.load_state(net.state(), true);
      const Tensor probe = random_tensor({3, 3, 8, 8}, rng);
      const StepContext eval{Mode::kEval, rng.child(3), 0.2};
      ok = ok && bit_equal(net.forward(probe, eval), plain.forward(probe, eval));
      ++nets;
    }

    // Two-layer GCN with each per-node regularizer.
    for (auto kind : {RegularizerKind::kDropout, RegularizerKind::kDropBlock,
                      RegularizerKind::kDropGraph}) {
      RngStream rng = RngStream(opt.seed).child({kSuiteIdentity, 2, nets});
      const std::size_t n = 12;
      std::vector<double> adj(n * n, 0.0);
      for (std::size_t i = 0; i + 1 < n; ++i) adj[i * n + i + 1] = adj[(i + 1) * n + i] = 1.0;
      GraphInstance g;
      g.node_features = random_tensor({n, 6}, rng);
      g.normalized_adjacency = normalize_adjacency(adj, n);
      g.labels.assign(n, 0);
      TwoLayerGcnConfig cfg;
      cfg.in_features = 6;
      cfg.hidden = 8;
      cfg.classes = 2;
      TwoLayerGcnConfig plain_cfg = cfg;
      cfg.regularizer = {.kind = kind, .block_size = 1};
      TwoLayerGcn net(cfg, n, rng.child(0));
      TwoLayerGcn plain(plain_cfg, n, rng.child(0));
      plain.load_state(net.state(), true);
      const StepContext eval{Mode::kEval, rng.child(1), 0.3};
      ok = ok && bit_equal(net.forward(g, eval), plain.forward(g, eval));
      ++nets;
    }
    out.push_back(t.done(ok, std::to_string(nets) + " networks, exact equality"));
  }
  return out;
}

std::vector<CheckResult> check_dropblock_degeneration(const VerifyOptions& opt) {
  Timed zero_adj("dropblock_degeneration/zero_adjacency");
  std::size_t mismatches_adj = 0, mismatches_params = 0, dropped = 0;
  for (std::size_t i = 0; i < opt.degeneration_cases; ++i) {
    RngStream rng = RngStream(opt.seed).child({kSuiteDegenerate, i});
    const std::size_t c = 4 * (1 + rng.index(3));
    const std::size_t size = 5 + rng.index(6);
    const std::size_t s = 1 + 2 * rng.index(3);
    RegularizerConfig base;
    base.block_size = s;
    base.alpha = 0.1 + 0.8 * rng.uniform();
    RegularizerConfig zero = base;
    zero.adjacency_mode = AdjacencyMode::kZero;
    RegularizerConfig none = base;
    none.generator_kind = GeneratorKind::kNone;
    const RngStream init = rng.child(1);
    DropGraph with_zero(zero, size, size, c, init);
    DropGraph masking(none, size, size, c, init);
    DropGraph zero_params(base, size, size, c, init);
    for (const auto& p : zero_params.parameters("p")) {
      Tensor w = p.tensor;
      std::fill(w.mutable_values().begin(), w.mutable_values().end(), 0.0);
    }
    const Tensor x = random_tensor({1 + rng.index(3), c, size, size}, rng);
    const StepContext ctx{Mode::kTrain, rng.child(2), 0.05 + 0.3 * rng.uniform()};
    const Tensor expect = masking.forward(x, ctx);
    if (!bit_equal(with_zero.forward(x, ctx), expect)) ++mismatches_adj;
    if (!bit_equal(zero_params.forward(x, ctx), expect)) ++mismatches_params;
    if (!bit_equal(expect, x)) ++dropped;
  }
  const std::string n = std::to_string(opt.degeneration_cases);
  std::vector<CheckResult> out;
  out.push_back(zero_adj.done(mismatches_adj == 0,
                              std::to_string(mismatches_adj) + "/" + n + " mismatches (" +
                                  std::to_string(dropped) + " with drops)"));
  CheckResult params = out.back();
  params.name = "dropblock_degeneration/zero_generator_params";
  params.passed = mismatches_params == 0;
  params.detail = std::to_string(mismatches_params) + "/" + n + " mismatches";
  params.seconds = 0.0;
  out.push_back(params);
  return out;
}

std::vector<CheckResult> check_adjacency(const VerifyOptions& opt) {
  const auto builder = opt.eq6_builder ? opt.eq6_builder : [](const Tensor& v) {
    return build_adjacency(v, AdjacencyMode::kEq6).entries;
  };
  Timed t("adjacency/eq6");
  std::size_t rows_checked = 0, row_fail = 0, range_fail = 0, single_fail = 0, diag_fail = 0;
  std::size_t singles = 0;
  double worst_row = 0.0;
  for (std::size_t i = 0; i < opt.adjacency_cases; ++i) {
    RngStream rng = RngStream(opt.seed).child({kSuiteAdjacency, i});
    const std::size_t n = 1 + rng.index(12);
    const std::size_t c = 1 + rng.index(8);
    const double scale = std::array{0.1, 1.0, 3.0}[rng.index(3)];
    const Tensor v = random_tensor({n, c}, rng, scale);
    const Tensor a = builder(v);
    const auto av = a.values();
    if (n == 1) {
      ++singles;
      if (av.size() != 1 || av[0] != 0.0) ++single_fail;
      continue;
    }
    bool range_ok = true;
    for (double e : av) range_ok = range_ok && e >= 0.0 && e <= 1.0;
    if (!range_ok) ++range_fail;
    for (std::size_t r = 0; r < n; ++r, ++rows_checked) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += av[r * n + j];
      worst_row = std::max(worst_row, std::abs(s - 1.0));
      if (std::abs(s - 1.0) > 1e-10) ++row_fail;
    }
    // Same vertices, L2-normalized: the diagonal is the row minimum.
    std::vector<double> unit(v.values().begin(), v.values().end());
    for (std::size_t r = 0; r < n; ++r) {
      double norm = 0.0;
      for (std::size_t j = 0; j < c; ++j) norm += unit[r * c + j] * unit[r * c + j];
      norm = std::sqrt(norm);
      for (std::size_t j = 0; j < c; ++j) unit[r * c + j] /= norm;
    }
    const Tensor an = builder(Tensor::from({n, c}, unit));
    const auto anv = an.values();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < n; ++j) {
        if (anv[r * n + r] > anv[r * n + j] + 1e-12) {
          ++diag_fail;
          r = n;
          break;
        }
      }
    }
  }
  const double elapsed = std::chrono::duration<double>(Clock::now() - t.start).count();
  const std::string cases = std::to_string(opt.adjacency_cases) + " cases";
  std::vector<CheckResult> out;
  out.push_back({"adjacency/row_sums", row_fail == 0,
                 std::to_string(rows_checked) + " rows, max |sum-1| " + fmt_sci(worst_row),
                 elapsed});
  out.push_back({"adjacency/entries_in_unit_interval", range_fail == 0,
                 std::to_string(range_fail) + " failing of " + cases, 0.0});
  out.push_back({"adjacency/singleton_is_zero", single_fail == 0,
                 std::to_string(singles) + " singleton cases", 0.0});
  out.push_back({"adjacency/diagonal_minimal_normalized", diag_fail == 0,
                 std::to_string(diag_fail) + " failing of " + cases, 0.0});
  return out;
}

std::vector<CheckResult> check_mask_rate(const VerifyOptions& opt) {
  std::vector<CheckResult> out;
  struct Cell {
    std::size_t h, w, s;
  };
  std::size_t index = 0;
  for (const Cell cell : {Cell{16, 16, 3}, Cell{32, 32, 3}, Cell{16, 16, 5}}) {
    for (double rho : {0.05, 0.1, 0.2}) {
      std::ostringstream name;
      name << "mask_rate/" << cell.h << "x" << cell.w << "_s" << cell.s << "_rho" << rho;
      Timed t(name.str());
      const DropMask m = sample_block_mask(opt.masks_per_cell, cell.h, cell.w, cell.s, rho,
                                           RngStream(opt.seed).child({kSuiteMask, index++}));
      bool binary = true;
      for (double g : m.gate) binary = binary && (g == 0.0 || g == 1.0);
      const double rate = m.dropped_fraction();
      const double rel = std::abs(rate - rho) / rho;
      std::ostringstream detail;
      detail << "rate " << std::fixed << std::setprecision(5) << rate << ", rel err "
             << std::setprecision(4) << rel;
      out.push_back(t.done(binary && rel <= 0.1, detail.str()));
    }
  }
  return out;
}

std::vector<CheckResult> check_schedulers(const VerifyOptions& opt) {
  Timed t("schedulers/contract");
  const double rho = 0.1;
  const std::size_t total = opt.scheduler_points;
  bool ok = true;
  std::string failure;
  auto at = [&](SchedulerKind k, std::size_t step) {
    return schedule_rho({step, total, k, rho});
  };
  for (auto k : {SchedulerKind::kF1, SchedulerKind::kF2, SchedulerKind::kF3, SchedulerKind::kF4,
                 SchedulerKind::kF5, SchedulerKind::kConstant}) {
    const std::string name(to_string(k));
    if (k != SchedulerKind::kConstant && at(k, 0) != 0.0) {
      ok = false;
      failure += name + " f(0)!=0; ";
    }
    if (at(k, total) != rho) {
      ok = false;
      failure += name + " f(T)!=rho; ";
    }
    double prev = at(k, 0);
    for (std::size_t s = 1; s <= total; ++s) {
      const double v = at(k, s);
      if (v < prev || v < 0.0 || v > rho) {
        ok = false;
        failure += name + " not monotone in [0, rho]; ";
        break;
      }
      prev = v;
    }
  }
  for (std::size_t s = 0; s <= total; ++s) {
    const double f2 = at(SchedulerKind::kF2, s);
    for (auto k : {SchedulerKind::kF1, SchedulerKind::kF3, SchedulerKind::kF4, SchedulerKind::kF5}) {
      if (f2 > at(k, s)) {
        ok = false;
        failure += "f2 above " + std::string(to_string(k)) + "; ";
        s = total;
        break;
      }
    }
  }
  return {t.done(ok, ok ? std::to_string(total + 1) + "-point grid, 6 schedulers" : failure)};
}

std::vector<CheckResult> run_verification(const VerifyOptions& opt) {
  std::vector<CheckResult> all;
  for (auto suite : {check_gradients, check_inference_identity, check_dropblock_degeneration,
                     check_adjacency, check_mask_rate, check_schedulers}) {
    for (auto& r : suite(opt)) all.push_back(std::move(r));
  }
  return all;
}

std::string format_report(const std::vector<CheckResult>& results) {
  std::size_t width = 5;
  for (const auto& r : results) width = std::max(width, r.name.size());
  std::ostringstream s;
  s << std::left << std::setw(static_cast<int>(width)) << "check" << "  result  "
    << std::right << std::setw(10) << "seconds" << "  detail\n";
  std::size_t failed = 0;
  for (const auto& r : results) {
    if (!r.passed) ++failed;
    s << std::left << std::setw(static_cast<int>(width)) << r.name << "  "
      << (r.passed ? "PASS    " : "FAIL    ") << std::right << std::setw(10) << std::fixed
      << std::setprecision(3) << r.seconds << "  " << r.detail << "\n";
  }
  s << results.size() - failed << "/" << results.size() << " checks passed\n";
  return s.str();
}

}  // namespace dropgraph
