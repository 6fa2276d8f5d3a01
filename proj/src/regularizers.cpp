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

#include "dropgraph/regularizers.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <utility>

#include "dropgraph/errors.hpp"

namespace dropgraph {

// ---- Names --------------------------------------------------------------------

namespace {

template <typename E, std::size_t N>
using NameTable = std::array<std::pair<E, std::string_view>, N>;

constexpr NameTable<RegularizerKind, 6> kKindNames{{
    {RegularizerKind::kNone, "none"},
    {RegularizerKind::kDropout, "dropout"},
    {RegularizerKind::kSpatialDropout, "spatial_dropout"},
    {RegularizerKind::kDropBlock, "dropblock"},
    {RegularizerKind::kDropGraph, "dropgraph"},
    {RegularizerKind::kPartialReasoning, "partial_reasoning"},
}};
constexpr NameTable<AdjacencyMode, 6> kAdjacencyNames{{
    {AdjacencyMode::kEq6, "eq6"},
    {AdjacencyMode::kLearned, "learned"},
    {AdjacencyMode::kSimilarity, "similarity"},
    {AdjacencyMode::kIdentity, "identity"},
    {AdjacencyMode::kUniform, "uniform"},
    {AdjacencyMode::kZero, "zero"},
}};
constexpr NameTable<GeneratorKind, 4> kGeneratorNames{{
    {GeneratorKind::kGraph, "graph"},
    {GeneratorKind::kRandomNoise, "random_noise"},
    {GeneratorKind::kAvgPool, "avg_pool"},
    {GeneratorKind::kNone, "none"},
}};
constexpr NameTable<SchedulerKind, 6> kSchedulerNames{{
    {SchedulerKind::kF1, "f1"},
    {SchedulerKind::kF2, "f2"},
    {SchedulerKind::kF3, "f3"},
    {SchedulerKind::kF4, "f4"},
    {SchedulerKind::kF5, "f5"},
    {SchedulerKind::kConstant, "constant"},
}};
constexpr NameTable<SamplingStrategy, 2> kSamplingNames{{
    {SamplingStrategy::kRandom, "random"},
    {SamplingStrategy::kTop, "top"},
}};
constexpr NameTable<Application, 2> kApplicationNames{{
    {Application::kTrainOnly, "train_only"},
    {Application::kTrainAndInfer, "train_and_infer"},
}};

template <typename E, std::size_t N>
std::string_view name_of(const NameTable<E, N>& table, E v) {
  for (const auto& [key, name] : table) {
    if (key == v) return name;
  }
  return "?";
}

template <typename E, std::size_t N>
std::optional<E> parse_name(const NameTable<E, N>& table, std::string_view s) {
  for (const auto& [key, name] : table) {
    if (name == s) return key;
  }
  return std::nullopt;
}

}  // namespace

std::string_view to_string(RegularizerKind v) { return name_of(kKindNames, v); }
std::string_view to_string(AdjacencyMode v) { return name_of(kAdjacencyNames, v); }
std::string_view to_string(GeneratorKind v) { return name_of(kGeneratorNames, v); }
std::string_view to_string(SchedulerKind v) { return name_of(kSchedulerNames, v); }
std::string_view to_string(SamplingStrategy v) { return name_of(kSamplingNames, v); }
std::string_view to_string(Application v) { return name_of(kApplicationNames, v); }
std::optional<RegularizerKind> parse_regularizer_kind(std::string_view s) {
  return parse_name(kKindNames, s);
}
std::optional<AdjacencyMode> parse_adjacency_mode(std::string_view s) {
  return parse_name(kAdjacencyNames, s);
}
std::optional<GeneratorKind> parse_generator_kind(std::string_view s) {
  return parse_name(kGeneratorNames, s);
}
std::optional<SchedulerKind> parse_scheduler_kind(std::string_view s) {
  return parse_name(kSchedulerNames, s);
}
std::optional<SamplingStrategy> parse_sampling_strategy(std::string_view s) {
  return parse_name(kSamplingNames, s);
}
std::optional<Application> parse_application(std::string_view s) {
  return parse_name(kApplicationNames, s);
}

// ---- Configuration ------------------------------------------------------------

void RegularizerConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("regularizer.alpha", "must lie in [0, 1], got " + std::to_string(alpha));
  }
  if (!(rho_target >= 0.0 && rho_target < 1.0)) {
    throw ConfigError("regularizer.rho",
                      "must lie in [0, 1), got " + std::to_string(rho_target));
  }
  if (block_size == 0 || block_size % 2 == 0) {
    throw ConfigError("regularizer.block_size",
                      "must be an odd positive integer, got " + std::to_string(block_size));
  }
}

void RegularizerConfig::validate_at(std::size_t height, std::size_t width,
                                    std::size_t channels) const {
  validate();
  const bool blocks = kind == RegularizerKind::kDropBlock || kind == RegularizerKind::kDropGraph;
  if (blocks && block_size > std::min(height, width)) {
    throw ConfigError("regularizer.block_size",
                      "block of " + std::to_string(block_size) + " does not fit a " +
                          std::to_string(height) + "x" + std::to_string(width) + " feature map");
  }
  if (kind == RegularizerKind::kDropGraph && generator_kind == GeneratorKind::kGraph &&
      channels % 4 != 0) {
    throw ConfigError("regularizer.generator",
                      "graph generator needs channels divisible by 4, got " +
                          std::to_string(channels));
  }
}

// ---- Scheduling ---------------------------------------------------------------

double schedule_rho(const SchedulerState& s) {
  if (s.total_steps == 0) throw ContractError("schedule_rho: total_steps must be positive");
  if (s.step > s.total_steps) {
    throw ContractError("schedule_rho: step " + std::to_string(s.step) + " exceeds total " +
                        std::to_string(s.total_steps));
  }
  if (s.step == s.total_steps) return s.rho_target;
  const double r = static_cast<double>(s.step) / static_cast<double>(s.total_steps);
  switch (s.kind) {
    case SchedulerKind::kF1: return s.rho_target * r;
    case SchedulerKind::kF2: return s.rho_target * r * r;
    case SchedulerKind::kF3: return s.rho_target * std::sqrt(r);
    case SchedulerKind::kF4: return s.rho_target * 0.5 * (1.0 - std::cos(std::numbers::pi * r));
    case SchedulerKind::kF5: return s.rho_target * r * r * (3.0 - 2.0 * r);
    case SchedulerKind::kConstant: return s.rho_target;
  }
  return s.rho_target;
}

// ---- Dropout ------------------------------------------------------------------

namespace {

void check_rho(const char* op, double rho) {
  if (!(rho >= 0.0 && rho < 1.0)) {
    throw ContractError(std::string(op) + ": rho must lie in [0, 1), got " + std::to_string(rho));
  }
}

// out = x * gate(i) * scale, where gate is looked up per element.
Tensor apply_gate(const Tensor& x, std::vector<double> factor_per_element) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = factor_per_element[i] == 0.0 ? 0.0 : xv[i] * factor_per_element[i];
  }
  auto px = x.node_ptr();
  return Tensor::make_result(x.shape(), std::move(out), {x},
                             [px, f = std::move(factor_per_element)](detail::Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * f[i];
  });
}

}  // namespace

Tensor dropout(const Tensor& x, double rho, RngStream rng, Mode mode, bool rescale) {
  check_rho("dropout", rho);
  if (mode == Mode::kEval || rho == 0.0) return x;
  const double keep = rescale ? 1.0 / (1.0 - rho) : 1.0;
  std::vector<double> factor(x.numel());
  for (double& f : factor) f = rng.bernoulli(rho) ? 0.0 : keep;
  return apply_gate(x, std::move(factor));
}

Tensor spatial_dropout(const Tensor& x, double rho, RngStream rng, Mode mode, bool rescale) {
  check_rho("spatial_dropout", rho);
  if (x.rank() != 4) {
    throw DimensionError("spatial_dropout: expected (n, c, h, w), got " + shape_str(x.shape()));
  }
  if (mode == Mode::kEval || rho == 0.0) return x;
  const std::size_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const double keep = rescale ? 1.0 / (1.0 - rho) : 1.0;
  std::vector<double> factor(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    RngStream item = rng.child(b);
    for (std::size_t q = 0; q < plane; ++q) {
      const double f = item.bernoulli(rho) ? 0.0 : keep;
      for (std::size_t ch = 0; ch < c; ++ch) factor[(b * c + ch) * plane + q] = f;
    }
  }
  return apply_gate(x, std::move(factor));
}

// ---- Block masks --------------------------------------------------------------

double DropMask::dropped_fraction() const {
  if (gate.empty()) return 0.0;
  double kept = 0.0;
  for (double g : gate) kept += g;
  return 1.0 - kept / static_cast<double>(gate.size());
}

bool DropMask::any_dropped() const {
  return std::any_of(gate.begin(), gate.end(), [](double g) { return g == 0.0; });
}

namespace {

void check_block(std::size_t h, std::size_t w, std::size_t s, double rho) {
  check_rho("sample_block_mask", rho);
  if (s == 0 || s > std::min(h, w)) {
    throw ContractError("sample_block_mask: block size " + std::to_string(s) +
                        " does not fit a " + std::to_string(h) + "x" + std::to_string(w) +
                        " map");
  }
}

// Number of s-windows along an axis of length n that contain coordinate i.
std::size_t axis_cover(std::size_t i, std::size_t n, std::size_t s) {
  const std::size_t hi = std::min(i, n - s);
  const std::size_t lo = i + 1 >= s ? i + 1 - s : 0;
  return hi - lo + 1;
}

}  // namespace

double block_seed_probability_closed_form(std::size_t h, std::size_t w, std::size_t s,
                                          double rho) {
  check_block(h, w, s, rho);
  const double valid = static_cast<double>((h - s + 1) * (w - s + 1));
  return rho * static_cast<double>(h * w) / (static_cast<double>(s * s) * valid);
}

double block_seed_probability(std::size_t h, std::size_t w, std::size_t s, double rho) {
  check_block(h, w, s, rho);
  if (rho == 0.0) return 0.0;
  if (s == 1) return rho;
  // Histogram of window-cover counts over all positions.
  std::map<std::size_t, std::size_t> covers;
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t cy = axis_cover(y, h, s);
    for (std::size_t x = 0; x < w; ++x) ++covers[cy * axis_cover(x, w, s)];
  }
  const double positions = static_cast<double>(h * w);
  auto expected_drop = [&](double gamma) {
    double total = 0.0;
    for (const auto& [cover, count] : covers) {
      total += static_cast<double>(count) *
               -std::expm1(static_cast<double>(cover) * std::log1p(-gamma));
    }
    return total / positions;
  };
  // expected_drop is increasing in gamma; the closed form under-shoots rho.
  double lo = block_seed_probability_closed_form(h, w, s, rho);
  double hi = 1.0;
  if (expected_drop(lo) >= rho) return lo;
  for (int iter = 0; iter < 200 && hi - lo > 1e-17; ++iter) {
    const double mid = 0.5 * (lo + hi);
    (expected_drop(mid) < rho ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

DropMask sample_block_mask(std::size_t batch, std::size_t h, std::size_t w, std::size_t s,
                           double rho, const RngStream& rng) {
  check_block(h, w, s, rho);
  DropMask mask{batch, h, w, std::vector<double>(batch * h * w, 1.0)};
  if (rho == 0.0) return mask;
  const double gamma = block_seed_probability(h, w, s, rho);
  for (std::size_t b = 0; b < batch; ++b) {
    RngStream item = rng.child(b);
    double* gate = mask.gate.data() + b * h * w;
    for (std::size_t y0 = 0; y0 + s <= h; ++y0) {
      for (std::size_t x0 = 0; x0 + s <= w; ++x0) {
        if (!item.bernoulli(gamma)) continue;
        for (std::size_t dy = 0; dy < s; ++dy) {
          std::fill_n(gate + (y0 + dy) * w + x0, s, 0.0);
        }
      }
    }
  }
  return mask;
}

// ---- Vertex sets ----------------------------------------------------------------

Tensor VertexSet::item(std::size_t b) const {
  if (count(b) == 0) throw ContractError("VertexSet::item: item has no vertices");
  return slice_rows(values, offsets[b], offsets[b + 1]);
}

Tensor gather_positions(const Tensor& x, std::span<const Position> positions) {
  if (x.rank() != 4) {
    throw DimensionError("gather_positions: expected (n, c, h, w), got " + shape_str(x.shape()));
  }
  if (positions.empty()) throw ContractError("gather_positions: no positions");
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto xv = x.values();
  std::vector<std::size_t> flat(positions.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const Position& p = positions[i];
    if (p.batch >= x.dim(0) || p.y >= h || p.x >= w) {
      throw DimensionError("gather_positions: position outside " + shape_str(x.shape()));
    }
    flat[i] = p.batch * c * h * w + p.y * w + p.x;
  }
  std::vector<double> out(positions.size() * c);
  for (std::size_t i = 0; i < flat.size(); ++i) {
    for (std::size_t ch = 0; ch < c; ++ch) out[i * c + ch] = xv[flat[i] + ch * h * w];
  }
  auto px = x.node_ptr();
  const std::size_t plane = h * w;
  return Tensor::make_result({positions.size(), c}, std::move(out), {x},
                             [px, flat = std::move(flat), c, plane](detail::Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < flat.size(); ++i) {
      for (std::size_t ch = 0; ch < c; ++ch) g[flat[i] + ch * plane] += self.grad[i * c + ch];
    }
  });
}

namespace {

VertexSet finish_vertices(const Tensor& x, std::vector<Position> indices,
                          std::vector<std::size_t> offsets) {
  VertexSet v{std::move(indices), std::move(offsets), Tensor()};
  if (!v.indices.empty()) v.values = gather_positions(x, v.indices);
  return v;
}

}  // namespace

VertexSet sample_vertices(const Tensor& x, double alpha, const RngStream& rng) {
  if (x.rank() != 4) {
    throw DimensionError("sample_vertices: expected (n, c, h, w), got " + shape_str(x.shape()));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ContractError("sample_vertices: alpha must lie in [0, 1]");
  }
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  std::vector<Position> indices;
  std::vector<std::size_t> offsets{0};
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t before = indices.size();
    if (alpha > 0.0) {
      RngStream item = rng.child(b);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          if (item.bernoulli(alpha)) indices.push_back({b, y, xx});
        }
      }
      if (indices.size() == before) {
        const std::size_t q = item.index(h * w);
        indices.push_back({b, q / w, q % w});
      }
    }
    offsets.push_back(indices.size());
  }
  return finish_vertices(x, std::move(indices), std::move(offsets));
}

VertexSet top_vertices(const Tensor& x, double alpha) {
  if (x.rank() != 4) {
    throw DimensionError("top_vertices: expected (n, c, h, w), got " + shape_str(x.shape()));
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ContractError("top_vertices: alpha must lie in [0, 1]");
  }
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t plane = h * w;
  const auto k = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(plane) - 1e-9));
  const auto xv = x.values();
  std::vector<Position> indices;
  std::vector<std::size_t> offsets{0};
  std::vector<double> score(plane);
  std::vector<std::size_t> order(plane);
  for (std::size_t b = 0; b < batch; ++b) {
    if (k > 0) {
      std::fill(score.begin(), score.end(), 0.0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = xv.data() + (b * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) score[q] += std::abs(src[q]);
      }
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t l, std::size_t r) { return score[l] > score[r]; });
      std::vector<std::size_t> chosen(order.begin(),
                                      order.begin() + static_cast<std::ptrdiff_t>(std::min(k, plane)));
      std::sort(chosen.begin(), chosen.end());
      for (std::size_t q : chosen) indices.push_back({b, q / w, q % w});
    }
    offsets.push_back(indices.size());
  }
  return finish_vertices(x, std::move(indices), std::move(offsets));
}

// ---- Adjacency and graph reasoning --------------------------------------------

namespace {

Tensor l2_normalize_rows(const Tensor& v) {
  const std::size_t n = v.dim(0), c = v.dim(1);
  const auto vv = v.values();
  std::vector<double> norms(n), out(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += vv[i * c + j] * vv[i * c + j];
    norms[i] = std::max(std::sqrt(ss), 1e-12);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = vv[i * c + j] / norms[i];
  }
  auto pv = v.node_ptr();
  std::vector<double> y = out;
  return Tensor::make_result({n, c}, std::move(out), {v},
                             [pv, y = std::move(y), norms = std::move(norms), n, c](
                                 detail::Node& self) {
    auto& g = pv->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * self.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        g[i * c + j] += (self.grad[i * c + j] - y[i * c + j] * dot) / norms[i];
      }
    }
  });
}

Tensor identity_matrix(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return Tensor::from({n, n}, std::move(v));
}

}  // namespace

Tensor similarity(const Tensor& v, bool normalize) {
  if (v.rank() != 2) throw DimensionError("similarity: expected (n, c), got " + shape_str(v.shape()));
  const Tensor u = normalize ? l2_normalize_rows(v) : v;
  return matmul(u, transpose(u));
}

Tensor tile_crop(const Tensor& m, std::size_t n) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw DimensionError("tile_crop: expected a square matrix, got " + shape_str(m.shape()));
  }
  const std::size_t k = m.dim(0);
  const auto mv = m.values();
  std::vector<double> out(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = mv[(i % k) * k + (j % k)];
  }
  auto pm = m.node_ptr();
  return Tensor::make_result({n, n}, std::move(out), {m}, [pm, n, k](detail::Node& self) {
    auto& g = pm->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) g[(i % k) * k + (j % k)] += self.grad[i * n + j];
    }
  });
}

AdjacencyMatrix build_adjacency(const Tensor& v, AdjacencyMode mode, const Tensor& learned,
                                bool normalize_similarity) {
  if (!v.defined() || v.rank() != 2) {
    throw ContractError("build_adjacency: needs a non-empty (n, c) vertex matrix");
  }
  const std::size_t n = v.dim(0);
  switch (mode) {
    case AdjacencyMode::kEq6: {
      const double scale = 1.0 / static_cast<double>(std::max<std::size_t>(n - 1, 1));
      const Tensor soft = softmax_rows(similarity(v, normalize_similarity));
      return {affine(soft, -scale, scale), mode};
    }
    case AdjacencyMode::kSimilarity:
      return {softmax_rows(similarity(v, normalize_similarity)), mode};
    case AdjacencyMode::kLearned:
      if (!learned.defined()) {
        throw ContractError("build_adjacency: learned mode needs the trainable matrix");
      }
      return {tile_crop(learned, n), mode};
    case AdjacencyMode::kIdentity:
      return {identity_matrix(n), mode};
    case AdjacencyMode::kUniform:
      return {Tensor::full({n, n}, 1.0 / static_cast<double>(n)), mode};
    case AdjacencyMode::kZero:
      return {Tensor::zeros({n, n}), mode};
  }
  throw ContractError("build_adjacency: unknown mode");
}

Tensor graph_reasoning(const Tensor& x, const AdjacencyMatrix& a, const Tensor& w) {
  return add(x, matmul(matmul(a.entries, x), w));
}

GraphGeneratorParams GraphGeneratorParams::make(std::size_t channels, RngStream rng) {
  if (channels % 4 != 0 || channels == 0) {
    throw ConfigError("regularizer.generator",
                      "graph generator needs channels divisible by 4, got " +
                          std::to_string(channels));
  }
  const std::size_t reduced = channels / 4;
  GraphGeneratorParams p;
  p.w_in = Tensor::zeros({channels, reduced}, true);
  p.w_mid = Tensor::zeros({reduced, reduced}, true);
  p.w_out = Tensor::zeros({reduced, channels}, true);
  kaiming_normal(p.w_in, channels, rng.child(0));
  kaiming_normal(p.w_mid, reduced, rng.child(1));
  kaiming_normal(p.w_out, reduced, rng.child(2));
  return p;
}

Tensor distortion_generator_graph(const Tensor& v, const AdjacencyMatrix& a,
                                  const GraphGeneratorParams& p) {
  if (v.rank() != 2 || v.dim(1) % 4 != 0) {
    throw ConfigError("regularizer.generator",
                      "graph generator needs (n, c) vertices with c divisible by 4, got " +
                          shape_str(v.shape()));
  }
  const Tensor& adj = a.entries;
  const Tensor h1 = relu(matmul(matmul(adj, v), p.w_in));
  const Tensor h2 = relu(add(h1, matmul(matmul(adj, h1), p.w_mid)));
  return matmul(matmul(adj, h2), p.w_out);
}

Tensor distortion_generator_alt(const Tensor& v, GeneratorKind kind, RngStream rng) {
  if (!v.defined() || v.rank() != 2) {
    throw ContractError("distortion_generator_alt: needs a non-empty (n, c) vertex matrix");
  }
  const std::size_t n = v.dim(0), c = v.dim(1);
  switch (kind) {
    case GeneratorKind::kAvgPool:
      return matmul(Tensor::full({n, 1}, 1.0), mean_rows(v));
    case GeneratorKind::kRandomNoise: {
      const auto vv = v.values();
      std::vector<double> stddev(c, 0.0);
      for (std::size_t j = 0; j < c; ++j) {
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += vv[i * c + j];
        mu /= static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) ss += (vv[i * c + j] - mu) * (vv[i * c + j] - mu);
        stddev[j] = std::sqrt(ss / static_cast<double>(n));
      }
      std::vector<double> out(n * c);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = rng.normal() * stddev[j];
      }
      return Tensor::from({n, c}, std::move(out));
    }
    case GeneratorKind::kGraph:
    case GeneratorKind::kNone:
      break;
  }
  throw ContractError("distortion_generator_alt: kind must be random_noise or avg_pool");
}

Tensor pool_expand_apply(const Tensor& x, const DropMask& m, const Tensor& d,
                         std::span<const std::size_t> offsets, RngStream rng) {
  if (x.rank() != 4) {
    throw DimensionError("pool_expand_apply: expected (n, c, h, w), got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (m.batch != batch || m.height != h || m.width != w) {
    throw DimensionError("pool_expand_apply: mask does not match " + shape_str(x.shape()));
  }
  const std::size_t plane = h * w;

  // One pooled c-vector per item.
  Tensor pooled;
  if (d.defined()) {
    if (offsets.size() != batch + 1 || d.rank() != 2 || d.dim(1) != c ||
        offsets.back() != d.dim(0)) {
      throw DimensionError("pool_expand_apply: distortions " + shape_str(d.shape()) +
                           " do not match the vertex offsets");
    }
    std::vector<Tensor> rows;
    rows.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      if (offsets[b + 1] > offsets[b]) {
        rows.push_back(mean_rows(slice_rows(d, offsets[b], offsets[b + 1])));
      } else {
        rows.push_back(Tensor::zeros({1, c}));
      }
    }
    pooled = concat_rows(rows, c);
  } else {
    pooled = Tensor::zeros({batch, c});
  }

  // Multipliers in (0, 1), one per dropped position, channel-shared.
  std::vector<double> u(batch * plane, 0.0);
  for (std::size_t b = 0; b < batch; ++b) {
    RngStream item = rng.child(b);
    for (std::size_t q = 0; q < plane; ++q) {
      if (m.gate[b * plane + q] == 0.0) u[b * plane + q] = item.uniform_open();
    }
  }

  const auto xv = x.values();
  const auto pv = pooled.values();
  std::vector<double> out(xv.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * plane;
      const double r = pv[b * c + ch];
      for (std::size_t q = 0; q < plane; ++q) {
        out[base + q] = m.gate[b * plane + q] != 0.0 ? xv[base + q] : r * u[b * plane + q];
      }
    }
  }
  auto px = x.node_ptr();
  auto pp = pooled.node_ptr();
  return Tensor::make_result(
      x.shape(), std::move(out), {x, pooled},
      [px, pp, gate = m.gate, u = std::move(u), batch, c, plane](detail::Node& self) {
        if (px->requires_grad) {
          auto& g = px->grad_buffer();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (b * c + ch) * plane;
              for (std::size_t q = 0; q < plane; ++q) {
                if (gate[b * plane + q] != 0.0) g[base + q] += self.grad[base + q];
              }
            }
          }
        }
        if (pp->requires_grad) {
          auto& g = pp->grad_buffer();
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t base = (b * c + ch) * plane;
              double s = 0.0;
              for (std::size_t q = 0; q < plane; ++q) s += self.grad[base + q] * u[b * plane + q];
              g[b * c + ch] += s;
            }
          }
        }
      });
}

Tensor scatter_positions(const Tensor& x, std::span<const Position> positions,
                         const Tensor& rows) {
  if (x.rank() != 4) {
    throw DimensionError("scatter_positions: expected (n, c, h, w), got " + shape_str(x.shape()));
  }
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3), plane = h * w;
  if (rows.rank() != 2 || rows.dim(0) != positions.size() || rows.dim(1) != c) {
    throw DimensionError("scatter_positions: rows " + shape_str(rows.shape()) +
                         " do not match " + std::to_string(positions.size()) + " positions");
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  std::vector<std::size_t> flat(positions.size());
  std::vector<char> replaced(x.numel() / c, 0);
  const auto rv = rows.values();
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const Position& p = positions[i];
    flat[i] = p.batch * c * plane + p.y * w + p.x;
    replaced[p.batch * plane + p.y * w + p.x] = 1;
    for (std::size_t ch = 0; ch < c; ++ch) out[flat[i] + ch * plane] = rv[i * c + ch];
  }
  auto px = x.node_ptr();
  auto pr = rows.node_ptr();
  return Tensor::make_result(
      x.shape(), std::move(out), {x, rows},
      [px, pr, flat = std::move(flat), replaced = std::move(replaced), c, plane](
          detail::Node& self) {
        if (px->requires_grad) {
          auto& g = px->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t b = i / (c * plane);
            if (!replaced[b * plane + i % plane]) g[i] += self.grad[i];
          }
        }
        if (pr->requires_grad) {
          auto& g = pr->grad_buffer();
          for (std::size_t i = 0; i < flat.size(); ++i) {
            for (std::size_t ch = 0; ch < c; ++ch) g[i * c + ch] += self.grad[flat[i] + ch * plane];
          }
        }
      });
}

// ---- DropGraph ------------------------------------------------------------------

DropGraph::DropGraph(const RegularizerConfig& cfg, std::size_t height, std::size_t width,
                     std::size_t channels, RngStream init_rng)
    : cfg_(cfg) {
  cfg_.validate_at(height, width, channels);
  if (cfg_.generator_kind == GeneratorKind::kGraph) {
    params_ = GraphGeneratorParams::make(channels, init_rng.child(0));
    if (cfg_.adjacency_mode == AdjacencyMode::kLearned) {
      const auto k = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::ceil(cfg_.alpha * static_cast<double>(height * width))));
      learned_ = Tensor::full({k, k}, 1.0 / static_cast<double>(k), true);
    }
  }
}

Tensor DropGraph::generate(const VertexSet& v, RngStream rng) const {
  if (v.size() == 0) return Tensor();
  const std::size_t c = v.values.dim(1);
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b + 1 < v.offsets.size(); ++b) {
    if (v.count(b) == 0) continue;
    const Tensor vb = v.item(b);
    switch (cfg_.generator_kind) {
      case GeneratorKind::kGraph: {
        const AdjacencyMatrix a =
            build_adjacency(vb, cfg_.adjacency_mode, learned_, cfg_.normalize_similarity);
        parts.push_back(distortion_generator_graph(vb, a, params_));
        break;
      }
      case GeneratorKind::kRandomNoise:
      case GeneratorKind::kAvgPool:
        parts.push_back(distortion_generator_alt(vb, cfg_.generator_kind, rng.child(b)));
        break;
      case GeneratorKind::kNone:
        parts.push_back(Tensor::zeros({v.count(b), c}));
        break;
    }
  }
  return concat_rows(parts, c);
}

Tensor DropGraph::forward(const Tensor& x, const StepContext& ctx,
                          const DropMask* shared_mask) const {
  if (ctx.mode == Mode::kEval) return x;
  if (x.rank() != 4) {
    throw DimensionError("DropGraph: expected (n, c, h, w), got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), h = x.dim(2), w = x.dim(3);
  DropMask own;
  if (shared_mask == nullptr) {
    own = sample_block_mask(batch, h, w, cfg_.block_size, ctx.rho,
                            ctx.rng.child(rng_site::kMask));
    shared_mask = &own;
  }
  if (!shared_mask->any_dropped()) return x;

  const RngStream multipliers = ctx.rng.child(rng_site::kMultipliers);
  if (cfg_.generator_kind == GeneratorKind::kNone || cfg_.alpha == 0.0) {
    const std::vector<std::size_t> no_vertices(batch + 1, 0);
    return pool_expand_apply(x, *shared_mask, Tensor(), no_vertices, multipliers);
  }
  const VertexSet v = sample_vertices(x, cfg_.alpha, ctx.rng.child(rng_site::kVertices));
  const Tensor d = generate(v, ctx.rng.child(rng_site::kNoise));
  return pool_expand_apply(x, *shared_mask, d, v.offsets, multipliers);
}

std::vector<NamedTensor> DropGraph::parameters(const std::string& prefix) const {
  std::vector<NamedTensor> out;
  if (params_.w_in.defined()) {
    out.push_back({prefix + ".w_in", params_.w_in});
    out.push_back({prefix + ".w_mid", params_.w_mid});
    out.push_back({prefix + ".w_out", params_.w_out});
  }
  if (learned_.defined()) out.push_back({prefix + ".adjacency", learned_});
  return out;
}

// ---- Partial graph reasoning ------------------------------------------------------

PartialReasoning::PartialReasoning(const RegularizerConfig& cfg, std::size_t channels,
                                   RngStream init_rng)
    : cfg_(cfg), weight_(Tensor::zeros({channels, channels}, true)) {
  cfg_.validate();
  kaiming_normal(weight_, channels, init_rng);
}

Tensor PartialReasoning::forward(const Tensor& x, const StepContext& ctx) const {
  const bool active = ctx.mode == Mode::kTrain || cfg_.application == Application::kTrainAndInfer;
  if (!active || cfg_.alpha == 0.0) return x;
  const VertexSet v = cfg_.sampling == SamplingStrategy::kTop
                          ? top_vertices(x, cfg_.alpha)
                          : sample_vertices(x, cfg_.alpha, ctx.rng.child(rng_site::kVertices));
  if (v.size() == 0) return x;
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b + 1 < v.offsets.size(); ++b) {
    if (v.count(b) == 0) continue;
    const Tensor vb = v.item(b);
    const AdjacencyMatrix a =
        build_adjacency(vb, AdjacencyMode::kEq6, Tensor(), cfg_.normalize_similarity);
    parts.push_back(matmul(matmul(a.entries, vb), weight_));
  }
  return scatter_positions(x, v.indices, concat_rows(parts, x.dim(1)));
}

std::vector<NamedTensor> PartialReasoning::parameters(const std::string& prefix) const {
  return {{prefix + ".weight", weight_}};
}

// ---- Regularizer slot -------------------------------------------------------------

Regularizer::Regularizer(const RegularizerConfig& cfg, std::size_t height, std::size_t width,
                         std::size_t channels, RngStream init_rng)
    : cfg_(cfg) {
  cfg_.validate_at(height, width, channels);
  switch (cfg_.kind) {
    case RegularizerKind::kDropBlock: {
      RegularizerConfig blocks = cfg_;
      blocks.generator_kind = GeneratorKind::kNone;
      dropgraph_.emplace(blocks, height, width, channels, init_rng);
      break;
    }
    case RegularizerKind::kDropGraph:
      dropgraph_.emplace(cfg_, height, width, channels, init_rng);
      break;
    case RegularizerKind::kPartialReasoning:
      partial_.emplace(cfg_, channels, init_rng);
      break;
    default:
      break;
  }
}

Tensor Regularizer::forward(const Tensor& x, const StepContext& ctx,
                            const DropMask* shared_mask) const {
  switch (cfg_.kind) {
    case RegularizerKind::kNone:
      return x;
    case RegularizerKind::kDropout:
      return dropout(x, ctx.rho, ctx.rng.child(rng_site::kMask), ctx.mode, cfg_.rescale_dropout);
    case RegularizerKind::kSpatialDropout:
      return spatial_dropout(x, ctx.rho, ctx.rng.child(rng_site::kMask), ctx.mode,
                             cfg_.rescale_dropout);
    case RegularizerKind::kDropBlock:
    case RegularizerKind::kDropGraph:
      return dropgraph_->forward(x, ctx, shared_mask);
    case RegularizerKind::kPartialReasoning:
      return partial_->forward(x, ctx);
  }
  return x;
}

std::vector<NamedTensor> Regularizer::parameters(const std::string& prefix) const {
  if (dropgraph_) return dropgraph_->parameters(prefix);
  if (partial_) return partial_->parameters(prefix);
  return {};
}

}  // namespace dropgraph
