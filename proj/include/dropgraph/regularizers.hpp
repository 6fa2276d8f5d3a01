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

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dropgraph/nn.hpp"
#include "dropgraph/rng.hpp"
#include "dropgraph/tensor.hpp"

namespace dropgraph {

// ---- Configuration ------------------------------------------------------------

enum class RegularizerKind { kNone, kDropout, kSpatialDropout, kDropBlock, kDropGraph,
                             kPartialReasoning };
enum class AdjacencyMode { kEq6, kLearned, kSimilarity, kIdentity, kUniform, kZero };
enum class GeneratorKind { kGraph, kRandomNoise, kAvgPool, kNone };
enum class SchedulerKind { kF1, kF2, kF3, kF4, kF5, kConstant };
/// How partial graph reasoning picks its vertices.
enum class SamplingStrategy { kRandom, kTop };
/// Whether partial graph reasoning also runs at inference.
enum class Application { kTrainOnly, kTrainAndInfer };

std::string_view to_string(RegularizerKind v);
std::string_view to_string(AdjacencyMode v);
std::string_view to_string(GeneratorKind v);
std::string_view to_string(SchedulerKind v);
std::string_view to_string(SamplingStrategy v);
std::string_view to_string(Application v);
std::optional<RegularizerKind> parse_regularizer_kind(std::string_view s);
std::optional<AdjacencyMode> parse_adjacency_mode(std::string_view s);
std::optional<GeneratorKind> parse_generator_kind(std::string_view s);
std::optional<SchedulerKind> parse_scheduler_kind(std::string_view s);
std::optional<SamplingStrategy> parse_sampling_strategy(std::string_view s);
std::optional<Application> parse_application(std::string_view s);

struct RegularizerConfig {
  RegularizerKind kind = RegularizerKind::kDropGraph;
  double alpha = 0.2;       // vertex sampling ratio
  double rho_target = 0.1;  // drop probability after warm-up
  std::size_t block_size = 3;
  AdjacencyMode adjacency_mode = AdjacencyMode::kEq6;
  GeneratorKind generator_kind = GeneratorKind::kGraph;
  SchedulerKind scheduler_kind = SchedulerKind::kF1;
  bool rescale_dropout = false;
  /// L2-normalize vertex vectors before the dot-product similarity.
  bool normalize_similarity = false;
  SamplingStrategy sampling = SamplingStrategy::kRandom;
  Application application = Application::kTrainOnly;

  /// Throws ConfigError naming the first invalid field. Pass the spatial
  /// size at the insertion point to also check the block size against it.
  void validate() const;
  void validate_at(std::size_t height, std::size_t width, std::size_t channels) const;

  bool operator==(const RegularizerConfig&) const = default;
};

// ---- Scheduling ---------------------------------------------------------------

struct SchedulerState {
  std::size_t step = 0;
  std::size_t total_steps = 1;
  SchedulerKind kind = SchedulerKind::kF1;
  double rho_target = 0.1;
};

/// rho(t) with r = step / total_steps:
///   f1 = rho r, f2 = rho r^2, f3 = rho sqrt(r), f4 = rho (1 - cos(pi r)) / 2,
///   f5 = rho r^2 (3 - 2r), constant = rho.
double schedule_rho(const SchedulerState& s);

// ---- Element and position dropout -------------------------------------------

/// Zeroes each scalar with probability rho in train mode; identity in eval.
/// Kept values are scaled by 1/(1-rho) only when `rescale` is set.
Tensor dropout(const Tensor& x, double rho, RngStream rng, Mode mode, bool rescale = false);

/// Like dropout but the gate is drawn per (batch, y, x) and shared by all channels.
Tensor spatial_dropout(const Tensor& x, double rho, RngStream rng, Mode mode,
                       bool rescale = false);

// ---- Block masks --------------------------------------------------------------

/// Spatial keep-gate (batch, h, w) shared across channels; 1 keeps, 0 drops.
struct DropMask {
  std::size_t batch = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> gate;

  double dropped_fraction() const;
  bool any_dropped() const;
  double at(std::size_t b, std::size_t y, std::size_t x) const {
    return gate[(b * height + y) * width + x];
  }
};

/// Closed-form seed probability rho h w / (s^2 (h-s+1)(w-s+1)). Ignores block
/// overlaps, so it under-drops for large rho * s^2.
double block_seed_probability_closed_form(std::size_t h, std::size_t w, std::size_t s,
                                          double rho);

/// Seed probability gamma whose expected dropped fraction, overlaps included,
/// equals rho: mean over positions p of 1 - (1 - gamma)^cover(p) = rho, where
/// cover(p) counts the s x s windows containing p.
double block_seed_probability(std::size_t h, std::size_t w, std::size_t s, double rho);

/// Seeds are Bernoulli(gamma) on the (h-s+1) x (w-s+1) top-left corners of
/// every window that fits inside the map; each seed drops its s x s window.
/// Item b draws from rng.child(b).
DropMask sample_block_mask(std::size_t batch, std::size_t h, std::size_t w, std::size_t s,
                           double rho, const RngStream& rng);

// ---- Vertex sets ----------------------------------------------------------------

struct Position {
  std::size_t batch;
  std::size_t y;
  std::size_t x;
  bool operator==(const Position&) const = default;
};

/// Sampled feature vectors grouped by batch item. `offsets` has batch + 1
/// entries; rows offsets[b]..offsets[b+1] of `values` belong to item b.
/// `values` is undefined when nothing was sampled.
struct VertexSet {
  std::vector<Position> indices;
  std::vector<std::size_t> offsets;
  Tensor values;  // (n, c)

  std::size_t size() const { return indices.size(); }
  std::size_t count(std::size_t b) const { return offsets[b + 1] - offsets[b]; }
  /// Item b's rows as an (n_b, c) tensor on the tape. Requires count(b) > 0.
  Tensor item(std::size_t b) const;
};

/// Gathers the channel vectors at `positions` into an (n, c) matrix.
Tensor gather_positions(const Tensor& x, std::span<const Position> positions);

/// Each spatial position joins V independently with probability alpha. When
/// alpha > 0 and an item's draw is empty, one uniformly random position is
/// forced in. Item b draws from rng.child(b).
VertexSet sample_vertices(const Tensor& x, double alpha, const RngStream& rng);

/// The ceil(alpha h w) positions with the largest summed absolute activation
/// per item (ties broken by position order).
VertexSet top_vertices(const Tensor& x, double alpha);

// ---- Adjacency and graph reasoning --------------------------------------------

struct AdjacencyMatrix {
  Tensor entries;  // (n, n)
  AdjacencyMode mode = AdjacencyMode::kEq6;
};

/// Dot-product similarity of vertex rows, (n, c) -> (n, n).
Tensor similarity(const Tensor& v, bool normalize);

/// eq6: (1 - softmax_rows(sim)) / max(n - 1, 1); similarity: softmax_rows(sim);
/// identity: I; uniform: 1/n; zero: 0. For `learned`, pass the trainable
/// (k, k) matrix; it is tiled/cropped to (n, n).
AdjacencyMatrix build_adjacency(const Tensor& v, AdjacencyMode mode,
                                const Tensor& learned = Tensor(),
                                bool normalize_similarity = false);

/// Residual graph convolution x + a x w.
Tensor graph_reasoning(const Tensor& x, const AdjacencyMatrix& a, const Tensor& w);

/// Entry (i, j) of the result is m[i mod k][j mod k].
Tensor tile_crop(const Tensor& m, std::size_t n);

struct GraphGeneratorParams {
  Tensor w_in;   // (c, c/4)
  Tensor w_mid;  // (c/4, c/4)
  Tensor w_out;  // (c/4, c)

  static GraphGeneratorParams make(std::size_t channels, RngStream rng);
};

/// Three GCN layers sharing a:
///   h1 = relu(a V w_in); h2 = relu(h1 + a h1 w_mid); out = a h2 w_out.
Tensor distortion_generator_graph(const Tensor& v, const AdjacencyMatrix& a,
                                  const GraphGeneratorParams& p);

/// random_noise: N(0, 1) scaled by V's per-channel standard deviation (no
/// gradient); avg_pool: every row is the channel-wise mean of V.
Tensor distortion_generator_alt(const Tensor& v, GeneratorKind kind, RngStream rng);

/// Pools each item's distortion rows to one c-vector and writes
/// pooled * u into every dropped position, with u ~ U(0, 1) drawn per
/// dropped (batch, y, x) from `rng` and shared across channels. Kept
/// positions pass x through untouched. Items without vertex rows get zero
/// distortion. `d` may be undefined when no item has vertices.
Tensor pool_expand_apply(const Tensor& x, const DropMask& m, const Tensor& d,
                         std::span<const std::size_t> offsets, RngStream rng);

/// Replaces x's vectors at `positions` with the rows of `rows`.
Tensor scatter_positions(const Tensor& x, std::span<const Position> positions,
                         const Tensor& rows);

// ---- Regularizer modules --------------------------------------------------------

/// Per-forward stochastic context handed to a regularizer.
struct StepContext {
  Mode mode = Mode::kTrain;
  RngStream rng{0};
  double rho = 0.0;  // scheduled drop probability for this step
};

/// One DropGraph instance: block mask branch plus graph branch.
class DropGraph {
 public:
  /// `height`, `width`, `channels` describe the feature map at the insertion
  /// point; they size the learned adjacency and validate the config.
  DropGraph(const RegularizerConfig& cfg, std::size_t height, std::size_t width,
            std::size_t channels, RngStream init_rng);

  /// Eval mode returns x itself. In train mode, a mask drawn from
  /// ctx.rng.child(kMask) (or `shared_mask` when given) selects dropped
  /// positions, which receive pooled generator output times fresh multipliers.
  Tensor forward(const Tensor& x, const StepContext& ctx,
                 const DropMask* shared_mask = nullptr) const;

  /// The distortion rows for a sampled vertex set (exposed for tests).
  Tensor generate(const VertexSet& v, RngStream rng) const;

  std::vector<NamedTensor> parameters(const std::string& prefix) const;
  const RegularizerConfig& config() const { return cfg_; }
  const GraphGeneratorParams& generator_params() const { return params_; }
  const Tensor& learned_adjacency() const { return learned_; }

 private:
  RegularizerConfig cfg_;
  GraphGeneratorParams params_;
  Tensor learned_;
};

/// Partial graph reasoning: sampled vectors are replaced by A V W with the
/// eq6 adjacency, everything else passes through.
class PartialReasoning {
 public:
  PartialReasoning(const RegularizerConfig& cfg, std::size_t channels, RngStream init_rng);

  Tensor forward(const Tensor& x, const StepContext& ctx) const;
  std::vector<NamedTensor> parameters(const std::string& prefix) const;

 private:
  RegularizerConfig cfg_;
  Tensor weight_;  // (c, c)
};

/// A regularizer insertion point of any kind.
class Regularizer {
 public:
  Regularizer() = default;
  Regularizer(const RegularizerConfig& cfg, std::size_t height, std::size_t width,
              std::size_t channels, RngStream init_rng);

  RegularizerKind kind() const { return cfg_.kind; }
  bool active() const { return cfg_.kind != RegularizerKind::kNone; }
  /// Whether forward does anything in `mode`. Only partial reasoning with
  /// train_and_infer runs at inference.
  bool active_in(Mode mode) const {
    if (mode == Mode::kTrain) return active();
    return cfg_.kind == RegularizerKind::kPartialReasoning &&
           cfg_.application == Application::kTrainAndInfer;
  }
  Tensor forward(const Tensor& x, const StepContext& ctx,
                 const DropMask* shared_mask = nullptr) const;
  std::vector<NamedTensor> parameters(const std::string& prefix) const;

 private:
  RegularizerConfig cfg_{.kind = RegularizerKind::kNone};
  std::optional<DropGraph> dropgraph_;
  std::optional<PartialReasoning> partial_;
};

}  // namespace dropgraph
