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
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dropgraph/nn.hpp"
#include "dropgraph/regularizers.hpp"
#include "dropgraph/rng.hpp"
#include "dropgraph/tensor.hpp"

namespace dropgraph {

// ---- Tiny residual CNN ----------------------------------------------------------

struct GroupSpec {
  std::size_t blocks = 2;
  std::size_t channels = 16;
  bool operator==(const GroupSpec&) const = default;
};

struct TinyResNetConfig {
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::size_t stem_channels = 16;
  std::vector<GroupSpec> groups{{2, 16}, {2, 32}};
  std::size_t classes = 4;
  /// Group indices that receive a regularizer after every block.
  std::vector<std::size_t> regularize_groups{1};
  /// Also distort the skip feature of regularized blocks (block-mask kinds only).
  bool regularize_skip = true;
  RegularizerConfig regularizer{.kind = RegularizerKind::kNone};

  void validate() const;
  bool operator==(const TinyResNetConfig&) const = default;
};

/// Stem conv-norm-relu, residual groups (first block of every later group
/// halves the resolution), global average pooling and a linear head.
///
/// Each block computes relu(bn(conv(relu(bn(conv(x))))) + skip). In
/// regularized groups the skip feature is distorted before the sum and the
/// block output after the activation; both instances share one block mask.
class TinyResNet {
 public:
  TinyResNet(const TinyResNetConfig& cfg, RngStream init_rng);

  /// Logits (n, classes). ctx.rng is split per block; ctx.mode drives both
  /// normalization and regularizers.
  Tensor forward(const Tensor& x, const StepContext& ctx);

  std::vector<NamedTensor> parameters() const;
  /// Parameters plus normalization running statistics.
  std::vector<NamedTensor> state() const;
  /// Copies values by name. With `strict`, every entry of state() must be present.
  void load_state(const std::vector<NamedTensor>& entries, bool strict = true);

  const TinyResNetConfig& config() const { return cfg_; }
  std::size_t block_count() const { return blocks_.size(); }

 private:
  struct Block {
    ConvParams conv1;
    NormState bn1;
    ConvParams conv2;
    NormState bn2;
    std::optional<ConvParams> proj;
    std::optional<NormState> proj_bn;
    Regularizer main_reg;
    Regularizer skip_reg;
    std::size_t out_size = 0;
  };

  TinyResNetConfig cfg_;
  ConvParams stem_;
  NormState stem_bn_;
  std::vector<Block> blocks_;
  LinearParams head_;
};

// ---- Two-layer GCN ----------------------------------------------------------------

struct GraphInstance {
  Tensor node_features;         // (n, f)
  Tensor normalized_adjacency;  // (n, n), D^-1/2 (A + I) D^-1/2
  std::vector<std::size_t> labels;
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> val_index;
  std::vector<std::size_t> test_index;

  std::size_t num_nodes() const { return labels.size(); }
};

/// Symmetric degree normalization of A + I for a 0/1 adjacency (n, n).
Tensor normalize_adjacency(const std::vector<double>& adjacency, std::size_t n);

struct TwoLayerGcnConfig {
  std::size_t in_features = 16;
  std::size_t hidden = 16;
  std::size_t classes = 3;
  /// Placed before the second layer; block masks degenerate to per-node gates (s = 1).
  RegularizerConfig regularizer{.kind = RegularizerKind::kNone, .block_size = 1};

  void validate(std::size_t num_nodes) const;
  bool operator==(const TwoLayerGcnConfig&) const = default;
};

/// h = relu(A X W1); h' = regularizer(h); logits = A h' W2.
class TwoLayerGcn {
 public:
  TwoLayerGcn(const TwoLayerGcnConfig& cfg, std::size_t num_nodes, RngStream init_rng);

  Tensor forward(const GraphInstance& g, const StepContext& ctx) const;

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> state() const { return parameters(); }
  void load_state(const std::vector<NamedTensor>& entries, bool strict = true);
  const TwoLayerGcnConfig& config() const { return cfg_; }

 private:
  TwoLayerGcnConfig cfg_;
  Tensor w1_;
  Tensor w2_;
  Regularizer reg_;
};

// ---- Checkpoints --------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout, all integers and floats little-endian:
///   "DGCKPT\0\0" | u32 version | u32 count |
///   count x ( u32 name_len | name bytes | u32 rank | u64 dims[rank] | f64 values[prod dims] )
void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

/// Copies values of `entries` into same-named tensors of `targets`.
void assign_by_name(const std::vector<NamedTensor>& targets,
                    const std::vector<NamedTensor>& entries, bool strict);

}  // namespace dropgraph
