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
#include <span>
#include <string>
#include <vector>

#include "dropgraph/rng.hpp"
#include "dropgraph/tensor.hpp"

namespace dropgraph {

enum class Mode { kTrain, kEval };

/// A trainable tensor with a stable name, for optimizers and checkpoints.
struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// ---- Convolution ------------------------------------------------------------

struct ConvParams {
  Tensor kernel;  // (c_out, c_in, k, k)
  Tensor bias;    // (c_out), may be undefined
  std::size_t stride = 1;
  std::size_t padding = 0;

  /// Kaiming fan-in normal kernel, zero bias.
  static ConvParams make(std::size_t c_in, std::size_t c_out, std::size_t kernel_size,
                         std::size_t stride, std::size_t padding, RngStream rng,
                         bool with_bias = true);
};

/// 2-D cross-correlation of x (n, c_in, h, w). Differentiable in x, kernel, bias.
Tensor conv2d(const Tensor& x, const ConvParams& p);

// ---- Batch normalization ----------------------------------------------------

struct NormState {
  Tensor gamma;         // (c), trainable, init 1
  Tensor beta;          // (c), trainable, init 0
  Tensor running_mean;  // (c), init 0
  Tensor running_var;   // (c), init 1
  double momentum = 0.1;
  double eps = 1e-5;

  static NormState make(std::size_t channels);
};

/// Per-channel normalization over (n, h, w). Train mode normalizes with batch
/// statistics and updates the running estimates; eval mode is the fixed affine
/// map given by the running estimates and leaves the state untouched.
Tensor batch_norm2d(const Tensor& x, NormState& state, Mode mode);

// ---- Dense ------------------------------------------------------------------

struct LinearParams {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)

  static LinearParams make(std::size_t in, std::size_t out, RngStream rng);
};

/// x (n, in) -> x * weight + bias.
Tensor linear(const Tensor& x, const LinearParams& p);

/// (n, c, h, w) -> (n, c), mean over spatial positions.
Tensor global_avg_pool(const Tensor& x);

/// Mean over the batch of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Kaiming fan-in normal init: N(0, 2 / fan_in).
void kaiming_normal(Tensor& t, std::size_t fan_in, RngStream rng);

// ---- Node features as feature maps ----------------------------------------

/// (n, c) node features -> (1, c, n, 1) so spatial regularizers see one
/// position per node.
Tensor nodes_to_feature_map(const Tensor& h);
/// Inverse of nodes_to_feature_map.
Tensor feature_map_to_nodes(const Tensor& x);

}  // namespace dropgraph
