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

#include "dropgraph/nn.hpp"

#include <algorithm>
#include <cmath>

#include "dropgraph/errors.hpp"
#include "dropgraph/kernels.hpp"

namespace dropgraph {

void kaiming_normal(Tensor& t, std::size_t fan_in, RngStream rng) {
  const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.mutable_values()) v = rng.normal() * scale;
}

// ---- Convolution ------------------------------------------------------------

ConvParams ConvParams::make(std::size_t c_in, std::size_t c_out, std::size_t kernel_size,
                            std::size_t stride, std::size_t padding, RngStream rng,
                            bool with_bias) {
  ConvParams p;
  p.kernel = Tensor::zeros({c_out, c_in, kernel_size, kernel_size}, true);
  kaiming_normal(p.kernel, c_in * kernel_size * kernel_size, rng);
  if (with_bias) p.bias = Tensor::zeros({c_out}, true);
  p.stride = stride;
  p.padding = padding;
  return p;
}

Tensor conv2d(const Tensor& x, const ConvParams& p) {
  if (x.rank() != 4 || p.kernel.rank() != 4) {
    throw DimensionError("conv2d: expected rank-4 input and kernel, got " +
                         shape_str(x.shape()) + " and " + shape_str(p.kernel.shape()));
  }
  const std::size_t batch = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t c_out = p.kernel.dim(0), k = p.kernel.dim(2);
  if (p.kernel.dim(1) != c_in) {
    throw DimensionError("conv2d: input has " + std::to_string(c_in) +
                         " channels but kernel " + shape_str(p.kernel.shape()) + " expects " +
                         std::to_string(p.kernel.dim(1)));
  }
  if (p.kernel.dim(3) != k) throw DimensionError("conv2d: kernel must be square");
  if (p.stride == 0) throw ContractError("conv2d: stride must be positive");
  if (h + 2 * p.padding < k || w + 2 * p.padding < k) {
    throw DimensionError("conv2d: padded input " + shape_str(x.shape()) +
                         " is smaller than kernel " + std::to_string(k));
  }
  if (p.bias.defined() && p.bias.numel() != c_out) {
    throw DimensionError("conv2d: bias " + shape_str(p.bias.shape()) + " does not match " +
                         std::to_string(c_out) + " output channels");
  }
  const std::size_t oh = kernels::conv_out_size(h, k, p.stride, p.padding);
  const std::size_t ow = kernels::conv_out_size(w, k, p.stride, p.padding);
  std::vector<double> out(batch * c_out * oh * ow);
  kernels::conv2d_forward(x.values().data(), batch, c_in, h, w, p.kernel.values().data(),
                          p.bias.defined() ? p.bias.values().data() : nullptr, c_out, k,
                          p.stride, p.padding, out.data());

  std::vector<Tensor> inputs{x, p.kernel};
  if (p.bias.defined()) inputs.push_back(p.bias);
  auto px = x.node_ptr();
  auto pk = p.kernel.node_ptr();
  auto pb = p.bias.defined() ? p.bias.node_ptr() : nullptr;
  const std::size_t stride = p.stride, padding = p.padding;
  return Tensor::make_result(
      {batch, c_out, oh, ow}, std::move(out), std::move(inputs),
      [=](detail::Node& self) {
        using kernels::Trans;
        const std::size_t patch = c_in * k * k;
        const std::size_t positions = oh * ow;
        const bool unfold = !(k == 1 && stride == 1 && padding == 0);
        std::vector<double> col(unfold ? patch * positions : 0);
        std::vector<double> dcol(patch * positions);
        double* dk = pk->requires_grad ? pk->grad_buffer().data() : nullptr;
        double* dx = px->requires_grad ? px->grad_buffer().data() : nullptr;
        double* db = (pb && pb->requires_grad) ? pb->grad_buffer().data() : nullptr;
        for (std::size_t n = 0; n < batch; ++n) {
          const double* img = px->value.data() + n * c_in * h * w;
          const double* dout = self.grad.data() + n * c_out * positions;
          if (dk != nullptr) {
            const double* rhs = img;
            if (unfold) {
              kernels::im2col(img, c_in, h, w, k, stride, padding, col.data());
              rhs = col.data();
            }
            kernels::gemm(Trans::kNo, Trans::kYes, c_out, patch, positions, dout, rhs, dk,
                          true);
          }
          if (dx != nullptr) {
            double* dimg = dx + n * c_in * h * w;
            if (unfold) {
              kernels::gemm(Trans::kYes, Trans::kNo, patch, positions, c_out,
                            pk->value.data(), dout, dcol.data(), false);
              kernels::col2im(dcol.data(), c_in, h, w, k, stride, padding, dimg);
            } else {
              kernels::gemm(Trans::kYes, Trans::kNo, patch, positions, c_out,
                            pk->value.data(), dout, dimg, true);
            }
          }
          if (db != nullptr) {
            for (std::size_t co = 0; co < c_out; ++co) {
              double s = 0.0;
              for (std::size_t q = 0; q < positions; ++q) s += dout[co * positions + q];
              db[co] += s;
            }
          }
        }
      });
}

// ---- Batch normalization ----------------------------------------------------

NormState NormState::make(std::size_t channels) {
  NormState s;
  s.gamma = Tensor::full({channels}, 1.0, true);
  s.beta = Tensor::zeros({channels}, true);
  s.running_mean = Tensor::zeros({channels});
  s.running_var = Tensor::full({channels}, 1.0);
  return s;
}

Tensor batch_norm2d(const Tensor& x, NormState& state, Mode mode) {
  if (x.rank() != 4) {
    throw DimensionError("batch_norm2d: expected rank-4 input, got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (state.gamma.numel() != c) {
    throw DimensionError("batch_norm2d: state has " + std::to_string(state.gamma.numel()) +
                         " channels, input " + shape_str(x.shape()));
  }
  const double count = static_cast<double>(batch * plane);
  const auto xv = x.values();
  const auto gamma = state.gamma.values();
  const auto beta = state.beta.values();

  std::vector<double> mean(c), inv_std(c);
  if (mode == Mode::kTrain) {
    if (batch * plane < 2) {
      throw ContractError("batch_norm2d: train mode needs more than one value per channel");
    }
    auto rm = state.running_mean.mutable_values();
    auto rv = state.running_var.mutable_values();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* src = xv.data() + (n * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) s += src[q];
      }
      const double mu = s / count;
      double ss = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* src = xv.data() + (n * c + ch) * plane;
        for (std::size_t q = 0; q < plane; ++q) ss += (src[q] - mu) * (src[q] - mu);
      }
      const double var = ss / count;
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + state.eps);
      rm[ch] = (1.0 - state.momentum) * rm[ch] + state.momentum * mu;
      rv[ch] = (1.0 - state.momentum) * rv[ch] + state.momentum * var * count / (count - 1.0);
    }
  } else {
    const auto rm = state.running_mean.values();
    const auto rv = state.running_var.values();
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = rm[ch];
      inv_std[ch] = 1.0 / std::sqrt(rv[ch] + state.eps);
    }
  }

  std::vector<double> xhat(xv.size());
  std::vector<double> out(xv.size());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (n * c + ch) * plane;
      for (std::size_t q = 0; q < plane; ++q) {
        const double z = (xv[base + q] - mean[ch]) * inv_std[ch];
        xhat[base + q] = z;
        out[base + q] = gamma[ch] * z + beta[ch];
      }
    }
  }

  auto px = x.node_ptr();
  auto pg = state.gamma.node_ptr();
  auto pb = state.beta.node_ptr();
  const bool train = mode == Mode::kTrain;
  return Tensor::make_result(
      x.shape(), std::move(out), {x, state.gamma, state.beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        const auto& dy = self.grad;
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (n * c + ch) * plane;
            for (std::size_t q = 0; q < plane; ++q) {
              sum_dy[ch] += dy[base + q];
              sum_dy_xhat[ch] += dy[base + q] * xhat[base + q];
            }
          }
        }
        if (pg->requires_grad) {
          auto& g = pg->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy_xhat[ch];
        }
        if (pb->requires_grad) {
          auto& g = pb->grad_buffer();
          for (std::size_t ch = 0; ch < c; ++ch) g[ch] += sum_dy[ch];
        }
        if (!px->requires_grad) return;
        auto& dx = px->grad_buffer();
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (n * c + ch) * plane;
            const double scale = pg->value[ch] * inv_std[ch];
            if (train) {
              const double mean_dy = sum_dy[ch] / count;
              const double mean_dy_xhat = sum_dy_xhat[ch] / count;
              for (std::size_t q = 0; q < plane; ++q) {
                dx[base + q] +=
                    scale * (dy[base + q] - mean_dy - xhat[base + q] * mean_dy_xhat);
              }
            } else {
              for (std::size_t q = 0; q < plane; ++q) dx[base + q] += scale * dy[base + q];
            }
          }
        }
      });
}

// ---- Dense ------------------------------------------------------------------

LinearParams LinearParams::make(std::size_t in, std::size_t out, RngStream rng) {
  LinearParams p;
  p.weight = Tensor::zeros({in, out}, true);
  kaiming_normal(p.weight, in, rng);
  p.bias = Tensor::zeros({out}, true);
  return p;
}

Tensor linear(const Tensor& x, const LinearParams& p) {
  return add_row(matmul(x, p.weight), p.bias);
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) {
    throw DimensionError("global_avg_pool: expected rank-4 input, got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  const double inv = 1.0 / static_cast<double>(plane);
  const auto xv = x.values();
  std::vector<double> out(batch * c);
  for (std::size_t i = 0; i < batch * c; ++i) {
    double s = 0.0;
    for (std::size_t q = 0; q < plane; ++q) s += xv[i * plane + q];
    out[i] = s * inv;
  }
  auto px = x.node_ptr();
  return Tensor::make_result({batch, c}, std::move(out), {x},
                             [px, batch, c, plane, inv](detail::Node& self) {
    auto& g = px->grad_buffer();
    for (std::size_t i = 0; i < batch * c; ++i) {
      const double d = self.grad[i] * inv;
      for (std::size_t q = 0; q < plane; ++q) g[i * plane + q] += d;
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: expected (n, classes) logits, got " +
                         shape_str(logits.shape()));
  }
  const std::size_t n = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
  }
  for (std::size_t label : labels) {
    if (label >= classes) {
      throw ContractError("cross_entropy: label " + std::to_string(label) +
                          " out of range [0, " + std::to_string(classes) + ")");
    }
  }
  const auto lv = logits.values();
  std::vector<double> probs(n * classes);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = lv.data() + i * classes;
    const double top = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) z += std::exp(row[j] - top);
    const double log_z = top + std::log(z);
    total += log_z - row[labels[i]];
    for (std::size_t j = 0; j < classes; ++j) probs[i * classes + j] = std::exp(row[j] - log_z);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<std::size_t> owned(labels.begin(), labels.end());
  auto pl = logits.node_ptr();
  return Tensor::make_result(
      {}, {total * inv_n}, {logits},
      [pl, probs = std::move(probs), owned = std::move(owned), n, classes, inv_n](
          detail::Node& self) {
        auto& g = pl->grad_buffer();
        const double scale = self.grad[0] * inv_n;
        for (std::size_t i = 0; i < n; ++i) {
          for (std::size_t j = 0; j < classes; ++j) {
            const double target = j == owned[i] ? 1.0 : 0.0;
            g[i * classes + j] += scale * (probs[i * classes + j] - target);
          }
        }
      });
}

// ---- Node features as feature maps ----------------------------------------

Tensor nodes_to_feature_map(const Tensor& h) {
  if (h.rank() != 2) {
    throw DimensionError("nodes_to_feature_map: expected (n, c), got " + shape_str(h.shape()));
  }
  const std::size_t n = h.dim(0), c = h.dim(1);
  return reshape(transpose(h), {1, c, n, 1});
}

Tensor feature_map_to_nodes(const Tensor& x) {
  if (x.rank() != 4 || x.dim(0) != 1 || x.dim(3) != 1) {
    throw DimensionError("feature_map_to_nodes: expected (1, c, n, 1), got " +
                         shape_str(x.shape()));
  }
  return transpose(reshape(x, {x.dim(1), x.dim(2)}));
}

}  // namespace dropgraph
