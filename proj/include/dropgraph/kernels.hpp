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

namespace dropgraph::kernels {

// Dense compute kernels behind the tensor ops. The OpenMP versions split
// work over disjoint output elements only, and every output element is
// reduced in a fixed order, so results are bit-identical for any thread
// count. The `reference` namespace holds straightforward serial loops used
// as test oracles and benchmark baselines.

enum class Trans { kNo, kYes };

int max_threads();
void set_threads(int threads);

/// C(m,n) = op(A)(m,k) * op(B)(k,n), or C += ... when `accumulate`.
/// All operands are dense row-major; op(X) = X or X^T as stored.
void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

/// Unfolds one (channels, h, w) image into a (channels*kernel*kernel, out_h*out_w)
/// patch matrix, zero-filling the padding.
void im2col(const double* image, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t stride, std::size_t padding, double* col);

/// Adjoint of im2col: scatters patch-matrix entries back, accumulating into `image`.
void col2im(const double* col, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t stride, std::size_t padding, double* image);

inline std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride,
                                 std::size_t padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

/// Batched cross-correlation: out(n, c_out, oh, ow) from x(n, c_in, h, w),
/// weight(c_out, c_in, k, k), bias(c_out) (bias may be null).
void conv2d_forward(const double* x, std::size_t batch, std::size_t c_in, std::size_t h,
                    std::size_t w, const double* weight, const double* bias,
                    std::size_t c_out, std::size_t kernel, std::size_t stride,
                    std::size_t padding, double* out);

namespace reference {

void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

/// Six nested loops, no unfolding.
void conv2d_forward(const double* x, std::size_t batch, std::size_t c_in, std::size_t h,
                    std::size_t w, const double* weight, const double* bias,
                    std::size_t c_out, std::size_t kernel, std::size_t stride,
                    std::size_t padding, double* out);

}  // namespace reference

}  // namespace dropgraph::kernels
