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

#include "dropgraph/kernels.hpp"

#include <algorithm>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dropgraph::kernels {
namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 16;
static_assert(kTileRows == 4, "micro() unrolls four rows");

// A packed as row panels: panel[t][p][r] = A(t*kTileRows + r, p), zero
// padded past m. The micro-kernel then streams both operands contiguously.
std::vector<double> pack_a(std::size_t m, std::size_t k, const double* a, bool transposed) {
  const std::size_t panels = (m + kTileRows - 1) / kTileRows;
  std::vector<double> packed(panels * kTileRows * k, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* dst = packed.data() + (i / kTileRows) * kTileRows * k + i % kTileRows;
    for (std::size_t p = 0; p < k; ++p) {
      dst[p * kTileRows] = transposed ? a[p * m + i] : a[i * k + p];
    }
  }
  return packed;
}

// kTileRows x cols block of C in registers; k ascending for every element.
template <std::size_t kCols>
inline void micro(std::size_t k, const double* __restrict panel, const double* __restrict b,
                  std::size_t ldb, double (&acc)[kTileRows][kTileCols]) {
  double c0[kCols] = {}, c1[kCols] = {}, c2[kCols] = {}, c3[kCols] = {};
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb;
    const double a0 = panel[p * kTileRows];
    const double a1 = panel[p * kTileRows + 1];
    const double a2 = panel[p * kTileRows + 2];
    const double a3 = panel[p * kTileRows + 3];
    for (std::size_t j = 0; j < kCols; ++j) {
      c0[j] += a0 * brow[j];
      c1[j] += a1 * brow[j];
      c2[j] += a2 * brow[j];
      c3[j] += a3 * brow[j];
    }
  }
  for (std::size_t j = 0; j < kCols; ++j) {
    acc[0][j] = c0[j];
    acc[1][j] = c1[j];
    acc[2][j] = c2[j];
    acc[3][j] = c3[j];
  }
}

inline void micro_tail(std::size_t k, std::size_t cols, const double* panel, const double* b,
                       std::size_t ldb, double (&acc)[kTileRows][kTileCols]) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb;
    const double* ap = panel + p * kTileRows;
    for (std::size_t r = 0; r < kTileRows; ++r) {
      for (std::size_t j = 0; j < cols; ++j) acc[r][j] += ap[r] * brow[j];
    }
  }
}

// Computes C[:, j0:j0+cols] for every row panel.
void column_strip(std::size_t m, std::size_t n, std::size_t k, const double* packed,
                  const double* b, double* c, bool accumulate, std::size_t j0) {
  const std::size_t panels = (m + kTileRows - 1) / kTileRows;
  const std::size_t cols = std::min(kTileCols, n - j0);
  for (std::size_t t = 0; t < panels; ++t) {
    double acc[kTileRows][kTileCols] = {};
    const double* panel = packed + t * kTileRows * k;
    if (cols == kTileCols) {
      micro<kTileCols>(k, panel, b + j0, n, acc);
    } else {
      micro_tail(k, cols, panel, b + j0, n, acc);
    }
    const std::size_t rows = std::min(kTileRows, m - t * kTileRows);
    for (std::size_t r = 0; r < rows; ++r) {
      double* crow = c + (t * kTileRows + r) * n + j0;
      if (accumulate) {
        for (std::size_t j = 0; j < cols; ++j) crow[j] += acc[r][j];
      } else {
        for (std::size_t j = 0; j < cols; ++j) crow[j] = acc[r][j];
      }
    }
  }
}

void gemm_rowmajor_b(std::size_t m, std::size_t n, std::size_t k, const double* a,
                     bool a_transposed, const double* b, double* c, bool accumulate) {
  const std::vector<double> packed = pack_a(m, k, a, a_transposed);
  const auto col_tiles = static_cast<std::ptrdiff_t>((n + kTileCols - 1) / kTileCols);
  // Column strips of B outermost so a k x kTileCols strip stays hot across rows.
#pragma omp parallel for schedule(static) if (m * n * k > 32768)
  for (std::ptrdiff_t jt = 0; jt < col_tiles; ++jt) {
    column_strip(m, n, k, packed.data(), b, c, accumulate,
                 static_cast<std::size_t>(jt) * kTileCols);
  }
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_threads(int threads) {
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif
}

void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    return;
  }
  const bool a_transposed = trans_a == Trans::kYes;
  if (trans_b == Trans::kNo) {
    gemm_rowmajor_b(m, n, k, a, a_transposed, b, c, accumulate);
    return;
  }
  // B stored (n,k): transpose into a row-major (k,n) panel first.
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_rowmajor_b(m, n, k, a, a_transposed, bt.data(), c, accumulate);
}

void im2col(const double* image, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t stride, std::size_t padding, double* col) {
  const std::size_t oh = conv_out_size(h, kernel, stride, padding);
  const std::size_t ow = conv_out_size(w, kernel, stride, padding);
  const auto rows = static_cast<std::ptrdiff_t>(channels * kernel * kernel);
#pragma omp parallel for schedule(static) if (rows * oh * ow > 65536)
  for (std::ptrdiff_t r = 0; r < rows; ++r) {
    const std::size_t row = static_cast<std::size_t>(r);
    const std::size_t kx = row % kernel;
    const std::size_t ky = (row / kernel) % kernel;
    const std::size_t ch = row / (kernel * kernel);
    const double* plane = image + ch * h * w;
    double* out = col + row * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                      static_cast<std::ptrdiff_t>(padding);
      double* out_row = out + oy * ow;
      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
        std::fill(out_row, out_row + ow, 0.0);
        continue;
      }
      const double* in_row = plane + static_cast<std::size_t>(iy) * w;
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                        static_cast<std::ptrdiff_t>(padding);
        out_row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                          ? 0.0
                          : in_row[static_cast<std::size_t>(ix)];
      }
    }
  }
}

void col2im(const double* col, std::size_t channels, std::size_t h, std::size_t w,
            std::size_t kernel, std::size_t stride, std::size_t padding, double* image) {
  const std::size_t oh = conv_out_size(h, kernel, stride, padding);
  const std::size_t ow = conv_out_size(w, kernel, stride, padding);
  // Parallel over channels: each channel plane is written by one thread only.
  const auto nch = static_cast<std::ptrdiff_t>(channels);
#pragma omp parallel for schedule(static) if (channels * kernel * kernel * oh * ow > 65536)
  for (std::ptrdiff_t c = 0; c < nch; ++c) {
    const std::size_t ch = static_cast<std::size_t>(c);
    double* plane = image + ch * h * w;
    for (std::size_t ky = 0; ky < kernel; ++ky) {
      for (std::size_t kx = 0; kx < kernel; ++kx) {
        const double* src = col + ((ch * kernel + ky) * kernel + kx) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                          static_cast<std::ptrdiff_t>(padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          double* dst_row = plane + static_cast<std::size_t>(iy) * w;
          const double* src_row = src + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                            static_cast<std::ptrdiff_t>(padding);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dst_row[static_cast<std::size_t>(ix)] += src_row[ox];
          }
        }
      }
    }
  }
}

void conv2d_forward(const double* x, std::size_t batch, std::size_t c_in, std::size_t h,
                    std::size_t w, const double* weight, const double* bias,
                    std::size_t c_out, std::size_t kernel, std::size_t stride,
                    std::size_t padding, double* out) {
  const std::size_t oh = conv_out_size(h, kernel, stride, padding);
  const std::size_t ow = conv_out_size(w, kernel, stride, padding);
  const std::size_t patch = c_in * kernel * kernel;
  std::vector<double> col(patch * oh * ow);
  for (std::size_t n = 0; n < batch; ++n) {
    const double* img = x + n * c_in * h * w;
    double* dst = out + n * c_out * oh * ow;
    const double* rhs = img;
    if (kernel != 1 || stride != 1 || padding != 0) {
      im2col(img, c_in, h, w, kernel, stride, padding, col.data());
      rhs = col.data();
    }
    gemm(Trans::kNo, Trans::kNo, c_out, oh * ow, patch, weight, rhs, dst, false);
    if (bias != nullptr) {
      for (std::size_t co = 0; co < c_out; ++co) {
        double* plane = dst + co * oh * ow;
        for (std::size_t p = 0; p < oh * ow; ++p) plane[p] += bias[co];
      }
    }
  }
}

namespace reference {

void gemm(Trans trans_a, Trans trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double sum = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = trans_a == Trans::kNo ? a[i * k + p] : a[p * m + i];
        const double bv = trans_b == Trans::kNo ? b[p * n + j] : b[j * k + p];
        sum += av * bv;
      }
      c[i * n + j] = accumulate ? c[i * n + j] + sum : sum;
    }
  }
}

void conv2d_forward(const double* x, std::size_t batch, std::size_t c_in, std::size_t h,
                    std::size_t w, const double* weight, const double* bias,
                    std::size_t c_out, std::size_t kernel, std::size_t stride,
                    std::size_t padding, double* out) {
  const std::size_t oh = conv_out_size(h, kernel, stride, padding);
  const std::size_t ow = conv_out_size(w, kernel, stride, padding);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t co = 0; co < c_out; ++co) {
      for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
          double sum = bias != nullptr ? bias[co] : 0.0;
          for (std::size_t ci = 0; ci < c_in; ++ci) {
            for (std::size_t ky = 0; ky < kernel; ++ky) {
              for (std::size_t kx = 0; kx < kernel; ++kx) {
                const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                static_cast<std::ptrdiff_t>(padding);
                const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(padding);
                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) ||
                    ix >= static_cast<std::ptrdiff_t>(w)) {
                  continue;
                }
                sum += weight[((co * c_in + ci) * kernel + ky) * kernel + kx] *
                       x[((n * c_in + ci) * h + static_cast<std::size_t>(iy)) * w +
                         static_cast<std::size_t>(ix)];
              }
            }
          }
          out[((n * c_out + co) * oh + oy) * ow + ox] = sum;
        }
      }
    }
  }
}

}  // namespace reference
}  // namespace dropgraph::kernels
