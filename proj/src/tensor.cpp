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

#include "dropgraph/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "dropgraph/errors.hpp"
#include "dropgraph/kernels.hpp"

namespace dropgraph {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) out << ", ";
    out << shape[i];
  }
  out << ')';
  return out.str();
}

namespace detail {

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

}  // namespace detail

namespace {

void check_shape(const Shape& shape, std::size_t values) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values) {
    throw DimensionError("shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values));
  }
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got " + shape_str(a.shape()));
  }
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape, values.size());
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

detail::Node& Tensor::node() const {
  if (!node_) throw ContractError("use of an undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return node().value.size(); }

std::span<const double> Tensor::values() const { return node().value; }

std::span<double> Tensor::mutable_values() { return node().value; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node().value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("at(): index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node().value[flat];
}

bool Tensor::requires_grad() const { return node().requires_grad; }

void Tensor::set_requires_grad(bool flag) { node().requires_grad = flag; }

std::vector<double> Tensor::grad() const {
  const auto& n = node();
  if (n.grad.size() != n.value.size()) return std::vector<double>(n.value.size(), 0.0);
  return n.grad;
}

std::span<double> Tensor::mutable_grad() { return node().grad_buffer(); }

void Tensor::zero_grad() {
  auto& g = node().grad;
  std::fill(g.begin(), g.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), node().value, false); }

Tensor Tensor::clone() const { return from(shape(), node().value, requires_grad()); }

Tensor Tensor::make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                           std::function<void(detail::Node& self)> backward_fn) {
  Tensor out = from(std::move(shape), std::move(value), false);
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (any) {
    auto& n = out.node();
    n.requires_grad = true;
    n.parents.reserve(inputs.size());
    for (const Tensor& t : inputs) n.parents.push_back(t.node_);
    n.backward_fn = std::move(backward_fn);
  }
  return out;
}

void Tensor::backward() const {
  auto& root = node();
  if (!root.shape.empty() && root.value.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order) {
    if (n->backward_fn) n->grad.assign(n->value.size(), 0.0);
  }
  root.grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---- Element-wise ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& self) {
    for (auto* p : {pa.get(), pb.get()}) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Tensor affine(const Tensor& a, double scale, double shift) {
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * scale + shift;
  auto pa = a.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a}, [pa, scale](detail::Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * scale;
  });
}

Tensor relu(const Tensor& a) {
  const auto av = a.values();
  const auto n = static_cast<std::ptrdiff_t>(av.size());
  std::vector<double> out(av.size());
#pragma omp parallel for schedule(static) if (n > 65536)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  auto pa = a.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a}, [pa](detail::Node& self) {
    auto& g = pa->grad_buffer();
    // Subgradient 0 at the kink.
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (pa->value[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  auto pa = a.node_ptr();
  return Tensor::make_result(std::move(shape), std::move(out), {a}, [pa](detail::Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (double v : a.values()) total += v;
  auto pa = a.node_ptr();
  return Tensor::make_result({}, {total}, {a}, [pa](detail::Node& self) {
    auto& g = pa->grad_buffer();
    for (double& gi : g) gi += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double total = 0.0;
  for (double v : a.values()) total += v;
  auto pa = a.node_ptr();
  return Tensor::make_result({}, {total * inv}, {a}, [pa, inv](detail::Node& self) {
    auto& g = pa->grad_buffer();
    for (double& gi : g) gi += self.grad[0] * inv;
  });
}

// ---- Matrix ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  kernels::gemm(kernels::Trans::kNo, kernels::Trans::kNo, m, n, k, a.values().data(),
                b.values().data(), out.data(), false);
  auto pa = a.node_ptr();
  auto pb = b.node_ptr();
  return Tensor::make_result({m, n}, std::move(out), {a, b},
                             [pa, pb, m, n, k](detail::Node& self) {
    using kernels::Trans;
    if (pa->requires_grad) {  // dA = dC * B^T
      kernels::gemm(Trans::kNo, Trans::kYes, m, k, n, self.grad.data(), pb->value.data(),
                    pa->grad_buffer().data(), true);
    }
    if (pb->requires_grad) {  // dB = A^T * dC
      kernels::gemm(Trans::kYes, Trans::kNo, k, n, m, pa->value.data(), self.grad.data(),
                    pb->grad_buffer().data(), true);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  }
  auto pa = a.node_ptr();
  return Tensor::make_result({n, m}, std::move(out), {a}, [pa, m, n](detail::Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j * m + i];
    }
  });
}

Tensor softmax_rows(const Tensor& a) {
  require_rank("softmax_rows", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = av.data() + i * n;
    double* dst = out.data() + i * n;
    const double top = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      dst[j] = std::exp(row[j] - top);
      total += dst[j];
    }
    for (std::size_t j = 0; j < n; ++j) dst[j] /= total;
  }
  auto pa = a.node_ptr();
  return Tensor::make_result({m, n}, out, {a}, [pa, out, m, n](detail::Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      const double* y = out.data() + i * n;
      const double* dy = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[j] * dy[j];
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += y[j] * (dy[j] - dot);
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_rank("add_row", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (row.numel() != n) {
    throw DimensionError("add_row: row of shape " + shape_str(row.shape()) +
                         " does not broadcast over " + shape_str(a.shape()));
  }
  const auto av = a.values();
  const auto rv = row.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + rv[j];
  }
  auto pa = a.node_ptr();
  auto pr = row.node_ptr();
  return Tensor::make_result({m, n}, std::move(out), {a, row}, [pa, pr, m, n](detail::Node& self) {
    if (pa->requires_grad) {
      auto& g = pa->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pr->requires_grad) {
      auto& g = pr->grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
      }
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank("slice_rows", a, 2);
  const std::size_t n = a.dim(1);
  if (begin >= end || end > a.dim(0)) {
    throw DimensionError("slice_rows: bad range [" + std::to_string(begin) + ", " +
                         std::to_string(end) + ") of " + shape_str(a.shape()));
  }
  const auto av = a.values();
  std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(begin * n),
                          av.begin() + static_cast<std::ptrdiff_t>(end * n));
  auto pa = a.node_ptr();
  return Tensor::make_result({end - begin, n}, std::move(out), {a},
                             [pa, begin, n](detail::Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * n + i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts, std::size_t cols) {
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.dim(1) != cols) {
      throw DimensionError("concat_rows: part " + shape_str(p.shape()) + " does not have " +
                           std::to_string(cols) + " columns");
    }
    rows += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const Tensor& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    nodes.push_back(p.node_ptr());
  }
  return Tensor::make_result({rows, cols}, std::move(out), parts, [nodes](detail::Node& self) {
    std::size_t offset = 0;
    for (const auto& p : nodes) {
      const std::size_t len = p->value.size();
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offset + i];
      }
      offset += len;
    }
  });
}

Tensor mean_rows(const Tensor& a) {
  require_rank("mean_rows", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  const auto av = a.values();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j] += av[i * n + j];
  }
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out) v *= inv;
  auto pa = a.node_ptr();
  return Tensor::make_result({1, n}, std::move(out), {a}, [pa, m, n, inv](detail::Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) g[i * n + j] += self.grad[j] * inv;
    }
  });
}

}  // namespace dropgraph
