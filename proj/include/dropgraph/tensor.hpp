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
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dropgraph {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

// One recorded value on the dynamic tape. Parents are held by shared_ptr so
// the tape lives exactly as long as the outputs that reference it.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first touched by backward
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node& self)> backward_fn;

  std::vector<double>& grad_buffer();
};

}  // namespace detail

/// Dense row-major array of doubles with reverse-mode differentiation.
///
/// A Tensor is a cheap handle; copies share storage. Ops whose inputs need
/// gradients record a backward closure, so the forward pass builds the tape
/// and dropping the last handle to the output releases it.
///
/// Gradients of leaf tensors accumulate across `backward` calls; call
/// `zero_grad` between steps. Intermediate gradients are reset at the start
/// of every `backward`.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Direct write access, for initializers, optimizers and finite differences.
  /// Mutating a tensor that already fed a recorded op invalidates that tape.
  std::span<double> mutable_values();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  /// Gradient; zeros when backward has not reached this tensor.
  std::vector<double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Reverse pass from a scalar.
  void backward() const;

  /// A leaf copy of the values, detached from the tape.
  Tensor detach() const;
  Tensor clone() const;

  /// Identity of the underlying storage; used to de-duplicate parameters.
  const void* id() const noexcept { return node_.get(); }

  // Op implementation hooks.
  static Tensor make_result(Shape shape, std::vector<double> value,
                            std::vector<Tensor> inputs,
                            std::function<void(detail::Node& self)> backward_fn);
  detail::Node& node() const;
  std::shared_ptr<detail::Node> node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

// ---- Element-wise and shape ops -------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// a * scale + shift, element-wise.
Tensor affine(const Tensor& a, double scale, double shift);
Tensor relu(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- Matrix ops (rank 2) -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
/// Row-wise softmax, stabilized by subtracting each row's maximum.
Tensor softmax_rows(const Tensor& a);
/// (m, n) + broadcast row vector (n).
Tensor add_row(const Tensor& a, const Tensor& row);
/// Rows [begin, end) of a matrix.
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
/// Stacks matrices with equal column counts; all parts must be rank 2.
Tensor concat_rows(const std::vector<Tensor>& parts, std::size_t cols);
/// Mean over rows: (m, n) -> (1, n).
Tensor mean_rows(const Tensor& a);

}  // namespace dropgraph
