// Copyright (c) 2026 The pcmae Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Dense row-major tensor with define-by-run reverse-mode autodiff.
//
// Operations executed while a Tape is active on the current thread and with
// at least one operand requiring gradients are appended to that tape. A tape
// is rebuilt for every forward pass; Tape::backward walks it in exact
// reverse order of recording, so operands always precede their consumers.
// Without an active tape no graph is kept (inference mode).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pcmae/errors.hpp"

namespace pcmae {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until backward reaches the node
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }
  /// Leading extent of a 2-D tensor.
  std::size_t rows() const { return rank() == 1 ? 1 : node_->shape.front(); }
  /// Trailing extent.
  std::size_t cols() const { return node_->shape.back(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  // Tensor is a handle; gradient buffers are mutable through const handles.
  std::span<T> mutable_grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  T item() const;
  T at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }
  T& at(std::size_t r, std::size_t c) { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Deep copy of the values as a fresh leaf (no gradient history).
  Tensor clone() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode<T>> node_;

  template <typename U>
  friend Tensor<U> make_result(Shape shape, bool requires_grad);
};

template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<TensorNode<T>> output, std::function<void()> backward_fn);

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients
  /// accumulate additively into every reachable tensor that requires them.
  /// The tape is cleared afterwards.
  void backward(const Tensor<T>& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Tape active on this thread, or nullptr.
  static Tape* current() noexcept;

 private:
  template <typename U>
  friend class TapeScope;

  struct Entry {
    std::shared_ptr<TensorNode<T>> output;
    std::function<void()> backward_fn;
  };
  std::vector<Entry> entries_;
};

/// Activates `tape` on the calling thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Runs backward on the tape active on this thread.
template <typename T>
void backward(const Tensor<T>& loss);

template <typename U>
Tensor<U> make_result(Shape shape, bool requires_grad) {
  auto node = std::make_shared<TensorNode<U>>();
  node->data.assign(shape_numel(shape), U(0));
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor<U>(std::move(node));
}

namespace detail {

/// True when a tape is active and any operand requires gradients.
template <typename T>
bool should_record(std::initializer_list<const Tensor<T>*> operands) {
  if (Tape<T>::current() == nullptr) return false;
  for (const Tensor<T>* t : operands)
    if (t->requires_grad()) return true;
  return false;
}

template <typename T>
void record(const Tensor<T>& output, std::function<void()> fn) {
  Tape<T>::current()->record(output.node(), std::move(fn));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives. All take 2-D operands unless stated otherwise.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// Elementwise, identical shapes.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

/// x[..., C] + bias[C] broadcast over leading dims.
template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);

/// GELU, tanh approximation:
///   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
/// with sqrt(2/pi) = 0.7978845608028654.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Concatenation along the last dimension; all parts share row count.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts);

/// Concatenation along the first dimension; all parts share column count.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts);

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count);

/// out[r] = x[index[r]]. Backward scatter-adds.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index);

/// out[g] = max over rows in groups[g], per column. Empty group throws.
template <typename T>
Tensor<T> segment_max(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& groups);

/// out[g] = mean over rows in groups[g], per column. Empty group throws.
template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& groups);

/// Contiguous groups of `group_size` rows; rows must divide evenly.
template <typename T>
Tensor<T> group_max(const Tensor<T>& x, std::size_t group_size);

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

template <typename T>
Tensor<T> mean(const Tensor<T>& x);

/// Softmax over the last dimension restricted to `allow` (same element count
/// as logits, nonzero = allowed). Disallowed outputs are exactly zero. A row
/// with no allowed entry throws InvalidMaskError.
template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, std::span<const std::uint8_t> allow);

/// Row-wise normalization over the last dimension, biased variance, eps
/// inside the square root, then gamma * xhat + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

/// out[m] = sum_j weights[m*k + j] * src[index[m*k + j]]; differentiable in src.
template <typename T>
Tensor<T> weighted_gather(const Tensor<T>& src, std::span<const std::size_t> index,
                          std::span<const double> weights, std::size_t k);

/// Mean softmax cross-entropy of logits[M x C] against integer labels.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

/// x W + b with W[in x out], b[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return add_row(matmul(x, weight), bias);
}

}  // namespace pcmae
