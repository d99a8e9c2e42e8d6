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

#include "pcmae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace pcmae {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  node_ = std::make_shared<TensorNode<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return make_result<T>(std::move(shape), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  Tensor t = make_result<T>(std::move(shape), false);
  std::fill(t.node_->data.begin(), t.node_->data.end(), value);
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor({1}, {value});
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(node_->shape, node_->data, node_->requires_grad);
}

// ---------------------------------------------------------------------------
// Tape

namespace {
template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace

template <typename T>
Tape<T>* Tape<T>::current() noexcept {
  return active_tape<T>();
}

template <typename T>
void Tape<T>::record(std::shared_ptr<TensorNode<T>> output, std::function<void()> backward_fn) {
  entries_.push_back({std::move(output), std::move(backward_fn)});
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) throw ContractError("backward() on a loss that is not on the tape");
  auto& seed = loss.node()->grad;
  seed.assign(1, T(1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output->grad.empty()) continue;  // not reachable from loss
    it->backward_fn();
    it->output->grad.clear();
  }
  entries_.clear();
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(active_tape<T>()) {
  active_tape<T>() = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  active_tape<T>() = previous_;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::current();
  if (tape == nullptr) throw ContractError("backward() without an active tape");
  tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

template <typename T>
void require_2d(const Tensor<T>& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  const bool rec = detail::should_record({&a, &b});
  Tensor<T> out = make_result<T>({m, n}, rec);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (rec) {
    detail::record(out, [a, b, out, m, k, n]() mutable {
      const T* g = out.grad().data();
      if (a.requires_grad()) {
        // ga += g b^T, written as row updates against b^T so the inner
        // loop is a contiguous axpy.
        T* ga = a.mutable_grad().data();
        const T* pb = b.data().data();
        std::vector<T> bt(k * n);
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = pb[p * n + j];
        for (std::size_t i = 0; i < m; ++i) {
          T* garow = ga + i * k;
          for (std::size_t j = 0; j < n; ++j) {
            const T gv = g[i * n + j];
            const T* btrow = bt.data() + j * k;
            for (std::size_t p = 0; p < k; ++p) garow[p] += gv * btrow[p];
          }
        }
      }
      if (b.requires_grad()) {
        T* gb = b.mutable_grad().data();
        const T* pa = a.data().data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* grow = g + i * n;
            T* gbrow = gb + p * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_2d(a, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  const bool rec = detail::should_record({&a});
  Tensor<T> out = make_result<T>({n, m}, rec);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
  if (rec) {
    detail::record(out, [a, out, m, n]() mutable {
      auto ga = a.mutable_grad();
      auto g = out.grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

namespace {

template <typename T, typename Fwd, typename DA, typename DB>
Tensor<T> binary_elementwise(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fwd fwd,
                             DA da, DB db) {
  require_same_shape(a, b, op);
  const bool rec = detail::should_record({&a, &b});
  Tensor<T> out = make_result<T>(a.shape(), rec);
  auto pa = a.data();
  auto pb = b.data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = fwd(pa[i], pb[i]);
  if (rec) {
    detail::record(out, [a, b, out, da, db]() mutable {
      auto g = out.grad();
      auto pa = a.data();
      auto pb = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += da(g[i], pa[i], pb[i]);
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += db(g[i], pa[i], pb[i]);
      }
    });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
      [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
  const std::size_t c = x.cols();
  if (bias.numel() != c)
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(x.shape()));
  const bool rec = detail::should_record({&x, &bias});
  Tensor<T> out = make_result<T>(x.shape(), rec);
  auto px = x.data();
  auto pb = bias.data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = px[i] + pb[i % c];
  if (rec) {
    detail::record(out, [x, bias, out, c]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = bias.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % c] += g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  const bool rec = detail::should_record({&x});
  Tensor<T> out = make_result<T>(x.shape(), rec);
  auto px = x.data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) po[i] = px[i] * factor;
  if (rec) {
    detail::record(out, [x, out, factor]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kAlpha = T(0.7978845608028654);  // sqrt(2 / pi)
  constexpr T kBeta = T(0.044715);
  const bool rec = detail::should_record({&x});
  Tensor<T> out = make_result<T>(x.shape(), rec);
  auto px = x.data();
  auto po = out.data();
  for (std::size_t i = 0; i < po.size(); ++i) {
    const T v = px[i];
    po[i] = T(0.5) * v * (T(1) + std::tanh(kAlpha * (v + kBeta * v * v * v)));
  }
  if (rec) {
    detail::record(out, [x, out]() mutable {
      auto g = out.grad();
      auto px = x.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = px[i];
        const T t = std::tanh(kAlpha * (v + kBeta * v * v * v));
        const T dt = (T(1) - t * t) * kAlpha * (T(1) + T(3) * kBeta * v * v);
        gx[i] += g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * dt);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  bool rec = false;
  for (const auto& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    total += p.cols();
    rec = rec || detail::should_record({&p});
  }
  Tensor<T> out = make_result<T>({rows, total}, rec);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data().data() + r * c, c, out.data().data() + r * total + offset);
    offset += c;
  }
  if (rec) {
    detail::record(out, [parts, out, rows, total]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        const std::size_t c = p.cols();
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < c; ++j) gp[r * c + j] += g[r * total + offset + j];
        }
        offset += c;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t total = 0;
  bool rec = false;
  for (const auto& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != cols)
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
    total += p.rows();
    rec = rec || detail::should_record({&p});
  }
  Tensor<T> out = make_result<T>({total, cols}, rec);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), out.data().begin() + offset);
    offset += p.numel();
  }
  if (rec) {
    detail::record(out, [parts, out]() mutable {
      auto g = out.grad();
      std::size_t offset = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          auto gp = p.mutable_grad();
          for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[offset + i];
        }
        offset += p.numel();
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  require_2d(x, "slice_cols");
  const std::size_t rows = x.rows(), c = x.cols();
  if (start + count > c)
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " +
                         shape_str(x.shape()));
  const bool rec = detail::should_record({&x});
  Tensor<T> out = make_result<T>({rows, count}, rec);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * c + start, count, out.data().data() + r * count);
  if (rec) {
    detail::record(out, [x, out, rows, c, start, count]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < count; ++j) gx[r * c + start + j] += g[r * count + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  require_2d(x, "gather_rows");
  const std::size_t n = x.rows(), c = x.cols();
  for (std::size_t i : index)
    if (i >= n)
      throw ContractError("gather_rows: index " + std::to_string(i) + " out of range for " +
                          shape_str(x.shape()));
  const bool rec = detail::should_record({&x});
  Tensor<T> out = make_result<T>({index.size(), c}, rec);
  for (std::size_t r = 0; r < index.size(); ++r)
    std::copy_n(x.data().data() + index[r] * c, c, out.data().data() + r * c);
  if (rec) {
    std::vector<std::size_t> idx(index.begin(), index.end());
    detail::record(out, [x, out, idx = std::move(idx), c]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t j = 0; j < c; ++j) gx[idx[r] * c + j] += g[r * c + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> segment_max(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& groups) {
  require_2d(x, "segment_max");
  const std::size_t n = x.rows(), c = x.cols();
  const bool rec = detail::should_record({&x});
  Tensor<T> out = make_result<T>({groups.size(), c}, rec);
  std::vector<std::size_t> argmax(groups.size() * c);
  auto px = x.data();
  auto po = out.data();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& rows = groups[g];
    if (rows.empty()) throw ContractError("segment_max: group " + std::to_string(g) + " is empty");
    for (std::size_t j = 0; j < c; ++j) {
      std::size_t best = rows.front();
      if (best >= n) throw ContractError("segment_max: row index out of range");
      for (std::size_t r : rows) {
        if (r >= n) throw ContractError("segment_max: row index out of range");
        if (px[r * c + j] > px[best * c + j]) best = r;
      }
      argmax[g * c + j] = best;
      po[g * c + j] = px[best * c + j];
    }
  }
  if (rec) {
    detail::record(out, [x, out, argmax = std::move(argmax), c]() mutable {
      auto gout = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i] * c + i % c] += gout[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> segment_mean(const Tensor<T>& x, const std::vector<std::vector<std::size_t>>& groups) {
  require_2d(x, "segment_mean");
  const std::size_t n = x.rows(), c = x.cols();
  const bool rec = detail::should_record({&x});
  Tensor<T> out = make_result<T>({groups.size(), c}, rec);
  auto px = x.data();
  auto po = out.data();
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& rows = groups[g];
    if (rows.empty())
      throw ContractError("segment_mean: group " + std::to_string(g) + " is empty");
    const T inv = T(1) / static_cast<T>(rows.size());
    for (std::size_t r : rows) {
      if (r >= n) throw ContractError("segment_mean: row index out of range");
      for (std::size_t j = 0; j < c; ++j) po[g * c + j] += px[r * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) po[g * c + j] *= inv;
  }
  if (rec) {
    detail::record(out, [x, out, groups, c]() mutable {
      auto gout = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t g = 0; g < groups.size(); ++g) {
        const T inv = T(1) / static_cast<T>(groups[g].size());
        for (std::size_t r : groups[g])
          for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += gout[g * c + j] * inv;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> group_max(const Tensor<T>& x, std::size_t group_size) {
  if (group_size == 0 || x.rows() % group_size != 0)
    throw ContractError("group_max: " + std::to_string(x.rows()) + " rows not divisible into groups of " +
                        std::to_string(group_size));
  std::vector<std::vector<std::size_t>> groups(x.rows() / group_size);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    groups[g].resize(group_size);
    std::iota(groups[g].begin(), groups[g].end(), g * group_size);
  }
  return segment_max(x, groups);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  const bool rec = detail::should_record({&x});
  Tensor<T> out = make_result<T>(std::move(shape), rec);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (rec) {
    detail::record(out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const bool rec = detail::should_record({&x});
  Tensor<T> out = make_result<T>({1}, rec);
  T acc = 0;
  for (T v : x.data()) acc += v;
  out.data()[0] = acc;
  if (rec) {
    detail::record(out, [x, out]() mutable {
      const T g = out.grad()[0];
      for (T& gx : x.mutable_grad()) gx += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& logits, std::span<const std::uint8_t> allow) {
  if (allow.size() != logits.numel())
    throw DimensionError("masked_softmax: mask has " + std::to_string(allow.size()) +
                         " entries for logits " + shape_str(logits.shape()));
  const std::size_t n = logits.cols();
  const std::size_t rows = logits.numel() / n;
  const bool rec = detail::should_record({&logits});
  Tensor<T> out = make_result<T>(logits.shape(), rec);
  auto px = logits.data();
  auto po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = px.data() + r * n;
    const std::uint8_t* a = allow.data() + r * n;
    T* y = po.data() + r * n;
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j)
      if (a[j]) {
        mx = any ? std::max(mx, x[j]) : x[j];
        any = true;
      }
    if (!any) throw InvalidMaskError("masked_softmax: row " + std::to_string(r) + " has no allowed entry");
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = a[j] ? std::exp(x[j] - mx) : T(0);
      z += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  if (rec) {
    detail::record(out, [logits, out, rows, n]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto gx = logits.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::size_t d = x.cols();
  if (d == 0) throw DimensionError("layer_norm: zero-width rows");
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: affine parameters do not match " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  const bool rec = detail::should_record({&x, &gamma, &beta});
  Tensor<T> out = make_result<T>(x.shape(), rec);
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  auto px = x.data();
  auto pg = gamma.data();
  auto pb = beta.data();
  auto po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      po[r * d + j] = pg[j] * h + pb[j];
    }
  }
  if (rec) {
    detail::record(out, [x, gamma, beta, out, xhat = std::move(xhat), inv_std = std::move(inv_std),
                         rows, d]() mutable {
      auto g = out.grad();
      auto pg = gamma.data();
      if (gamma.requires_grad()) {
        auto gg = gamma.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gg[i % d] += g[i] * xhat[i];
      }
      if (beta.requires_grad()) {
        auto gb = beta.mutable_grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % d] += g[i];
      }
      if (x.requires_grad()) {
        auto gx = x.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r) {
          T mean_dh = 0, mean_dh_h = 0;
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = g[r * d + j] * pg[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat[r * d + j];
          }
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const T dh = g[r * d + j] * pg[j];
            gx[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> weighted_gather(const Tensor<T>& src, std::span<const std::size_t> index,
                          std::span<const double> weights, std::size_t k) {
  require_2d(src, "weighted_gather");
  if (k == 0 || index.size() % k != 0 || weights.size() != index.size())
    throw DimensionError("weighted_gather: index/weight tables are not M x k");
  const std::size_t n = src.rows(), c = src.cols(), m = index.size() / k;
  for (std::size_t i : index)
    if (i >= n) throw ContractError("weighted_gather: index out of range");
  const bool rec = detail::should_record({&src});
  Tensor<T> out = make_result<T>({m, c}, rec);
  auto ps = src.data();
  auto po = out.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const T w = static_cast<T>(weights[r * k + j]);
      const T* s = ps.data() + index[r * k + j] * c;
      for (std::size_t q = 0; q < c; ++q) po[r * c + q] += w * s[q];
    }
  if (rec) {
    std::vector<std::size_t> idx(index.begin(), index.end());
    std::vector<double> w(weights.begin(), weights.end());
    detail::record(out, [src, out, idx = std::move(idx), w = std::move(w), m, k, c]() mutable {
      auto g = out.grad();
      auto gs = src.mutable_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < k; ++j) {
          const T wt = static_cast<T>(w[r * k + j]);
          T* d = gs.data() + idx[r * k + j] * c;
          for (std::size_t q = 0; q < c; ++q) d[q] += wt * g[r * c + q];
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_2d(logits, "softmax_cross_entropy");
  const std::size_t m = logits.rows(), c = logits.cols();
  if (labels.size() != m)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for logits " + shape_str(logits.shape()));
  const bool rec = detail::should_record({&logits});
  Tensor<T> out = make_result<T>({1}, rec);
  std::vector<T> prob(m * c);
  auto px = logits.data();
  T total = 0;
  for (std::size_t r = 0; r < m; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= c)
      throw ContractError("softmax_cross_entropy: label out of range");
    const T* x = px.data() + r * c;
    const T mx = *std::max_element(x, x + c);
    T z = 0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    for (std::size_t j = 0; j < c; ++j) prob[r * c + j] = std::exp(x[j] - mx) / z;
    total += -(x[labels[r]] - mx - std::log(z));
  }
  out.data()[0] = total / static_cast<T>(m);
  if (rec) {
    std::vector<int> lab(labels.begin(), labels.end());
    detail::record(out, [logits, out, prob = std::move(prob), lab = std::move(lab), m, c]() mutable {
      const T g = out.grad()[0] / static_cast<T>(m);
      auto gx = logits.mutable_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t j = 0; j < c; ++j)
          gx[r * c + j] += g * (prob[r * c + j] - (static_cast<int>(j) == lab[r] ? T(1) : T(0)));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------

#define PCMAE_INSTANTIATE(T)                                                                    \
  template class Tensor<T>;                                                                     \
  template class Tape<T>;                                                                       \
  template class TapeScope<T>;                                                                  \
  template void backward(const Tensor<T>&);                                                     \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> gelu(const Tensor<T>&);                                                    \
  template Tensor<T> concat_cols(const std::vector<Tensor<T>>&);                                \
  template Tensor<T> concat_rows(const std::vector<Tensor<T>>&);                                \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                    \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);               \
  template Tensor<T> segment_max(const Tensor<T>&, const std::vector<std::vector<std::size_t>>&); \
  template Tensor<T> segment_mean(const Tensor<T>&, const std::vector<std::vector<std::size_t>>&); \
  template Tensor<T> group_max(const Tensor<T>&, std::size_t);                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                    \
  template Tensor<T> masked_softmax(const Tensor<T>&, std::span<const std::uint8_t>);           \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> weighted_gather(const Tensor<T>&, std::span<const std::size_t>,            \
                                     std::span<const double>, std::size_t);                     \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>);

PCMAE_INSTANTIATE(float)
PCMAE_INSTANTIATE(double)

#undef PCMAE_INSTANTIATE

}  // namespace pcmae
