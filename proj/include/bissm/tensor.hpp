#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <unordered_set>
#include <vector>

#include "bissm/errors.hpp"

namespace bissm {

using Dim = std::int64_t;
using Shape = std::vector<Dim>;

namespace detail {

inline Dim shape_numel(const Shape& s) {
  Dim n = 1;
  for (Dim d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

// Instrumentation: live/peak bytes of tensor storage and a MAC counter fed
// by the compute ops (matmul, convs, scan). Both are process-wide.
inline std::atomic<std::int64_t>& live_bytes() {
  static std::atomic<std::int64_t> v{0};
  return v;
}
inline std::atomic<std::int64_t>& peak_bytes() {
  static std::atomic<std::int64_t> v{0};
  return v;
}
inline std::atomic<std::int64_t>& mac_counter() {
  static std::atomic<std::int64_t> v{0};
  return v;
}

inline void track_alloc(std::int64_t bytes) {
  const std::int64_t cur = live_bytes().fetch_add(bytes, std::memory_order_relaxed) + bytes;
  std::int64_t peak = peak_bytes().load(std::memory_order_relaxed);
  while (cur > peak && !peak_bytes().compare_exchange_weak(peak, cur, std::memory_order_relaxed)) {
  }
}
inline void track_free(std::int64_t bytes) { live_bytes().fetch_sub(bytes, std::memory_order_relaxed); }

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  bool tracked = false;  // part of an autodiff graph
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;  // folds this->grad into parents

  explicit TensorImpl(Shape s) : shape(std::move(s)) {
    value.resize(static_cast<std::size_t>(shape_numel(shape)), T(0));
    track_alloc(static_cast<std::int64_t>(value.size() * sizeof(T)));
  }
  ~TensorImpl() {
    track_free(static_cast<std::int64_t>((value.size() + grad.size()) * sizeof(T)));
  }
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;

  void ensure_grad() {
    if (grad.empty()) {
      grad.assign(value.size(), T(0));
      track_alloc(static_cast<std::int64_t>(grad.size() * sizeof(T)));
    }
  }
};

}  // namespace detail

inline void reset_memory_peak() {
  detail::peak_bytes().store(detail::live_bytes().load(std::memory_order_relaxed),
                             std::memory_order_relaxed);
}
inline std::int64_t memory_live_bytes() { return detail::live_bytes().load(std::memory_order_relaxed); }
inline std::int64_t memory_peak_bytes() { return detail::peak_bytes().load(std::memory_order_relaxed); }

inline void reset_mac_counter() { detail::mac_counter().store(0, std::memory_order_relaxed); }
inline std::int64_t mac_count() { return detail::mac_counter().load(std::memory_order_relaxed); }
inline void count_macs(std::int64_t n) { detail::mac_counter().fetch_add(n, std::memory_order_relaxed); }

// Disables graph recording for the enclosing scope (inference, benchmarks).
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Dense row-major tensor handle with reverse-mode gradient tracking.
/// Copying a Tensor aliases the same storage; the graph is rebuilt on every
/// forward pass and released when the last handle to its root goes away.
template <typename T>
class Tensor {
public:
  using Impl = detail::TensorImpl<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::make_shared<Impl>(std::move(shape))); }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
    return t;
  }

  static Tensor scalar(T v) { return full({}, v); }

  static Tensor from_vector(Shape shape, std::vector<T> data) {
    const Dim n = detail::shape_numel(shape);
    if (n != static_cast<Dim>(data.size()))
      throw ShapeError("from_vector: shape " + detail::shape_str(shape) + " holds " +
                       std::to_string(n) + " values, got " + std::to_string(data.size()));
    Tensor t = zeros(std::move(shape));
    t.impl_->value = std::move(data);
    return t;
  }

  static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev = T(1)) {
    Tensor t = zeros(std::move(shape));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.impl_->value) v = static_cast<T>(dist(rng)) * stddev;
    return t;
  }

  static Tensor uniform(Shape shape, std::mt19937_64& rng, T lo, T hi) {
    Tensor t = zeros(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& v : t.impl_->value) v = static_cast<T>(dist(rng));
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  Dim dim(std::size_t i) const { return impl_->shape.at(i); }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  Dim numel() const { return static_cast<Dim>(impl_->value.size()); }

  std::span<const T> values() const { return impl_->value; }
  // In-place access; intended for leaves (initialization, optimizer updates).
  std::span<T> values_mut() { return impl_->value; }

  T item() const {
    if (numel() != 1) throw ShapeError("item(): tensor has " + std::to_string(numel()) + " elements");
    return impl_->value[0];
  }

  Tensor& set_requires_grad(bool v = true) {
    impl_->requires_grad = v;
    impl_->tracked = v;
    return *this;
  }
  bool requires_grad() const { return impl_->requires_grad; }
  bool tracked() const { return impl_ && impl_->tracked; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const {
    if (impl_->grad.empty()) throw ValueError("grad(): no gradient has been accumulated");
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  std::shared_ptr<Impl> impl() const { return impl_; }
  Impl* raw() const { return impl_.get(); }

private:
  std::shared_ptr<Impl> impl_;
};

namespace detail {

// Result-node builder shared by all ops: hooks parents and the backward
// closure only when grad mode is on and some input is tracked.
template <typename T>
Tensor<T> make_op_result(Shape shape, std::vector<std::shared_ptr<TensorImpl<T>>> parents,
                         std::function<void(TensorImpl<T>&)> backward_fn) {
  Tensor<T> out = Tensor<T>::zeros(std::move(shape));
  if (grad_mode_flag()) {
    bool any = false;
    for (const auto& p : parents)
      if (p && p->tracked) any = true;
    if (any) {
      out.impl()->tracked = true;
      out.impl()->parents = std::move(parents);
      out.impl()->backward_fn = std::move(backward_fn);
    }
  }
  return out;
}

template <typename T>
void accumulate(TensorImpl<T>& node, std::span<const T> contribution) {
  node.ensure_grad();
  T* g = node.grad.data();
  for (std::size_t i = 0; i < contribution.size(); ++i) g[i] += contribution[i];
}

}  // namespace detail

/// Reverse-mode sweep from a scalar loss. Each tracked leaf receives
/// dLoss/dLeaf in its grad buffer; repeated calls accumulate.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) throw ShapeError("backward(): loss must be scalar, got " + detail::shape_str(loss.shape()));
  if (!loss.tracked()) throw ValueError("backward(): loss is not connected to any tracked tensor");

  using Impl = detail::TensorImpl<T>;
  // Iterative post-order DFS; recursion would overflow on long scan chains.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(loss.raw(), 0);
  visited.insert(loss.raw());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* p = node->parents[next++].get();
      if (p->tracked && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are per-sweep scratch; only leaf grads persist across
  // repeated backward calls.
  for (Impl* node : order)
    if (node->backward_fn && !node->grad.empty())
      std::fill(node->grad.begin(), node->grad.end(), T(0));

  loss.raw()->ensure_grad();
  loss.raw()->grad[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

}  // namespace bissm
