#pragma once

#include <atomic>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "mda/errors.hpp"
#include "mda/rng.hpp"

// Dense n-d tensors plus reverse-mode autodiff.
//
// Every differentiable op appends one node to an implicit tape: nodes carry
// monotonically increasing creation ids, and an op's inputs always exist
// before its output, so creation order is a topological order. backward()
// walks the reachable nodes once, in reverse creation order, accumulating
// gradients additively across fan-out.
namespace mda {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

namespace detail {
inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

// When false, ops run without recording backward closures (eval mode).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// RAII guard disabling tape recording, for inference passes.
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
class Tensor;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated on first accumulation, same size as value
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<Tensor<T>> parents;
  // Reads this node's grad/value and accumulates into the parents' grads.
  std::function<void(TensorNode<T>&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using scalar_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return make(std::move(shape), {}, requires_grad, T(0));
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    return make(std::move(shape), {}, requires_grad, fill);
  }

  static Tensor from_data(Shape shape, std::vector<T> data,
                          bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    t.node_->id = detail::next_node_id();
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  // Uniform values in [lo, hi), values keyed by (seed, flat index).
  static Tensor uniform(Shape shape, T lo, T hi, std::uint64_t seed,
                        bool requires_grad = false) {
    std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)));
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] = static_cast<T>(lo + (hi - lo) * rng::uniform_at(seed, i));
    }
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->value.size()); }

  // Tensor is a shared handle: const-ness of the handle does not protect the
  // node, so mutators below are const-qualified (same convention as other
  // shared-tensor libraries). Direct value mutation is only sound for leaves
  // (optimizer updates, loaders).
  std::span<const T> values() const { return node_->value; }
  std::vector<T>& mutable_values() const { return node_->value; }

  T item() const {
    if (numel() != 1) {
      throw ShapeError("item(): tensor has " + std::to_string(numel()) +
                       " elements, expected 1");
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) const { node_->requires_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::vector<T>& mutable_grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() const {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  TensorNode<T>* node() const { return node_.get(); }
  std::uint64_t id() const { return node_->id; }

  bool all_finite() const {
    for (T v : node_->value) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  // Builds an op output node. backward_fn may be empty for non-differentiable
  // results; it is dropped entirely when no parent needs gradients or grad
  // mode is off.
  static Tensor op_output(Shape shape, std::vector<T> value,
                          std::vector<Tensor> parents,
                          std::function<void(TensorNode<T>&)> backward_fn) {
    Tensor out = from_data(std::move(shape), std::move(value));
    bool needs = false;
    if (grad_enabled()) {
      for (const Tensor& p : parents) {
        if (p.requires_grad()) {
          needs = true;
          break;
        }
      }
    }
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->parents = std::move(parents);
      out.node_->backward_fn = std::move(backward_fn);
    }
    return out;
  }

 private:
  static Tensor make(Shape shape, std::vector<T>, bool requires_grad, T fill) {
    std::vector<T> data(static_cast<std::size_t>(shape_numel(shape)), fill);
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  std::shared_ptr<TensorNode<T>> node_;
};

// Populates d(loss)/d(tensor) for every requires_grad tensor reachable from
// loss. Visits each recorded node exactly once, children before parents.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " +
                     shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ShapeError("backward: loss does not require grad (no graph recorded)");
  }

  // Gather reachable nodes iteratively; recursion depth on deep nets is not
  // bounded enough to trust the stack.
  std::vector<TensorNode<T>*> order;
  std::unordered_set<TensorNode<T>*> seen;
  std::vector<TensorNode<T>*> stack{loss.node()};
  seen.insert(loss.node());
  while (!stack.empty()) {
    TensorNode<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const Tensor<T>& p : n->parents) {
      if (p.requires_grad() && !seen.count(p.node())) {
        seen.insert(p.node());
        stack.push_back(p.node());
      }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const TensorNode<T>* a, const TensorNode<T>* b) { return a->id > b->id; });

  loss.node()->ensure_grad();
  loss.node()->grad[0] += T(1);
  for (TensorNode<T>* n : order) {
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// --- indexing helpers (row-major, innermost = last axis) ---

inline std::int64_t idx4(const Shape& s, std::int64_t n, std::int64_t h,
                         std::int64_t w, std::int64_t c) {
  return ((n * s[1] + h) * s[2] + w) * s[3] + c;
}

inline std::int64_t idx3(const Shape& s, std::int64_t a, std::int64_t b,
                         std::int64_t c) {
  return (a * s[1] + b) * s[2] + c;
}

inline std::int64_t idx2(const Shape& s, std::int64_t a, std::int64_t b) {
  return a * s[1] + b;
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* op,
                  const char* name) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + name + " must have rank " +
                     std::to_string(rank) + ", got shape " + shape_str(t.shape()));
  }
}

}  // namespace mda
