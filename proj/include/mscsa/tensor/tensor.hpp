#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mscsa/core/error.hpp"

namespace mscsa {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline std::atomic<bool>& finite_check_flag() {
#ifdef NDEBUG
  static std::atomic<bool> flag{false};
#else
  static std::atomic<bool> flag{true};
#endif
  return flag;
}
}  // namespace detail

/// Toggle NaN/Inf detection on every op result. On by default in debug builds.
inline void set_finite_checks(bool enabled) { detail::finite_check_flag() = enabled; }
inline bool finite_checks_enabled() { return detail::finite_check_flag(); }

/// Cache-line aligned allocator. Eigen picks its vectorised reduction
/// order from the buffer address, so every tensor buffer starts on the same
/// boundary to keep results independent of where the heap put it.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlign}));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t{kAlign}); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;
  const char* op = "leaf";

  bool is_leaf() const { return inputs.empty(); }

  Buffer<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

/// Dense row-major N-d array with optional participation in reverse-mode autodiff.
///
/// A Tensor is a shared handle: copies alias the same storage. Results of ops
/// are never mutated after construction; only leaves (parameters, buffers)
/// are written through mutable_data().
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    validate_shape(shape);
    node_->data.assign(mscsa::numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, const std::vector<T>& values, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer<T>(values.begin(), values.end()), requires_grad) {}

  Tensor(Shape shape, Buffer<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    validate_shape(shape);
    if (mscsa::numel(shape) != values.size()) {
      throw DimensionError("tensor: shape " + mscsa::to_string(shape) + " needs " +
                           std::to_string(mscsa::numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, Buffer<T>{value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  const T* begin() const { return node_->data.data(); }
  T operator[](std::size_t i) const { return node_->data[i]; }
  T item() const {
    if (numel() != 1) throw DimensionError("item(): tensor is not a scalar " + mscsa::to_string(shape()));
    return node_->data[0];
  }

  /// Writable view, only for leaves.
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw std::logic_error("mutable_data(): tensor is produced by an op");
    return node_->data;
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const {
    if (!has_grad()) throw std::logic_error("grad(): no gradient accumulated for this tensor");
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  }

  /// Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), Buffer<T>(node_->data), false); }

  std::vector<T> to_vector() const { return {node_->data.begin(), node_->data.end()}; }

  template <typename U>
  Tensor<U> cast(bool requires_grad = false) const {
    Buffer<U> out(numel());
    std::transform(node_->data.begin(), node_->data.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(out), requires_grad);
  }

  std::shared_ptr<Node<T>> node() const { return node_; }

  /// Builds an op result. Inputs are only retained when a gradient can flow.
  static Tensor make_result(Shape shape, Buffer<T> values, std::vector<Tensor> inputs,
                            std::function<void(Node<T>&)> backward, const char* op) {
    Tensor out;
    out.node_ = std::make_shared<Node<T>>();
    out.node_->shape = std::move(shape);
    out.node_->data = std::move(values);
    out.node_->op = op;
    if (finite_checks_enabled()) {
      for (T v : out.node_->data) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
      }
    }
    const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (needs) {
      out.node_->requires_grad = true;
      for (auto& t : inputs) out.node_->inputs.push_back(t.node_);
      out.node_->backward_fn = std::move(backward);
    }
    return out;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw DimensionError("tensor: empty shape");
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("tensor: zero extent in " + mscsa::to_string(shape));
    }
  }

  std::shared_ptr<Node<T>> node_;
};

/// Operations reachable from a scalar loss, in topological order
/// (every node after all of its producers).
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& loss) {
    Tape tape;
    if (!loss.defined()) return tape;
    std::unordered_set<const Node<T>*> visited;
    // Iterative post-order DFS; graphs from deep models overflow recursion easily.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
      auto& [node, next_input] = stack.back();
      if (next_input < node->inputs.size()) {
        Node<T>* child = node->inputs[next_input++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        continue;
      }
      tape.entries_.push_back(node);
      stack.pop_back();
    }
    return tape;
  }

  std::span<Node<T>* const> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  bool contains(const Tensor<T>& t) const {
    return std::find(entries_.begin(), entries_.end(), t.node().get()) != entries_.end();
  }

  /// Seeds d(root)/d(root) = 1 and runs backward rules in reverse order.
  /// Gradients of intermediate nodes are released once consumed.
  void replay() const {
    if (entries_.empty()) return;
    Node<T>* root = entries_.back();
    auto& g = root->ensure_grad();
    std::fill(g.begin(), g.end(), T{1});
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      Node<T>* node = *it;
      if (!node->backward_fn) continue;
      node->ensure_grad();
      for (auto& in : node->inputs) {
        if (in->requires_grad) in->ensure_grad();
      }
      node->backward_fn(*node);
      if (!node->is_leaf()) Buffer<T>().swap(node->grad);
    }
  }

 private:
  std::vector<Node<T>*> entries_;
};

/// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from loss.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward(): loss must be a scalar tensor");
  }
  if (!loss.requires_grad()) throw std::logic_error("backward(): loss is not on the tape");
  Tape<T>::record(loss).replay();
}

/// Like backward(), but verifies that every tensor in `wrt` is on the tape.
template <typename T>
void backward(const Tensor<T>& loss, std::span<const Tensor<T>> wrt) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward(): loss must be a scalar tensor");
  }
  const auto tape = Tape<T>::record(loss);
  for (const auto& t : wrt) {
    if (!tape.contains(t)) throw std::logic_error("backward(): leaf is not on the tape");
  }
  tape.replay();
}

}  // namespace mscsa
