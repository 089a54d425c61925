#pragma once

// Dense tensors with a define-by-run reverse-mode tape.
//
// Tensor<T> is a shared handle: copies alias the same storage, clone() makes
// a deep copy. Every op that sees an input with requires_grad (while grad
// mode is on) pushes a backward closure onto the thread-local Tape<T>;
// backward() replays the tape in reverse recording order and clears it.
//
// T is float for training and double for finite-difference checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace selfablate {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T{0});
    return grad;
  }
};

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (T v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string("non-finite value produced by ") + op);
    }
  }
}

}  // namespace detail

/// Global switch for tape recording. Thread-local so inference threads can
/// run alongside a training thread.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class Tape {
 public:
  static Tape& current() {
    thread_local Tape tape;
    return tape;
  }

  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  void replay_reverse() {
    // Closures may not record new entries; take ownership first so a throw
    // mid-replay still leaves the tape empty.
    auto steps = std::move(steps_);
    steps_.clear();
    for (auto it = steps.rbegin(); it != steps.rend(); ++it) (*it)();
  }

  void clear() { steps_.clear(); }
  std::size_t size() const { return steps_.size(); }

 private:
  std::vector<std::function<void()>> steps_;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::TensorNode<T>;

  Tensor() : node_(std::make_shared<Node>()) { node_->shape = {1}; node_->data = {T{0}}; }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + to_string(shape));
    }
    if (numel(shape) != data.size()) {
      throw ShapeError("shape " + to_string(shape) + " does not match " +
                       std::to_string(data.size()) + " elements");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }
  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T{1}, requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  std::vector<T>& values() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; zero-filled if nothing has been accumulated yet.
  std::span<const T> grad() const { return node_->grad_buffer(); }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const {
    Tensor out(node_->shape, node_->data, node_->requires_grad);
    return out;
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

/// Wraps freshly computed output data into a tensor and, when any input is
/// tracked, records `backward(out_grad)` on the tape.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<Tensor<T>> inputs, Backward&& backward) {
  check_finite<T>(data, op);
  bool track = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) track = track || in.requires_grad();
  }
  Tensor<T> out(std::move(shape), std::move(data), track);
  if (track) {
    std::weak_ptr<TensorNode<T>> weak = out.node();
    Tape<T>::current().record(
        [weak, fn = std::forward<Backward>(backward)]() mutable {
          auto node = weak.lock();
          if (!node || node->grad.empty()) return;
          fn(std::span<const T>(node->grad));
        });
  }
  return out;
}

/// Adds `g` into the gradient of `t` if `t` is tracked.
template <typename T>
void accumulate(const Tensor<T>& t, std::span<const T> g) {
  if (!t.requires_grad()) return;
  auto& buf = t.node()->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <typename T>
std::vector<T>* grad_target(const Tensor<T>& t) {
  return t.requires_grad() ? &t.node()->grad_buffer() : nullptr;
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar loss and clears the tape.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) {
    Tape<T>::current().clear();
    throw Error("backward() on a loss that is not on the tape");
  }
  loss.node()->grad_buffer()[0] += T{1};
  Tape<T>::current().replay_reverse();
}

}  // namespace selfablate
