#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctnmt/errors.hpp"

namespace ctnmt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  // Empty until the first gradient accumulation; an absent buffer reads as zero.
  std::vector<T> grad;
  bool requires_grad = false;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Dense row-major array with an optional gradient buffer. Copies share storage.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T* ptr() { return node_->data.data(); }
  const T* ptr() const { return node_->data.data(); }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->data[r * node_->shape.back() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    if (!flag) node_->grad.clear();
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Fresh constant tensor holding a copy of the values.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  // Deep copy preserving the requires_grad flag (gradient not copied).
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

// Define-by-run record of differentiable operations, replayed in reverse by backward().
template <typename T>
class Tape {
 public:
  struct Record {
    std::string_view op;
    std::function<void()> backward;
  };

  void push(std::string_view op, std::function<void()> backward) {
    records_.push_back({op, std::move(backward)});
  }

  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  void clear() { records_.clear(); }

  std::vector<std::string_view> ops() const {
    std::vector<std::string_view> out;
    out.reserve(records_.size());
    for (const auto& r : records_) out.push_back(r.op);
    return out;
  }

  // Runs every backward rule once, newest first, then empties the tape.
  std::size_t replay() {
    std::size_t visited = 0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      it->backward();
      ++visited;
    }
    records_.clear();
    return visited;
  }

 private:
  std::vector<Record> records_;
};

// One tape per thread and scalar type; training steps on different threads never share one.
template <typename T>
Tape<T>& active_tape() {
  thread_local Tape<T> tape;
  return tape;
}

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool grad_enabled() { return grad_mode_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Seeds d(loss)/d(loss) = 1 and replays the thread's tape. Returns the number of records visited.
template <typename T>
std::size_t backward(Tensor<T> loss) {
  if (loss.numel() != 1) {
    throw DimensionError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward(): loss is not recorded on the tape");
  }
  loss.grad_buffer()[0] += T(1);
  return active_tape<T>().replay();
}

}  // namespace ctnmt
