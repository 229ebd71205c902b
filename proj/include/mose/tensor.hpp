#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mose/error.hpp"

namespace mose {

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

template <typename S>
struct TensorNode {
  std::vector<int64_t> shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;

  int64_t numel() const { return static_cast<int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

// Dense row-major tensor with value semantics over a shared node. The scalar
// type selects the precision: Tensor<float> for training, Tensor<double> for
// gradient-check builds.
template <typename S>
class Tensor {
 public:
  using Node = TensorNode<S>;

  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
    return filled(std::move(shape), S(0), requires_grad);
  }

  static Tensor filled(std::vector<int64_t> shape, S v, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    int64_t count = 1;
    for (int64_t d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
      count *= d;
    }
    n->shape = std::move(shape);
    n->value.assign(static_cast<size_t>(count), v);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_vector(std::vector<int64_t> shape, std::vector<S> data,
                            bool requires_grad = false) {
    int64_t count = 1;
    for (int64_t d : shape) count *= d;
    if (count != static_cast<int64_t>(data.size())) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    return from_vector({1}, {v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }

  const std::vector<int64_t>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }

  S* data() { return node_->value.data(); }
  const S* data() const { return node_->value.data(); }
  const std::vector<S>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }
  bool is_leaf() const { return node_->leaf; }
  void mark_non_leaf() { node_->leaf = false; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<S>& grad() const { return node_->grad; }
  void zero_grad() {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }
  // Releases the gradient buffer entirely; "no gradient this step" is
  // distinguishable from an all-zero gradient.
  void drop_grad() { node_->grad.clear(); }

  S item() const {
    if (numel() != 1) {
      throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
    }
    return node_->value[0];
  }

  std::shared_ptr<Node> handle() const { return node_; }
  Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

// Reverse-mode tape. Operations append one entry per produced tensor; the
// recording order is the topological order, and backward() replays it in
// reverse exactly once per entry.
template <typename S>
class Tape {
 public:
  struct Entry {
    std::shared_ptr<TensorNode<S>> out;
    std::function<void()> pull;  // accumulates into parent grads from out->grad
  };

  void record(std::shared_ptr<TensorNode<S>> out, std::function<void()> pull) {
    entries_.push_back(Entry{std::move(out), std::move(pull)});
  }

  size_t size() const { return entries_.size(); }

  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and pulls gradients back to every
  // requires_grad leaf. Leaf gradients accumulate across calls; interior
  // gradients are reset on every call so a replay starts clean.
  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    bool on_tape = false;
    for (const Entry& e : entries_) {
      if (e.out.get() == loss.node()) {
        on_tape = true;
        break;
      }
    }
    if (!on_tape) throw ContractError("backward: loss tensor was not recorded on this tape");

    for (Entry& e : entries_) {
      if (!e.out->grad.empty()) std::fill(e.out->grad.begin(), e.out->grad.end(), S(0));
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] = S(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // output never used downstream
      it->pull();
    }
  }

  // Active tape for the current thread; null means inference (no recording).
  static Tape*& current() {
    thread_local Tape* active = nullptr;
    return active;
  }

  class Scope {
   public:
    explicit Scope(Tape& t) : prev_(current()) { current() = &t; }
    ~Scope() { current() = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  std::vector<Entry> entries_;
};

}  // namespace mose
