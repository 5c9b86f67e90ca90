#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lrmix/tensor.hpp"

namespace lrmix {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const noexcept { return parents.empty(); }

  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a value in the recorded computation graph.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const noexcept { return static_cast<bool>(node_); }
  const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Detached copy sharing no graph history.
template <class T>
Var<T> detach(const Var<T>& v) {
  return Var<T>(v.value(), false);
}

/// Creates the output node of an op. The backward closure is attached only
/// when gradient recording is on and some input requires a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward_fn,
                   const char* op_name) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op_name);
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (auto& in : inputs) node->parents.push_back(in.node());
      node->backward_fn = std::move(backward_fn);
    }
  }
  return Var<T>(std::move(node));
}

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
/// interior gradients are rebuilt on every call.
template <class T>
void backward(const Var<T>& loss) {
  if (!loss.defined() || loss.value().size() != 1)
    throw UsageError("backward() requires a scalar loss, got shape " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node<T>* node : order) {
    if (!node->is_leaf()) node->grad = Tensor<T>(node->value.shape());
  }
  Node<T>* root = loss.node().get();
  if (root->is_leaf()) {
    root->grad_buffer()[0] += T(1);
    return;
  }
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward_fn) node->backward_fn(*node);
  }
  for (Node<T>* node : order) {
    if (!node->is_leaf()) node->grad = Tensor<T>();
  }
}

/// Accumulates `delta` into the gradient of `parent` when it participates.
template <class T>
void accumulate_grad(const std::shared_ptr<Node<T>>& parent, const Tensor<T>& delta) {
  if (!parent->requires_grad) return;
  auto& g = parent->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

/// Trainable tensor plus its Adam moment accumulators.
template <class T>
class Parameter {
 public:
  Parameter() = default;
  explicit Parameter(Tensor<T> value)
      : var_(std::move(value), true), adam_m_(var_.shape()), adam_v_(var_.shape()) {}

  // Copies are deep: the copy owns a fresh graph leaf.
  Parameter(const Parameter& other)
      : adam_m_(other.adam_m_), adam_v_(other.adam_v_), step_count_(other.step_count_), clamp_(other.clamp_) {
    if (other.var_.defined()) var_ = Var<T>(other.value(), !other.frozen());
  }
  Parameter& operator=(const Parameter& other) {
    if (this != &other) *this = Parameter(other);
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  const Var<T>& var() const noexcept { return var_; }
  Tensor<T>& value() { return var_.mutable_value(); }
  const Tensor<T>& value() const { return var_.value(); }
  Tensor<T>& grad() { return var_.node()->grad_buffer(); }
  Tensor<T>& adam_m() noexcept { return adam_m_; }
  Tensor<T>& adam_v() noexcept { return adam_v_; }
  std::int64_t step_count() const noexcept { return step_count_; }
  void mark_step() noexcept { ++step_count_; }
  void reset_optimizer_state() {
    adam_m_.fill(T(0));
    adam_v_.fill(T(0));
    step_count_ = 0;
  }

  // Frozen parameters never receive gradients.
  void set_frozen(bool frozen) { var_.node()->requires_grad = !frozen; }
  bool frozen() const { return !var_.node()->requires_grad; }

  // Optional box constraint enforced after every optimizer step.
  void set_clamp(T lo, T hi) { clamp_ = std::pair<T, T>{lo, hi}; }
  const std::optional<std::pair<T, T>>& clamp() const noexcept { return clamp_; }

  void zero_grad() {
    auto& g = var_.node()->grad;
    if (!g.empty()) g.fill(T(0));
  }

 private:
  Var<T> var_;
  Tensor<T> adam_m_;
  Tensor<T> adam_v_;
  std::int64_t step_count_ = 0;
  std::optional<std::pair<T, T>> clamp_;
};

template <class T>
using ParamList = std::vector<Parameter<T>*>;

template <class T>
void zero_grad(const ParamList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

/// Name-addressed view over a module's trainable and persistent state.
template <class T>
struct NamedState {
  std::vector<std::pair<std::string, Parameter<T>*>> parameters;
  std::vector<std::pair<std::string, Tensor<T>*>> buffers;

  ParamList<T> params() const {
    ParamList<T> out;
    for (auto& [name, p] : parameters) out.push_back(p);
    return out;
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, p] : parameters) n += p->value().size();
    return n;
  }
};

}  // namespace lrmix
