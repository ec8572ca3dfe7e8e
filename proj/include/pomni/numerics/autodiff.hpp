#pragma once

#include "pomni/numerics/tensor.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace pomni {

/// A named learnable (or buffer) tensor owned by a ParamStore.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  bool trainable = true;
  int id = -1;
};

/// Owns parameters with stable addresses, in registration order.
template <typename Scalar>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<Scalar>& add(std::string name, Tensor<Scalar> init, bool trainable = true) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<Scalar>>();
    p->name = name;
    p->value = std::move(init);
    p->trainable = trainable;
    p->id = static_cast<int>(params_.size());
    index_.emplace(std::move(name), p->id);
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Parameter<Scalar>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[static_cast<std::size_t>(it->second)].get();
  }
  const Parameter<Scalar>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[static_cast<std::size_t>(it->second)].get();
  }
  Parameter<Scalar>& get(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw std::out_of_range("unknown parameter: " + name);
  }

  std::size_t size() const { return params_.size(); }
  Parameter<Scalar>& operator[](std::size_t i) { return *params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return *params_[i]; }

  /// Marks every parameter whose name starts with `prefix` as (non-)trainable.
  void set_trainable(const std::string& prefix, bool trainable) {
    for (auto& p : params_) {
      if (p->name.rfind(prefix, 0) == 0) p->trainable = trainable;
    }
  }

  Index element_count() const {
    Index n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

 private:
  std::vector<std::unique_ptr<Parameter<Scalar>>> params_;
  std::unordered_map<std::string, int> index_;
};

/// Gradients keyed by parameter id.
template <typename Scalar>
class GradStore {
 public:
  void add(int id, const Tensor<Scalar>& g) {
    if (id >= static_cast<int>(grads_.size())) {
      grads_.resize(static_cast<std::size_t>(id) + 1);
      present_.resize(static_cast<std::size_t>(id) + 1, 0);
    }
    auto i = static_cast<std::size_t>(id);
    if (present_[i]) {
      grads_[i].array() += g.array();
    } else {
      grads_[i] = g;
      present_[i] = 1;
    }
  }

  const Tensor<Scalar>* find(int id) const {
    auto i = static_cast<std::size_t>(id);
    return (id >= 0 && i < present_.size() && present_[i]) ? &grads_[i] : nullptr;
  }
  Tensor<Scalar>* find(int id) {
    auto i = static_cast<std::size_t>(id);
    return (id >= 0 && i < present_.size() && present_[i]) ? &grads_[i] : nullptr;
  }

  void accumulate(const GradStore& other) {
    for (std::size_t i = 0; i < other.present_.size(); ++i) {
      if (other.present_[i]) add(static_cast<int>(i), other.grads_[i]);
    }
  }

  void scale(Scalar s) {
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      if (present_[i]) grads_[i].array() *= s;
    }
  }

  double squared_norm() const {
    double n = 0.0;
    for (std::size_t i = 0; i < grads_.size(); ++i) {
      if (present_[i]) n += grads_[i].array().template cast<double>().square().sum();
    }
    return n;
  }

  std::size_t capacity() const { return present_.size(); }

 private:
  std::vector<Tensor<Scalar>> grads_;
  std::vector<char> present_;
};

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  Tape<Scalar>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor<Scalar>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  Index dim(Index axis) const { return value().dim(axis); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode recording. Each forward op appends a node holding its value
/// and a closure that pushes the node's gradient to its parents.
template <typename Scalar>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), nullptr, false); }

  Var<Scalar> input(Tensor<Scalar> value, bool requires_grad = true) {
    return push(std::move(value), nullptr, requires_grad);
  }

  /// Leaf bound to a parameter. Frozen parameters are recorded as constants.
  Var<Scalar> param(const Parameter<Scalar>& p) {
    auto it = param_nodes_.find(p.id);
    if (it != param_nodes_.end()) return Var<Scalar>(this, it->second);
    Var<Scalar> v = push(Tensor<Scalar>(), &p.value, p.trainable && grad_enabled_);
    nodes_.back().param_id = p.id;
    param_nodes_.emplace(p.id, v.id());
    return v;
  }

  /// Records an op output. The closure is dropped when no parent needs a gradient.
  Var<Scalar> record(Tensor<Scalar> value, std::initializer_list<int> parents, Backward backward) {
    bool needs = false;
    for (int p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].requires_grad;
    Var<Scalar> v = push(std::move(value), nullptr, needs);
    if (needs) nodes_.back().backward = std::move(backward);
    return v;
  }

  Var<Scalar> record(Tensor<Scalar> value, const std::vector<int>& parents, Backward backward) {
    bool needs = false;
    for (int p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].requires_grad;
    Var<Scalar> v = push(std::move(value), nullptr, needs);
    if (needs) nodes_.back().backward = std::move(backward);
    return v;
  }

  const Tensor<Scalar>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.borrowed ? *n.borrowed : n.owned;
  }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].has_grad; }

  /// Gradient accumulated at a node (zeros when nothing reached it).
  Tensor<Scalar> grad(Var<Scalar> v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.has_grad) return n.grad;
    return Tensor<Scalar>::zeros(value(v.id()).shape());
  }

  /// Gradient buffer to accumulate into, or nullptr when the node needs none.
  Tensor<Scalar>* grad_target(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor<Scalar>::zeros(value(id).shape());
      n.has_grad = true;
    }
    return &n.grad;
  }

  /// Incoming gradient of the node currently being differentiated.
  const Tensor<Scalar>& incoming(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  void backward(Var<Scalar> root, Scalar seed = Scalar(1)) {
    if (root.value().size() != 1) {
      throw ShapeError("backward requires a scalar root, got " + to_string(root.shape()));
    }
    Tensor<Scalar>* g = grad_target(root.id());
    if (!g) return;
    g->array() += seed;
    for (int i = root.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

  /// Collects gradients that reached parameter leaves.
  GradStore<Scalar> param_grads() const {
    GradStore<Scalar> store;
    for (const Node& n : nodes_) {
      if (n.param_id >= 0 && n.has_grad) store.add(n.param_id, n.grad);
    }
    return store;
  }

  /// Gradient reaching a parameter leaf, if any.
  std::optional<Tensor<Scalar>> param_grad(const Parameter<Scalar>& p) const {
    auto it = param_nodes_.find(p.id);
    if (it == param_nodes_.end()) return std::nullopt;
    const Node& n = nodes_[static_cast<std::size_t>(it->second)];
    if (!n.has_grad) return std::nullopt;
    return n.grad;
  }

  /// When disabled, parameters enter as constants and no closures are recorded.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> owned;
    const Tensor<Scalar>* borrowed = nullptr;
    Tensor<Scalar> grad;
    Backward backward;
    int param_id = -1;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var<Scalar> push(Tensor<Scalar> value, const Tensor<Scalar>* borrowed, bool requires_grad) {
    Node n;
    n.owned = std::move(value);
    n.borrowed = borrowed;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<int, int> param_nodes_;
  bool grad_enabled_ = true;
};

}  // namespace pomni
