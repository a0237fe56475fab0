#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>

#include "nem/errors.hpp"
#include "nem/tensor.hpp"

namespace nem {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// owning tape is alive and not cleared.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  std::size_t id() const { return id_; }
  Tape<T>& tape() const { return *tape_; }
  bool tracked() const { return tape_->tracked(id_); }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Append-only record of primitive applications for reverse-mode
/// differentiation. Node ids increase with recording order, so every input of
/// a node has a smaller id than the node itself and a descending sweep is a
/// reverse topological order.
///
/// A node is tracked when it is a tracked leaf or when any of its inputs is
/// tracked. Untracked nodes carry no backward closure, which makes evaluation
/// passes over constant parameters cheap. A tape is single-writer.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value) { return push(std::move(value), true, true, {}); }
  Var<T> constant(Tensor<T> value) {
    return push(std::move(value), false, false, {});
  }

  /// Records an op result. `backward` is kept only when an input is tracked.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
    bool any = false;
    for (const auto& in : inputs) any = any || tracked(in.id());
    return push(std::move(value), any, false,
                any ? std::move(backward) : BackwardFn{});
  }

  template <typename Range>
  Var<T> record_many(Tensor<T> value, const Range& inputs,
                     BackwardFn backward) {
    bool any = false;
    for (const auto& in : inputs) any = any || tracked(in.id());
    return push(std::move(value), any, false,
                any ? std::move(backward) : BackwardFn{});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool tracked(std::size_t id) const { return nodes_.at(id).tracked; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient accumulated for `v` by the last backward(); zeros when no
  /// gradient reached it.
  Tensor<T> grad(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    if (n.grad.shape() == n.value.shape()) return n.grad;
    return Tensor<T>(n.value.shape());
  }

  /// Mutable accumulator for node `id`, allocated as zeros on first access.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  const Tensor<T>& upstream(std::size_t id) const { return nodes_.at(id).grad; }

  /// Reverse sweep from a scalar loss. Gradients of tracked leaves remain
  /// readable via grad(); intermediate gradients are released as the sweep
  /// passes them. A tape can be swept once.
  void backward(const Var<T>& loss) {
    if (consumed_) throw ContractError("backward() called twice on one tape");
    if (loss.size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(loss.shape()));
    }
    consumed_ = true;
    if (!tracked(loss.id())) return;
    grad_buffer(loss.id())[0] = T(1);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.tracked || n.leaf || !n.backward) continue;
      if (n.grad.shape() != n.value.shape()) continue;
      n.backward(*this, id);
      n.grad = Tensor<T>();
      n.backward = BackwardFn{};
    }
  }

  bool consumed() const { return consumed_; }

  void clear() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool tracked = false;
    bool leaf = false;
  };

  Var<T> push(Tensor<T> value, bool tracked, bool leaf, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), std::move(fn),
                          tracked, leaf});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace nem
