#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "chunkssl/array.hpp"
#include "chunkssl/error.hpp"

namespace chunkssl {

template <class T>
class Tape;

/// Handle to a value recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Array<T>& value() const { return tape->value(id); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Records primitive applications in execution order. One tape serves one
/// forward/backward pair and is not shared between threads.
///
/// With gradient recording disabled the tape still keeps values and forward
/// closures (so replay() works) but drops backward closures.
template <class T>
class Tape {
 public:
  using Forward = std::function<Array<T>(const Tape&)>;
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> leaf(Array<T> value, bool requires_grad = false) {
    Node n;
    n.name = "leaf";
    n.value = std::move(value);
    n.requires_grad = requires_grad && record_;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Array<T> value) { return leaf(std::move(value), false); }

  Var<T> apply(std::string name, std::vector<std::size_t> inputs, Forward forward,
               Backward backward) {
    Node n;
    n.name = std::move(name);
    n.value = forward(*this);
    if (!n.value.all_finite()) {
      throw NumericError("non-finite output in primitive '" + n.name + "'");
    }
    bool needs = false;
    for (std::size_t i : inputs) needs = needs || nodes_[i].requires_grad;
    n.requires_grad = needs && record_;
    n.inputs = std::move(inputs);
    n.forward = std::move(forward);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  const Array<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::string& name(std::size_t id) const { return nodes_.at(id).name; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient buffer of a node, allocated as zeros on first access.
  Array<T>& grad_ref(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.shape() != n.value.shape()) n.grad = Array<T>(n.value.shape(), std::vector<T>(n.value.size(), T(0)));
    return n.grad;
  }

  /// Gradient of the last backward() target with respect to a node; zeros if
  /// no gradient reached it.
  Array<T> grad(Var<T> v) {
    if (!nodes_.at(v.id).requires_grad) {
      throw UsageError("tape: gradient requested for a node that does not require grad");
    }
    return grad_ref(v.id);
  }

  bool has_grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.requires_grad && n.grad.shape() == n.value.shape();
  }

  void backward(Var<T> output) {
    if (output.tape != this) throw UsageError("tape: backward on a foreign variable");
    if (value(output.id).size() != 1) {
      throw UsageError("tape: backward requires a scalar output, got " +
                       Array<T>::shape_string(value(output.id).shape()));
    }
    if (!record_) throw UsageError("tape: gradients were not recorded");
    for (auto& n : nodes_) n.grad = Array<T>();
    if (!nodes_[output.id].requires_grad) return;
    grad_ref(output.id)[0] = T(1);
    for (std::size_t id = output.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.backward && has_grad(id)) n.backward(*this, id);
    }
  }

  /// Recompute every non-leaf value from its inputs in recorded order.
  void replay() {
    for (auto& n : nodes_) {
      if (n.forward) n.value = n.forward(*this);
    }
  }

 private:
  struct Node {
    std::string name;
    std::vector<std::size_t> inputs;
    Array<T> value;
    Array<T> grad;
    Forward forward;
    Backward backward;
    bool requires_grad = false;
  };

  bool record_;
  std::deque<Node> nodes_;
};

}  // namespace chunkssl
