#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "advkit/tensor.hpp"

namespace advkit {

template <class T>
class Tape;

// Handle to a node on a tape. Plain index, cheap to copy.
template <class T>
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in execution order, so inputs always
// precede their consumers and a single reverse sweep visits each node once.
// Node values double as the saved activations for the backward closures.
template <class T>
class Tape {
 public:
  // (tape, gradient of this node, value of this node)
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&, const Tensor<T>&)>;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    return push("leaf", std::move(value), {}, nullptr, requires_grad);
  }

  Var<T> record(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                BackwardFn backward) {
    bool req = false;
    for (Var<T> v : inputs) {
      check(v, op);
      req = req || nodes_[v.id].requires_grad;
    }
    if (!grad_enabled_) return push(op, std::move(value), {}, nullptr, false);
    std::vector<int32_t> ids;
    ids.reserve(inputs.size());
    for (Var<T> v : inputs) ids.push_back(v.id);
    return push(op, std::move(value), std::move(ids),
                req ? std::move(backward) : nullptr, req);
  }

  const Tensor<T>& value(Var<T> v) const {
    check(v, "value");
    return nodes_[v.id].value;
  }

  bool requires_grad(Var<T> v) const {
    check(v, "requires_grad");
    return nodes_[v.id].requires_grad;
  }

  // Whether new records keep backward closures. Disabling turns the tape
  // into a plain forward evaluator.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  size_t size() const { return nodes_.size(); }

  const char* op_name(Var<T> v) const {
    check(v, "op_name");
    return nodes_[v.id].op;
  }

  std::vector<Var<T>> op_inputs(Var<T> v) const {
    check(v, "op_inputs");
    std::vector<Var<T>> out;
    for (int32_t id : nodes_[v.id].inputs) out.push_back(Var<T>{id});
    return out;
  }

  void backward(Var<T> loss) {
    check(loss, "backward");
    if (nodes_.empty()) throw std::logic_error("backward: empty tape");
    const Node& ln = nodes_[loss.id];
    if (ln.value.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  shape_str(ln.value.shape()));
    if (!ln.requires_grad)
      throw std::logic_error("backward: loss is detached from all parameters");
    grads_.assign(nodes_.size(), Tensor<T>());
    grads_[loss.id] = Tensor<T>::full(ln.value.shape(), T(1));
    for (int32_t id = loss.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (grads_[id].size() == 0 || !n.backward) continue;
      n.backward(*this, grads_[id], n.value);
    }
  }

  // Gradient of the last backward() w.r.t. v; null if none was produced.
  const Tensor<T>* grad(Var<T> v) const {
    check(v, "grad");
    if (static_cast<size_t>(v.id) >= grads_.size() || grads_[v.id].size() == 0)
      return nullptr;
    return &grads_[v.id];
  }

  // Called by backward closures to push gradient into an input node.
  void accumulate(Var<T> v, const Tensor<T>& g) {
    check(v, "accumulate");
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (g.shape() != n.value.shape())
      throw std::logic_error("gradient shape " + shape_str(g.shape()) +
                             " does not match value shape " +
                             shape_str(n.value.shape()));
    Tensor<T>& slot = grads_[v.id];
    if (slot.size() == 0) {
      slot = g;
    } else {
      for (size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
    }
  }

 private:
  struct Node {
    const char* op;
    Tensor<T> value;
    std::vector<int32_t> inputs;
    BackwardFn backward;
    bool requires_grad;
  };

  Var<T> push(const char* op, Tensor<T> value, std::vector<int32_t> inputs,
              BackwardFn backward, bool req) {
    nodes_.push_back(Node{op, std::move(value), std::move(inputs),
                          std::move(backward), req});
    return Var<T>{static_cast<int32_t>(nodes_.size() - 1)};
  }

  void check(Var<T> v, const char* ctx) const {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
      throw std::logic_error(std::string(ctx) + ": invalid tape handle");
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  bool grad_enabled_ = true;
};

}  // namespace advkit
