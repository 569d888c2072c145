#ifndef TDSA_TAPE_HPP_
#define TDSA_TAPE_HPP_

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tdsa/error.hpp"
#include "tdsa/tensor.hpp"

namespace tdsa {

template <typename T>
class Tape;

// Handle to a node on a tape. Cheap to copy; valid as long as the tape is.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor4<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

template <typename T>
using GradMap = std::map<std::size_t, Tensor4<T>>;

/*
 * Reverse-mode autodiff tape.
 *
 * Nodes are appended in evaluation order, so the node list is already a
 * topological order: every parent id is smaller than its child's id.
 * backward() walks ids from the root down to 0 and runs each reachable
 * node's rule exactly once; rules add (never assign) into parent gradients,
 * which handles fan-out.
 *
 * A tape belongs to one thread.
 */
template <typename T>
class Tape {
 public:
  // Rule for one node: read grad(self), add contributions into parents.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor4<T> value, bool requires_grad = true, std::string name = "leaf") {
    check_finite(value, name);
    nodes_.push_back(Node{std::move(value), {}, requires_grad, {}, nullptr, std::move(name)});
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor4<T> value) { return leaf(std::move(value), false, "constant"); }

  // Appends an op node. The node needs a gradient iff any parent does.
  Var<T> record(Tensor4<T> value, std::vector<std::size_t> parents, BackwardFn fn,
                std::string name) {
    check_finite(value, name);
    bool rg = false;
    for (std::size_t p : parents) {
      if (p >= nodes_.size()) throw ContractError(name + ": parent is not on this tape");
      rg = rg || nodes_[p].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, rg, std::move(parents),
                          rg ? std::move(fn) : BackwardFn{}, std::move(name)});
    return {this, nodes_.size() - 1};
  }

  std::size_t size() const { return nodes_.size(); }
  const Tensor4<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::size_t>& parents(std::size_t id) const { return nodes_.at(id).parents; }
  const std::string& name(std::size_t id) const { return nodes_.at(id).name; }

  // Gradient of node `id` from the last backward(); empty if unreached.
  const Tensor4<T>& grad(std::size_t id) const { return nodes_.at(id).grad; }
  const Tensor4<T>& grad(const Var<T>& v) const { return grad(v.id); }

  // Accumulation target for a parent, or nullptr if it needs no gradient.
  Tensor4<T>* grad_sink(std::size_t id) {
    Node& nd = nodes_[id];
    if (!nd.requires_grad) return nullptr;
    if (nd.grad.empty() && nd.value.size() != 0) nd.grad = Tensor4<T>(nd.value.shape());
    return &nd.grad;
  }

  // Returns dRoot/dLeaf for every leaf that requires a gradient. Leaves the
  // root does not depend on get a zero tensor.
  GradMap<T> backward(const Var<T>& root) {
    if (root.tape != this) throw ContractError("backward: root belongs to another tape");
    const Tensor4<T>& rv = nodes_.at(root.id).value;
    if (rv.size() != 1) {
      throw ContractError("backward: root must be a scalar, got shape " + rv.shape().str());
    }
    for (Node& nd : nodes_) nd.grad = Tensor4<T>();
    if (nodes_[root.id].requires_grad) {
      nodes_[root.id].grad = Tensor4<T>(rv.shape(), T(1));
      for (std::size_t i = root.id + 1; i-- > 0;) {
        Node& nd = nodes_[i];
        if (nd.grad.empty() || !nd.backward) continue;
        nd.backward(*this, i);
      }
    }
    GradMap<T> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const Node& nd = nodes_[i];
      if (!nd.parents.empty() || !nd.requires_grad) continue;
      out.emplace(i, nd.grad.empty() ? Tensor4<T>(nd.value.shape()) : nd.grad);
    }
    return out;
  }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor4<T> value;
    Tensor4<T> grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    std::string name;
  };

  static void check_finite(const Tensor4<T>& v, const std::string& name) {
    if (!v.all_finite()) throw NumericError(name + ": non-finite value in output " + v.shape().str());
  }

  std::vector<Node> nodes_;
};

}  // namespace tdsa

#endif  // TDSA_TAPE_HPP_
