#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "shrinkforge/error.hpp"
#include "shrinkforge/tensor.hpp"

namespace shrinkforge {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Append-only record of one forward pass. Node inputs always precede the
// node itself, so a single reverse sweep is a valid backpropagation order.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated by backward(), only where needed
    std::vector<int> parents;
    // Reads node.grad, accumulates into the parents' grads.
    std::function<void(Tape&, const Node&)> backprop;
    bool needs_grad = true;
  };

  // needs_grad=false marks leaves (e.g. the input batch) whose gradient no
  // caller will read; ops skip the corresponding backward work.
  Var watch(Tensor value, bool needs_grad = true) {
    return push_impl(std::move(value), {}, nullptr, needs_grad);
  }

  Var push(Tensor value, std::vector<int> parents,
           std::function<void(Tape&, const Node&)> backprop) {
    bool needs = false;
    for (int p : parents) needs = needs || nodes_[p].needs_grad;
    return push_impl(std::move(value), std::move(parents), std::move(backprop), needs);
  }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(int id) const { return nodes_.at(id).needs_grad; }

  Tensor& grad(Var v) {
    Node& node = nodes_.at(v.id);
    if (node.grad.numel() != node.value.numel()) node.grad = Tensor(node.value.shape);
    return node.grad;
  }

  // Single reverse sweep; every node is visited exactly once.
  void backward(Var loss) {
    require(loss.valid() && loss.id < static_cast<int>(nodes_.size()),
            ErrorKind::Shape, "backward: unknown loss node");
    require(nodes_[loss.id].value.numel() == 1, ErrorKind::Shape,
            "backward: loss must be scalar");
    for (auto& node : nodes_)
      if (node.needs_grad) node.grad = Tensor(node.value.shape);
    nodes_[loss.id].grad.data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
      const Node& node = nodes_[i];
      if (node.backprop && node.needs_grad) node.backprop(*this, node);
    }
  }

  void add_macs(std::uint64_t n) { macs_ += n; }
  std::uint64_t macs() const { return macs_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  Var push_impl(Tensor value, std::vector<int> parents,
                std::function<void(Tape&, const Node&)> backprop, bool needs) {
    for (int p : parents)
      require(p >= 0 && p < static_cast<int>(nodes_.size()), ErrorKind::Shape,
              "tape node references an input that does not precede it");
    Node node;
    node.value = std::move(value);
    node.parents = std::move(parents);
    node.backprop = std::move(backprop);
    node.needs_grad = needs;
    nodes_.push_back(std::move(node));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  std::vector<Node> nodes_;
  std::uint64_t macs_ = 0;
};

}  // namespace shrinkforge
