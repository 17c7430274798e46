#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "efsign/tensor.hpp"

namespace efsign {

// Handle to a node of a dynamically recorded computation graph. Values are
// never mutated after construction; gradients accumulate in the node's
// tensor gradient buffer during backward().
template <typename T>
class Var {
 public:
  struct Node {
    BasicTensor<T> value;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads self.value.grad() and accumulates into the parents' gradients.
    std::function<void(Node& self)> backward;
  };

  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(BasicTensor<T> value) { return make(std::move(value), false); }
  static Var leaf(BasicTensor<T> value) { return make(std::move(value), true); }

  bool defined() const noexcept { return node_ != nullptr; }
  const BasicTensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }

  bool has_grad() const { return node_->value.has_grad(); }
  const std::vector<T>& grad() const { return node_->value.grad(); }

  const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  static Var make(BasicTensor<T> value, bool requires_grad) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  std::shared_ptr<Node> node_;
};

// Builds a result node. The backward closure and parent links are recorded
// only when some parent requires a gradient, so inference builds no tape.
template <typename T>
Var<T> make_result(BasicTensor<T> value, std::vector<Var<T>> parents,
                   std::function<void(typename Var<T>::Node&)> backward) {
  auto node = std::make_shared<typename Var<T>::Node>();
  node->value = std::move(value);
  for (const auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

// Reverse-mode sweep from a scalar root. The root gradient is seeded with 1.
template <typename T>
void backward(const Var<T>& root);

extern template void backward<float>(const Var<float>&);
extern template void backward<double>(const Var<double>&);

}  // namespace efsign
