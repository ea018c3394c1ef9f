#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "error.hpp"
#include "tensor.hpp"

namespace duetmatch {

/// One value in a reverse-mode computation graph.
template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // allocated on first accumulation
    bool requires_grad = false;
    std::string label;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor<T>& grad_buffer() {
        if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape(), T{0});
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape(), T{0});
        return grad;
    }
};

/// Handle to a graph node. Copies share the node.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    /// A value that never receives gradients.
    static Var constant(Tensor<T> v) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        return Var(std::move(n));
    }

    /// A graph input that accumulates gradients.
    static Var leaf(Tensor<T> v, std::string label = {}) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(v);
        n->requires_grad = true;
        n->label = std::move(label);
        return Var(std::move(n));
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const std::string& label() const { return node_->label; }

    /// Gradient accumulated by the last backward pass (empty if unreached).
    const Tensor<T>& grad() const { return node_->grad; }

    /// Same value, cut from the graph.
    Var detach() const { return constant(node_->value); }

    Node<T>* get() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& ptr() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Build a result node whose backward closure propagates into `parents`.
/// The node only tracks gradients when at least one parent does.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents, std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    for (auto& p : parents) {
        if (p.requires_grad()) n->requires_grad = true;
        n->parents.push_back(p.ptr());
    }
    if (n->requires_grad) {
        n->backward = std::move(backward);
    } else {
        n->parents.clear();
    }
    return Var<T>(std::move(n));
}

/// Reverse-mode sweep from a scalar. Leaf gradients are reset first.
template <class T>
void backward(const Var<T>& loss) {
    if (!loss.defined()) throw DetachedError("backward on an undefined value");
    if (loss.value().size() != 1)
        throw ShapeError("backward needs a scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
        throw DetachedError("gradient requested for a detached quantity" +
                            (loss.label().empty() ? std::string() : " '" + loss.label() + "'"));

    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.get(), 0}};
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (Node<T>* n : order) n->grad = Tensor<T>();
    loss.get()->grad_buffer()[0] = T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
        // Interior gradients are dead once propagated.
        if (n->backward) n->grad = Tensor<T>();
    }
}

}  // namespace duetmatch
