#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "maskdiff/core/tensor.hpp"

namespace maskdiff::nn {

// Reverse-mode autodiff over a dynamically built graph. Each forward op
// allocates a Node holding the result plus a closure that routes the node's
// gradient into its inputs. Parameters are long-lived leaf nodes; everything
// else is released when the step's root Var goes out of scope.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;
    std::string name;  // set for parameters

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor(value.shape());
    }
    void zero_grad() {
        if (grad.numel()) grad.fill(0.0f);
    }
};

using NodeRef = std::shared_ptr<Node>;

struct Var {
    NodeRef n;

    Var() = default;
    explicit Var(NodeRef p) : n(std::move(p)) {}

    static Var leaf(Tensor v, bool requires_grad = false) {
        auto node = std::make_shared<Node>();
        node->value = std::move(v);
        node->requires_grad = requires_grad;
        return Var(std::move(node));
    }

    bool defined() const { return static_cast<bool>(n); }
    const Tensor& value() const { return n->value; }
    Tensor& value() { return n->value; }
    const Tensor& grad() const { return n->grad; }
    const std::vector<int>& shape() const { return n->value.shape(); }
};

// Thread-local switch; sampling runs under NoGradGuard so forward passes skip
// closure capture and activation retention.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

inline bool track_grads(std::initializer_list<const Var*> ins) {
    if (!grad_mode()) return false;
    for (const Var* v : ins)
        if (v->defined() && v->n->requires_grad) return true;
    return false;
}

// Topological order via iterative DFS, then reverse sweep.
inline void backward(const Var& root, const Tensor& seed) {
    if (!root.defined()) throw std::invalid_argument("backward: undefined root");
    if (!root.n->value.same_shape(seed)) throw std::invalid_argument("backward: seed shape mismatch");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({root.n.get(), 0});
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx == 0 && seen.count(node)) {
            stack.pop_back();
            continue;
        }
        if (idx < node->inputs.size()) {
            Node* child = node->inputs[idx++].get();
            if (!seen.count(child)) stack.push_back({child, 0});
        } else {
            seen.insert(node);
            order.push_back(node);
            stack.pop_back();
        }
    }

    root.n->ensure_grad();
    root.n->grad = seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->grad.numel()) node->backward_fn(*node);
    }
}

}  // namespace maskdiff::nn
