#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "misra/core/errors.hpp"

namespace misra {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

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
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Propagates this node's grad into its parents.
    std::function<void(TensorNode&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }

    std::vector<T>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        return grad;
    }
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a deep copy.
template <class T>
class BasicTensor {
public:
    using value_type = T;
    using Node = TensorNode<T>;

    BasicTensor() = default;

    explicit BasicTensor(Shape shape, T fill = T(0)) : node_(std::make_shared<Node>()) {
        for (auto e : shape)
            if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        node_->data.assign(misra::numel(shape), fill);
        node_->shape = std::move(shape);
    }

    BasicTensor(Shape shape, std::vector<T> values) : node_(std::make_shared<Node>()) {
        if (misra::numel(shape) != values.size())
            throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                                 shape_str(shape));
        node_->shape = std::move(shape);
        node_->data = std::move(values);
    }

    static BasicTensor scalar(T v) { return BasicTensor(Shape{1}, std::vector<T>{v}); }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() & { return node_->data; }
    std::span<const T> data() const& { return node_->data; }
    std::span<const T> data() && = delete;  // would dangle when the temporary handle is the last owner
    std::vector<T>& values() { return node_->data; }
    const std::vector<T>& values() const { return node_->data; }

    T item() const {
        if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    T& operator[](std::size_t i) { return node_->data[i]; }
    const T& operator[](std::size_t i) const { return node_->data[i]; }

    T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
        const auto& s = node_->shape;
        return node_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
    }
    const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
        const auto& s = node_->shape;
        return node_->data[((n * s[1] + c) * s[2] + h) * s[3] + w];
    }

    bool requires_grad() const { return node_->requires_grad; }
    BasicTensor& set_requires_grad(bool on = true) {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::span<const T> grad() const { return node_->grad; }
    std::vector<T>& grad_buffer() { return node_->ensure_grad(); }
    void zero_grad() {
        if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    /// Deep copy of values as a fresh leaf.
    BasicTensor clone() const {
        BasicTensor out(node_->shape, node_->data);
        out.node_->requires_grad = node_->requires_grad && node_->is_leaf();
        return out;
    }

    /// Same values, cut from the graph.
    BasicTensor detach() const { return BasicTensor(node_->shape, node_->data); }

    template <class U>
    BasicTensor<U> cast() const {
        std::vector<U> out(node_->data.begin(), node_->data.end());
        return BasicTensor<U>(node_->shape, std::move(out));
    }

    BasicTensor reshape(Shape new_shape) const;

    const std::shared_ptr<Node>& node() const { return node_; }
    static BasicTensor from_node(std::shared_ptr<Node> node) {
        BasicTensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Builds an op result. When any input is tracked and grad mode is on, `backward`
/// is attached and receives the output node (grad already populated).
template <class T, class Backward>
BasicTensor<T> make_result(Shape shape, std::vector<T> values,
                           std::initializer_list<const BasicTensor<T>*> inputs, Backward&& backward) {
    BasicTensor<T> out(std::move(shape), std::move(values));
    if (!grad_enabled()) return out;
    bool track = false;
    for (const auto* in : inputs) track = track || in->requires_grad();
    if (!track) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto* in : inputs) node.parents.push_back(in->node());
    node.backward_fn = std::forward<Backward>(backward);
    return out;
}

template <class T>
BasicTensor<T> BasicTensor<T>::reshape(Shape new_shape) const {
    if (misra::numel(new_shape) != numel())
        throw DimensionError("cannot reshape " + shape_str(shape()) + " to " + shape_str(new_shape));
    return make_result<T>(std::move(new_shape), node_->data, {this}, [](Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// Reverse topological record of the operations that produced a tensor.
template <class T>
class ComputeGraph {
public:
    using Node = TensorNode<T>;

    explicit ComputeGraph(const BasicTensor<T>& root) {
        // Iterative post-order DFS; parents land before children.
        std::unordered_set<const Node*> seen;
        std::vector<std::pair<Node*, std::size_t>> stack;
        if (!root.node()->requires_grad) return;
        stack.emplace_back(root.node().get(), 0);
        seen.insert(root.node().get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node* parent = node->parents[next++].get();
                if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
            } else {
                order_.push_back(node);
                stack.pop_back();
            }
        }
    }

    /// Topological order: every node appears after all of its inputs.
    const std::vector<Node*>& order() const { return order_; }

    std::size_t leaf_count() const {
        return static_cast<std::size_t>(std::count_if(order_.begin(), order_.end(),
                                                      [](const Node* n) { return n->is_leaf(); }));
    }

    void run_backward() {
        for (Node* n : order_)
            if (!n->is_leaf()) {
                n->ensure_grad();
                std::fill(n->grad.begin(), n->grad.end(), T(0));
            }
        Node* root = order_.back();
        auto& g = root->ensure_grad();
        g[0] += T(1);
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            Node* n = *it;
            if (n->is_leaf()) continue;
            for (auto& p : n->parents)
                if (p->requires_grad) p->ensure_grad();
            n->backward_fn(*n);
        }
    }

private:
    std::vector<Node*> order_;
};

/// Accumulates d(loss)/d(leaf) into every tracked leaf reachable from `loss`.
template <class T>
void backward(const BasicTensor<T>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad()) throw ContractError("backward on a tensor that is not part of a tracked graph");
    ComputeGraph<T> graph(loss);
    graph.run_backward();
}

}  // namespace misra
