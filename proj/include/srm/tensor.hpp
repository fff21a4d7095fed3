#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace srm {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

inline std::uint64_t next_sequence() {
    static thread_local std::uint64_t counter = 0;
    return ++counter;
}

inline bool& grad_mode() {
    static thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::uint64_t seq = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(const Node&)> backward;

    void accumulate(std::span<const T> g) {
        if (!requires_grad) return;
        if (grad.empty()) grad.assign(data.size(), T(0));
        for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
};

/// Dense row-major tensor handle. Copies share the underlying node; values
/// produced by ops are never written again.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<Node<T>>()) {
        for (auto e : shape) {
            if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + to_string(shape));
        }
        if (srm::numel(shape) != data.size()) {
            throw ShapeError("shape " + to_string(shape) + " does not match data length " +
                             std::to_string(data.size()));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
        node_->seq = detail::next_sequence();
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = srm::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        auto n = srm::numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    const T* ptr() const { return node_->data.data(); }
    T operator[](std::size_t i) const { return node_->data[i]; }
    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->data[0];
    }

    /// In-place access for leaves (parameters, buffers, loaders). Ops never
    /// call this on their outputs.
    std::span<T> mutable_data() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag) { node_->requires_grad = flag; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() {
        if (node_->grad.empty()) node_->grad.assign(node_->data.size(), T(0));
        return node_->grad;
    }
    void zero_grad() { node_->grad.clear(); }

    const char* op() const { return node_->op; }
    std::uint64_t sequence() const { return node_->seq; }

    /// Same values, cut from the graph.
    Tensor detach() const { return Tensor(shape(), node_->data, false); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(node_->data.begin(), node_->data.end());
        return Tensor<U>(shape(), std::move(out), false);
    }

    const std::shared_ptr<Node<T>>& node() const { return node_; }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Builds an op result. The backward closure is attached only when grad mode is
/// on and at least one input requires a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(const Node<T>&)> backward) {
    Tensor<T> out(std::move(shape), std::move(data), false);
    auto& node = *out.node();
    node.op = op;
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& in : inputs) {
        if (in.defined() && in.requires_grad()) any = true;
    }
    if (!any) return out;
    node.requires_grad = true;
    for (const auto& in : inputs) {
        if (in.defined() && in.requires_grad()) node.parents.push_back(in.node());
    }
    node.backward = std::move(backward);
    return out;
}

/// Operations reachable from a root, in exact reverse execution order.
template <typename T>
class Tape {
public:
    explicit Tape(const Tensor<T>& root) {
        std::vector<Node<T>*> stack{root.node().get()};
        std::unordered_set<const Node<T>*> seen;
        while (!stack.empty()) {
            auto* n = stack.back();
            stack.pop_back();
            if (!n->requires_grad || !seen.insert(n).second) continue;
            entries_.push_back(n);
            for (auto& p : n->parents) stack.push_back(p.get());
        }
        std::sort(entries_.begin(), entries_.end(),
                  [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });
    }

    const std::vector<Node<T>*>& entries() const { return entries_; }

    void run() const {
        for (auto* n : entries_) {
            if (n->backward && !n->grad.empty()) n->backward(*n);
        }
    }

private:
    std::vector<Node<T>*> entries_;
};

/// Reverse-mode sweep from a scalar root; gradients accumulate into leaves.
template <typename T>
void backward(const Tensor<T>& root) {
    if (root.numel() != 1) {
        throw ShapeError("backward() needs a scalar root, got " + to_string(root.shape()));
    }
    if (!root.requires_grad()) return;
    Tape<T> tape(root);
    root.node()->accumulate(std::vector<T>{T(1)});
    tape.run();
    // Interior grads are consumed; only leaves keep theirs.
    for (auto* n : tape.entries()) {
        if (n->backward) n->grad.clear();
    }
}

}  // namespace srm
