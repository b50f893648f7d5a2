#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Graphs are define-by-run: each operation allocates a result node that keeps
// its inputs alive and a closure that pushes the result's gradient back into
// them. Nodes carry a creation sequence number, so sorting the reachable set
// by sequence gives a topological order.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bam/error.hpp"

namespace bam {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

inline std::atomic<std::uint64_t> g_node_sequence{0};

struct Node
{
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool leaf = true;
    std::uint64_t sequence = g_node_sequence.fetch_add(1, std::memory_order_relaxed);
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Node&)> backward;

    void ensure_grad()
    {
        if (grad.size() != value.size()) {
            grad.assign(value.size(), 0.0);
        }
    }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tensor
{
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>())
    {
        for (auto d : shape) {
            if (d == 0) {
                throw DimensionError("tensor dimensions must be positive, got " +
                                     shape_str(shape));
            }
        }
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor of shape " + shape_str(shape) + " given " +
                                 std::to_string(values.size()) + " values");
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false)
    {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false)
    {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false)
    {
        return Tensor({}, {value}, requires_grad);
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         bool requires_grad = false)
    {
        return Tensor({rows, cols}, std::move(values), requires_grad);
    }

    static Tensor vector(std::vector<double> values, bool requires_grad = false)
    {
        const auto n = values.size();
        return Tensor({n}, std::move(values), requires_grad);
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }

    const Shape& shape() const { return node().shape; }
    std::size_t rank() const { return node().shape.size(); }
    std::size_t numel() const { return node().value.size(); }
    std::size_t dim(std::size_t axis) const
    {
        if (axis >= rank()) {
            throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                                 shape_str(shape()));
        }
        return node().shape[axis];
    }
    std::size_t rows() const { return dim(0); }
    std::size_t cols() const { return dim(1); }

    std::span<const double> values() const { return node().value; }
    /// In-place access, intended for parameter leaves (initialization, optimizer updates).
    std::span<double> mutable_values() { return node().value; }

    double item() const
    {
        if (numel() != 1) {
            throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        }
        return node().value[0];
    }
    double operator[](std::size_t i) const { return node().value.at(i); }
    double at(std::size_t i, std::size_t j) const
    {
        return node().value.at(i * node().shape.at(1) + j);
    }

    bool requires_grad() const { return node().requires_grad; }
    bool is_leaf() const { return node().leaf; }
    bool has_grad() const { return node().grad.size() == node().value.size(); }
    std::span<const double> grad() const
    {
        if (!has_grad()) {
            static const std::vector<double> empty;
            return empty;
        }
        return node().grad;
    }
    void zero_grad()
    {
        auto& n = node();
        std::fill(n.grad.begin(), n.grad.end(), 0.0);
    }

    /// Copy of the values with no history.
    Tensor detach() const { return Tensor(shape(), node().value, false); }

    /// Copy of the values as a new leaf that participates in differentiation.
    Tensor clone_as_parameter() const { return Tensor(shape(), node().value, true); }

    const detail::NodePtr& node_ptr() const { return node_; }
    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    detail::Node& node() const
    {
        if (!node_) {
            throw Error("use of an undefined tensor");
        }
        return *node_;
    }

    detail::NodePtr node_;
};

namespace detail {

/// Allocates the result node of an operation. History is kept only if some
/// input participates in differentiation.
inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<NodePtr> parents,
                          std::function<void(const Node&)> backward)
{
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    node->leaf = false;
    const bool track = std::any_of(parents.begin(), parents.end(),
                                   [](const NodePtr& p) { return p && p->requires_grad; });
    if (track) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

}  // namespace detail

/// Ordered record of the operations that produced a value, oldest first.
class Tape
{
public:
    static Tape record_from(const Tensor& root)
    {
        Tape tape;
        tape.root_ = root.node_ptr();
        std::unordered_set<const detail::Node*> seen;
        std::vector<detail::Node*> stack{root.node_ptr().get()};
        while (!stack.empty()) {
            auto* n = stack.back();
            stack.pop_back();
            if (!n->requires_grad || !seen.insert(n).second) {
                continue;
            }
            tape.nodes_.push_back(n);
            for (const auto& p : n->parents) {
                stack.push_back(p.get());
            }
        }
        std::sort(tape.nodes_.begin(), tape.nodes_.end(),
                  [](const detail::Node* a, const detail::Node* b) {
                      return a->sequence < b->sequence;
                  });
        return tape;
    }

    std::span<detail::Node* const> nodes() const { return nodes_; }
    std::size_t size() const { return nodes_.size(); }

    /// Runs every backward rule once, newest node first.
    void run_backward() const
    {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto* n = *it;
            if (n->backward) {
                for (const auto& p : n->parents) {
                    if (p->requires_grad) {
                        p->ensure_grad();
                    }
                }
                n->backward(*n);
            }
        }
    }

private:
    detail::NodePtr root_;  // keeps the recorded graph alive
    std::vector<detail::Node*> nodes_;
};

/// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
/// Leaf gradients accumulate across calls until zero_grad().
inline void backward(const Tensor& loss)
{
    if (loss.numel() != 1) {
        throw DimensionError("backward() needs a scalar loss, got shape " +
                             shape_str(loss.shape()));
    }
    if (!loss.requires_grad()) {
        return;
    }
    const Tape tape = Tape::record_from(loss);
    for (auto* n : tape.nodes()) {
        if (!n->leaf) {
            n->grad.assign(n->value.size(), 0.0);
        }
    }
    auto& root = *loss.node_ptr();
    root.ensure_grad();
    root.grad[0] += 1.0;
    tape.run_backward();
}

}  // namespace bam
