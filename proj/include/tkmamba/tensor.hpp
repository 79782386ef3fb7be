#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "tkmamba/error.hpp"

namespace tkm {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until something accumulates into it
    bool requires_grad = false;
    bool consumed = false;  // set on a loss node after backward()

    std::vector<std::shared_ptr<TensorNode>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(TensorNode&)> backward_fn;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
        return grad;
    }
};

}  // namespace detail

/// Whether new operations record a backward graph (thread-local).
bool grad_enabled();

/// Disables graph recording for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Dense row-major N-d tensor with reverse-mode autodiff.
///
/// Tensor is a shared handle: copies alias the same storage and graph node.
/// Use clone() for an independent copy and detach() to cut the graph.
template <typename T>
class Tensor {
public:
    using Node = detail::TensorNode<T>;
    using value_type = T;

    Tensor();
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, T value);
    static Tensor from_data(const Shape& shape, std::vector<T> values);
    static Tensor scalar(T value);

    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    std::vector<T>& storage() { return node_->data; }
    const std::vector<T>& storage() const { return node_->data; }

    T item() const;
    T& at(std::size_t flat) { return node_->data.at(flat); }
    T at(std::size_t flat) const { return node_->data.at(flat); }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> grad_mut() { return node_->ensure_grad(); }
    void zero_grad();

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true);
    bool is_leaf() const { return !node_->backward_fn; }

    /// Reverse-mode sweep from a scalar; accumulates into every leaf's grad.
    void backward();

    Tensor detach() const;
    Tensor clone() const;

    const std::shared_ptr<Node>& node() const { return node_; }
    bool same_node(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Build an op result. The backward closure is attached only when recording
/// is enabled and at least one parent requires a gradient.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> parents,
                      std::function<void(detail::TensorNode<T>&)> backward_fn);

/// Adds `values` into the parent's grad buffer if it participates in autodiff.
template <typename T>
inline void accumulate(const std::shared_ptr<detail::TensorNode<T>>& parent, std::span<const T> values) {
    if (!parent->requires_grad) return;
    auto& g = parent->ensure_grad();
    for (std::size_t i = 0; i < values.size(); ++i) g[i] += values[i];
}

void check_same_shape(const Shape& a, const Shape& b, const char* op);

/// Optional bias argument; non-deduced so callers may pass nullptr.
template <typename T>
using BiasPtr = const std::type_identity_t<Tensor<T>>*;

}  // namespace tkm
