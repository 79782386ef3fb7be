#include "tkmamba/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace tkm {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t numel_of(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

void check_same_shape(const Shape& a, const Shape& b, const char* op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

template <typename T>
Tensor<T>::Tensor() : node_(std::make_shared<Node>()) {}

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
    return full(shape, T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->data.assign(numel_of(shape), value);
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from_data(const Shape& shape, std::vector<T> values) {
    if (values.size() != numel_of(shape)) {
        throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
    }
    auto node = std::make_shared<Node>();
    node->shape = shape;
    node->data = std::move(values);
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
    return full(Shape{}, value);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
    if (axis >= node_->shape.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(node_->shape));
    }
    return node_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
    if (node_->data.size() != 1) {
        throw ShapeError("item() on tensor of shape " + shape_str(node_->shape));
    }
    return node_->data[0];
}

template <typename T>
void Tensor<T>::zero_grad() {
    node_->grad.clear();
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
    if (!is_leaf()) throw ValidationError("set_requires_grad on a non-leaf tensor");
    node_->requires_grad = on;
    return *this;
}

template <typename T>
void Tensor<T>::backward() {
    if (node_->data.size() != 1) {
        throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(node_->shape));
    }
    if (node_->consumed) {
        throw ValidationError("backward() called twice on the same graph; rebuild the forward pass first");
    }
    if (!node_->requires_grad) {
        throw ValidationError("backward() on a tensor that does not require grad");
    }

    // Iterative post-order DFS gives a topological order of the graph.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
    // Interior grads and closures are released; leaves keep their grads.
    for (Node* n : order) {
        if (n->backward_fn) {
            n->backward_fn = nullptr;
            n->parents.clear();
            if (n != node_.get()) n->grad.clear();
        }
    }
    node_->consumed = true;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    auto node = std::make_shared<Node>();
    node->shape = node_->shape;
    node->data = node_->data;
    return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    Tensor out = detach();
    out.node_->requires_grad = node_->requires_grad && is_leaf();
    return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<Tensor<T>> parents,
                      std::function<void(detail::TensorNode<T>&)> backward_fn) {
    auto node = std::make_shared<detail::TensorNode<T>>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (node->data.size() != numel_of(node->shape)) {
        throw ShapeError("make_result: data size does not match shape " + shape_str(node->shape));
    }
    if (grad_enabled() && backward_fn) {
        const bool any = std::any_of(parents.begin(), parents.end(),
                                     [](const Tensor<T>& p) { return p.requires_grad(); });
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(parents.size());
            for (auto& p : parents) node->parents.push_back(p.node());
            node->backward_fn = std::move(backward_fn);
        }
    }
    return Tensor<T>(std::move(node));
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> make_result(Shape, std::vector<float>, std::vector<Tensor<float>>,
                                   std::function<void(detail::TensorNode<float>&)>);
template Tensor<double> make_result(Shape, std::vector<double>, std::vector<Tensor<double>>,
                                    std::function<void(detail::TensorNode<double>&)>);

}  // namespace tkm
