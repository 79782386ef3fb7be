#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "tkmamba/random.hpp"
#include "tkmamba/tensor.hpp"

namespace tkm {

/// Named parameter handles. Tensors alias their owners, so updating the
/// storage of an entry updates the module in place.
template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

/// Per-call forward state shared by every block.
struct ForwardContext {
    bool training = false;
    Rng* rng = nullptr;  // required only when training with dropout
};

template <typename T>
Tensor<T> uniform_param(const Shape& shape, double bound, Rng& rng) {
    std::vector<T> v(numel_of(shape));
    for (auto& x : v) x = static_cast<T>((2.0 * rng.uniform() - 1.0) * bound);
    return Tensor<T>::from_data(shape, std::move(v)).set_requires_grad();
}

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename T>
Tensor<T> fan_in_param(const Shape& shape, std::size_t fan_in, Rng& rng) {
    return uniform_param<T>(shape, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

template <typename T>
Tensor<T> const_param(const Shape& shape, T value) {
    return Tensor<T>::full(shape, value).set_requires_grad();
}

template <typename T>
void add_param(ParamList<T>& out, const std::string& prefix, const std::string& name, const Tensor<T>& t) {
    out.emplace_back(prefix.empty() ? name : prefix + "." + name, t);
}

}  // namespace tkm
