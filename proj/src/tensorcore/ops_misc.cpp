#include <cmath>

#include "tkmamba/ops.hpp"

namespace tkm {

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ValidationError("dropout: p must be in [0, 1)");
    if (!training || p == 0.0) return x;
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    auto mask = std::make_shared<std::vector<T>>(x.numel());
    for (auto& m : *mask) m = rng.uniform() < p ? T(0) : scale;
    const auto& xs = x.storage();
    std::vector<T> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = xs[i] * (*mask)[i];
    return make_result<T>(x.shape(), std::move(out), {x}, [mask](detail::TensorNode<T>& self) {
        auto& px = self.parents[0];
        if (!px->requires_grad) return;
        auto& g = px->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
    });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, double eps) {
    if (x.ndim() == 0) throw ShapeError("l2_normalize: scalar input");
    const std::size_t d = x.shape().back();
    const std::size_t rows = d ? x.numel() / d : 0;
    const auto& xs = x.storage();
    std::vector<T> out(xs.size());
    auto norms = std::make_shared<std::vector<T>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T ss = 0;
        for (std::size_t j = 0; j < d; ++j) ss += xs[r * d + j] * xs[r * d + j];
        const T n = std::sqrt(ss);
        if (!(n > T(0))) throw ValidationError("l2_normalize: row " + std::to_string(r) + " has zero norm");
        (*norms)[r] = std::max(n, static_cast<T>(eps));
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xs[r * d + j] / (*norms)[r];
    }
    return make_result<T>(x.shape(), std::move(out), {x}, [d, rows, norms, eps](detail::TensorNode<T>& self) {
        auto& px = self.parents[0];
        if (!px->requires_grad) return;
        auto& g = px->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const T n = (*norms)[r];
            if (n <= static_cast<T>(eps)) {
                for (std::size_t j = 0; j < d; ++j) g[r * d + j] += self.grad[r * d + j] / n;
                continue;
            }
            // d(x/|x|) = (I - y y^T) / |x|
            T dot = 0;
            for (std::size_t j = 0; j < d; ++j) dot += self.grad[r * d + j] * self.data[r * d + j];
            for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (self.grad[r * d + j] - dot * self.data[r * d + j]) / n;
        }
    });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target) {
    check_same_shape(logits.shape(), target.shape(), "bce_with_logits");
    const auto& s = logits.storage();
    const auto& y = target.storage();
    if (s.empty()) throw ShapeError("bce_with_logits: empty input");
    T acc = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (y[i] != T(0) && y[i] != T(1)) {
            throw ValidationError("bce_with_logits: target entry " + std::to_string(i) + " is not binary");
        }
        acc += std::max(s[i], T(0)) - s[i] * y[i] + std::log1p(std::exp(-std::abs(s[i])));
    }
    const T n = static_cast<T>(s.size());
    return make_result<T>(Shape{}, {acc / n}, {logits, target}, [n](detail::TensorNode<T>& self) {
        auto& ps = self.parents[0];
        if (!ps->requires_grad) return;
        auto& g = ps->ensure_grad();
        const T scale = self.grad[0] / n;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = ps->data[i];
            const T sig = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
            g[i] += scale * (sig - self.parents[1]->data[i]);
        }
    });
}

#define TKM_INSTANTIATE(T)                                                 \
    template Tensor<T> dropout(const Tensor<T>&, double, bool, Rng&);      \
    template Tensor<T> l2_normalize(const Tensor<T>&, double);             \
    template Tensor<T> bce_with_logits(const Tensor<T>&, const Tensor<T>&);

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
