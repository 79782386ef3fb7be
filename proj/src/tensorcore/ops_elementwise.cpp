#include <cmath>
#include <numbers>

#include "tkmamba/ops.hpp"

namespace tkm {

namespace {

// y = f(x); dy/dx expressed through (x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
    const auto& xs = x.storage();
    std::vector<T> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
    return make_result<T>(x.shape(), std::move(out), {x}, [df](detail::TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(p->data[i], self.data[i]);
    });
}

template <typename T>
T stable_sigmoid(T v) {
    if (v >= 0) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
T stable_softplus(T v) {
    return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

}  // namespace

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return unary(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    return unary(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return unary(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return unary(x, [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary(x, [](T v) { return v > 0 || v != v ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    return unary(
        x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
        [](T v, T) {
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            return cdf + v * pdf;
        });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    return unary(
        x, [](T v) { return v * stable_sigmoid(v); },
        [](T v, T) {
            const T s = stable_sigmoid(v);
            return s * (T(1) + v * (T(1) - s));
        });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    return unary(x, [](T v) { return stable_softplus(v); }, [](T v, T) { return stable_sigmoid(v); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
    return unary(x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, T value) {
    return unary(x, [value](T v) { return v * value; }, [value](T, T) { return value; });
}

template <typename T>
Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& alpha, std::size_t channel_axis) {
    const auto& shape = x.shape();
    if (channel_axis >= shape.size()) throw ShapeError("prelu: channel axis out of range for " + shape_str(shape));
    const std::size_t channels = shape[channel_axis];
    if (alpha.numel() != channels) {
        throw ShapeError("prelu: alpha has " + std::to_string(alpha.numel()) + " entries, expected " +
                         std::to_string(channels));
    }
    std::size_t inner = 1;
    for (std::size_t i = channel_axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const auto& xs = x.storage();
    const auto& as = alpha.storage();
    std::vector<T> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::size_t c = (i / inner) % channels;
        out[i] = xs[i] > 0 ? xs[i] : as[c] * xs[i];
    }
    return make_result<T>(shape, std::move(out), {x, alpha}, [inner, channels](detail::TensorNode<T>& self) {
        auto& px = self.parents[0];
        auto& pa = self.parents[1];
        std::vector<T> ga(channels, T(0));
        std::vector<T>* gx = px->requires_grad ? &px->ensure_grad() : nullptr;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const std::size_t c = (i / inner) % channels;
            const T v = px->data[i];
            if (v > 0) {
                if (gx) (*gx)[i] += self.grad[i];
            } else {
                if (gx) (*gx)[i] += self.grad[i] * pa->data[c];
                ga[c] += self.grad[i] * v;
            }
        }
        accumulate<T>(pa, ga);
    });
}

// ---- broadcasting binaries ----------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t n = std::max(a.size(), b.size());
    Shape out(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ea = i < n - a.size() ? 1 : a[i - (n - a.size())];
        const std::size_t eb = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[i] = ea == 1 ? eb : ea;
    }
    return out;
}

namespace {

// Flat index of the broadcast operand for every output element.
std::vector<std::size_t> broadcast_index(const Shape& operand, const Shape& out) {
    const std::size_t n = out.size();
    const std::size_t offset = n - operand.size();
    std::vector<std::size_t> stride(n, 0);
    std::size_t s = 1;
    for (std::size_t i = n; i-- > offset;) {
        const std::size_t e = operand[i - offset];
        stride[i] = e == 1 ? 0 : s;
        s *= e;
    }
    const std::size_t total = numel_of(out);
    std::vector<std::size_t> index(total);
    std::vector<std::size_t> counter(n, 0);
    std::size_t cur = 0;
    for (std::size_t k = 0; k < total; ++k) {
        index[k] = cur;
        for (std::size_t d = n; d-- > 0;) {
            if (++counter[d] < out[d]) {
                cur += stride[d];
                break;
            }
            cur -= stride[d] * (out[d] - 1);
            counter[d] = 0;
        }
    }
    return index;
}

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp op) {
    auto apply = [op](T u, T v) {
        switch (op) {
            case BinOp::Add: return u + v;
            case BinOp::Sub: return u - v;
            case BinOp::Mul: return u * v;
            case BinOp::Div: return u / v;
        }
        return T(0);
    };
    const auto& as = a.storage();
    const auto& bs = b.storage();

    if (a.shape() == b.shape()) {
        std::vector<T> out(as.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(as[i], bs[i]);
        return make_result<T>(a.shape(), std::move(out), {a, b}, [op](detail::TensorNode<T>& self) {
            auto& pa = self.parents[0];
            auto& pb = self.parents[1];
            const std::size_t n = self.grad.size();
            if (pa->requires_grad) {
                auto& g = pa->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const T d = op == BinOp::Mul ? pb->data[i] : op == BinOp::Div ? T(1) / pb->data[i] : T(1);
                    g[i] += self.grad[i] * d;
                }
            }
            if (pb->requires_grad) {
                auto& g = pb->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    T d = T(1);
                    if (op == BinOp::Sub) d = T(-1);
                    if (op == BinOp::Mul) d = pa->data[i];
                    if (op == BinOp::Div) d = -self.data[i] / pb->data[i];
                    g[i] += self.grad[i] * d;
                }
            }
        });
    }

    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(a.shape(), out_shape));
    auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(b.shape(), out_shape));
    std::vector<T> out(numel_of(out_shape));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(as[(*ia)[i]], bs[(*ib)[i]]);
    return make_result<T>(out_shape, std::move(out), {a, b}, [op, ia, ib](detail::TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const std::size_t n = self.grad.size();
        if (pa->requires_grad) {
            auto& g = pa->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const T bv = pb->data[(*ib)[i]];
                const T d = op == BinOp::Mul ? bv : op == BinOp::Div ? T(1) / bv : T(1);
                g[(*ia)[i]] += self.grad[i] * d;
            }
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                T d = T(1);
                if (op == BinOp::Sub) d = T(-1);
                if (op == BinOp::Mul) d = pa->data[(*ia)[i]];
                if (op == BinOp::Div) d = -self.data[i] / pb->data[(*ib)[i]];
                g[(*ib)[i]] += self.grad[i] * d;
            }
        }
    });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinOp::Add);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinOp::Sub);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinOp::Mul);
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinOp::Div);
}

#define TKM_INSTANTIATE(T)                                                        \
    template Tensor<T> neg(const Tensor<T>&);                                     \
    template Tensor<T> exp(const Tensor<T>&);                                     \
    template Tensor<T> log(const Tensor<T>&);                                     \
    template Tensor<T> square(const Tensor<T>&);                                  \
    template Tensor<T> sigmoid(const Tensor<T>&);                                 \
    template Tensor<T> relu(const Tensor<T>&);                                    \
    template Tensor<T> gelu(const Tensor<T>&);                                    \
    template Tensor<T> silu(const Tensor<T>&);                                    \
    template Tensor<T> softplus(const Tensor<T>&);                                \
    template Tensor<T> prelu(const Tensor<T>&, const Tensor<T>&, std::size_t);    \
    template Tensor<T> add_scalar(const Tensor<T>&, T);                           \
    template Tensor<T> mul_scalar(const Tensor<T>&, T);                           \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                   \
    template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
