#include <algorithm>
#include <numeric>

#include "tkmamba/ops.hpp"

namespace tkm {

namespace {

Shape row_major_strides(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
    return strides;
}

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisView {
    std::size_t outer = 1, extent = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    v.extent = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

void check_axis(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size()) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
    }
}

// Gradient of a pure index map out[i] = x[src[i]].
template <typename T>
std::function<void(detail::TensorNode<T>&)> scatter_back(std::shared_ptr<std::vector<std::size_t>> src) {
    return [src](detail::TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*src)[i]] += self.grad[i];
    };
}

template <typename T>
Tensor<T> index_map(const Tensor<T>& x, Shape out_shape, std::vector<std::size_t> src) {
    const auto& xs = x.storage();
    std::vector<T> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = xs[src[i]];
    auto shared = std::make_shared<std::vector<std::size_t>>(std::move(src));
    return make_result<T>(std::move(out_shape), std::move(out), {x}, scatter_back<T>(shared));
}

}  // namespace

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
    std::vector<std::size_t> inv(perm.size(), perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] >= perm.size() || inv[perm[i]] != perm.size()) {
            throw ValidationError("inverse_permutation: input is not a permutation");
        }
        inv[perm[i]] = i;
    }
    return inv;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
    if (numel_of(shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return make_result<T>(shape, x.storage(), {x}, [](detail::TensorNode<T>& self) {
        accumulate<T>(self.parents[0], self.grad);
    });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const auto& shape = x.shape();
    if (perm.size() != shape.size()) throw ShapeError("permute: rank mismatch for " + shape_str(shape));
    inverse_permutation(perm);
    Shape out_shape(shape.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = shape[perm[i]];
    const Shape in_strides = row_major_strides(shape);
    const std::size_t n = x.numel();
    const std::size_t rank = shape.size();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> counter(rank, 0);
    std::size_t cur = 0;
    for (std::size_t k = 0; k < n; ++k) {
        src[k] = cur;
        for (std::size_t d = rank; d-- > 0;) {
            const std::size_t stride = in_strides[perm[d]];
            if (++counter[d] < out_shape[d]) {
                cur += stride;
                break;
            }
            cur -= stride * (out_shape[d] - 1);
            counter[d] = 0;
        }
    }
    return index_map(x, std::move(out_shape), std::move(src));
}

template <typename T>
Tensor<T> flip(const Tensor<T>& x, std::size_t axis) {
    check_axis(x.shape(), axis, "flip");
    const auto v = axis_view(x.shape(), axis);
    std::vector<std::size_t> src(x.numel());
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t e = 0; e < v.extent; ++e)
            for (std::size_t i = 0; i < v.inner; ++i)
                src[(o * v.extent + e) * v.inner + i] = (o * v.extent + (v.extent - 1 - e)) * v.inner + i;
    return index_map(x, x.shape(), std::move(src));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
    check_axis(x.shape(), axis, "slice");
    const auto v = axis_view(x.shape(), axis);
    if (start + length > v.extent) {
        throw ShapeError("slice: [" + std::to_string(start) + "," + std::to_string(start + length) +
                         ") exceeds extent " + std::to_string(v.extent));
    }
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::vector<std::size_t> src(numel_of(out_shape));
    std::size_t k = 0;
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t e = 0; e < length; ++e)
            for (std::size_t i = 0; i < v.inner; ++i) src[k++] = (o * v.extent + start + e) * v.inner + i;
    return index_map(x, std::move(out_shape), std::move(src));
}

template <typename T>
Tensor<T> gather_axis(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& index) {
    check_axis(x.shape(), axis, "gather_axis");
    const auto v = axis_view(x.shape(), axis);
    if (index.size() != v.extent) throw ShapeError("gather_axis: index length does not match axis extent");
    inverse_permutation(index);
    std::vector<std::size_t> src(x.numel());
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t e = 0; e < v.extent; ++e)
            for (std::size_t i = 0; i < v.inner; ++i)
                src[(o * v.extent + e) * v.inner + i] = (o * v.extent + index[e]) * v.inner + i;
    return index_map(x, x.shape(), std::move(src));
}

template <typename T>
Tensor<T> repeat_new_axis(const Tensor<T>& x, std::size_t axis, std::size_t times) {
    if (axis > x.ndim()) throw ShapeError("repeat_new_axis: axis out of range");
    Shape out_shape = x.shape();
    out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), times);
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (std::size_t i = axis; i < x.ndim(); ++i) inner *= x.shape()[i];
    std::vector<std::size_t> src(numel_of(out_shape));
    std::size_t k = 0;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t t = 0; t < times; ++t)
            for (std::size_t i = 0; i < inner; ++i) src[k++] = o * inner + i;
    return index_map(x, std::move(out_shape), std::move(src));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    check_axis(xs[0].shape(), axis, "concat");
    Shape out_shape = xs[0].shape();
    out_shape[axis] = 0;
    for (const auto& t : xs) {
        Shape s = t.shape();
        if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i != axis && s[i] != out_shape[i]) {
                throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(xs[0].shape()) +
                                 " along axis " + std::to_string(axis));
            }
        }
        out_shape[axis] += s[axis];
    }
    const auto v = axis_view(out_shape, axis);
    std::vector<T> out(numel_of(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t at = 0;
    for (const auto& t : xs) {
        offsets.push_back(at);
        const std::size_t ext = t.shape()[axis];
        const auto& src = t.storage();
        for (std::size_t o = 0; o < v.outer; ++o)
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * ext * v.inner), ext * v.inner,
                        out.begin() + static_cast<std::ptrdiff_t>((o * v.extent + at) * v.inner));
        at += ext;
    }
    return make_result<T>(out_shape, std::move(out), xs, [v, offsets](detail::TensorNode<T>& self) {
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            const std::size_t ext = p->shape.size() ? p->data.size() / (v.outer * v.inner) : 0;
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t j = 0; j < ext * v.inner; ++j)
                    g[o * ext * v.inner + j] += self.grad[(o * v.extent + offsets[k]) * v.inner + j];
        }
    });
}

// ---- reductions ----------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.storage()) acc += v;
    return make_result<T>(Shape{}, {acc}, {x}, [](detail::TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw ShapeError("mean of empty tensor");
    return mul_scalar(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
    check_axis(x.shape(), axis, "sum_axis");
    const auto v = axis_view(x.shape(), axis);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<T> out(v.outer * v.inner, T(0));
    const auto& xs = x.storage();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t e = 0; e < v.extent; ++e)
            for (std::size_t i = 0; i < v.inner; ++i) out[o * v.inner + i] += xs[(o * v.extent + e) * v.inner + i];
    return make_result<T>(out_shape, std::move(out), {x}, [v](detail::TensorNode<T>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t e = 0; e < v.extent; ++e)
                for (std::size_t i = 0; i < v.inner; ++i) g[(o * v.extent + e) * v.inner + i] += self.grad[o * v.inner + i];
    });
}

template <typename T>
Tensor<T> adaptive_avg_pool3d_to_1(const Tensor<T>& x) {
    if (x.ndim() != 5) throw ShapeError("adaptive_avg_pool3d_to_1: expected [B,C,D,H,W], got " + shape_str(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t spatial = x.numel() / std::max<std::size_t>(planes, 1);
    std::vector<T> out(planes, T(0));
    const auto& xs = x.storage();
    for (std::size_t p = 0; p < planes; ++p) {
        T acc = 0;
        for (std::size_t s = 0; s < spatial; ++s) acc += xs[p * spatial + s];
        out[p] = acc / static_cast<T>(spatial);
    }
    return make_result<T>(Shape{x.dim(0), x.dim(1), 1, 1, 1}, std::move(out), {x},
                          [planes, spatial](detail::TensorNode<T>& self) {
                              auto& p = self.parents[0];
                              if (!p->requires_grad) return;
                              auto& g = p->ensure_grad();
                              for (std::size_t q = 0; q < planes; ++q) {
                                  const T share = self.grad[q] / static_cast<T>(spatial);
                                  for (std::size_t s = 0; s < spatial; ++s) g[q * spatial + s] += share;
                              }
                          });
}

// ---- linear algebra ------------------------------------------------------

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
        throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    const auto& as = a.storage();
    const auto& bs = b.storage();
    std::vector<T> out(batch * m * n, T(0));
    for (std::size_t q = 0; q < batch; ++q)
        for (std::size_t i = 0; i < m; ++i) {
            T* row = out.data() + (q * m + i) * n;
            for (std::size_t l = 0; l < k; ++l) {
                const T av = as[(q * m + i) * k + l];
                const T* brow = bs.data() + (q * k + l) * n;
                for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
            }
        }
    return make_result<T>(Shape{batch, m, n}, std::move(out), {a, b}, [batch, m, k, n](detail::TensorNode<T>& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const auto& g = self.grad;
        if (pa->requires_grad) {
            auto& ga = pa->ensure_grad();
            for (std::size_t q = 0; q < batch; ++q)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        T acc = 0;
                        const T* grow = g.data() + (q * m + i) * n;
                        const T* brow = pb->data.data() + (q * k + l) * n;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[(q * m + i) * k + l] += acc;
                    }
        }
        if (pb->requires_grad) {
            auto& gb = pb->ensure_grad();
            for (std::size_t q = 0; q < batch; ++q)
                for (std::size_t i = 0; i < m; ++i) {
                    const T* grow = g.data() + (q * m + i) * n;
                    for (std::size_t l = 0; l < k; ++l) {
                        const T av = pa->data[(q * m + i) * k + l];
                        T* gbrow = gb.data() + (q * k + l) * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
        }
    });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    auto out = bmm(reshape(a, {1, a.dim(0), a.dim(1)}), reshape(b, {1, b.dim(0), b.dim(1)}));
    return reshape(out, {a.dim(0), b.dim(1)});
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, BiasPtr<T> bias) {
    if (weight.ndim() != 2 || x.ndim() == 0 || x.shape().back() != weight.dim(1)) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(weight.shape()));
    }
    const std::size_t in = weight.dim(1), out_f = weight.dim(0);
    if (bias && bias->numel() != out_f) throw ShapeError("linear: bias length does not match output features");
    const std::size_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = out_f;
    const auto& xs = x.storage();
    const auto& ws = weight.storage();
    std::vector<T> out(rows * out_f);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xs.data() + r * in;
        for (std::size_t o = 0; o < out_f; ++o) {
            const T* wr = ws.data() + o * in;
            T acc = bias ? bias->storage()[o] : T(0);
            for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
            out[r * out_f + o] = acc;
        }
    }
    std::vector<Tensor<T>> parents{x, weight};
    if (bias) parents.push_back(*bias);
    return make_result<T>(out_shape, std::move(out), parents, [rows, in, out_f](detail::TensorNode<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        const auto& g = self.grad;
        if (px->requires_grad) {
            auto& gx = px->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < out_f; ++o) {
                    const T go = g[r * out_f + o];
                    const T* wr = pw->data.data() + o * in;
                    T* gxr = gx.data() + r * in;
                    for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
                }
        }
        if (pw->requires_grad) {
            auto& gw = pw->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* xr = px->data.data() + r * in;
                for (std::size_t o = 0; o < out_f; ++o) {
                    const T go = g[r * out_f + o];
                    T* gwr = gw.data() + o * in;
                    for (std::size_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
                }
            }
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            auto& gb = self.parents[2]->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < out_f; ++o) gb[o] += g[r * out_f + o];
        }
    });
}

#define TKM_INSTANTIATE(T)                                                                           \
    template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                      \
    template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                   \
    template Tensor<T> flip(const Tensor<T>&, std::size_t);                                          \
    template Tensor<T> slice(const Tensor<T>&, std::size_t, std::size_t, std::size_t);               \
    template Tensor<T> gather_axis(const Tensor<T>&, std::size_t, const std::vector<std::size_t>&);  \
    template Tensor<T> repeat_new_axis(const Tensor<T>&, std::size_t, std::size_t);                  \
    template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                           \
    template Tensor<T> sum(const Tensor<T>&);                                                        \
    template Tensor<T> mean(const Tensor<T>&);                                                       \
    template Tensor<T> sum_axis(const Tensor<T>&, std::size_t);                                      \
    template Tensor<T> adaptive_avg_pool3d_to_1(const Tensor<T>&);                                   \
    template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                      \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
