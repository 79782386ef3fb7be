#include <cmath>

#include "tkmamba/ops.hpp"

namespace tkm {

namespace {

// Generic normalization over index sets described by (outer, group, inner):
// a statistics slot is identified by (o, i); its members are the `group`
// elements spaced `inner` apart starting at o*group*inner + i. The affine
// parameter index of a member is given by `channel_of`.
struct NormLayout {
    std::size_t slots = 0;       // number of independent statistics
    std::size_t members = 0;     // elements per slot
    std::vector<std::size_t> member_index;   // slots*members flat indices
    std::vector<std::size_t> member_channel; // affine channel per element (flat order)
    std::size_t channels = 0;
};

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    std::shared_ptr<const NormLayout> layout, double eps) {
    if (gamma.numel() != layout->channels || beta.numel() != layout->channels) {
        throw ShapeError("normalization: gamma/beta must have " + std::to_string(layout->channels) + " entries");
    }
    const auto& xs = x.storage();
    const auto& gs = gamma.storage();
    const auto& bs = beta.storage();
    const std::size_t m = layout->members;
    std::vector<T> out(xs.size());
    auto xhat = std::make_shared<std::vector<T>>(xs.size());
    auto rstd = std::make_shared<std::vector<T>>(layout->slots);
    for (std::size_t s = 0; s < layout->slots; ++s) {
        const std::size_t* idx = layout->member_index.data() + s * m;
        T mu = 0;
        for (std::size_t j = 0; j < m; ++j) mu += xs[idx[j]];
        mu /= static_cast<T>(m);
        T corr = 0;
        for (std::size_t j = 0; j < m; ++j) corr += xs[idx[j]] - mu;
        mu += corr / static_cast<T>(m);
        T var = 0;
        for (std::size_t j = 0; j < m; ++j) {
            const T d = xs[idx[j]] - mu;
            var += d * d;
        }
        var /= static_cast<T>(m);
        const T r = T(1) / std::sqrt(var + static_cast<T>(eps));
        (*rstd)[s] = r;
        for (std::size_t j = 0; j < m; ++j) {
            const std::size_t i = idx[j];
            const T xh = (xs[i] - mu) * r;
            (*xhat)[i] = xh;
            const std::size_t c = layout->member_channel[i];
            out[i] = xh * gs[c] + bs[c];
        }
    }
    return make_result<T>(x.shape(), std::move(out), {x, gamma, beta}, [layout, xhat, rstd](detail::TensorNode<T>& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        const auto& g = self.grad;
        const std::size_t m = layout->members;
        if (pg->requires_grad || pb->requires_grad) {
            std::vector<T> gg(layout->channels, T(0)), gb(layout->channels, T(0));
            for (std::size_t i = 0; i < g.size(); ++i) {
                const std::size_t c = layout->member_channel[i];
                gg[c] += g[i] * (*xhat)[i];
                gb[c] += g[i];
            }
            accumulate<T>(pg, gg);
            accumulate<T>(pb, gb);
        }
        if (!px->requires_grad) return;
        auto& gx = px->ensure_grad();
        for (std::size_t s = 0; s < layout->slots; ++s) {
            const std::size_t* idx = layout->member_index.data() + s * m;
            T sum_d = 0, sum_dx = 0;
            for (std::size_t j = 0; j < m; ++j) {
                const std::size_t i = idx[j];
                const T d = g[i] * pg->data[layout->member_channel[i]];
                sum_d += d;
                sum_dx += d * (*xhat)[i];
            }
            const T r = (*rstd)[s];
            const T inv_m = T(1) / static_cast<T>(m);
            for (std::size_t j = 0; j < m; ++j) {
                const std::size_t i = idx[j];
                const T d = g[i] * pg->data[layout->member_channel[i]];
                gx[i] += r * (d - inv_m * sum_d - (*xhat)[i] * inv_m * sum_dx);
            }
        }
    });
}

}  // namespace

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
    if (x.ndim() < 2) throw ShapeError("group_norm: expected [B,C,...], got " + shape_str(x.shape()));
    const std::size_t batch = x.dim(0), channels = x.dim(1);
    if (groups == 0 || channels % groups != 0) {
        throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(channels) +
                         " channels");
    }
    const std::size_t spatial = x.numel() / (batch * channels);
    auto layout = std::make_shared<NormLayout>();
    layout->channels = channels;
    layout->slots = batch * groups;
    layout->members = (channels / groups) * spatial;
    // Each (b, g) slot covers a contiguous run in row-major [B,C,S] layout.
    layout->member_index.resize(x.numel());
    layout->member_channel.resize(x.numel());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        layout->member_index[i] = i;
        layout->member_channel[i] = (i / spatial) % channels;
    }
    return normalize(x, gamma, beta, std::shared_ptr<const NormLayout>(layout), eps);
}

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
    if (x.ndim() < 2) throw ShapeError("instance_norm: expected [B,C,...], got " + shape_str(x.shape()));
    return group_norm(x, x.dim(1), gamma, beta, eps);
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t axis, double eps) {
    if (axis >= x.ndim()) throw ShapeError("layer_norm: axis out of range for " + shape_str(x.shape()));
    std::size_t outer = 1, inner = 1;
    const std::size_t extent = x.dim(axis);
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);
    auto layout = std::make_shared<NormLayout>();
    layout->channels = extent;
    layout->slots = outer * inner;
    layout->members = extent;
    layout->member_index.resize(x.numel());
    layout->member_channel.resize(x.numel());
    std::size_t k = 0;
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i)
            for (std::size_t e = 0; e < extent; ++e) {
                const std::size_t flat = (o * extent + e) * inner + i;
                layout->member_index[k++] = flat;
                layout->member_channel[flat] = e;
            }
    return normalize(x, gamma, beta, std::shared_ptr<const NormLayout>(layout), eps);
}

#define TKM_INSTANTIATE(T)                                                                                   \
    template Tensor<T> group_norm(const Tensor<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&, double); \
    template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double);           \
    template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, double);

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
