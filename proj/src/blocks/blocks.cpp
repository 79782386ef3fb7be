#include "tkmamba/blocks.hpp"
#include "tkmamba/ops.hpp"

namespace tkm {

// ---- ConvBlock -------------------------------------------------------------

template <typename T>
ConvBlock<T>::ConvBlock(std::size_t in, std::size_t out, std::size_t k, Rng& rng) : kernel(k) {
    if (k % 2 == 0) throw ValidationError("ConvBlock: kernel must be odd");
    const std::size_t fan_in = in * k * k * k;
    norm_g = const_param<T>({in}, T(1));
    norm_b = const_param<T>({in}, T(0));
    weight = fan_in_param<T>({out, in, k, k, k}, fan_in, rng);
    bias = fan_in_param<T>({out}, fan_in, rng);
    alpha = const_param<T>({out}, T(0.25));
}

template <typename T>
Tensor<T> ConvBlock<T>::forward(const Tensor<T>& x) const {
    return prelu(conv3d(instance_norm(x, norm_g, norm_b), weight, &bias, 1, kernel / 2), alpha);
}

template <typename T>
void ConvBlock<T>::parameters(const std::string& prefix, ParamList<T>& out) const {
    add_param(out, prefix, "norm_g", norm_g);
    add_param(out, prefix, "norm_b", norm_b);
    add_param(out, prefix, "weight", weight);
    add_param(out, prefix, "bias", bias);
    add_param(out, prefix, "alpha", alpha);
}

// ---- EGSC ------------------------------------------------------------------

template <typename T>
Egsc<T>::Egsc(std::size_t channels, Rng& rng)
    : conv3a(channels, channels, 3, rng),
      conv3b(channels, channels, 3, rng),
      conv1_inner(channels, channels, 1, rng),
      conv1_outer(channels, channels, 1, rng) {}

template <typename T>
Tensor<T> Egsc<T>::forward(const Tensor<T>& z) const {
    auto local = conv3b.forward(conv3a.forward(z));
    return add(z, conv1_outer.forward(add(local, conv1_inner.forward(z))));
}

template <typename T>
void Egsc<T>::parameters(const std::string& prefix, ParamList<T>& out) const {
    conv3a.parameters(prefix + ".conv3a", out);
    conv3b.parameters(prefix + ".conv3b", out);
    conv1_inner.parameters(prefix + ".conv1_inner", out);
    conv1_outer.parameters(prefix + ".conv1_outer", out);
}

// ---- flattening ------------------------------------------------------------

std::vector<std::size_t> flatten_order(FlattenOrder which, std::size_t D, std::size_t H, std::size_t W) {
    const std::size_t L = D * H * W;
    std::vector<std::size_t> order(L);
    switch (which) {
        case FlattenOrder::Forward:
            for (std::size_t k = 0; k < L; ++k) order[k] = k;
            break;
        case FlattenOrder::Reverse:
            for (std::size_t k = 0; k < L; ++k) order[k] = L - 1 - k;
            break;
        case FlattenOrder::Slice: {
            std::size_t k = 0;
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w)
                    for (std::size_t d = 0; d < D; ++d) order[k++] = (d * H + h) * W + w;
            break;
        }
    }
    return order;
}

template <typename T>
Tensor<T> flatten_seq(const Tensor<T>& z, const std::vector<std::size_t>& order) {
    if (z.ndim() != 5) throw ShapeError("flatten_seq: expected [B,C,D,H,W], got " + shape_str(z.shape()));
    const std::size_t B = z.dim(0), C = z.dim(1), L = z.dim(2) * z.dim(3) * z.dim(4);
    if (order.size() != L) throw ShapeError("flatten_seq: order length does not match D*H*W");
    auto seq = permute(reshape(z, {B, C, L}), {0, 2, 1});
    return gather_axis(seq, 1, order);
}

template <typename T>
Tensor<T> unflatten_seq(const Tensor<T>& seq, const std::vector<std::size_t>& order, std::size_t D, std::size_t H,
                        std::size_t W) {
    if (seq.ndim() != 3 || seq.dim(1) != D * H * W) {
        throw ShapeError("unflatten_seq: expected [B," + std::to_string(D * H * W) + ",C], got " + shape_str(seq.shape()));
    }
    const std::size_t B = seq.dim(0), C = seq.dim(2);
    auto voxel = gather_axis(seq, 1, inverse_permutation(order));
    return reshape(permute(voxel, {0, 2, 1}), {B, C, D, H, W});
}

// ---- ToM -------------------------------------------------------------------

template <typename T>
Tom<T>::Tom(std::size_t channels, const MambaConfig& base, Rng& rng) {
    MambaConfig cfg = base;
    cfg.d_model = channels;
    for (auto& b : branches) b = MambaBlock<T>(cfg, rng);
}

template <typename T>
Tensor<T> Tom<T>::forward(const Tensor<T>& z) const {
    if (z.ndim() != 5) throw ShapeError("Tom: expected [B,C,D,H,W], got " + shape_str(z.shape()));
    const std::size_t D = z.dim(2), H = z.dim(3), W = z.dim(4);
    Tensor<T> total;
    for (std::size_t i = 0; i < 3; ++i) {
        const auto order = flatten_order(static_cast<FlattenOrder>(i), D, H, W);
        auto y = unflatten_seq(branches[i].forward(flatten_seq(z, order)), order, D, H, W);
        total = i == 0 ? y : add(total, y);
    }
    return total;
}

template <typename T>
void Tom<T>::parameters(const std::string& prefix, ParamList<T>& out) const {
    static const char* names[3] = {"forward", "reverse", "slice"};
    for (std::size_t i = 0; i < 3; ++i) branches[i].parameters(prefix + "." + names[i], out);
}

// ---- GR-KAN ----------------------------------------------------------------

template <typename T>
GrKan<T>::GrKan(std::size_t channels, const GrKanConfig& cfg, Rng& rng)
    : act(channels * cfg.expansion, cfg.groups), config(cfg) {
    if (cfg.expansion == 0) throw ValidationError("GrKan: expansion must be positive");
    const std::size_t hidden = channels * cfg.expansion;
    w1 = fan_in_param<T>({hidden, channels}, channels, rng);
    b1 = fan_in_param<T>({hidden}, channels, rng);
    if (cfg.zero_init_out) {
        w2 = const_param<T>({channels, hidden}, T(0));
        b2 = const_param<T>({channels}, T(0));
    } else {
        w2 = fan_in_param<T>({channels, hidden}, hidden, rng);
        b2 = fan_in_param<T>({channels}, hidden, rng);
    }
}

template <typename T>
Tensor<T> GrKan<T>::forward(const Tensor<T>& z, const ForwardContext& ctx) const {
    if (z.ndim() != 5 || z.dim(1) != w1.dim(1)) {
        throw ShapeError("GrKan: expected [B," + std::to_string(w1.dim(1)) + ",D,H,W], got " + shape_str(z.shape()));
    }
    const Shape shape = z.shape();
    const std::size_t B = shape[0], C = shape[1], L = shape[2] * shape[3] * shape[4];
    const bool drop = ctx.training && config.dropout > 0.0;
    if (drop && !ctx.rng) throw ValidationError("GrKan: dropout in training mode needs an rng");
    Rng unused(0);
    Rng& rng = ctx.rng ? *ctx.rng : unused;

    auto seq = permute(reshape(z, {B, C, L}), {0, 2, 1});
    auto h = dropout(act.forward(linear(seq, w1, &b1)), config.dropout, drop, rng);
    auto y = dropout(linear(h, w2, &b2), config.dropout, drop, rng);
    return reshape(permute(y, {0, 2, 1}), shape);
}

template <typename T>
void GrKan<T>::parameters(const std::string& prefix, ParamList<T>& out) const {
    add_param(out, prefix, "w1", w1);
    add_param(out, prefix, "b1", b1);
    act.parameters(prefix + ".act", out);
    add_param(out, prefix, "w2", w2);
    add_param(out, prefix, "b2", b2);
}

#define TKM_INSTANTIATE(T)                                                                                         \
    template class ConvBlock<T>;                                                                                   \
    template class Egsc<T>;                                                                                        \
    template class Tom<T>;                                                                                         \
    template class GrKan<T>;                                                                                       \
    template Tensor<T> flatten_seq(const Tensor<T>&, const std::vector<std::size_t>&);                             \
    template Tensor<T> unflatten_seq(const Tensor<T>&, const std::vector<std::size_t>&, std::size_t, std::size_t, \
                                     std::size_t);

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
