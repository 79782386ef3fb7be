#include "tkmamba/network.hpp"

#include "tkmamba/ops.hpp"
#include "tkmamba/textbridge.hpp"

namespace tkm {

NetworkConfig network_preset(const std::string& name) {
    NetworkConfig c;
    if (name == "paper") return c;
    if (name == "desk") {
        c.dims = {4, 8, 16, 32};
        c.input_size = 32;
        c.controller_hidden = 64;
        return c;
    }
    throw ValidationError("unknown preset '" + name + "' (expected desk or paper)");
}

void validate_network_config(const NetworkConfig& c) {
    for (std::size_t d : c.dims)
        if (d == 0) throw ValidationError("network: stage widths must be positive");
    for (std::size_t d : c.depths)
        if (d == 0) throw ValidationError("network: stage depths must be positive");
    if (c.in_channels == 0 || c.classes == 0 || c.embed_dim == 0 || c.head_hidden == 0 || c.controller_hidden == 0) {
        throw ValidationError("network: channel counts must be positive");
    }
    if (c.stem_kernel % 2 == 0) throw ValidationError("network: stem kernel must be odd");
    if (c.input_size == 0 || c.input_size % 16 != 0) {
        throw ValidationError("network: input size " + std::to_string(c.input_size) + " must be a multiple of 16");
    }
}

StageShapes infer_shapes(const NetworkConfig& c, std::size_t batch) {
    validate_network_config(c);
    auto conv_out = [](std::size_t n, std::size_t k, std::size_t s, std::size_t p) { return (n + 2 * p - k) / s + 1; };
    StageShapes out;
    std::size_t n = conv_out(c.input_size, c.stem_kernel, 2, c.stem_kernel / 2);
    out.stem = {batch, c.dims[0], n, n, n};
    for (std::size_t l = 0; l < 4; ++l) {
        out.stages[l] = {batch, c.dims[l], n, n, n};
        if (l < 3) n = conv_out(n, 3, 2, 1);
    }
    for (std::size_t l = 0; l < 4; ++l) n *= 2;  // one k2/s2 transposed conv per decoder level
    out.decoder = {batch, c.decoder_channels(), n, n, n};
    out.logits = {batch, c.classes, n, n, n};
    out.visual_embedding = {batch, c.embed_dim};
    return out;
}

template <typename T>
Tensor<T> SegmentationOutput<T>::masks() const {
    std::vector<T> m(logits.numel());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = logits.at(i) > T(0) ? T(1) : T(0);
    return Tensor<T>::from_data(logits.shape(), std::move(m));
}

// ---- K-Mamba layer ---------------------------------------------------------

template <typename T>
KMambaLayer<T>::KMambaLayer(std::size_t channels, const NetworkConfig& config, Rng& rng)
    : egsc(channels, rng),
      ln1_g(const_param<T>({channels}, T(1))),
      ln1_b(const_param<T>({channels}, T(0))),
      ln2_g(const_param<T>({channels}, T(1))),
      ln2_b(const_param<T>({channels}, T(0))),
      tom(channels, config.mamba, rng),
      kan(channels, config.kan, rng) {}

template <typename T>
Tensor<T> KMambaLayer<T>::forward(const Tensor<T>& z, const ForwardContext& ctx) const {
    auto zh = egsc.forward(z);
    auto zt = add(tom.forward(layer_norm(zh, ln1_g, ln1_b, 1)), zh);
    return add(kan.forward(layer_norm(zt, ln2_g, ln2_b, 1), ctx), zt);
}

template <typename T>
void KMambaLayer<T>::parameters(const std::string& prefix, ParamList<T>& out) const {
    egsc.parameters(prefix + ".egsc", out);
    add_param(out, prefix, "ln1_g", ln1_g);
    add_param(out, prefix, "ln1_b", ln1_b);
    tom.parameters(prefix + ".tom", out);
    add_param(out, prefix, "ln2_g", ln2_g);
    add_param(out, prefix, "ln2_b", ln2_b);
    kan.parameters(prefix + ".kan", out);
}

// ---- TK-Mamba ----------------------------------------------------------------

template <typename T>
TkMamba<T>::TkMamba(const NetworkConfig& config, Rng& rng) : config_(config) {
    validate_network_config(config);
    const auto& d = config.dims;
    const std::size_t k = config.stem_kernel, cin = config.in_channels;

    stem_w = fan_in_param<T>({d[0], cin, k, k, k}, cin * k * k * k, rng);
    stem_b = fan_in_param<T>({d[0]}, cin * k * k * k, rng);
    stem_norm_g = const_param<T>({d[0]}, T(1));
    stem_norm_b = const_param<T>({d[0]}, T(0));
    stem_alpha = const_param<T>({d[0]}, T(0.25));

    for (std::size_t l = 0; l < 4; ++l) {
        for (std::size_t i = 0; i < config.depths[l]; ++i) stages[l].emplace_back(d[l], config, rng);
        if (l < 3) {
            down_norm_g[l] = const_param<T>({d[l]}, T(1));
            down_norm_b[l] = const_param<T>({d[l]}, T(0));
            down_w[l] = fan_in_param<T>({d[l + 1], d[l], 3, 3, 3}, d[l] * 27, rng);
            down_b[l] = fan_in_param<T>({d[l + 1]}, d[l] * 27, rng);
        }
    }

    const std::size_t cdec = config.decoder_channels();
    skip0 = ConvBlock<T>(cin, cdec, 3, rng);
    for (std::size_t l = 4; l-- > 0;) {
        const std::size_t in = d[l];
        const std::size_t out = l == 0 ? cdec : d[l - 1];
        up_w[l] = fan_in_param<T>({in, out, 2, 2, 2}, in * 8, rng);
        up_b[l] = fan_in_param<T>({out}, in * 8, rng);
        dec_a[l] = ConvBlock<T>(2 * out, out, 3, rng);
        dec_b[l] = ConvBlock<T>(out, out, 3, rng);
    }

    const std::size_t hidden = config.embed_hidden();
    embed_hidden_w = fan_in_param<T>({hidden, d[3], 1, 1, 1}, d[3], rng);
    embed_hidden_b = fan_in_param<T>({hidden}, d[3], rng);
    embed_norm_g = const_param<T>({hidden}, T(1));
    embed_norm_b = const_param<T>({hidden}, T(0));
    embed_out_w = fan_in_param<T>({config.embed_dim, hidden, 1, 1, 1}, hidden, rng);
    embed_out_b = fan_in_param<T>({config.embed_dim}, hidden, rng);

    const std::size_t ctrl_in = config.embed_dim + cdec;
    ctrl_w1 = fan_in_param<T>({config.controller_hidden, ctrl_in}, ctrl_in, rng);
    ctrl_b1 = fan_in_param<T>({config.controller_hidden}, ctrl_in, rng);
    ctrl_w2 = fan_in_param<T>({config.head_params(), config.controller_hidden}, config.controller_hidden, rng);
    ctrl_b2 = fan_in_param<T>({config.head_params()}, config.controller_hidden, rng);
}

template <typename T>
Tensor<T> TkMamba<T>::stem(const Tensor<T>& x) const {
    if (x.ndim() != 5 || x.dim(1) != config_.in_channels) {
        throw ShapeError("TkMamba: expected input [B," + std::to_string(config_.in_channels) + ",D,H,W], got " +
                         shape_str(x.shape()));
    }
    const std::size_t k = config_.stem_kernel;
    auto y = conv3d(x, stem_w, &stem_b, 2, k / 2);
    return prelu(instance_norm(y, stem_norm_g, stem_norm_b), stem_alpha);
}

template <typename T>
EncoderOutput<T> TkMamba<T>::encode(const Tensor<T>& x, const ForwardContext& ctx) const {
    EncoderOutput<T> out;
    out.stem = stem(x);
    Tensor<T> z = out.stem;
    for (std::size_t l = 0; l < 4; ++l) {
        for (const auto& layer : stages[l]) z = layer.forward(z, ctx);
        out.stages[l] = z;
        if (l < 3) z = conv3d(instance_norm(z, down_norm_g[l], down_norm_b[l]), down_w[l], &down_b[l], 2, 1);
    }
    return out;
}

template <typename T>
Tensor<T> TkMamba<T>::decode(const Tensor<T>& x, const EncoderOutput<T>& enc) const {
    Tensor<T> z = enc.stages[3];
    for (std::size_t l = 4; l-- > 0;) {
        const Tensor<T> skip = l == 0 ? skip0.forward(x) : enc.stages[l - 1];
        auto up = conv_transpose3d(z, up_w[l], &up_b[l], 2);
        if (up.shape() != skip.shape()) {
            throw ShapeError("decoder level " + std::to_string(l) + ": upsampled " + shape_str(up.shape()) +
                             " does not match skip " + shape_str(skip.shape()));
        }
        z = dec_b[l].forward(dec_a[l].forward(concat<T>({up, skip}, 1)));
    }
    return z;
}

template <typename T>
Tensor<T> TkMamba<T>::visual_embed(const Tensor<T>& bottom) const {
    if (bottom.ndim() != 5 || bottom.dim(1) != config_.dims[3]) {
        throw ShapeError("visual_embed: expected [B," + std::to_string(config_.dims[3]) + ",D,H,W], got " +
                         shape_str(bottom.shape()));
    }
    const std::size_t groups = resolve_groups(config_.embed_hidden(), config_.embed_groups);
    auto h = conv3d(bottom, embed_hidden_w, &embed_hidden_b, 1, 0);
    auto pooled = adaptive_avg_pool3d_to_1(relu(group_norm(h, groups, embed_norm_g, embed_norm_b)));
    auto fv = conv3d(pooled, embed_out_w, &embed_out_b, 1, 0);
    return reshape(fv, {bottom.dim(0), config_.embed_dim});
}

template <typename T>
Tensor<T> TkMamba<T>::seg_head(const Tensor<T>& dec, const Tensor<T>& E) const {
    const std::size_t C = config_.decoder_channels(), hh = config_.head_hidden;
    if (dec.ndim() != 5 || dec.dim(1) != C) {
        throw ShapeError("seg_head: expected [B," + std::to_string(C) + ",D,H,W], got " + shape_str(dec.shape()));
    }
    if (E.ndim() != 2 || E.dim(1) != config_.embed_dim) {
        throw ShapeError("seg_head: label embeddings must be [K," + std::to_string(config_.embed_dim) + "], got " +
                         shape_str(E.shape()));
    }
    if (E.dim(0) != config_.classes) {
        throw ValidationError("seg_head: " + std::to_string(E.dim(0)) + " label embeddings for " +
                              std::to_string(config_.classes) + " configured classes");
    }
    const std::size_t B = dec.dim(0), K = E.dim(0);
    const std::size_t D = dec.dim(2), H = dec.dim(3), W = dec.dim(4), V = D * H * W;

    auto ctx = reshape(adaptive_avg_pool3d_to_1(dec), {B, C});
    auto inp = concat<T>({repeat_new_axis(E, 0, B), repeat_new_axis(ctx, 1, K)}, 2);
    auto p = linear(relu(linear(inp, ctrl_w1, &ctrl_b1)), ctrl_w2, &ctrl_b2);  // [B,K,P]

    auto w1 = reshape(slice(p, 2, 0, hh * C), {B, K * hh, C});
    auto b1 = reshape(slice(p, 2, hh * C, hh), {B, K * hh, 1});
    auto w2 = reshape(slice(p, 2, hh * C + hh, hh), {B * K, 1, hh});
    auto b2 = reshape(slice(p, 2, hh * C + 2 * hh, 1), {B * K, 1, 1});

    auto h1 = relu(add(bmm(w1, reshape(dec, {B, C, V})), b1));
    auto logits = add(bmm(w2, reshape(h1, {B * K, hh, V})), b2);
    return reshape(logits, {B, K, D, H, W});
}

template <typename T>
SegmentationOutput<T> TkMamba<T>::forward(const Tensor<T>& x, const Tensor<T>& label_embeddings,
                                          const Tensor<T>* description_embeddings, const ForwardContext& ctx) const {
    auto enc = encode(x, ctx);
    SegmentationOutput<T> out;
    out.logits = seg_head(decode(x, enc), label_embeddings);
    out.features = visual_embed(enc.stages[3]);
    if (description_embeddings) out.presence = similarity_matrix(out.features, *description_embeddings);
    return out;
}

template <typename T>
ParamList<T> TkMamba<T>::parameters() const {
    ParamList<T> out;
    add_param(out, "stem", "weight", stem_w);
    add_param(out, "stem", "bias", stem_b);
    add_param(out, "stem", "norm_g", stem_norm_g);
    add_param(out, "stem", "norm_b", stem_norm_b);
    add_param(out, "stem", "alpha", stem_alpha);
    for (std::size_t l = 0; l < 4; ++l) {
        for (std::size_t i = 0; i < stages[l].size(); ++i) {
            stages[l][i].parameters("stage" + std::to_string(l) + ".layer" + std::to_string(i), out);
        }
        if (l < 3) {
            const std::string p = "down" + std::to_string(l);
            add_param(out, p, "norm_g", down_norm_g[l]);
            add_param(out, p, "norm_b", down_norm_b[l]);
            add_param(out, p, "weight", down_w[l]);
            add_param(out, p, "bias", down_b[l]);
        }
    }
    skip0.parameters("dec.skip0", out);
    for (std::size_t l = 4; l-- > 0;) {
        const std::string p = "dec.level" + std::to_string(l);
        add_param(out, p, "up_w", up_w[l]);
        add_param(out, p, "up_b", up_b[l]);
        dec_a[l].parameters(p + ".a", out);
        dec_b[l].parameters(p + ".b", out);
    }
    add_param(out, "embed", "hidden_w", embed_hidden_w);
    add_param(out, "embed", "hidden_b", embed_hidden_b);
    add_param(out, "embed", "norm_g", embed_norm_g);
    add_param(out, "embed", "norm_b", embed_norm_b);
    add_param(out, "embed", "out_w", embed_out_w);
    add_param(out, "embed", "out_b", embed_out_b);
    add_param(out, "head", "w1", ctrl_w1);
    add_param(out, "head", "b1", ctrl_b1);
    add_param(out, "head", "w2", ctrl_w2);
    add_param(out, "head", "b2", ctrl_b2);
    return out;
}

#define TKM_INSTANTIATE(T)              \
    template struct SegmentationOutput<T>; \
    template class KMambaLayer<T>;      \
    template class TkMamba<T>;

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
