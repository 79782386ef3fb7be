#include <cmath>

#include "tkmamba/ops.hpp"
#include "tkmamba/ssm.hpp"

namespace tkm {

template <typename T>
MambaBlock<T>::MambaBlock(const MambaConfig& config, Rng& rng) : config_(config) {
    if (config.d_model == 0 || config.d_state == 0 || config.expand == 0 || config.conv_kernel == 0) {
        throw ValidationError("MambaBlock: dimensions must be positive");
    }
    if (!(config.dt_min > 0.0 && config.dt_min <= config.dt_max)) {
        throw ValidationError("MambaBlock: need 0 < dt_min <= dt_max");
    }
    const std::size_t d = config.d_model, di = config.d_inner(), N = config.d_state;
    const std::size_t R = config.resolved_dt_rank(), k = config.conv_kernel;

    in_proj = fan_in_param<T>({2 * di, d}, d, rng);
    conv_w = fan_in_param<T>({di, k}, k, rng);
    conv_b = fan_in_param<T>({di}, k, rng);
    x_proj = fan_in_param<T>({R + 2 * N, di}, di, rng);
    dt_proj_w = uniform_param<T>({di, R}, 1.0 / std::sqrt(static_cast<double>(R)), rng);

    // softplus(bias) = dt with dt log-uniform in [dt_min, dt_max]
    std::vector<T> bias(di);
    const double lo = std::log(config.dt_min), hi = std::log(config.dt_max);
    for (auto& b : bias) {
        const double dt = std::max(std::exp(lo + rng.uniform() * (hi - lo)), 1e-4);
        b = static_cast<T>(dt + std::log(-std::expm1(-dt)));
    }
    dt_proj_b = Tensor<T>::from_data({di}, std::move(bias)).set_requires_grad();

    std::vector<T> alog(di * N);
    for (std::size_t c = 0; c < di; ++c)
        for (std::size_t n = 0; n < N; ++n) alog[c * N + n] = static_cast<T>(std::log(static_cast<double>(n + 1)));
    A_log = Tensor<T>::from_data({di, N}, std::move(alog)).set_requires_grad();
    D = const_param<T>({di}, T(1));
    out_proj = config.zero_init_out ? const_param<T>({d, di}, T(0)) : fan_in_param<T>({d, di}, di, rng);

    if (!config.selective) {
        B_lti = fan_in_param<T>({N}, 1, rng);
        C_lti = fan_in_param<T>({N}, 1, rng);
    }
}

template <typename T>
Tensor<T> MambaBlock<T>::forward(const Tensor<T>& x) const {
    if (x.ndim() != 3 || x.dim(2) != config_.d_model) {
        throw ShapeError("MambaBlock: expected [B,L," + std::to_string(config_.d_model) + "], got " +
                         shape_str(x.shape()));
    }
    const std::size_t Bn = x.dim(0), L = x.dim(1), di = config_.d_inner(), N = config_.d_state;
    const std::size_t R = config_.resolved_dt_rank();

    auto xz = linear(x, in_proj, nullptr);
    auto xs = slice(xz, 2, 0, di);
    auto z = slice(xz, 2, di, di);
    auto u = silu(causal_depthwise_conv1d(xs, conv_w, &conv_b));

    Tensor<T> delta, Bm, Cm;
    if (config_.selective) {
        auto p = linear(u, x_proj, nullptr);
        delta = softplus(linear(slice(p, 2, 0, R), dt_proj_w, &dt_proj_b));
        Bm = slice(p, 2, R, N);
        Cm = slice(p, 2, R + N, N);
    } else {
        auto tile = [&](const Tensor<T>& v) { return repeat_new_axis(repeat_new_axis(v, 0, L), 0, Bn); };
        delta = softplus(tile(dt_proj_b));
        Bm = tile(B_lti);
        Cm = tile(C_lti);
    }
    auto A = neg(exp(A_log));
    auto y = selective_scan(u, delta, A, Bm, Cm, D, config_.zoh);
    return linear(mul(y, silu(z)), out_proj, nullptr);
}

template <typename T>
void MambaBlock<T>::parameters(const std::string& prefix, ParamList<T>& out) const {
    add_param(out, prefix, "in_proj", in_proj);
    add_param(out, prefix, "conv_w", conv_w);
    add_param(out, prefix, "conv_b", conv_b);
    if (config_.selective) {
        add_param(out, prefix, "x_proj", x_proj);
        add_param(out, prefix, "dt_proj_w", dt_proj_w);
    } else {
        add_param(out, prefix, "B", B_lti);
        add_param(out, prefix, "C", C_lti);
    }
    add_param(out, prefix, "dt_proj_b", dt_proj_b);
    add_param(out, prefix, "A_log", A_log);
    add_param(out, prefix, "D", D);
    add_param(out, prefix, "out_proj", out_proj);
}

template class MambaBlock<float>;
template class MambaBlock<double>;

}  // namespace tkm
