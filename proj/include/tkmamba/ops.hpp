#pragma once

#include <cstddef>
#include <vector>

#include "tkmamba/random.hpp"
#include "tkmamba/tensor.hpp"

// Differentiable tensor operations. Every function records a backward
// closure when grad mode is on and one of its inputs requires a gradient.
namespace tkm {

// ---- elementwise ---------------------------------------------------------

template <typename T> Tensor<T> neg(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);
template <typename T> Tensor<T> log(const Tensor<T>& x);
template <typename T> Tensor<T> square(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
/// Exact (erf-based) GELU.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> silu(const Tensor<T>& x);
template <typename T> Tensor<T> softplus(const Tensor<T>& x);
/// PReLU with one slope per channel along `channel_axis` (alpha has shape [C]).
template <typename T> Tensor<T> prelu(const Tensor<T>& x, const Tensor<T>& alpha, std::size_t channel_axis = 1);

template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& x, T value);

/// Broadcasting binary ops. Shapes are right-aligned; each pair of extents
/// must be equal or one of them 1.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

Shape broadcast_shape(const Shape& a, const Shape& b);

// ---- linear algebra ------------------------------------------------------

/// [M,K] x [K,N] -> [M,N]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// [N,M,K] x [N,K,P] -> [N,M,P]
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);
/// y = x W^T + b over the last axis. weight [out,in]; bias [out] or empty.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, BiasPtr<T> bias);

// ---- shape ---------------------------------------------------------------

template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);
/// out.shape[i] = x.shape[perm[i]]
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);
template <typename T> Tensor<T> flip(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis);
/// out[..., i, ...] = x[..., index[i], ...] along `axis`; index must be a permutation.
template <typename T>
Tensor<T> gather_axis(const Tensor<T>& x, std::size_t axis, const std::vector<std::size_t>& index);
/// Tile `times` copies along a new axis inserted at position `axis`.
template <typename T> Tensor<T> repeat_new_axis(const Tensor<T>& x, std::size_t axis, std::size_t times);

std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm);

// ---- reductions ----------------------------------------------------------

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
/// Sum over one axis, which is removed from the result.
template <typename T> Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis);
/// Mean over every axis after the first two: [B,C,...] -> [B,C,1,1,1].
template <typename T> Tensor<T> adaptive_avg_pool3d_to_1(const Tensor<T>& x);

// ---- convolution ---------------------------------------------------------

/// Cross-correlation. input [B,C,D,H,W], weight [Co,C,k,k,k], bias [Co] or null.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, BiasPtr<T> bias, std::size_t stride,
                 std::size_t padding);
/// Non-overlapping transposed conv (kernel == stride). weight [C,Co,s,s,s].
template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& input, const Tensor<T>& weight, BiasPtr<T> bias,
                           std::size_t stride);
/// Causal depthwise conv along L. input [B,L,C], weight [C,k], bias [C] or null.
/// Output position t reads inputs t-k+1 .. t only.
template <typename T>
Tensor<T> causal_depthwise_conv1d(const Tensor<T>& input, const Tensor<T>& weight, BiasPtr<T> bias);

// ---- normalization -------------------------------------------------------

inline constexpr double kNormEps = 1e-5;

/// x [B,C,...]; statistics per (sample, group of C/groups channels).
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = kNormEps);
template <typename T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, double eps = kNormEps);
/// Normalizes along a single axis; gamma/beta have shape [x.shape[axis]].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t axis,
                     double eps = kNormEps);

// ---- misc ----------------------------------------------------------------

/// Inverted dropout; identity when !training or p == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& x, double p, bool training, Rng& rng);

/// Row-wise L2 normalization along the last axis: x / max(||x||, eps).
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, double eps = 1e-12);

/// mean(max(s,0) - s*y + log1p(exp(-|s|))). Target must be in {0,1}.
template <typename T> Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& target);

}  // namespace tkm
