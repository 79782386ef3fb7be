#pragma once

#include <array>
#include <cstddef>
#include <vector>

#include "tkmamba/module.hpp"
#include "tkmamba/ssm.hpp"
#include "tkmamba/tensor.hpp"

namespace tkm {

// ---- group-rational activation -------------------------------------------

inline constexpr std::size_t kRationalNum = 6;  // a_0..a_5
inline constexpr std::size_t kRationalDen = 4;  // b_1..b_4

struct RationalCoeffs {
    std::array<double, kRationalNum> a{};
    std::array<double, kRationalDen> b{};
};

/// P(x) / (1 + |b_1 x + ... + b_4 x^4|).
double rational_eval(double x, const RationalCoeffs& c);

/// Coefficients fitted to exact GELU on the [-3, 3] grid with 0.01 spacing:
/// a linearized least-squares start refined by Levenberg-Marquardt on the
/// true residual. Computed once and cached.
const RationalCoeffs& gelu_rational_fit();

/// Max |rational(x) - gelu(x)| over the fitting grid.
double gelu_fit_max_error(const RationalCoeffs& c);

/// Largest divisor of `width` that also divides `requested`.
std::size_t resolve_groups(std::size_t width, std::size_t requested);

/// Rational activation over the last axis of x. Channels are split into
/// num.dim(0) contiguous groups; a group shares numerator [G,6] and
/// denominator [G,4] coefficients.
template <typename T>
Tensor<T> rational_group(const Tensor<T>& x, const Tensor<T>& num, const Tensor<T>& den);

template <typename T>
class RationalGroupActivation {
public:
    RationalGroupActivation() = default;
    /// GELU-initialized; throws NumericError if the fit misses the 0.01 bound.
    RationalGroupActivation(std::size_t width, std::size_t groups);

    Tensor<T> forward(const Tensor<T>& x) const { return rational_group(x, num, den); }
    void parameters(const std::string& prefix, ParamList<T>& out) const;
    /// min over the grid x in [-range, range] of Q(x), for every group.
    T min_denominator(double range = 10.0) const;

    Tensor<T> num, den;
};

// ---- convolution blocks --------------------------------------------------

/// instance norm -> conv3d (same padding) -> PReLU.
template <typename T>
class ConvBlock {
public:
    ConvBlock() = default;
    ConvBlock(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng);

    Tensor<T> forward(const Tensor<T>& x) const;
    void parameters(const std::string& prefix, ParamList<T>& out) const;

    Tensor<T> norm_g, norm_b, weight, bias, alpha;
    std::size_t kernel = 1;
};

/// z + C1(C3(C3(z)) + C1'(z)).
template <typename T>
class Egsc {
public:
    Egsc() = default;
    Egsc(std::size_t channels, Rng& rng);

    Tensor<T> forward(const Tensor<T>& z) const;
    void parameters(const std::string& prefix, ParamList<T>& out) const;

    ConvBlock<T> conv3a, conv3b, conv1_inner, conv1_outer;
};

// ---- tri-orientated flattening ------------------------------------------

enum class FlattenOrder { Forward = 0, Reverse = 1, Slice = 2 };

/// Sequence position k of the chosen order reads voxel order[k], where voxels
/// are numbered row-major over (D,H,W).
std::vector<std::size_t> flatten_order(FlattenOrder which, std::size_t D, std::size_t H, std::size_t W);

/// [B,C,D,H,W] -> [B,L,C] along `order`.
template <typename T>
Tensor<T> flatten_seq(const Tensor<T>& z, const std::vector<std::size_t>& order);

/// Inverse of flatten_seq.
template <typename T>
Tensor<T> unflatten_seq(const Tensor<T>& seq, const std::vector<std::size_t>& order, std::size_t D, std::size_t H,
                        std::size_t W);

/// Mamba(z_f) + Mamba(z_r) + Mamba(z_s), each mapped back to voxel order.
template <typename T>
class Tom {
public:
    Tom() = default;
    Tom(std::size_t channels, const MambaConfig& base, Rng& rng);

    Tensor<T> forward(const Tensor<T>& z) const;
    void parameters(const std::string& prefix, ParamList<T>& out) const;

    std::array<MambaBlock<T>, 3> branches;
};

// ---- 3D-GR-KAN ------------------------------------------------------------

struct GrKanConfig {
    std::size_t expansion = 4;
    std::size_t groups = 8;
    double dropout = 0.0;
    bool zero_init_out = true;
};

/// Voxels as a sequence -> linear(C->hidden) -> rational -> dropout ->
/// linear(hidden->C) -> dropout -> back to [B,C,D,H,W]. No residual here.
template <typename T>
class GrKan {
public:
    GrKan() = default;
    GrKan(std::size_t channels, const GrKanConfig& config, Rng& rng);

    Tensor<T> forward(const Tensor<T>& z, const ForwardContext& ctx = {}) const;
    void parameters(const std::string& prefix, ParamList<T>& out) const;

    Tensor<T> w1, b1, w2, b2;
    RationalGroupActivation<T> act;
    GrKanConfig config;
};

}  // namespace tkm
