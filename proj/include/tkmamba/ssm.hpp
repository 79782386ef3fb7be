#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tkmamba/module.hpp"
#include "tkmamba/tensor.hpp"

namespace tkm {

enum class ZohMode {
    Simplified,  // B_bar = delta * B
    Full,        // B_bar = (exp(delta*A) - 1) / A * B
};

/// Positions per chunk in the parallel scan. Fixed so results never depend
/// on the thread count.
inline constexpr std::size_t kScanChunk = 64;

/// Channels advanced together per time step inside the selective kernels.
inline constexpr std::size_t kLaneBlock = 16;

template <typename T>
struct Discretized {
    T a_bar;
    T b_bar;
};

/// Zero-order hold for one diagonal state entry. Throws on delta <= 0.
template <typename T>
Discretized<T> zoh_discretize(T a, T b, T delta, ZohMode mode = ZohMode::Simplified);

/// One diagonal SSM sequence with discretized parameters, row-major [L,N].
template <typename T>
struct ScanInput {
    std::size_t length = 0;
    std::size_t state = 0;
    std::span<const T> a_bar;  // [L,N]
    std::span<const T> b_bar;  // [L,N]
    std::span<const T> c_bar;  // [L,N]
    std::span<const T> x;      // [L]
    std::span<const T> h0;     // [N], empty means zero
};

/// h_t = a_t * h_{t-1} + b_t * x_t, y_t = sum_n c_tn h_tn, left to right.
template <typename T>
std::vector<T> scan_sequential(const ScanInput<T>& in);

/// Same recurrence through a chunked work-efficient prefix scan over the
/// affine maps h -> a*h + b, composed as (a2,b2)o(a1,b1) = (a2 a1, a2 b1 + b2).
template <typename T>
std::vector<T> scan_parallel(const ScanInput<T>& in, std::size_t chunk = kScanChunk);

/// In-place exclusive Blelloch scan of affine maps. On return element i holds
/// the composition of elements 0..i-1 (identity for i = 0).
template <typename T>
void affine_exclusive_scan(std::vector<T>& a, std::vector<T>& b);

/// Raw selective-scan problem over [B,L,D] sequences with N states per channel.
/// Delta, B and C are already input dependent; A is [D,N] and negative.
template <typename T>
struct SelectiveScanArgs {
    std::size_t batch = 0, length = 0, channels = 0, state = 0;
    const T* u = nullptr;      // [B,L,D]
    const T* delta = nullptr;  // [B,L,D]
    const T* A = nullptr;      // [D,N]
    const T* Bm = nullptr;     // [B,L,N]
    const T* Cm = nullptr;     // [B,L,N]
    const T* Dskip = nullptr;  // [D] or null
    ZohMode mode = ZohMode::Simplified;
};

template <typename T>
void selective_scan_sequential(const SelectiveScanArgs<T>& args, T* y);

template <typename T>
void selective_scan_parallel(const SelectiveScanArgs<T>& args, T* y, std::size_t chunk = kScanChunk);

/// Differentiable selective scan. Forward uses the parallel kernel; the
/// backward pass replays the recurrence sequentially per lane.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& Bm,
                         const Tensor<T>& Cm, const Tensor<T>& Dskip, ZohMode mode = ZohMode::Simplified);

struct MambaConfig {
    std::size_t d_model = 0;
    std::size_t d_state = 16;
    std::size_t expand = 2;
    std::size_t conv_kernel = 4;
    std::size_t dt_rank = 0;  // 0 means ceil(d_model / 16)
    bool selective = true;    // false: delta, B, C do not depend on the input
    ZohMode zoh = ZohMode::Simplified;
    double dt_min = 0.001;
    double dt_max = 0.1;
    bool zero_init_out = true;

    std::size_t d_inner() const { return expand * d_model; }
    std::size_t resolved_dt_rank() const { return dt_rank ? dt_rank : (d_model + 15) / 16; }
};

/// Gated selective SSM block over [B,L,d_model] sequences.
template <typename T>
class MambaBlock {
public:
    MambaBlock() = default;
    MambaBlock(const MambaConfig& config, Rng& rng);

    Tensor<T> forward(const Tensor<T>& x) const;
    void parameters(const std::string& prefix, ParamList<T>& out) const;
    const MambaConfig& config() const { return config_; }

    Tensor<T> in_proj, conv_w, conv_b, x_proj, dt_proj_w, dt_proj_b, A_log, D, out_proj;
    Tensor<T> B_lti, C_lti;  // [N], used when !selective

private:
    MambaConfig config_;
};

struct ScanBenchRow {
    std::size_t length = 0;
    double sequential_ms = 0.0;
    double parallel_ms = 0.0;
    double quadratic_ms = 0.0;
};

struct ScanBenchOptions {
    std::size_t channels = 8;
    std::size_t state = 16;
    std::size_t repeats = 5;  // median over this many samples, taken round-robin across kernels
    bool quadratic = true;
    std::uint64_t seed = 0;
};

/// Times the sequential and parallel selective-scan kernels, and a naive
/// O(L^2) causal similarity accumulation, at each length.
std::vector<ScanBenchRow> bench_scan(const std::vector<std::size_t>& lengths, const ScanBenchOptions& options);

}  // namespace tkm
