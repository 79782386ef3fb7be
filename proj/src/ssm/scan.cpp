#include <cmath>
#include <string>

#include "tkmamba/error.hpp"
#include "tkmamba/ssm.hpp"

namespace tkm {

namespace {

template <typename T>
void check_scan_input(const ScanInput<T>& in) {
    const std::size_t ln = in.length * in.state;
    if (in.a_bar.size() != ln || in.b_bar.size() != ln || in.c_bar.size() != ln) {
        throw ShapeError("scan: parameter buffers must have length*state = " + std::to_string(ln) + " entries");
    }
    if (in.x.size() != in.length) {
        throw ShapeError("scan: x has " + std::to_string(in.x.size()) + " entries, expected " +
                         std::to_string(in.length));
    }
    if (!in.h0.empty() && in.h0.size() != in.state) throw ShapeError("scan: h0 must have `state` entries");
}

// B_bar coefficient multiplying B (so B_bar = coef * B).
template <typename T>
inline T bbar_coef(T a_bar, T A, T delta, ZohMode mode) {
    if (mode == ZohMode::Simplified || A == T(0)) return delta;
    return (a_bar - T(1)) / A;
}

}  // namespace

template <typename T>
Discretized<T> zoh_discretize(T a, T b, T delta, ZohMode mode) {
    if (std::isnan(delta)) throw NumericError("zoh_discretize: delta is NaN");
    if (!(delta > T(0))) throw ValidationError("zoh_discretize: delta must be positive");
    const T a_bar = std::exp(delta * a);
    return {a_bar, bbar_coef(a_bar, a, delta, mode) * b};
}

template <typename T>
std::vector<T> scan_sequential(const ScanInput<T>& in) {
    check_scan_input(in);
    const std::size_t N = in.state;
    std::vector<T> h(N, T(0));
    if (!in.h0.empty()) h.assign(in.h0.begin(), in.h0.end());
    std::vector<T> y(in.length);
    for (std::size_t t = 0; t < in.length; ++t) {
        T acc = 0;
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t i = t * N + n;
            h[n] = in.a_bar[i] * h[n] + in.b_bar[i] * in.x[t];
            acc += in.c_bar[i] * h[n];
        }
        y[t] = acc;
    }
    return y;
}

template <typename T>
void affine_exclusive_scan(std::vector<T>& a, std::vector<T>& b) {
    const std::size_t n = a.size();
    if (b.size() != n) throw ShapeError("affine_exclusive_scan: size mismatch");
    if (n == 0) return;
    std::size_t m = 1;
    while (m < n) m <<= 1;
    a.resize(m, T(1));
    b.resize(m, T(0));
    // up-sweep: right <- right o left
    for (std::size_t d = 1; d < m; d <<= 1) {
        for (std::size_t i = 2 * d - 1; i < m; i += 2 * d) {
            const std::size_t l = i - d;
            b[i] = a[i] * b[l] + b[i];
            a[i] = a[i] * a[l];
        }
    }
    a[m - 1] = T(1);
    b[m - 1] = T(0);
    // down-sweep: left gets the prefix, right gets left o prefix
    for (std::size_t d = m >> 1; d >= 1; d >>= 1) {
        for (std::size_t i = 2 * d - 1; i < m; i += 2 * d) {
            const std::size_t l = i - d;
            const T la = a[l], lb = b[l];
            a[l] = a[i];
            b[l] = b[i];
            b[i] = la * b[i] + lb;
            a[i] = la * a[i];
        }
    }
    a.resize(n);
    b.resize(n);
}

template <typename T>
std::vector<T> scan_parallel(const ScanInput<T>& in, std::size_t chunk) {
    check_scan_input(in);
    if (chunk == 0) throw ValidationError("scan_parallel: chunk must be positive");
    const std::size_t L = in.length, N = in.state;
    const std::size_t nchunks = (L + chunk - 1) / chunk;
    std::vector<T> y(L, T(0));
    std::vector<T> h(L * N);
    for (std::size_t n = 0; n < N; ++n) {
        std::vector<T> pa(nchunks, T(1)), pb(nchunks, T(0));
#pragma omp parallel for schedule(static)
        for (std::size_t c = 0; c < nchunks; ++c) {
            T ca = 1, cb = 0;
            for (std::size_t t = c * chunk; t < std::min(L, (c + 1) * chunk); ++t) {
                const T a = in.a_bar[t * N + n];
                ca *= a;
                cb = a * cb + in.b_bar[t * N + n] * in.x[t];
            }
            pa[c] = ca;
            pb[c] = cb;
        }
        affine_exclusive_scan(pa, pb);
        const T h0 = in.h0.empty() ? T(0) : in.h0[n];
#pragma omp parallel for schedule(static)
        for (std::size_t c = 0; c < nchunks; ++c) {
            T hc = pa[c] * h0 + pb[c];
            for (std::size_t t = c * chunk; t < std::min(L, (c + 1) * chunk); ++t) {
                hc = in.a_bar[t * N + n] * hc + in.b_bar[t * N + n] * in.x[t];
                h[t * N + n] = hc;
            }
        }
    }
    for (std::size_t t = 0; t < L; ++t) {
        T acc = 0;
        for (std::size_t n = 0; n < N; ++n) acc += in.c_bar[t * N + n] * h[t * N + n];
        y[t] = acc;
    }
    return y;
}

template <typename T>
void selective_scan_sequential(const SelectiveScanArgs<T>& s, T* y) {
    const std::size_t L = s.length, D = s.channels, N = s.state;
    const std::size_t blocks = (D + kLaneBlock - 1) / kLaneBlock;
#pragma omp parallel for collapse(2) schedule(static)
    for (std::size_t b = 0; b < s.batch; ++b) {
        for (std::size_t blk = 0; blk < blocks; ++blk) {
            const std::size_t d0 = blk * kLaneBlock, d1 = std::min(D, d0 + kLaneBlock);
            std::vector<T> h((d1 - d0) * N, T(0));
            for (std::size_t t = 0; t < L; ++t) {
                const T* Bt = s.Bm + (b * L + t) * N;
                const T* Ct = s.Cm + (b * L + t) * N;
                for (std::size_t d = d0; d < d1; ++d) {
                    const std::size_t i = (b * L + t) * D + d;
                    const T dt = s.delta[i], u = s.u[i];
                    const T* A = s.A + d * N;
                    T* hd = h.data() + (d - d0) * N;
                    T acc = 0;
                    for (std::size_t n = 0; n < N; ++n) {
                        const T a = std::exp(dt * A[n]);
                        hd[n] = a * hd[n] + bbar_coef(a, A[n], dt, s.mode) * Bt[n] * u;
                        acc += Ct[n] * hd[n];
                    }
                    y[i] = acc + (s.Dskip ? s.Dskip[d] * u : T(0));
                }
            }
        }
    }
}

template <typename T>
void selective_scan_parallel(const SelectiveScanArgs<T>& s, T* y, std::size_t chunk) {
    if (chunk == 0) throw ValidationError("selective_scan_parallel: chunk must be positive");
    const std::size_t L = s.length, D = s.channels, N = s.state;
    const std::size_t nchunks = (L + chunk - 1) / chunk;
    const std::size_t blocks = (D + kLaneBlock - 1) / kLaneBlock;
#pragma omp parallel for collapse(2) schedule(static)
    for (std::size_t b = 0; b < s.batch; ++b) {
        for (std::size_t blk = 0; blk < blocks; ++blk) {
            const std::size_t d0 = blk * kLaneBlock, d1 = std::min(D, d0 + kLaneBlock);
            const std::size_t lanes = (d1 - d0) * N;
            // chunk summaries laid out [lane][chunk] so each lane scans contiguously
            std::vector<std::vector<T>> pa(lanes, std::vector<T>(nchunks)), pb(lanes, std::vector<T>(nchunks));
            std::vector<T> ca(lanes), cb(lanes);
            for (std::size_t c = 0; c < nchunks; ++c) {
                std::fill(ca.begin(), ca.end(), T(1));
                std::fill(cb.begin(), cb.end(), T(0));
                for (std::size_t t = c * chunk; t < std::min(L, (c + 1) * chunk); ++t) {
                    const T* Bt = s.Bm + (b * L + t) * N;
                    for (std::size_t d = d0; d < d1; ++d) {
                        const std::size_t i = (b * L + t) * D + d;
                        const T dt = s.delta[i], u = s.u[i];
                        const T* A = s.A + d * N;
                        T* cad = ca.data() + (d - d0) * N;
                        T* cbd = cb.data() + (d - d0) * N;
                        for (std::size_t n = 0; n < N; ++n) {
                            const T a = std::exp(dt * A[n]);
                            cad[n] *= a;
                            cbd[n] = a * cbd[n] + bbar_coef(a, A[n], dt, s.mode) * Bt[n] * u;
                        }
                    }
                }
                for (std::size_t k = 0; k < lanes; ++k) {
                    pa[k][c] = ca[k];
                    pb[k][c] = cb[k];
                }
            }
            for (std::size_t k = 0; k < lanes; ++k) affine_exclusive_scan(pa[k], pb[k]);
            std::vector<T> h(lanes);
            for (std::size_t c = 0; c < nchunks; ++c) {
                for (std::size_t k = 0; k < lanes; ++k) h[k] = pb[k][c];  // h0 = 0
                for (std::size_t t = c * chunk; t < std::min(L, (c + 1) * chunk); ++t) {
                    const T* Bt = s.Bm + (b * L + t) * N;
                    const T* Ct = s.Cm + (b * L + t) * N;
                    for (std::size_t d = d0; d < d1; ++d) {
                        const std::size_t i = (b * L + t) * D + d;
                        const T dt = s.delta[i], u = s.u[i];
                        const T* A = s.A + d * N;
                        T* hd = h.data() + (d - d0) * N;
                        T acc = 0;
                        for (std::size_t n = 0; n < N; ++n) {
                            const T a = std::exp(dt * A[n]);
                            hd[n] = a * hd[n] + bbar_coef(a, A[n], dt, s.mode) * Bt[n] * u;
                            acc += Ct[n] * hd[n];
                        }
                        y[i] = acc + (s.Dskip ? s.Dskip[d] * u : T(0));
                    }
                }
            }
        }
    }
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& Bm,
                         const Tensor<T>& Cm, const Tensor<T>& Dskip, ZohMode mode) {
    if (u.ndim() != 3) throw ShapeError("selective_scan: u must be [B,L,D], got " + shape_str(u.shape()));
    check_same_shape(u.shape(), delta.shape(), "selective_scan(delta)");
    const std::size_t Bn = u.dim(0), L = u.dim(1), D = u.dim(2);
    if (A.ndim() != 2 || A.dim(0) != D) throw ShapeError("selective_scan: A must be [D,N], got " + shape_str(A.shape()));
    const std::size_t N = A.dim(1);
    const Shape bc{Bn, L, N};
    check_same_shape(Bm.shape(), bc, "selective_scan(B)");
    check_same_shape(Cm.shape(), bc, "selective_scan(C)");
    check_same_shape(Dskip.shape(), Shape{D}, "selective_scan(D)");
    for (T v : delta.storage()) {
        if (std::isnan(v)) throw NumericError("selective_scan: delta is NaN");
        if (!(v > T(0))) throw ValidationError("selective_scan: delta must be positive");
    }

    SelectiveScanArgs<T> args{Bn, L, D, N, u.storage().data(), delta.storage().data(), A.storage().data(),
                              Bm.storage().data(), Cm.storage().data(), Dskip.storage().data(), mode};
    std::vector<T> y(Bn * L * D);
    selective_scan_parallel(args, y.data());

    return make_result<T>(
        u.shape(), std::move(y), {u, delta, A, Bm, Cm, Dskip}, [Bn, L, D, N, mode](detail::TensorNode<T>& self) {
            const auto& pu = self.parents[0]->data;
            const auto& pdt = self.parents[1]->data;
            const auto& pA = self.parents[2]->data;
            const auto& pB = self.parents[3]->data;
            const auto& pC = self.parents[4]->data;
            const auto& pD = self.parents[5]->data;
            const auto& gy = self.grad;
            std::vector<T> gu(pu.size(), T(0)), gdt(pdt.size(), T(0)), gA(pA.size(), T(0)), gB(pB.size(), T(0)),
                gC(pC.size(), T(0)), gD(pD.size(), T(0));
            std::vector<T> h(L * N), a_buf(L * N);
            std::vector<T> gh(N), carry(N);
            // Lanes run in a fixed order so the B/C reductions are deterministic.
            for (std::size_t b = 0; b < Bn; ++b) {
                for (std::size_t d = 0; d < D; ++d) {
                    const T* Ad = pA.data() + d * N;
                    std::vector<T> hp(N, T(0));
                    for (std::size_t t = 0; t < L; ++t) {
                        const std::size_t i = (b * L + t) * D + d;
                        const T dt = pdt[i], uu = pu[i];
                        const T* Bt = pB.data() + (b * L + t) * N;
                        for (std::size_t n = 0; n < N; ++n) {
                            const T a = std::exp(dt * Ad[n]);
                            a_buf[t * N + n] = a;
                            hp[n] = a * hp[n] + bbar_coef(a, Ad[n], dt, mode) * Bt[n] * uu;
                            h[t * N + n] = hp[n];
                        }
                    }
                    std::fill(carry.begin(), carry.end(), T(0));
                    for (std::size_t t = L; t-- > 0;) {
                        const std::size_t i = (b * L + t) * D + d;
                        const T g = gy[i], dt = pdt[i], uu = pu[i];
                        const T* Bt = pB.data() + (b * L + t) * N;
                        const T* Ct = pC.data() + (b * L + t) * N;
                        T* gBt = gB.data() + (b * L + t) * N;
                        T* gCt = gC.data() + (b * L + t) * N;
                        gD[d] += g * uu;
                        T gu_acc = pD[d] * g, gdt_acc = 0;
                        for (std::size_t n = 0; n < N; ++n) {
                            const T a = a_buf[t * N + n];
                            const T An = Ad[n];
                            gh[n] = Ct[n] * g + carry[n];
                            gCt[n] += g * h[t * N + n];
                            const T hprev = t > 0 ? h[(t - 1) * N + n] : T(0);
                            const T ga = gh[n] * hprev;  // dL/da_bar
                            const T coef = bbar_coef(a, An, dt, mode);
                            gu_acc += gh[n] * coef * Bt[n];
                            gBt[n] += gh[n] * coef * uu;
                            const T gcoef = gh[n] * Bt[n] * uu;  // dL/dcoef
                            T dcoef_ddt, dcoef_dA;
                            if (mode == ZohMode::Simplified || An == T(0)) {
                                dcoef_ddt = T(1);
                                dcoef_dA = T(0);
                            } else {
                                dcoef_ddt = a;
                                dcoef_dA = (dt * a * An - (a - T(1))) / (An * An);
                            }
                            gdt_acc += ga * a * An + gcoef * dcoef_ddt;
                            gA[d * N + n] += ga * a * dt + gcoef * dcoef_dA;
                            carry[n] = a * gh[n];
                        }
                        gu[i] += gu_acc;
                        gdt[i] += gdt_acc;
                    }
                }
            }
            accumulate<T>(self.parents[0], gu);
            accumulate<T>(self.parents[1], gdt);
            accumulate<T>(self.parents[2], gA);
            accumulate<T>(self.parents[3], gB);
            accumulate<T>(self.parents[4], gC);
            accumulate<T>(self.parents[5], gD);
        });
}

#define TKM_INSTANTIATE(T)                                                                                     \
    template Discretized<T> zoh_discretize(T, T, T, ZohMode);                                                  \
    template std::vector<T> scan_sequential(const ScanInput<T>&);                                              \
    template std::vector<T> scan_parallel(const ScanInput<T>&, std::size_t);                                   \
    template void affine_exclusive_scan(std::vector<T>&, std::vector<T>&);                                     \
    template void selective_scan_sequential(const SelectiveScanArgs<T>&, T*);                                  \
    template void selective_scan_parallel(const SelectiveScanArgs<T>&, T*, std::size_t);                       \
    template Tensor<T> selective_scan(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                      const Tensor<T>&, const Tensor<T>&, ZohMode);

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
