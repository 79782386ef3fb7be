#include <algorithm>

#include "tkmamba/ops.hpp"

namespace tkm {

namespace {

struct ConvGeometry {
    std::size_t batch, cin, cout, k, stride, pad;
    std::size_t d, h, w;     // input extents
    std::size_t od, oh, ow;  // output extents

    std::size_t in_plane() const { return d * h * w; }
    std::size_t out_plane() const { return od * oh * ow; }
};

// Output positions o with 0 <= o*stride - pad + tap < extent, as [lo, hi).
std::pair<std::size_t, std::size_t> valid_range(std::size_t out_extent, std::size_t extent, std::size_t stride,
                                                std::size_t pad, std::size_t tap) {
    const long long s = static_cast<long long>(stride);
    const long long shift = static_cast<long long>(tap) - static_cast<long long>(pad);
    long long lo = shift >= 0 ? 0 : (-shift + s - 1) / s;
    long long hi = (static_cast<long long>(extent) - 1 - shift);
    hi = hi < 0 ? 0 : hi / s + 1;
    hi = std::min<long long>(hi, static_cast<long long>(out_extent));
    lo = std::min(lo, hi);
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

ConvGeometry conv_geometry(const Shape& in, const Shape& wt, std::size_t stride, std::size_t pad) {
    if (in.size() != 5) throw ShapeError("conv3d: input must be [B,C,D,H,W], got " + shape_str(in));
    if (wt.size() != 5 || wt[2] != wt[3] || wt[3] != wt[4]) {
        throw ShapeError("conv3d: weight must be [Co,Ci,k,k,k], got " + shape_str(wt));
    }
    if (wt[1] != in[1]) {
        throw ShapeError("conv3d: weight expects " + std::to_string(wt[1]) + " input channels, input has " +
                         std::to_string(in[1]) + " (input " + shape_str(in) + ", weight " + shape_str(wt) + ")");
    }
    if (stride == 0) throw ShapeError("conv3d: stride must be positive");
    ConvGeometry g{in[0], in[1], wt[0], wt[2], stride, pad, in[2], in[3], in[4], 0, 0, 0};
    auto out_extent = [&](std::size_t e) -> std::size_t {
        if (e + 2 * pad < g.k) throw ShapeError("conv3d: kernel larger than padded input " + shape_str(in));
        return (e + 2 * pad - g.k) / stride + 1;
    };
    g.od = out_extent(g.d);
    g.oh = out_extent(g.h);
    g.ow = out_extent(g.w);
    return g;
}

template <typename T>
void conv_forward(const ConvGeometry& g, const T* in, const T* wt, const T* bias, T* out) {
    const std::size_t k3 = g.k * g.k * g.k;
    const long long total = static_cast<long long>(g.batch * g.cout);
#pragma omp parallel for schedule(static)
    for (long long bc = 0; bc < total; ++bc) {
        const std::size_t b = static_cast<std::size_t>(bc) / g.cout;
        const std::size_t co = static_cast<std::size_t>(bc) % g.cout;
        T* oplane = out + (b * g.cout + co) * g.out_plane();
        std::fill_n(oplane, g.out_plane(), bias ? bias[co] : T(0));
        for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const T* iplane = in + (b * g.cin + ci) * g.in_plane();
            const T* wk = wt + (co * g.cin + ci) * k3;
            for (std::size_t kd = 0; kd < g.k; ++kd) {
                const auto [d0, d1] = valid_range(g.od, g.d, g.stride, g.pad, kd);
                for (std::size_t kh = 0; kh < g.k; ++kh) {
                    const auto [h0, h1] = valid_range(g.oh, g.h, g.stride, g.pad, kh);
                    for (std::size_t kw = 0; kw < g.k; ++kw) {
                        const auto [w0, w1] = valid_range(g.ow, g.w, g.stride, g.pad, kw);
                        if (w0 >= w1) continue;
                        const T wv = wk[(kd * g.k + kh) * g.k + kw];
                        if (wv == T(0)) continue;
                        for (std::size_t od = d0; od < d1; ++od) {
                            const std::size_t id = od * g.stride + kd - g.pad;
                            for (std::size_t oh = h0; oh < h1; ++oh) {
                                const std::size_t ih = oh * g.stride + kh - g.pad;
                                T* orow = oplane + (od * g.oh + oh) * g.ow;
                                const T* irow = iplane + (id * g.h + ih) * g.w;
                                if (g.stride == 1) {
                                    const T* src = irow + (w0 + kw - g.pad);
                                    for (std::size_t ow = w0; ow < w1; ++ow) orow[ow] += wv * src[ow - w0];
                                } else {
                                    for (std::size_t ow = w0; ow < w1; ++ow) orow[ow] += wv * irow[ow * g.stride + kw - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv_backward_input(const ConvGeometry& g, const T* gout, const T* wt, T* gin) {
    const std::size_t k3 = g.k * g.k * g.k;
    const long long total = static_cast<long long>(g.batch * g.cin);
#pragma omp parallel for schedule(static)
    for (long long bc = 0; bc < total; ++bc) {
        const std::size_t b = static_cast<std::size_t>(bc) / g.cin;
        const std::size_t ci = static_cast<std::size_t>(bc) % g.cin;
        T* iplane = gin + (b * g.cin + ci) * g.in_plane();
        for (std::size_t co = 0; co < g.cout; ++co) {
            const T* oplane = gout + (b * g.cout + co) * g.out_plane();
            const T* wk = wt + (co * g.cin + ci) * k3;
            for (std::size_t kd = 0; kd < g.k; ++kd) {
                const auto [d0, d1] = valid_range(g.od, g.d, g.stride, g.pad, kd);
                for (std::size_t kh = 0; kh < g.k; ++kh) {
                    const auto [h0, h1] = valid_range(g.oh, g.h, g.stride, g.pad, kh);
                    for (std::size_t kw = 0; kw < g.k; ++kw) {
                        const auto [w0, w1] = valid_range(g.ow, g.w, g.stride, g.pad, kw);
                        if (w0 >= w1) continue;
                        const T wv = wk[(kd * g.k + kh) * g.k + kw];
                        if (wv == T(0)) continue;
                        for (std::size_t od = d0; od < d1; ++od) {
                            const std::size_t id = od * g.stride + kd - g.pad;
                            for (std::size_t oh = h0; oh < h1; ++oh) {
                                const std::size_t ih = oh * g.stride + kh - g.pad;
                                const T* orow = oplane + (od * g.oh + oh) * g.ow;
                                T* irow = iplane + (id * g.h + ih) * g.w;
                                for (std::size_t ow = w0; ow < w1; ++ow) irow[ow * g.stride + kw - g.pad] += wv * orow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv_backward_weight(const ConvGeometry& g, const T* gout, const T* in, T* gw) {
    const std::size_t k3 = g.k * g.k * g.k;
    const long long total = static_cast<long long>(g.cout * g.cin);
#pragma omp parallel for schedule(static)
    for (long long cc = 0; cc < total; ++cc) {
        const std::size_t co = static_cast<std::size_t>(cc) / g.cin;
        const std::size_t ci = static_cast<std::size_t>(cc) % g.cin;
        T* wk = gw + (co * g.cin + ci) * k3;
        for (std::size_t kd = 0; kd < g.k; ++kd) {
            const auto [d0, d1] = valid_range(g.od, g.d, g.stride, g.pad, kd);
            for (std::size_t kh = 0; kh < g.k; ++kh) {
                const auto [h0, h1] = valid_range(g.oh, g.h, g.stride, g.pad, kh);
                for (std::size_t kw = 0; kw < g.k; ++kw) {
                    const auto [w0, w1] = valid_range(g.ow, g.w, g.stride, g.pad, kw);
                        if (w0 >= w1) continue;
                    T acc = 0;
                    for (std::size_t b = 0; b < g.batch; ++b) {
                        const T* oplane = gout + (b * g.cout + co) * g.out_plane();
                        const T* iplane = in + (b * g.cin + ci) * g.in_plane();
                        for (std::size_t od = d0; od < d1; ++od) {
                            const std::size_t id = od * g.stride + kd - g.pad;
                            for (std::size_t oh = h0; oh < h1; ++oh) {
                                const std::size_t ih = oh * g.stride + kh - g.pad;
                                const T* orow = oplane + (od * g.oh + oh) * g.ow;
                                const T* irow = iplane + (id * g.h + ih) * g.w;
                                for (std::size_t ow = w0; ow < w1; ++ow) acc += orow[ow] * irow[ow * g.stride + kw - g.pad];
                            }
                        }
                    }
                    wk[(kd * g.k + kh) * g.k + kw] += acc;
                }
            }
        }
    }
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& weight, BiasPtr<T> bias, std::size_t stride,
                 std::size_t padding) {
    const ConvGeometry g = conv_geometry(input.shape(), weight.shape(), stride, padding);
    if (bias && bias->numel() != g.cout) {
        throw ShapeError("conv3d: bias has " + std::to_string(bias->numel()) + " entries, expected " +
                         std::to_string(g.cout));
    }
    std::vector<T> out(g.batch * g.cout * g.out_plane());
    conv_forward(g, input.storage().data(), weight.storage().data(), bias ? bias->storage().data() : nullptr,
                 out.data());
    std::vector<Tensor<T>> parents{input, weight};
    if (bias) parents.push_back(*bias);
    return make_result<T>(Shape{g.batch, g.cout, g.od, g.oh, g.ow}, std::move(out), parents,
                          [g](detail::TensorNode<T>& self) {
                              auto& pi = self.parents[0];
                              auto& pw = self.parents[1];
                              if (pi->requires_grad)
                                  conv_backward_input(g, self.grad.data(), pw->data.data(), pi->ensure_grad().data());
                              if (pw->requires_grad)
                                  conv_backward_weight(g, self.grad.data(), pi->data.data(), pw->ensure_grad().data());
                              if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                                  auto& gb = self.parents[2]->ensure_grad();
                                  const std::size_t plane = g.out_plane();
                                  for (std::size_t b = 0; b < g.batch; ++b)
                                      for (std::size_t co = 0; co < g.cout; ++co) {
                                          T acc = 0;
                                          const T* p = self.grad.data() + (b * g.cout + co) * plane;
                                          for (std::size_t s = 0; s < plane; ++s) acc += p[s];
                                          gb[co] += acc;
                                      }
                              }
                          });
}

template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& input, const Tensor<T>& weight, BiasPtr<T> bias,
                           std::size_t stride) {
    const auto& in = input.shape();
    const auto& wt = weight.shape();
    if (in.size() != 5) throw ShapeError("conv_transpose3d: input must be [B,C,D,H,W], got " + shape_str(in));
    if (wt.size() != 5 || wt[0] != in[1] || wt[2] != stride || wt[3] != stride || wt[4] != stride) {
        throw ShapeError("conv_transpose3d: weight " + shape_str(wt) + " incompatible with input " + shape_str(in) +
                         " and stride " + std::to_string(stride));
    }
    const std::size_t batch = in[0], cin = in[1], cout = wt[1], s = stride;
    const std::size_t d = in[2], h = in[3], w = in[4];
    const std::size_t od = d * s, oh = h * s, ow = w * s;
    if (bias && bias->numel() != cout) throw ShapeError("conv_transpose3d: bias length mismatch");
    const std::size_t s3 = s * s * s;
    const std::size_t iplane = d * h * w, oplane = od * oh * ow;
    const auto& xs = input.storage();
    const auto& ws = weight.storage();
    std::vector<T> out(batch * cout * oplane);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t co = 0; co < cout; ++co) {
            T* op = out.data() + (b * cout + co) * oplane;
            std::fill_n(op, oplane, bias ? bias->storage()[co] : T(0));
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const T* ip = xs.data() + (b * cin + ci) * iplane;
                const T* wk = ws.data() + (ci * cout + co) * s3;
                for (std::size_t z = 0; z < d; ++z)
                    for (std::size_t y = 0; y < h; ++y)
                        for (std::size_t x = 0; x < w; ++x) {
                            const T v = ip[(z * h + y) * w + x];
                            for (std::size_t a = 0; a < s; ++a)
                                for (std::size_t bb = 0; bb < s; ++bb)
                                    for (std::size_t c = 0; c < s; ++c)
                                        op[((z * s + a) * oh + y * s + bb) * ow + x * s + c] += v * wk[(a * s + bb) * s + c];
                        }
            }
        }
    std::vector<Tensor<T>> parents{input, weight};
    if (bias) parents.push_back(*bias);
    return make_result<T>(
        Shape{batch, cout, od, oh, ow}, std::move(out), parents,
        [=](detail::TensorNode<T>& self) {
            auto& px = self.parents[0];
            auto& pw = self.parents[1];
            const auto& g = self.grad;
            std::vector<T>* gx = px->requires_grad ? &px->ensure_grad() : nullptr;
            std::vector<T>* gw = pw->requires_grad ? &pw->ensure_grad() : nullptr;
            for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t co = 0; co < cout; ++co) {
                    const T* gp = g.data() + (b * cout + co) * oplane;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const std::size_t ibase = (b * cin + ci) * iplane;
                        const std::size_t wbase = (ci * cout + co) * s3;
                        for (std::size_t z = 0; z < d; ++z)
                            for (std::size_t y = 0; y < h; ++y)
                                for (std::size_t x = 0; x < w; ++x) {
                                    const std::size_t ii = ibase + (z * h + y) * w + x;
                                    T acc = 0;
                                    for (std::size_t a = 0; a < s; ++a)
                                        for (std::size_t bb = 0; bb < s; ++bb)
                                            for (std::size_t c = 0; c < s; ++c) {
                                                const T go = gp[((z * s + a) * oh + y * s + bb) * ow + x * s + c];
                                                const std::size_t wi = wbase + (a * s + bb) * s + c;
                                                acc += go * pw->data[wi];
                                                if (gw) (*gw)[wi] += go * px->data[ii];
                                            }
                                    if (gx) (*gx)[ii] += acc;
                                }
                    }
                }
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                auto& gb = self.parents[2]->ensure_grad();
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t co = 0; co < cout; ++co) {
                        T acc = 0;
                        const T* gp = g.data() + (b * cout + co) * oplane;
                        for (std::size_t q = 0; q < oplane; ++q) acc += gp[q];
                        gb[co] += acc;
                    }
            }
        });
}

template <typename T>
Tensor<T> causal_depthwise_conv1d(const Tensor<T>& input, const Tensor<T>& weight, BiasPtr<T> bias) {
    const auto& in = input.shape();
    if (in.size() != 3) throw ShapeError("causal_depthwise_conv1d: input must be [B,L,C], got " + shape_str(in));
    const std::size_t batch = in[0], len = in[1], ch = in[2];
    if (weight.ndim() != 2 || weight.dim(0) != ch) {
        throw ShapeError("causal_depthwise_conv1d: weight " + shape_str(weight.shape()) + " for " + std::to_string(ch) +
                         " channels");
    }
    if (bias && bias->numel() != ch) throw ShapeError("causal_depthwise_conv1d: bias length mismatch");
    const std::size_t k = weight.dim(1);
    const auto& xs = input.storage();
    const auto& ws = weight.storage();
    std::vector<T> out(xs.size());
    // out[t,c] = bias[c] + sum_j w[c,j] * x[t - (k-1) + j, c]
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < len; ++t)
            for (std::size_t c = 0; c < ch; ++c) {
                T acc = bias ? bias->storage()[c] : T(0);
                for (std::size_t j = 0; j < k; ++j) {
                    if (t + j + 1 < k) continue;
                    const std::size_t src = t + j + 1 - k;
                    acc += ws[c * k + j] * xs[(b * len + src) * ch + c];
                }
                out[(b * len + t) * ch + c] = acc;
            }
    std::vector<Tensor<T>> parents{input, weight};
    if (bias) parents.push_back(*bias);
    return make_result<T>(in, std::move(out), parents, [batch, len, ch, k](detail::TensorNode<T>& self) {
        auto& px = self.parents[0];
        auto& pw = self.parents[1];
        std::vector<T>* gx = px->requires_grad ? &px->ensure_grad() : nullptr;
        std::vector<T>* gw = pw->requires_grad ? &pw->ensure_grad() : nullptr;
        std::vector<T>* gb = self.parents.size() > 2 && self.parents[2]->requires_grad ? &self.parents[2]->ensure_grad()
                                                                                       : nullptr;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < len; ++t)
                for (std::size_t c = 0; c < ch; ++c) {
                    const T go = self.grad[(b * len + t) * ch + c];
                    if (gb) (*gb)[c] += go;
                    for (std::size_t j = 0; j < k; ++j) {
                        if (t + j + 1 < k) continue;
                        const std::size_t src = (b * len + t + j + 1 - k) * ch + c;
                        if (gx) (*gx)[src] += go * pw->data[c * k + j];
                        if (gw) (*gw)[c * k + j] += go * px->data[src];
                    }
                }
    });
}

#define TKM_INSTANTIATE(T)                                                                                    \
    template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, std::size_t, std::size_t); \
    template Tensor<T> conv_transpose3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*, std::size_t);    \
    template Tensor<T> causal_depthwise_conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*);

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
