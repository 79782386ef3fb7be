#include "tkmamba/metrics.hpp"

#include <cmath>

#include "tkmamba/ops.hpp"
#include "tkmamba/textbridge.hpp"

namespace tkm {

namespace {

template <typename T>
void check_binary(const Tensor<T>& t, const char* what) {
    for (T v : t.data())
        if (v != T(0) && v != T(1)) throw ValidationError(std::string(what) + ": target must be binary");
}

}  // namespace

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& logits, const Tensor<T>& target, double smooth) {
    if (logits.shape() != target.shape()) {
        throw ShapeError("dice_loss: logits " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
    }
    if (logits.ndim() < 3) throw ShapeError("dice_loss: expected [B,K,...]");
    check_binary(target, "dice_loss");
    const std::size_t rows = logits.dim(0) * logits.dim(1);
    const std::size_t per = logits.numel() / rows;
    auto p = reshape(sigmoid(logits), {rows, per});
    auto t = reshape(target, {rows, per});
    auto inter = sum_axis(mul(p, t), 1);
    auto denom = add_scalar(add(sum_axis(p, 1), sum_axis(t, 1)), static_cast<T>(smooth));
    auto dice = div(add_scalar(mul_scalar(inter, T(2)), static_cast<T>(smooth)), denom);
    return add_scalar(neg(mean(dice)), T(1));
}

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& logits, const Tensor<T>& target) {
    if (logits.shape() != target.shape()) {
        throw ShapeError("bce_loss: logits " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
    }
    check_binary(target, "bce_loss");
    return bce_with_logits(logits, target);
}

template <typename T>
LossBreakdown<T> total_loss(const Tensor<T>& seg_logits, const Tensor<T>& target, const Tensor<T>& S,
                            const Tensor<T>& Y, const LossWeights& w) {
    if (w.bce < 0 || w.dice < 0 || w.contrast < 0) throw ValidationError("loss weights must be non-negative");
    LossBreakdown<T> out;
    auto lb = bce_loss(seg_logits, target);
    auto ld = dice_loss(seg_logits, target);
    out.bce = static_cast<double>(lb.item());
    out.dice = static_cast<double>(ld.item());
    out.total = add(mul_scalar(lb, static_cast<T>(w.bce)), mul_scalar(ld, static_cast<T>(w.dice)));
    if (S.numel() > 0) {
        auto lc = contrastive_loss(S, Y);
        out.contrast = static_cast<double>(lc.item());
        out.total = add(out.total, mul_scalar(lc, static_cast<T>(w.contrast)));
    }
    return out;
}

double dice_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
    if (pred.size() != gt.size()) throw ShapeError("dice: mask sizes differ");
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        p += pred[i] != 0;
        g += gt[i] != 0;
        both += pred[i] != 0 && gt[i] != 0;
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<std::size_t> surface_voxels(std::span<const std::uint8_t> mask, const Extent3& shape) {
    const std::size_t D = shape[0], H = shape[1], W = shape[2];
    if (mask.size() != D * H * W) throw ShapeError("surface_voxels: mask size does not match shape");
    auto on = [&](std::size_t d, std::size_t h, std::size_t w) { return mask[(d * H + h) * W + w] != 0; };
    std::vector<std::size_t> out;
    for (std::size_t d = 0; d < D; ++d)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t w = 0; w < W; ++w) {
                if (!on(d, h, w)) continue;
                const bool interior = d > 0 && d + 1 < D && h > 0 && h + 1 < H && w > 0 && w + 1 < W && on(d - 1, h, w) &&
                                      on(d + 1, h, w) && on(d, h - 1, w) && on(d, h + 1, w) && on(d, h, w - 1) &&
                                      on(d, h, w + 1);
                if (!interior) out.push_back((d * H + h) * W + w);
            }
    return out;
}

namespace {

// Number of points in `from` with some point of `to` within tol (squared mm).
std::size_t count_within(const std::vector<std::array<double, 3>>& from, const std::vector<std::array<double, 3>>& to,
                         double tol2) {
    std::size_t hits = 0;
#pragma omp parallel for reduction(+ : hits) schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(from.size()); ++i) {
        const auto& a = from[static_cast<std::size_t>(i)];
        for (const auto& b : to) {
            const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
            if (dx * dx + dy * dy + dz * dz <= tol2) {
                ++hits;
                break;
            }
        }
    }
    return hits;
}

std::vector<std::array<double, 3>> to_mm(const std::vector<std::size_t>& idx, const Extent3& shape, const Spacing3& sp) {
    std::vector<std::array<double, 3>> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) {
        const std::size_t w = i % shape[2], h = (i / shape[2]) % shape[1], d = i / (shape[1] * shape[2]);
        out.push_back({static_cast<double>(d) * sp[0], static_cast<double>(h) * sp[1], static_cast<double>(w) * sp[2]});
    }
    return out;
}

}  // namespace

double nsd_score(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, const Extent3& shape,
                 const Spacing3& spacing_mm, double tolerance_mm) {
    if (pred.size() != gt.size()) throw ShapeError("nsd: mask sizes differ");
    for (double s : spacing_mm)
        if (!(s > 0.0)) throw ValidationError("nsd: spacing must be positive");
    if (!(tolerance_mm > 0.0)) throw ValidationError("nsd: tolerance must be positive");
    const auto sp = to_mm(surface_voxels(pred, shape), shape, spacing_mm);
    const auto sg = to_mm(surface_voxels(gt, shape), shape, spacing_mm);
    if (sp.empty() && sg.empty()) return 1.0;
    if (sp.empty() || sg.empty()) return 0.0;
    const double tol2 = tolerance_mm * tolerance_mm;
    const std::size_t hits = count_within(sp, sg, tol2) + count_within(sg, sp, tol2);
    return static_cast<double>(hits) / static_cast<double>(sp.size() + sg.size());
}

namespace {

void check_pair(const LabelVolume& pred, const LabelVolume& gt) {
    if (pred.classes != gt.classes || pred.shape != gt.shape) throw ShapeError("metrics: prediction and truth grids differ");
}

std::span<const std::uint8_t> channel(const LabelVolume& l, std::size_t k) {
    return std::span<const std::uint8_t>(l.data).subspan(k * l.voxels(), l.voxels());
}

}  // namespace

std::vector<double> dice_metric(const LabelVolume& pred, const LabelVolume& gt) {
    check_pair(pred, gt);
    std::vector<double> out;
    for (std::size_t k = 0; k < gt.classes; ++k) out.push_back(dice_score(channel(pred, k), channel(gt, k)));
    return out;
}

std::vector<double> nsd_metric(const LabelVolume& pred, const LabelVolume& gt, double tolerance_mm) {
    check_pair(pred, gt);
    std::vector<double> out;
    for (std::size_t k = 0; k < gt.classes; ++k) {
        out.push_back(nsd_score(channel(pred, k), channel(gt, k), gt.shape, gt.spacing_mm, tolerance_mm));
    }
    return out;
}

template <typename T>
LabelVolume masks_from_logits(const Tensor<T>& logits, const Spacing3& spacing_mm, const std::string& orientation) {
    const bool batched = logits.ndim() == 5;
    if (!(batched && logits.dim(0) == 1) && logits.ndim() != 4) {
        throw ShapeError("masks_from_logits: expected [1,K,D,H,W] or [K,D,H,W], got " + shape_str(logits.shape()));
    }
    const std::size_t o = batched ? 1 : 0;
    LabelVolume l = make_labels(logits.dim(o), {logits.dim(o + 1), logits.dim(o + 2), logits.dim(o + 3)}, spacing_mm,
                                orientation);
    for (std::size_t i = 0; i < l.data.size(); ++i) l.data[i] = logits.at(i) > T(0) ? 1 : 0;
    return l;
}

#define TKM_INSTANTIATE(T)                                                                                   \
    template Tensor<T> dice_loss(const Tensor<T>&, const Tensor<T>&, double);                               \
    template Tensor<T> bce_loss(const Tensor<T>&, const Tensor<T>&);                                        \
    template struct LossBreakdown<T>;                                                                       \
    template LossBreakdown<T> total_loss(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                         const LossWeights&);                                               \
    template LabelVolume masks_from_logits(const Tensor<T>&, const Spacing3&, const std::string&);

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
