#include "tkmamba/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

namespace tkm {

using nlohmann::json;

template <typename T>
Tensor<T> Volume::tensor() const {
    std::vector<T> v(data.begin(), data.end());
    return Tensor<T>::from_data({1, shape[0], shape[1], shape[2]}, std::move(v));
}

std::size_t LabelVolume::count(std::size_t k) const {
    const std::size_t n = voxels();
    return static_cast<std::size_t>(std::count_if(data.begin() + k * n, data.begin() + (k + 1) * n,
                                                  [](std::uint8_t x) { return x != 0; }));
}

std::vector<int> LabelVolume::presence() const {
    std::vector<int> y(classes);
    for (std::size_t k = 0; k < classes; ++k) y[k] = count(k) > 0 ? 1 : 0;
    return y;
}

template <typename T>
Tensor<T> LabelVolume::tensor() const {
    std::vector<T> v(data.begin(), data.end());
    return Tensor<T>::from_data({classes, shape[0], shape[1], shape[2]}, std::move(v));
}

Volume make_volume(const Extent3& shape, float fill, const Spacing3& spacing, const std::string& orientation) {
    Volume v;
    v.shape = shape;
    v.data.assign(shape[0] * shape[1] * shape[2], fill);
    v.spacing_mm = spacing;
    v.orientation = orientation;
    return v;
}

LabelVolume make_labels(std::size_t classes, const Extent3& shape, const Spacing3& spacing,
                        const std::string& orientation) {
    LabelVolume l;
    l.classes = classes;
    l.shape = shape;
    l.data.assign(classes * shape[0] * shape[1] * shape[2], 0);
    l.spacing_mm = spacing;
    l.orientation = orientation;
    return l;
}

namespace {

void check_geometry(const Extent3& shape, const Spacing3& spacing, const std::string& orientation, const char* what) {
    for (std::size_t i = 0; i < 3; ++i) {
        if (shape[i] == 0) throw ValidationError(std::string(what) + ": empty extent");
        if (!(spacing[i] > 0.0) || !std::isfinite(spacing[i])) {
            throw ValidationError(std::string(what) + ": spacing must be positive");
        }
    }
    if (!valid_orientation(orientation)) {
        throw ValidationError(std::string(what) + ": invalid orientation code '" + orientation + "'");
    }
}

int axis_family(char c) {
    switch (c) {
        case 'R': case 'L': return 0;
        case 'A': case 'P': return 1;
        case 'S': case 'I': return 2;
        default: return -1;
    }
}

// Remaps `channels` stacked [D,H,W] grids through an axis map.
template <typename E>
std::vector<E> remap_axes(const std::vector<E>& in, std::size_t channels, const Extent3& shape, const AxisMap& m,
                          Extent3& out_shape) {
    for (std::size_t j = 0; j < 3; ++j) out_shape[j] = shape[m.source[j]];
    const std::size_t n = shape[0] * shape[1] * shape[2];
    const std::array<std::size_t, 3> in_stride{shape[1] * shape[2], shape[2], 1};
    std::vector<E> out(in.size());
    std::array<std::size_t, 3> o{};
    std::size_t idx = 0;
    for (o[0] = 0; o[0] < out_shape[0]; ++o[0])
        for (o[1] = 0; o[1] < out_shape[1]; ++o[1])
            for (o[2] = 0; o[2] < out_shape[2]; ++o[2], ++idx) {
                std::size_t src = 0;
                for (std::size_t j = 0; j < 3; ++j) {
                    const std::size_t i = m.source[j];
                    src += (m.flip[j] ? shape[i] - 1 - o[j] : o[j]) * in_stride[i];
                }
                for (std::size_t c = 0; c < channels; ++c) out[c * n + idx] = in[c * n + src];
            }
    return out;
}

template <typename E>
std::vector<E> rotate_plane(const std::vector<E>& in, std::size_t channels, const Extent3& shape, Extent3& out_shape) {
    // one quarter turn: out(a, b, w) = in(D-1-b, a, w)
    out_shape = {shape[1], shape[0], shape[2]};
    const std::size_t n = shape[0] * shape[1] * shape[2];
    std::vector<E> out(in.size());
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t a = 0; a < out_shape[0]; ++a)
            for (std::size_t b = 0; b < out_shape[1]; ++b)
                for (std::size_t w = 0; w < shape[2]; ++w) {
                    out[c * n + (a * out_shape[1] + b) * shape[2] + w] =
                        in[c * n + ((shape[0] - 1 - b) * shape[1] + a) * shape[2] + w];
                }
    return out;
}

template <typename E>
std::vector<E> crop_grid(const std::vector<E>& in, std::size_t channels, const Extent3& shape, const CropPlan& p) {
    const std::size_t n_in = shape[0] * shape[1] * shape[2];
    const std::size_t n_out = p.size[0] * p.size[1] * p.size[2];
    std::vector<E> out(channels * n_out, E(0));
    auto inside = [&](std::size_t axis, std::size_t o, std::size_t& src) {
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(o) + p.offset[axis];
        if (s < 0 || s >= static_cast<std::ptrdiff_t>(shape[axis])) return false;
        src = static_cast<std::size_t>(s);
        return true;
    };
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t d = 0; d < p.size[0]; ++d) {
            std::size_t sd;
            if (!inside(0, d, sd)) continue;
            for (std::size_t h = 0; h < p.size[1]; ++h) {
                std::size_t sh;
                if (!inside(1, h, sh)) continue;
                for (std::size_t w = 0; w < p.size[2]; ++w) {
                    std::size_t sw;
                    if (!inside(2, w, sw)) continue;
                    out[c * n_out + (d * p.size[1] + h) * p.size[2] + w] = in[c * n_in + (sd * shape[1] + sh) * shape[2] + sw];
                }
            }
        }
    return out;
}

struct AxisSamples {
    std::vector<std::size_t> i0, i1, nearest;
    std::vector<double> frac;
};

AxisSamples axis_samples(std::size_t n_in, std::size_t n_out, double ratio) {
    AxisSamples s;
    s.i0.resize(n_out);
    s.i1.resize(n_out);
    s.nearest.resize(n_out);
    s.frac.resize(n_out);
    const double last = static_cast<double>(n_in - 1);
    for (std::size_t j = 0; j < n_out; ++j) {
        const double x = std::min(static_cast<double>(j) * ratio, last);
        const double f = std::floor(x);
        s.i0[j] = static_cast<std::size_t>(f);
        s.i1[j] = std::min(s.i0[j] + 1, n_in - 1);
        s.frac[j] = x - f;
        s.nearest[j] = std::min(static_cast<std::size_t>(std::lround(x)), n_in - 1);
    }
    return s;
}

}  // namespace

void validate_volume(const Volume& v) {
    check_geometry(v.shape, v.spacing_mm, v.orientation, "volume");
    if (v.data.size() != v.voxels()) throw ValidationError("volume: data size does not match shape");
}

void validate_labels(const LabelVolume& l) {
    check_geometry(l.shape, l.spacing_mm, l.orientation, "labels");
    if (l.classes == 0) throw ValidationError("labels: need at least one class");
    if (l.data.size() != l.classes * l.voxels()) throw ValidationError("labels: data size does not match shape");
    for (auto x : l.data)
        if (x > 1) throw ValidationError("labels: values must be 0 or 1");
}

bool valid_orientation(const std::string& code) {
    if (code.size() != 3) return false;
    std::array<bool, 3> seen{};
    for (char c : code) {
        const int f = axis_family(c);
        if (f < 0 || seen[f]) return false;
        seen[f] = true;
    }
    return true;
}

AxisMap orientation_map(const std::string& from, const std::string& to) {
    if (!valid_orientation(from)) throw ValidationError("invalid orientation code '" + from + "'");
    if (!valid_orientation(to)) throw ValidationError("invalid orientation code '" + to + "'");
    AxisMap m;
    for (std::size_t j = 0; j < 3; ++j)
        for (std::size_t i = 0; i < 3; ++i)
            if (axis_family(from[i]) == axis_family(to[j])) {
                m.source[j] = i;
                m.flip[j] = from[i] != to[j];
            }
    return m;
}

Volume reorient(const Volume& v, const std::string& target) {
    validate_volume(v);
    const auto m = orientation_map(v.orientation, target);
    Volume out;
    out.data = remap_axes(v.data, 1, v.shape, m, out.shape);
    for (std::size_t j = 0; j < 3; ++j) out.spacing_mm[j] = v.spacing_mm[m.source[j]];
    out.orientation = target;
    return out;
}

LabelVolume reorient(const LabelVolume& l, const std::string& target) {
    validate_labels(l);
    const auto m = orientation_map(l.orientation, target);
    LabelVolume out;
    out.classes = l.classes;
    out.data = remap_axes(l.data, l.classes, l.shape, m, out.shape);
    for (std::size_t j = 0; j < 3; ++j) out.spacing_mm[j] = l.spacing_mm[m.source[j]];
    out.orientation = target;
    return out;
}

Extent3 resampled_extent(const Extent3& shape, const Spacing3& from, const Spacing3& to) {
    Extent3 out;
    for (std::size_t i = 0; i < 3; ++i) {
        if (!(to[i] > 0.0) || !(from[i] > 0.0)) throw ValidationError("resample: spacing must be positive");
        const double n = std::round(static_cast<double>(shape[i]) * from[i] / to[i]);
        out[i] = std::max<std::size_t>(1, static_cast<std::size_t>(n));
    }
    return out;
}

Volume resample(const Volume& v, const Spacing3& spacing, Interp mode) {
    validate_volume(v);
    Volume out;
    out.shape = resampled_extent(v.shape, v.spacing_mm, spacing);
    out.spacing_mm = spacing;
    out.orientation = v.orientation;
    out.data.resize(out.voxels());
    std::array<AxisSamples, 3> ax;
    for (std::size_t i = 0; i < 3; ++i) ax[i] = axis_samples(v.shape[i], out.shape[i], spacing[i] / v.spacing_mm[i]);
    std::size_t idx = 0;
    for (std::size_t d = 0; d < out.shape[0]; ++d)
        for (std::size_t h = 0; h < out.shape[1]; ++h)
            for (std::size_t w = 0; w < out.shape[2]; ++w, ++idx) {
                if (mode == Interp::Nearest) {
                    out.data[idx] = v.at(ax[0].nearest[d], ax[1].nearest[h], ax[2].nearest[w]);
                    continue;
                }
                const double fd = ax[0].frac[d], fh = ax[1].frac[h], fw = ax[2].frac[w];
                auto lerp_w = [&](std::size_t a, std::size_t b) {
                    return (1.0 - fw) * v.at(a, b, ax[2].i0[w]) + fw * v.at(a, b, ax[2].i1[w]);
                };
                auto lerp_hw = [&](std::size_t a) {
                    return (1.0 - fh) * lerp_w(a, ax[1].i0[h]) + fh * lerp_w(a, ax[1].i1[h]);
                };
                out.data[idx] = static_cast<float>((1.0 - fd) * lerp_hw(ax[0].i0[d]) + fd * lerp_hw(ax[0].i1[d]));
            }
    return out;
}

LabelVolume resample(const LabelVolume& l, const Spacing3& spacing) {
    validate_labels(l);
    LabelVolume out;
    out.classes = l.classes;
    out.shape = resampled_extent(l.shape, l.spacing_mm, spacing);
    out.spacing_mm = spacing;
    out.orientation = l.orientation;
    out.data.resize(l.classes * out.voxels());
    std::array<AxisSamples, 3> ax;
    for (std::size_t i = 0; i < 3; ++i) ax[i] = axis_samples(l.shape[i], out.shape[i], spacing[i] / l.spacing_mm[i]);
    std::size_t idx = 0;
    for (std::size_t k = 0; k < l.classes; ++k)
        for (std::size_t d = 0; d < out.shape[0]; ++d)
            for (std::size_t h = 0; h < out.shape[1]; ++h)
                for (std::size_t w = 0; w < out.shape[2]; ++w, ++idx)
                    out.data[idx] = l.at(k, ax[0].nearest[d], ax[1].nearest[h], ax[2].nearest[w]);
    return out;
}

Volume window_normalize(const Volume& v, const IntensityWindow& window) {
    if (!(window.lo < window.hi)) throw ValidationError("window: lo must be below hi");
    Volume out = v;
    const double span = window.hi - window.lo;
    for (auto& x : out.data) x = static_cast<float>(std::clamp((static_cast<double>(x) - window.lo) / span, 0.0, 1.0));
    return out;
}

CropPlan plan_crop(const Extent3& shape, const Extent3& size, CropMode mode, Rng* rng) {
    CropPlan p;
    p.size = size;
    for (std::size_t i = 0; i < 3; ++i) {
        if (size[i] == 0) throw ValidationError("crop: target extents must be positive");
        if (shape[i] >= size[i]) {
            const std::size_t slack = shape[i] - size[i];
            if (mode == CropMode::Random) {
                if (!rng) throw ValidationError("crop: random mode needs a generator");
                p.offset[i] = static_cast<std::ptrdiff_t>(rng->below(slack + 1));
            } else {
                p.offset[i] = static_cast<std::ptrdiff_t>(slack / 2);
            }
        } else {
            p.offset[i] = -static_cast<std::ptrdiff_t>((size[i] - shape[i]) / 2);
        }
    }
    return p;
}

Volume apply_crop(const Volume& v, const CropPlan& plan) {
    Volume out;
    out.shape = plan.size;
    out.spacing_mm = v.spacing_mm;
    out.orientation = v.orientation;
    out.data = crop_grid(v.data, 1, v.shape, plan);
    return out;
}

LabelVolume apply_crop(const LabelVolume& l, const CropPlan& plan) {
    LabelVolume out;
    out.classes = l.classes;
    out.shape = plan.size;
    out.spacing_mm = l.spacing_mm;
    out.orientation = l.orientation;
    out.data = crop_grid(l.data, l.classes, l.shape, plan);
    return out;
}

Volume rotate90(const Volume& v, int quarter_turns) {
    Volume out = v;
    for (int t = 0; t < ((quarter_turns % 4) + 4) % 4; ++t) {
        Extent3 s;
        out.data = rotate_plane(out.data, 1, out.shape, s);
        out.shape = s;
        std::swap(out.spacing_mm[0], out.spacing_mm[1]);
    }
    return out;
}

LabelVolume rotate90(const LabelVolume& l, int quarter_turns) {
    LabelVolume out = l;
    for (int t = 0; t < ((quarter_turns % 4) + 4) % 4; ++t) {
        Extent3 s;
        out.data = rotate_plane(out.data, out.classes, out.shape, s);
        out.shape = s;
        std::swap(out.spacing_mm[0], out.spacing_mm[1]);
    }
    return out;
}

std::pair<Volume, LabelVolume> augment(const Volume& v, const LabelVolume& l, const AugmentConfig& config, Rng& rng) {
    if (v.shape != l.shape) throw ShapeError("augment: image and label grids differ");
    Volume img = v;
    LabelVolume lab = l;
    const Extent3 size = v.shape;
    if (config.zoom) {
        if (!(config.zoom_min > 0.0) || config.zoom_min > config.zoom_max) throw ValidationError("augment: bad zoom range");
        const double z = rng.uniform(config.zoom_min, config.zoom_max);
        Spacing3 s;
        for (std::size_t i = 0; i < 3; ++i) s[i] = img.spacing_mm[i] / z;
        img = resample(img, s, Interp::Trilinear);
        lab = resample(lab, s);
        img.spacing_mm = lab.spacing_mm = v.spacing_mm;
    }
    if (config.rotate) {
        const int turns = static_cast<int>(rng.below(4));
        img = rotate90(img, turns);
        lab = rotate90(lab, turns);
    }
    if (img.shape != size) {
        const auto plan = plan_crop(img.shape, size, CropMode::Center);
        img = apply_crop(img, plan);
        lab = apply_crop(lab, plan);
    }
    if (config.intensity_shift) {
        const double shift = rng.uniform(-config.shift_range, config.shift_range);
        for (auto& x : img.data) x = static_cast<float>(std::clamp(static_cast<double>(x) + shift, 0.0, 1.0));
    }
    return {std::move(img), std::move(lab)};
}

void validate_preprocess_config(const PreprocessConfig& c) {
    for (std::size_t i = 0; i < 3; ++i) {
        if (!(c.target_spacing_mm[i] > 0.0)) throw ValidationError("preprocess: target spacing must be positive");
        if (c.crop_size[i] == 0) throw ValidationError("preprocess: crop size must be positive");
    }
    if (!(c.window.lo < c.window.hi)) throw ValidationError("preprocess: window lo must be below hi");
    if (!valid_orientation(c.orientation)) throw ValidationError("preprocess: invalid orientation '" + c.orientation + "'");
}

std::pair<Volume, LabelVolume> preprocess(const Volume& v, const LabelVolume& l, const PreprocessConfig& config,
                                          Rng* rng) {
    validate_preprocess_config(config);
    if (v.shape != l.shape) throw ShapeError("preprocess: image and label grids differ");
    if ((config.crop_mode == CropMode::Random || config.augment.any()) && !rng) {
        throw ValidationError("preprocess: random crop or augmentation needs a generator");
    }
    auto img = window_normalize(resample(reorient(v, config.orientation), config.target_spacing_mm), config.window);
    auto lab = resample(reorient(l, config.orientation), config.target_spacing_mm);
    const auto plan = plan_crop(img.shape, config.crop_size, config.crop_mode, rng);
    img = apply_crop(img, plan);
    lab = apply_crop(lab, plan);
    if (config.augment.any()) return augment(img, lab, config.augment, *rng);
    return {std::move(img), std::move(lab)};
}

// ---- synthetic data --------------------------------------------------------

std::vector<std::string> synth_class_names(std::size_t classes) {
    std::vector<std::string> names;
    for (std::size_t k = 0; k < classes; ++k) {
        names.push_back(k == 0 ? "organ" : k == 1 ? "tumor" : "organ" + std::to_string(k));
    }
    return names;
}

namespace {

struct Ellipsoid {
    std::array<double, 3> c{}, r{};
    bool contains(double d, double h, double w) const {
        const double a = (d - c[0]) / r[0], b = (h - c[1]) / r[1], e = (w - c[2]) / r[2];
        return a * a + b * b + e * e <= 1.0;
    }
};

constexpr double kBackgroundHu = -80.0;
constexpr double kOrganHu = 60.0;
constexpr double kTumorHu = 150.0;
constexpr int kPlacementAttempts = 100;

double extra_organ_hu(std::size_t k) { return k % 2 == 0 ? 220.0 : -30.0; }

}  // namespace

SynthDataset synth_generate(const SynthConfig& cfg) {
    if (cfg.classes < 2) throw ValidationError("synth: need at least 2 classes (organ and tumor)");
    for (std::size_t i = 0; i < 3; ++i)
        if (cfg.size[i] < 8) throw ValidationError("synth: size too small to place shapes (need >= 8 per axis)");
    SynthDataset ds;
    ds.class_names = synth_class_names(cfg.classes);
    const Extent3 n = cfg.size;
    for (std::size_t ci = 0; ci < cfg.volumes; ++ci) {
        Rng rng(mix_seed(cfg.seed, ci));
        SynthCase sc;
        char id[32];
        std::snprintf(id, sizeof id, "case_%03zu", ci);
        sc.id = id;
        sc.image = make_volume(n, 0.0f, cfg.spacing_mm, cfg.orientation);
        sc.label = make_labels(cfg.classes, n, cfg.spacing_mm, cfg.orientation);

        Ellipsoid organ;
        for (std::size_t i = 0; i < 3; ++i) {
            const double len = static_cast<double>(n[i]);
            organ.c[i] = 0.5 * (len - 1.0) + rng.uniform(-0.08, 0.08) * len;
            organ.r[i] = std::max(2.0, rng.uniform(0.22, 0.32) * len);
        }
        bool has_tumor = rng.uniform() < cfg.tumor_probability;
        Ellipsoid tumor;
        if (has_tumor) {
            const double rt = std::max(1.0, rng.uniform(0.3, 0.45) * *std::min_element(organ.r.begin(), organ.r.end()));
            tumor.r = {rt, rt, rt};
            // integer center inside the organ keeps at least one voxel
            for (int a = 0; a < kPlacementAttempts; ++a) {
                for (std::size_t i = 0; i < 3; ++i) {
                    tumor.c[i] = std::round(organ.c[i] + rng.uniform(-0.5, 0.5) * std::max(0.0, organ.r[i] - rt));
                }
                if (organ.contains(tumor.c[0], tumor.c[1], tumor.c[2])) break;
                tumor.c = {std::round(organ.c[0]), std::round(organ.c[1]), std::round(organ.c[2])};
            }
        }
        std::vector<std::pair<std::size_t, Ellipsoid>> extras;
        for (std::size_t k = 2; k < cfg.classes; ++k) {
            if (rng.uniform() >= cfg.tumor_probability) continue;
            for (int a = 0; a < kPlacementAttempts; ++a) {
                Ellipsoid e;
                for (std::size_t i = 0; i < 3; ++i) {
                    const double len = static_cast<double>(n[i]);
                    e.r[i] = std::max(1.5, rng.uniform(0.08, 0.14) * len);
                    e.c[i] = std::round(rng.uniform(e.r[i], len - 1.0 - e.r[i]));
                }
                // keep extra organs clear of the main organ so labels never contradict intensities
                Ellipsoid grown = organ;
                for (std::size_t i = 0; i < 3; ++i) grown.r[i] += e.r[i] + 1.0;
                bool clear = !grown.contains(e.c[0], e.c[1], e.c[2]);
                for (const auto& [kk, other] : extras) {
                    double dist2 = 0;
                    for (std::size_t i = 0; i < 3; ++i) dist2 += std::pow(e.c[i] - other.c[i], 2);
                    const double reach = *std::max_element(e.r.begin(), e.r.end()) +
                                         *std::max_element(other.r.begin(), other.r.end()) + 1.0;
                    clear = clear && dist2 > reach * reach;
                }
                if (clear) {
                    extras.emplace_back(k, e);
                    break;
                }
            }
        }

        for (std::size_t d = 0; d < n[0]; ++d)
            for (std::size_t h = 0; h < n[1]; ++h)
                for (std::size_t w = 0; w < n[2]; ++w) {
                    const double x = static_cast<double>(d), y = static_cast<double>(h), z = static_cast<double>(w);
                    double hu = kBackgroundHu;
                    if (organ.contains(x, y, z)) {
                        hu = kOrganHu;
                        sc.label.at(0, d, h, w) = 1;
                        if (has_tumor && tumor.contains(x, y, z)) {
                            hu = kTumorHu;
                            sc.label.at(1, d, h, w) = 1;
                        }
                    }
                    for (const auto& [k, e] : extras) {
                        if (e.contains(x, y, z)) {
                            hu = extra_organ_hu(k);
                            sc.label.at(k, d, h, w) = 1;
                        }
                    }
                    sc.image.at(d, h, w) = static_cast<float>(hu + cfg.noise_hu * rng.normal());
                }
        ds.cases.push_back(std::move(sc));
    }
    return ds;
}

// ---- raw container ---------------------------------------------------------

namespace {

constexpr char kRawMagic[8] = {'T', 'K', 'M', 'R', 'A', 'W', '0', '1'};

void write_u64_le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("truncated volume container");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_container(const std::string& path, const json& header, const std::vector<unsigned char>& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    const std::string h = header.dump();
    out.write(kRawMagic, 8);
    write_u64_le(out, h.size());
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(body.data()), static_cast<std::streamsize>(body.size()));
    if (!out) throw IoError("failed writing " + path);
}

std::pair<json, std::vector<unsigned char>> read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kRawMagic, 8) != 0) throw IoError(path + ": not a volume container");
    const std::uint64_t len = read_u64_le(in);
    if (len > (1u << 20)) throw IoError(path + ": implausible header length");
    std::string h(len, '\0');
    if (!in.read(h.data(), static_cast<std::streamsize>(len))) throw IoError(path + ": truncated header");
    json header;
    try {
        header = json::parse(h);
    } catch (const json::exception& e) {
        throw IoError(path + ": malformed header: " + e.what());
    }
    std::vector<unsigned char> body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return {header, body};
}

json geometry_header(const std::vector<std::size_t>& shape, const Spacing3& spacing, const std::string& orientation,
                     const char* dtype) {
    return {{"shape", shape}, {"spacing_mm", spacing}, {"orientation", orientation}, {"dtype", dtype}};
}

struct Geometry {
    std::vector<std::size_t> shape;
    Spacing3 spacing;
    std::string orientation;
};

Geometry parse_geometry(const json& h, const std::string& dtype, const std::string& path) {
    Geometry g;
    try {
        g.shape = h.at("shape").get<std::vector<std::size_t>>();
        g.spacing = h.at("spacing_mm").get<Spacing3>();
        g.orientation = h.at("orientation").get<std::string>();
        if (h.at("dtype").get<std::string>() != dtype) throw IoError(path + ": expected dtype " + dtype);
    } catch (const json::exception& e) {
        throw IoError(path + ": bad header: " + e.what());
    }
    if (g.shape.size() != 4) throw IoError(path + ": shape must have 4 entries");
    return g;
}

}  // namespace

void save_volume(const Volume& v, const std::string& path) {
    validate_volume(v);
    std::vector<unsigned char> body(v.data.size() * 4);
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, &v.data[i], 4);
        for (int b = 0; b < 4; ++b) body[4 * i + b] = static_cast<unsigned char>(bits >> (8 * b));
    }
    write_container(path, geometry_header({1, v.shape[0], v.shape[1], v.shape[2]}, v.spacing_mm, v.orientation, "float32"),
                    body);
}

Volume load_volume(const std::string& path) {
    auto [header, body] = read_container(path);
    const auto g = parse_geometry(header, "float32", path);
    if (g.shape[0] != 1) throw IoError(path + ": image must have one channel");
    Volume v = make_volume({g.shape[1], g.shape[2], g.shape[3]}, 0.0f, g.spacing, g.orientation);
    if (body.size() != v.data.size() * 4) throw IoError(path + ": body size does not match shape");
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(body[4 * i + b]) << (8 * b);
        std::memcpy(&v.data[i], &bits, 4);
    }
    validate_volume(v);
    return v;
}

void save_labels(const LabelVolume& l, const std::string& path) {
    validate_labels(l);
    std::vector<unsigned char> body(l.data.begin(), l.data.end());
    write_container(path, geometry_header({l.classes, l.shape[0], l.shape[1], l.shape[2]}, l.spacing_mm, l.orientation, "uint8"),
                    body);
}

LabelVolume load_labels(const std::string& path) {
    auto [header, body] = read_container(path);
    const auto g = parse_geometry(header, "uint8", path);
    LabelVolume l = make_labels(g.shape[0], {g.shape[1], g.shape[2], g.shape[3]}, g.spacing, g.orientation);
    if (body.size() != l.data.size()) throw IoError(path + ": body size does not match shape");
    std::copy(body.begin(), body.end(), l.data.begin());
    validate_labels(l);
    return l;
}

void save_dataset(const SynthDataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    json cases = json::array();
    for (const auto& c : ds.cases) {
        if (c.id.empty() || c.id.find_first_of("/\\") != std::string::npos) throw ValidationError("bad case id '" + c.id + "'");
        if (c.label.classes != ds.class_names.size()) {
            throw ValidationError("case " + c.id + ": label has " + std::to_string(c.label.classes) + " classes, dataset has " +
                                  std::to_string(ds.class_names.size()));
        }
        const std::string image = c.id + "_image.tkr", label = c.id + "_label.tkr";
        save_volume(c.image, (std::filesystem::path(dir) / image).string());
        save_labels(c.label, (std::filesystem::path(dir) / label).string());
        cases.push_back({{"id", c.id}, {"image", image}, {"label", label}});
    }
    const json manifest = {{"format", "tkmamba-dataset"}, {"version", 1}, {"class_names", ds.class_names}, {"cases", cases}};
    const auto path = std::filesystem::path(dir) / kManifestName;
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << manifest.dump(2) << "\n";
    if (!out) throw IoError("failed writing " + path.string());
}

SynthDataset load_dataset(const std::string& dir) {
    const auto path = std::filesystem::path(dir) / kManifestName;
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    SynthDataset ds;
    json m;
    try {
        m = json::parse(in);
        if (m.at("format") != "tkmamba-dataset") throw IoError(path.string() + ": not a dataset manifest");
        ds.class_names = m.at("class_names").get<std::vector<std::string>>();
        for (const auto& c : m.at("cases")) {
            SynthCase sc;
            sc.id = c.at("id").get<std::string>();
            sc.image = load_volume((std::filesystem::path(dir) / c.at("image").get<std::string>()).string());
            sc.label = load_labels((std::filesystem::path(dir) / c.at("label").get<std::string>()).string());
            if (sc.label.classes != ds.class_names.size()) {
                throw ValidationError("case " + sc.id + ": label has " + std::to_string(sc.label.classes) +
                                      " classes, manifest lists " + std::to_string(ds.class_names.size()));
            }
            if (sc.label.shape != sc.image.shape) throw ValidationError("case " + sc.id + ": image and label grids differ");
            ds.cases.push_back(std::move(sc));
        }
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": malformed manifest: " + e.what());
    }
    if (ds.cases.empty()) throw ValidationError(path.string() + ": dataset has no cases");
    return ds;
}

template Tensor<float> Volume::tensor<float>() const;
template Tensor<double> Volume::tensor<double>() const;
template Tensor<float> LabelVolume::tensor<float>() const;
template Tensor<double> LabelVolume::tensor<double>() const;

}  // namespace tkm
