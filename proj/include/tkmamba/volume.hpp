#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tkmamba/random.hpp"
#include "tkmamba/tensor.hpp"

namespace tkm {

using Extent3 = std::array<std::size_t, 3>;
using Spacing3 = std::array<double, 3>;

/// Single-channel intensity volume, row-major [D,H,W].
struct Volume {
    Extent3 shape{0, 0, 0};
    std::vector<float> data;
    Spacing3 spacing_mm{1.0, 1.0, 1.0};
    std::string orientation = "RAS";

    std::size_t voxels() const { return shape[0] * shape[1] * shape[2]; }
    float& at(std::size_t d, std::size_t h, std::size_t w) { return data[(d * shape[1] + h) * shape[2] + w]; }
    float at(std::size_t d, std::size_t h, std::size_t w) const { return data[(d * shape[1] + h) * shape[2] + w]; }
    /// [1,D,H,W]
    template <typename T>
    Tensor<T> tensor() const;
};

/// K binary masks sharing one grid, [K,D,H,W].
struct LabelVolume {
    std::size_t classes = 0;
    Extent3 shape{0, 0, 0};
    std::vector<std::uint8_t> data;
    Spacing3 spacing_mm{1.0, 1.0, 1.0};
    std::string orientation = "RAS";

    std::size_t voxels() const { return shape[0] * shape[1] * shape[2]; }
    std::uint8_t& at(std::size_t k, std::size_t d, std::size_t h, std::size_t w) {
        return data[((k * shape[0] + d) * shape[1] + h) * shape[2] + w];
    }
    std::uint8_t at(std::size_t k, std::size_t d, std::size_t h, std::size_t w) const {
        return data[((k * shape[0] + d) * shape[1] + h) * shape[2] + w];
    }
    std::size_t count(std::size_t k) const;
    /// Y row: 1 where class k has any foreground voxel.
    std::vector<int> presence() const;
    template <typename T>
    Tensor<T> tensor() const;
};

Volume make_volume(const Extent3& shape, float fill = 0.0f, const Spacing3& spacing = {1.0, 1.0, 1.0},
                   const std::string& orientation = "RAS");
LabelVolume make_labels(std::size_t classes, const Extent3& shape, const Spacing3& spacing = {1.0, 1.0, 1.0},
                        const std::string& orientation = "RAS");

void validate_volume(const Volume& v);
void validate_labels(const LabelVolume& l);

// ---- orientation ---------------------------------------------------------

/// Letters name the direction each index axis increases toward: one of R/L,
/// A/P, S/I per axis, each pair used once.
bool valid_orientation(const std::string& code);

struct AxisMap {
    std::array<std::size_t, 3> source{0, 1, 2};  // output axis j reads input axis source[j]
    std::array<bool, 3> flip{false, false, false};
};
AxisMap orientation_map(const std::string& from, const std::string& to);

Volume reorient(const Volume& v, const std::string& target);
LabelVolume reorient(const LabelVolume& l, const std::string& target);

// ---- resampling ------------------------------------------------------------

enum class Interp { Trilinear, Nearest };

/// New extent per axis: max(1, round(n * old / new)). Voxel centers are
/// aligned at index 0, so output voxel j samples input coordinate j*new/old,
/// clamped to the last voxel.
Extent3 resampled_extent(const Extent3& shape, const Spacing3& from, const Spacing3& to);
Volume resample(const Volume& v, const Spacing3& spacing, Interp mode = Interp::Trilinear);
LabelVolume resample(const LabelVolume& l, const Spacing3& spacing);

// ---- intensity -------------------------------------------------------------

struct IntensityWindow {
    double lo = -175.0;
    double hi = 250.0;
};
Volume window_normalize(const Volume& v, const IntensityWindow& window = {});

// ---- crop / pad ------------------------------------------------------------

enum class CropMode { Center, Random };

/// Per axis, either a crop offset into the input or a pad before it.
struct CropPlan {
    Extent3 size{0, 0, 0};
    std::array<std::ptrdiff_t, 3> offset{0, 0, 0};  // input index of output voxel 0; negative means padding
};
CropPlan plan_crop(const Extent3& shape, const Extent3& size, CropMode mode, Rng* rng = nullptr);
Volume apply_crop(const Volume& v, const CropPlan& plan);
LabelVolume apply_crop(const LabelVolume& l, const CropPlan& plan);

// ---- augmentation ----------------------------------------------------------

struct AugmentConfig {
    bool zoom = false;
    double zoom_min = 0.9;
    double zoom_max = 1.1;
    bool rotate = false;  // quarter turns in the plane of axes 0 and 1
    bool intensity_shift = false;
    double shift_range = 0.1;

    bool any() const { return zoom || rotate || intensity_shift; }
};

Volume rotate90(const Volume& v, int quarter_turns);
LabelVolume rotate90(const LabelVolume& l, int quarter_turns);

/// Applies the enabled transforms with identical geometry to image and label.
/// Output extents equal the input extents; intensities are clamped to [0,1].
std::pair<Volume, LabelVolume> augment(const Volume& v, const LabelVolume& l, const AugmentConfig& config, Rng& rng);

// ---- pipeline --------------------------------------------------------------

struct PreprocessConfig {
    Spacing3 target_spacing_mm{1.5, 1.5, 1.5};
    IntensityWindow window;
    Extent3 crop_size{96, 96, 96};
    CropMode crop_mode = CropMode::Center;
    std::string orientation = "RAS";
    AugmentConfig augment;
};

void validate_preprocess_config(const PreprocessConfig& config);

/// reorient -> resample (image trilinear, labels nearest) -> window -> crop or
/// pad -> augment. `rng` is required for random crops and augmentation.
std::pair<Volume, LabelVolume> preprocess(const Volume& v, const LabelVolume& l, const PreprocessConfig& config,
                                          Rng* rng = nullptr);

// ---- synthetic data --------------------------------------------------------

struct SynthCase {
    std::string id;
    Volume image;  // Hounsfield-like units
    LabelVolume label;
};

struct SynthDataset {
    std::vector<std::string> class_names;  // "organ", "tumor", then "organ2", ...
    std::vector<SynthCase> cases;
};

struct SynthConfig {
    std::uint64_t seed = 0;
    std::size_t volumes = 4;
    std::size_t classes = 2;
    Extent3 size{32, 32, 32};
    Spacing3 spacing_mm{1.5, 1.5, 1.5};
    std::string orientation = "RAS";
    double tumor_probability = 0.75;  // tumor and extra organs are sometimes absent so Y varies
    double noise_hu = 15.0;
};

std::vector<std::string> synth_class_names(std::size_t classes);
SynthDataset synth_generate(const SynthConfig& config);

// ---- raw container ---------------------------------------------------------

/// "TKMRAW01", u64 little-endian header length, JSON header with keys shape,
/// spacing_mm, orientation, dtype, then little-endian voxel data.
void save_volume(const Volume& v, const std::string& path);
Volume load_volume(const std::string& path);
void save_labels(const LabelVolume& l, const std::string& path);
LabelVolume load_labels(const std::string& path);

// ---- dataset directories ---------------------------------------------------

/// <dir>/manifest.json lists class names and, per case, the image and label
/// container files (relative names) next to it.
inline constexpr const char* kManifestName = "manifest.json";

void save_dataset(const SynthDataset& ds, const std::string& dir);
SynthDataset load_dataset(const std::string& dir);

}  // namespace tkm
