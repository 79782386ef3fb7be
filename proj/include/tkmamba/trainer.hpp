#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tkmamba/metrics.hpp"
#include "tkmamba/network.hpp"
#include "tkmamba/volume.hpp"

namespace tkm {

struct OptimConfig {
    double lr = 1e-4;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t epochs = 2000;
    std::size_t warmup_epochs = 50;
    double clip_norm = 0.0;  // global gradient norm clip, 0 disables
};

void validate_optim_config(const OptimConfig& config);

/// Linear warmup lr*(e+1)/W for e < W, then lr*0.5*(1+cos(pi*t)) with
/// t = (e-W)/(epochs-W), floored at 0 past the end.
double lr_schedule(std::size_t epoch, const OptimConfig& config);

/// Warmup length scaled from the reference 50-of-2000 ratio.
std::size_t scaled_warmup(std::size_t epochs);

template <typename T>
class AdamW {
public:
    AdamW() = default;
    AdamW(ParamList<T> params, const OptimConfig& config);

    void zero_grad();
    /// One decoupled-decay Adam update at learning rate `lr`. Throws
    /// NumericError, leaving parameters untouched, on a non-finite gradient.
    void step(double lr);

    std::size_t steps() const { return t_; }
    const ParamList<T>& params() const { return params_; }
    const OptimConfig& config() const { return config_; }
    double last_grad_norm() const { return last_grad_norm_; }

    // moment access for checkpointing
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }
    void set_steps(std::size_t t) { t_ = t; }

private:
    ParamList<T> params_;
    OptimConfig config_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
    double last_grad_norm_ = 0.0;
};

// ---- checkpoints -------------------------------------------------------------

struct CheckpointMeta {
    NetworkConfig network;
    OptimConfig optim;
    std::string precision = "f32";
    std::uint64_t seed = 0;
    std::size_t step = 0;
    std::vector<std::string> class_names;
};

/// "TKMCKPT1", u64 little-endian header length, JSON header (config,
/// tensor table), then little-endian tensor data. Parameters keep their
/// precision; optimizer moments are stored as f64.
template <typename T>
void save_checkpoint(const std::string& path, const TkMamba<T>& model, const AdamW<T>* opt, const CheckpointMeta& meta);

CheckpointMeta read_checkpoint_meta(const std::string& path);

/// Copies parameters (and moments when `opt` is given) into a model built
/// from the checkpoint's network config. Values convert between precisions.
template <typename T>
void load_checkpoint(const std::string& path, TkMamba<T>& model, AdamW<T>* opt);

// ---- training ------------------------------------------------------------

template <typename T>
struct TrainSample {
    std::string id;
    Tensor<T> image;     // [1,1,D,H,W]
    Tensor<T> target;    // [1,K,D,H,W]
    Tensor<T> presence;  // [1,K]
};

template <typename T>
TrainSample<T> make_sample(const std::string& id, const Volume& image, const LabelVolume& label);

struct LossRow {
    std::size_t step = 0;
    double bce = 0, dice = 0, contrast = 0, total = 0, lr = 0;
};

struct TrainConfig {
    OptimConfig optim;
    LossWeights weights;
    std::uint64_t seed = 0;
    std::string out_dir;              // empty: no files written
    std::size_t checkpoint_every = 0; // epochs between checkpoints, 0: only the final one
    std::size_t max_steps = 0;        // stop after this many total steps, 0: run the schedule
    bool contrastive = true;
    std::vector<std::string> class_names;
};

struct TrainResult {
    std::vector<LossRow> history;
    std::size_t steps = 0;
    double seconds = 0.0;
};

/// Batch-1 training over `data`, continuing from `opt.steps()`. Sample order
/// within each epoch is a permutation seeded by (seed, epoch), so a resumed
/// run repeats the uninterrupted one exactly. Writes loss_log.csv and
/// checkpoints under out_dir when set.
template <typename T>
TrainResult train(TkMamba<T>& model, AdamW<T>& opt, const std::vector<TrainSample<T>>& data, const Tensor<T>& label_emb,
                  const Tensor<T>* desc_emb, const TrainConfig& config);

std::string format_loss_row(const LossRow& row);
inline constexpr const char* kLossLogHeader = "step,l_bce,l_dice,l_contrast,l_total,lr";

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch);

// ---- evaluation ----------------------------------------------------------

struct CaseScores {
    std::string id;
    std::vector<double> dice, nsd;
};

template <typename T>
LabelVolume predict_masks(const TkMamba<T>& model, const Tensor<T>& image, const Tensor<T>& label_emb,
                          const Spacing3& spacing);

// ---- overfit experiment --------------------------------------------------

struct OverfitConfig {
    std::uint64_t seed = 0;
    std::size_t volumes = 2;
    std::size_t classes = 3;
    std::size_t size = 32;
    std::size_t steps = 300;
    double lr = 3e-3;
    std::string precision = "f32";
    std::string out_dir;
};

struct OverfitReport {
    std::vector<LossRow> history;
    std::vector<CaseScores> scores;
    double mean_dice = 0.0;
    double seconds = 0.0;
};

/// Desk preset on a few synthetic volumes, scored on its own training set.
OverfitReport run_overfit(const OverfitConfig& config);

}  // namespace tkm
