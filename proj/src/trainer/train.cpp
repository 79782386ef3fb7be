#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tkmamba/ops.hpp"
#include "tkmamba/textbridge.hpp"
#include "tkmamba/trainer.hpp"

namespace tkm {

template <typename T>
TrainSample<T> make_sample(const std::string& id, const Volume& image, const LabelVolume& label) {
    if (image.shape != label.shape) throw ShapeError("sample " + id + ": image and label grids differ");
    TrainSample<T> s;
    s.id = id;
    const auto& e = image.shape;
    s.image = reshape(image.tensor<T>(), {1, 1, e[0], e[1], e[2]});
    s.target = reshape(label.tensor<T>(), {1, label.classes, e[0], e[1], e[2]});
    const auto y = label.presence();
    s.presence = Tensor<T>::from_data({1, label.classes}, std::vector<T>(y.begin(), y.end()));
    return s;
}

std::string format_loss_row(const LossRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g", r.step, r.bce, r.dice, r.contrast, r.total, r.lr);
    return buf;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(mix_seed(seed, 0x0de5), epoch));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

template <typename T>
TrainResult train(TkMamba<T>& model, AdamW<T>& opt, const std::vector<TrainSample<T>>& data, const Tensor<T>& label_emb,
                  const Tensor<T>* desc_emb, const TrainConfig& config) {
    validate_optim_config(config.optim);
    if (data.empty()) throw ValidationError("train: empty dataset");
    const std::size_t n = data.size();
    std::size_t total = config.optim.epochs * n;
    if (config.max_steps) total = std::min(total, config.max_steps);

    CheckpointMeta meta;
    meta.network = model.config();
    meta.optim = config.optim;
    meta.precision = std::is_same_v<T, double> ? "f64" : "f32";
    meta.seed = config.seed;
    meta.class_names = config.class_names;
    auto checkpoint = [&](const std::string& file) {
        if (config.out_dir.empty()) return;
        meta.step = opt.steps();
        save_checkpoint((std::filesystem::path(config.out_dir) / file).string(), model, &opt, meta);
    };

    std::ofstream log;
    if (!config.out_dir.empty()) {
        std::filesystem::create_directories(config.out_dir);
        const auto path = std::filesystem::path(config.out_dir) / "loss_log.csv";
        if (opt.steps() == 0) {
            log.open(path, std::ios::trunc);
            log << kLossLogHeader << "\n";
        } else {
            log.open(path, std::ios::app);
        }
        if (!log) throw IoError("cannot write " + path.string());
    }

    TrainResult result;
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order;
    std::size_t order_epoch = static_cast<std::size_t>(-1);
    while (opt.steps() < total) {
        const std::size_t s = opt.steps();
        const std::size_t epoch = s / n;
        if (epoch != order_epoch) {
            order = epoch_order(n, config.seed, epoch);
            order_epoch = epoch;
        }
        const auto& sample = data[order[s % n]];
        const double lr = lr_schedule(epoch, config.optim);

        Rng step_rng(mix_seed(config.seed, s + 1));
        ForwardContext ctx{true, &step_rng};
        opt.zero_grad();
        LossBreakdown<T> loss;
        try {
            auto out = model.forward(sample.image, label_emb, config.contrastive ? desc_emb : nullptr, ctx);
            loss = total_loss(out.logits, sample.target, out.presence, sample.presence, config.weights);
        } catch (const NumericError&) {
            checkpoint("last_good.ckpt");
            throw;
        }
        const double total_value = static_cast<double>(loss.total.item());
        if (!std::isfinite(total_value)) {
            checkpoint("last_good.ckpt");
            throw NumericError("non-finite loss at step " + std::to_string(s + 1) + " (sample " + sample.id + ")");
        }
        loss.total.backward();
        try {
            opt.step(lr);
        } catch (const NumericError&) {
            checkpoint("last_good.ckpt");
            throw;
        }

        LossRow row{s + 1, loss.bce, loss.dice, loss.contrast, total_value, lr};
        result.history.push_back(row);
        if (log) log << format_loss_row(row) << "\n" << std::flush;

        const bool epoch_done = (s + 1) % n == 0;
        if (epoch_done && config.checkpoint_every && (epoch + 1) % config.checkpoint_every == 0) {
            checkpoint("checkpoint_epoch" + std::to_string(epoch + 1) + ".ckpt");
        }
    }
    checkpoint("checkpoint.ckpt");
    result.steps = opt.steps();
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

template <typename T>
LabelVolume predict_masks(const TkMamba<T>& model, const Tensor<T>& image, const Tensor<T>& label_emb,
                          const Spacing3& spacing) {
    NoGradGuard ng;
    auto out = model.forward(image, label_emb, nullptr);
    return masks_from_logits(out.logits, spacing);
}

namespace {

template <typename T>
OverfitReport overfit_impl(const OverfitConfig& cfg) {
    SynthConfig sc;
    sc.seed = cfg.seed;
    sc.volumes = cfg.volumes;
    sc.classes = cfg.classes;
    sc.size = {cfg.size, cfg.size, cfg.size};
    const auto ds = synth_generate(sc);

    PreprocessConfig pc;
    pc.target_spacing_mm = sc.spacing_mm;
    pc.crop_size = sc.size;
    std::vector<TrainSample<T>> data;
    std::vector<LabelVolume> truth;
    for (const auto& c : ds.cases) {
        auto [img, lab] = preprocess(c.image, c.label, pc);
        data.push_back(make_sample<T>(c.id, img, lab));
        truth.push_back(std::move(lab));
    }

    NetworkConfig net = network_preset("desk");
    net.input_size = cfg.size;
    net.classes = cfg.classes;
    const auto emb = synth_embeddings(ds.class_names, cfg.seed);
    const auto E = emb.matrix<T>(1);
    const auto Ft = emb.matrix<T>(2);

    Rng init(mix_seed(cfg.seed, 0x1417));
    TkMamba<T> model(net, init);
    OptimConfig oc;
    oc.lr = cfg.lr;
    oc.epochs = (cfg.steps + cfg.volumes - 1) / cfg.volumes;
    oc.warmup_epochs = scaled_warmup(oc.epochs);
    AdamW<T> opt(model.parameters(), oc);

    TrainConfig tc;
    tc.optim = oc;
    tc.seed = cfg.seed;
    tc.max_steps = cfg.steps;
    tc.out_dir = cfg.out_dir;
    tc.class_names = ds.class_names;
    auto result = train(model, opt, data, E, &Ft, tc);

    OverfitReport report;
    report.history = std::move(result.history);
    report.seconds = result.seconds;
    double sum = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto pred = predict_masks(model, data[i].image, E, truth[i].spacing_mm);
        CaseScores cs{data[i].id, dice_metric(pred, truth[i]), nsd_metric(pred, truth[i])};
        for (double d : cs.dice) {
            sum += d;
            ++count;
        }
        report.scores.push_back(std::move(cs));
    }
    report.mean_dice = sum / static_cast<double>(count);
    return report;
}

}  // namespace

OverfitReport run_overfit(const OverfitConfig& config) {
    if (config.precision == "f64") return overfit_impl<double>(config);
    if (config.precision == "f32") return overfit_impl<float>(config);
    throw ValidationError("precision must be f32 or f64");
}

#define TKM_INSTANTIATE(T)                                                                                    \
    template TrainSample<T> make_sample<T>(const std::string&, const Volume&, const LabelVolume&);            \
    template TrainResult train(TkMamba<T>&, AdamW<T>&, const std::vector<TrainSample<T>>&, const Tensor<T>&, \
                               const Tensor<T>*, const TrainConfig&);                                         \
    template LabelVolume predict_masks(const TkMamba<T>&, const Tensor<T>&, const Tensor<T>&, const Spacing3&);

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
