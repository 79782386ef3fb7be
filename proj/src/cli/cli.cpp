#include "tkmamba/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "tkmamba/gradcheck.hpp"
#include "tkmamba/ssm.hpp"
#include "tkmamba/trainer.hpp"

namespace tkm {

template <typename T>
Tensor<T> class_matrix(const TextEmbeddingSet& set, int branch, const std::vector<std::string>& class_names) {
    std::map<std::string, const TextEmbedding*> by_name;
    for (const auto* e : set.branch(branch)) by_name[e->name] = e;
    std::vector<T> data;
    data.reserve(class_names.size() * set.dim);
    for (const auto& name : class_names) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw ValidationError("embeddings have no branch-" + std::to_string(branch) + " entry for class '" + name + "'");
        }
        data.insert(data.end(), it->second->vector.begin(), it->second->vector.end());
    }
    return Tensor<T>::from_data({class_names.size(), set.dim}, std::move(data));
}

template Tensor<float> class_matrix(const TextEmbeddingSet&, int, const std::vector<std::string>&);
template Tensor<double> class_matrix(const TextEmbeddingSet&, int, const std::vector<std::string>&);

namespace {

struct Globals {
    std::uint64_t seed = 0;
    std::string precision = "f32";
    std::string preset = "desk";
};

struct SynthArgs {
    std::size_t classes = 2, count = 4, size = 32;
    double tumor_probability = 0.75;
    std::string out;
};

struct PreprocessArgs {
    std::string data, out, crop_mode = "center", orientation = "RAS";
    double spacing = 1.5, window_lo = -175, window_hi = 250;
    std::size_t crop = 96;
    bool zoom = false, rotate = false, shift = false;
};

struct EmbeddingArgs {
    std::string path;
    bool fallback = true;
};

struct TrainArgs {
    std::string data, out, resume;
    EmbeddingArgs emb;
    OptimConfig optim;
    int warmup = -1;  // -1: scaled from the epoch count
    std::size_t max_steps = 0, checkpoint_every = 0;
    bool no_contrastive = false;
};

struct EvalArgs {
    std::string data, checkpoint, predictions, out;
    EmbeddingArgs emb;
    double tolerance_mm = 2.0;
};

struct OverfitArgs {
    OverfitConfig cfg;
};

struct GradcheckArgs {
    std::string module = "all", report;
    std::size_t trials = 1;
    bool list = false;
};

struct BenchArgs {
    std::vector<std::size_t> lengths{4096, 8192, 16384};
    std::string out;
    std::size_t repeats = 5, channels = 8, state = 16;
    bool check = false, no_quadratic = false;
};

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

// Writes to `path`, or to `fallback` when path is empty or "-".
template <typename F>
void emit(const std::string& path, std::ostream& fallback, F&& write) {
    if (path.empty() || path == "-") {
        write(fallback);
        return;
    }
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    write(f);
    if (!f) throw IoError("failed writing " + path);
}

TextEmbeddingSet resolve_embeddings(const EmbeddingArgs& a, const std::vector<std::string>& names, std::uint64_t seed,
                                    std::ostream& err) {
    if (!a.path.empty() && std::filesystem::exists(a.path)) return load_embeddings(a.path);
    if (!a.fallback) {
        throw ValidationError(a.path.empty() ? "no --embeddings file given" : "embeddings file not found: " + a.path);
    }
    err << "warning: " << (a.path.empty() ? std::string("no --embeddings file given")
                                          : "embeddings file not found: " + a.path)
        << "; using synthetic embeddings (seed " << seed << ")\n";
    return synth_embeddings(names, seed);
}

std::size_t cubic_extent(const SynthDataset& ds) {
    const Extent3 e = ds.cases.front().image.shape;
    for (const auto& c : ds.cases) {
        if (c.image.shape != e) throw ValidationError("case " + c.id + " has a different grid from " + ds.cases.front().id);
    }
    if (e[0] != e[1] || e[0] != e[2]) {
        throw ValidationError("training volumes must be cubic; run preprocess with --crop first");
    }
    return e[0];
}

int cmd_synth(const Globals& g, const SynthArgs& a, std::ostream& out) {
    SynthConfig sc;
    sc.seed = g.seed;
    sc.volumes = a.count;
    sc.classes = a.classes;
    sc.size = {a.size, a.size, a.size};
    sc.tumor_probability = a.tumor_probability;
    const auto ds = synth_generate(sc);
    save_dataset(ds, a.out);
    out << "wrote " << ds.cases.size() << " volumes with " << ds.class_names.size() << " classes to " << a.out << "\n";
    return kExitOk;
}

int cmd_preprocess(const Globals& g, const PreprocessArgs& a, std::ostream& out) {
    PreprocessConfig pc;
    pc.target_spacing_mm = {a.spacing, a.spacing, a.spacing};
    pc.window = {a.window_lo, a.window_hi};
    pc.crop_size = {a.crop, a.crop, a.crop};
    pc.crop_mode = a.crop_mode == "random" ? CropMode::Random : CropMode::Center;
    pc.orientation = a.orientation;
    pc.augment.zoom = a.zoom;
    pc.augment.rotate = a.rotate;
    pc.augment.intensity_shift = a.shift;
    validate_preprocess_config(pc);
    auto ds = load_dataset(a.data);
    for (std::size_t i = 0; i < ds.cases.size(); ++i) {
        Rng rng(mix_seed(mix_seed(g.seed, 0x9e3), i));
        auto [img, lab] = preprocess(ds.cases[i].image, ds.cases[i].label, pc, &rng);
        ds.cases[i].image = std::move(img);
        ds.cases[i].label = std::move(lab);
    }
    save_dataset(ds, a.out);
    out << "preprocessed " << ds.cases.size() << " volumes into " << a.out << "\n";
    return kExitOk;
}

template <typename T>
int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out, std::ostream& err) {
    const auto ds = load_dataset(a.data);
    const std::size_t size = cubic_extent(ds);
    const auto emb = resolve_embeddings(a.emb, ds.class_names, g.seed, err);
    validate_embeddings(emb);
    const auto E = class_matrix<T>(emb, 1, ds.class_names);
    Tensor<T> Ft;
    const bool have_ft = !emb.branch(2).empty() && !a.no_contrastive;
    if (have_ft) Ft = class_matrix<T>(emb, 2, ds.class_names);
    if (!have_ft && !a.no_contrastive) err << "warning: embeddings have no branch-2 entries; contrastive term disabled\n";

    NetworkConfig net = network_preset(g.preset);
    net.input_size = size;
    net.classes = ds.class_names.size();
    if (emb.dim != net.embed_dim) {
        throw ValidationError("embedding dim " + std::to_string(emb.dim) + " does not match network width " +
                              std::to_string(net.embed_dim));
    }
    validate_network_config(net);

    OptimConfig oc = a.optim;
    oc.warmup_epochs = a.warmup >= 0 ? static_cast<std::size_t>(a.warmup) : scaled_warmup(oc.epochs);

    Rng init(mix_seed(g.seed, 0x1417));
    TkMamba<T> model(net, init);
    AdamW<T> opt(model.parameters(), oc);
    if (!a.resume.empty()) {
        const auto meta = read_checkpoint_meta(a.resume);
        if (meta.class_names != ds.class_names) throw ValidationError("checkpoint classes differ from the dataset's");
        load_checkpoint(a.resume, model, &opt);
        out << "resumed from " << a.resume << " at step " << opt.steps() << "\n";
    } else {
        CheckpointMeta meta;
        meta.network = net;
        meta.optim = oc;
        meta.precision = std::is_same_v<T, double> ? "f64" : "f32";
        meta.seed = g.seed;
        meta.class_names = ds.class_names;
        std::filesystem::create_directories(a.out);
        save_checkpoint<T>((std::filesystem::path(a.out) / "init.ckpt").string(), model, nullptr, meta);
    }

    std::vector<TrainSample<T>> data;
    for (const auto& c : ds.cases) data.push_back(make_sample<T>(c.id, c.image, c.label));

    TrainConfig tc;
    tc.optim = oc;
    tc.seed = g.seed;
    tc.out_dir = a.out;
    tc.checkpoint_every = a.checkpoint_every;
    tc.max_steps = a.max_steps;
    tc.contrastive = have_ft;
    tc.class_names = ds.class_names;
    const auto r = train(model, opt, data, E, have_ft ? &Ft : nullptr, tc);
    out << "trained " << r.history.size() << " steps (total " << r.steps << ") in " << fmt(r.seconds) << " s";
    if (!r.history.empty()) out << ", final loss " << fmt(r.history.back().total);
    out << "\ncheckpoint: " << (std::filesystem::path(a.out) / "checkpoint.ckpt").string() << "\n";
    return kExitOk;
}

struct CaseResult {
    std::string id;
    std::vector<double> dice, nsd;
};

std::vector<CaseResult> score(const std::vector<const SynthCase*>& gt, const std::vector<LabelVolume>& pred,
                              double tolerance_mm) {
    std::vector<CaseResult> rows(gt.size());
#pragma omp parallel for schedule(dynamic)
    for (std::size_t i = 0; i < gt.size(); ++i) {
        rows[i] = {gt[i]->id, dice_metric(pred[i], gt[i]->label), nsd_metric(pred[i], gt[i]->label, tolerance_mm)};
    }
    return rows;
}

template <typename T>
std::vector<LabelVolume> predict_all(const Globals& g, const EvalArgs& a, const SynthDataset& ds, std::ostream& err) {
    const auto meta = read_checkpoint_meta(a.checkpoint);
    if (meta.class_names != ds.class_names) throw ValidationError("checkpoint classes differ from the dataset's");
    Rng rng(0);
    TkMamba<T> model(meta.network, rng);
    load_checkpoint<T>(a.checkpoint, model, nullptr);
    const auto emb = resolve_embeddings(a.emb, ds.class_names, meta.seed, err);
    validate_embeddings(emb);
    const auto E = class_matrix<T>(emb, 1, ds.class_names);
    (void)g;
    std::vector<LabelVolume> preds;
    for (const auto& c : ds.cases) {
        const auto s = make_sample<T>(c.id, c.image, c.label);
        preds.push_back(predict_masks(model, s.image, E, c.label.spacing_mm));
    }
    return preds;
}

int cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out, std::ostream& err) {
    if (a.checkpoint.empty() == a.predictions.empty()) throw ValidationError("eval needs exactly one of --checkpoint or --predictions");
    const auto ds = load_dataset(a.data);
    std::vector<const SynthCase*> gt;
    for (const auto& c : ds.cases) gt.push_back(&c);
    std::vector<LabelVolume> preds;
    if (!a.predictions.empty()) {
        const auto pd = load_dataset(a.predictions);
        if (pd.class_names != ds.class_names) throw ValidationError("prediction classes differ from the dataset's");
        std::map<std::string, const SynthCase*> by_id;
        for (const auto& c : pd.cases) by_id[c.id] = &c;
        for (const auto& c : ds.cases) {
            auto it = by_id.find(c.id);
            if (it == by_id.end()) throw ValidationError("no prediction for case " + c.id);
            preds.push_back(it->second->label);
        }
    } else {
        preds = g.precision == "f64" ? predict_all<double>(g, a, ds, err) : predict_all<float>(g, a, ds, err);
    }
    const auto rows = score(gt, preds, a.tolerance_mm);
    emit(a.out, out, [&](std::ostream& f) {
        f << kEvalCsvHeader << "\n";
        for (const auto& r : rows)
            for (std::size_t k = 0; k < ds.class_names.size(); ++k)
                f << r.id << "," << ds.class_names[k] << "," << fmt(r.dice[k]) << "," << fmt(r.nsd[k]) << "\n";
    });
    if (!a.out.empty() && a.out != "-") {
        for (std::size_t k = 0; k < ds.class_names.size(); ++k) {
            double d = 0, n = 0;
            for (const auto& r : rows) {
                d += r.dice[k];
                n += r.nsd[k];
            }
            out << ds.class_names[k] << ": mean dice " << fmt(d / rows.size()) << ", mean nsd " << fmt(n / rows.size()) << "\n";
        }
    }
    return kExitOk;
}

int cmd_overfit(const Globals& g, OverfitArgs a, std::ostream& out) {
    a.cfg.seed = g.seed;
    a.cfg.precision = g.precision;
    const auto r = run_overfit(a.cfg);
    for (const auto& c : r.scores) {
        out << c.id;
        for (double d : c.dice) out << " " << fmt(d);
        out << "\n";
    }
    out << "mean dice " << fmt(r.mean_dice) << " after " << r.history.size() << " steps in " << fmt(r.seconds) << " s\n";
    return kExitOk;
}

int cmd_gradcheck(const Globals& g, const GradcheckArgs& a, std::ostream& out) {
    const auto& cases = registered_gradchecks();
    if (a.list) {
        for (const auto& gc : cases) out << gc.name << " " << tier_name(gc.tier) << (gc.expect_failure ? " negative-control" : "") << "\n";
        return kExitOk;
    }
    std::vector<const GradcheckCase*> chosen;
    for (const auto& gc : cases)
        if (a.module == "all" || gc.name == a.module) chosen.push_back(&gc);
    if (chosen.empty()) throw ValidationError("unknown module '" + a.module + "' (see gradcheck --list)");

    bool ok = true;
    std::vector<std::string> lines;
    for (const auto* gc : chosen) {
        const auto r = run_gradcheck_case(*gc, a.trials, g.seed);
        const bool good = r.passed != gc->expect_failure;
        ok &= good;
        std::string status = r.passed ? "PASS" : "FAIL";
        if (gc->expect_failure) status += good ? " (negative control caught)" : " (negative control NOT caught)";
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-30s %-12s max_rel_err %.3e tol %.0e coords %zu %s", gc->name.c_str(),
                      tier_name(gc->tier), r.max_rel_error, r.tolerance, r.coords_checked, status.c_str());
        out << buf << "\n" << std::flush;
        lines.push_back(gc->name + "," + tier_name(gc->tier) + "," + fmt(r.max_rel_error) + "," + fmt(r.tolerance) + "," +
                        std::to_string(r.coords_checked) + "," + (r.passed ? "pass" : "fail") + "," +
                        (gc->expect_failure ? "1" : "0"));
    }
    if (!a.report.empty()) {
        emit(a.report, out, [&](std::ostream& f) {
            f << "name,tier,max_rel_error,tolerance,coords,result,negative_control\n";
            for (const auto& l : lines) f << l << "\n";
        });
    }
    out << (ok ? "all checks behaved as expected\n" : "gradient check FAILED\n");
    return ok ? kExitOk : kExitValidation;
}

int cmd_bench(const Globals& g, const BenchArgs& a, std::ostream& out, std::ostream& err) {
    ScanBenchOptions opt;
    opt.channels = a.channels;
    opt.state = a.state;
    opt.repeats = a.repeats;
    opt.quadratic = !a.no_quadratic;
    opt.seed = g.seed;
    const auto rows = bench_scan(a.lengths, opt);
    emit(a.out, out, [&](std::ostream& f) {
        f << kBenchCsvHeader << "\n";
        for (const auto& r : rows)
            f << r.length << "," << fmt(r.sequential_ms) << "," << fmt(r.parallel_ms) << "," << fmt(r.quadratic_ms) << "\n";
    });
    if (!a.check) return kExitOk;
    bool ok = true, any = false;
    for (const auto& lo : rows) {
        for (const auto& hi : rows) {
            if (hi.length != 2 * lo.length) continue;
            any = true;
            const double rs = hi.sequential_ms / lo.sequential_ms, rp = hi.parallel_ms / lo.parallel_ms;
            char buf[200];
            std::snprintf(buf, sizeof buf, "L %zu -> %zu: sequential x%.2f, parallel x%.2f", lo.length, hi.length, rs, rp);
            err << buf;
            ok &= rs <= 2.5 && rp <= 2.5;
            if (opt.quadratic) {
                const double rq = hi.quadratic_ms / lo.quadratic_ms;
                std::snprintf(buf, sizeof buf, ", quadratic x%.2f", rq);
                err << buf;
                ok &= rq >= 3.5;
            }
            err << "\n";
        }
    }
    if (!any) throw ValidationError("--check needs at least one pair of lengths L and 2L");
    err << (ok ? "scaling check passed\n" : "scaling check FAILED (linear <= 2.5, quadratic >= 3.5)\n");
    return ok ? kExitOk : kExitValidation;
}

void add_embedding_flags(CLI::App* sub, EmbeddingArgs& e) {
    sub->add_option("--embeddings", e.path, "Embedding container JSON");
    sub->add_flag("!--no-embedding-fallback", e.fallback,
                  "Fail instead of using synthetic embeddings when the file is missing");
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Text-guided volumetric segmentation with Mamba and KAN blocks", "tkmamba"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Seed for every random stream");
    app.add_option("--precision", g.precision, "Floating point precision")->check(CLI::IsMember({"f32", "f64"}));
    app.add_option("--preset", g.preset, "Network size preset")->check(CLI::IsMember({"desk", "paper"}));

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth", "Generate a synthetic labelled dataset");
    synth->add_option("--classes", sa.classes, "Classes per volume")->check(CLI::PositiveNumber);
    synth->add_option("--count", sa.count, "Number of volumes")->check(CLI::PositiveNumber);
    synth->add_option("--size", sa.size, "Edge length in voxels (>= 8)")->check(CLI::PositiveNumber);
    synth->add_option("--tumor-probability", sa.tumor_probability)->check(CLI::Range(0.0, 1.0));
    synth->add_option("--out", sa.out, "Output dataset directory")->required();

    PreprocessArgs pa;
    auto* prep = app.add_subcommand("preprocess", "Reorient, resample, window and crop a dataset");
    prep->add_option("--data", pa.data, "Input dataset directory")->required();
    prep->add_option("--out", pa.out, "Output dataset directory")->required();
    prep->add_option("--spacing", pa.spacing, "Target isotropic spacing in mm")->check(CLI::PositiveNumber);
    prep->add_option("--crop", pa.crop, "Cubic crop edge in voxels")->check(CLI::PositiveNumber);
    prep->add_option("--crop-mode", pa.crop_mode)->check(CLI::IsMember({"center", "random"}));
    prep->add_option("--orientation", pa.orientation, "Target orientation code");
    prep->add_option("--window-lo", pa.window_lo);
    prep->add_option("--window-hi", pa.window_hi);
    prep->add_flag("--zoom", pa.zoom, "Random zoom augmentation");
    prep->add_flag("--rotate", pa.rotate, "Random quarter-turn augmentation");
    prep->add_flag("--intensity-shift", pa.shift, "Random intensity shift augmentation");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train on a preprocessed dataset");
    tr->add_option("--data", ta.data, "Dataset directory")->required();
    tr->add_option("--out", ta.out, "Output directory for checkpoints and loss_log.csv")->required();
    add_embedding_flags(tr, ta.emb);
    tr->add_option("--lr", ta.optim.lr, "Peak learning rate")->check(CLI::NonNegativeNumber);
    tr->add_option("--weight-decay", ta.optim.weight_decay)->check(CLI::NonNegativeNumber);
    tr->add_option("--epochs", ta.optim.epochs)->check(CLI::PositiveNumber);
    tr->add_option("--warmup", ta.warmup, "Warmup epochs (default scales 50 of 2000)");
    tr->add_option("--clip-norm", ta.optim.clip_norm)->check(CLI::NonNegativeNumber);
    tr->add_option("--max-steps", ta.max_steps, "Stop after this many total steps");
    tr->add_option("--checkpoint-every", ta.checkpoint_every, "Epochs between checkpoints");
    tr->add_option("--resume", ta.resume, "Continue from a checkpoint");
    tr->add_flag("--no-contrastive", ta.no_contrastive, "Drop the text-vision contrastive term");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Dice and NSD per case and class");
    ev->add_option("--data", ea.data, "Ground-truth dataset directory")->required();
    ev->add_option("--checkpoint", ea.checkpoint, "Model checkpoint to predict with");
    ev->add_option("--predictions", ea.predictions, "Dataset directory whose labels are predictions");
    ev->add_option("--out", ea.out, "CSV path (stdout when omitted)");
    ev->add_option("--tolerance-mm", ea.tolerance_mm, "NSD boundary tolerance")->check(CLI::NonNegativeNumber);
    add_embedding_flags(ev, ea.emb);

    OverfitArgs oa;
    auto* of = app.add_subcommand("overfit", "Fit the desk model to a few synthetic volumes");
    of->add_option("--volumes", oa.cfg.volumes)->check(CLI::PositiveNumber);
    of->add_option("--classes", oa.cfg.classes)->check(CLI::PositiveNumber);
    of->add_option("--size", oa.cfg.size)->check(CLI::PositiveNumber);
    of->add_option("--steps", oa.cfg.steps)->check(CLI::PositiveNumber);
    of->add_option("--lr", oa.cfg.lr)->check(CLI::NonNegativeNumber);
    of->add_option("--out", oa.cfg.out_dir, "Directory for loss_log.csv and checkpoints");

    GradcheckArgs ga;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference checks of registered ops and blocks");
    gc->add_option("--module", ga.module, "Case name or 'all'");
    gc->add_option("--trials", ga.trials, "Random instances per case")->check(CLI::PositiveNumber);
    gc->add_option("--report", ga.report, "CSV report path");
    gc->add_flag("--list", ga.list, "List registered cases");

    BenchArgs ba;
    auto* bs = app.add_subcommand("bench-scan", "Time scan kernels against sequence length");
    bs->add_option("--lengths", ba.lengths, "Comma separated lengths")->delimiter(',');
    bs->add_option("--out", ba.out, "CSV path (stdout when omitted)");
    bs->add_option("--repeats", ba.repeats, "Median over this many runs")->check(CLI::PositiveNumber);
    bs->add_option("--channels", ba.channels)->check(CLI::PositiveNumber);
    bs->add_option("--state", ba.state)->check(CLI::PositiveNumber);
    bs->add_flag("--check", ba.check, "Assert linear and quadratic doubling ratios");
    bs->add_flag("--no-quadratic", ba.no_quadratic, "Skip the quadratic baseline");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*synth) return cmd_synth(g, sa, out);
        if (*prep) return cmd_preprocess(g, pa, out);
        if (*tr) return g.precision == "f64" ? cmd_train<double>(g, ta, out, err) : cmd_train<float>(g, ta, out, err);
        if (*ev) return cmd_eval(g, ea, out, err);
        if (*of) return cmd_overfit(g, oa, out);
        if (*gc) return cmd_gradcheck(g, ga, out);
        if (*bs) return cmd_bench(g, ba, out, err);
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    }
    return kExitUsage;
}

}  // namespace tkm
