#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tkmamba/cli.hpp"
#include "tkmamba/trainer.hpp"

using namespace tkm;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out, err;
};

Run cli(std::vector<std::string> args) {
    args.insert(args.begin(), "tkmamba");
    std::ostringstream out, err;
    const int code = run_cli(args, out, err);
    return {code, out.str(), err.str()};
}

std::string dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("tkm_cli_" + name);
    fs::remove_all(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// synth + preprocess to a 16^3 training set
std::string small_dataset(const std::string& name, std::size_t classes = 2) {
    const auto raw = dir(name + "_raw"), pre = dir(name + "_pre");
    EXPECT_EQ(cli({"synth", "--classes", std::to_string(classes), "--count", "2", "--size", "16", "--out", raw}).code, 0);
    EXPECT_EQ(cli({"preprocess", "--data", raw, "--out", pre, "--crop", "16"}).code, 0);
    return pre;
}

}  // namespace

TEST(Cli, SynthIsByteIdenticalAcrossRuns) {
    const auto a = dir("synth_a"), b = dir("synth_b");
    ASSERT_EQ(cli({"synth", "--classes", "3", "--count", "4", "--size", "16", "--out", a, "--seed", "9"}).code, 0);
    ASSERT_EQ(cli({"--seed", "9", "synth", "--classes", "3", "--count", "4", "--size", "16", "--out", b}).code, 0);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(a)) {
        ++files;
        EXPECT_EQ(slurp(e.path().string()), slurp((fs::path(b) / e.path().filename()).string())) << e.path();
    }
    EXPECT_EQ(files, 9u);
    const auto ds = load_dataset(a);
    EXPECT_EQ(ds.cases.size(), 4u);
    EXPECT_EQ(ds.class_names.size(), 3u);
}

TEST(Cli, ExitCodes) {
    auto r = cli({"synth", "--size", "0", "--out", dir("bad")});
    EXPECT_EQ(r.code, kExitUsage);
    EXPECT_NE(r.err.find("--size"), std::string::npos);
    EXPECT_EQ(cli({"synth", "--out", dir("bad"), "--unknown-flag"}).code, kExitUsage);
    EXPECT_EQ(cli({}).code, kExitUsage);
    EXPECT_EQ(cli({"--precision", "f16", "synth", "--out", dir("bad")}).code, kExitUsage);
    EXPECT_EQ(cli({"synth", "--size", "4", "--out", dir("bad")}).code, kExitValidation);
    EXPECT_EQ(cli({"eval", "--data", dir("missing")}).code, kExitValidation);
    EXPECT_EQ(cli({"--help"}).code, kExitOk);
}

TEST(Cli, PreprocessCropsToCube) {
    const auto raw = dir("prep_raw"), pre = dir("prep_out");
    ASSERT_EQ(cli({"synth", "--count", "1", "--size", "20", "--out", raw}).code, 0);
    ASSERT_EQ(cli({"preprocess", "--data", raw, "--out", pre, "--crop", "16"}).code, 0);
    const auto ds = load_dataset(pre);
    EXPECT_EQ(ds.cases[0].image.shape, (Extent3{16, 16, 16}));
    for (float v : ds.cases[0].image.data) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
}

TEST(Cli, TrainWithZeroLrKeepsInitialWeights) {
    const auto data = small_dataset("lr0");
    const auto out = dir("lr0_run");
    auto r = cli({"--precision", "f64", "train", "--data", data, "--out", out, "--lr", "0", "--epochs", "3", "--max-steps", "2"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.err.find("synthetic embeddings"), std::string::npos);
    Rng rng(0);
    const auto meta = read_checkpoint_meta(out + "/checkpoint.ckpt");
    EXPECT_EQ(meta.step, 2u);
    TkMamba<double> init(meta.network, rng), trained(meta.network, rng);
    load_checkpoint<double>(out + "/init.ckpt", init, nullptr);
    load_checkpoint<double>(out + "/checkpoint.ckpt", trained, nullptr);
    const auto a = init.parameters(), b = trained.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
        ASSERT_EQ(std::vector<double>(a[i].second.data().begin(), a[i].second.data().end()),
                  std::vector<double>(b[i].second.data().begin(), b[i].second.data().end()))
            << a[i].first;
    }
}

TEST(Cli, TrainIsDeterministicInF64) {
    const auto data = small_dataset("det");
    std::string logs[2];
    for (int i = 0; i < 2; ++i) {
        const auto out = dir("det_run" + std::to_string(i));
        ASSERT_EQ(cli({"--precision", "f64", "--seed", "4", "train", "--data", data, "--out", out, "--lr", "1e-3", "--epochs",
                       "3", "--max-steps", "3"})
                      .code,
                  0);
        logs[i] = slurp(out + "/loss_log.csv");
    }
    EXPECT_EQ(logs[0], logs[1]);
    EXPECT_EQ(logs[0].rfind(kLossLogHeader, 0), 0u);
}

TEST(Cli, MissingEmbeddingsWithoutFallbackFails) {
    const auto data = small_dataset("noemb");
    auto r = cli({"train", "--data", data, "--out", dir("noemb_run"), "--embeddings", "/nonexistent.json",
                  "--no-embedding-fallback"});
    EXPECT_EQ(r.code, kExitValidation);
    EXPECT_NE(r.err.find("/nonexistent.json"), std::string::npos);
}

TEST(Cli, EmbeddingFileIsUsedByName) {
    const auto data = small_dataset("emb");
    const auto names = load_dataset(data).class_names;
    auto set = synth_embeddings({names[1], names[0]}, 77);  // reversed order on disk
    const auto path = dir("emb_file") + ".json";
    save_embeddings(set, path);
    const auto E = class_matrix<double>(set, 1, names);
    for (std::size_t j = 0; j < set.dim; ++j) ASSERT_EQ(E.at(j), set.branch(1)[1]->vector[j]);
    auto r = cli({"train", "--data", data, "--out", dir("emb_run"), "--embeddings", path, "--max-steps", "1", "--epochs", "2"});
    EXPECT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(r.err.find("warning"), std::string::npos);
    EXPECT_THROW(class_matrix<double>(set, 1, {"absent"}), ValidationError);
}

TEST(Cli, NanInputExitsNumeric) {
    const auto data = small_dataset("nan");
    auto ds = load_dataset(data);
    for (auto& c : ds.cases) c.image.data[5] = std::nanf("");
    const auto bad = dir("nan_bad");
    save_dataset(ds, bad);
    const auto out = dir("nan_run");
    auto r = cli({"train", "--data", bad, "--out", out, "--max-steps", "2", "--epochs", "2"});
    EXPECT_EQ(r.code, kExitNumeric) << r.err;
    EXPECT_TRUE(fs::exists(out + "/last_good.ckpt"));
}

TEST(Cli, EvalGroundTruthAgainstItself) {
    const auto data = small_dataset("evalgt", 3);
    const auto csv = dir("evalgt_csv") + "/metrics.csv";
    auto r = cli({"eval", "--data", data, "--predictions", data, "--out", csv});
    ASSERT_EQ(r.code, 0) << r.err;
    std::istringstream in(slurp(csv));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "case_id,class,dice,nsd");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        ++rows;
        EXPECT_EQ(line.substr(line.size() - 4), ",1,1") << line;
    }
    EXPECT_EQ(rows, 6u);
}

TEST(Cli, EvalEmptyPredictionScoresZero) {
    const auto data = small_dataset("evalempty");
    auto ds = load_dataset(data);
    for (auto& c : ds.cases) std::fill(c.label.data.begin(), c.label.data.end(), 0);
    const auto pred = dir("evalempty_pred");
    save_dataset(ds, pred);
    auto r = cli({"eval", "--data", data, "--predictions", pred});
    ASSERT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("case_000,organ,0,0\n"), std::string::npos) << r.out;
}

TEST(Cli, EvalFromCheckpoint) {
    const auto data = small_dataset("evalckpt");
    const auto run = dir("evalckpt_run");
    ASSERT_EQ(cli({"train", "--data", data, "--out", run, "--max-steps", "1", "--epochs", "2"}).code, 0);
    auto r = cli({"eval", "--data", data, "--checkpoint", run + "/checkpoint.ckpt"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 5);
    EXPECT_EQ(cli({"eval", "--data", data}).code, kExitValidation);
}

TEST(Cli, GradcheckReport) {
    auto r = cli({"gradcheck", "--module", "sigmoid", "--trials", "2"});
    EXPECT_EQ(r.code, 0);
    EXPECT_NE(r.out.find("max_rel_err"), std::string::npos);
    EXPECT_NE(r.out.find("PASS"), std::string::npos);
    auto neg = cli({"gradcheck", "--module", "negative_control_wrong_grad"});
    EXPECT_EQ(neg.code, 0);
    EXPECT_NE(neg.out.find("FAIL (negative control caught)"), std::string::npos);
    EXPECT_EQ(cli({"gradcheck", "--module", "nope"}).code, kExitValidation);
    auto list = cli({"gradcheck", "--list"});
    EXPECT_NE(list.out.find("tiny_model end_to_end"), std::string::npos);
}

TEST(Cli, BenchScanCsv) {
    auto r = cli({"bench-scan", "--lengths", "64,128", "--repeats", "1", "--channels", "2", "--state", "2"});
    ASSERT_EQ(r.code, 0);
    std::istringstream in(r.out);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, kBenchCsvHeader);
    std::getline(in, line);
    EXPECT_EQ(line.rfind("64,", 0), 0u);
    std::getline(in, line);
    EXPECT_EQ(line.rfind("128,", 0), 0u);
    EXPECT_EQ(cli({"bench-scan", "--lengths", "64,100", "--repeats", "1", "--check"}).code, kExitValidation);
}
