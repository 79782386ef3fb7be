#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "tkmamba/gradcheck.hpp"
#include "tkmamba/ops.hpp"
#include "tkmamba/random.hpp"
#include "tkmamba/textbridge.hpp"

using namespace tkm;

namespace {

std::string container(const std::vector<std::size_t>& lengths) {
    std::string s = "{\"dim\":512,\"classes\":[";
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        if (i) s += ",";
        s += "{\"name\":\"c" + std::to_string(i) + "\",\"prompt\":\"A photo of a c" + std::to_string(i) +
             "\",\"embedding\":[";
        for (std::size_t j = 0; j < lengths[i]; ++j) s += (j ? ",0.25" : "0.25");
        s += "]}";
    }
    return s + "]}";
}

double naive_bce(double s, double y) {
    const double p = 1.0 / (1.0 + std::exp(-s));
    return -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
}

Tensor<double> rand_tensor(const Shape& shape, Rng& rng) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = rng.normal();
    return Tensor<double>::from_data(shape, v);
}

}  // namespace

TEST(Embeddings, LoadsWellFormedContainer) {
    auto set = parse_embeddings(container({512, 512}));
    EXPECT_EQ(set.dim, 512u);
    EXPECT_EQ(set.entries.size(), 2u);
    EXPECT_EQ(set.branch(1).size(), 2u);
    EXPECT_EQ(set.matrix<double>(1).shape(), (Shape{2, 512}));
}

TEST(Embeddings, WrongLengthNamesOffendingClass) {
    try {
        parse_embeddings(container({512, 511}));
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("511"), std::string::npos);
    }
}

TEST(Embeddings, RejectsMalformedAndDuplicates) {
    EXPECT_THROW(parse_embeddings("{\"dim\":512,"), ValidationError);
    EXPECT_THROW(parse_embeddings("{\"classes\":[]}"), ValidationError);
    auto set = parse_embeddings(container({512}));
    set.entries.push_back(set.entries[0]);
    EXPECT_THROW(validate_embeddings(set), ValidationError);
    set.entries[1].branch = 2;  // same name in another branch is fine
    EXPECT_NO_THROW(validate_embeddings(set));
}

TEST(Embeddings, SaveLoadIsBitExact) {
    auto set = synth_embeddings({"liver", "tumor", "kidney"}, 7);
    set.entries[0].vector[3] = 0.1 + 1e-17;
    set.entries[1].vector[5] = -3.0e-300;
    const auto path = std::filesystem::temp_directory_path() / "tkm_embed_roundtrip.json";
    save_embeddings(set, path.string());
    auto back = load_embeddings(path.string());
    std::filesystem::remove(path);
    ASSERT_EQ(back.entries.size(), set.entries.size());
    for (std::size_t i = 0; i < set.entries.size(); ++i) {
        EXPECT_EQ(back.entries[i].name, set.entries[i].name);
        EXPECT_EQ(back.entries[i].branch, set.entries[i].branch);
        EXPECT_EQ(back.entries[i].vector, set.entries[i].vector);
    }
}

TEST(Embeddings, MissingFileIsIoError) { EXPECT_THROW(load_embeddings("/nonexistent/embeddings.json"), IoError); }

TEST(SynthEmbeddings, UnitNormDeterministicAndSeparated) {
    std::vector<std::string> names{"a", "b", "c", "d", "e", "f", "g", "h"};
    auto s1 = synth_embeddings(names, 42);
    auto s2 = synth_embeddings(names, 42);
    auto s3 = synth_embeddings(names, 43);
    EXPECT_EQ(s1.entries.size(), 16u);
    EXPECT_EQ(serialize_embeddings(s1), serialize_embeddings(s2));
    EXPECT_NE(serialize_embeddings(s1), serialize_embeddings(s3));
    for (const auto& e : s1.entries) {
        double ss = 0;
        for (double v : e.vector) ss += v * v;
        EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-6);
    }
    for (int b : {1, 2}) {
        auto rows = s1.branch(b);
        double worst = 0;
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = i + 1; j < rows.size(); ++j) {
                double dot = 0;
                for (std::size_t k = 0; k < 512; ++k) dot += rows[i]->vector[k] * rows[j]->vector[k];
                worst = std::max(worst, std::abs(dot));
            }
        EXPECT_LT(worst, 0.5);
    }
}

TEST(SynthEmbeddings, ImpossibleSeparationThrows) {
    std::vector<std::string> names;
    for (int i = 0; i < 12; ++i) names.push_back("c" + std::to_string(i));
    EXPECT_THROW(synth_embeddings(names, 1, 2), ValidationError);
}

TEST(Cosine, HandValues) {
    std::vector<double> e{0.3, -0.4, 1.2};
    EXPECT_NEAR(cosine_similarity(e, e), 1.0, 1e-15);
    std::vector<double> x{1, 0, 0}, y{0, 1, 0}, xy{1, 1, 0};
    EXPECT_EQ(cosine_similarity(x, y), 0.0);
    EXPECT_NEAR(cosine_similarity(xy, x), 0.70710678118654757, 1e-15);
    std::vector<double> z{0, 0, 0};
    EXPECT_THROW(cosine_similarity(z, x), ValidationError);
}

TEST(Similarity, MatchingRowIsOneAndRowMax) {
    Rng rng(1);
    auto ft = rand_tensor({4, 16}, rng);
    auto fv = Tensor<double>::from_data({1, 16}, std::vector<double>(ft.data().begin() + 32, ft.data().begin() + 48));
    auto S = similarity_matrix(fv, ft);
    EXPECT_NEAR(S.at(2), 1.0, 1e-12);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_LE(S.at(k), S.at(2));
}

TEST(Similarity, EntriesBounded) {
    Rng rng(2);
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
        auto S = similarity_matrix(rand_tensor({3, 8}, rng), rand_tensor({5, 8}, rng));
        for (double v : S.data()) worst = std::max(worst, std::abs(v));
    }
    EXPECT_LE(worst, 1.0 + 1e-6);
}

TEST(Similarity, ZeroRowRejected) {
    Rng rng(3);
    EXPECT_THROW(similarity_matrix(Tensor<double>::zeros({1, 4}), rand_tensor({2, 4}, rng)), ValidationError);
}

TEST(Similarity, GradcheckThroughNormalization) {
    Rng rng(4);
    auto fv = rand_tensor({2, 6}, rng);
    auto ft = rand_tensor({3, 6}, rng);
    auto r = rand_tensor({2, 3}, rng);
    GradcheckOptions opt;
    opt.step = 1e-5;
    auto res = check_gradients("similarity", [&] { return sum(mul(similarity_matrix(fv, ft), r)); }, {fv, ft}, 1e-5, opt);
    EXPECT_TRUE(res.passed) << res.max_rel_error;
}

TEST(Contrastive, ZeroLogitsGiveLn2) {
    auto S = Tensor<double>::zeros({2, 3});
    auto Y = Tensor<double>::from_data({2, 3}, {1, 0, 1, 0, 0, 1});
    EXPECT_NEAR(contrastive_loss(S, Y).item(), std::log(2.0), 1e-9);
}

TEST(Contrastive, SaturatedLogitsNearZero) {
    auto Y = Tensor<double>::from_data({1, 4}, {1, 0, 1, 0});
    auto S = Tensor<double>::from_data({1, 4}, {10, -10, 10, -10});
    EXPECT_LT(contrastive_loss(S, Y).item(), 1e-4);
}

TEST(Contrastive, MatchesNaiveOracle) {
    Rng rng(5);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> s(6), y(6);
        double naive = 0;
        for (std::size_t i = 0; i < 6; ++i) {
            s[i] = -5.0 + 10.0 * rng.uniform();
            y[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
            naive += naive_bce(s[i], y[i]);
        }
        naive /= 6.0;
        const double got = contrastive_loss(Tensor<double>::from_data({2, 3}, s), Tensor<double>::from_data({2, 3}, y)).item();
        EXPECT_GE(got, 0.0);
        worst = std::max(worst, std::abs(got - naive));
    }
    EXPECT_LT(worst, 1e-6);
}

TEST(Contrastive, CosineLogitsBoundPerElementLoss) {
    Rng rng(6);
    const double lo = std::log1p(std::exp(-1.0)), hi = std::log1p(std::exp(1.0));
    for (int trial = 0; trial < 200; ++trial) {
        auto S = similarity_matrix(rand_tensor({1, 8}, rng), rand_tensor({1, 8}, rng));
        auto Y = Tensor<double>::scalar(rng.uniform() < 0.5 ? 1.0 : 0.0);
        const double l = contrastive_loss(reshape(S, {}), Y).item();
        EXPECT_GE(l, lo - 1e-12);
        EXPECT_LE(l, hi + 1e-12);
    }
}

TEST(Contrastive, NonBinaryLabelsRejected) {
    EXPECT_THROW(contrastive_loss(Tensor<double>::zeros({1, 2}), Tensor<double>::full({1, 2}, 0.5)), ValidationError);
}

TEST(Presence, DerivedFromMaskNonEmptiness) {
    auto m = Tensor<double>::zeros({2, 3, 2, 2, 2});
    m.at(0 * 8 + 5) = 1;       // b0 k0
    m.at((1 * 3 + 2) * 8) = 1;  // b1 k2
    auto Y = presence_labels(m);
    EXPECT_EQ(std::vector<double>(Y.data().begin(), Y.data().end()), (std::vector<double>{1, 0, 0, 0, 0, 1}));
}

TEST(ChunkAverage, Cases) {
    std::vector<double> v{0.5, -1.0, 2.0};
    EXPECT_EQ(branch2_chunk_average({v}).vector, v);
    EXPECT_EQ(branch2_chunk_average({v, v}).vector, v);
    auto neg = v;
    for (auto& x : neg) x = -x;
    auto deg = branch2_chunk_average({v, neg});
    EXPECT_TRUE(deg.degenerate);
    for (double x : deg.vector) EXPECT_EQ(x, 0.0);
    EXPECT_THROW(branch2_chunk_average({}), ValidationError);
    auto mean = branch2_chunk_average({{1, 2}, {3, 6}, {2, 1}}).vector;
    EXPECT_NEAR(mean[0], 2.0, 1e-15);
    EXPECT_NEAR(mean[1], 3.0, 1e-15);
}
