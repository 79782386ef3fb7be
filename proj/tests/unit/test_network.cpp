#include <gtest/gtest.h>

#include <algorithm>

#include "tkmamba/gradcheck.hpp"
#include "tkmamba/network.hpp"
#include "tkmamba/ops.hpp"
#include "tkmamba/textbridge.hpp"

using namespace tkm;

namespace {

Tensor<double> rand_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = rng.normal() * scale;
    return Tensor<double>::from_data(s, v);
}

std::vector<Tensor<double>> leaves_of(const ParamList<double>& params) {
    std::vector<Tensor<double>> out;
    for (auto& p : params) out.push_back(p.second);
    return out;
}

void fill(Tensor<double>& t, double v) { std::fill(t.storage().begin(), t.storage().end(), v); }

// Small model with every residual branch live so gradients reach all parameters.
NetworkConfig toy_config(std::size_t input = 16) {
    NetworkConfig c = network_preset("desk");
    c.input_size = input;
    c.classes = 2;
    c.embed_dim = 6;
    c.controller_hidden = 5;
    c.mamba.zero_init_out = false;
    c.kan.zero_init_out = false;
    return c;
}

}  // namespace

TEST(Shapes, PaperPresetMatchesStageContract) {
    auto s = infer_shapes(network_preset("paper"), 1);
    EXPECT_EQ(s.stem, (Shape{1, 48, 48, 48, 48}));
    EXPECT_EQ(s.stages[0], (Shape{1, 48, 48, 48, 48}));
    EXPECT_EQ(s.stages[1], (Shape{1, 96, 24, 24, 24}));
    EXPECT_EQ(s.stages[2], (Shape{1, 192, 12, 12, 12}));
    EXPECT_EQ(s.stages[3], (Shape{1, 384, 6, 6, 6}));
    EXPECT_EQ(s.decoder, (Shape{1, 48, 96, 96, 96}));
    EXPECT_EQ(s.logits, (Shape{1, 3, 96, 96, 96}));
    EXPECT_EQ(s.visual_embedding, (Shape{1, 512}));
    EXPECT_EQ(network_preset("paper").embed_hidden(), 768u);
}

TEST(Shapes, InvalidConfigsRejected) {
    auto c = network_preset("desk");
    c.input_size = 40;
    EXPECT_THROW(validate_network_config(c), ValidationError);
    c = network_preset("desk");
    c.dims[2] = 0;
    EXPECT_THROW(validate_network_config(c), ValidationError);
    EXPECT_THROW(network_preset("huge"), ValidationError);
}

TEST(Shapes, DeskForwardMatchesInference) {
    Rng rng(1);
    auto cfg = network_preset("desk");
    TkMamba<float> net(cfg, rng);
    auto expect = infer_shapes(cfg, 1);
    std::vector<float> v(32 * 32 * 32);
    for (auto& x : v) x = static_cast<float>(rng.normal());
    auto x = Tensor<float>::from_data({1, 1, 32, 32, 32}, v);
    auto E = synth_embeddings({"liver", "tumor", "kidney"}, 3).matrix<float>(1);
    NoGradGuard ng;
    auto enc = net.encode(x);
    EXPECT_EQ(enc.stem.shape(), expect.stem);
    for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(enc.stages[l].shape(), expect.stages[l]);
    auto out = net.forward(x, E, &E);
    EXPECT_EQ(out.logits.shape(), expect.logits);
    EXPECT_EQ(out.features.shape(), expect.visual_embedding);
    EXPECT_EQ(out.presence.shape(), (Shape{1, 3}));
    for (float v2 : out.logits.data()) ASSERT_TRUE(std::isfinite(v2));
    auto m = out.masks();
    for (float v2 : m.data()) ASSERT_TRUE(v2 == 0.0f || v2 == 1.0f);
}

TEST(Stem, WrongChannelCountRejected) {
    Rng rng(2);
    TkMamba<double> net(toy_config(), rng);
    EXPECT_THROW(net.stem(Tensor<double>::zeros({1, 2, 16, 16, 16})), ShapeError);
}

TEST(Stem, ZeroInputZeroBiasGivesZero) {
    Rng rng(3);
    TkMamba<double> net(toy_config(), rng);
    fill(net.stem_b, 0.0);
    auto y = net.stem(Tensor<double>::zeros({1, 1, 16, 16, 16}));
    EXPECT_EQ(y.shape(), (Shape{1, 4, 8, 8, 8}));
    for (double v : y.data()) ASSERT_EQ(v, 0.0);
}

TEST(Stem, Gradcheck) {
    Rng rng(4);
    TkMamba<double> net(toy_config(), rng);
    auto x = rand_tensor({1, 1, 16, 16, 16}, rng);
    auto r = rand_tensor({1, 4, 8, 8, 8}, rng);
    GradcheckOptions opt;
    opt.step = 1e-5;
    auto res = check_gradients("stem", [&] { return sum(mul(net.stem(x), r)); },
                               {net.stem_w, net.stem_b, net.stem_norm_g, net.stem_norm_b, net.stem_alpha, x}, 1e-4, opt);
    EXPECT_TRUE(res.passed) << res.max_rel_error;
}

TEST(Stage, ZeroResidualBranchesReduceToEgsc) {
    Rng rng(5);
    NetworkConfig cfg = network_preset("desk");
    KMambaLayer<double> layer(4, cfg, rng);
    auto z = rand_tensor({1, 4, 3, 2, 3}, rng);
    auto a = layer.forward(z, {});
    auto b = layer.egsc.forward(z);
    for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.at(i), b.at(i));
}

TEST(Stage, FullStageGradcheck) {
    Rng rng(6);
    auto cfg = toy_config();
    TkMamba<double> net(cfg, rng);
    auto z = rand_tensor({1, 4, 4, 4, 4}, rng);
    auto r = rand_tensor({1, 8, 2, 2, 2}, rng);
    auto rs = rand_tensor({1, 4, 4, 4, 4}, rng);
    auto loss = [&] {
        auto skip = net.stages[0][0].forward(z, {});
        auto down = conv3d(instance_norm(skip, net.down_norm_g[0], net.down_norm_b[0]), net.down_w[0], &net.down_b[0], 2, 1);
        return add(sum(mul(down, r)), sum(mul(skip, rs)));
    };
    ParamList<double> params;
    net.stages[0][0].parameters("stage0", params);
    auto leaves = leaves_of(params);
    for (auto* t : {&net.down_norm_g[0], &net.down_norm_b[0], &net.down_w[0], &net.down_b[0], &z}) leaves.push_back(*t);
    GradcheckOptions opt;
    opt.step = 1e-5;
    opt.max_coords_per_leaf = 8;
    auto res = check_gradients("stage", loss, leaves, 1e-4, opt);
    EXPECT_TRUE(res.passed) << res.max_rel_error;
}

TEST(Decoder, ZeroWeightsGiveConstantLastBias) {
    Rng rng(7);
    TkMamba<double> net(toy_config(), rng);
    ParamList<double> params = net.parameters();
    for (auto& [name, t] : params)
        if (name.rfind("dec.", 0) == 0) fill(t, 0.0);
    auto x = rand_tensor({1, 1, 16, 16, 16}, rng);
    NoGradGuard ng;
    auto enc = net.encode(x);
    for (double b : {0.0, 0.7, 2.5}) {
        fill(net.dec_b[0].bias, b);
        auto dec = net.decode(x, enc);
        EXPECT_EQ(dec.shape(), (Shape{1, 4, 16, 16, 16}));
        for (double v : dec.data()) ASSERT_EQ(v, b);
    }
}

TEST(Decoder, SkipMismatchRejected) {
    Rng rng(8);
    TkMamba<double> net(toy_config(), rng);
    NoGradGuard ng;
    auto enc = net.encode(rand_tensor({1, 1, 16, 16, 16}, rng));
    EXPECT_THROW(net.decode(rand_tensor({1, 1, 18, 16, 16}, rng), enc), ShapeError);
}

TEST(Decoder, Gradcheck) {
    Rng rng(9);
    TkMamba<double> net(toy_config(), rng);
    auto x = rand_tensor({1, 1, 16, 16, 16}, rng);
    EncoderOutput<double> enc;
    enc.stages = {rand_tensor({1, 4, 8, 8, 8}, rng), rand_tensor({1, 8, 4, 4, 4}, rng),
                  rand_tensor({1, 16, 2, 2, 2}, rng), rand_tensor({1, 32, 1, 1, 1}, rng)};
    auto r = rand_tensor({1, 4, 16, 16, 16}, rng);
    std::vector<Tensor<double>> leaves{x, enc.stages[0], enc.stages[1], enc.stages[2], enc.stages[3]};
    for (auto& [name, t] : net.parameters())
        if (name.rfind("dec.", 0) == 0) leaves.push_back(t);
    GradcheckOptions opt;
    opt.step = 1e-5;
    opt.max_coords_per_leaf = 6;
    auto res = check_gradients("decoder", [&] { return sum(mul(net.decode(x, enc), r)); }, leaves, 1e-4, opt);
    EXPECT_TRUE(res.passed) << res.max_rel_error;
}

TEST(VisualEmbed, WidthAndConstantInvariance) {
    Rng rng(10);
    TkMamba<double> net(network_preset("desk"), rng);
    std::vector<double> chan(32);
    for (auto& c : chan) c = rng.normal();
    auto constant = [&](std::size_t n) {
        std::vector<double> v;
        for (double c : chan) v.insert(v.end(), n * n * n, c);
        return Tensor<double>::from_data({1, 32, n, n, n}, v);
    };
    auto f1 = net.visual_embed(constant(1));
    auto f3 = net.visual_embed(constant(3));
    ASSERT_EQ(f1.shape(), (Shape{1, 512}));
    for (std::size_t i = 0; i < 512; ++i) EXPECT_NEAR(f1.at(i), f3.at(i), 1e-12);
    EXPECT_THROW(net.visual_embed(rand_tensor({1, 16, 2, 2, 2}, rng)), ShapeError);
}

TEST(VisualEmbed, Gradcheck) {
    Rng rng(11);
    TkMamba<double> net(toy_config(), rng);
    auto bottom = rand_tensor({2, 32, 2, 1, 2}, rng);
    auto r = rand_tensor({2, 6}, rng);
    GradcheckOptions opt;
    opt.step = 1e-5;
    auto res = check_gradients("visual_embed", [&] { return sum(mul(net.visual_embed(bottom), r)); },
                               {bottom, net.embed_hidden_w, net.embed_hidden_b, net.embed_norm_g, net.embed_norm_b,
                                net.embed_out_w, net.embed_out_b},
                               1e-4, opt);
    EXPECT_TRUE(res.passed) << res.max_rel_error;
}

TEST(SegHead, ZeroControllerGivesFinalBias) {
    Rng rng(12);
    auto cfg = toy_config();
    cfg.classes = 1;
    TkMamba<double> net(cfg, rng);
    fill(net.ctrl_w2, 0.0);
    fill(net.ctrl_b2, 0.0);
    const double beta = -1.25;
    net.ctrl_b2.at(cfg.head_params() - 1) = beta;
    auto logits = net.seg_head(rand_tensor({2, 4, 3, 2, 5}, rng), rand_tensor({1, 6}, rng));
    EXPECT_EQ(logits.shape(), (Shape{2, 1, 3, 2, 5}));
    for (double v : logits.data()) ASSERT_EQ(v, beta);
}

TEST(SegHead, ClassPermutationIsExact) {
    Rng rng(13);
    auto cfg = toy_config();
    cfg.classes = 3;
    TkMamba<double> net(cfg, rng);
    auto dec = rand_tensor({2, 4, 3, 3, 2}, rng);
    auto E = rand_tensor({3, 6}, rng);
    const std::vector<std::size_t> perm{2, 0, 1};
    auto Ep = gather_axis(E, 0, perm);
    auto a = net.seg_head(dec, E);
    auto b = net.seg_head(dec, Ep);
    const std::size_t V = 18;
    for (std::size_t bi = 0; bi < 2; ++bi)
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t v = 0; v < V; ++v)
                ASSERT_EQ(b.at((bi * 3 + k) * V + v), a.at((bi * 3 + perm[k]) * V + v));
}

TEST(SegHead, ClassCountMismatchRejected) {
    Rng rng(14);
    TkMamba<double> net(toy_config(), rng);
    EXPECT_THROW(net.seg_head(rand_tensor({1, 4, 2, 2, 2}, rng), rand_tensor({3, 6}, rng)), ValidationError);
    EXPECT_THROW(net.seg_head(rand_tensor({1, 4, 2, 2, 2}, rng), rand_tensor({2, 5}, rng)), ShapeError);
}

TEST(SegHead, GradcheckThroughController) {
    Rng rng(15);
    TkMamba<double> net(toy_config(), rng);
    auto dec = rand_tensor({2, 4, 2, 3, 2}, rng);
    auto E = rand_tensor({2, 6}, rng);
    auto r = rand_tensor({2, 2, 2, 3, 2}, rng);
    GradcheckOptions opt;
    opt.step = 1e-5;
    auto res = check_gradients("seg_head", [&] { return sum(mul(net.seg_head(dec, E), r)); },
                               {dec, E, net.ctrl_w1, net.ctrl_b1, net.ctrl_w2, net.ctrl_b2}, 1e-4, opt);
    EXPECT_TRUE(res.passed) << res.max_rel_error;
}

TEST(Network, EndToEndGradcheck) {
    Rng rng(16);
    TkMamba<double> net(toy_config(), rng);
    auto x = rand_tensor({1, 1, 16, 16, 16}, rng);
    auto E = rand_tensor({2, 6}, rng);
    auto Ft = rand_tensor({2, 6}, rng);
    auto r = rand_tensor({1, 2, 16, 16, 16}, rng, 0.1);
    auto Y = Tensor<double>::from_data({1, 2}, {1, 0});
    auto loss = [&] {
        auto out = net.forward(x, E, &Ft);
        return add(sum(mul(out.logits, r)), contrastive_loss(out.presence, Y));
    };
    auto leaves = leaves_of(net.parameters());
    leaves.push_back(x);
    leaves.push_back(E);
    leaves.push_back(Ft);
    GradcheckOptions opt;
    opt.step = 1e-5;
    opt.max_coords_per_leaf = 2;
    auto res = check_gradients("end_to_end", loss, leaves, 1e-3, opt);
    EXPECT_TRUE(res.passed) << res.max_rel_error;
}

TEST(Network, ForwardIsDeterministic) {
    auto cfg = toy_config();
    Rng r1(17), r2(17);
    TkMamba<double> a(cfg, r1), b(cfg, r2);
    Rng data(18);
    auto x = rand_tensor({1, 1, 16, 16, 16}, data);
    auto E = rand_tensor({2, 6}, data);
    NoGradGuard ng;
    auto ya = a.forward(x, E, &E);
    auto yb = b.forward(x, E, &E);
    auto yc = a.forward(x, E, &E);
    for (std::size_t i = 0; i < ya.logits.numel(); ++i) {
        ASSERT_EQ(ya.logits.at(i), yb.logits.at(i));
        ASSERT_EQ(ya.logits.at(i), yc.logits.at(i));
    }
    for (std::size_t i = 0; i < ya.presence.numel(); ++i) ASSERT_EQ(ya.presence.at(i), yb.presence.at(i));
}

TEST(Network, ParameterNamesUnique) {
    Rng rng(19);
    TkMamba<double> net(network_preset("desk"), rng);
    auto params = net.parameters();
    std::vector<std::string> names;
    for (auto& p : params) names.push_back(p.first);
    std::sort(names.begin(), names.end());
    EXPECT_EQ(std::adjacent_find(names.begin(), names.end()), names.end());
    EXPECT_GT(params.size(), 100u);
}
