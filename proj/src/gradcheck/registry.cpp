#include <memory>

#include "tkmamba/blocks.hpp"
#include "tkmamba/gradcheck.hpp"
#include "tkmamba/metrics.hpp"
#include "tkmamba/network.hpp"
#include "tkmamba/ops.hpp"
#include "tkmamba/ssm.hpp"
#include "tkmamba/textbridge.hpp"

namespace tkm {

namespace {

using D = Tensor<double>;
using Fn = std::function<D()>;
using Built = std::pair<Fn, std::vector<D>>;

D rnd(const Shape& s, Rng& rng, double scale = 1.0, double shift = 0.0) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = shift + scale * rng.normal();
    return D::from_data(s, v);
}

// keeps samples at least `gap` away from zero so kinks stay outside the stencil
D off_zero(const Shape& s, Rng& rng, double gap = 0.1) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) {
        const double m = gap + rng.uniform();
        x = rng.uniform() < 0.5 ? -m : m;
    }
    return D::from_data(s, v);
}

D positive(const Shape& s, Rng& rng, double lo = 0.5, double hi = 2.0) {
    std::vector<double> v(numel_of(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return D::from_data(s, v);
}

// random linear functional of the output, so every output direction is probed
D probe(const D& y, const D& r) { return sum(mul(y, r)); }

std::vector<D> leaves_of(const ParamList<double>& params) {
    std::vector<D> out;
    for (const auto& p : params) out.push_back(p.second);
    return out;
}

GradcheckCase unary_case(const std::string& name, D (*op)(const D&), bool avoid_zero = false, bool pos = false) {
    return {name, GradTier::Elementwise, 1e-5, 24, false, [=](std::uint64_t seed) -> Built {
                Rng rng(seed);
                const Shape s{2, 3, 4};
                D x = pos ? positive(s, rng) : avoid_zero ? off_zero(s, rng) : rnd(s, rng);
                D r = rnd(op(x).shape(), rng);
                return {[=] { return probe(op(x), r); }, {x}};
            }};
}

GradcheckCase binary_case(const std::string& name, D (*op)(const D&, const D&), bool pos_rhs = false) {
    return {name, GradTier::Elementwise, 1e-5, 24, false, [=](std::uint64_t seed) -> Built {
                Rng rng(seed);
                D a = rnd({2, 3, 4}, rng);
                D b = pos_rhs ? positive({3, 1}, rng) : rnd({3, 1}, rng);  // broadcast
                D r = rnd({2, 3, 4}, rng);
                return {[=] { return probe(op(a, b), r); }, {a, b}};
            }};
}

// x^3 with a deliberately wrong derivative (2x^2 instead of 3x^2)
D wrong_cube(const D& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.at(i) * x.at(i) * x.at(i);
    return make_result<double>(x.shape(), std::move(out), {x}, [](detail::TensorNode<double>& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * 2.0 * p->data[i] * p->data[i];
    });
}

NetworkConfig tiny_network() {
    NetworkConfig c = network_preset("desk");
    c.input_size = 16;
    c.classes = 2;
    c.embed_dim = 6;
    c.controller_hidden = 5;
    c.mamba.zero_init_out = false;
    c.kan.zero_init_out = false;
    return c;
}

MambaConfig live_mamba(std::size_t d_model, bool selective) {
    MambaConfig c;
    c.d_model = d_model;
    c.d_state = 4;
    c.selective = selective;
    c.zero_init_out = false;
    return c;
}

std::vector<GradcheckCase> build_registry() {
    const auto E = GradTier::Elementwise;
    const auto C = GradTier::Composite;
    std::vector<GradcheckCase> cases;

    cases.push_back(unary_case("neg", [](const D& x) { return neg(x); }));
    cases.push_back(unary_case("exp", [](const D& x) { return exp(x); }));
    cases.push_back(unary_case("log", [](const D& x) { return log(x); }, false, true));
    cases.push_back(unary_case("square", [](const D& x) { return square(x); }));
    cases.push_back(unary_case("sigmoid", [](const D& x) { return sigmoid(x); }));
    cases.push_back(unary_case("relu", [](const D& x) { return relu(x); }, true));
    cases.push_back(unary_case("gelu", [](const D& x) { return gelu(x); }));
    cases.push_back(unary_case("silu", [](const D& x) { return silu(x); }));
    cases.push_back(unary_case("softplus", [](const D& x) { return softplus(x); }));
    cases.push_back(unary_case("add_scalar", [](const D& x) { return add_scalar(x, 0.7); }));
    cases.push_back(unary_case("mul_scalar", [](const D& x) { return mul_scalar(x, -1.3); }));
    cases.push_back(unary_case("flip", [](const D& x) { return flip(x, 1); }));
    cases.push_back(unary_case("permute", [](const D& x) { return permute(x, {2, 0, 1}); }));
    cases.push_back(unary_case("slice", [](const D& x) { return slice(x, 2, 1, 2); }));
    cases.push_back(unary_case("gather_axis", [](const D& x) { return gather_axis(x, 2, {3, 0, 2, 1}); }));
    cases.push_back(unary_case("sum_axis", [](const D& x) { return sum_axis(x, 1); }));
    cases.push_back(unary_case("mean", [](const D& x) { return mul(mean(x), mean(x)); }));
    cases.push_back(unary_case("l2_normalize", [](const D& x) { return l2_normalize(reshape(x, {6, 4})); }));
    cases.push_back(binary_case("add", [](const D& a, const D& b) { return add(a, b); }));
    cases.push_back(binary_case("sub", [](const D& a, const D& b) { return sub(a, b); }));
    cases.push_back(binary_case("mul", [](const D& a, const D& b) { return mul(a, b); }));
    cases.push_back(binary_case("div", [](const D& a, const D& b) { return div(a, b); }, true));

    cases.push_back({"prelu", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = off_zero({2, 3, 2, 2, 2}, rng);
                         D a = rnd({3}, rng, 0.3);
                         D r = rnd({2, 3, 2, 2, 2}, rng);
                         return {[=] { return probe(prelu(x, a), r); }, {x, a}};
                     }});
    cases.push_back({"matmul", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D a = rnd({3, 4}, rng), b = rnd({4, 5}, rng), r = rnd({3, 5}, rng);
                         return {[=] { return probe(matmul(a, b), r); }, {a, b}};
                     }});
    cases.push_back({"bmm", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D a = rnd({2, 3, 4}, rng), b = rnd({2, 4, 2}, rng), r = rnd({2, 3, 2}, rng);
                         return {[=] { return probe(bmm(a, b), r); }, {a, b}};
                     }});
    cases.push_back({"linear", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({2, 3, 4}, rng), w = rnd({5, 4}, rng), b = rnd({5}, rng), r = rnd({2, 3, 5}, rng);
                         return {[=] { return probe(linear(x, w, &b), r); }, {x, w, b}};
                     }});
    cases.push_back({"concat_reshape_repeat", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D a = rnd({2, 3}, rng), b = rnd({2, 2}, rng), r = rnd({4, 2, 5}, rng);
                         return {[=] { return probe(repeat_new_axis(reshape(concat<double>({a, b}, 1), {2, 5}), 0, 4), r); },
                                 {a, b}};
                     }});
    cases.push_back({"adaptive_avg_pool3d", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({2, 3, 2, 3, 2}, rng), r = rnd({2, 3, 1, 1, 1}, rng);
                         return {[=] { return probe(adaptive_avg_pool3d_to_1(x), r); }, {x}};
                     }});
    cases.push_back({"conv3d", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({1, 2, 5, 4, 3}, rng), w = rnd({3, 2, 3, 3, 3}, rng), b = rnd({3}, rng);
                         D r = rnd({1, 3, 3, 2, 2}, rng);
                         return {[=] { return probe(conv3d(x, w, &b, 2, 1), r); }, {x, w, b}};
                     }});
    cases.push_back({"conv_transpose3d", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({1, 3, 2, 2, 3}, rng), w = rnd({3, 2, 2, 2, 2}, rng), b = rnd({2}, rng);
                         D r = rnd({1, 2, 4, 4, 6}, rng);
                         return {[=] { return probe(conv_transpose3d(x, w, &b, 2), r); }, {x, w, b}};
                     }});
    cases.push_back({"causal_depthwise_conv1d", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({2, 6, 3}, rng), w = rnd({3, 4}, rng), b = rnd({3}, rng), r = rnd({2, 6, 3}, rng);
                         return {[=] { return probe(causal_depthwise_conv1d(x, w, &b), r); }, {x, w, b}};
                     }});
    cases.push_back({"instance_norm", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({2, 3, 2, 2, 3}, rng), g = rnd({3}, rng), b = rnd({3}, rng);
                         D r = rnd({2, 3, 2, 2, 3}, rng);
                         return {[=] { return probe(instance_norm(x, g, b), r); }, {x, g, b}};
                     }});
    cases.push_back({"group_norm", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({2, 4, 2, 1, 3}, rng), g = rnd({4}, rng), b = rnd({4}, rng);
                         D r = rnd({2, 4, 2, 1, 3}, rng);
                         return {[=] { return probe(group_norm(x, 2, g, b), r); }, {x, g, b}};
                     }});
    cases.push_back({"layer_norm", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({2, 4, 3}, rng), g = rnd({4}, rng), b = rnd({4}, rng), r = rnd({2, 4, 3}, rng);
                         return {[=] { return probe(layer_norm(x, g, b, 1), r); }, {x, g, b}};
                     }});
    cases.push_back({"dropout", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({4, 6}, rng), r = rnd({4, 6}, rng);
                         const std::uint64_t mask_seed = seed + 1;
                         return {[=] {
                                     Rng mask(mask_seed);
                                     return probe(dropout(x, 0.3, true, mask), r);
                                 },
                                 {x}};
                     }});
    cases.push_back({"bce_with_logits", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({3, 4}, rng, 2.0);
                         std::vector<double> t(12);
                         for (auto& v : t) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
                         D y = D::from_data({3, 4}, t);
                         return {[=] { return bce_with_logits(x, y); }, {x}};
                     }});
    cases.push_back({"dice_loss", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({1, 2, 2, 3, 2}, rng, 2.0);
                         std::vector<double> t(24);
                         for (auto& v : t) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
                         D y = D::from_data({1, 2, 2, 3, 2}, t);
                         return {[=] { return dice_loss(x, y); }, {x}};
                     }});
    cases.push_back({"similarity_contrastive", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D fv = rnd({2, 5}, rng), ft = rnd({3, 5}, rng);
                         D y = D::from_data({2, 3}, {1, 0, 1, 0, 0, 1});
                         return {[=] { return contrastive_loss(similarity_matrix(fv, ft), y); }, {fv, ft}};
                     }});
    cases.push_back({"rational_group", E, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         RationalGroupActivation<double> act(4, 2);
                         D num = act.num, den = act.den;
                         for (auto& v : num.storage()) v += 0.05 * rng.normal();
                         for (auto& v : den.storage()) v += 0.05 * rng.normal();
                         D x = rnd({2, 3, 4}, rng, 1.5), r = rnd({2, 3, 4}, rng);
                         return {[=] { return probe(rational_group(x, num, den), r); }, {x, num, den}};
                     }});

    cases.push_back({"selective_scan", C, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         const std::size_t B = 1, L = 5, Dm = 4, N = 3;
                         D u = rnd({B, L, Dm}, rng), delta = positive({B, L, Dm}, rng, 0.05, 0.5);
                         D A = neg(positive({Dm, N}, rng, 0.2, 1.5));
                         A = D::from_data(A.shape(), std::vector<double>(A.data().begin(), A.data().end()));
                         D Bm = rnd({B, L, N}, rng), Cm = rnd({B, L, N}, rng), Ds = rnd({Dm}, rng), r = rnd({B, L, Dm}, rng);
                         return {[=] { return probe(selective_scan(u, delta, A, Bm, Cm, Ds), r); }, {u, delta, A, Bm, Cm, Ds}};
                     }});
    for (bool selective : {true, false}) {
        cases.push_back({selective ? "mamba_block" : "mamba_block_lti", C, 1e-5, 12, false,
                         [selective](std::uint64_t seed) -> Built {
                             Rng rng(seed);
                             auto block = std::make_shared<MambaBlock<double>>(live_mamba(4, selective), rng);
                             D x = rnd({1, 5, 4}, rng), r = rnd({1, 5, 4}, rng);
                             ParamList<double> params;
                             block->parameters("m", params);
                             auto leaves = leaves_of(params);
                             leaves.push_back(x);
                             return {[=] { return probe(block->forward(x), r); }, leaves};
                         }});
    }
    cases.push_back({"conv_block", C, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         auto block = std::make_shared<ConvBlock<double>>(2, 3, 3, rng);
                         D x = rnd({1, 2, 3, 3, 3}, rng), r = rnd({1, 3, 3, 3, 3}, rng);
                         ParamList<double> params;
                         block->parameters("c", params);
                         auto leaves = leaves_of(params);
                         leaves.push_back(x);
                         return {[=] { return probe(block->forward(x), r); }, leaves};
                     }});
    cases.push_back({"egsc", C, 1e-5, 12, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         auto block = std::make_shared<Egsc<double>>(2, rng);
                         D x = rnd({1, 2, 3, 3, 3}, rng), r = rnd({1, 2, 3, 3, 3}, rng);
                         ParamList<double> params;
                         block->parameters("e", params);
                         auto leaves = leaves_of(params);
                         leaves.push_back(x);
                         return {[=] { return probe(block->forward(x), r); }, leaves};
                     }});
    cases.push_back({"tom", C, 1e-5, 8, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         auto block = std::make_shared<Tom<double>>(2, live_mamba(2, true), rng);
                         D x = rnd({1, 2, 2, 2, 2}, rng), r = rnd({1, 2, 2, 2, 2}, rng);
                         ParamList<double> params;
                         block->parameters("t", params);
                         auto leaves = leaves_of(params);
                         leaves.push_back(x);
                         return {[=] { return probe(block->forward(x), r); }, leaves};
                     }});
    cases.push_back({"gr_kan", C, 1e-4, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         GrKanConfig kc;
                         kc.zero_init_out = false;
                         auto block = std::make_shared<GrKan<double>>(2, kc, rng);
                         D x = rnd({1, 2, 3, 3, 3}, rng), r = rnd({1, 2, 3, 3, 3}, rng);
                         ParamList<double> params;
                         block->parameters("k", params);
                         auto leaves = leaves_of(params);
                         leaves.push_back(x);
                         return {[=] { return probe(block->forward(x), r); }, leaves};
                     }});
    cases.push_back({"kmamba_layer", C, 1e-5, 6, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         auto layer = std::make_shared<KMambaLayer<double>>(4, tiny_network(), rng);
                         D x = rnd({1, 4, 2, 2, 2}, rng), r = rnd({1, 4, 2, 2, 2}, rng);
                         ParamList<double> params;
                         layer->parameters("l", params);
                         auto leaves = leaves_of(params);
                         leaves.push_back(x);
                         return {[=] { return probe(layer->forward(x, {}), r); }, leaves};
                     }});
    cases.push_back({"stem", C, 1e-5, 12, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         auto net = std::make_shared<TkMamba<double>>(tiny_network(), rng);
                         D x = rnd({1, 1, 16, 16, 16}, rng), r = rnd({1, 4, 8, 8, 8}, rng);
                         return {[=] { return probe(net->stem(x), r); },
                                 {net->stem_w, net->stem_b, net->stem_norm_g, net->stem_norm_b, net->stem_alpha, x}};
                     }});
    cases.push_back({"decoder", C, 1e-5, 3, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         auto net = std::make_shared<TkMamba<double>>(tiny_network(), rng);
                         D x = rnd({1, 1, 16, 16, 16}, rng), r = rnd({1, 4, 16, 16, 16}, rng);
                         EncoderOutput<double> enc;
                         enc.stages = {rnd({1, 4, 8, 8, 8}, rng), rnd({1, 8, 4, 4, 4}, rng), rnd({1, 16, 2, 2, 2}, rng),
                                       rnd({1, 32, 1, 1, 1}, rng)};
                         std::vector<D> leaves{x, enc.stages[0], enc.stages[1], enc.stages[2], enc.stages[3]};
                         for (const auto& [name, t] : net->parameters())
                             if (name.rfind("dec.", 0) == 0) leaves.push_back(t);
                         return {[=] { return probe(net->decode(x, enc), r); }, leaves};
                     }});
    cases.push_back({"visual_embed", C, 1e-5, 12, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         auto net = std::make_shared<TkMamba<double>>(tiny_network(), rng);
                         D x = rnd({2, 32, 2, 1, 2}, rng), r = rnd({2, 6}, rng);
                         std::vector<D> leaves{x};
                         for (const auto& [name, t] : net->parameters())
                             if (name.rfind("embed.", 0) == 0) leaves.push_back(t);
                         return {[=] { return probe(net->visual_embed(x), r); }, leaves};
                     }});
    cases.push_back({"seg_head", C, 1e-5, 12, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         auto net = std::make_shared<TkMamba<double>>(tiny_network(), rng);
                         D dec = rnd({1, 4, 2, 2, 2}, rng), e = rnd({2, 6}, rng), r = rnd({1, 2, 2, 2, 2}, rng);
                         std::vector<D> leaves{dec, e};
                         for (const auto& [name, t] : net->parameters())
                             if (name.rfind("head.", 0) == 0) leaves.push_back(t);
                         return {[=] { return probe(net->seg_head(dec, e), r); }, leaves};
                     }});
    cases.push_back({"total_loss", C, 1e-5, 24, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = rnd({1, 2, 2, 2, 2}, rng, 2.0), s = rnd({1, 2}, rng);
                         std::vector<double> t(16);
                         for (auto& v : t) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
                         D y = D::from_data({1, 2, 2, 2, 2}, t);
                         D py = D::from_data({1, 2}, {1, 0});
                         return {[=] { return total_loss(x, y, s, py).total; }, {x, s}};
                     }});

    cases.push_back({"tiny_model", GradTier::EndToEnd, 1e-5, 2, false, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         auto net = std::make_shared<TkMamba<double>>(tiny_network(), rng);
                         D x = rnd({1, 1, 16, 16, 16}, rng), e = rnd({2, 6}, rng), ft = rnd({2, 6}, rng);
                         D r = rnd({1, 2, 16, 16, 16}, rng, 0.1);
                         D y = D::from_data({1, 2}, {1, 0});
                         auto leaves = leaves_of(net->parameters());
                         leaves.insert(leaves.end(), {x, e, ft});
                         return {[=] {
                                     auto out = net->forward(x, e, &ft);
                                     return add(probe(out.logits, r), contrastive_loss(out.presence, y));
                                 },
                                 leaves};
                     }});

    cases.push_back({"negative_control_wrong_grad", E, 1e-5, 24, true, [](std::uint64_t seed) -> Built {
                         Rng rng(seed);
                         D x = off_zero({2, 3}, rng, 0.5);
                         return {[=] { return sum(wrong_cube(x)); }, {x}};
                     }});
    return cases;
}

}  // namespace

const std::vector<GradcheckCase>& registered_gradchecks() {
    static const std::vector<GradcheckCase> cases = build_registry();
    return cases;
}

}  // namespace tkm
