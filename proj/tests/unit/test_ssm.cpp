#include <gtest/gtest.h>

#include <cmath>

#include "tkmamba/gradcheck.hpp"
#include "tkmamba/ops.hpp"
#include "tkmamba/ssm.hpp"

using namespace tkm;

namespace {

std::vector<double> randv(std::size_t n, Rng& rng, double lo, double hi) {
    std::vector<double> v(n);
    for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
    return v;
}

Tensor<double> rand_tensor(const Shape& s, Rng& rng, double lo, double hi) {
    return Tensor<double>::from_data(s, randv(numel_of(s), rng, lo, hi));
}

}  // namespace

TEST(Zoh, ExpOracleValues) {
    // exp(-0.1) and exp(-1) to 17 significant digits
    auto d1 = zoh_discretize(-1.0, 1.0, 0.1);
    EXPECT_NEAR(d1.a_bar, 0.90483741803595957, 1e-15);
    EXPECT_NEAR(d1.b_bar, 0.1, 1e-15);
    auto d2 = zoh_discretize(-2.0, 1.0, 0.5);
    EXPECT_NEAR(d2.a_bar, 0.36787944117144233, 1e-15);
}

TEST(Zoh, SmallDeltaIsIdentityDynamics) {
    auto d = zoh_discretize(-3.0, 2.0, 1e-12);
    EXPECT_NEAR(d.a_bar, 1.0, 1e-11);
    EXPECT_NEAR(d.b_bar, 0.0, 1e-11);
}

TEST(Zoh, FullModeMatchesClosedForm) {
    auto d = zoh_discretize(-1.0, 1.0, 0.1, ZohMode::Full);
    EXPECT_NEAR(d.b_bar, 0.095162581964040482, 1e-15);  // 1 - exp(-0.1)
}

TEST(Zoh, RejectsNonPositiveDelta) {
    EXPECT_THROW(zoh_discretize(-1.0, 1.0, 0.0), ValidationError);
    EXPECT_THROW(zoh_discretize(-1.0, 1.0, -0.5), ValidationError);
}

TEST(Scan, HandUnrolledRecurrence) {
    std::vector<double> a(3, 0.5), b(3, 1.0), c(3, 1.0), x{1, 0, 0};
    ScanInput<double> in{3, 1, a, b, c, x, {}};
    auto y = scan_sequential(in);
    EXPECT_EQ(y, (std::vector<double>{1.0, 0.5, 0.25}));
    auto yp = scan_parallel(in, 2);
    EXPECT_EQ(yp, y);
}

TEST(Scan, ZeroInputGivesZero) {
    Rng rng(1);
    const std::size_t L = 10, N = 3;
    auto a = randv(L * N, rng, 0, 1), b = randv(L * N, rng, -1, 1), c = randv(L * N, rng, -1, 1);
    std::vector<double> x(L, 0.0);
    auto y = scan_sequential(ScanInput<double>{L, N, a, b, c, x, {}});
    for (double v : y) EXPECT_EQ(v, 0.0);
}

TEST(Scan, SingleStep) {
    std::vector<double> a{0.3}, b{2.0}, c{1.5}, x{4.0};
    ScanInput<double> in{1, 1, a, b, c, x, {}};
    EXPECT_DOUBLE_EQ(scan_sequential(in)[0], 1.5 * 2.0 * 4.0);
    EXPECT_DOUBLE_EQ(scan_parallel(in)[0], 1.5 * 2.0 * 4.0);
}

TEST(Scan, UnitParametersGiveCumsum) {
    Rng rng(2);
    const std::size_t L = 200;
    std::vector<double> ones(L, 1.0);
    auto x = randv(L, rng, -1, 1);
    auto y = scan_parallel(ScanInput<double>{L, 1, ones, ones, ones, x, {}});
    double s = 0;
    for (std::size_t t = 0; t < L; ++t) {
        s += x[t];
        EXPECT_NEAR(y[t], s, 1e-12);
    }
}

TEST(Scan, ParallelMatchesSequentialOnRandomInstances) {
    Rng rng(3);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t L = 1 + rng.below(257);
        const std::size_t N = 1 + rng.below(8);
        auto a = randv(L * N, rng, -1, 1), b = randv(L * N, rng, -1, 1), c = randv(L * N, rng, -1, 1);
        auto x = randv(L, rng, -2, 2), h0 = randv(N, rng, -1, 1);
        ScanInput<double> in{L, N, a, b, c, x, h0};
        auto ys = scan_sequential(in);
        auto yp = scan_parallel(in, 1 + rng.below(80));
        for (std::size_t t = 0; t < L; ++t) worst = std::max(worst, std::abs(ys[t] - yp[t]));
    }
    EXPECT_LT(worst, 1e-10);
}

TEST(Scan, LengthMismatchThrows) {
    std::vector<double> a(3), b(3), c(3), x(2);
    EXPECT_THROW(scan_sequential(ScanInput<double>{3, 1, a, b, c, x, {}}), ShapeError);
    EXPECT_THROW(scan_parallel(ScanInput<double>{3, 1, a, b, c, x, {}}), ShapeError);
}

TEST(Scan, ZeroInputStateDecaysMonotonically) {
    Rng rng(4);
    const std::size_t L = 50;
    std::vector<double> a(L), b(L, 1.0), c(L, 1.0), x(L, 0.0), h0{1.0};
    for (auto& v : a) v = zoh_discretize(-0.5 - rng.uniform(), 1.0, 0.001 + 0.1 * rng.uniform()).a_bar;
    auto y = scan_sequential(ScanInput<double>{L, 1, a, b, c, x, h0});
    double prev = 1.0;
    for (double v : y) {
        EXPECT_LT(std::abs(v), prev);
        prev = std::abs(v);
    }
}

TEST(AffineScan, MatchesRunningComposition) {
    Rng rng(5);
    for (std::size_t n = 1; n <= 40; ++n) {
        auto a = randv(n, rng, -1, 1), b = randv(n, rng, -1, 1);
        auto sa = a, sb = b;
        affine_exclusive_scan(sa, sb);
        double ca = 1, cb = 0;
        for (std::size_t i = 0; i < n; ++i) {
            EXPECT_NEAR(sa[i], ca, 1e-14);
            EXPECT_NEAR(sb[i], cb, 1e-14);
            cb = a[i] * cb + b[i];
            ca = a[i] * ca;
        }
    }
}

TEST(SelectiveScan, KernelsAgreeWithPerLaneOracle) {
    Rng rng(6);
    const std::size_t B = 2, L = 131, D = 3, N = 5;
    for (ZohMode mode : {ZohMode::Simplified, ZohMode::Full}) {
        auto u = randv(B * L * D, rng, -1, 1), dt = randv(B * L * D, rng, 0.001, 0.2);
        auto A = randv(D * N, rng, -3, -0.1), Bm = randv(B * L * N, rng, -1, 1), Cm = randv(B * L * N, rng, -1, 1);
        auto Ds = randv(D, rng, -1, 1);
        SelectiveScanArgs<double> args{B, L, D, N, u.data(), dt.data(), A.data(), Bm.data(), Cm.data(), Ds.data(), mode};
        std::vector<double> ys(B * L * D), yp(B * L * D);
        selective_scan_sequential(args, ys.data());
        selective_scan_parallel(args, yp.data());
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t d = 0; d < D; ++d) {
                std::vector<double> ab(L * N), bb(L * N), cb(L * N), x(L);
                for (std::size_t t = 0; t < L; ++t) {
                    x[t] = u[(b * L + t) * D + d];
                    for (std::size_t n = 0; n < N; ++n) {
                        auto z = zoh_discretize(A[d * N + n], Bm[(b * L + t) * N + n], dt[(b * L + t) * D + d], mode);
                        ab[t * N + n] = z.a_bar;
                        bb[t * N + n] = z.b_bar;
                        cb[t * N + n] = Cm[(b * L + t) * N + n];
                    }
                }
                auto yo = scan_sequential(ScanInput<double>{L, N, ab, bb, cb, x, {}});
                for (std::size_t t = 0; t < L; ++t) {
                    const std::size_t i = (b * L + t) * D + d;
                    EXPECT_NEAR(ys[i], yo[t] + Ds[d] * x[t], 1e-12);
                    EXPECT_NEAR(yp[i], ys[i], 1e-12);
                }
            }
        }
    }
}

TEST(SelectiveScan, Gradcheck) {
    for (ZohMode mode : {ZohMode::Simplified, ZohMode::Full}) {
        Rng rng(7);
        const std::size_t B = 2, L = 6, D = 2, N = 3;
        auto u = rand_tensor({B, L, D}, rng, -1, 1);
        auto dt = rand_tensor({B, L, D}, rng, 0.05, 0.5);
        auto A = rand_tensor({D, N}, rng, -2, -0.2);
        auto Bm = rand_tensor({B, L, N}, rng, -1, 1);
        auto Cm = rand_tensor({B, L, N}, rng, -1, 1);
        auto Ds = rand_tensor({D}, rng, -1, 1);
        auto r = rand_tensor({B, L, D}, rng, -1, 1);
        GradcheckOptions opt;
        opt.step = 1e-5;
        opt.max_coords_per_leaf = 100;
        auto res = check_gradients(
            "selective_scan", [&] { return sum(mul(selective_scan(u, dt, A, Bm, Cm, Ds, mode), r)); },
            {u, dt, A, Bm, Cm, Ds}, 1e-6, opt);
        EXPECT_TRUE(res.passed) << res.max_rel_error;
    }
}

TEST(SelectiveScan, RejectsNonPositiveDelta) {
    auto u = Tensor<double>::zeros({1, 2, 1});
    auto dt = Tensor<double>::zeros({1, 2, 1});
    EXPECT_THROW(selective_scan(u, dt, Tensor<double>::full({1, 1}, -1.0), Tensor<double>::zeros({1, 2, 1}),
                                Tensor<double>::zeros({1, 2, 1}), Tensor<double>::zeros({1})),
                 ValidationError);
}

TEST(Mamba, DtRankAndInitRanges) {
    Rng rng(8);
    MambaConfig cfg;
    cfg.d_model = 20;
    MambaBlock<double> block(cfg, rng);
    EXPECT_EQ(cfg.resolved_dt_rank(), 2u);
    for (double b : block.dt_proj_b.data()) {
        const double dt = std::log1p(std::exp(b));
        EXPECT_GE(dt, 0.001 - 1e-12);
        EXPECT_LE(dt, 0.1 + 1e-12);
    }
    for (double a : block.A_log.data()) EXPECT_LT(-std::exp(a), 0.0);
}

TEST(Mamba, ZeroOutProjectionGivesZeros) {
    Rng rng(9);
    MambaConfig cfg;
    cfg.d_model = 4;
    MambaBlock<double> block(cfg, rng);
    auto x = rand_tensor({2, 7, 4}, rng, -1, 1);
    auto y = block.forward(x);
    EXPECT_EQ(y.shape(), (Shape{2, 7, 4}));
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Mamba, CausalityOverRandomPositions) {
    for (bool selective : {true, false}) {
        Rng rng(10);
        MambaConfig cfg;
        cfg.d_model = 4;
        cfg.zero_init_out = false;
        cfg.selective = selective;
        MambaBlock<double> block(cfg, rng);
        const std::size_t L = 24;
        auto x = rand_tensor({1, L, 4}, rng, -1, 1);
        auto y = block.forward(x);
        for (int trial = 0; trial < 20; ++trial) {
            const std::size_t t = rng.below(L);
            auto x2 = x.clone();
            x2.storage()[t * 4 + rng.below(4)] += 0.5 + rng.uniform();
            auto y2 = block.forward(x2);
            for (std::size_t s = 0; s < t * 4; ++s) ASSERT_EQ(y.at(s), y2.at(s)) << "position " << s / 4;
            bool changed = false;
            for (std::size_t s = t * 4; s < t * 4 + 4; ++s) changed |= y.at(s) != y2.at(s);
            EXPECT_TRUE(changed);
        }
    }
}

TEST(Mamba, GradcheckTinyInstance) {
    for (bool selective : {true, false}) {
        Rng rng(11);
        MambaConfig cfg;
        cfg.d_model = 4;
        cfg.zero_init_out = false;
        cfg.selective = selective;
        MambaBlock<double> block(cfg, rng);
        auto x = rand_tensor({1, 5, 4}, rng, -1, 1);
        auto r = rand_tensor({1, 5, 4}, rng, -1, 1);
        std::vector<Tensor<double>> leaves{x};
        ParamList<double> params;
        block.parameters("", params);
        for (auto& p : params) leaves.push_back(p.second);
        GradcheckOptions opt;
        opt.step = 1e-3;
        auto res = check_gradients("mamba", [&] { return sum(mul(block.forward(x), r)); }, leaves, 1e-4, opt);
        EXPECT_TRUE(res.passed) << res.max_rel_error;
    }
}

TEST(Mamba, ShapeErrorOnWrongWidth) {
    Rng rng(12);
    MambaConfig cfg;
    cfg.d_model = 4;
    MambaBlock<double> block(cfg, rng);
    EXPECT_THROW(block.forward(Tensor<double>::zeros({1, 3, 5})), ShapeError);
}

TEST(Bench, EmitsOneRowPerLength) {
    ScanBenchOptions opt;
    opt.repeats = 1;
    auto rows = bench_scan({64, 128}, opt);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1].length, 128u);
    EXPECT_GE(rows[0].sequential_ms, 0.0);
    EXPECT_GE(rows[0].quadratic_ms, 0.0);
}
