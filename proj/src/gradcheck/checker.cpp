#include <algorithm>
#include <cmath>
#include <numeric>

#include "tkmamba/gradcheck.hpp"
#include "tkmamba/random.hpp"

namespace tkm {

double tier_tolerance(GradTier tier) {
    switch (tier) {
        case GradTier::Elementwise: return 1e-6;
        case GradTier::Composite: return 1e-4;
        case GradTier::EndToEnd: return 1e-3;
    }
    return 0.0;
}

const char* tier_name(GradTier tier) {
    switch (tier) {
        case GradTier::Elementwise: return "elementwise";
        case GradTier::Composite: return "composite";
        case GradTier::EndToEnd: return "end_to_end";
    }
    return "?";
}

GradcheckResult check_gradients(const std::string& name, const std::function<Tensor<double>()>& loss_fn,
                                std::vector<Tensor<double>> leaves, double tolerance,
                                const GradcheckOptions& options) {
    for (auto& leaf : leaves) {
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    Tensor<double> loss = loss_fn();
    loss.backward();

    GradcheckResult result;
    result.name = name;
    result.tolerance = tolerance;
    Rng rng(options.seed);
    NoGradGuard no_grad;
    for (auto& leaf : leaves) {
        const std::size_t n = leaf.numel();
        std::vector<double> analytic(n, 0.0);
        if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

        std::vector<std::size_t> coords(n);
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (n > options.max_coords_per_leaf) {
            // Partial Fisher-Yates: first max_coords entries are a uniform sample.
            for (std::size_t i = 0; i < options.max_coords_per_leaf; ++i) {
                std::swap(coords[i], coords[i + rng.below(n - i)]);
            }
            coords.resize(options.max_coords_per_leaf);
        }
        auto& data = leaf.storage();
        for (std::size_t c : coords) {
            const double saved = data[c];
            double err = INFINITY, h = options.step;
            for (std::size_t attempt = 0; attempt <= options.kink_retries; ++attempt, h *= 0.1) {
                data[c] = saved + h;
                const double up = loss_fn().item();
                data[c] = saved - h;
                const double down = loss_fn().item();
                data[c] = saved;
                const double numeric = (up - down) / (2.0 * h);
                const double e = std::abs(analytic[c] - numeric) / std::max(1.0, std::abs(numeric));
                if (std::isfinite(e)) err = std::min(err, e);
                if (err < tolerance) break;
                if (attempt < options.kink_retries) ++result.retried;
            }
            result.max_rel_error = std::max(result.max_rel_error, std::isfinite(err) ? err : INFINITY);
            ++result.coords_checked;
        }
    }
    result.passed = result.max_rel_error < tolerance;
    return result;
}

GradcheckResult run_gradcheck_case(const GradcheckCase& gc, std::size_t trials, std::uint64_t seed) {
    GradcheckResult worst;
    worst.name = gc.name;
    worst.tolerance = tier_tolerance(gc.tier);
    for (std::size_t t = 0; t < std::max<std::size_t>(trials, 1); ++t) {
        const std::uint64_t trial_seed = mix_seed(seed, t);
        auto [fn, leaves] = gc.build(trial_seed);
        GradcheckOptions opts;
        opts.step = gc.step;
        opts.max_coords_per_leaf = gc.max_coords_per_leaf;
        opts.seed = trial_seed;
        auto r = check_gradients(gc.name, fn, leaves, worst.tolerance, opts);
        worst.max_rel_error = std::max(worst.max_rel_error, r.max_rel_error);
        worst.coords_checked += r.coords_checked;
        worst.retried += r.retried;
    }
    worst.passed = worst.max_rel_error < worst.tolerance;
    return worst;
}

}  // namespace tkm
