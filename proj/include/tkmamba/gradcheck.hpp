#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tkmamba/tensor.hpp"

namespace tkm {

struct GradcheckOptions {
    double step = 1e-3;                  // central-difference h
    std::size_t max_coords_per_leaf = 24; // sampled coordinates per leaf tensor
    std::uint64_t seed = 0;
    // A coordinate that misses the tolerance is re-measured with h/10, h/100, ...
    // and keeps its best error, so a piecewise-linear kink (ReLU, PReLU) inside
    // the stencil does not register as a wrong gradient.
    std::size_t kink_retries = 2;
};

struct GradcheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t coords_checked = 0;
    std::size_t retried = 0;  // coordinates re-measured at a smaller step
    double tolerance = 0.0;
    bool passed = false;
};

/// Compares reverse-mode gradients of `loss_fn` w.r.t. `leaves` against
/// central finite differences. `loss_fn` must rebuild the forward graph from
/// the current contents of the leaves on every call. The error metric is
/// |analytic - numeric| / max(1, |numeric|).
GradcheckResult check_gradients(const std::string& name, const std::function<Tensor<double>()>& loss_fn,
                                std::vector<Tensor<double>> leaves, double tolerance,
                                const GradcheckOptions& options = {});

/// Tolerance tiers for registered checks.
enum class GradTier { Elementwise, Composite, EndToEnd };

double tier_tolerance(GradTier tier);
const char* tier_name(GradTier tier);

struct GradcheckCase {
    std::string name;
    GradTier tier = GradTier::Composite;
    double step = 1e-3;
    std::size_t max_coords_per_leaf = 24;
    bool expect_failure = false;  // negative controls
    // Builds leaves and a loss closure for one trial.
    std::function<std::pair<std::function<Tensor<double>()>, std::vector<Tensor<double>>>(std::uint64_t seed)> build;
};

/// Every op and block registered for gradient verification.
const std::vector<GradcheckCase>& registered_gradchecks();

/// Runs one case for `trials` seeds and keeps the worst error.
GradcheckResult run_gradcheck_case(const GradcheckCase& gc, std::size_t trials, std::uint64_t seed);

}  // namespace tkm
