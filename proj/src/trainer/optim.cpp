#include <cmath>
#include <numbers>

#include "tkmamba/trainer.hpp"

namespace tkm {

void validate_optim_config(const OptimConfig& c) {
    if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) throw ValidationError("optim: lr must be finite and non-negative");
    if (c.weight_decay < 0.0) throw ValidationError("optim: weight decay must be non-negative");
    if (!(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 >= 0.0 && c.beta2 < 1.0)) {
        throw ValidationError("optim: betas must lie in [0,1)");
    }
    if (!(c.eps > 0.0)) throw ValidationError("optim: eps must be positive");
    if (c.epochs == 0) throw ValidationError("optim: epochs must be positive");
    if (c.warmup_epochs >= c.epochs) throw ValidationError("optim: warmup must be shorter than the schedule");
    if (c.clip_norm < 0.0) throw ValidationError("optim: clip norm must be non-negative");
}

double lr_schedule(std::size_t epoch, const OptimConfig& c) {
    const std::size_t W = c.warmup_epochs;
    if (epoch < W) return c.lr * static_cast<double>(epoch + 1) / static_cast<double>(W);
    if (epoch >= c.epochs) return 0.0;
    const double t = static_cast<double>(epoch - W) / static_cast<double>(c.epochs - W);
    return std::max(0.0, c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t)));
}

std::size_t scaled_warmup(std::size_t epochs) {
    const auto w = static_cast<std::size_t>(std::llround(static_cast<double>(epochs) * 50.0 / 2000.0));
    return epochs > 1 ? std::min(w, epochs - 1) : 0;
}

template <typename T>
AdamW<T>::AdamW(ParamList<T> params, const OptimConfig& config) : params_(std::move(params)), config_(config) {
    validate_optim_config(config);
    for (const auto& p : params_) {
        m_.emplace_back(p.second.numel(), 0.0);
        v_.emplace_back(p.second.numel(), 0.0);
    }
}

template <typename T>
void AdamW<T>::zero_grad() {
    for (auto& p : params_) p.second.zero_grad();
}

template <typename T>
void AdamW<T>::step(double lr) {
    double norm2 = 0.0;
    for (const auto& [name, p] : params_) {
        if (!p.has_grad()) continue;
        for (T g : p.grad()) {
            if (!std::isfinite(static_cast<double>(g))) {
                throw NumericError("non-finite gradient in parameter '" + name + "' at step " + std::to_string(t_ + 1));
            }
            norm2 += static_cast<double>(g) * static_cast<double>(g);
        }
    }
    last_grad_norm_ = std::sqrt(norm2);
    const double scale =
        config_.clip_norm > 0.0 && last_grad_norm_ > config_.clip_norm ? config_.clip_norm / last_grad_norm_ : 1.0;

    ++t_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    const double decay = 1.0 - lr * config_.weight_decay;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i].second;
        auto& data = p.storage();
        auto& m = m_[i];
        auto& v = v_[i];
        const bool has = p.has_grad();
        const auto grad = p.grad();
        for (std::size_t j = 0; j < data.size(); ++j) {
            const double g = has ? static_cast<double>(grad[j]) * scale : 0.0;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            const double mh = m[j] / c1, vh = v[j] / c2;
            const double theta = static_cast<double>(data[j]) * decay;
            data[j] = static_cast<T>(theta - lr * mh / (std::sqrt(vh) + config_.eps));
        }
    }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace tkm
