#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <unsupported/Eigen/NonLinearOptimization>

#include "tkmamba/blocks.hpp"

namespace tkm {

namespace {

constexpr double kFitLo = -3.0;
constexpr std::size_t kFitPoints = 601;  // step 0.01

double grid_x(std::size_t i) { return kFitLo + 0.01 * static_cast<double>(i); }

double gelu_exact(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

RationalCoeffs unpack(const Eigen::VectorXd& p) {
    RationalCoeffs c;
    for (std::size_t i = 0; i < kRationalNum; ++i) c.a[i] = p[static_cast<Eigen::Index>(i)];
    for (std::size_t j = 0; j < kRationalDen; ++j) c.b[j] = p[static_cast<Eigen::Index>(kRationalNum + j)];
    return c;
}

struct GeluResidual {
    int inputs() const { return kRationalNum + kRationalDen; }
    int values() const { return kFitPoints; }

    int operator()(const Eigen::VectorXd& p, Eigen::VectorXd& f) const {
        const RationalCoeffs c = unpack(p);
        for (std::size_t i = 0; i < kFitPoints; ++i) {
            const double x = grid_x(i);
            f[static_cast<Eigen::Index>(i)] = rational_eval(x, c) - gelu_exact(x);
        }
        return 0;
    }

    int df(const Eigen::VectorXd& p, Eigen::MatrixXd& J) const {
        const RationalCoeffs c = unpack(p);
        for (std::size_t i = 0; i < kFitPoints; ++i) {
            const double x = grid_x(i);
            double P = 0, S = 0, xp = 1;
            for (std::size_t k = 0; k < kRationalNum; ++k, xp *= x) P += c.a[k] * xp;
            xp = x;
            for (std::size_t k = 0; k < kRationalDen; ++k, xp *= x) S += c.b[k] * xp;
            const double Q = 1.0 + std::abs(S);
            const double sg = S > 0 ? 1.0 : (S < 0 ? -1.0 : 0.0);
            const auto r = static_cast<Eigen::Index>(i);
            xp = 1;
            for (std::size_t k = 0; k < kRationalNum; ++k, xp *= x) J(r, static_cast<Eigen::Index>(k)) = xp / Q;
            xp = x;
            for (std::size_t k = 0; k < kRationalDen; ++k, xp *= x) {
                J(r, static_cast<Eigen::Index>(kRationalNum + k)) = -P * sg * xp / (Q * Q);
            }
        }
        return 0;
    }
};

RationalCoeffs fit_gelu() {
    // Linearized start: P(x) - g(x) S(x) = g(x), ignoring the absolute value.
    const Eigen::Index n = kFitPoints, m = kRationalNum + kRationalDen;
    Eigen::MatrixXd M(n, m);
    Eigen::VectorXd rhs(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double x = grid_x(static_cast<std::size_t>(i));
        const double g = gelu_exact(x);
        double xp = 1;
        for (std::size_t k = 0; k < kRationalNum; ++k, xp *= x) M(i, static_cast<Eigen::Index>(k)) = xp;
        xp = x;
        for (std::size_t k = 0; k < kRationalDen; ++k, xp *= x) M(i, static_cast<Eigen::Index>(kRationalNum + k)) = -g * xp;
        rhs[i] = g;
    }
    Eigen::VectorXd p = M.colPivHouseholderQr().solve(rhs);

    GeluResidual functor;
    Eigen::LevenbergMarquardt<GeluResidual> lm(functor);
    lm.parameters.maxfev = 2000;
    lm.parameters.xtol = 1e-14;
    lm.parameters.ftol = 1e-14;
    lm.minimize(p);
    return unpack(p);
}

}  // namespace

double rational_eval(double x, const RationalCoeffs& c) {
    double P = 0, S = 0, xp = 1;
    for (std::size_t k = 0; k < kRationalNum; ++k, xp *= x) P += c.a[k] * xp;
    xp = x;
    for (std::size_t k = 0; k < kRationalDen; ++k, xp *= x) S += c.b[k] * xp;
    return P / (1.0 + std::abs(S));
}

const RationalCoeffs& gelu_rational_fit() {
    static const RationalCoeffs coeffs = fit_gelu();
    return coeffs;
}

double gelu_fit_max_error(const RationalCoeffs& c) {
    double worst = 0;
    for (std::size_t i = 0; i < kFitPoints; ++i) {
        const double x = grid_x(i);
        worst = std::max(worst, std::abs(rational_eval(x, c) - gelu_exact(x)));
    }
    return worst;
}

std::size_t resolve_groups(std::size_t width, std::size_t requested) {
    if (width == 0 || requested == 0) throw ValidationError("resolve_groups: width and groups must be positive");
    return std::gcd(width, requested);
}

template <typename T>
Tensor<T> rational_group(const Tensor<T>& x, const Tensor<T>& num, const Tensor<T>& den) {
    if (x.ndim() == 0) throw ShapeError("rational_group: scalar input");
    if (num.ndim() != 2 || num.dim(1) != kRationalNum || den.ndim() != 2 || den.dim(1) != kRationalDen ||
        num.dim(0) != den.dim(0)) {
        throw ShapeError("rational_group: expected num [G,6] and den [G,4], got " + shape_str(num.shape()) + " and " +
                         shape_str(den.shape()));
    }
    const std::size_t width = x.shape().back(), G = num.dim(0);
    if (G == 0 || width % G != 0) {
        throw ShapeError("rational_group: " + std::to_string(G) + " groups do not divide width " + std::to_string(width));
    }
    const std::size_t per = width / G;
    const auto& xs = x.storage();
    const auto& a = num.storage();
    const auto& b = den.storage();
    std::vector<T> out(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const std::size_t g = (i % width) / per;
        const T v = xs[i];
        const T* ag = a.data() + g * kRationalNum;
        const T* bg = b.data() + g * kRationalDen;
        T P = ag[5];
        for (std::size_t k = kRationalNum - 1; k-- > 0;) P = P * v + ag[k];
        T S = bg[3];
        for (std::size_t k = kRationalDen - 1; k-- > 0;) S = S * v + bg[k];
        S *= v;
        out[i] = P / (T(1) + std::abs(S));
    }
    return make_result<T>(x.shape(), std::move(out), {x, num, den}, [width, per](detail::TensorNode<T>& self) {
        const auto& xs = self.parents[0]->data;
        const auto& a = self.parents[1]->data;
        const auto& b = self.parents[2]->data;
        std::vector<T> gx(xs.size(), T(0)), ga(a.size(), T(0)), gb(b.size(), T(0));
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const std::size_t g = (i % width) / per;
            const T v = xs[i];
            const T* ag = a.data() + g * kRationalNum;
            const T* bg = b.data() + g * kRationalDen;
            T pw[kRationalNum];
            pw[0] = T(1);
            for (std::size_t k = 1; k < kRationalNum; ++k) pw[k] = pw[k - 1] * v;
            T P = 0, dP = 0, S = 0, dS = 0;
            for (std::size_t k = 0; k < kRationalNum; ++k) P += ag[k] * pw[k];
            for (std::size_t k = 1; k < kRationalNum; ++k) dP += static_cast<T>(k) * ag[k] * pw[k - 1];
            for (std::size_t k = 0; k < kRationalDen; ++k) {
                S += bg[k] * pw[k + 1];
                dS += static_cast<T>(k + 1) * bg[k] * pw[k];
            }
            const T Q = T(1) + std::abs(S);
            const T sg = S > 0 ? T(1) : (S < 0 ? T(-1) : T(0));
            const T gy = self.grad[i];
            gx[i] = gy * (dP / Q - P * sg * dS / (Q * Q));
            for (std::size_t k = 0; k < kRationalNum; ++k) ga[g * kRationalNum + k] += gy * pw[k] / Q;
            for (std::size_t k = 0; k < kRationalDen; ++k) gb[g * kRationalDen + k] -= gy * P * sg * pw[k + 1] / (Q * Q);
        }
        accumulate<T>(self.parents[0], gx);
        accumulate<T>(self.parents[1], ga);
        accumulate<T>(self.parents[2], gb);
    });
}

template <typename T>
RationalGroupActivation<T>::RationalGroupActivation(std::size_t width, std::size_t groups) {
    const std::size_t G = resolve_groups(width, groups);
    const RationalCoeffs& fit = gelu_rational_fit();
    const double err = gelu_fit_max_error(fit);
    if (!(err < 0.01)) throw NumericError("rational GELU fit error " + std::to_string(err) + " exceeds 0.01");
    std::vector<T> a(G * kRationalNum), b(G * kRationalDen);
    for (std::size_t g = 0; g < G; ++g) {
        for (std::size_t k = 0; k < kRationalNum; ++k) a[g * kRationalNum + k] = static_cast<T>(fit.a[k]);
        for (std::size_t k = 0; k < kRationalDen; ++k) b[g * kRationalDen + k] = static_cast<T>(fit.b[k]);
    }
    num = Tensor<T>::from_data({G, kRationalNum}, std::move(a)).set_requires_grad();
    den = Tensor<T>::from_data({G, kRationalDen}, std::move(b)).set_requires_grad();
}

template <typename T>
void RationalGroupActivation<T>::parameters(const std::string& prefix, ParamList<T>& out) const {
    add_param(out, prefix, "num", num);
    add_param(out, prefix, "den", den);
}

template <typename T>
T RationalGroupActivation<T>::min_denominator(double range) const {
    T lowest = std::numeric_limits<T>::infinity();
    const std::size_t G = den.dim(0);
    for (std::size_t g = 0; g < G; ++g) {
        for (double x = -range; x <= range; x += 0.01) {
            T S = 0, xp = static_cast<T>(x);
            for (std::size_t k = 0; k < kRationalDen; ++k, xp *= static_cast<T>(x)) S += den.at(g * kRationalDen + k) * xp;
            lowest = std::min(lowest, T(1) + std::abs(S));
        }
    }
    return lowest;
}

#define TKM_INSTANTIATE(T)                                                                   \
    template Tensor<T> rational_group(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
    template class RationalGroupActivation<T>;

TKM_INSTANTIATE(float)
TKM_INSTANTIATE(double)
#undef TKM_INSTANTIATE

}  // namespace tkm
