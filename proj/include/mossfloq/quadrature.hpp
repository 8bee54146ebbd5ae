#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "mossfloq/errors.hpp"

namespace mossfloq::quadrature {

/// Gauss-Legendre nodes and weights on [-1, 1].
struct GaussLegendreRule {
    std::vector<double> nodes;
    std::vector<double> weights;
};

/**
 * Newton iteration on P_n with the Chebyshev-like initial guess
 * cos(pi (i - 1/4) / (n + 1/2)). Converges to machine precision in a
 * handful of steps for n up to a few hundred.
 */
inline GaussLegendreRule gauss_legendre(int n) {
    if (n < 1) throw DomainError("Gauss-Legendre order must be >= 1");
    GaussLegendreRule rule;
    rule.nodes.resize(n);
    rule.weights.resize(n);
    const int half = (n + 1) / 2;
    for (int i = 0; i < half; ++i) {
        double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
        double dp = 0.0;
        for (int iter = 0; iter < 100; ++iter) {
            double p0 = 1.0, p1 = 0.0;
            for (int k = 1; k <= n; ++k) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
            }
            dp = n * (z * p0 - p1) / (z * z - 1.0);
            const double dz = p0 / dp;
            z -= dz;
            if (std::abs(dz) < 1e-16) break;
        }
        rule.nodes[i] = -z;
        rule.nodes[n - 1 - i] = z;
        const double w = 2.0 / ((1.0 - z * z) * dp * dp);
        rule.weights[i] = w;
        rule.weights[n - 1 - i] = w;
    }
    return rule;
}

inline const GaussLegendreRule& gauss_legendre_64() {
    static const GaussLegendreRule rule = gauss_legendre(64);
    return rule;
}

/// Composite rule: `panels` equal sub-intervals of [a, b], each with `rule`.
/// T must support += and * double; `zero` fixes the shape of vector-valued T.
template <typename T, typename F>
T composite(F&& f, double a, double b, int panels, const T& zero = T{},
            const GaussLegendreRule& rule = gauss_legendre_64()) {
    T total = zero;
    const double h = (b - a) / panels;
    for (int p = 0; p < panels; ++p) {
        const double mid = a + (p + 0.5) * h;
        T panel = zero;
        for (std::size_t k = 0; k < rule.nodes.size(); ++k)
            panel += f(mid + 0.5 * h * rule.nodes[k]) * rule.weights[k];
        total += panel * (0.5 * h);
    }
    return total;
}

template <typename T>
struct Estimate {
    T value{};
    double error = 0.0; ///< |I_2k - I_k| at the final level
    int panels = 0;
    bool converged = false;
};

/**
 * Panel doubling until successive composite estimates agree to `tol`
 * (measured by `norm`). The finer estimate is returned.
 */
template <typename T, typename F, typename Norm>
Estimate<T> integrate_doubling(F&& f, double a, double b, double tol, Norm&& norm, const T& zero = T{},
                               int max_panels = 512) {
    Estimate<T> est;
    int panels = 1;
    T coarse = composite<T>(f, a, b, panels, zero);
    while (panels < max_panels) {
        panels *= 2;
        T fine = composite<T>(f, a, b, panels, zero);
        T diff = fine;
        diff += coarse * -1.0;
        est.error = norm(diff);
        est.value = fine;
        est.panels = panels;
        if (est.error <= tol) {
            est.converged = true;
            return est;
        }
        coarse = fine;
    }
    return est;
}

inline Estimate<double> integrate(auto&& f, double a, double b, double tol = 1e-10, int max_panels = 512) {
    return integrate_doubling<double>(f, a, b, tol, [](double d) { return std::abs(d); }, 0.0, max_panels);
}

} // namespace mossfloq::quadrature
