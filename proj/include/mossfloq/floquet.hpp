#pragma once

// Forward model of a phase-modulated Moessbauer absorber: Bessel sideband
// weights, the standing-wave amplitude distribution, amplitude-averaged
// sideband powers and the resulting absorption spectrum.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <valarray>
#include <vector>

#include "mossfloq/bessel.hpp"
#include "mossfloq/errors.hpp"
#include "mossfloq/physics.hpp"
#include "mossfloq/quadrature.hpp"

namespace mossfloq::floquet {

inline constexpr double kSidebandQuadratureTol = 1e-10;
inline constexpr double kSidebandQuadratureFailTol = 1e-9;

/// Relative amplitude of a partial standing wave, sqrt(1 + a^2 + 2a cos(2 k x)).
inline double standing_wave_envelope(double x_m, double alpha, double k_saw_per_m) {
    return std::sqrt(1.0 + alpha * alpha + 2.0 * alpha * std::cos(2.0 * k_saw_per_m * x_m));
}

/**
 * Density of the local amplitude y over a uniformly sampled standing wave.
 * Support is the open interval (1 - alpha, 1 + alpha); both endpoints are
 * integrable inverse-square-root singularities.
 */
inline double amplitude_pdf(double y, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("amplitude_pdf requires 0 < alpha < 1");
    const double lo = 1.0 - alpha, hi = 1.0 + alpha;
    if (!(y > lo && y < hi)) throw DomainError("amplitude_pdf: y outside the open support (1-alpha, 1+alpha)");
    // 4a^2 - (y^2 - 1 - a^2)^2 factored to keep precision near the endpoints.
    const double disc = (hi - y) * (hi + y) * (y - lo) * (y + lo);
    return 2.0 * y / (std::numbers::pi * std::sqrt(disc));
}

/// Default truncation order: ceil(m0 (1 + alpha)) + 8.
inline int default_max_order(double m0, double alpha) {
    return static_cast<int>(std::ceil(m0 * (1.0 + alpha))) + 8;
}

namespace detail {

inline void check_power_args(double m0, double alpha) {
    if (!(m0 >= 0.0)) throw DomainError("modulation index must be >= 0");
    if (!(alpha >= 0.0 && alpha < 1.0)) throw DomainError("reflection coefficient must lie in [0, 1)");
}

// y(theta) after y^2 = 1 + a^2 + 2 a cos(theta); theta uniform on [0, pi].
inline double envelope_at(double theta, double alpha) {
    return std::sqrt(1.0 + alpha * alpha + 2.0 * alpha * std::cos(theta));
}

inline double valarray_max_abs(const std::valarray<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

} // namespace detail

/**
 * P_0 .. P_{n_max} for modulation index m0 averaged over the standing-wave
 * amplitude distribution. With y^2 = 1 + a^2 + 2a cos(theta) the average is
 * (1/pi) * int_0^pi J_n^2(m0 y(theta)) dtheta, free of endpoint singularities;
 * evaluated by 64-node Gauss-Legendre with panel doubling.
 */
inline std::vector<double> sideband_powers(int n_max, double m0, double alpha) {
    detail::check_power_args(m0, alpha);
    if (n_max < 0) throw DomainError("n_max must be >= 0");
    std::vector<double> out(static_cast<std::size_t>(n_max) + 1, 0.0);
    if (alpha == 0.0 || m0 == 0.0) {
        bessel_j_all(m0, out);
        for (double& v : out) v *= v;
        return out;
    }
    std::vector<double> j(out.size());
    auto integrand = [&](double theta) {
        bessel_j_all(m0 * detail::envelope_at(theta, alpha), j);
        std::valarray<double> v(j.size());
        for (std::size_t i = 0; i < j.size(); ++i) v[i] = j[i] * j[i] / std::numbers::pi;
        return v;
    };
    const auto est = quadrature::integrate_doubling<std::valarray<double>>(
        integrand, 0.0, std::numbers::pi, kSidebandQuadratureTol, detail::valarray_max_abs,
        std::valarray<double>(0.0, out.size()));
    if (!est.converged && est.error > kSidebandQuadratureFailTol)
        throw ConvergenceError("sideband power quadrature did not converge (error estimate " +
                               std::to_string(est.error) + ")");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = est.value[i];
    return out;
}

/// P_n(m0, alpha); symmetric in n.
inline double sideband_power(int n, double m0, double alpha) {
    const int k = std::abs(n);
    return sideband_powers(k, m0, alpha)[k];
}

/// P_n together with dP_n/dm0 and dP_n/dalpha for n = 0 .. n_max.
struct SidebandPowerGradient {
    std::vector<double> value;
    std::vector<double> d_m0;
    std::vector<double> d_alpha;
};

inline SidebandPowerGradient sideband_powers_with_gradient(int n_max, double m0, double alpha) {
    detail::check_power_args(m0, alpha);
    const std::size_t count = static_cast<std::size_t>(n_max) + 1;
    std::vector<double> j(count + 1);
    auto integrand = [&](double theta) {
        const double y = detail::envelope_at(theta, alpha);
        bessel_j_all(m0 * y, j);
        const double dy_dalpha = (alpha + std::cos(theta)) / y;
        std::valarray<double> v(3 * count);
        for (std::size_t n = 0; n < count; ++n) {
            const double jm1 = n == 0 ? -j[1] : j[n - 1];
            const double dj = 0.5 * (jm1 - j[n + 1]);
            v[n] = j[n] * j[n];
            v[count + n] = 2.0 * j[n] * dj * y;
            v[2 * count + n] = 2.0 * j[n] * dj * m0 * dy_dalpha;
        }
        v *= 1.0 / std::numbers::pi;
        return v;
    };
    const auto est = quadrature::integrate_doubling<std::valarray<double>>(
        integrand, 0.0, std::numbers::pi, kSidebandQuadratureTol, detail::valarray_max_abs,
        std::valarray<double>(0.0, 3 * count));
    if (!est.converged && est.error > kSidebandQuadratureFailTol)
        throw ConvergenceError("sideband power gradient quadrature did not converge");
    SidebandPowerGradient g;
    g.value.assign(std::begin(est.value), std::begin(est.value) + count);
    g.d_m0.assign(std::begin(est.value) + count, std::begin(est.value) + 2 * count);
    g.d_alpha.assign(std::begin(est.value) + 2 * count, std::end(est.value));
    return g;
}

// ---------------------------------------------------------------------------

struct SidebandWeights {
    std::vector<int> orders;
    std::vector<double> weights;

    double total() const {
        double s = 0.0;
        for (double w : weights) s += w;
        return s;
    }
};

struct ModulationModel {
    double mod_index = 0.0;             ///< m0 = k0 A0
    double alpha = 0.0;                 ///< standing-wave reflection coefficient
    double saw_angular_freq_rad_s = 2.0 * std::numbers::pi * 97.9e6;
    double linewidth_rad_s = 0.0;       ///< transmission FWHM Gamma
    physics::HyperfineScheme scheme = physics::default_alpha_fe_scheme();
    int max_sideband_order = -1;        ///< < 0 selects default_max_order

    int effective_max_order() const {
        return max_sideband_order >= 0 ? max_sideband_order : default_max_order(mod_index, alpha);
    }

    /// Enforces the model invariants, including the truncation criterion
    /// sum_{|n| <= n_max} P_n >= 1 - 1e-6.
    void validate() const {
        if (!(mod_index >= 0.0)) throw ConfigError("modulation index must be >= 0");
        if (!(linewidth_rad_s > 0.0)) throw ConfigError("linewidth must be > 0");
        if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0, 1)");
        if (!(saw_angular_freq_rad_s > 0.0)) throw ConfigError("SAW frequency must be > 0");
        const int n_max = effective_max_order();
        const auto p = sideband_powers(n_max, mod_index, alpha);
        double total = p[0];
        for (int n = 1; n <= n_max; ++n) total += 2.0 * p[n];
        if (total < 1.0 - 1e-6)
            throw ConfigError("max_sideband_order too small: retained sideband weight " + std::to_string(total));
    }
};

inline SidebandWeights sideband_weights(const ModulationModel& model) {
    const int n_max = model.effective_max_order();
    const auto p = sideband_powers(n_max, model.mod_index, model.alpha);
    SidebandWeights w;
    for (int n = -n_max; n <= n_max; ++n) {
        w.orders.push_back(n);
        w.weights.push_back(p[std::abs(n)]);
    }
    return w;
}

/**
 * S(Omega) = sum_i sum_n s_i P_n / ((Omega - Omega_i - n Omega_saw)^2 + (Gamma/2)^2)
 * on a velocity grid (mm/s). Units are 1/(rad/s)^2 times the scheme's
 * relative intensities.
 */
inline std::vector<double> synthesize_spectrum(const ModulationModel& model, std::span<const double> velocities_mm_s,
                                               const physics::PhysConstants& c = physics::default_constants()) {
    const auto w = sideband_weights(model);
    const double half = 0.5 * model.linewidth_rad_s;
    const double half2 = half * half;
    std::array<double, 6> centers{};
    for (int i = 0; i < 6; ++i)
        centers[i] = physics::velocity_to_angular_frequency(model.scheme.line_velocities_mm_s[i], c);
    std::vector<double> out(velocities_mm_s.size(), 0.0);
    for (std::size_t k = 0; k < velocities_mm_s.size(); ++k) {
        const double omega = physics::velocity_to_angular_frequency(velocities_mm_s[k], c);
        double s = 0.0;
        for (int i = 0; i < 6; ++i) {
            const double si = model.scheme.intensity(i);
            for (std::size_t j = 0; j < w.orders.size(); ++j) {
                const double d = omega - centers[i] - w.orders[j] * model.saw_angular_freq_rad_s;
                s += si * w.weights[j] / (d * d + half2);
            }
        }
        out[k] = s;
    }
    return out;
}

/// Peak value of the undriven sextet; divides synthesize_spectrum into
/// "fraction of the strongest unmodulated line" units.
inline double unmodulated_peak(const ModulationModel& model,
                               const physics::PhysConstants& c = physics::default_constants()) {
    ModulationModel bare = model;
    bare.mod_index = 0.0;
    bare.max_sideband_order = 0;
    const auto& v = model.scheme.line_velocities_mm_s;
    const auto s = synthesize_spectrum(bare, std::span<const double>(v.data(), v.size()), c);
    return *std::max_element(s.begin(), s.end());
}

inline std::vector<double> normalized_spectrum(const ModulationModel& model, std::span<const double> velocities_mm_s,
                                               const physics::PhysConstants& c = physics::default_constants()) {
    auto s = synthesize_spectrum(model, velocities_mm_s, c);
    const double peak = unmodulated_peak(model, c);
    for (double& v : s) v /= peak;
    return s;
}

/// Number of strict local maxima; the resolvable-peak count of a noiseless spectrum.
inline int count_local_maxima(std::span<const double> values) {
    int count = 0;
    for (std::size_t i = 1; i + 1 < values.size(); ++i)
        if (values[i] > values[i - 1] && values[i] > values[i + 1]) ++count;
    return count;
}

} // namespace mossfloq::floquet
