#pragma once

// Count-spectrum fit: polynomial baseline times (1 - sum of Lorentzian dips)
// with one shared width, peak amplitudes tied by group, weighted by 1/counts.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mossfloq/errors.hpp"
#include "mossfloq/floquet.hpp"
#include "mossfloq/levmar.hpp"
#include "mossfloq/peak_table.hpp"
#include "mossfloq/physics.hpp"
#include "mossfloq/specgen.hpp"

namespace mossfloq::specfit {

inline constexpr int kBaselineParams = 6; ///< offset + 5 polynomial coefficients
inline constexpr int kWidthIndex = 6;
inline constexpr int kFirstCenterIndex = 7;

/// Area-normalized Lorentzian with full width at half maximum w.
inline double lorentzian(double x, double c, double w) {
    const double d = x - c;
    return (w / (2.0 * std::numbers::pi)) / (d * d + 0.25 * w * w);
}

/// Peaks and their amplitude-group membership; parameter layout
/// [offset, b1..b5, w, centers..., amplitudes...].
struct PeakLayout {
    std::vector<int> group_of_peak;
    int n_groups = 0;

    int n_peaks() const { return static_cast<int>(group_of_peak.size()); }
    int n_params() const { return kFirstCenterIndex + n_peaks() + n_groups; }
    int center_index(int k) const { return kFirstCenterIndex + k; }
    int amplitude_index(int g) const { return kFirstCenterIndex + n_peaks() + g; }
};

struct RunsTest {
    int n_positive = 0;
    int n_negative = 0;
    int runs = 0;
    double z = 0.0;
    double p_value = 1.0;    ///< two-sided
    double p_clustered = 1.0; ///< lower tail: too few runs, i.e. structure the model missed
    // Fitted residuals alternate slightly more often than independent draws
    // (leverage), so the structure test is the one-sided lower tail.
    bool passed(double level = 0.05) const { return p_clustered > level; }
};

/// Wald-Wolfowitz runs test on residual signs (zeros skipped), normal approximation.
inline RunsTest runs_test(std::span<const double> residuals) {
    RunsTest r;
    int prev = 0;
    for (double v : residuals) {
        if (v == 0.0) continue;
        const int s = v > 0.0 ? 1 : -1;
        (s > 0 ? r.n_positive : r.n_negative)++;
        if (s != prev) ++r.runs;
        prev = s;
    }
    const double n1 = r.n_positive, n2 = r.n_negative, n = n1 + n2;
    if (n1 == 0 || n2 == 0) {
        r.p_value = r.p_clustered = 0.0;
        return r;
    }
    const double mean = 2.0 * n1 * n2 / n + 1.0;
    const double var = (mean - 1.0) * (mean - 2.0) / (n - 1.0);
    r.z = var > 0 ? (r.runs - mean) / std::sqrt(var) : 0.0;
    r.p_value = std::erfc(std::abs(r.z) / std::numbers::sqrt2);
    r.p_clustered = 0.5 * std::erfc(-r.z / std::numbers::sqrt2);
    return r;
}

struct AxisFit {
    Eigen::VectorXd params;
    Eigen::MatrixXd covariance; ///< empty when singular
    bool covariance_ok = false;
    double chi2 = 0.0;
    int dof = 0;
    std::vector<double> residuals; ///< (data - model)/sigma
    bool converged = false;
    int iterations = 0;
    std::string message;
};

namespace detail {

inline double poly_tail(const Eigen::VectorXd& p, double t) {
    double s = 0.0;
    for (int j = 5; j >= 1; --j) s = (s + p[j]) * t;
    return s;
}

inline void evaluate_model(std::span<const double> x, std::span<const double> t, const PeakLayout& lay,
                           const Eigen::VectorXd& p, Eigen::VectorXd& mu, Eigen::MatrixXd* jac) {
    const int n = static_cast<int>(x.size());
    const int np = lay.n_peaks();
    const double w = p[kWidthIndex];
    mu.resize(n);
    if (jac) jac->setZero(n, lay.n_params());
    for (int i = 0; i < n; ++i) {
        const double base = p[0] + poly_tail(p, t[i]);
        double s = 0.0;
        for (int k = 0; k < np; ++k) {
            const double a = p[lay.amplitude_index(lay.group_of_peak[k])];
            const double d = x[i] - p[lay.center_index(k)];
            const double den = d * d + 0.25 * w * w;
            const double l = (w / (2.0 * std::numbers::pi)) / den;
            s += a * l;
            if (jac) {
                (*jac)(i, lay.amplitude_index(lay.group_of_peak[k])) += -base * l;
                (*jac)(i, lay.center_index(k)) = -base * a * (w / std::numbers::pi) * d / (den * den);
                (*jac)(i, kWidthIndex) += -base * a * (d * d - 0.25 * w * w) / (2.0 * std::numbers::pi * den * den);
            }
        }
        mu[i] = base * (1.0 - s);
        if (jac) {
            double tp = 1.0;
            (*jac)(i, 0) = 1.0 - s;
            for (int j = 1; j <= 5; ++j) {
                tp *= t[i];
                (*jac)(i, j) = tp * (1.0 - s);
            }
        }
    }
}

} // namespace detail

/// Model counts at the given parameters.
inline std::vector<double> model_counts(std::span<const double> x, std::span<const double> t, const PeakLayout& lay,
                                        const Eigen::VectorXd& p) {
    Eigen::VectorXd mu;
    detail::evaluate_model(x, t, lay, p, mu, nullptr);
    return {mu.data(), mu.data() + mu.size()};
}

/**
 * Weighted LM fit on an arbitrary abscissa x (channel index or any affine
 * function of it); t is the baseline coordinate. Amplitudes are constrained
 * to be >= 0 and the width to be positive.
 */
inline AxisFit fit_peaks_on_axis(std::span<const double> x, std::span<const double> t,
                                 std::span<const std::int64_t> counts, const PeakLayout& lay,
                                 const Eigen::VectorXd& initial, const lm::Options& opt = {}) {
    const int n = static_cast<int>(x.size());
    if (static_cast<int>(t.size()) != n || static_cast<int>(counts.size()) != n)
        throw ConfigError("specfit: axis, baseline coordinate and counts differ in length");
    if (initial.size() != lay.n_params()) throw ConfigError("specfit: initial parameter vector has wrong size");
    std::vector<double> y(n), inv_sigma(n);
    for (int i = 0; i < n; ++i) {
        if (counts[i] < 0) throw ConfigError("specfit: negative counts");
        y[i] = static_cast<double>(counts[i]);
        inv_sigma[i] = 1.0 / std::sqrt(std::max(y[i], 1.0));
    }
    const lm::ResidualFn f = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
        Eigen::VectorXd mu;
        detail::evaluate_model(x, t, lay, p, mu, jac);
        r.resize(n);
        for (int i = 0; i < n; ++i) r[i] = (mu[i] - y[i]) * inv_sigma[i];
        if (jac)
            for (int i = 0; i < n; ++i) jac->row(i) *= inv_sigma[i];
    };
    lm::Bounds bounds;
    bounds.lower = Eigen::VectorXd::Constant(lay.n_params(), -std::numeric_limits<double>::infinity());
    bounds.lower[kWidthIndex] = 1e-3 * std::abs(initial[kWidthIndex]);
    for (int g = 0; g < lay.n_groups; ++g) bounds.lower[lay.amplitude_index(g)] = 0.0;

    const lm::Result res = lm::minimize(f, initial, opt, bounds);
    AxisFit out;
    out.params = res.params;
    out.chi2 = res.chi2;
    out.dof = n - lay.n_params();
    out.converged = res.converged;
    out.iterations = res.iterations;
    out.message = res.stop_reason;
    Eigen::VectorXd r;
    f(res.params, r, nullptr);
    out.residuals.resize(n);
    for (int i = 0; i < n; ++i) out.residuals[i] = -r[i];
    try {
        out.covariance = lm::covariance_from_jtj(res.jtj);
        out.covariance_ok = true;
    } catch (const RankError&) {
        out.covariance_ok = false;
        out.message += "; covariance singular";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spectrum-level fit with template, registration and pruning

struct FitOptions {
    double initial_fwhm_mm_s = 0.30;
    double merge_tol_mm_s = 0.15;
    int max_order = 2;             ///< sideband orders in the template (0 forced at zero drive)
    double prune_sigma = 3.0;      ///< drop amplitude groups below this prefit significance
    bool tie_amplitudes = true;    ///< false: one amplitude per peak
    double scale_search = 0.03;    ///< +- relative velocity-scale search in registration
    int scale_steps = 13;
    double shift_search_channels = 20.0;
    int shift_steps = 41;
    lm::Options lm{};
};

/// Nominal channel <-> velocity map of a scan: v = intercept + slope * channel.
struct LinearMap {
    double intercept = 0.0;
    double slope = 1.0;
    double velocity(double ch) const { return intercept + slope * ch; }
    double channel(double v) const { return (v - intercept) / slope; }
};

inline LinearMap nominal_map(const physics::ScanParams& scan) {
    const double dv = scan.channel_width_mm_s();
    if (scan.direction == physics::Direction::accelerating) return {scan.v_min_mm_s + 0.5 * dv, dv};
    return {scan.v_max_mm_s - 0.5 * dv, -dv};
}

struct FitModel {
    peaks::PeakTemplate tmpl;
    physics::ScanParams scan;
    LinearMap map;
    std::vector<double> initial_centers; ///< channel space, one per template peak
    double initial_width_channels = 0.0;
    FitOptions options;
};

/// Template for the given drive: 6 peaks / 3 groups at zero drive, else all
/// sideband coincidences up to options.max_order inside the scan window.
inline FitModel build_fit_model(const physics::HyperfineScheme& scheme, const floquet::ModulationModel& modulation,
                                const physics::ScanParams& scan, const FitOptions& opt = {},
                                const physics::PhysConstants& c = physics::default_constants()) {
    scan.validate();
    const double spacing = physics::angular_frequency_to_velocity(modulation.saw_angular_freq_rad_s, c);
    const int order = modulation.mod_index > 0.0 ? opt.max_order : 0;
    FitModel m;
    m.tmpl = peaks::build_peak_template(scheme, spacing, order, scan.v_min_mm_s, scan.v_max_mm_s, opt.merge_tol_mm_s);
    m.scan = scan;
    m.map = nominal_map(scan);
    m.options = opt;
    for (const auto& p : m.tmpl.peaks) m.initial_centers.push_back(m.map.channel(p.velocity_mm_s));
    m.initial_width_channels = opt.initial_fwhm_mm_s / std::abs(m.map.slope);
    return m;
}

struct SpectrumFit {
    std::array<double, 6> baseline{}; ///< offset and b1..b5 in the normalized coordinate t
    std::vector<double> positions;    ///< channel centers per template peak
    std::vector<double> position_sigma; ///< NaN for pruned peaks
    std::vector<bool> peak_active;
    std::vector<double> amplitudes;   ///< per template group (0 when pruned); area in channels
    std::vector<double> amplitude_sigma;
    std::vector<bool> group_active;
    std::vector<int> amplitude_of_peak; ///< index into amplitudes per template peak
    double linewidth = 0.0;           ///< FWHM, channels
    double linewidth_sigma = 0.0;
    Eigen::MatrixXd covariance;       ///< over the free parameters, layout as `layout`
    bool covariance_ok = false;
    PeakLayout layout;                ///< active peaks/groups only
    std::vector<int> active_peaks;    ///< template peak index per layout peak
    std::vector<int> active_groups;   ///< template group index per layout group
    Eigen::VectorXd params;
    double chi2 = 0.0;
    double chi2_reduced = 0.0;
    int dof = 0;
    int n_params = 0;
    std::vector<double> residuals;
    RunsTest runs;
    bool converged = false;
    int iterations = 0;
    std::string message;
    double registration_scale = 1.0;
    double registration_shift = 0.0;
    peaks::PeakTemplate tmpl;

    double baseline_at(double t) const { return specgen::baseline_value(baseline, t); }
};

namespace detail {

struct Prefit {
    double chi2 = std::numeric_limits<double>::infinity();
    double scale = 1.0, shift = 0.0;
    Eigen::VectorXd beta;
    Eigen::MatrixXd cov;
};

/// Additive linear model y = poly(t) - sum_g a_g sum_{k in g} L_k for fixed centers.
inline Prefit linear_prefit(std::span<const double> y, std::span<const double> w, std::span<const double> t,
                            const std::vector<double>& centers, const std::vector<int>& group, int n_groups,
                            double width, bool want_cov) {
    const int n = static_cast<int>(y.size());
    const int m = kBaselineParams + n_groups;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, m);
    Eigen::VectorXd b(n);
    for (int i = 0; i < n; ++i) {
        const double sw = std::sqrt(w[i]);
        double tp = 1.0;
        for (int j = 0; j < kBaselineParams; ++j) {
            a(i, j) = tp * sw;
            tp *= t[i];
        }
        for (std::size_t k = 0; k < centers.size(); ++k)
            a(i, kBaselineParams + group[k]) -= lorentzian(static_cast<double>(i), centers[k], width) * sw;
        b[i] = y[i] * sw;
    }
    const Eigen::MatrixXd ata = a.transpose() * a;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(ata);
    Prefit p;
    p.beta = ldlt.solve(a.transpose() * b);
    p.chi2 = (a * p.beta - b).squaredNorm();
    if (want_cov) p.cov = ldlt.solve(Eigen::MatrixXd::Identity(m, m));
    return p;
}

} // namespace detail

/**
 * Registration grid search over velocity scale and channel shift, pruning of
 * insignificant amplitude groups, then the full nonlinear fit.
 */
inline SpectrumFit fit_spectrum(const specgen::CountSpectrum& spectrum, const FitModel& model) {
    const int n = spectrum.n_channels();
    if (n != model.scan.n_channels) throw ConfigError("specfit: spectrum length does not match the scan");
    const FitOptions& opt = model.options;
    std::vector<double> y(n), w(n), x(n), t(n);
    int positive = 0;
    for (int i = 0; i < n; ++i) {
        if (spectrum.counts[i] < 0) throw ConfigError("specfit: negative counts");
        y[i] = static_cast<double>(spectrum.counts[i]);
        w[i] = 1.0 / std::max(y[i], 1.0);
        x[i] = i;
        t[i] = specgen::channel_coordinate(i, n);
        positive += spectrum.counts[i] > 0;
    }
    if (positive < n / 2) throw ConfigError("specfit: too few channels with counts");

    const auto& tmpl = model.tmpl;
    const int np = tmpl.n_peaks();
    std::vector<int> group(np);
    int n_groups = opt.tie_amplitudes ? tmpl.n_groups() : np;
    for (int k = 0; k < np; ++k) group[k] = opt.tie_amplitudes ? tmpl.peaks[k].group : k;

    // registration about the scan center
    const double mid = 0.5 * (n - 1);
    const auto placed = [&](double scale, double shift) {
        std::vector<double> c(np);
        for (int k = 0; k < np; ++k) c[k] = mid + (model.initial_centers[k] - mid) / scale + shift;
        return c;
    };
    detail::Prefit best;
    for (int a = 0; a < opt.scale_steps; ++a) {
        const double scale =
            1.0 + (opt.scale_steps > 1 ? opt.scale_search * (2.0 * a / (opt.scale_steps - 1) - 1.0) : 0.0);
        for (int b = 0; b < opt.shift_steps; ++b) {
            const double shift =
                opt.shift_steps > 1 ? opt.shift_search_channels * (2.0 * b / (opt.shift_steps - 1) - 1.0) : 0.0;
            auto p = detail::linear_prefit(y, w, t, placed(scale, shift), group, n_groups, model.initial_width_channels,
                                           false);
            if (p.chi2 < best.chi2) {
                best = std::move(p);
                best.scale = scale;
                best.shift = shift;
            }
        }
    }
    const auto centers0 = placed(best.scale, best.shift);
    auto pre = detail::linear_prefit(y, w, t, centers0, group, n_groups, model.initial_width_channels, true);

    // prune
    std::vector<int> group_map(n_groups, -1), active_groups;
    for (int g = 0; g < n_groups; ++g) {
        const double a = pre.beta[kBaselineParams + g];
        const double s = std::sqrt(std::max(pre.cov(kBaselineParams + g, kBaselineParams + g), 0.0));
        if (a > opt.prune_sigma * s) {
            group_map[g] = static_cast<int>(active_groups.size());
            active_groups.push_back(g);
        }
    }
    if (active_groups.empty()) throw ConvergenceError("specfit: no significant absorption peaks found");
    PeakLayout lay;
    std::vector<int> active_peaks;
    for (int k = 0; k < np; ++k)
        if (group_map[group[k]] >= 0) {
            active_peaks.push_back(k);
            lay.group_of_peak.push_back(group_map[group[k]]);
        }
    lay.n_groups = static_cast<int>(active_groups.size());

    Eigen::VectorXd p0(lay.n_params());
    const double base0 = pre.beta[0];
    p0[0] = base0;
    for (int j = 1; j <= 5; ++j) p0[j] = pre.beta[j];
    p0[kWidthIndex] = model.initial_width_channels;
    for (int k = 0; k < lay.n_peaks(); ++k) p0[lay.center_index(k)] = centers0[active_peaks[k]];
    for (int g = 0; g < lay.n_groups; ++g)
        p0[lay.amplitude_index(g)] = std::max(pre.beta[kBaselineParams + active_groups[g]] / base0, 0.0);

    const AxisFit af = fit_peaks_on_axis(x, t, spectrum.counts, lay, p0, opt.lm);

    SpectrumFit out;
    out.tmpl = tmpl;
    out.layout = lay;
    out.active_peaks = active_peaks;
    out.active_groups = active_groups;
    out.params = af.params;
    out.covariance = af.covariance;
    out.covariance_ok = af.covariance_ok;
    out.chi2 = af.chi2;
    out.dof = af.dof;
    out.n_params = lay.n_params();
    out.chi2_reduced = af.chi2 / af.dof;
    out.residuals = af.residuals;
    out.runs = runs_test(af.residuals);
    out.converged = af.converged;
    out.iterations = af.iterations;
    out.message = af.message;
    out.registration_scale = best.scale;
    out.registration_shift = best.shift;
    for (int j = 0; j < 6; ++j) out.baseline[j] = af.params[j];
    out.linewidth = af.params[kWidthIndex];
    const auto sd = [&](int idx) {
        return af.covariance_ok ? std::sqrt(af.covariance(idx, idx)) : std::numeric_limits<double>::quiet_NaN();
    };
    out.linewidth_sigma = sd(kWidthIndex);
    // pruned peaks follow an affine map from nominal to fitted active centers
    out.positions = centers0;
    if (lay.n_peaks() >= 2) {
        Eigen::MatrixXd a(lay.n_peaks(), 2);
        Eigen::VectorXd b(lay.n_peaks());
        for (int k = 0; k < lay.n_peaks(); ++k) {
            a(k, 0) = 1.0;
            a(k, 1) = model.initial_centers[active_peaks[k]];
            b[k] = af.params[lay.center_index(k)];
        }
        const Eigen::Vector2d ab = a.colPivHouseholderQr().solve(b);
        for (int k = 0; k < np; ++k) out.positions[k] = ab[0] + ab[1] * model.initial_centers[k];
    }
    out.position_sigma.assign(np, std::numeric_limits<double>::quiet_NaN());
    out.peak_active.assign(np, false);
    for (int k = 0; k < lay.n_peaks(); ++k) {
        out.positions[active_peaks[k]] = af.params[lay.center_index(k)];
        out.position_sigma[active_peaks[k]] = sd(lay.center_index(k));
        out.peak_active[active_peaks[k]] = true;
    }
    out.amplitude_of_peak = group;
    out.amplitudes.assign(n_groups, 0.0);
    out.amplitude_sigma.assign(n_groups, std::numeric_limits<double>::quiet_NaN());
    out.group_active.assign(n_groups, false);
    for (int g = 0; g < lay.n_groups; ++g) {
        out.amplitudes[active_groups[g]] = af.params[lay.amplitude_index(g)];
        out.amplitude_sigma[active_groups[g]] = sd(lay.amplitude_index(g));
        out.group_active[active_groups[g]] = true;
    }
    return out;
}

/// Counts divided by the fitted baseline, with Poisson sigma on the same scale.
struct NormalizedSpectrum {
    std::vector<double> value;
    std::vector<double> sigma;
    std::vector<double> t;        ///< normalized channel coordinate (empty if not from a fit)
    std::vector<double> baseline; ///< fitted baseline per channel
    Eigen::Matrix<double, 6, 6> baseline_covariance = Eigen::Matrix<double, 6, 6>::Zero();
    bool has_baseline_covariance = false;
};

inline NormalizedSpectrum normalize_by_baseline(const specgen::CountSpectrum& s, const SpectrumFit& fit) {
    const int n = s.n_channels();
    NormalizedSpectrum out;
    out.value.resize(n);
    out.sigma.resize(n);
    out.t.resize(n);
    out.baseline.resize(n);
    for (int i = 0; i < n; ++i) {
        out.t[i] = specgen::channel_coordinate(i, n);
        const double b = fit.baseline_at(out.t[i]);
        if (!(b > 0.0)) throw DomainError("normalize_by_baseline: non-positive fitted baseline");
        const double c = static_cast<double>(s.counts[i]);
        out.baseline[i] = b;
        out.value[i] = c / b;
        out.sigma[i] = std::sqrt(std::max(c, 1.0)) / b;
    }
    if (fit.covariance_ok && fit.covariance.rows() >= kBaselineParams) {
        out.baseline_covariance = fit.covariance.topLeftCorner(kBaselineParams, kBaselineParams);
        out.has_baseline_covariance = true;
    }
    return out;
}

} // namespace mossfloq::specfit
