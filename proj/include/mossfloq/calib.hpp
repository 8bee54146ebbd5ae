#pragma once

// Channel -> Doppler velocity calibration against the sextet and its
// sideband replicas, with linearity and drift diagnostics.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mossfloq/errors.hpp"
#include "mossfloq/peak_table.hpp"
#include "mossfloq/physics.hpp"
#include "mossfloq/specfit.hpp"

namespace mossfloq::calib {

struct ReferenceLine {
    double velocity_mm_s = 0.0;
    double sigma_mm_s = 0.0; ///< half the spread of merged components; 0 for a single line
};

/// Relative sideband power estimate for one order |n|.
struct OrderWeight {
    double value = 0.0;
    double sigma = 0.0;
    bool known = false;
};

/**
 * Reference velocities for the template peaks of `tmpl`, recomputed with the
 * given sideband spacing (which may differ from the template's). A merged
 * two-component peak sits at the intensity-weighted centroid when the order
 * weights are known, else at the mean with half the spread as uncertainty.
 */
inline std::vector<ReferenceLine> reference_lines(const peaks::PeakTemplate& tmpl,
                                                  const physics::HyperfineScheme& scheme, double spacing_mm_s,
                                                  std::span<const OrderWeight> order_weights = {}) {
    std::vector<ReferenceLine> out;
    for (const auto& p : tmpl.peaks) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
        for (const auto& c : p.components) {
            const double v = scheme.line_velocities_mm_s[c.line] + c.order * spacing_mm_s;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            sum += v;
        }
        ReferenceLine ref{sum / p.components.size(), 0.5 * (hi - lo)};
        if (p.components.size() == 2) {
            const auto& c1 = p.components[0];
            const auto& c2 = p.components[1];
            const auto n1 = static_cast<std::size_t>(std::abs(c1.order)), n2 = static_cast<std::size_t>(std::abs(c2.order));
            if (n1 < order_weights.size() && n2 < order_weights.size() && order_weights[n1].known &&
                order_weights[n2].known) {
                const double s1 = scheme.intensity(c1.line), s2 = scheme.intensity(c2.line);
                const double w1 = s1 * order_weights[n1].value, w2 = s2 * order_weights[n2].value;
                if (w1 + w2 > 0.0) {
                    const double v1 = scheme.line_velocities_mm_s[c1.line] + c1.order * spacing_mm_s;
                    const double v2 = scheme.line_velocities_mm_s[c2.line] + c2.order * spacing_mm_s;
                    const double f = w2 / (w1 + w2);
                    const double sf = std::hypot(w1 * s2 * order_weights[n2].sigma, w2 * s1 * order_weights[n1].sigma) /
                                      ((w1 + w2) * (w1 + w2));
                    ref.velocity_mm_s = v1 + f * (v2 - v1);
                    ref.sigma_mm_s = std::min(std::abs(v2 - v1) * sf, 0.5 * std::abs(v2 - v1));
                }
            }
        }
        out.push_back(ref);
    }
    return out;
}

/**
 * Order weights from amplitude groups that contain a single (pair, |n|)
 * entry. An order whose only such groups were pruned as insignificant gets
 * weight 0 with the typical amplitude uncertainty as its error.
 */
inline std::vector<OrderWeight> order_weights_from_fit(const specfit::SpectrumFit& fit,
                                                       const physics::HyperfineScheme& scheme) {
    std::vector<OrderWeight> w(fit.tmpl.max_order + 1);
    if (fit.amplitudes.size() != static_cast<std::size_t>(fit.tmpl.n_groups())) return w;
    std::vector<double> num(w.size(), 0.0), den(w.size(), 0.0), pruned_bound(w.size(), 0.0);
    std::vector<double> sigmas;
    for (int g = 0; g < fit.tmpl.n_groups(); ++g)
        if (fit.group_active[g] && fit.amplitude_sigma[g] > 0.0) sigmas.push_back(fit.amplitude_sigma[g]);
    std::sort(sigmas.begin(), sigmas.end());
    const double typical_sigma = sigmas.empty() ? 0.0 : sigmas[sigmas.size() / 2];
    for (int g = 0; g < fit.tmpl.n_groups(); ++g) {
        const auto& key = fit.tmpl.groups[g].key;
        if (key.size() != 1) continue;
        const auto [pair, n] = *key.begin();
        const double si = scheme.pair_intensities[pair];
        if (!fit.group_active[g]) {
            pruned_bound[n] = std::max(pruned_bound[n], typical_sigma / si);
            continue;
        }
        const double a = fit.amplitudes[g], sa = fit.amplitude_sigma[g];
        if (!(sa > 0.0)) continue;
        const double est = a / si, var = (sa / si) * (sa / si);
        num[n] += est / var;
        den[n] += 1.0 / var;
    }
    for (std::size_t n = 0; n < w.size(); ++n) {
        if (den[n] > 0.0) {
            w[n].value = std::max(num[n] / den[n], 0.0);
            w[n].sigma = 1.0 / std::sqrt(den[n]);
            w[n].known = true;
        } else if (pruned_bound[n] > 0.0) {
            w[n].value = 0.0;
            w[n].sigma = pruned_bound[n];
            w[n].known = true;
        }
    }
    return w;
}

struct CalibrationOptions {
    double rms_gate_mm_s = 0.05;           ///< applied to the inverse-variance weighted rms
    double min_amplitude_significance = 5.0; ///< peaks of weaker groups are not used
    bool birge_scaling = true;               ///< inflate slope/intercept errors by sqrt(chi2/dof) when > 1
    double linearity_level = 0.05; ///< two-sided level of the quadratic-term test
};

struct CalibrationResult {
    double slope = 0.0;     ///< mm/s per channel
    double intercept = 0.0; ///< mm/s at channel 0 (absorbs the isomer shift)
    double slope_sigma = 0.0;
    double intercept_sigma = 0.0;
    double slope_intercept_cov = 0.0;
    std::vector<int> matched_peaks; ///< template peak index per reference used
    std::vector<double> channels;
    std::vector<double> reference_velocities;
    std::vector<double> residuals_mm_s; ///< reference - calibrated
    std::vector<double> residual_sigma_mm_s;
    double rms_mm_s = 0.0;            ///< inverse-variance weighted
    double rms_unweighted_mm_s = 0.0;
    double chi2 = 0.0;
    double birge_ratio = 1.0; ///< sqrt(chi2 / (n_lines - 2))
    int n_lines = 0;
    double quadratic_coeff = 0.0; ///< mm/s per channel^2 about the mean channel
    double quadratic_z = 0.0;
    double quadratic_p = 1.0;
    bool linear_ok = true;
    bool gate_passed = true;

    double velocity(double channel) const { return intercept + slope * channel; }
    double velocity_sigma(double channel) const {
        return std::sqrt(intercept_sigma * intercept_sigma + channel * channel * slope_sigma * slope_sigma +
                         2.0 * channel * slope_intercept_cov);
    }
};

struct MatchedPeak {
    double channel = 0.0;
    double channel_sigma = 0.0;
    double reference = 0.0;
    double reference_sigma = 0.0;
    int peak = -1;
};

namespace detail {

struct WeightedLine {
    double intercept = 0.0, slope = 0.0;
    Eigen::Matrix2d cov;
    double chi2 = 0.0;
};

inline WeightedLine weighted_line(std::span<const MatchedPeak> m, double slope_guess) {
    WeightedLine out;
    double slope = slope_guess;
    for (int pass = 0; pass < 3; ++pass) {
        Eigen::Matrix2d ata = Eigen::Matrix2d::Zero();
        Eigen::Vector2d atb = Eigen::Vector2d::Zero();
        for (const auto& p : m) {
            const double var = p.reference_sigma * p.reference_sigma + slope * slope * p.channel_sigma * p.channel_sigma;
            const double w = 1.0 / std::max(var, 1e-300);
            ata(0, 0) += w;
            ata(0, 1) += w * p.channel;
            ata(1, 1) += w * p.channel * p.channel;
            atb(0) += w * p.reference;
            atb(1) += w * p.channel * p.reference;
        }
        ata(1, 0) = ata(0, 1);
        const Eigen::Vector2d sol = ata.ldlt().solve(atb);
        out.intercept = sol(0);
        out.slope = sol(1);
        out.cov = ata.inverse();
        slope = out.slope;
    }
    out.chi2 = 0.0;
    for (const auto& p : m) {
        const double var = p.reference_sigma * p.reference_sigma + slope * slope * p.channel_sigma * p.channel_sigma;
        const double r = p.reference - (out.intercept + out.slope * p.channel);
        out.chi2 += r * r / std::max(var, 1e-300);
    }
    return out;
}

} // namespace detail

/**
 * Weighted affine regression of reference velocity on matched channel
 * positions. Each fitted peak is assigned to the reference nearest to its
 * preliminary velocity; two peaks claiming one reference is an error.
 */
inline CalibrationResult calibrate_positions(std::span<const double> positions, std::span<const double> sigmas,
                                             const std::vector<bool>& active, std::span<const ReferenceLine> refs,
                                             const specfit::LinearMap& preliminary,
                                             const CalibrationOptions& opt = {}) {
    const std::size_t np = positions.size();
    if (sigmas.size() != np || active.size() != np) throw ConfigError("calibrate: position arrays differ in length");
    std::vector<int> claimed(refs.size(), -1);
    std::vector<MatchedPeak> matched;
    for (std::size_t k = 0; k < np; ++k) {
        if (!active[k]) continue;
        if (!(sigmas[k] > 0.0) || !std::isfinite(positions[k])) continue;
        const double v = preliminary.velocity(positions[k]);
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < refs.size(); ++r) {
            const double d = std::abs(refs[r].velocity_mm_s - v);
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(r);
            }
        }
        if (best < 0) continue;
        if (claimed[best] >= 0)
            throw ConfigError("calibrate: ambiguous matching, peaks " + std::to_string(claimed[best]) + " and " +
                              std::to_string(k) + " are both nearest to reference " +
                              std::to_string(refs[best].velocity_mm_s) + " mm/s");
        claimed[best] = static_cast<int>(k);
        matched.push_back({positions[k], sigmas[k], refs[best].velocity_mm_s, refs[best].sigma_mm_s, static_cast<int>(k)});
    }
    if (matched.size() < 6) throw ConfigError("calibrate: fewer than 6 matched reference lines");
    std::sort(matched.begin(), matched.end(), [](const auto& a, const auto& b) { return a.channel < b.channel; });

    const auto line = detail::weighted_line(matched, preliminary.slope);
    CalibrationResult res;
    res.slope = line.slope;
    res.intercept = line.intercept;
    res.intercept_sigma = std::sqrt(line.cov(0, 0));
    res.slope_sigma = std::sqrt(line.cov(1, 1));
    res.slope_intercept_cov = line.cov(0, 1);
    res.chi2 = line.chi2;
    res.n_lines = static_cast<int>(matched.size());
    res.birge_ratio = std::sqrt(line.chi2 / (res.n_lines - 2));
    if (opt.birge_scaling && res.birge_ratio > 1.0) {
        res.intercept_sigma *= res.birge_ratio;
        res.slope_sigma *= res.birge_ratio;
        res.slope_intercept_cov *= res.birge_ratio * res.birge_ratio;
    }
    double ss = 0.0, wss = 0.0, wsum = 0.0;
    for (const auto& m : matched) {
        res.matched_peaks.push_back(m.peak);
        res.channels.push_back(m.channel);
        res.reference_velocities.push_back(m.reference);
        const double r = m.reference - res.velocity(m.channel);
        const double sig = std::hypot(m.reference_sigma, res.slope * m.channel_sigma);
        res.residuals_mm_s.push_back(r);
        res.residual_sigma_mm_s.push_back(sig);
        ss += r * r;
        wss += r * r / (sig * sig);
        wsum += 1.0 / (sig * sig);
    }
    res.rms_mm_s = std::sqrt(wss / wsum);
    res.rms_unweighted_mm_s = std::sqrt(ss / matched.size());
    res.gate_passed = res.rms_mm_s <= opt.rms_gate_mm_s;

    // linearity: weighted quadratic about the mean channel, z-test on the curvature
    if (matched.size() >= 4) {
        double cbar = 0.0;
        for (const auto& m : matched) cbar += m.channel;
        cbar /= matched.size();
        Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
        Eigen::Vector3d atb = Eigen::Vector3d::Zero();
        for (const auto& m : matched) {
            const double var =
                m.reference_sigma * m.reference_sigma + res.slope * res.slope * m.channel_sigma * m.channel_sigma;
            const double w = 1.0 / std::max(var, 1e-300);
            const double u = m.channel - cbar;
            const Eigen::Vector3d row(1.0, u, u * u);
            ata += w * row * row.transpose();
            atb += w * row * m.reference;
        }
        const Eigen::Vector3d sol = ata.ldlt().solve(atb);
        const Eigen::Matrix3d cov = ata.inverse();
        res.quadratic_coeff = sol(2);
        res.quadratic_z = sol(2) / std::sqrt(cov(2, 2));
        res.quadratic_p = std::erfc(std::abs(res.quadratic_z) / std::numbers::sqrt2);
        res.linear_ok = res.quadratic_p > opt.linearity_level;
    }
    return res;
}

/// Preliminary map: the scan's nominal map adjusted by the fit's registration.
inline specfit::LinearMap preliminary_map(const specfit::SpectrumFit& fit, const physics::ScanParams& scan) {
    const auto nom = specfit::nominal_map(scan);
    const double mid = 0.5 * (scan.n_channels - 1);
    // ch = mid + (ch_nom - mid)/scale + shift  =>  ch_nom = mid + (ch - shift - mid) * scale
    const double s = fit.registration_scale, d = fit.registration_shift;
    return {nom.intercept + nom.slope * (mid - (d + mid) * s), nom.slope * s};
}

inline CalibrationResult calibrate(const specfit::SpectrumFit& fit, const physics::ScanParams& scan,
                                   const physics::HyperfineScheme& scheme, double sideband_spacing_mm_s,
                                   const CalibrationOptions& opt = {}) {
    const auto weights = order_weights_from_fit(fit, scheme);
    const auto refs = reference_lines(fit.tmpl, scheme, sideband_spacing_mm_s, weights);
    std::vector<bool> use = fit.peak_active;
    for (int k = 0; k < fit.tmpl.n_peaks(); ++k) {
        if (!use[k]) continue;
        const int g = fit.amplitude_of_peak[k];
        const double a = fit.amplitudes[g], s = fit.amplitude_sigma[g];
        if (!(a > opt.min_amplitude_significance * s)) use[k] = false;
    }
    return calibrate_positions(fit.positions, fit.position_sigma, use, refs, preliminary_map(fit, scan), opt);
}

struct DriftReport {
    std::vector<double> relative_drift; ///< slope_i / slope_0 - 1
    std::vector<double> z;              ///< significance of each change
    double max_relative_drift = 0.0;
    double max_z = 0.0;
    bool detected = false;       ///< some change significant at z_threshold
    bool within_tolerance = true; ///< all |drift| <= tolerance
};

/// Slope changes of a series of calibrations relative to the first one.
inline DriftReport detect_drift(std::span<const CalibrationResult> series, double tolerance = 0.02,
                                double z_threshold = 3.0) {
    if (series.size() < 2) throw ConfigError("detect_drift needs at least two calibrations");
    DriftReport r;
    const auto& ref = series.front();
    for (const auto& c : series) {
        const double rel = c.slope / ref.slope - 1.0;
        const double s = std::hypot(c.slope_sigma, ref.slope_sigma);
        const double z = s > 0 ? (c.slope - ref.slope) / s : 0.0;
        r.relative_drift.push_back(rel);
        r.z.push_back(z);
        r.max_relative_drift = std::max(r.max_relative_drift, std::abs(rel));
        r.max_z = std::max(r.max_z, std::abs(z));
    }
    r.detected = r.max_z > z_threshold;
    r.within_tolerance = r.max_relative_drift <= tolerance;
    return r;
}

} // namespace mossfloq::calib
