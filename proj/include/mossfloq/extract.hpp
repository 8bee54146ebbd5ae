#pragma once

// Sideband powers from a normalized spectrum: windowed peak areas folded
// over mirror partners, then a linear inversion through the overlap matrix.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mossfloq/calib.hpp"
#include "mossfloq/errors.hpp"
#include "mossfloq/peak_table.hpp"
#include "mossfloq/physics.hpp"
#include "mossfloq/specfit.hpp"

namespace mossfloq::extract {

inline constexpr int kRows = 9;
inline constexpr int kOrders = 3;

using OverlapMatrix = Eigen::Matrix<double, kRows, kOrders>;

/// Rows y0..y8 as (inner, middle, outer) = (a, b, c) weights of P0, P1, P2.
inline OverlapMatrix build_overlap_matrix(double a, double b, double c) {
    if (!(a > 0.0) || !(b >= 0.0) || !(c >= 0.0)) throw ConfigError("overlap matrix needs a > 0 and b, c >= 0");
    OverlapMatrix m;
    // clang-format off
    m << a, 0, 0,
         b, c, 0,
         c, b, 0,
         0, a, 0,
         0, a, 0,
         0, b, c,
         0, c, b,
         0, 0, a,
         0, 0, a;
    // clang-format on
    return m;
}

/// Mirror pairs of a full template, ordered by distance from the pattern centroid.
struct FoldedPeaks {
    std::vector<std::array<int, 2>> pairs; ///< template peak indices (lower, upper velocity)
};

inline FoldedPeaks fold_template(const peaks::PeakTemplate& tmpl, double centroid_mm_s) {
    FoldedPeaks f;
    std::vector<bool> used(tmpl.n_peaks(), false);
    std::vector<std::pair<double, std::array<int, 2>>> order;
    for (int k = 0; k < tmpl.n_peaks(); ++k) {
        if (used[k]) continue;
        const int j = tmpl.mirror_of(k);
        if (j < 0 || used[j]) throw ConfigError("extract: template peak without a mirror partner");
        used[k] = used[j] = true;
        const int lo = tmpl.peaks[k].velocity_mm_s < tmpl.peaks[j].velocity_mm_s ? k : j;
        const int hi = lo == k ? j : k;
        const double d = 0.5 * (std::abs(tmpl.peaks[lo].velocity_mm_s - centroid_mm_s) +
                                std::abs(tmpl.peaks[hi].velocity_mm_s - centroid_mm_s));
        order.push_back({d, {lo, hi}});
    }
    std::stable_sort(order.begin(), order.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
    for (const auto& o : order) f.pairs.push_back(o.second);
    return f;
}

/**
 * Overlap matrix read off a template: row j sums s_pair over the components
 * of folded pair j under the column of their |n|. For the default scheme at
 * the nominal spacing it reproduces build_overlap_matrix(s_inner, s_middle, s_outer).
 */
inline Eigen::MatrixXd template_overlap_matrix(const peaks::PeakTemplate& tmpl, const FoldedPeaks& folded,
                                               std::array<double, 3> pair_weights) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(folded.pairs.size()), tmpl.max_order + 1);
    for (std::size_t j = 0; j < folded.pairs.size(); ++j)
        for (const auto& c : tmpl.peaks[folded.pairs[j][0]].components)
            m(static_cast<Eigen::Index>(j), std::abs(c.order)) +=
                pair_weights[static_cast<int>(physics::line_pair(c.line))];
    return m;
}

/// Fraction of a unit-area Lorentzian of FWHM `fwhm` inside center +- half_window.
inline double lorentzian_captured_fraction(double half_window, double fwhm) {
    return (2.0 / std::numbers::pi) * std::atan(2.0 * half_window / fwhm);
}

struct IntegrationOptions {
    double half_window_in_fwhm = 1.0; ///< window = center +- this * FWHM
    double min_channels_per_fwhm = 7.5; ///< applied to the fitted width, which scatters around the nominal 8.1
    double fwhm_mm_s = 0.0; ///< integration linewidth; 0 uses each spectrum's fitted width
};

struct PeakArea {
    double center_mm_s = 0.0;
    double lo_mm_s = 0.0, hi_mm_s = 0.0;
    double area = 0.0; ///< of (1 - normalized), mm/s
    double sigma = 0.0;
    double leakage = 0.0; ///< neighbour tails removed from `area`
    bool truncated = false;
    Eigen::Matrix<double, 1, 6> d_baseline = Eigen::Matrix<double, 1, 6>::Zero(); ///< d area / d baseline coeffs
};

/**
 * Area of (1 - normalized) over [lo, hi] on a piecewise-linear interpolant of
 * samples at velocities v (any monotone order). Returns the coefficient of
 * each sample so the caller can propagate errors.
 */
inline double window_integral(std::span<const double> v, std::span<const double> y, double lo, double hi,
                              std::vector<std::pair<int, double>>* coeffs = nullptr) {
    const int n = static_cast<int>(v.size());
    const bool up = v.back() > v.front();
    auto idx = [&](int i) { return up ? i : n - 1 - i; };
    if (coeffs) coeffs->clear();
    double total = 0.0;
    for (int i = 0; i + 1 < n; ++i) {
        const int i0 = idx(i), i1 = idx(i + 1);
        const double x0 = v[i0], x1 = v[i1];
        const double a = std::max(lo, x0), b = std::min(hi, x1);
        if (!(b > a)) continue;
        // linear interpolant between the two samples, integrated over [a, b]
        const double h = x1 - x0;
        const double ua = (a - x0) / h, ub = (b - x0) / h;
        const double w1 = h * 0.5 * (ub * ub - ua * ua);  // weight of sample i1
        const double w0 = (b - a) - w1;                   // weight of sample i0
        total += w0 * y[i0] + w1 * y[i1];
        if (coeffs) {
            coeffs->push_back({i0, w0});
            coeffs->push_back({i1, w1});
        }
    }
    return total;
}

/// One fitted Lorentzian on the calibrated axis; `owner` is the index of the integrated peak it belongs to.
struct LorentzianTerm {
    double center_mm_s = 0.0;
    double area_mm_s = 0.0;
    double fwhm_mm_s = 0.0;
    int owner = -1;

    double integral(double lo, double hi) const {
        return area_mm_s / std::numbers::pi *
               (std::atan(2.0 * (hi - center_mm_s) / fwhm_mm_s) - std::atan(2.0 * (lo - center_mm_s) / fwhm_mm_s));
    }
};

/**
 * Windowed areas for peaks at `centers_mm_s` on the calibrated axis of the
 * normalized spectrum. A window that would reach past the midpoint to a
 * neighbouring center is cut there and flagged. Tails of `neighbours` not
 * owned by the peak are integrated analytically and removed from its window.
 */
inline std::vector<PeakArea> integrate_peaks(const specfit::NormalizedSpectrum& norm,
                                             const calib::CalibrationResult& cal, std::span<const double> centers_mm_s,
                                             double fwhm_mm_s, const IntegrationOptions& opt = {},
                                             std::span<const LorentzianTerm> neighbours = {}) {
    const int n = static_cast<int>(norm.value.size());
    if (n < 2 || norm.sigma.size() != norm.value.size()) throw ConfigError("integrate_peaks: malformed spectrum");
    if (!(fwhm_mm_s > 0.0)) throw ConfigError("integrate_peaks: linewidth must be positive");
    const double channels_per_fwhm = fwhm_mm_s / std::abs(cal.slope);
    if (channels_per_fwhm < opt.min_channels_per_fwhm)
        throw ConfigError("integrate_peaks: " + std::to_string(channels_per_fwhm) +
                          " channels per linewidth is below the resolution gate");
    std::vector<double> v(n), d(n);
    for (int i = 0; i < n; ++i) {
        v[i] = cal.velocity(i);
        d[i] = 1.0 - norm.value[i];
    }
    std::vector<double> sorted(centers_mm_s.begin(), centers_mm_s.end());
    std::sort(sorted.begin(), sorted.end());
    const double half = opt.half_window_in_fwhm * fwhm_mm_s;
    const double vmin = std::min(v.front(), v.back()), vmax = std::max(v.front(), v.back());
    std::vector<PeakArea> out;
    std::vector<std::pair<int, double>> coeffs;
    for (double c : centers_mm_s) {
        PeakArea p;
        p.center_mm_s = c;
        p.lo_mm_s = c - half;
        p.hi_mm_s = c + half;
        const auto it = std::lower_bound(sorted.begin(), sorted.end(), c);
        if (it != sorted.begin()) {
            const double mid = 0.5 * (c + *(it - 1));
            if (mid > p.lo_mm_s) {
                p.lo_mm_s = mid;
                p.truncated = true;
            }
        }
        if (it + 1 != sorted.end() && *(it + 1) > c) {
            const double mid = 0.5 * (c + *(it + 1));
            if (mid < p.hi_mm_s) {
                p.hi_mm_s = mid;
                p.truncated = true;
            }
        }
        if (p.lo_mm_s < vmin || p.hi_mm_s > vmax) {
            p.lo_mm_s = std::max(p.lo_mm_s, vmin);
            p.hi_mm_s = std::min(p.hi_mm_s, vmax);
            p.truncated = true;
        }
        p.area = window_integral(v, d, p.lo_mm_s, p.hi_mm_s, &coeffs);
        const int self = static_cast<int>(out.size());
        for (const auto& t : neighbours)
            if (t.owner != self) p.leakage += t.integral(p.lo_mm_s, p.hi_mm_s);
        p.area -= p.leakage;
        // adjacent intervals share samples: accumulate per-sample weights first
        std::vector<std::pair<int, double>> merged;
        for (const auto& [i, w] : coeffs) {
            if (!merged.empty() && merged.back().first == i)
                merged.back().second += w;
            else
                merged.push_back({i, w});
        }
        double var = 0.0;
        for (const auto& [i, w] : merged) var += w * w * norm.sigma[i] * norm.sigma[i];
        p.sigma = std::sqrt(var);
        if (norm.baseline.size() == norm.value.size() && norm.t.size() == norm.value.size()) {
            // d(1 - n)/d beta_j = n t^j / B
            for (const auto& [i, w] : merged) {
                double tp = 1.0;
                for (int j = 0; j < 6; ++j) {
                    p.d_baseline(j) += w * norm.value[i] * tp / norm.baseline[i];
                    tp *= norm.t[i];
                }
            }
        }
        out.push_back(p);
    }
    return out;
}

/// Folded peak areas: y_j is the mean of the two mirror partners.
struct YVector {
    Eigen::VectorXd y;
    Eigen::VectorXd sigma;      ///< counting noise only
    Eigen::MatrixXd covariance; ///< diag(sigma^2) plus the baseline term when available
    std::vector<bool> truncated;
};

/// Folds mirror pairs; a non-null `baseline_cov` adds G Sigma_beta G^T to the covariance.
inline YVector fold_areas(std::span<const PeakArea> areas, const FoldedPeaks& folded,
                          const Eigen::Matrix<double, 6, 6>* baseline_cov = nullptr) {
    YVector out;
    const auto m = static_cast<Eigen::Index>(folded.pairs.size());
    out.y.resize(m);
    out.sigma.resize(m);
    out.truncated.assign(folded.pairs.size(), false);
    Eigen::MatrixXd g(m, 6);
    for (Eigen::Index j = 0; j < m; ++j) {
        const auto& p0 = areas[folded.pairs[j][0]];
        const auto& p1 = areas[folded.pairs[j][1]];
        out.y(j) = 0.5 * (p0.area + p1.area);
        out.sigma(j) = 0.5 * std::hypot(p0.sigma, p1.sigma);
        out.truncated[j] = p0.truncated || p1.truncated;
        g.row(j) = 0.5 * (p0.d_baseline + p1.d_baseline);
    }
    out.covariance = out.sigma.array().square().matrix().asDiagonal();
    if (baseline_cov) out.covariance += g * (*baseline_cov) * g.transpose();
    return out;
}

struct SidebandPowers {
    Eigen::Vector3d p = Eigen::Vector3d::Zero();
    Eigen::Matrix3d covariance = Eigen::Matrix3d::Zero();
    double drive_power_W = 0.0;
    Eigen::VectorXd y;
    Eigen::VectorXd sigma_y;
    Eigen::VectorXd residuals; ///< y - A p
    double chi2 = 0.0;

    double sigma(int n) const { return std::sqrt(covariance(n, n)); }
};

/// (a, b, c) = (inner, middle, outer) relative intensities with uncertainties.
struct LineIntensities {
    std::array<double, 3> value{}; ///< a, b, c
    std::array<double, 3> sigma{};
};

/**
 * x = M y with M the least-squares pseudo-inverse of A; Sigma_p = M Sigma_y M^T.
 * With `weighted`, M = (A^T W A)^-1 A^T W for W = Sigma_y^-1 instead.
 */
inline SidebandPowers invert_with_covariance(const Eigen::VectorXd& y, const Eigen::MatrixXd& cov_y,
                                             const Eigen::MatrixXd& a, bool weighted = false) {
    if (y.size() != a.rows() || cov_y.rows() != a.rows() || cov_y.cols() != a.rows() || a.cols() != kOrders)
        throw ConfigError("invert_for_powers: dimension mismatch");
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a);
    const auto& s = svd.singularValues();
    if (s.size() < kOrders || !(s(kOrders - 1) > 1e-12 * s(0)))
        throw RankError("invert_for_powers: overlap matrix is rank deficient");
    Eigen::MatrixXd m;
    Eigen::LLT<Eigen::MatrixXd> llt(cov_y);
    if (weighted) {
        if (llt.info() != Eigen::Success) throw ConfigError("invert_for_powers: weighted inversion needs Sigma_y > 0");
        const Eigen::MatrixXd atw = llt.solve(a).transpose();  // A^T W
        m = (atw * a).ldlt().solve(atw);
    } else {
        m = (a.transpose() * a).ldlt().solve(a.transpose());
    }
    SidebandPowers out;
    out.p = m * y;
    out.covariance = m * cov_y * m.transpose();
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
    out.y = y;
    out.sigma_y = cov_y.diagonal().cwiseSqrt();
    out.residuals = y - a * out.p;
    out.chi2 = 0.0;
    if (llt.info() == Eigen::Success) out.chi2 = out.residuals.dot(llt.solve(out.residuals));
    return out;
}

/// Diagonal Sigma_y = diag(sigma_y^2).
inline SidebandPowers invert_for_powers(const Eigen::VectorXd& y, const Eigen::VectorXd& sigma_y,
                                        const Eigen::MatrixXd& a, bool weighted = false) {
    if (sigma_y.size() != a.rows()) throw ConfigError("invert_for_powers: dimension mismatch");
    if (weighted)
        for (Eigen::Index i = 0; i < sigma_y.size(); ++i)
            if (!(sigma_y(i) > 0.0)) throw ConfigError("invert_for_powers: weighted inversion needs sigma_y > 0");
    const Eigen::MatrixXd cov = sigma_y.array().square().matrix().asDiagonal();
    return invert_with_covariance(y, cov, a, weighted);
}

/**
 * dp/d(a, b, c) by first-order propagation through p = (A^T A)^-1 A^T y:
 * dp = (A^T A)^-1 (dA^T r - A^T dA p) with r = y - A p.
 */
inline Eigen::Matrix3d intensity_jacobian(const SidebandPowers& s, const LineIntensities& li) {
    const Eigen::MatrixXd a = build_overlap_matrix(li.value[0], li.value[1], li.value[2]);
    const Eigen::MatrixXd ata = a.transpose() * a;
    Eigen::Matrix3d j;
    for (int k = 0; k < 3; ++k) {
        std::array<double, 3> e{0.0, 0.0, 0.0};
        e[k] = 1.0;
        // dA/d(theta_k) is the pattern with a one where theta_k appears; a > 0 check bypassed
        OverlapMatrix da;
        // clang-format off
        da << e[0], 0, 0,
              e[1], e[2], 0,
              e[2], e[1], 0,
              0, e[0], 0,
              0, e[0], 0,
              0, e[1], e[2],
              0, e[2], e[1],
              0, 0, e[0],
              0, 0, e[0];
        // clang-format on
        const Eigen::MatrixXd dam = da;
        j.col(k) = ata.ldlt().solve(dam.transpose() * s.residuals - a.transpose() * (dam * s.p));
    }
    return j;
}

inline Eigen::Matrix3d intensity_covariance(const LineIntensities& li) {
    return Eigen::Vector3d(li.sigma[0] * li.sigma[0], li.sigma[1] * li.sigma[1], li.sigma[2] * li.sigma[2])
        .asDiagonal();
}

/**
 * Adds the (a, b, c) uncertainty to Sigma_p. The error is common to every
 * spectrum reduced with the same (a, b, c); see globalfit's joint covariance.
 */
inline void add_intensity_error(SidebandPowers& s, const LineIntensities& li) {
    const Eigen::Matrix3d j = intensity_jacobian(s, li);
    s.covariance += j * intensity_covariance(li) * j.transpose();
    s.covariance = 0.5 * (s.covariance + s.covariance.transpose()).eval();
}

/**
 * Peak areas (mm/s) of the unmodulated pairs from a zero-drive fit: group
 * amplitudes are Lorentzian areas in channels, converted with |slope|.
 */
inline LineIntensities intensities_from_zero_drive(const specfit::SpectrumFit& fit,
                                                   const calib::CalibrationResult& cal) {
    LineIntensities out;
    std::array<bool, 3> seen{};
    for (int g = 0; g < fit.tmpl.n_groups(); ++g) {
        const auto& key = fit.tmpl.groups[g].key;
        if (key.size() != 1 || key.begin()->second != 0) continue;
        const int pair = key.begin()->first;
        // column order (a, b, c) = (inner, middle, outer)
        const int col = 2 - pair;
        if (!fit.group_active[g]) throw ConvergenceError("zero-drive fit lost an unmodulated line group");
        out.value[col] = fit.amplitudes[g] * std::abs(cal.slope);
        out.sigma[col] = fit.amplitude_sigma[g] * std::abs(cal.slope);
        seen[col] = true;
    }
    if (!seen[0] || !seen[1] || !seen[2]) throw ConfigError("zero-drive fit does not contain all three line pairs");
    return out;
}

struct PeakSet {
    std::vector<double> centers_mm_s;      ///< one per peak of the full template
    std::vector<LorentzianTerm> terms;     ///< every fitted peak, owned by its full-template peak
    double fwhm_mm_s = 0.0;
};

/**
 * Integration centers for every peak of `full`: the calibrated fitted
 * position when the fit template has a peak within `match_tol` of it, else
 * the template velocity (same frame, the intercept absorbs the isomer shift).
 */
inline PeakSet fitted_peaks(const peaks::PeakTemplate& full, const specfit::SpectrumFit& fit,
                            const calib::CalibrationResult& cal, double match_tol_mm_s = 0.15) {
    PeakSet out;
    out.fwhm_mm_s = fit.linewidth * std::abs(cal.slope);
    std::vector<int> owner(fit.tmpl.n_peaks(), -1);
    for (int k = 0; k < full.n_peaks(); ++k) {
        double c = full.peaks[k].velocity_mm_s;
        double best = match_tol_mm_s;
        int match = -1;
        for (int j = 0; j < fit.tmpl.n_peaks(); ++j) {
            const double d = std::abs(fit.tmpl.peaks[j].velocity_mm_s - full.peaks[k].velocity_mm_s);
            if (d <= best && std::isfinite(fit.positions[j])) {
                best = d;
                match = j;
            }
        }
        if (match >= 0) {
            c = cal.velocity(fit.positions[match]);
            owner[match] = k;
        }
        out.centers_mm_s.push_back(c);
    }
    for (int j = 0; j < fit.tmpl.n_peaks(); ++j) {
        const double a = fit.amplitudes[fit.amplitude_of_peak[j]];
        if (!(a > 0.0) || !std::isfinite(fit.positions[j])) continue;
        out.terms.push_back({cal.velocity(fit.positions[j]), a * std::abs(cal.slope), out.fwhm_mm_s, owner[j]});
    }
    return out;
}

/// Folded y-vector of one spectrum.
inline YVector measure_y(const specfit::NormalizedSpectrum& norm, const specfit::SpectrumFit& fit,
                         const calib::CalibrationResult& cal, const peaks::PeakTemplate& full,
                         const FoldedPeaks& folded, const IntegrationOptions& opt = {}, bool subtract_tails = true,
                         bool baseline_covariance = true) {
    const auto set = fitted_peaks(full, fit, cal);
    const double fwhm = opt.fwhm_mm_s > 0.0 ? opt.fwhm_mm_s : set.fwhm_mm_s;
    const auto areas = integrate_peaks(norm, cal, set.centers_mm_s, fwhm, opt,
                                       subtract_tails ? std::span<const LorentzianTerm>(set.terms)
                                                      : std::span<const LorentzianTerm>());
    const bool with_cov = baseline_covariance && norm.has_baseline_covariance;
    return fold_areas(areas, folded, with_cov ? &norm.baseline_covariance : nullptr);
}

/// (a, b, c) as the first three folded areas of a zero-drive spectrum, where y = A (1, 0, 0).
inline LineIntensities intensities_from_zero_drive_areas(const YVector& y0) {
    if (y0.y.size() < 3) throw ConfigError("zero-drive y-vector too short");
    LineIntensities out;
    for (int i = 0; i < 3; ++i) {
        out.value[i] = y0.y(i);
        out.sigma[i] = y0.sigma(i);
    }
    if (!(out.value[0] > 0.0)) throw ConvergenceError("zero-drive inner-line area is not positive");
    return out;
}

} // namespace mossfloq::extract
