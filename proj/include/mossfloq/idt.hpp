#pragma once

// Cross-field model of an interdigital transducer pair: acoustic admittance,
// single-transducer scattering parameters, the delay-line approximation of
// the full device, and the drive efficiency / reflection it implies.

#include <array>
#include <cmath>
#include <limits>
#include <complex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mossfloq/errors.hpp"
#include "mossfloq/levmar.hpp"
#include "mossfloq/rng.hpp"

namespace mossfloq::idt {

using cplx = std::complex<double>;

/// Amplitude factor for a loss quoted in dB (amplitude convention, 20 log10).
inline double loss_db_to_amplitude(double db) { return std::pow(10.0, db / 20.0); }

struct IdtDesign {
    int n_periods = 200;
    double aperture_m = 970e-6;
    double wavelength_m = 32e-6;
    double center_angular_freq = 2.0 * std::numbers::pi * 97.9e6;
    double coupling_k2 = 1.1e-3;
    double cap_per_period_F_per_m = 5.0e-11; ///< 0.5 pF per period per cm of aperture
    double shunt_R_ohm = 10.0;
    double source_Z_ohm = 50.0;
    double propagation_loss = loss_db_to_amplitude(-1.68);

    void validate() const {
        if (n_periods <= 0) throw ConfigError("idt: n_periods must be positive");
        if (!(aperture_m > 0 && wavelength_m > 0 && center_angular_freq > 0 && coupling_k2 > 0 &&
              cap_per_period_F_per_m > 0 && shunt_R_ohm > 0 && source_Z_ohm > 0 && propagation_loss > 0))
            throw ConfigError("idt: design parameters must be positive");
        if (!(coupling_k2 < 0.1)) throw ConfigError("idt: coupling k2 must be << 1");
    }
};

/**
 * Design whose model reproduces the published drive efficiency 0.35 and
 * reflection 0.34 at -1.68 dB propagation loss, with k2 held at the
 * literature value for ST-quartz.
 */
inline IdtDesign fitted_device_preset() {
    IdtDesign d;
    d.coupling_k2 = 1.1e-3;
    d.cap_per_period_F_per_m = 7.0522e-11;
    d.shunt_R_ohm = 21.507;
    d.propagation_loss = loss_db_to_amplitude(-1.68);
    return d;
}

struct SParams {
    double freq = 0.0; ///< angular frequency, rad/s
    cplx s11{0.0, 0.0};
    cplx s12{0.0, 0.0};
    cplx s22{0.0, 0.0};
    bool degenerate = false; ///< G_a = 0: no acoustic coupling at this frequency
};

struct Admittance {
    double G_a = 0.0;
    double B_a = 0.0;
    double C_T = 0.0;
};

inline double normalized_detuning(double omega, const IdtDesign& d) {
    return d.n_periods * std::numbers::pi * (omega - d.center_angular_freq) / d.center_angular_freq;
}

/// Admittance prefactor (4/pi) k2 Omega_saw C N^2 with C = C_FF * W per period.
inline double admittance_scale(const IdtDesign& d) {
    const double n = d.n_periods;
    return 4.0 / std::numbers::pi * d.coupling_k2 * d.center_angular_freq * d.cap_per_period_F_per_m * d.aperture_m * n * n;
}

inline Admittance acoustic_admittance(double x, const IdtDesign& d) {
    const double g0 = admittance_scale(d);
    double sinc2, bfac;
    if (std::abs(x) < 1e-3) {
        const double x2 = x * x;
        sinc2 = 1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 45.0;
        bfac = -2.0 * x / 3.0 + 2.0 * x * x2 / 15.0;
    } else {
        const double s = std::sin(x) / x;
        sinc2 = s * s;
        bfac = (std::sin(2.0 * x) - 2.0 * x) / (2.0 * x * x);
    }
    return {g0 * sinc2, g0 * bfac, d.n_periods * d.aperture_m * d.cap_per_period_F_per_m};
}

/// Primed (single transducer) parameters. Written in terms of G_a = 1/Z2 so the
/// G_a -> 0 limit is regular: S'12 -> 0, S'22 -> -1.
inline SParams single_transducer_sparams(double omega, const IdtDesign& d) {
    const Admittance a = acoustic_admittance(normalized_detuning(omega, d), d);
    const cplx j(0.0, 1.0);
    const cplx zl = d.shunt_R_ohm + 1.0 / (j * (omega * a.C_T + a.B_a));
    const cplx z1 = d.source_Z_ohm;
    const double g = a.G_a;
    const cplx zlg1 = zl * g + 1.0;
    SParams s;
    s.freq = omega;
    s.s11 = (zl - std::conj(z1) * zlg1) / (zl + z1 * zlg1);
    s.s22 = (zl * z1 * g - (zl + z1)) / (zl * z1 * g + (zl + z1));
    s.s12 = std::sqrt(z1.real() * g) * 2.0 * zl / (z1 + zl * (z1 * g + 1.0));
    s.degenerate = (g == 0.0);
    return s;
}

/// Two identical transducers separated by a lossy delay line.
inline SParams device_sparams(double omega, const IdtDesign& d) {
    SParams p = single_transducer_sparams(omega, d);
    SParams s = p;
    s.s12 = p.s12 * p.s12 * (d.propagation_loss / 2.0);
    s.s22 = p.s11;
    return s;
}

struct DriveCoefficients {
    double eta = 0.0;
    double alpha = 0.0;
    cplx eta_complex{0.0, 0.0};
    cplx alpha_complex{0.0, 0.0};
};

inline DriveCoefficients derive_eta_alpha(const IdtDesign& d) {
    const SParams p = single_transducer_sparams(d.center_angular_freq, d);
    DriveCoefficients c;
    c.eta_complex = std::sqrt(d.propagation_loss / 2.0) * p.s12;
    c.alpha_complex = (d.propagation_loss / 2.0) * p.s22;
    c.eta = std::abs(c.eta_complex);
    c.alpha = std::abs(c.alpha_complex);
    return c;
}

inline std::vector<SParams> device_sweep(const IdtDesign& d, double f_lo_hz, double f_hi_hz, int points) {
    if (points < 2) throw ConfigError("idt sweep needs at least 2 points");
    std::vector<SParams> out;
    out.reserve(points);
    for (int i = 0; i < points; ++i) {
        const double f = f_lo_hz + (f_hi_hz - f_lo_hz) * i / (points - 1);
        out.push_back(device_sparams(2.0 * std::numbers::pi * f, d));
    }
    return out;
}

/// Device sweep with complex multiplicative noise s (1 + rel (g1 + i g2)).
inline std::vector<SParams> synthesize_traces(const IdtDesign& d, double f_lo_hz, double f_hi_hz, int points,
                                              double relative_noise, rng::Stream& rs) {
    auto out = device_sweep(d, f_lo_hz, f_hi_hz, points);
    if (relative_noise > 0.0) {
        for (auto& s : out) {
            const cplx e1(rs.normal(), rs.normal()), e2(rs.normal(), rs.normal());
            s.s11 *= 1.0 + relative_noise * e1;
            s.s12 *= 1.0 + relative_noise * e2;
            s.s22 = s.s11;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Trace fit

inline constexpr int kIdtFitParams = 5; ///< k2, C_FF, R_L, eta_p, Omega_saw

struct IdtFitOptions {
    double relative_noise = 0.01; ///< magnitude noise level used for weights
    bool multistart = true;       ///< also start from C_FF, R_L scaled by 1/2 and 2
    lm::Options lm{};
};

struct IdtFitReport {
    IdtDesign design;
    std::array<double, kIdtFitParams> values{};
    std::array<double, kIdtFitParams> std_errors{};
    Eigen::MatrixXd log_covariance; ///< over log(k2, C_FF, R_L, eta_p, Omega); empty when singular
    double chi2 = 0.0;
    double chi2_reduced = 0.0;
    double residual_rms = 0.0; ///< rms of weighted residuals
    int iterations = 0;
    int n_points = 0;
    bool converged = false;
    std::string message;
};

namespace detail {

inline IdtDesign apply_log_params(IdtDesign d, const Eigen::VectorXd& p) {
    d.coupling_k2 = std::exp(p[0]);
    d.cap_per_period_F_per_m = std::exp(p[1]);
    d.shunt_R_ohm = std::exp(p[2]);
    d.propagation_loss = std::exp(p[3]);
    d.center_angular_freq = std::exp(p[4]);
    return d;
}

inline Eigen::VectorXd log_params(const IdtDesign& d) {
    Eigen::VectorXd p(kIdtFitParams);
    p << std::log(d.coupling_k2), std::log(d.cap_per_period_F_per_m), std::log(d.shunt_R_ohm),
        std::log(d.propagation_loss), std::log(d.center_angular_freq);
    return p;
}

} // namespace detail

/**
 * Least-squares fit of (k2, C_FF, R_L, eta_p, Omega_saw) to measured |S11| and
 * |S12| traces of the full device. Residuals are relative magnitude errors
 * weighted by relative_noise; phases are not used. Non-convergence is
 * reported in the result with the best parameters found.
 */
inline IdtFitReport fit_sparam_traces(std::span<const SParams> measured, const IdtDesign& initial,
                                      const IdtFitOptions& opt = {}) {
    initial.validate();
    if (measured.size() < 4) throw ConfigError("idt fit: need at least 4 trace points");
    const std::size_t n = measured.size();
    std::vector<double> m11(n), m12(n), w11(n), w12(n);
    for (std::size_t i = 0; i < n; ++i) {
        m11[i] = std::abs(measured[i].s11);
        m12[i] = std::abs(measured[i].s12);
        w11[i] = 1.0 / (opt.relative_noise * std::max(m11[i], 1e-9));
        w12[i] = 1.0 / (opt.relative_noise * std::max(m12[i], 1e-9));
    }
    const lm::ResidualFn f = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd* jac) {
        const auto eval = [&](const Eigen::VectorXd& q, Eigen::VectorXd& out) {
            const IdtDesign d = detail::apply_log_params(initial, q);
            out.resize(2 * static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < n; ++i) {
                const SParams s = device_sparams(measured[i].freq, d);
                out[2 * i] = (std::abs(s.s11) - m11[i]) * w11[i];
                out[2 * i + 1] = (std::abs(s.s12) - m12[i]) * w12[i];
            }
        };
        eval(p, r);
        if (jac) {
            jac->resize(r.size(), p.size());
            Eigen::VectorXd pp = p, rp, rm;
            for (Eigen::Index j = 0; j < p.size(); ++j) {
                // log parameters: absolute step; the frequency needs a finer one
                const double h = j == 4 ? 1e-9 : 1e-6;
                pp[j] = p[j] + h;
                eval(pp, rp);
                pp[j] = p[j] - h;
                eval(pp, rm);
                pp[j] = p[j];
                jac->col(j) = (rp - rm) / (2.0 * h);
            }
        }
    };

    // Register the center frequency first: LM from an offset of a fraction of
    // the lobe width can lock onto a side-lobe alignment.
    Eigen::VectorXd p_init = detail::log_params(initial);
    {
        Eigen::VectorXd r, best_p = p_init;
        double best_chi2 = std::numeric_limits<double>::infinity();
        const double span = 1.0 / initial.n_periods;
        for (int k = -100; k <= 100; ++k) {
            Eigen::VectorXd p = p_init;
            p[4] += std::log1p(span * k / 100.0);
            f(p, r, nullptr);
            const double c2 = r.squaredNorm();
            if (c2 < best_chi2) {
                best_chi2 = c2;
                best_p = p;
            }
        }
        p_init = best_p;
    }
    std::vector<Eigen::VectorXd> starts{p_init};
    if (opt.multistart) {
        for (double sc : {0.5, 2.0})
            for (double sr : {0.5, 2.0}) {
                Eigen::VectorXd p = starts.front();
                p[1] += std::log(sc);
                p[2] += std::log(sr);
                starts.push_back(p);
            }
    }
    lm::Result best;
    for (const auto& p0 : starts) {
        lm::Result r;
        try {
            r = lm::minimize(f, p0, opt.lm);
        } catch (const ConvergenceError&) {
            continue;
        }
        if (r.chi2 < best.chi2) best = r;
    }
    if (best.params.size() == 0) throw ConvergenceError("idt fit: no start produced finite residuals");

    IdtFitReport rep;
    rep.design = detail::apply_log_params(initial, best.params);
    rep.n_points = static_cast<int>(n);
    rep.chi2 = best.chi2;
    const int dof = 2 * static_cast<int>(n) - kIdtFitParams;
    rep.chi2_reduced = best.chi2 / dof;
    rep.residual_rms = std::sqrt(best.chi2 / (2.0 * n));
    rep.iterations = best.iterations;
    rep.converged = best.converged;
    rep.message = best.stop_reason;
    for (int k = 0; k < kIdtFitParams; ++k) rep.values[k] = std::exp(best.params[k]);
    try {
        const Eigen::MatrixXd cov = lm::covariance_from_jtj(best.jtj);
        rep.log_covariance = cov;
        // d(exp p) = exp(p) dp
        for (int k = 0; k < kIdtFitParams; ++k) rep.std_errors[k] = rep.values[k] * std::sqrt(cov(k, k));
    } catch (const RankError&) {
        rep.std_errors.fill(std::numeric_limits<double>::quiet_NaN());
        rep.message += "; covariance singular";
    }
    return rep;
}

struct DriveCoefficientErrors {
    double eta_sigma = std::numeric_limits<double>::quiet_NaN();
    double alpha_sigma = std::numeric_limits<double>::quiet_NaN();
};

/// First-order propagation of the fit covariance into (eta, alpha).
inline DriveCoefficientErrors eta_alpha_errors(const IdtFitReport& rep) {
    DriveCoefficientErrors e;
    if (rep.log_covariance.rows() != kIdtFitParams) return e;
    const Eigen::VectorXd p = detail::log_params(rep.design);
    Eigen::MatrixXd g(2, kIdtFitParams);
    for (int j = 0; j < kIdtFitParams; ++j) {
        const double h = j == 4 ? 1e-9 : 1e-6;
        Eigen::VectorXd q = p;
        q[j] += h;
        const auto up = derive_eta_alpha(detail::apply_log_params(rep.design, q));
        q[j] -= 2.0 * h;
        const auto dn = derive_eta_alpha(detail::apply_log_params(rep.design, q));
        g(0, j) = (up.eta - dn.eta) / (2.0 * h);
        g(1, j) = (up.alpha - dn.alpha) / (2.0 * h);
    }
    const Eigen::Matrix2d c = g * rep.log_covariance * g.transpose();
    e.eta_sigma = std::sqrt(std::max(c(0, 0), 0.0));
    e.alpha_sigma = std::sqrt(std::max(c(1, 1), 0.0));
    return e;
}

} // namespace mossfloq::idt
