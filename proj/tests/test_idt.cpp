#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "mossfloq/idt.hpp"

using namespace mossfloq;
using namespace mossfloq::idt;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Direct transcription of the impedance-form scattering parameters, with
// Z2 = 1/G_a. Independent of the admittance-form rewrite in the library.
struct Primed {
    cplx s11, s22, s12;
};

Primed impedance_form_oracle(double omega, const IdtDesign& d) {
    const double n = d.n_periods;
    const double x = n * std::numbers::pi * (omega - d.center_angular_freq) / d.center_angular_freq;
    const double pref = 4.0 / std::numbers::pi * d.coupling_k2 * d.center_angular_freq * d.cap_per_period_F_per_m *
                        d.aperture_m * n * n;
    const double ga = pref * std::pow(std::sin(x) / x, 2);
    const double ba = pref * (std::sin(2 * x) - 2 * x) / (2 * x * x);
    const double ct = n * d.aperture_m * d.cap_per_period_F_per_m;
    const cplx j(0, 1);
    const cplx z1 = d.source_Z_ohm, z2 = 1.0 / ga;
    const cplx zl = d.shunt_R_ohm + 1.0 / (j * omega * ct + j * ba);
    Primed p;
    p.s11 = (zl * z2 - std::conj(z1) * (zl + z2)) / (zl * z2 + z1 * (zl + z2));
    p.s22 = (zl * z1 - std::conj(z2) * (zl + z1)) / (zl * z1 + z2 * (zl + z1));
    p.s12 = std::sqrt(z1.real()) / std::sqrt(z2.real()) * zl * (z2 + std::conj(z2)) / (z1 * z2 + zl * (z1 + z2));
    return p;
}

double first_null_offset_hz(const IdtDesign& d) {
    const double f0 = d.center_angular_freq / kTwoPi;
    const double df = f0 / d.n_periods / 2000.0;
    double prev = std::abs(device_sparams(kTwoPi * f0, d).s12);
    for (int i = 1;; ++i) {
        const double f = f0 + i * df;
        const double cur = std::abs(device_sparams(kTwoPi * f, d).s12);
        const double next = std::abs(device_sparams(kTwoPi * (f + df), d).s12);
        if (cur <= prev && cur <= next) return f - f0;
        prev = cur;
    }
}

} // namespace

TEST(NormalizedDetuning, Examples) {
    const IdtDesign d;
    EXPECT_EQ(normalized_detuning(d.center_angular_freq, d), 0.0);
    EXPECT_NEAR(normalized_detuning(d.center_angular_freq * (1.0 + 1.0 / (200 * std::numbers::pi)), d), 1.0, 1e-12);
    EXPECT_NEAR(normalized_detuning(d.center_angular_freq + kTwoPi * 0.5e6, d), 3.208, 1e-3);
}

TEST(AcousticAdmittance, LimitsAndShape) {
    const IdtDesign d = fitted_device_preset();
    const double g0 = 4.0 / std::numbers::pi * d.coupling_k2 * d.center_angular_freq * d.cap_per_period_F_per_m *
                      d.aperture_m * 200.0 * 200.0;
    const auto a0 = acoustic_admittance(0.0, d);
    EXPECT_NEAR(a0.G_a / g0, 1.0, 1e-15);
    EXPECT_EQ(a0.B_a, 0.0);
    EXPECT_NEAR(a0.C_T, 200 * 970e-6 * d.cap_per_period_F_per_m, 1e-25);
    EXPECT_NEAR(acoustic_admittance(std::numbers::pi, d).G_a / g0, 0.0, 1e-30);
    EXPECT_NEAR(acoustic_admittance(1.0, d).G_a / g0, std::pow(std::sin(1.0), 2), 1e-14);
    EXPECT_NEAR(std::pow(std::sin(1.0), 2), 0.708, 1e-3);
}

TEST(AcousticAdmittance, EvenOddAndContinuousThroughSeriesBranch) {
    const IdtDesign d = fitted_device_preset();
    for (double x = -12.0; x <= 12.0; x += 0.0625) {
        const auto p = acoustic_admittance(x, d), m = acoustic_admittance(-x, d);
        EXPECT_GE(p.G_a, 0.0);
        EXPECT_EQ(p.G_a, m.G_a);
        EXPECT_EQ(p.B_a + m.B_a, 0.0);
    }
    const double g0 = acoustic_admittance(0.0, d).G_a;
    for (double x : {0.9e-3, 1.1e-3}) {
        const double direct = (std::sin(2 * x) - 2 * x) / (2 * x * x);
        EXPECT_NEAR(acoustic_admittance(x, d).B_a / g0, direct, 1e-9);
    }
}

TEST(SingleTransducer, MatchesImpedanceFormOracle) {
    const IdtDesign d = fitted_device_preset();
    const double w0 = d.center_angular_freq;
    for (double df : {-1.7e6, -0.61e6, -0.2e6, 0.013e6, 0.3e6, 0.75e6, 1.9e6}) {
        const double w = w0 + kTwoPi * df;
        const auto s = single_transducer_sparams(w, d);
        const auto o = impedance_form_oracle(w, d);
        EXPECT_NEAR(std::abs(s.s11 - o.s11), 0.0, 1e-12) << df;
        EXPECT_NEAR(std::abs(s.s22 - o.s22), 0.0, 1e-12) << df;
        EXPECT_NEAR(std::abs(s.s12 - o.s12), 0.0, 1e-12) << df;
        EXPECT_FALSE(s.degenerate);
    }
}

TEST(SingleTransducer, DegenerateAtAdmittanceZero) {
    IdtDesign d = fitted_device_preset();
    // x = pi exactly: choose the frequency so that the detuning is exact
    const double w = d.center_angular_freq * (1.0 + 1.0 / d.n_periods);
    const auto s = single_transducer_sparams(w, d);
    EXPECT_LT(std::abs(s.s12), 1e-7);
    EXPECT_NEAR(std::abs(s.s22 + 1.0), 0.0, 1e-7);
    EXPECT_LE(std::abs(s.s11), 1.0);
}

TEST(SingleTransducer, DegenerateFlagWhenCouplingVanishes) {
    // sin(pi) is not exactly zero in floating point; zero coupling gives G_a = 0.
    IdtDesign d = fitted_device_preset();
    d.coupling_k2 = 0.0;
    const auto s = single_transducer_sparams(d.center_angular_freq, d);
    EXPECT_TRUE(s.degenerate);
    EXPECT_EQ(s.s12, cplx(0.0, 0.0));
    EXPECT_EQ(s.s22, cplx(-1.0, 0.0));
    const cplx j(0, 1);
    const double ct = 200 * d.aperture_m * d.cap_per_period_F_per_m;
    const cplx zl = d.shunt_R_ohm + 1.0 / (j * d.center_angular_freq * ct);
    EXPECT_NEAR(std::abs(s.s11 - (zl - 50.0) / (zl + 50.0)), 0.0, 1e-14);
}

TEST(SingleTransducer, Reciprocal) {
    // S'21 = S'12 by construction; compare against the unrewritten form
    const IdtDesign d = fitted_device_preset();
    for (double df : {-0.4e6, 0.1e6, 0.9e6}) {
        const auto o = impedance_form_oracle(d.center_angular_freq + kTwoPi * df, d);
        const auto s = single_transducer_sparams(d.center_angular_freq + kTwoPi * df, d);
        EXPECT_NEAR(std::abs(s.s12 - o.s12), 0.0, 1e-12);
    }
}

TEST(Passivity, SweepAroundCenter) {
    for (const IdtDesign& d : {fitted_device_preset(), IdtDesign{}}) {
        const double f0 = d.center_angular_freq / kTwoPi;
        for (int i = 0; i < 1000; ++i) {
            const double w = kTwoPi * (f0 - 2e6 + 4e6 * i / 999.0);
            const auto p = single_transducer_sparams(w, d);
            const auto s = device_sparams(w, d);
            EXPECT_LE(std::norm(p.s12), 1.0);
            EXPECT_LE(std::abs(s.s12), 1.0);
            EXPECT_LE(std::abs(s.s11), 1.0 + 1e-12);
        }
    }
}

TEST(Device, DelayLineApproximation) {
    const IdtDesign d = fitted_device_preset();
    const double w = d.center_angular_freq;
    const auto p = single_transducer_sparams(w, d);
    const auto s = device_sparams(w, d);
    EXPECT_EQ(s.s11, p.s11);
    EXPECT_NEAR(std::abs(s.s12), std::norm(p.s12) * d.propagation_loss / 2.0, 1e-15);
    IdtDesign dead = d;
    dead.coupling_k2 = 0.0;
    EXPECT_EQ(device_sparams(w, dead).s12, cplx(0.0, 0.0));
}

TEST(DeriveEtaAlpha, PresetReproducesPublishedValues) {
    const IdtDesign d = fitted_device_preset();
    EXPECT_NEAR(d.propagation_loss, 0.8241, 1e-4);
    const auto c = derive_eta_alpha(d);
    EXPECT_NEAR(c.eta, 0.35, 0.01);
    EXPECT_NEAR(c.alpha, 0.34, 0.01);
    EXPECT_NEAR(std::abs(c.eta_complex), c.eta, 0.0);
}

TEST(DeriveEtaAlpha, UnitLossFactorCollapses) {
    IdtDesign d = fitted_device_preset();
    d.propagation_loss = 2.0;
    const auto c = derive_eta_alpha(d);
    const auto p = single_transducer_sparams(d.center_angular_freq, d);
    EXPECT_NEAR(c.eta, std::abs(p.s12), 1e-15);
    EXPECT_NEAR(c.alpha, std::abs(p.s22), 1e-15);
}

TEST(Homogeneity, CommonImpedanceScaling) {
    const IdtDesign d = fitted_device_preset();
    IdtDesign s = d;
    const double k = 3.7;
    s.source_Z_ohm *= k;
    s.shunt_R_ohm *= k;
    s.cap_per_period_F_per_m /= k;
    for (double df : {-0.3e6, 0.0, 0.45e6}) {
        const double w = d.center_angular_freq + kTwoPi * df;
        const auto a = device_sparams(w, d), b = device_sparams(w, s);
        EXPECT_NEAR(std::abs(a.s11 - b.s11), 0.0, 1e-12);
        EXPECT_NEAR(std::abs(a.s12 - b.s12), 0.0, 1e-12);
    }
    EXPECT_NEAR(derive_eta_alpha(d).eta, derive_eta_alpha(s).eta, 1e-12);
    EXPECT_NEAR(derive_eta_alpha(d).alpha, derive_eta_alpha(s).alpha, 1e-12);
}

TEST(MainLobe, FirstNullScalesInverselyWithN) {
    IdtDesign a = fitted_device_preset();
    IdtDesign b = a;
    b.n_periods = 400;
    const double ra = first_null_offset_hz(a), rb = first_null_offset_hz(b);
    EXPECT_NEAR(rb / ra, 0.5, 0.01);
    EXPECT_NEAR(ra, 97.9e6 / 200, 0.02 * 97.9e6 / 200);
}

TEST(TraceFit, NoiselessRoundTrip) {
    const IdtDesign truth = fitted_device_preset();
    const auto traces = device_sweep(truth, 97.9e6 - 1.0e6, 97.9e6 + 1.0e6, 401);
    IdtDesign init = truth;
    init.coupling_k2 *= 1.15;
    init.cap_per_period_F_per_m *= 0.85;
    init.shunt_R_ohm *= 1.2;
    init.propagation_loss *= 0.9;
    init.center_angular_freq *= 1.0 + 2e-4;
    const auto rep = fit_sparam_traces(traces, init);
    EXPECT_TRUE(rep.converged) << rep.message;
    EXPECT_NEAR(rep.design.coupling_k2 / truth.coupling_k2, 1.0, 1e-6);
    EXPECT_NEAR(rep.design.cap_per_period_F_per_m / truth.cap_per_period_F_per_m, 1.0, 1e-6);
    EXPECT_NEAR(rep.design.shunt_R_ohm / truth.shunt_R_ohm, 1.0, 1e-6);
    EXPECT_NEAR(rep.design.propagation_loss / truth.propagation_loss, 1.0, 1e-6);
    EXPECT_NEAR(rep.design.center_angular_freq / truth.center_angular_freq, 1.0, 1e-9);
}

TEST(TraceFit, OnePercentNoiseRecoversWithinFivePercent) {
    const IdtDesign truth = fitted_device_preset();
    rng::Stream rs(20240611);
    const auto traces = synthesize_traces(truth, 97.9e6 - 1.0e6, 97.9e6 + 1.0e6, 401, 0.01, rs);
    IdtDesign init;  // literature defaults
    const auto rep = fit_sparam_traces(traces, init);
    EXPECT_TRUE(rep.converged) << rep.message;
    EXPECT_NEAR(rep.design.coupling_k2 / truth.coupling_k2, 1.0, 0.05);
    EXPECT_NEAR(rep.design.cap_per_period_F_per_m / truth.cap_per_period_F_per_m, 1.0, 0.05);
    EXPECT_NEAR(rep.design.shunt_R_ohm / truth.shunt_R_ohm, 1.0, 0.05);
    EXPECT_NEAR(rep.design.propagation_loss / truth.propagation_loss, 1.0, 0.05);
    EXPECT_GT(rep.chi2_reduced, 0.8);
    EXPECT_LT(rep.chi2_reduced, 1.2);
    const auto c = derive_eta_alpha(rep.design);
    EXPECT_NEAR(c.eta, 0.35, 0.02);
    EXPECT_NEAR(c.alpha, 0.34, 0.02);
}

TEST(TraceFit, RejectsTooFewPoints) {
    const auto traces = device_sweep(fitted_device_preset(), 97e6, 98e6, 3);
    EXPECT_THROW(fit_sparam_traces(traces, IdtDesign{}), ConfigError);
}
