#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "mossfloq/physics.hpp"

using namespace mossfloq;
using namespace mossfloq::physics;

TEST(PhysConstants, WavenumberConsistentWithGammaEnergy) {
    const auto c = make_constants();
    const double k0 = 2.0 * std::numbers::pi * c.gamma_energy_eV / (c.planck_h_eV_s * c.speed_of_light_m_s);
    EXPECT_NEAR(c.photon_wavenumber_per_m / k0, 1.0, 1e-6);
    // ~7.30e10 1/m for the 14.4 keV line
    EXPECT_NEAR(c.photon_wavenumber_per_m, 7.30e10, 0.01e10);
}

TEST(PhysConstants, OverrideTakenVerbatim) {
    const auto c = make_constants(kGammaEnergyEv, 7.3e9);
    EXPECT_DOUBLE_EQ(c.photon_wavenumber_per_m, 7.3e9);
    EXPECT_THROW(make_constants(-1.0), ConfigError);
}

TEST(VelocityToAngularFrequency, ZeroIsZero) { EXPECT_EQ(velocity_to_angular_frequency(0.0), 0.0); }

TEST(VelocityToAngularFrequency, ZeemanSpacingMatchesPublishedFrequency) {
    // 2.1 mm/s <-> 24.4 MHz within 2%
    const double omega = velocity_to_angular_frequency(2.1);
    EXPECT_NEAR(omega / (2.0 * std::numbers::pi * 24.4e6), 1.0, 0.02);
}

TEST(VelocityToAngularFrequency, OneMmPerSecondAgainstDirectEnergyArithmetic) {
    // Oracle: dE = E_gamma v / c with CODATA constants, independent of k0.
    const double dE_eV = 14412.5 * 1e-3 / 299792458.0;
    EXPECT_NEAR(dE_eV * 1e9, 48.1, 0.05);
    const double omega_oracle = 2.0 * std::numbers::pi * dE_eV / 4.135667696e-15;
    EXPECT_NEAR(velocity_to_angular_frequency(1.0) / omega_oracle, 1.0, 1e-12);
    EXPECT_NEAR(velocity_to_energy(1.0), dE_eV * 1e9, 1e-9);
}

TEST(EnergyToFrequency, PublishedValues) {
    EXPECT_EQ(energy_to_frequency(0.0), 0.0);
    EXPECT_NEAR(energy_to_frequency(101.0) / 24.4, 1.0, 0.01);
    EXPECT_NEAR(energy_to_frequency(7.0), 1.69, 0.005);
}

TEST(Conversions, LinearAndRoundTrip) {
    std::mt19937_64 gen(7);
    std::uniform_real_distribution<double> u(-40.0, 40.0);
    for (int i = 0; i < 200; ++i) {
        const double v = u(gen), a = u(gen);
        EXPECT_NEAR(velocity_to_angular_frequency(a * v), a * velocity_to_angular_frequency(v),
                    1e-15 * std::abs(a * velocity_to_angular_frequency(v)) + 1e-300);
        EXPECT_NEAR(energy_to_frequency(a * v), a * energy_to_frequency(v), 1e-15 * std::abs(a * energy_to_frequency(v)));
        const double back = angular_frequency_to_velocity(velocity_to_angular_frequency(v));
        EXPECT_NEAR(back, v, 1e-12 * std::abs(v));
        EXPECT_NEAR(frequency_to_energy(energy_to_frequency(v)), v, 1e-12 * std::abs(v));
    }
}

TEST(DefaultScheme, PublishedVelocities) {
    const auto s = default_alpha_fe_scheme();
    const std::array<double, 6> expected{-5.42, -3.19, -0.95, +0.72, +2.96, +5.19};
    EXPECT_EQ(s.line_velocities_mm_s.size(), 6u);
    for (int i = 0; i < 6; ++i) EXPECT_EQ(s.line_velocities_mm_s[i], expected[i]);
    EXPECT_EQ(s.pair_intensities[0], 3.0);
    EXPECT_EQ(s.pair_intensities[1], 2.0);
    EXPECT_EQ(s.pair_intensities[2], 1.0);
}

TEST(DefaultScheme, OuterSpacing) {
    const auto& v = default_alpha_fe_scheme().line_velocities_mm_s;
    EXPECT_NEAR(v[1] - v[0], 2.23, 0.01);
    EXPECT_NEAR(v[2] - v[1], 2.24, 0.01);
    EXPECT_NEAR(v[4] - v[3], 2.24, 0.01);
    EXPECT_NEAR(v[5] - v[4], 2.23, 0.01);
}

TEST(DefaultScheme, MirrorSymmetricWithinPublishedTolerance) {
    const auto s = default_alpha_fe_scheme();
    EXPECT_LE(s.mirror_asymmetry_mm_s(), 0.06);
    EXPECT_NO_THROW(s.validate());
}

TEST(DefaultScheme, IntensityMapping) {
    const auto s = default_alpha_fe_scheme({3.0, 2.0, 1.0});
    EXPECT_EQ(s.intensity(0), 3.0);
    EXPECT_EQ(s.intensity(5), 3.0);
    EXPECT_EQ(s.intensity(1), 2.0);
    EXPECT_EQ(s.intensity(4), 2.0);
    EXPECT_EQ(s.intensity(2), 1.0);
    EXPECT_EQ(s.intensity(3), 1.0);
}

TEST(HyperfineScheme, RejectsNonPositiveIntensity) {
    auto s = default_alpha_fe_scheme({3.0, 0.0, 1.0});
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(HyperfineScheme, RejectsAsymmetricPattern) {
    auto s = default_alpha_fe_scheme();
    s.line_velocities_mm_s[5] = 5.6;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(ScanParams, Validation) {
    ScanParams s;
    EXPECT_NO_THROW(s.validate());
    s.v_min_mm_s = 19.0;
    EXPECT_THROW(s.validate(), ConfigError);
    s = ScanParams{};
    s.n_channels = 1;
    EXPECT_THROW(s.validate(), ConfigError);
}
