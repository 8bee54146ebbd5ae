#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mossfloq/floquet.hpp"
#include "mossfloq/rng.hpp"
#include "mossfloq/specgen.hpp"

using namespace mossfloq;
using namespace mossfloq::specgen;

TEST(Budget, PublishedDetectedFractionAndRates) {
    const auto b = compute_budget({});
    // 0.998 * 0.89 / 9.56 * 3.2e-5 * 0.42
    EXPECT_NEAR(b.detected_fraction_14keV, 0.998 * 0.89 / 9.56 * 3.2e-5 * 0.42, 1e-20);
    EXPECT_NEAR(b.detected_fraction_14keV / 1.3e-6, 1.0, 0.05);
    EXPECT_NEAR(b.total_rate_Hz / 2.1e3, 1.0, 0.05);
    EXPECT_NEAR(b.resonant_rate_Hz / 1.2e3, 1.0, 0.05);
    EXPECT_NEAR(b.compton_rate_Hz / 0.5e3, 1.0, 0.06);
    EXPECT_NEAR(b.mismatch_rate_Hz / 0.4e3, 1.0, 0.13);
    EXPECT_NEAR(b.total_rate_Hz, b.resonant_rate_Hz + b.compton_rate_Hz + b.mismatch_rate_Hz, 1e-9);
}

TEST(Budget, RoundedSurvivalReproducesTableFraction) {
    BudgetConfig c;
    c.ic_survival_override = 0.11;
    EXPECT_NEAR(compute_budget(c).detected_fraction_14keV / 1.3e-6, 1.0, 0.015);
}

TEST(Budget, ZeroSolidAngleGivesZeroRates) {
    BudgetConfig c;
    c.solid_angle = 0.0;
    const auto b = compute_budget(c);
    EXPECT_EQ(b.detected_fraction_14keV, 0.0);
    EXPECT_EQ(b.total_rate_Hz, 0.0);
}

TEST(Budget, RemovingOneFactorScalesByItsInverse) {
    const double base = compute_budget({}).detected_fraction_14keV;
    BudgetConfig c;
    c.substrate_transmission = 1.0;
    EXPECT_NEAR(compute_budget(c).detected_fraction_14keV, base / 0.42, 1e-18);
    c = {};
    c.transition_probability = 1.0;
    EXPECT_NEAR(compute_budget(c).detected_fraction_14keV, base / 0.89, 1e-18);
    c = {};
    c.internal_conversion = 0.0;
    EXPECT_NEAR(compute_budget(c).detected_fraction_14keV, base * 9.56, 1e-18);
}

TEST(Budget, RejectsNegativeInputs) {
    BudgetConfig c;
    c.duration_s = -1.0;
    EXPECT_THROW(compute_budget(c), ConfigError);
}

TEST(ChannelMap, RangeMonotoneAndMirrored) {
    physics::ScanParams s;
    const auto up = acceleration_to_channel_map(s);
    EXPECT_EQ(up.size(), 1024u);
    EXPECT_TRUE(std::is_sorted(up.begin(), up.end()));
    const double dv = s.channel_width_mm_s();
    EXPECT_NEAR(up.front() - dv / 2, -19.0, 1e-12);
    EXPECT_NEAR(up.back() + dv / 2, 19.0, 1e-12);
    EXPECT_LE(std::abs(up[512]), dv / 2 + 1e-12);
    s.direction = physics::Direction::decelerating;
    const auto down = acceleration_to_channel_map(s);
    for (int i = 0; i < 1024; ++i) EXPECT_NEAR(down[i], up[1023 - i], 1e-12);
}

TEST(Counts, ExpectedNoiseLevelForPublishedRate) {
    BudgetConfig c;  // 2.2 Hz for 10 days
    const auto b = compute_budget(c);
    EXPECT_NEAR(b.counts_per_bin() / 1.9e6, 1.0, 0.01);
    EXPECT_NEAR(1.0 / std::sqrt(b.counts_per_bin()) / 7e-4, 1.0, 0.05);
}

TEST(Counts, ZeroContrastMatchesBaselineExpectation) {
    BudgetConfig c;
    c.duration_s = 1000.0;
    const auto b = compute_budget(c);
    std::vector<double> flat(10000, 0.0);
    const auto s = generate_counts(flat, b, {1, 0, 0, 0, 0, 0}, 0.0, 11);
    const double mean = std::accumulate(s.counts.begin(), s.counts.end(), 0.0) / s.counts.size();
    const double mu = b.counts_per_bin();
    EXPECT_NEAR(mean, mu, 3.0 * std::sqrt(mu / 1e4));
}

TEST(Counts, DeepestUnmodulatedDipIsTheContrast) {
    physics::ScanParams scan;
    floquet::ModulationModel m;
    m.linewidth_rad_s = physics::velocity_to_angular_frequency(0.30);
    const auto v = acceleration_to_channel_map(scan);
    const auto s = floquet::normalized_spectrum(m, v);
    const auto mu = expected_counts(s, compute_budget({}), {1, 0, 0, 0, 0, 0}, 0.03);
    const double depth = 1.0 - *std::min_element(mu.begin(), mu.end()) / compute_budget({}).counts_per_bin();
    // channel centers miss the line center by at most half a channel
    EXPECT_NEAR(depth, 0.03, 0.03 * 0.02);
}

TEST(Counts, DeterministicPerSeedAndStream) {
    const auto b = compute_budget({});
    std::vector<double> s(256, 0.2);
    const auto a1 = generate_counts(s, b, default_baseline(), 0.03, 5, 1);
    const auto a2 = generate_counts(s, b, default_baseline(), 0.03, 5, 1);
    const auto a3 = generate_counts(s, b, default_baseline(), 0.03, 5, 2);
    EXPECT_EQ(a1.counts, a2.counts);
    EXPECT_NE(a1.counts, a3.counts);
}

TEST(Counts, MeanOverIndependentStreamsConverges) {
    BudgetConfig c;
    c.duration_s = 50.0;
    const auto b = compute_budget(c);
    std::vector<double> s(256);
    for (int i = 0; i < 256; ++i) s[i] = 0.5 + 0.5 * std::sin(i * 0.1);
    const auto mu = expected_counts(s, b, default_baseline(), 0.2);
    const int K = 100;
    std::vector<double> mean(256, 0.0);
    for (int k = 0; k < K; ++k) {
        const auto spec = generate_counts(s, b, default_baseline(), 0.2, 99, k);
        for (int i = 0; i < 256; ++i) mean[i] += static_cast<double>(spec.counts[i]) / K;
    }
    double chi2 = 0.0;
    for (int i = 0; i < 256; ++i) chi2 += std::pow(mean[i] - mu[i], 2) / (mu[i] / K);
    EXPECT_NEAR(chi2 / 256, 1.0, 3.0 * std::sqrt(2.0 / 256));
}

TEST(Counts, InvalidContrastRejected) {
    std::vector<double> s(8, 0.0);
    EXPECT_THROW(generate_counts(s, compute_budget({}), default_baseline(), 1.0, 1), ConfigError);
    EXPECT_THROW(generate_counts(s, compute_budget({}), default_baseline(), -0.1, 1), ConfigError);
}

TEST(Rng, PoissonMomentsAcrossRegimes) {
    for (double lam : {0.3, 4.0, 9.9, 10.0, 57.0, 1.9e6}) {
        rng::Stream rs(123, static_cast<std::uint64_t>(lam * 10));
        const int n = 200000;
        double m = 0.0, m2 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double k = static_cast<double>(rs.poisson(lam));
            m += k;
            m2 += k * k;
        }
        m /= n;
        const double var = m2 / n - m * m;
        EXPECT_NEAR(m, lam, 5.0 * std::sqrt(lam / n)) << lam;
        EXPECT_NEAR(var / lam, 1.0, 5.0 * std::sqrt(2.0 / n) + 0.01) << lam;
    }
}

TEST(Rng, PoissonPmfSmallMeanChiSquare) {
    rng::Stream rs(77);
    const double lam = 3.0;
    const int n = 100000;
    std::vector<int> hist(12, 0);
    for (int i = 0; i < n; ++i) {
        const auto k = rs.poisson(lam);
        ++hist[std::min<std::int64_t>(k, 11)];
    }
    double chi2 = 0.0, p = std::exp(-lam), tail = 1.0;
    for (int k = 0; k < 11; ++k) {
        chi2 += std::pow(hist[k] - n * p, 2) / (n * p);
        tail -= p;
        p *= lam / (k + 1);
    }
    chi2 += std::pow(hist[11] - n * tail, 2) / (n * tail);
    EXPECT_LT(chi2, 31.3);  // 11 dof, 0.1% upper quantile
}

TEST(Rng, NormalMoments) {
    rng::Stream rs(3);
    double m = 0, m2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = rs.normal();
        m += x;
        m2 += x * x;
    }
    EXPECT_NEAR(m / n, 0.0, 5.0 / std::sqrt(n));
    EXPECT_NEAR(m2 / n, 1.0, 0.015);
}

TEST(Rng, UniformInUnitInterval) {
    rng::Stream rs(1);
    for (int i = 0; i < 10000; ++i) {
        const double u = rs.uniform01();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}
