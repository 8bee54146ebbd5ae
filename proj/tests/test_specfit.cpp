#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mossfloq/floquet.hpp"
#include "mossfloq/peak_table.hpp"
#include "mossfloq/specfit.hpp"
#include "mossfloq/specgen.hpp"

using namespace mossfloq;
using namespace mossfloq::specfit;

namespace {

floquet::ModulationModel drive(double m0) {
    floquet::ModulationModel m;
    m.mod_index = m0;
    m.alpha = 0.36;
    m.linewidth_rad_s = physics::velocity_to_angular_frequency(0.30);
    return m;
}

specgen::CountSpectrum synth(const floquet::ModulationModel& m, const physics::ScanParams& scan, std::uint64_t seed,
                             double duration_s = 10 * 86400.0) {
    const auto v = specgen::acceleration_to_channel_map(scan);
    const auto s = floquet::normalized_spectrum(m, v);
    specgen::BudgetConfig bc;
    bc.duration_s = duration_s;
    auto cs = specgen::generate_counts(s, specgen::compute_budget(bc), specgen::default_baseline(), 0.03, seed);
    cs.scan = scan;
    return cs;
}

double peak_spacing() {
    return physics::angular_frequency_to_velocity(2 * std::numbers::pi * 97.9e6);
}

} // namespace

TEST(Lorentzian, UnitAreaAndFwhm) {
    const double w = 3.0;
    EXPECT_NEAR(lorentzian(5.0 + w / 2, 5.0, w), 0.5 * lorentzian(5.0, 5.0, w), 1e-15);
    // closed-form area over +-L: (2/pi) atan(2L/w)
    const double L = 1e4;
    double s = 0.0;
    const int n = 2000000;
    for (int i = 0; i < n; ++i) s += lorentzian(-L + (i + 0.5) * 2 * L / n, 0.0, w) * 2 * L / n;
    EXPECT_NEAR(s, 2.0 / std::numbers::pi * std::atan(2 * L / w), 1e-6);
}

TEST(PeakTemplate, ZeroDriveSixPeaksThreeGroups) {
    const auto t = peaks::build_peak_template(physics::default_alpha_fe_scheme(), peak_spacing(), 0, -19, 19);
    EXPECT_EQ(t.n_peaks(), 6);
    EXPECT_EQ(t.n_groups(), 3);
}

TEST(PeakTemplate, FullDriveEighteenPeaksSevenGroups) {
    const auto t = peaks::build_peak_template(physics::default_alpha_fe_scheme(), peak_spacing(), 2, -19, 19);
    EXPECT_EQ(t.n_peaks(), 18);
    EXPECT_EQ(t.n_groups(), 7);
    int merged = 0;
    for (const auto& p : t.peaks) merged += p.components.size() > 1;
    EXPECT_EQ(merged, 8);
    for (int k = 0; k < t.n_peaks(); ++k) {
        const int m = t.mirror_of(k);
        ASSERT_GE(m, 0);
        EXPECT_EQ(t.mirror_of(m), k);
        EXPECT_NEAR(t.peaks[m].velocity_mm_s, -t.peaks[k].velocity_mm_s, 0.25);
    }
}

TEST(PeakTemplate, SymmetricSchemeGivesMirrorSymmetricModel) {
    auto scheme = physics::default_alpha_fe_scheme();
    scheme.line_velocities_mm_s = {-5.3, -3.07, -0.835, 0.835, 3.07, 5.3};
    const auto t = peaks::build_peak_template(scheme, peak_spacing(), 2, -19, 19);
    PeakLayout lay;
    for (const auto& p : t.peaks) lay.group_of_peak.push_back(p.group);
    lay.n_groups = t.n_groups();
    Eigen::VectorXd p(lay.n_params());
    p.setZero();
    p[0] = 1000.0;
    p[kWidthIndex] = 0.3;
    for (int k = 0; k < lay.n_peaks(); ++k) p[lay.center_index(k)] = t.peaks[k].velocity_mm_s;
    for (int g = 0; g < lay.n_groups; ++g) p[lay.amplitude_index(g)] = 0.01 * (g + 1);
    std::vector<double> x, tt;
    for (int i = -400; i <= 400; ++i) {
        x.push_back(i * 0.0471);
        tt.push_back(0.0);
    }
    const auto mu = model_counts(x, tt, lay, p);
    for (std::size_t i = 0; i < mu.size(); ++i) EXPECT_NEAR(mu[i], mu[mu.size() - 1 - i], 1e-9);
}

TEST(RunsTest, DetectsStructure) {
    std::vector<double> alt, blocks, rnd;
    rng::Stream rs(5);
    for (int i = 0; i < 1000; ++i) {
        alt.push_back(i % 2 ? 1.0 : -1.0);
        blocks.push_back((i / 50) % 2 ? 1.0 : -1.0);
        rnd.push_back(rs.normal());
    }
    // alternation is flagged by the two-sided p but is not clustering
    EXPECT_LT(runs_test(alt).p_value, 1e-6);
    EXPECT_TRUE(runs_test(alt).passed());
    EXPECT_FALSE(runs_test(blocks).passed());
    EXPECT_LT(runs_test(blocks).p_value, 1e-6);
    EXPECT_TRUE(runs_test(rnd).passed());
    EXPECT_GT(runs_test(rnd).p_value, 0.05);
    EXPECT_EQ(runs_test(alt).runs, 1000);
    const auto r = runs_test(rnd);
    EXPECT_NEAR(r.p_clustered, 0.5 * std::erfc(-r.z / std::sqrt(2.0)), 1e-15);
}

TEST(FitSpectrum, FullDriveRoundTrip) {
    physics::ScanParams scan;
    const auto m = drive(2.0);
    const auto model = build_fit_model(m.scheme, m, scan);
    const auto fit = fit_spectrum(synth(m, scan, 101), model);
    EXPECT_TRUE(fit.converged) << fit.message;
    EXPECT_TRUE(fit.covariance_ok);
    EXPECT_EQ(fit.n_params, 32);
    EXPECT_GE(fit.chi2_reduced, 0.8);
    EXPECT_LE(fit.chi2_reduced, 1.3);
    EXPECT_TRUE(fit.runs.passed()) << fit.runs.p_value;
    const auto map = nominal_map(scan);
    for (int k = 0; k < fit.tmpl.n_peaks(); ++k) {
        if (fit.tmpl.peaks[k].components.size() != 1) continue;
        const double truth = map.channel(fit.tmpl.peaks[k].velocity_mm_s);
        EXPECT_NEAR(fit.positions[k], truth, 3.0 * fit.position_sigma[k]) << k;
    }
    EXPECT_NEAR(fit.linewidth, 0.30 / scan.channel_width_mm_s(), 3.0 * fit.linewidth_sigma);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.covariance);
    EXPECT_GT(es.eigenvalues().minCoeff(), 0.0);
}

TEST(FitSpectrum, ZeroDriveSextetDeceleratingHalf) {
    physics::ScanParams scan;
    scan.direction = physics::Direction::decelerating;
    const auto m = drive(0.0);
    const auto model = build_fit_model(m.scheme, m, scan);
    EXPECT_EQ(model.tmpl.n_peaks(), 6);
    const auto fit = fit_spectrum(synth(m, scan, 7), model);
    EXPECT_EQ(fit.n_params, 16);
    EXPECT_GE(fit.chi2_reduced, 0.8);
    EXPECT_LE(fit.chi2_reduced, 1.3);
    const auto map = nominal_map(scan);
    for (int k = 0; k < 6; ++k)
        EXPECT_NEAR(fit.positions[k], map.channel(fit.tmpl.peaks[k].velocity_mm_s), 3.0 * fit.position_sigma[k]);
    // amplitude ratios 3:2:1 (areas, outer:middle:inner)
    EXPECT_NEAR(fit.amplitudes[2] / fit.amplitudes[0], 3.0, 0.1);
    EXPECT_NEAR(fit.amplitudes[1] / fit.amplitudes[0], 2.0, 0.1);
}

TEST(FitSpectrum, LowDrivePrunesUnresolvedGroups) {
    physics::ScanParams scan;
    const auto m = drive(0.3);
    const auto fit = fit_spectrum(synth(m, scan, 9), build_fit_model(m.scheme, m, scan));
    EXPECT_LT(fit.n_params, 32);
    EXPECT_GE(fit.chi2_reduced, 0.8);
    EXPECT_LE(fit.chi2_reduced, 1.3);
    for (int g = 0; g < fit.tmpl.n_groups(); ++g)
        if (!fit.group_active[g]) {
            EXPECT_EQ(fit.amplitudes[g], 0.0);
        }
}

TEST(FitSpectrum, UncertaintyScalesWithDuration) {
    physics::ScanParams scan;
    const auto m = drive(2.0);
    const auto model = build_fit_model(m.scheme, m, scan);
    const auto a = fit_spectrum(synth(m, scan, 3, 10 * 86400.0), model);
    const auto b = fit_spectrum(synth(m, scan, 4, 20 * 86400.0), model);
    EXPECT_NEAR(a.linewidth_sigma / b.linewidth_sigma, std::sqrt(2.0), 0.1 * std::sqrt(2.0));
    EXPECT_NEAR(a.position_sigma[7] / b.position_sigma[7], std::sqrt(2.0), 0.1 * std::sqrt(2.0));
}

TEST(FitSpectrum, TiedAndUntiedAmplitudesAgree) {
    physics::ScanParams scan;
    const auto m = drive(2.0);
    const auto cs = synth(m, scan, 21);
    FitOptions opt;
    const auto tied = fit_spectrum(cs, build_fit_model(m.scheme, m, scan, opt));
    opt.tie_amplitudes = false;
    const auto free = fit_spectrum(cs, build_fit_model(m.scheme, m, scan, opt));
    for (int g = 0; g < tied.tmpl.n_groups(); ++g) {
        if (!tied.group_active[g]) continue;
        double mean = 0.0, var = 0.0;
        int count = 0;
        for (int k : tied.tmpl.groups[g].peaks) {
            if (!free.group_active[k]) continue;
            mean += free.amplitudes[k];
            var += std::pow(free.amplitude_sigma[k], 2);
            ++count;
        }
        ASSERT_GT(count, 0);
        mean /= count;
        const double sigma = std::sqrt(var) / count;
        EXPECT_NEAR(tied.amplitudes[g], mean, std::max(sigma, tied.amplitude_sigma[g])) << g;
    }
}

TEST(FitOnAxis, AffineEquivariance) {
    physics::ScanParams scan;
    const auto m = drive(1.3);
    const auto cs = synth(m, scan, 17);
    const auto fit = fit_spectrum(cs, build_fit_model(m.scheme, m, scan));
    const int n = cs.n_channels();
    std::vector<double> x(n), xp(n), t(n);
    const double p = -7.25, q = 0.37;
    for (int i = 0; i < n; ++i) {
        x[i] = i;
        xp[i] = p + q * i;
        t[i] = specgen::channel_coordinate(i, n);
    }
    // start both fits from a perturbed solution so they iterate
    Eigen::VectorXd init = fit.params;
    init[kWidthIndex] *= 1.05;
    for (int k = 0; k < fit.layout.n_peaks(); ++k) init[fit.layout.center_index(k)] += 0.3;
    Eigen::VectorXd init_p = init;
    init_p[kWidthIndex] *= q;
    for (int k = 0; k < fit.layout.n_peaks(); ++k) init_p[fit.layout.center_index(k)] = p + q * init[fit.layout.center_index(k)];
    for (int g = 0; g < fit.layout.n_groups; ++g) init_p[fit.layout.amplitude_index(g)] *= q;
    const auto a = fit_peaks_on_axis(x, t, cs.counts, fit.layout, init);
    const auto b = fit_peaks_on_axis(xp, t, cs.counts, fit.layout, init_p);
    EXPECT_NEAR(a.chi2 / a.dof, b.chi2 / b.dof, 1e-9);
    for (int k = 0; k < fit.layout.n_peaks(); ++k)
        EXPECT_NEAR(b.params[fit.layout.center_index(k)], p + q * a.params[fit.layout.center_index(k)], 1e-5);
    EXPECT_NEAR(b.params[kWidthIndex], q * a.params[kWidthIndex], 1e-6);
}

TEST(Normalize, FlatRegionDeepestLineAndIdempotence) {
    physics::ScanParams scan;
    const auto m = drive(0.0);
    const auto cs = synth(m, scan, 31);
    const auto fit = fit_spectrum(cs, build_fit_model(m.scheme, m, scan));
    const auto norm = normalize_by_baseline(cs, fit);
    // far from the lines (|v| > 12 mm/s): mean 1 within 3 sigma of the mean
    const auto v = specgen::acceleration_to_channel_map(scan);
    double s = 0.0, var = 0.0;
    int count = 0;
    for (int i = 0; i < cs.n_channels(); ++i)
        if (std::abs(v[i]) > 12.0) {
            s += norm.value[i];
            var += norm.sigma[i] * norm.sigma[i];
            ++count;
        }
    EXPECT_NEAR(s / count, 1.0, 3.0 * std::sqrt(var) / count);
    // deepest outer line: 1 - contrast (channel sampling costs < 1% of the depth)
    double minv = 2.0;
    int imin = 0;
    for (int i = 0; i < cs.n_channels(); ++i)
        if (norm.value[i] < minv) {
            minv = norm.value[i];
            imin = i;
        }
    EXPECT_NEAR(1.0 - minv, 0.03, 3.0 * norm.sigma[imin] + 0.03 * 0.01);
    // refit of the normalized spectrum: offset 1, higher terms 0
    specgen::CountSpectrum again = cs;
    const double k = 1.0e6;
    for (int i = 0; i < cs.n_channels(); ++i) again.counts[i] = std::llround(norm.value[i] * k);
    const auto refit = fit_spectrum(again, build_fit_model(m.scheme, m, scan));
    EXPECT_NEAR(refit.baseline[0] / k, 1.0, 1e-6);
    for (int j = 1; j < 6; ++j) EXPECT_NEAR(refit.baseline[j] / k, 0.0, 1e-6) << j;
}

TEST(FitSpectrum, RejectsMismatchedLength) {
    physics::ScanParams scan;
    const auto m = drive(1.0);
    auto cs = synth(m, scan, 1);
    cs.counts.resize(100);
    EXPECT_THROW(fit_spectrum(cs, build_fit_model(m.scheme, m, scan)), ConfigError);
}
