#pragma once

// Synthetic constant-acceleration spectrometer: counting budget, channel to
// velocity map, smooth baseline and Poisson counts.

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mossfloq/errors.hpp"
#include "mossfloq/physics.hpp"
#include "mossfloq/rng.hpp"

namespace mossfloq::specgen {

struct BudgetConfig {
    double source_activity_Bq = 1e9;
    double ec_branching = 0.998;
    double transition_probability = 0.89;
    double internal_conversion = 8.56;
    std::optional<double> ic_survival_override; ///< e.g. the rounded 0.11
    double solid_angle = 3.2e-5;
    double substrate_transmission = 0.42;
    double compton_per_resonant = 0.38;
    double mismatch_per_resonant = 0.36;
    double per_bin_rate_Hz = 2.2;
    double duration_s = 10.0 * 86400.0;
};

struct CountingBudget {
    double source_activity_Bq = 0.0;
    double detected_fraction_14keV = 0.0;
    double resonant_rate_Hz = 0.0;
    double compton_rate_Hz = 0.0;
    double mismatch_rate_Hz = 0.0;
    double total_rate_Hz = 0.0;
    double per_bin_rate_Hz = 0.0;
    double duration_s = 0.0;

    double counts_per_bin() const { return per_bin_rate_Hz * duration_s; }
};

inline CountingBudget compute_budget(const BudgetConfig& c) {
    const double factors[] = {c.source_activity_Bq, c.ec_branching, c.transition_probability, c.solid_angle,
                              c.substrate_transmission, c.per_bin_rate_Hz, c.duration_s};
    for (double f : factors)
        if (!(f >= 0.0) || !std::isfinite(f)) throw ConfigError("budget factors must be finite and >= 0");
    if (!(c.internal_conversion >= 0.0)) throw ConfigError("internal conversion coefficient must be >= 0");
    if (!(c.compton_per_resonant >= 0.0 && c.mismatch_per_resonant >= 0.0))
        throw ConfigError("background ratios must be >= 0");
    const double survival = c.ic_survival_override ? *c.ic_survival_override : 1.0 / (1.0 + c.internal_conversion);
    CountingBudget b;
    b.source_activity_Bq = c.source_activity_Bq;
    b.detected_fraction_14keV =
        c.ec_branching * c.transition_probability * survival * c.solid_angle * c.substrate_transmission;
    b.resonant_rate_Hz = c.source_activity_Bq * b.detected_fraction_14keV;
    b.compton_rate_Hz = c.compton_per_resonant * b.resonant_rate_Hz;
    b.mismatch_rate_Hz = c.mismatch_per_resonant * b.resonant_rate_Hz;
    b.total_rate_Hz = b.resonant_rate_Hz + b.compton_rate_Hz + b.mismatch_rate_Hz;
    b.per_bin_rate_Hz = c.per_bin_rate_Hz;
    b.duration_s = c.duration_s;
    return b;
}

/// Normalized channel coordinate in [-1, 1] (channel centers).
inline double channel_coordinate(double channel, int n_channels) {
    return 2.0 * (channel + 0.5) / n_channels - 1.0;
}

/// Velocity at each channel center for a triangular sweep. The decelerating
/// half visits the same velocities in reverse channel order.
inline std::vector<double> acceleration_to_channel_map(const physics::ScanParams& scan) {
    scan.validate();
    const double dv = scan.channel_width_mm_s();
    std::vector<double> v(scan.n_channels);
    for (int i = 0; i < scan.n_channels; ++i) {
        const double up = scan.v_min_mm_s + (i + 0.5) * dv;
        v[i] = scan.direction == physics::Direction::accelerating ? up : scan.v_min_mm_s + scan.v_max_mm_s - up;
    }
    return v;
}

/// Polynomial in t with coefficients c[0] + c[1] t + ... + c[5] t^5.
using BaselineCoeffs = std::array<double, 6>;

inline double baseline_value(const BaselineCoeffs& c, double t) {
    double s = 0.0;
    for (int j = 5; j >= 0; --j) s = s * t + c[j];
    return s;
}

/// Mild curvature of the kind an inhomogeneously illuminated detector shows.
inline BaselineCoeffs default_baseline() { return {1.0, 0.012, -0.035, -0.006, 0.010, 0.002}; }

struct CountSpectrum {
    std::vector<std::int64_t> counts;
    physics::ScanParams scan;
    double drive_power_W = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    double duration_s = 0.0;

    int n_channels() const { return static_cast<int>(counts.size()); }
};

/// Expected counts: duration * per_bin_rate * B(t) * (1 - contrast * S).
inline std::vector<double> expected_counts(std::span<const double> normalized_absorption, const CountingBudget& budget,
                                           const BaselineCoeffs& baseline, double contrast) {
    if (!(contrast >= 0.0 && contrast < 1.0)) throw ConfigError("contrast must lie in [0, 1)");
    const int n = static_cast<int>(normalized_absorption.size());
    std::vector<double> mu(n);
    const double scale = budget.counts_per_bin();
    for (int i = 0; i < n; ++i) {
        const double b = baseline_value(baseline, channel_coordinate(i, n));
        mu[i] = scale * b * (1.0 - contrast * normalized_absorption[i]);
        if (!(mu[i] >= 0.0)) throw ConfigError("negative expected counts; check baseline and contrast");
    }
    return mu;
}

inline CountSpectrum generate_counts(std::span<const double> normalized_absorption, const CountingBudget& budget,
                                     const BaselineCoeffs& baseline, double contrast, std::uint64_t seed,
                                     std::uint64_t stream = 0) {
    const auto mu = expected_counts(normalized_absorption, budget, baseline, contrast);
    rng::Stream rs(seed, stream);
    CountSpectrum s;
    s.counts.resize(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) s.counts[i] = rs.poisson(mu[i]);
    s.seed = seed;
    s.stream = stream;
    s.duration_s = budget.duration_s;
    s.scan.n_channels = static_cast<int>(mu.size());
    return s;
}

} // namespace mossfloq::specgen
