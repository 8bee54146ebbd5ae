#pragma once

// Physical constants, Doppler/energy/frequency conversions and the alpha-Fe
// hyperfine sextet. Canonical internal unit for detuning is angular frequency
// (rad/s); velocities are carried in mm/s and energies in neV at the edges.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>

#include "mossfloq/errors.hpp"

namespace mossfloq::physics {

inline constexpr double kPlanckEvSeconds = 4.135667696e-15; // CODATA 2018, exact
inline constexpr double kSpeedOfLight = 299792458.0;        // m/s, exact
inline constexpr double kGammaEnergyEv = 14412.5;           // 57Fe Moessbauer line

/// Sideband spacing printed with the alpha-Fe reference pattern. Direct
/// conversion of 97.9 MHz gives ~8.42 mm/s instead; callers choose.
inline constexpr double kPublishedSidebandSpacingMmS = 8.244;

struct PhysConstants {
    double gamma_energy_eV = kGammaEnergyEv;
    double planck_h_eV_s = kPlanckEvSeconds;
    double speed_of_light_m_s = kSpeedOfLight;
    double photon_wavenumber_per_m = 0.0; ///< k0; filled by make_constants

    static double wavenumber_from(double energy_eV, double h_eV_s, double c_m_s) {
        return 2.0 * std::numbers::pi * energy_eV / (h_eV_s * c_m_s);
    }
};

/// Builds a consistent constant set. k0 is derived from E_gamma unless an
/// explicit override is supplied (the override is taken verbatim).
inline PhysConstants make_constants(double gamma_energy_eV = kGammaEnergyEv,
                                    std::optional<double> k0_override = std::nullopt) {
    if (!(gamma_energy_eV > 0.0))
        throw ConfigError("gamma_energy_eV must be positive");
    PhysConstants c;
    c.gamma_energy_eV = gamma_energy_eV;
    c.photon_wavenumber_per_m =
        k0_override ? *k0_override
                    : PhysConstants::wavenumber_from(gamma_energy_eV, c.planck_h_eV_s, c.speed_of_light_m_s);
    if (!(c.photon_wavenumber_per_m > 0.0))
        throw ConfigError("photon wavenumber must be positive");
    return c;
}

inline const PhysConstants& default_constants() {
    static const PhysConstants c = make_constants();
    return c;
}

// Positive velocity = source approaching = blue shift = positive detuning.
inline double velocity_to_angular_frequency(double v_mm_s, const PhysConstants& c = default_constants()) {
    return c.photon_wavenumber_per_m * v_mm_s * 1e-3;
}

inline double angular_frequency_to_velocity(double omega_rad_s, const PhysConstants& c = default_constants()) {
    return omega_rad_s / c.photon_wavenumber_per_m * 1e3;
}

/// Doppler energy shift E_gamma * v / c, in neV.
inline double velocity_to_energy(double v_mm_s, const PhysConstants& c = default_constants()) {
    return c.gamma_energy_eV * (v_mm_s * 1e-3) / c.speed_of_light_m_s * 1e9;
}

/// e / h, neV -> MHz.
inline double energy_to_frequency(double e_neV, const PhysConstants& c = default_constants()) {
    return e_neV * 1e-9 / c.planck_h_eV_s * 1e-6;
}

inline double frequency_to_energy(double f_MHz, const PhysConstants& c = default_constants()) {
    return f_MHz * 1e6 * c.planck_h_eV_s * 1e9;
}

/// Doppler velocity equivalent of a modulation frequency f (Hz).
inline double frequency_to_velocity(double f_Hz, const PhysConstants& c = default_constants()) {
    return angular_frequency_to_velocity(2.0 * std::numbers::pi * f_Hz, c);
}

// ---------------------------------------------------------------------------

/// Pair classes of the sextet: lines (1,6) outer, (2,5) middle, (3,4) inner.
enum class LinePair { outer = 0, middle = 1, inner = 2 };

inline constexpr LinePair line_pair(int line) {
    switch (line) {
    case 0:
    case 5:
        return LinePair::outer;
    case 1:
    case 4:
        return LinePair::middle;
    default:
        return LinePair::inner;
    }
}

struct HyperfineScheme {
    std::array<double, 6> line_velocities_mm_s{};
    /// Relative intensities of the (outer, middle, inner) pairs.
    std::array<double, 3> pair_intensities{3.0, 2.0, 1.0};
    double isomer_shift_neV = -5.0; ///< informational; already in the line velocities

    double intensity(int line) const { return pair_intensities[static_cast<int>(line_pair(line))]; }

    double centroid_mm_s() const {
        double s = 0.0;
        for (double v : line_velocities_mm_s) s += v;
        return s / 6.0;
    }

    /// Largest |v_i - (2*centroid - v_{5-i})|: deviation from mirror symmetry.
    double mirror_asymmetry_mm_s() const {
        const double c = centroid_mm_s();
        double worst = 0.0;
        for (int i = 0; i < 6; ++i)
            worst = std::max(worst, std::abs((line_velocities_mm_s[i] - c) + (line_velocities_mm_s[5 - i] - c)));
        return worst;
    }

    void validate(double symmetry_tolerance_mm_s = 0.06) const {
        for (double s : pair_intensities)
            if (!(s > 0.0)) throw ConfigError("hyperfine intensities must be strictly positive");
        if (!std::is_sorted(line_velocities_mm_s.begin(), line_velocities_mm_s.end()))
            throw ConfigError("hyperfine line velocities must be ascending");
        if (mirror_asymmetry_mm_s() > symmetry_tolerance_mm_s)
            throw ConfigError("hyperfine pattern is not mirror-symmetric within tolerance");
    }
};

/// alpha-Fe relative to a 57Co:Rh source.
inline HyperfineScheme default_alpha_fe_scheme(std::array<double, 3> pair_intensities = {3.0, 2.0, 1.0}) {
    HyperfineScheme s;
    s.line_velocities_mm_s = {-5.42, -3.19, -0.95, +0.72, +2.96, +5.19};
    s.pair_intensities = pair_intensities;
    s.isomer_shift_neV = -5.0;
    return s;
}

enum class ScanMode { constant_acceleration };
enum class Direction { accelerating, decelerating };

inline std::string to_string(Direction d) { return d == Direction::accelerating ? "accelerating" : "decelerating"; }

inline Direction direction_from_string(const std::string& s) {
    if (s == "accelerating") return Direction::accelerating;
    if (s == "decelerating") return Direction::decelerating;
    throw ConfigError("unknown scan direction '" + s + "'");
}

struct ScanParams {
    double v_min_mm_s = -19.0;
    double v_max_mm_s = 19.0;
    int n_channels = 1024; ///< channels per half-sweep
    ScanMode scan_mode = ScanMode::constant_acceleration;
    Direction direction = Direction::accelerating;

    void validate() const {
        if (!(v_min_mm_s < v_max_mm_s)) throw ConfigError("scan requires v_min < v_max");
        if (n_channels < 2) throw ConfigError("scan requires at least 2 channels");
    }

    double channel_width_mm_s() const { return (v_max_mm_s - v_min_mm_s) / n_channels; }
};

} // namespace mossfloq::physics
