#pragma once

// Run configuration: one JSON document, every key optional with the
// defaults below, unknown keys rejected at every level. docs/schema.md
// lists the keys.

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mossfloq/errors.hpp"
#include "mossfloq/extract.hpp"
#include "mossfloq/floquet.hpp"
#include "mossfloq/globalfit.hpp"
#include "mossfloq/idt.hpp"
#include "mossfloq/io.hpp"
#include "mossfloq/physics.hpp"
#include "mossfloq/specfit.hpp"
#include "mossfloq/specgen.hpp"

namespace mossfloq::config {

using json = nlohmann::json;

struct PhysicsCfg {
    double gamma_energy_eV = physics::kGammaEnergyEv;
    std::optional<double> k0_per_m; ///< derived from the gamma energy when absent
};

struct SchemeCfg {
    std::array<double, 6> line_velocities_mm_s = physics::default_alpha_fe_scheme().line_velocities_mm_s;
    std::array<double, 3> pair_intensities{3.0, 2.0, 1.0}; ///< outer, middle, inner
};

struct ModulationCfg {
    double m_per_sqrt_W = 4.34; ///< truth used for synthesis
    double alpha = 0.36;
    double saw_frequency_Hz = 97.9e6;
    double linewidth_mm_s = 0.30;
    double eta = 0.35; ///< drive efficiency used for C_perp
};

struct ScanCfg {
    double v_min_mm_s = -19.0;
    double v_max_mm_s = 19.0;
    int n_channels = 1024;
    std::vector<std::string> directions{"accelerating", "decelerating"};
};

struct SynthCfg {
    double contrast = 0.03;
    std::array<double, 6> baseline = specgen::default_baseline();
    std::vector<double> drive_powers_W; ///< explicit grid; empty selects the m0 grid below
    double grid_m0_min = 0.3;
    double grid_m0_max = 5.0;
    int grid_points = 8;
    bool include_zero_drive = true;
    double slope_drift = 0.0; ///< relative stretch of the true velocity axis, for drift studies
};

struct CalibCfg {
    std::optional<double> sideband_spacing_mm_s; ///< derived from the SAW frequency when absent
    calib::CalibrationOptions options;
    double drift_tolerance = 0.02;
    double drift_z = 3.0;
};

struct ExtractCfg {
    extract::IntegrationOptions integration;
    bool subtract_neighbour_tails = true;
    bool baseline_covariance = true;
    bool weighted = false;
    bool zero_drive_width = true;              ///< integrate every spectrum with the zero-drive FWHM
    std::string intensity_source = "zero_drive_areas"; ///< or "fit_amplitudes"
};

struct GlobalCfg {
    globalfit::FitOptions options;
    bool joint_covariance = true;
    std::vector<double> exclude_powers_W; ///< manual outlier exclusion
};

struct IdtCfg {
    std::string preset = "fitted_device"; ///< or "custom"
    idt::IdtDesign design = idt::fitted_device_preset();
    double propagation_loss_dB = -1.68; ///< kept as given; design.propagation_loss is derived from it
    double f_lo_Hz = 96.9e6;
    double f_hi_Hz = 98.9e6;
    int points = 401;
    double relative_noise = 0.01;
    std::string trace_file; ///< idt-fit input; synthesized from the design when empty
};

struct RunConfig {
    std::uint64_t seed = 2024;
    std::string output_dir = "run"; ///< used when the command line gives no --out-dir
    PhysicsCfg physics;
    SchemeCfg scheme;
    ModulationCfg modulation;
    ScanCfg scan;
    specgen::BudgetConfig budget;
    SynthCfg synth;
    specfit::FitOptions fit;
    CalibCfg calibration;
    ExtractCfg extraction;
    GlobalCfg globalfit;
    IdtCfg idt;

    physics::PhysConstants constants() const { return physics::make_constants(physics.gamma_energy_eV, physics.k0_per_m); }
    physics::HyperfineScheme hyperfine() const {
        auto s = physics::default_alpha_fe_scheme(scheme.pair_intensities);
        s.line_velocities_mm_s = scheme.line_velocities_mm_s;
        return s;
    }
    double saw_angular_freq() const { return 2.0 * std::numbers::pi * modulation.saw_frequency_Hz; }
    double sideband_spacing() const {
        return calibration.sideband_spacing_mm_s
                   ? *calibration.sideband_spacing_mm_s
                   : physics::angular_frequency_to_velocity(saw_angular_freq(), constants());
    }
    physics::ScanParams scan_params(const std::string& direction) const {
        physics::ScanParams p;
        p.v_min_mm_s = scan.v_min_mm_s;
        p.v_max_mm_s = scan.v_max_mm_s;
        p.n_channels = scan.n_channels;
        p.direction = physics::direction_from_string(direction);
        return p;
    }
    floquet::ModulationModel modulation_model(double drive_power_W) const {
        floquet::ModulationModel m;
        m.mod_index = modulation.m_per_sqrt_W * std::sqrt(drive_power_W);
        m.alpha = modulation.alpha;
        m.saw_angular_freq_rad_s = saw_angular_freq();
        m.linewidth_rad_s = physics::velocity_to_angular_frequency(modulation.linewidth_mm_s, constants());
        m.scheme = hyperfine();
        return m;
    }
    /// Driven powers, ascending, without the zero-drive reference.
    std::vector<double> drive_powers() const {
        if (!synth.drive_powers_W.empty()) return synth.drive_powers_W;
        std::vector<double> p;
        const double m = modulation.m_per_sqrt_W;
        for (int i = 0; i < synth.grid_points; ++i) {
            const double f = synth.grid_points > 1 ? static_cast<double>(i) / (synth.grid_points - 1) : 0.0;
            const double m0 = synth.grid_m0_min * std::pow(synth.grid_m0_max / synth.grid_m0_min, f);
            p.push_back((m0 / m) * (m0 / m));
        }
        return p;
    }

    void validate() const;
};

// ---------------------------------------------------------------------------
// strict object reader

class Reader {
public:
    Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(path_ + "." + key + ": " + e.what());
        }
    }
    template <class T>
    void get(const char* key, std::optional<T>& out) {
        seen_.insert(key);
        if (!j_.contains(key) || j_.at(key).is_null()) return;
        T v{};
        get(key, v);
        out = v;
    }
    Reader sub(const char* key) {
        seen_.insert(key);
        static const json empty = json::object();
        return Reader(j_.contains(key) ? j_.at(key) : empty, path_ + "." + key);
    }
    bool has(const char* key) const { return j_.contains(key); }
    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError(path_ + ": unknown key '" + k + "'");
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline RunConfig from_json(const json& j) {
    RunConfig c;
    Reader r(j, "config");
    r.get("seed", c.seed);
    r.get("output_dir", c.output_dir);
    {
        auto s = r.sub("physics");
        s.get("gamma_energy_eV", c.physics.gamma_energy_eV);
        s.get("k0_per_m", c.physics.k0_per_m);
        s.finish();
    }
    {
        auto s = r.sub("scheme");
        s.get("line_velocities_mm_s", c.scheme.line_velocities_mm_s);
        s.get("pair_intensities", c.scheme.pair_intensities);
        s.finish();
    }
    {
        auto s = r.sub("modulation");
        s.get("m_per_sqrt_W", c.modulation.m_per_sqrt_W);
        s.get("alpha", c.modulation.alpha);
        s.get("saw_frequency_Hz", c.modulation.saw_frequency_Hz);
        s.get("linewidth_mm_s", c.modulation.linewidth_mm_s);
        s.get("eta", c.modulation.eta);
        s.finish();
    }
    {
        auto s = r.sub("scan");
        s.get("v_min_mm_s", c.scan.v_min_mm_s);
        s.get("v_max_mm_s", c.scan.v_max_mm_s);
        s.get("n_channels", c.scan.n_channels);
        s.get("directions", c.scan.directions);
        s.finish();
    }
    {
        auto s = r.sub("budget");
        auto& b = c.budget;
        s.get("source_activity_Bq", b.source_activity_Bq);
        s.get("ec_branching", b.ec_branching);
        s.get("transition_probability", b.transition_probability);
        s.get("internal_conversion", b.internal_conversion);
        s.get("ic_survival_override", b.ic_survival_override);
        s.get("solid_angle", b.solid_angle);
        s.get("substrate_transmission", b.substrate_transmission);
        s.get("compton_per_resonant", b.compton_per_resonant);
        s.get("mismatch_per_resonant", b.mismatch_per_resonant);
        s.get("per_bin_rate_Hz", b.per_bin_rate_Hz);
        s.get("duration_s", b.duration_s);
        s.finish();
    }
    {
        auto s = r.sub("synth");
        s.get("contrast", c.synth.contrast);
        s.get("baseline", c.synth.baseline);
        s.get("drive_powers_W", c.synth.drive_powers_W);
        s.get("grid_m0_min", c.synth.grid_m0_min);
        s.get("grid_m0_max", c.synth.grid_m0_max);
        s.get("grid_points", c.synth.grid_points);
        s.get("include_zero_drive", c.synth.include_zero_drive);
        s.get("slope_drift", c.synth.slope_drift);
        s.finish();
    }
    {
        auto s = r.sub("fit");
        auto& f = c.fit;
        s.get("initial_fwhm_mm_s", f.initial_fwhm_mm_s);
        s.get("merge_tol_mm_s", f.merge_tol_mm_s);
        s.get("max_order", f.max_order);
        s.get("prune_sigma", f.prune_sigma);
        s.get("tie_amplitudes", f.tie_amplitudes);
        s.get("scale_search", f.scale_search);
        s.get("scale_steps", f.scale_steps);
        s.get("shift_search_channels", f.shift_search_channels);
        s.get("shift_steps", f.shift_steps);
        s.finish();
    }
    {
        auto s = r.sub("calibration");
        s.get("sideband_spacing_mm_s", c.calibration.sideband_spacing_mm_s);
        s.get("rms_gate_mm_s", c.calibration.options.rms_gate_mm_s);
        s.get("min_amplitude_significance", c.calibration.options.min_amplitude_significance);
        s.get("birge_scaling", c.calibration.options.birge_scaling);
        s.get("linearity_level", c.calibration.options.linearity_level);
        s.get("drift_tolerance", c.calibration.drift_tolerance);
        s.get("drift_z", c.calibration.drift_z);
        s.finish();
    }
    {
        auto s = r.sub("extraction");
        auto& e = c.extraction;
        s.get("half_window_in_fwhm", e.integration.half_window_in_fwhm);
        s.get("min_channels_per_fwhm", e.integration.min_channels_per_fwhm);
        s.get("subtract_neighbour_tails", e.subtract_neighbour_tails);
        s.get("baseline_covariance", e.baseline_covariance);
        s.get("weighted", e.weighted);
        s.get("zero_drive_width", e.zero_drive_width);
        s.get("intensity_source", e.intensity_source);
        s.finish();
    }
    {
        auto s = r.sub("globalfit");
        auto& g = c.globalfit.options;
        s.get("orders", g.orders);
        s.get("log_m", g.log_m);
        s.get("fix_alpha", g.fix_alpha);
        s.get("alpha_fixed", g.alpha_fixed);
        s.get("fix_norm", g.fix_norm);
        s.get("norm_fixed", g.norm_fixed);
        s.get("full_covariance", g.full_covariance);
        s.get("boundary_tol", g.boundary_tol);
        s.get("grid_m", g.grid_m);
        s.get("grid_alpha", g.grid_alpha);
        s.get("joint_covariance", c.globalfit.joint_covariance);
        s.get("exclude_powers_W", c.globalfit.exclude_powers_W);
        s.finish();
    }
    {
        auto s = r.sub("idt");
        auto& d = c.idt;
        s.get("preset", d.preset);
        if (d.preset == "custom") d.design = idt::IdtDesign{};
        else if (d.preset != "fitted_device") throw ConfigError("config.idt.preset: expected fitted_device or custom");
        double f0 = d.design.center_angular_freq / (2.0 * std::numbers::pi);
        double& loss_db = d.propagation_loss_dB;
        s.get("n_periods", d.design.n_periods);
        s.get("aperture_m", d.design.aperture_m);
        s.get("wavelength_m", d.design.wavelength_m);
        s.get("center_frequency_Hz", f0);
        s.get("coupling_k2", d.design.coupling_k2);
        s.get("cap_per_period_F_per_m", d.design.cap_per_period_F_per_m);
        s.get("shunt_R_ohm", d.design.shunt_R_ohm);
        s.get("source_Z_ohm", d.design.source_Z_ohm);
        s.get("propagation_loss_dB", loss_db);
        d.design.center_angular_freq = 2.0 * std::numbers::pi * f0;
        d.design.propagation_loss = idt::loss_db_to_amplitude(loss_db);
        s.get("f_lo_Hz", d.f_lo_Hz);
        s.get("f_hi_Hz", d.f_hi_Hz);
        s.get("points", d.points);
        s.get("relative_noise", d.relative_noise);
        s.get("trace_file", d.trace_file);
        s.finish();
    }
    r.finish();
    c.validate();
    return c;
}

inline json to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["output_dir"] = c.output_dir;
    j["physics"] = {{"gamma_energy_eV", c.physics.gamma_energy_eV},
                    {"k0_per_m", c.physics.k0_per_m ? json(*c.physics.k0_per_m) : json(nullptr)}};
    j["scheme"] = {{"line_velocities_mm_s", c.scheme.line_velocities_mm_s},
                   {"pair_intensities", c.scheme.pair_intensities}};
    j["modulation"] = {{"m_per_sqrt_W", c.modulation.m_per_sqrt_W},
                       {"alpha", c.modulation.alpha},
                       {"saw_frequency_Hz", c.modulation.saw_frequency_Hz},
                       {"linewidth_mm_s", c.modulation.linewidth_mm_s},
                       {"eta", c.modulation.eta}};
    j["scan"] = {{"v_min_mm_s", c.scan.v_min_mm_s},
                 {"v_max_mm_s", c.scan.v_max_mm_s},
                 {"n_channels", c.scan.n_channels},
                 {"directions", c.scan.directions}};
    const auto& b = c.budget;
    j["budget"] = {{"source_activity_Bq", b.source_activity_Bq},
                   {"ec_branching", b.ec_branching},
                   {"transition_probability", b.transition_probability},
                   {"internal_conversion", b.internal_conversion},
                   {"ic_survival_override", b.ic_survival_override ? json(*b.ic_survival_override) : json(nullptr)},
                   {"solid_angle", b.solid_angle},
                   {"substrate_transmission", b.substrate_transmission},
                   {"compton_per_resonant", b.compton_per_resonant},
                   {"mismatch_per_resonant", b.mismatch_per_resonant},
                   {"per_bin_rate_Hz", b.per_bin_rate_Hz},
                   {"duration_s", b.duration_s}};
    j["synth"] = {{"contrast", c.synth.contrast},
                  {"baseline", c.synth.baseline},
                  {"drive_powers_W", c.synth.drive_powers_W},
                  {"grid_m0_min", c.synth.grid_m0_min},
                  {"grid_m0_max", c.synth.grid_m0_max},
                  {"grid_points", c.synth.grid_points},
                  {"include_zero_drive", c.synth.include_zero_drive},
                  {"slope_drift", c.synth.slope_drift}};
    const auto& f = c.fit;
    j["fit"] = {{"initial_fwhm_mm_s", f.initial_fwhm_mm_s},
                {"merge_tol_mm_s", f.merge_tol_mm_s},
                {"max_order", f.max_order},
                {"prune_sigma", f.prune_sigma},
                {"tie_amplitudes", f.tie_amplitudes},
                {"scale_search", f.scale_search},
                {"scale_steps", f.scale_steps},
                {"shift_search_channels", f.shift_search_channels},
                {"shift_steps", f.shift_steps}};
    j["calibration"] = {
        {"sideband_spacing_mm_s",
         c.calibration.sideband_spacing_mm_s ? json(*c.calibration.sideband_spacing_mm_s) : json(nullptr)},
        {"rms_gate_mm_s", c.calibration.options.rms_gate_mm_s},
        {"min_amplitude_significance", c.calibration.options.min_amplitude_significance},
        {"birge_scaling", c.calibration.options.birge_scaling},
        {"linearity_level", c.calibration.options.linearity_level},
        {"drift_tolerance", c.calibration.drift_tolerance},
        {"drift_z", c.calibration.drift_z}};
    const auto& e = c.extraction;
    j["extraction"] = {{"half_window_in_fwhm", e.integration.half_window_in_fwhm},
                       {"min_channels_per_fwhm", e.integration.min_channels_per_fwhm},
                       {"subtract_neighbour_tails", e.subtract_neighbour_tails},
                       {"baseline_covariance", e.baseline_covariance},
                       {"weighted", e.weighted},
                       {"zero_drive_width", e.zero_drive_width},
                       {"intensity_source", e.intensity_source}};
    const auto& g = c.globalfit.options;
    j["globalfit"] = {{"orders", g.orders},
                      {"log_m", g.log_m},
                      {"fix_alpha", g.fix_alpha},
                      {"alpha_fixed", g.alpha_fixed},
                      {"fix_norm", g.fix_norm},
                      {"norm_fixed", g.norm_fixed},
                      {"full_covariance", g.full_covariance},
                      {"boundary_tol", g.boundary_tol},
                      {"grid_m", g.grid_m},
                      {"grid_alpha", g.grid_alpha},
                      {"joint_covariance", c.globalfit.joint_covariance},
                      {"exclude_powers_W", c.globalfit.exclude_powers_W}};
    const auto& d = c.idt.design;
    j["idt"] = {{"preset", c.idt.preset},
                {"n_periods", d.n_periods},
                {"aperture_m", d.aperture_m},
                {"wavelength_m", d.wavelength_m},
                {"center_frequency_Hz", d.center_angular_freq / (2.0 * std::numbers::pi)},
                {"coupling_k2", d.coupling_k2},
                {"cap_per_period_F_per_m", d.cap_per_period_F_per_m},
                {"shunt_R_ohm", d.shunt_R_ohm},
                {"source_Z_ohm", d.source_Z_ohm},
                {"propagation_loss_dB", c.idt.propagation_loss_dB},
                {"f_lo_Hz", c.idt.f_lo_Hz},
                {"f_hi_Hz", c.idt.f_hi_Hz},
                {"points", c.idt.points},
                {"relative_noise", c.idt.relative_noise},
                {"trace_file", c.idt.trace_file}};
    return j;
}

inline void RunConfig::validate() const {
    (void)constants();
    if (output_dir.empty()) throw ConfigError("config.output_dir must not be empty");
    if (scan.directions.empty()) throw ConfigError("config.scan.directions: at least one direction");
    std::set<std::string> dirs;
    for (const auto& d : scan.directions) {
        (void)physics::direction_from_string(d);
        if (!dirs.insert(d).second) throw ConfigError("config.scan.directions: duplicate " + d);
    }
    scan_params(scan.directions.front()).validate();
    if (!(modulation.m_per_sqrt_W > 0.0)) throw ConfigError("config.modulation.m_per_sqrt_W must be > 0");
    if (!(modulation.alpha >= 0.0 && modulation.alpha < 1.0)) throw ConfigError("config.modulation.alpha must lie in [0, 1)");
    if (!(modulation.saw_frequency_Hz > 0.0)) throw ConfigError("config.modulation.saw_frequency_Hz must be > 0");
    if (!(modulation.linewidth_mm_s > 0.0)) throw ConfigError("config.modulation.linewidth_mm_s must be > 0");
    if (!(modulation.eta > 0.0)) throw ConfigError("config.modulation.eta must be > 0");
    for (double p : scheme.pair_intensities)
        if (!(p > 0.0)) throw ConfigError("config.scheme.pair_intensities must be > 0");
    if (!(synth.contrast >= 0.0 && synth.contrast < 1.0)) throw ConfigError("config.synth.contrast must lie in [0, 1)");
    for (double p : synth.drive_powers_W)
        if (!(p > 0.0)) throw ConfigError("config.synth.drive_powers_W must be > 0 (the zero-drive reference is separate)");
    // grid_points = 0 leaves only the zero-drive reference
    if (synth.drive_powers_W.empty() &&
        !(synth.grid_points >= 0 && synth.grid_m0_min > 0.0 && synth.grid_m0_max >= synth.grid_m0_min))
        throw ConfigError("config.synth: grid needs points >= 0 and 0 < m0_min <= m0_max");
    if (drive_powers().empty() && !synth.include_zero_drive)
        throw ConfigError("config.synth: nothing to synthesize (no drive powers and no zero-drive reference)");
    if (!(synth.slope_drift > -0.5 && synth.slope_drift < 0.5)) throw ConfigError("config.synth.slope_drift out of range");
    if (fit.max_order < 0 || fit.max_order > 4) throw ConfigError("config.fit.max_order must lie in 0..4");
    if (calibration.sideband_spacing_mm_s && !(*calibration.sideband_spacing_mm_s > 0.0))
        throw ConfigError("config.calibration.sideband_spacing_mm_s must be > 0");
    if (extraction.intensity_source != "zero_drive_areas" && extraction.intensity_source != "fit_amplitudes")
        throw ConfigError("config.extraction.intensity_source: expected zero_drive_areas or fit_amplitudes");
    if (!(extraction.integration.half_window_in_fwhm > 0.0))
        throw ConfigError("config.extraction.half_window_in_fwhm must be > 0");
    if (globalfit.options.orders.empty()) throw ConfigError("config.globalfit.orders must not be empty");
    for (int n : globalfit.options.orders)
        if (n < 0 || n > 2) throw ConfigError("config.globalfit.orders must lie within 0..2");
    if (globalfit.options.grid_m < 2 || globalfit.options.grid_alpha < 1)
        throw ConfigError("config.globalfit: grid_m >= 2 and grid_alpha >= 1");
    idt.design.validate();
    if (!(idt.f_hi_Hz > idt.f_lo_Hz && idt.f_lo_Hz > 0.0) || idt.points < 4)
        throw ConfigError("config.idt: need 0 < f_lo_Hz < f_hi_Hz and points >= 4");
    if (!(idt.relative_noise > 0.0)) throw ConfigError("config.idt.relative_noise must be > 0");
}

inline RunConfig load(const std::string& path) {
    if (path.empty()) {
        RunConfig c;
        c.validate();
        return c;
    }
    auto c = from_json(io::read_json(path));
    // a relative trace file is looked up next to the config file
    if (!c.idt.trace_file.empty() && std::filesystem::path(c.idt.trace_file).is_relative())
        c.idt.trace_file = (std::filesystem::path(path).parent_path() / c.idt.trace_file).lexically_normal().string();
    return c;
}

} // namespace mossfloq::config
