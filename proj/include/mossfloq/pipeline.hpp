#pragma once

// File-based stages: synth -> fit -> calibrate -> extract -> globalfit, plus
// the IDT model and trace fit. Each stage reads the previous stage's files
// from `in` and writes its own under `out`; both are usually the same run
// directory.
//
//   spectra/manifest.json, spectra/<id>.csv
//   fits/<id>.json, fits/<id>.csv
//   calib/<id>.json, calib/summary.json
//   extract/powers.json, extract/powers.csv
//   globalfit/report.json, globalfit/curves.csv, globalfit/points.csv
//   idt/model.json, idt/sweep.csv, idt/traces.csv, idt/fit.json

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "mossfloq/calib.hpp"
#include "mossfloq/config.hpp"
#include "mossfloq/extract.hpp"
#include "mossfloq/floquet.hpp"
#include "mossfloq/globalfit.hpp"
#include "mossfloq/idt.hpp"
#include "mossfloq/io.hpp"
#include "mossfloq/peak_table.hpp"
#include "mossfloq/specfit.hpp"
#include "mossfloq/specgen.hpp"

namespace mossfloq::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// manifest

struct SpectrumEntry {
    std::string id;
    std::string direction;
    int index = 0; ///< acquisition order within the direction; 0 is the zero-drive reference
    double drive_power_W = 0.0;
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    double duration_s = 0.0;
    int n_channels = 0;
};

inline json to_json(const SpectrumEntry& e) {
    return {{"id", e.id},         {"direction", e.direction}, {"index", e.index},
            {"drive_power_W", e.drive_power_W}, {"seed", e.seed}, {"stream", e.stream},
            {"duration_s", e.duration_s}, {"n_channels", e.n_channels}, {"file", e.id + ".csv"}};
}

inline std::vector<SpectrumEntry> read_manifest(const fs::path& in) {
    const json j = io::read_json(in / "spectra" / "manifest.json");
    std::vector<SpectrumEntry> out;
    try {
        for (const auto& s : j.at("spectra")) {
            SpectrumEntry e;
            e.id = s.at("id").get<std::string>();
            e.direction = s.at("direction").get<std::string>();
            e.index = s.at("index").get<int>();
            e.drive_power_W = s.at("drive_power_W").get<double>();
            e.seed = s.at("seed").get<std::uint64_t>();
            e.stream = s.at("stream").get<std::uint64_t>();
            e.duration_s = s.at("duration_s").get<double>();
            e.n_channels = s.at("n_channels").get<int>();
            out.push_back(e);
        }
    } catch (const json::exception& e) {
        throw IoError("spectra/manifest.json: " + std::string(e.what()));
    }
    if (out.empty()) throw IoError("spectra/manifest.json lists no spectra");
    return out;
}

inline std::string spectrum_id(const std::string& direction, int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%02d", direction == "accelerating" ? "acc" : "dec", index);
    return buf;
}

inline specgen::CountSpectrum read_spectrum(const fs::path& in, const SpectrumEntry& e, const config::RunConfig& cfg) {
    const auto t = io::read_csv(in / "spectra" / (e.id + ".csv"));
    const auto ch = t.values("channel");
    const auto counts = t.values("counts");
    if (static_cast<int>(counts.size()) != e.n_channels)
        throw IoError("input validation: " + e.id + ".csv has " + std::to_string(counts.size()) +
                      " channels, manifest says " + std::to_string(e.n_channels));
    specgen::CountSpectrum s;
    for (std::size_t i = 0; i < counts.size(); ++i) {
        if (ch[i] != static_cast<double>(i)) throw IoError("input validation: " + e.id + ".csv channels out of order");
        if (!(counts[i] >= 0.0) || counts[i] != std::floor(counts[i]))
            throw IoError("input validation: " + e.id + ".csv has a non-integer or negative count");
        s.counts.push_back(static_cast<std::int64_t>(counts[i]));
    }
    s.scan = cfg.scan_params(e.direction);
    if (s.scan.n_channels != e.n_channels) throw ConfigError(e.id + ": channel count differs from config.scan");
    s.drive_power_W = e.drive_power_W;
    s.seed = e.seed;
    s.stream = e.stream;
    s.duration_s = e.duration_s;
    return s;
}

// ---------------------------------------------------------------------------
// synth

inline std::vector<SpectrumEntry> run_synth(const config::RunConfig& cfg, const fs::path& out) {
    const auto budget = specgen::compute_budget(cfg.budget);
    const auto powers = cfg.drive_powers();
    std::vector<SpectrumEntry> entries;
    json manifest;
    manifest["seed"] = cfg.seed;
    manifest["spectra"] = json::array();
    for (std::size_t d = 0; d < cfg.scan.directions.size(); ++d) {
        const auto& dir = cfg.scan.directions[d];
        // true velocity axis, optionally stretched to emulate drive drift
        auto truth = cfg.scan_params(dir);
        truth.v_min_mm_s *= 1.0 + cfg.synth.slope_drift;
        truth.v_max_mm_s *= 1.0 + cfg.synth.slope_drift;
        const auto v = specgen::acceleration_to_channel_map(truth);
        std::vector<double> grid;
        if (cfg.synth.include_zero_drive) grid.push_back(0.0);
        grid.insert(grid.end(), powers.begin(), powers.end());
        for (std::size_t i = 0; i < grid.size(); ++i) {
            SpectrumEntry e;
            e.direction = dir;
            e.index = static_cast<int>(i) + (cfg.synth.include_zero_drive ? 0 : 1);
            e.id = spectrum_id(dir, e.index);
            e.drive_power_W = grid[i];
            e.seed = cfg.seed;
            e.stream = 1000 * d + static_cast<std::uint64_t>(e.index);
            const auto mm = cfg.modulation_model(e.drive_power_W);
            mm.validate();
            const auto shape = floquet::normalized_spectrum(mm, v, cfg.constants());
            const auto cs = specgen::generate_counts(shape, budget, cfg.synth.baseline, cfg.synth.contrast, e.seed,
                                                     e.stream);
            e.duration_s = cs.duration_s;
            e.n_channels = cs.n_channels();
            io::Table t{{"channel", "counts"}, {}};
            for (int c = 0; c < cs.n_channels(); ++c)
                t.rows.push_back({static_cast<double>(c), static_cast<double>(cs.counts[c])});
            io::write_csv(out / "spectra" / (e.id + ".csv"), t);
            manifest["spectra"].push_back(to_json(e));
            entries.push_back(e);
        }
    }
    io::write_json(out / "spectra" / "manifest.json", manifest);
    return entries;
}

// ---------------------------------------------------------------------------
// fit

inline specfit::FitModel fit_model_for(const config::RunConfig& cfg, const SpectrumEntry& e) {
    auto mm = cfg.modulation_model(e.drive_power_W);
    return specfit::build_fit_model(cfg.hyperfine(), mm, cfg.scan_params(e.direction), cfg.fit, cfg.constants());
}

inline json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline double null_to_nan(const json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline json fit_to_json(const SpectrumEntry& e, const specfit::SpectrumFit& f) {
    json j;
    j["id"] = e.id;
    j["direction"] = e.direction;
    j["drive_power_W"] = e.drive_power_W;
    j["template_max_order"] = f.tmpl.max_order;
    j["baseline"] = f.baseline;
    j["covariance_ok"] = f.covariance_ok;
    j["baseline_covariance"] =
        f.covariance_ok ? io::to_json(f.covariance.topLeftCorner(specfit::kBaselineParams, specfit::kBaselineParams))
                        : json(nullptr);
    j["linewidth_channels"] = f.linewidth;
    j["linewidth_sigma_channels"] = nan_to_null(f.linewidth_sigma);
    json peaks = json::array();
    for (int k = 0; k < f.tmpl.n_peaks(); ++k)
        peaks.push_back({{"template_velocity_mm_s", f.tmpl.peaks[k].velocity_mm_s},
                         {"position_channels", nan_to_null(f.positions[k])},
                         {"position_sigma_channels", nan_to_null(f.position_sigma[k])},
                         {"active", static_cast<bool>(f.peak_active[k])},
                         {"group", f.amplitude_of_peak[k]}});
    j["peaks"] = peaks;
    json groups = json::array();
    for (std::size_t g = 0; g < f.amplitudes.size(); ++g)
        groups.push_back({{"amplitude", f.amplitudes[g]},
                          {"amplitude_sigma", nan_to_null(f.amplitude_sigma[g])},
                          {"active", static_cast<bool>(f.group_active[g])}});
    j["groups"] = groups;
    j["chi2"] = f.chi2;
    j["chi2_reduced"] = f.chi2_reduced;
    j["dof"] = f.dof;
    j["n_params"] = f.n_params;
    j["runs_test"] = {{"n_positive", f.runs.n_positive}, {"n_negative", f.runs.n_negative},
                      {"runs", f.runs.runs},            {"z", f.runs.z},
                      {"p_value", f.runs.p_value}, {"p_clustered", f.runs.p_clustered}};
    j["converged"] = f.converged;
    j["iterations"] = f.iterations;
    j["message"] = f.message;
    j["registration_scale"] = f.registration_scale;
    j["registration_shift"] = f.registration_shift;
    return j;
}

/// Rebuilds the parts of a fit the downstream stages use.
inline specfit::SpectrumFit fit_from_json(const json& j, const config::RunConfig& cfg, const SpectrumEntry& e) {
    specfit::SpectrumFit f;
    try {
        auto opt = cfg.fit;
        opt.max_order = j.at("template_max_order").get<int>();
        auto mm = cfg.modulation_model(e.drive_power_W);
        f.tmpl = specfit::build_fit_model(cfg.hyperfine(), mm, cfg.scan_params(e.direction), opt, cfg.constants()).tmpl;
        f.baseline = j.at("baseline").get<std::array<double, 6>>();
        f.covariance_ok = j.at("covariance_ok").get<bool>();
        if (f.covariance_ok) f.covariance = io::matrix_from_json(j.at("baseline_covariance"), e.id + " baseline covariance");
        f.linewidth = j.at("linewidth_channels").get<double>();
        f.linewidth_sigma = null_to_nan(j.at("linewidth_sigma_channels"));
        for (const auto& p : j.at("peaks")) {
            f.positions.push_back(null_to_nan(p.at("position_channels")));
            f.position_sigma.push_back(null_to_nan(p.at("position_sigma_channels")));
            f.peak_active.push_back(p.at("active").get<bool>());
            f.amplitude_of_peak.push_back(p.at("group").get<int>());
        }
        for (const auto& g : j.at("groups")) {
            f.amplitudes.push_back(g.at("amplitude").get<double>());
            f.amplitude_sigma.push_back(null_to_nan(g.at("amplitude_sigma")));
            f.group_active.push_back(g.at("active").get<bool>());
        }
        f.chi2 = j.at("chi2").get<double>();
        f.chi2_reduced = j.at("chi2_reduced").get<double>();
        f.dof = j.at("dof").get<int>();
        f.converged = j.at("converged").get<bool>();
        f.registration_scale = j.at("registration_scale").get<double>();
        f.registration_shift = j.at("registration_shift").get<double>();
    } catch (const json::exception& ex) {
        throw IoError("fits/" + e.id + ".json: " + std::string(ex.what()));
    }
    if (static_cast<int>(f.positions.size()) != f.tmpl.n_peaks() ||
        static_cast<int>(f.amplitudes.size()) != f.tmpl.n_groups())
        throw IoError("fits/" + e.id + ".json does not match the configured peak template");
    return f;
}

struct FitSummary {
    std::string id;
    double chi2_reduced = 0.0;
    double runs_p = 1.0;
    bool converged = false;
};

inline std::vector<FitSummary> run_fit(const config::RunConfig& cfg, const fs::path& in, const fs::path& out) {
    std::vector<FitSummary> out_summary;
    for (const auto& e : read_manifest(in)) {
        const auto cs = read_spectrum(in, e, cfg);
        const auto model = fit_model_for(cfg, e);
        const auto f = specfit::fit_spectrum(cs, model);
        if (!f.converged) throw ConvergenceError("spectrum fit did not converge for " + e.id + ": " + f.message);
        io::write_json(out / "fits" / (e.id + ".json"), fit_to_json(e, f));
        // plot-ready: data, model, normalized residual
        const int n = cs.n_channels();
        std::vector<double> x(n), tt(n);
        for (int c = 0; c < n; ++c) {
            x[c] = c;
            tt[c] = specgen::channel_coordinate(c, n);
        }
        const auto mu = specfit::model_counts(x, tt, f.layout, f.params);
        io::Table t{{"channel", "counts", "model", "normalized_residual"}, {}};
        for (int c = 0; c < n; ++c)
            t.rows.push_back({static_cast<double>(c), static_cast<double>(cs.counts[c]), mu[c], f.residuals[c]});
        io::write_csv(out / "fits" / (e.id + ".csv"), t);
        out_summary.push_back({e.id, f.chi2_reduced, f.runs.p_clustered, f.converged});
    }
    return out_summary;
}

// ---------------------------------------------------------------------------
// calibrate

inline json calib_to_json(const calib::CalibrationResult& c) {
    return {{"slope_mm_s_per_channel", c.slope},
            {"intercept_mm_s", c.intercept},
            {"slope_sigma", c.slope_sigma},
            {"intercept_sigma", c.intercept_sigma},
            {"slope_intercept_cov", c.slope_intercept_cov},
            {"n_lines", c.n_lines},
            {"rms_mm_s", c.rms_mm_s},
            {"rms_unweighted_mm_s", c.rms_unweighted_mm_s},
            {"chi2", c.chi2},
            {"birge_ratio", c.birge_ratio},
            {"quadratic_coeff", c.quadratic_coeff},
            {"quadratic_z", c.quadratic_z},
            {"quadratic_p", c.quadratic_p},
            {"linear_ok", c.linear_ok},
            {"gate_passed", c.gate_passed},
            {"matched_peaks", c.matched_peaks},
            {"channels", c.channels},
            {"reference_velocities_mm_s", c.reference_velocities},
            {"residuals_mm_s", c.residuals_mm_s},
            {"residual_sigma_mm_s", c.residual_sigma_mm_s}};
}

inline calib::CalibrationResult calib_from_json(const json& j, const std::string& id) {
    calib::CalibrationResult c;
    try {
        c.slope = j.at("slope_mm_s_per_channel").get<double>();
        c.intercept = j.at("intercept_mm_s").get<double>();
        c.slope_sigma = j.at("slope_sigma").get<double>();
        c.intercept_sigma = j.at("intercept_sigma").get<double>();
        c.slope_intercept_cov = j.at("slope_intercept_cov").get<double>();
        c.n_lines = j.at("n_lines").get<int>();
        c.rms_mm_s = j.at("rms_mm_s").get<double>();
        c.linear_ok = j.at("linear_ok").get<bool>();
        c.gate_passed = j.at("gate_passed").get<bool>();
    } catch (const json::exception& ex) {
        throw IoError("calib/" + id + ".json: " + std::string(ex.what()));
    }
    return c;
}

inline json drift_to_json(const calib::DriftReport& d) {
    return {{"relative_drift", d.relative_drift}, {"z", d.z},
            {"max_relative_drift", d.max_relative_drift}, {"max_z", d.max_z},
            {"detected", d.detected}, {"within_tolerance", d.within_tolerance}};
}

inline json run_calibrate(const config::RunConfig& cfg, const fs::path& in, const fs::path& out) {
    const auto entries = read_manifest(in);
    const auto scheme = cfg.hyperfine();
    const double spacing = cfg.sideband_spacing();
    std::map<std::string, std::vector<calib::CalibrationResult>> series;
    json summary;
    summary["sideband_spacing_mm_s"] = spacing;
    summary["spectra"] = json::array();
    for (const auto& e : entries) {
        const auto f = fit_from_json(io::read_json(in / "fits" / (e.id + ".json")), cfg, e);
        const auto c = calib::calibrate(f, cfg.scan_params(e.direction), scheme, spacing, cfg.calibration.options);
        io::write_json(out / "calib" / (e.id + ".json"), calib_to_json(c));
        series[e.direction].push_back(c);
        summary["spectra"].push_back({{"id", e.id}, {"slope", c.slope}, {"slope_sigma", c.slope_sigma},
                                      {"intercept", c.intercept}, {"rms_mm_s", c.rms_mm_s},
                                      {"gate_passed", c.gate_passed}, {"linear_ok", c.linear_ok}});
    }
    summary["drift"] = json::object();
    for (const auto& [dir, s] : series)
        if (s.size() >= 2)
            summary["drift"][dir] =
                drift_to_json(calib::detect_drift(s, cfg.calibration.drift_tolerance, cfg.calibration.drift_z));
    io::write_json(out / "calib" / "summary.json", summary);
    return summary;
}

// ---------------------------------------------------------------------------
// extract

struct ExtractedPoint {
    std::string id;
    std::string direction;
    double drive_power_W = 0.0;
    extract::SidebandPowers powers;  ///< covariance without the (a, b, c) term
    Eigen::Matrix3d intensity_jacobian = Eigen::Matrix3d::Zero();
};

inline json run_extract(const config::RunConfig& cfg, const fs::path& in, const fs::path& out) {
    const auto entries = read_manifest(in);
    const auto scheme = cfg.hyperfine();
    const auto full = peaks::build_peak_template(scheme, cfg.sideband_spacing(), 2, cfg.scan.v_min_mm_s,
                                                 cfg.scan.v_max_mm_s, cfg.fit.merge_tol_mm_s);
    const auto folded = extract::fold_template(full, scheme.centroid_mm_s());
    if (folded.pairs.size() != static_cast<std::size_t>(extract::kRows))
        throw ConfigError("extraction needs the 9 mirror pairs of the 18-peak pattern inside the scan window");
    const auto& e_cfg = cfg.extraction;

    struct Loaded {
        SpectrumEntry e;
        specfit::SpectrumFit fit;
        calib::CalibrationResult cal;
        specfit::NormalizedSpectrum norm;
    };
    auto load = [&](const SpectrumEntry& e) {
        Loaded l{e, fit_from_json(io::read_json(in / "fits" / (e.id + ".json")), cfg, e),
                 calib_from_json(io::read_json(in / "calib" / (e.id + ".json")), e.id), {}};
        l.norm = specfit::normalize_by_baseline(read_spectrum(in, e, cfg), l.fit);
        return l;
    };

    json doc;
    doc["directions"] = json::array();
    doc["points"] = json::array();
    io::Table csv{{"direction", "drive_power_W", "P0", "P0_sigma", "P1", "P1_sigma", "P2", "P2_sigma", "chi2"}, {}};
    for (std::size_t d = 0; d < cfg.scan.directions.size(); ++d) {
        const auto& dir = cfg.scan.directions[d];
        std::vector<SpectrumEntry> group;
        for (const auto& e : entries)
            if (e.direction == dir) group.push_back(e);
        if (group.empty()) continue;
        const auto zero = std::find_if(group.begin(), group.end(), [](const auto& e) { return e.drive_power_W == 0.0; });
        if (zero == group.end())
            throw ConfigError("extraction needs a zero-drive reference spectrum for direction " + dir);
        const auto z = load(*zero);
        extract::IntegrationOptions io_opt = e_cfg.integration;
        if (e_cfg.zero_drive_width) io_opt.fwhm_mm_s = z.fit.linewidth * std::abs(z.cal.slope);
        auto measure = [&](const Loaded& l) {
            return extract::measure_y(l.norm, l.fit, l.cal, full, folded, io_opt, e_cfg.subtract_neighbour_tails,
                                      e_cfg.baseline_covariance);
        };
        const auto li = e_cfg.intensity_source == "fit_amplitudes"
                            ? extract::intensities_from_zero_drive(z.fit, z.cal)
                            : extract::intensities_from_zero_drive_areas(measure(z));
        const Eigen::MatrixXd a = extract::build_overlap_matrix(li.value[0], li.value[1], li.value[2]);
        doc["directions"].push_back({{"direction", dir},
                                     {"reference", zero->id},
                                     {"intensities_abc", li.value},
                                     {"intensities_abc_sigma", li.sigma},
                                     {"integration_fwhm_mm_s", io_opt.fwhm_mm_s},
                                     {"overlap_matrix", io::to_json(a)}});
        for (const auto& e : group) {
            const auto l = e.id == zero->id ? z : load(e);
            const auto y = measure(l);
            auto p = extract::invert_with_covariance(y.y, y.covariance, a, e_cfg.weighted);
            p.drive_power_W = e.drive_power_W;
            const Eigen::Matrix3d jac = extract::intensity_jacobian(p, li);
            const Eigen::Matrix3d total = p.covariance + jac * extract::intensity_covariance(li) * jac.transpose();
            json truncated = json::array();
            for (bool t : y.truncated) truncated.push_back(t);
            doc["points"].push_back({{"id", e.id},
                                     {"direction", dir},
                                     {"drive_power_W", e.drive_power_W},
                                     {"p", io::to_json_vector(p.p)},
                                     {"covariance", io::to_json(p.covariance)},
                                     {"covariance_with_intensity_error", io::to_json(total)},
                                     {"intensity_jacobian", io::to_json(jac)},
                                     {"y", io::to_json_vector(y.y)},
                                     {"y_covariance", io::to_json(y.covariance)},
                                     {"truncated_windows", truncated},
                                     {"chi2", p.chi2},
                                     {"dof", extract::kRows - extract::kOrders}});
            csv.rows.push_back({static_cast<double>(d), e.drive_power_W, p.p(0), std::sqrt(total(0, 0)), p.p(1),
                                std::sqrt(total(1, 1)), p.p(2), std::sqrt(total(2, 2)), p.chi2});
        }
    }
    if (doc["points"].empty()) throw ConfigError("no spectra to extract");
    io::write_json(out / "extract" / "powers.json", doc);
    csv.header[0] = "direction_index";
    io::write_csv(out / "extract" / "powers.csv", csv);
    return doc;
}

// ---------------------------------------------------------------------------
// globalfit

struct GlobalReport {
    globalfit::GlobalFitResult fit;
    globalfit::CPerp c_perp;
    double k0_per_m = 0.0;
    double eta = 0.0;
    json doc;
    std::string summary_line;
};

inline GlobalReport run_globalfit(const config::RunConfig& cfg, const fs::path& in, const fs::path& out) {
    const json doc = io::read_json(in / "extract" / "powers.json");
    std::vector<globalfit::DataPoint> pts;
    std::vector<Eigen::Matrix3d> jac, intensity_cov;
    std::vector<std::string> dirs;
    std::map<std::string, Eigen::Matrix3d> cov_of_dir;
    try {
        for (const auto& d : doc.at("directions")) {
            Eigen::Matrix3d s = Eigen::Matrix3d::Zero();
            const auto sig = d.at("intensities_abc_sigma").get<std::array<double, 3>>();
            for (int k = 0; k < 3; ++k) s(k, k) = sig[k] * sig[k];
            cov_of_dir[d.at("direction").get<std::string>()] = s;
        }
        for (const auto& p : doc.at("points")) {
            const double w = p.at("drive_power_W").get<double>();
            bool excluded = false;
            for (double x : cfg.globalfit.exclude_powers_W)
                if (std::abs(x - w) <= 1e-9 * std::max(1.0, std::abs(x))) excluded = true;
            if (excluded) continue;
            const std::string dir = p.at("direction").get<std::string>();
            globalfit::DataPoint dp;
            dp.drive_power_W = w;
            dp.p = io::vector_from_json(p.at("p"), "p");
            const bool joint = cfg.globalfit.joint_covariance;
            dp.covariance = io::matrix_from_json(p.at(joint ? "covariance" : "covariance_with_intensity_error"), "cov");
            pts.push_back(dp);
            jac.push_back(io::matrix_from_json(p.at("intensity_jacobian"), "jacobian"));
            dirs.push_back(dir);
        }
    } catch (const json::exception& ex) {
        throw IoError("extract/powers.json: " + std::string(ex.what()));
    }
    Eigen::MatrixXd joint;
    if (cfg.globalfit.joint_covariance) {
        const auto n = static_cast<Eigen::Index>(pts.size());
        joint = Eigen::MatrixXd::Zero(3 * n, 3 * n);
        for (Eigen::Index i = 0; i < n; ++i) {
            joint.block<3, 3>(3 * i, 3 * i) += pts[i].covariance;
            for (Eigen::Index k = 0; k < n; ++k)
                if (dirs[i] == dirs[k])
                    joint.block<3, 3>(3 * i, 3 * k) += jac[i] * cov_of_dir.at(dirs[i]) * jac[k].transpose();
        }
    }
    GlobalReport rep;
    rep.fit = globalfit::fit_global(pts, cfg.globalfit.options, cfg.globalfit.joint_covariance ? &joint : nullptr);
    if (!rep.fit.converged) throw ConvergenceError("global fit did not converge: " + rep.fit.message);
    rep.k0_per_m = cfg.constants().photon_wavenumber_per_m;
    rep.eta = cfg.modulation.eta;
    rep.c_perp = globalfit::extract_c_perp(rep.fit.m, rep.fit.m_sigma, rep.eta, rep.k0_per_m);

    const auto& f = rep.fit;
    json j;
    j["m_per_sqrt_W"] = f.m;
    j["m_sigma"] = f.m_sigma;
    j["alpha"] = f.alpha;
    j["alpha_sigma"] = nan_to_null(f.alpha_sigma);
    j["norm"] = f.norm;
    j["norm_sigma"] = f.norm_sigma;
    j["covariance_m_alpha_norm"] = io::to_json(f.covariance);
    j["covariance_ok"] = f.covariance_ok;
    j["chi2"] = f.chi2;
    j["dof"] = f.dof;
    j["chi2_reduced"] = f.chi2_reduced;
    j["alpha_at_boundary"] = f.alpha_at_boundary;
    j["converged"] = f.converged;
    j["iterations"] = f.iterations;
    j["message"] = f.message;
    j["joint_covariance"] = cfg.globalfit.joint_covariance;
    j["n_points"] = static_cast<int>(f.residuals.size()) / static_cast<int>(cfg.globalfit.options.orders.size());
    j["c_perp_m_per_sqrt_W"] = rep.c_perp.value;
    j["c_perp_sigma"] = rep.c_perp.sigma;
    j["eta"] = rep.eta;
    j["k0_per_m"] = rep.k0_per_m;
    json res = json::array();
    io::Table pcsv{{"drive_power_W", "x_sqrt_W", "order", "observed", "predicted", "sigma", "normalized_residual"}, {}};
    for (const auto& r : f.residuals) {
        res.push_back({{"drive_power_W", r.drive_power_W}, {"order", r.order}, {"observed", r.observed},
                       {"predicted", r.predicted}, {"sigma", r.sigma}, {"normalized", r.normalized}});
        pcsv.rows.push_back({r.drive_power_W, std::sqrt(r.drive_power_W), static_cast<double>(r.order), r.observed,
                             r.predicted, r.sigma, r.normalized});
    }
    j["residuals"] = res;
    rep.doc = j;

    double x_max = 0.0;
    for (const auto& p : pts) x_max = std::max(x_max, p.x());
    io::Table curves{{"x_sqrt_W", "drive_power_W", "P0", "P1", "P2"}, {}};
    const int n_curve = 201;
    for (int i = 0; i < n_curve; ++i) {
        const double x = 1.1 * x_max * i / (n_curve - 1);
        curves.rows.push_back({x, x * x, globalfit::model_prediction(0, x, f.m, f.alpha, f.norm),
                               globalfit::model_prediction(1, x, f.m, f.alpha, f.norm),
                               globalfit::model_prediction(2, x, f.m, f.alpha, f.norm)});
    }
    char line[256];
    std::snprintf(line, sizeof line,
                  "C_perp = %.3e +- %.1e m/sqrt(W)  (m = %.4f +- %.4f, alpha = %.4f +- %.4f, chi2_nu = %.3f)",
                  rep.c_perp.value, rep.c_perp.sigma, f.m, f.m_sigma, f.alpha, f.alpha_sigma, f.chi2_reduced);
    rep.summary_line = line;
    j["summary"] = rep.summary_line;
    rep.doc = j;
    io::write_json(out / "globalfit" / "report.json", j);
    io::write_csv(out / "globalfit" / "curves.csv", curves);
    io::write_csv(out / "globalfit" / "points.csv", pcsv);
    return rep;
}

// ---------------------------------------------------------------------------
// IDT

inline json run_idt_model(const config::RunConfig& cfg, const fs::path& out) {
    const auto& d = cfg.idt.design;
    const auto c = idt::derive_eta_alpha(d);
    const auto sweep = idt::device_sweep(d, cfg.idt.f_lo_Hz, cfg.idt.f_hi_Hz, cfg.idt.points);
    io::Table t{{"f_Hz", "s11_re", "s11_im", "s12_re", "s12_im", "s11_dB", "s12_dB"}, {}};
    double max_s12 = 0.0, max_s11 = 0.0;
    for (const auto& s : sweep) {
        max_s12 = std::max(max_s12, std::abs(s.s12));
        max_s11 = std::max(max_s11, std::abs(s.s11));
        t.rows.push_back({s.freq / (2.0 * std::numbers::pi), s.s11.real(), s.s11.imag(), s.s12.real(), s.s12.imag(),
                          20.0 * std::log10(std::abs(s.s11)), 20.0 * std::log10(std::abs(s.s12))});
    }
    json j = {{"eta", c.eta},
              {"alpha", c.alpha},
              {"eta_complex", {c.eta_complex.real(), c.eta_complex.imag()}},
              {"alpha_complex", {c.alpha_complex.real(), c.alpha_complex.imag()}},
              {"max_abs_s12", max_s12},
              {"max_abs_s11", max_s11},
              {"passive", max_s12 <= 1.0 && max_s11 <= 1.0}};
    io::write_json(out / "idt" / "model.json", j);
    io::write_csv(out / "idt" / "sweep.csv", t);
    return j;
}

inline std::vector<idt::SParams> read_traces(const fs::path& path) {
    const auto t = io::read_csv(path);
    const auto f = t.values("f_Hz"), a = t.values("s11_re"), b = t.values("s11_im"), c = t.values("s12_re"),
               d = t.values("s12_im");
    std::vector<idt::SParams> out;
    for (std::size_t i = 0; i < f.size(); ++i) {
        idt::SParams s;
        s.freq = 2.0 * std::numbers::pi * f[i];
        s.s11 = {a[i], b[i]};
        s.s12 = {c[i], d[i]};
        s.s22 = s.s11;
        out.push_back(s);
    }
    return out;
}

inline void write_traces(const fs::path& path, std::span<const idt::SParams> tr) {
    io::Table t{{"f_Hz", "s11_re", "s11_im", "s12_re", "s12_im"}, {}};
    for (const auto& s : tr)
        t.rows.push_back({s.freq / (2.0 * std::numbers::pi), s.s11.real(), s.s11.imag(), s.s12.real(), s.s12.imag()});
    io::write_csv(path, t);
}

inline json run_idt_fit(const config::RunConfig& cfg, const fs::path& out) {
    std::vector<idt::SParams> traces;
    std::string source;
    if (!cfg.idt.trace_file.empty()) {
        traces = read_traces(cfg.idt.trace_file);
        source = cfg.idt.trace_file;
    } else {
        rng::Stream rs(cfg.seed, 9000);
        traces = idt::synthesize_traces(cfg.idt.design, cfg.idt.f_lo_Hz, cfg.idt.f_hi_Hz, cfg.idt.points,
                                        cfg.idt.relative_noise, rs);
        write_traces(out / "idt" / "traces.csv", traces);
        source = "synthesized from config.idt";
    }
    // start from the literature defaults with the configured geometry
    idt::IdtDesign init;
    init.n_periods = cfg.idt.design.n_periods;
    init.aperture_m = cfg.idt.design.aperture_m;
    init.wavelength_m = cfg.idt.design.wavelength_m;
    init.center_angular_freq = cfg.idt.design.center_angular_freq;
    init.source_Z_ohm = cfg.idt.design.source_Z_ohm;
    idt::IdtFitOptions opt;
    opt.relative_noise = cfg.idt.relative_noise;
    const auto rep = idt::fit_sparam_traces(traces, init, opt);
    if (!rep.converged) throw ConvergenceError("IDT trace fit did not converge: " + rep.message);
    const auto c = idt::derive_eta_alpha(rep.design);
    const auto ce = idt::eta_alpha_errors(rep);
    const char* names[] = {"coupling_k2", "cap_per_period_F_per_m", "shunt_R_ohm", "propagation_loss",
                           "center_frequency_Hz"};
    json params = json::object();
    for (int k = 0; k < idt::kIdtFitParams; ++k) {
        double v = rep.values[k], s = rep.std_errors[k];
        if (k == 4) {
            v /= 2.0 * std::numbers::pi;
            s /= 2.0 * std::numbers::pi;
        }
        params[names[k]] = {{"value", v}, {"sigma", nan_to_null(s)}};
    }
    json j = {{"source", source},
              {"n_points", rep.n_points},
              {"parameters", params},
              {"propagation_loss_dB", 20.0 * std::log10(rep.design.propagation_loss)},
              {"chi2", rep.chi2},
              {"chi2_reduced", rep.chi2_reduced},
              {"converged", rep.converged},
              {"iterations", rep.iterations},
              {"message", rep.message},
              {"eta", c.eta},
              {"eta_sigma", nan_to_null(ce.eta_sigma)},
              {"alpha", c.alpha},
              {"alpha_sigma", nan_to_null(ce.alpha_sigma)}};
    io::write_json(out / "idt" / "fit.json", j);
    return j;
}

} // namespace mossfloq::pipeline
