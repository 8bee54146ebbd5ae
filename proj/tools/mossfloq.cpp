// mossfloq: batch front-end for the sideband reduction pipeline.
//
// Exit codes: 0 success, 1 internal error, 2 configuration error, 3 convergence failure,
// 4 I/O error. Failures print a JSON error document on stderr and, when the
// output directory is writable, leave it in <out-dir>/error.json.

#include <CLI11.hpp>

#include <cstdio>
#include <functional>
#include <iostream>
#include <string>

#include "mossfloq/config.hpp"
#include "mossfloq/errors.hpp"
#include "mossfloq/io.hpp"
#include "mossfloq/pipeline.hpp"

using namespace mossfloq;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config_path;
    std::string out_dir;  // defaults to config.output_dir
    std::string in_dir;  // defaults to out_dir
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool dry_run = false;
};

void add_common(CLI::App* sub, Common& c) {
    sub->add_option("--config", c.config_path, "run configuration (JSON); defaults apply when omitted");
    sub->add_option("--out-dir", c.out_dir, "output directory (default: config output_dir, \"run\")");
    sub->add_option("--in-dir", c.in_dir, "directory holding the upstream stage outputs (default: --out-dir)");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&c](std::uint64_t s) { c.seed = s, c.seed_set = true; }, "overrides config.seed");
    sub->add_flag("--dry-run", c.dry_run, "print the resolved configuration and exit");
}

int exit_code_for(const std::exception_ptr& ep, std::string& kind, std::string& msg) {
    try {
        std::rethrow_exception(ep);
    } catch (const ConfigError& e) {
        kind = "config";
        msg = e.what();
        return 2;
    } catch (const DomainError& e) {
        kind = "config";
        msg = e.what();
        return 2;
    } catch (const ConvergenceError& e) {
        kind = "convergence";
        msg = e.what();
        return 3;
    } catch (const RankError& e) {
        kind = "convergence";
        msg = e.what();
        return 3;
    } catch (const IoError& e) {
        kind = "io";
        msg = e.what();
        return 4;
    } catch (const fs::filesystem_error& e) {
        kind = "io";
        msg = e.what();
        return 4;
    } catch (const std::exception& e) {
        kind = "internal";
        msg = e.what();
        return 1;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"mossfloq: Floquet sideband analysis of SAW-driven Moessbauer spectra"};
    app.require_subcommand(1);
    Common common;

    struct Cmd {
        const char* name;
        const char* help;
        std::function<void(const config::RunConfig&, const fs::path&, const fs::path&)> run;
    };
    const std::vector<Cmd> cmds{
        {"synth", "synthesize count spectra for the configured drive-power grid",
         [](const config::RunConfig& cfg, const fs::path&, const fs::path& out) {
             const auto e = pipeline::run_synth(cfg, out);
             std::printf("synth: %zu spectra -> %s\n", e.size(), (out / "spectra").string().c_str());
         }},
        {"fit", "fit the peak template to every spectrum",
         [](const config::RunConfig& cfg, const fs::path& in, const fs::path& out) {
             for (const auto& s : pipeline::run_fit(cfg, in, out))
                 std::printf("fit: %s chi2_nu %.3f runs p(clustered) %.3f\n", s.id.c_str(), s.chi2_reduced, s.runs_p);
         }},
        {"calibrate", "calibrate the velocity axis of every fitted spectrum and check drift",
         [](const config::RunConfig& cfg, const fs::path& in, const fs::path& out) {
             const auto s = pipeline::run_calibrate(cfg, in, out);
             for (const auto& x : s["spectra"])
                 std::printf("calibrate: %s slope %.6e +- %.1e mm/s/ch rms %.4f mm/s\n",
                             x["id"].get<std::string>().c_str(), x["slope"].get<double>(),
                             x["slope_sigma"].get<double>(), x["rms_mm_s"].get<double>());
             for (const auto& [dir, d] : s["drift"].items())
                 std::printf("calibrate: %s drift max %.4f (max z %.2f)%s\n", dir.c_str(),
                             d["max_relative_drift"].get<double>(), d["max_z"].get<double>(),
                             d["detected"].get<bool>() ? " DETECTED" : "");
         }},
        {"extract", "integrate windows and invert for sideband powers P0..P2",
         [](const config::RunConfig& cfg, const fs::path& in, const fs::path& out) {
             const auto d = pipeline::run_extract(cfg, in, out);
             for (const auto& p : d["points"])
                 std::printf("extract: %s P = %.4f %.4f %.4f chi2 %.2f\n", p["id"].get<std::string>().c_str(),
                             p["p"][0].get<double>(), p["p"][1].get<double>(), p["p"][2].get<double>(),
                             p["chi2"].get<double>());
         }},
        {"globalfit", "global fit of (m, alpha) and the C_perp summary",
         [](const config::RunConfig& cfg, const fs::path& in, const fs::path& out) {
             const auto r = pipeline::run_globalfit(cfg, in, out);
             std::printf("%s\n", r.summary_line.c_str());
         }},
        {"idt-model", "IDT S-parameter sweep and derived eta, alpha",
         [](const config::RunConfig& cfg, const fs::path&, const fs::path& out) {
             const auto j = pipeline::run_idt_model(cfg, out);
             std::printf("idt-model: eta %.4f alpha %.4f max|S12| %.4f\n", j["eta"].get<double>(),
                         j["alpha"].get<double>(), j["max_abs_s12"].get<double>());
         }},
        {"idt-fit", "fit the IDT model to |S11|, |S12| traces",
         [](const config::RunConfig& cfg, const fs::path&, const fs::path& out) {
             const auto j = pipeline::run_idt_fit(cfg, out);
             std::printf("idt-fit: eta %.4f +- %.4f alpha %.4f +- %.4f chi2_nu %.3f\n", j["eta"].get<double>(),
                         j["eta_sigma"].is_number() ? j["eta_sigma"].get<double>() : NAN, j["alpha"].get<double>(),
                         j["alpha_sigma"].is_number() ? j["alpha_sigma"].get<double>() : NAN,
                         j["chi2_reduced"].get<double>());
         }},
    };

    std::string chosen;
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        add_common(sub, common);
        sub->callback([&chosen, name = c.name] { chosen = name; });
    }
    auto* all = app.add_subcommand("pipeline", "run synth, fit, calibrate, extract, globalfit in sequence");
    add_common(all, common);
    all->callback([&chosen] { chosen = "pipeline"; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    fs::path out = common.out_dir.empty() ? fs::path("run") : fs::path(common.out_dir);
    try {
        auto cfg = config::load(common.config_path);
        if (common.seed_set) cfg.seed = common.seed;
        if (common.out_dir.empty()) out = cfg.output_dir;
        else cfg.output_dir = common.out_dir;
        const fs::path in = common.in_dir.empty() ? out : fs::path(common.in_dir);
        const auto resolved = config::to_json(cfg);
        if (common.dry_run) {
            std::cout << resolved.dump(2) << "\n";
            return 0;
        }
        io::write_json(out / "config.resolved.json", resolved);
        if (chosen == "pipeline") {
            for (const char* stage : {"synth", "fit", "calibrate", "extract", "globalfit"})
                for (const auto& c : cmds)
                    if (c.name == std::string(stage)) c.run(cfg, out, out);
        } else {
            for (const auto& c : cmds)
                if (c.name == chosen) c.run(cfg, in, out);
        }
        return 0;
    } catch (...) {
        std::string kind, msg;
        const int rc = exit_code_for(std::current_exception(), kind, msg);
        const nlohmann::json err = {
            {"status", "error"}, {"kind", kind}, {"exit_code", rc}, {"command", chosen}, {"message", msg}};
        std::cerr << err.dump() << "\n";
        try {
            io::write_json(out / "error.json", err);
        } catch (...) {
        }
        return rc;
    }
}
