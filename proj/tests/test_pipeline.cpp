#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "mossfloq/config.hpp"
#include "mossfloq/io.hpp"
#include "mossfloq/pipeline.hpp"
#include "mossfloq/rng.hpp"

using namespace mossfloq;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kSource = MOSSFLOQ_SOURCE_DIR;

// fresh scratch directory per test
fs::path scratch(const std::string& name) {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    const fs::path p = fs::temp_directory_path() / "mossfloq_tests" / (std::string(info->name()) + "_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

fs::path copy_fixture(const std::string& fixture, const std::string& name) {
    const fs::path dir = scratch(name);
    fs::copy(kSource / "data" / "fixtures" / fixture, dir, fs::copy_options::recursive);
    return dir;
}

bool same_bytes(const fs::path& a, const fs::path& b) { return io::read_text(a) == io::read_text(b); }

} // namespace

TEST(Config, JsonRoundTrip) {
    const json a = config::to_json(config::RunConfig{});
    EXPECT_EQ(config::to_json(config::from_json(a)), a);
}

TEST(Config, BundledDefaultConfigMatchesTheBuiltIns) {
    auto cfg = config::load((kSource / "configs" / "default.json").string());
    EXPECT_EQ(cfg.output_dir, "run/default");
    cfg.output_dir = config::RunConfig{}.output_dir;
    EXPECT_EQ(config::to_json(cfg), config::to_json(config::RunConfig{}));
}

TEST(Config, UnknownKeysAreRejected) {
    EXPECT_THROW(config::from_json(json{{"sead", 1}}), ConfigError);
    EXPECT_THROW(config::from_json(json{{"modulation", {{"alfa", 0.3}}}}), ConfigError);
    EXPECT_THROW(config::from_json(json{{"budget", {{"duration", 1.0}}}}), ConfigError);
    EXPECT_NO_THROW(config::from_json(json::object()));
}

TEST(Config, TypeAndRangeErrors) {
    EXPECT_THROW(config::from_json(json{{"seed", "x"}}), ConfigError);
    EXPECT_THROW(config::from_json(json{{"modulation", {{"alpha", 1.0}}}}), ConfigError);
    EXPECT_THROW(config::from_json(json{{"scan", {{"directions", json::array()}}}}), ConfigError);
    EXPECT_THROW(config::from_json(json{{"synth", {{"grid_points", 0}, {"include_zero_drive", false}}}}), ConfigError);
    EXPECT_THROW(config::from_json(json::array()), ConfigError);
}

TEST(Config, DrivePowerGridIsLogSpacedInModulationIndex) {
    const config::RunConfig cfg;
    const auto p = cfg.drive_powers();
    ASSERT_EQ(p.size(), 8u);
    const double m = cfg.modulation.m_per_sqrt_W;
    EXPECT_NEAR(m * std::sqrt(p.front()), 0.3, 1e-12);
    EXPECT_NEAR(m * std::sqrt(p.back()), 5.0, 1e-12);
    for (std::size_t i = 1; i + 1 < p.size(); ++i)
        EXPECT_NEAR(p[i] / p[i - 1], p[i + 1] / p[i], 1e-12);
}

TEST(Config, RelativeTraceFileResolvesNextToTheConfig) {
    const auto cfg = config::load((kSource / "configs" / "idt_fixture.json").string());
    EXPECT_TRUE(fs::exists(cfg.idt.trace_file)) << cfg.idt.trace_file;
}

TEST(Io, CsvRoundTripIsExact) {
    rng::Stream rs(11);
    io::Table t{{"a", "b"}, {}};
    for (int i = 0; i < 200; ++i) t.rows.push_back({rs.normal() * std::pow(10.0, i % 40 - 20), rs.uniform01()});
    t.rows.push_back({0.1, -0.0});
    const fs::path f = scratch("csv") / "t.csv";
    io::write_csv(f, t);
    const auto back = io::read_csv(f);
    EXPECT_EQ(back.header, t.header);
    ASSERT_EQ(back.rows.size(), t.rows.size());
    for (std::size_t i = 0; i < t.rows.size(); ++i)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_EQ(back.rows[i][j], t.rows[i][j]);
    EXPECT_FALSE(fs::exists(f.string() + ".tmp"));
}

TEST(Io, MalformedInputsAreIoErrors) {
    const fs::path d = scratch("bad");
    io::write_atomic(d / "short.csv", "x,y\n1,2\n3\n");
    io::write_atomic(d / "text.csv", "x,y\n1,abc\n");
    io::write_atomic(d / "empty.csv", "");
    io::write_atomic(d / "bad.json", "{\"a\": ");
    EXPECT_THROW(io::read_csv(d / "short.csv"), IoError);
    EXPECT_THROW(io::read_csv(d / "text.csv"), IoError);
    EXPECT_THROW(io::read_csv(d / "empty.csv"), IoError);
    EXPECT_THROW(io::read_csv(d / "missing.csv"), IoError);
    EXPECT_THROW(io::read_json(d / "bad.json"), IoError);
}

TEST(Pipeline, SynthReproducesTheBundledFixtures) {
    const fs::path out = scratch("synth");
    const auto entries = pipeline::run_synth(config::RunConfig{}, out);
    EXPECT_EQ(entries.size(), 18u);
    const fs::path fx = kSource / "data" / "fixtures" / "default_grid" / "spectra";
    int n = 0;
    for (const auto& e : fs::directory_iterator(fx)) {
        EXPECT_TRUE(same_bytes(e.path(), out / "spectra" / e.path().filename())) << e.path();
        ++n;
    }
    EXPECT_EQ(n, 19);
}

TEST(Pipeline, ZeroPowerFixtureFitsASextet) {
    const auto cfg = config::load((kSource / "configs" / "zero_power.json").string());
    const fs::path dir = copy_fixture("zero_power", "zp");
    const auto fits = pipeline::run_fit(cfg, dir, dir);
    ASSERT_EQ(fits.size(), 2u);
    for (const auto& f : fits) {
        const json j = io::read_json(dir / "fits" / (f.id + ".json"));
        int active = 0;
        for (const auto& p : j.at("peaks")) active += p.at("active").get<bool>();
        EXPECT_EQ(active, 6) << f.id;
        EXPECT_EQ(j.at("template_max_order").get<int>(), 0);
    }
}

TEST(Pipeline, TruncatedSpectrumIsAnInputError) {
    const config::RunConfig cfg;
    const fs::path dir = copy_fixture("default_grid", "trunc");
    const fs::path f = dir / "spectra" / "acc_03.csv";
    const std::string text = io::read_text(f);
    io::write_atomic(f, text.substr(0, text.size() / 2));
    EXPECT_THROW(pipeline::run_fit(cfg, dir, dir), IoError);
    fs::remove(dir / "spectra" / "acc_03.csv");
    EXPECT_THROW(pipeline::run_fit(cfg, dir, dir), IoError);
}

TEST(Pipeline, MissingUpstreamOutputsAreInputErrors) {
    const config::RunConfig cfg;
    const fs::path dir = copy_fixture("default_grid", "missing");
    EXPECT_THROW(pipeline::run_calibrate(cfg, dir, dir), IoError);
    EXPECT_THROW(pipeline::run_globalfit(cfg, dir, dir), IoError);
}

TEST(Pipeline, BundledFixturesGiveTheFullReportAndRerunBitExactly) {
    const config::RunConfig cfg;
    const fs::path dir = copy_fixture("default_grid", "full");
    pipeline::run_fit(cfg, dir, dir);
    pipeline::run_calibrate(cfg, dir, dir);
    pipeline::run_extract(cfg, dir, dir);
    const auto rep = pipeline::run_globalfit(cfg, dir, dir);
    const json j = io::read_json(dir / "globalfit" / "report.json");
    for (const char* k : {"m_per_sqrt_W", "m_sigma", "alpha", "alpha_sigma", "c_perp_m_per_sqrt_W", "c_perp_sigma"}) {
        ASSERT_TRUE(j.at(k).is_number()) << k;
        EXPECT_GT(j.at(k).get<double>(), 0.0) << k;
    }
    EXPECT_EQ(rep.summary_line.rfind("C_perp = ", 0), 0u);
    EXPECT_EQ(j.at("summary").get<std::string>(), rep.summary_line);

    // delete the intermediates and regenerate them
    const fs::path keep = scratch("keep");
    for (const char* sub : {"fits", "calib", "extract", "globalfit"}) fs::copy(dir / sub, keep / sub, fs::copy_options::recursive);
    for (const char* sub : {"fits", "calib", "extract", "globalfit"}) fs::remove_all(dir / sub);
    pipeline::run_fit(cfg, dir, dir);
    pipeline::run_calibrate(cfg, dir, dir);
    pipeline::run_extract(cfg, dir, dir);
    pipeline::run_globalfit(cfg, dir, dir);
    int n = 0;
    for (const auto& e : fs::recursive_directory_iterator(keep)) {
        if (!e.is_regular_file()) continue;
        ++n;
        EXPECT_TRUE(same_bytes(e.path(), dir / fs::relative(e.path(), keep))) << e.path();
    }
    EXPECT_GT(n, 50);
}

TEST(Pipeline, IdtTraceFixtureGivesTheDriveCoefficients) {
    const auto cfg = config::load((kSource / "configs" / "idt_fixture.json").string());
    const fs::path out = scratch("idt");
    const json j = pipeline::run_idt_fit(cfg, out);
    EXPECT_FALSE(fs::exists(out / "idt" / "traces.csv")); // read, not synthesized
    const auto truth = idt::derive_eta_alpha(idt::fitted_device_preset());
    const double eta = j.at("eta").get<double>(), alpha = j.at("alpha").get<double>();
    EXPECT_NEAR(eta, truth.eta, 3.0 * j.at("eta_sigma").get<double>());
    EXPECT_NEAR(alpha, truth.alpha, 3.0 * j.at("alpha_sigma").get<double>());
    EXPECT_NEAR(eta, 0.35, 0.01);
    EXPECT_NEAR(alpha, 0.34, 0.01);
}

TEST(Pipeline, IdtModelReportsThePresetCoefficients) {
    const json j = pipeline::run_idt_model(config::RunConfig{}, scratch("model"));
    EXPECT_NEAR(j.at("eta").get<double>(), 0.35, 0.01);
    EXPECT_NEAR(j.at("alpha").get<double>(), 0.34, 0.01);
    EXPECT_LE(j.at("max_abs_s12").get<double>(), 1.0);
}
