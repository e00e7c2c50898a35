#include "pfstab/csv.hpp"
#include "pfstab/pipeline.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;
using namespace pfstab;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("pfstab_test_" + name);
    fs::remove_all(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

PipelineConfig small_logistic(const fs::path& out) {
    PipelineConfig c = preset_config("cubic_logistic");
    c.name = "small_logistic";
    c.grid = ControlGrid::range(-0.2, 0.1, 0.2);
    c.dictionary.k_centers = 24;
    c.dictionary.sigma = 0.08;
    c.data = {300, 10, 3, {}};
    c.simulation.n_random = 10;
    c.simulation.horizon = 30;
    c.simulation.converge_radius = 0.15;
    c.output_dir = out;
    return c;
}

// One bundle shared by the tests that only read it.
const RunSummary& shared_run() {
    static const RunSummary run = run_pipeline(small_logistic(scratch("shared_bundle")));
    return run;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(PFSTAB_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(Config, JsonRoundTripForEveryPreset) {
    for (const auto& name : preset_names()) {
        const PipelineConfig c = preset_config(name);
        const std::string text = config_to_json(c);
        const PipelineConfig back = config_from_json(text);
        EXPECT_EQ(config_to_json(back), text) << name;
        EXPECT_EQ(config_hash(back), config_hash(c)) << name;
    }
}

TEST(Config, PresetParameters) {
    const PipelineConfig log = preset_config("cubic_logistic");
    EXPECT_EQ(log.grid.size(), 21);
    EXPECT_EQ(log.dictionary.k_centers, 200);
    EXPECT_EQ(log.dictionary.sigma, 0.008);
    EXPECT_EQ(log.system.param("lambda"), 2.3);
    EXPECT_EQ(preset_config("duffing").grid.size(), 17);
    EXPECT_EQ(preset_config("double_well").grid.size(), 21);
    const PipelineConfig sm = preset_config("standard_map");
    EXPECT_EQ(sm.grid.size(), 51);
    EXPECT_EQ(sm.stabilization.targets.size(), 2u);
    EXPECT_FALSE(sm.notes.empty());
    try {
        preset_config("lorenz");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
    }
}

TEST(Config, HashTracksSemanticFields) {
    const PipelineConfig base = preset_config("duffing");
    const std::string h = config_hash(base);
    PipelineConfig c = base;
    c.name = "other";
    c.output_dir = "/somewhere";
    c.notes.push_back("free text");
    EXPECT_EQ(config_hash(c), h);

    c = base;
    c.stabilization.gamma = 1.02;
    EXPECT_NE(config_hash(c), h);
    c = base;
    c.data.seed = 2;
    EXPECT_NE(config_hash(c), h);
    c = base;
    c.dictionary.sigma = 0.21;
    EXPECT_NE(config_hash(c), h);
    c = base;
    c.simulation.horizon = 10;
    EXPECT_NE(config_hash(c), h);
}

TEST(Config, RejectsBadValuesBeforeWork) {
    const fs::path out = scratch("bad_sigma");
    PipelineConfig c = small_logistic(out);
    c.dictionary.sigma = 0.0;
    try {
        run_pipeline(c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
    }
    EXPECT_FALSE(fs::exists(out / "data"));

    EXPECT_THROW(config_from_json("{not json"), Error);
    std::string text = config_to_json(preset_config("duffing"));
    const std::string kind = "\"kind\": \"duffing\"";
    text.replace(text.find(kind), kind.size(), "\"kind\": \"pendulum\"");
    try {
        config_from_json(text);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnknownSystemKind);
    }
}

TEST(Rollouts, ConvergenceRule) {
    const ConvergenceRule rule{{Vector::Zero(1)}, 0.1, 3};
    auto traj = [](std::initializer_list<double> v) {
        std::vector<Vector> s;
        for (double x : v) s.push_back(Vector::Constant(1, x));
        return s;
    };
    EXPECT_EQ(first_converged_step(traj({0.5, 0.05, 0.2, 0.05, 0.01, 0.0}), rule), 3);
    EXPECT_FALSE(first_converged_step(traj({0.5, 0.05, 0.2, 0.3}), rule).has_value());
    EXPECT_EQ(first_converged_step(traj({0.0}), rule), 0);
}

TEST(Rollouts, OpenLoopDuffingGoesToTheRightWell) {
    const PipelineConfig c = preset_config("duffing");
    const ConvergenceRule rule{c.stabilization.targets, 0.15, 5};
    Vector x0(2);
    x0 << 1.5, 0.0;
    const RolloutRecord r = simulate_rollout(c.system, x0, 400, RolloutMode::OpenLoop, rule);
    EXPECT_LT((r.states.back() - Vector::Unit(2, 0)).norm(), 0.05);
    EXPECT_FALSE(r.converged);
    for (const auto& u : r.controls) EXPECT_EQ(u.norm(), 0.0);

    const RolloutRecord zero = simulate_rollout(c.system, x0, 0, RolloutMode::OpenLoop, rule);
    ASSERT_EQ(zero.states.size(), 1u);
    EXPECT_EQ(zero.states[0], x0);
    EXPECT_TRUE(zero.controls.empty());
}

TEST(Rollouts, CsvRoundTrip) {
    const PipelineConfig c = preset_config("duffing");
    const ConvergenceRule rule{c.stabilization.targets, 0.15, 5};
    const QuadraticCost cost{c.stabilization.targets, 1.0, 1.0};
    std::vector<RolloutRecord> recs;
    Vector x0(2);
    x0 << 0.3, -1.2;
    recs.push_back(simulate_rollout(c.system, x0, 25, RolloutMode::OpenLoop, rule, nullptr, nullptr, &cost));
    x0 << 0.01, 0.0;
    recs.push_back(simulate_rollout(c.system, x0, 10, RolloutMode::OpenLoop, rule, nullptr, nullptr, &cost));
    const fs::path path = scratch("rollouts") / "r.csv";
    write_rollouts(recs, path);
    const auto back = read_rollouts(path);
    ASSERT_EQ(back.size(), recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        EXPECT_EQ(back[i].mode, recs[i].mode);
        ASSERT_EQ(back[i].states.size(), recs[i].states.size());
        for (std::size_t t = 0; t < recs[i].states.size(); ++t) EXPECT_EQ(back[i].states[t], recs[i].states[t]);
        ASSERT_EQ(back[i].controls.size(), recs[i].controls.size());
        for (std::size_t t = 0; t < recs[i].costs.size(); ++t) EXPECT_EQ(back[i].costs[t], recs[i].costs[t]);
        EXPECT_EQ(back[i].converged, recs[i].converged);
        EXPECT_EQ(back[i].steps_to_converge, recs[i].steps_to_converge);
    }
}

TEST(Bundle, LayoutAndVerification) {
    const RunSummary& run = shared_run();
    const fs::path b = run.bundle;
    for (const char* f : {"manifest.json", "config.json", "theta.csv", "policy.csv", "certificate.json", "mu_bar.csv",
                          "verify.json", "dictionary/centers.csv", "dictionary/lambda.csv",
                          "rollouts/closed_loop.csv", "rollouts/open_loop.csv", "data/data_a1.csv"})
        EXPECT_TRUE(fs::exists(b / f)) << f;
    for (int a = 0; a < 5; ++a) EXPECT_TRUE(fs::exists(b / "operators" / pf_filename(a)));
    EXPECT_FALSE(fs::exists(b / "operators" / pf_filename(5)));

    EXPECT_TRUE(run.verification.pass);
    for (const auto& m : run.verification.markov) EXPECT_TRUE(m.pass);
    EXPECT_LE(run.verification.balance_residual, 1e-7);
    EXPECT_TRUE(run.synthesis.certificate.pass);
    EXPECT_LT(run.synthesis.certificate.spectral_radius, 1.0);

    const std::string cert = slurp(b / "certificate.json");
    EXPECT_NE(cert.find("spectral_radius_text"), std::string::npos);
    const std::string theta_head = slurp(b / "theta.csv").substr(0, 30);
    EXPECT_EQ(theta_head.rfind("basis_index,a1,a2,a3,a4,a5\n", 0), 0u) << theta_head;

    // re-verifying an intact bundle agrees with the run
    const VerifyReport again = verify_bundle(b);
    EXPECT_TRUE(again.pass);
    EXPECT_EQ(again.certificate.spectral_radius, run.verification.certificate.spectral_radius);
}

TEST(Bundle, ClosedLoopFromTheAttractorConvergesImmediately) {
    const RunSummary& run = shared_run();
    const PipelineConfig cfg = read_bundle_config(run.bundle);
    const RbfDictionary dict = read_dictionary(run.bundle / "dictionary");
    Policy pol = read_policy(run.bundle / "policy.csv", cfg.grid);
    pol.feedback_mode = cfg.stabilization.feedback_mode;
    const ConvergenceRule rule{cfg.stabilization.targets, cfg.converge_radius(), cfg.simulation.dwell};
    const RolloutRecord r = simulate_rollout(cfg.system, Vector::Zero(1), 10, RolloutMode::ClosedLoop, rule, &pol, &dict);
    EXPECT_TRUE(r.converged);
    EXPECT_EQ(r.steps_to_converge, 0);
}

TEST(Bundle, RerunIsByteIdentical) {
    const RunSummary& first = shared_run();
    const RunSummary second = run_pipeline(small_logistic(scratch("rerun_bundle")));
    EXPECT_EQ(first.config_hash, second.config_hash);
    for (const char* f : {"theta.csv", "policy.csv", "certificate.json", "mu_bar.csv", "operators/P_a3.csv"})
        EXPECT_EQ(slurp(first.bundle / f), slurp(second.bundle / f)) << f;
}

TEST(Bundle, CorruptedOperatorIsNamed) {
    const fs::path b = scratch("corrupt_bundle");
    fs::copy(shared_run().bundle, b, fs::copy_options::recursive);
    Matrix p = csv::read_matrix(b / "operators" / "P_a4.csv");
    p.col(2) *= 0.9;
    csv::write_matrix(p, b / "operators" / "P_a4.csv");
    const VerifyReport rep = verify_bundle(b);
    EXPECT_FALSE(rep.pass);
    EXPECT_EQ(rep.bad_actions, std::vector<int>({3}));
    EXPECT_NE(slurp(b / "verify.json").find("\"bad_actions\": [\n    4\n  ]"), std::string::npos);
    EXPECT_EQ(run_cli("verify " + b.string()), 4);
}

TEST(Bundle, MissingArtifactsAreListed) {
    const fs::path b = scratch("missing_bundle");
    fs::copy(shared_run().bundle, b, fs::copy_options::recursive);
    fs::remove(b / "operators" / "P_a2.csv");
    fs::remove(b / "policy.csv");
    try {
        verify_bundle(b);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MissingArtifact);
        const std::string what = e.what();
        EXPECT_NE(what.find("P_a2.csv"), std::string::npos);
        EXPECT_NE(what.find("policy.csv"), std::string::npos);
        EXPECT_EQ(what.find("P_a1.csv"), std::string::npos);
    }
}

TEST(Bundle, StagesRunIndividually) {
    const fs::path b = scratch("staged_bundle");
    const PipelineConfig cfg = small_logistic(b);
    stage_generate(cfg, b);
    EXPECT_EQ(read_bundle_config(b).data.n_traj, 300);
    stage_fit(b);
    const SynthesisReport syn = stage_synthesize(b);
    EXPECT_TRUE(syn.certificate.pass);
    const auto [closed, open] = stage_simulate(b);
    EXPECT_EQ(closed.size(), 10u);
    EXPECT_EQ(open.size(), 10u);
    EXPECT_EQ(slurp(b / "theta.csv"), slurp(shared_run().bundle / "theta.csv"));
}

TEST(Cli, ExitCodes) {
    const fs::path dir = scratch("cli");
    fs::create_directories(dir);
    PipelineConfig c = small_logistic(dir / "bundle");
    c.dictionary.sigma = -1.0;
    csv::write_text(dir / "bad.json", config_to_json(c));
    EXPECT_EQ(run_cli("run " + (dir / "bad.json").string()), 2);

    std::string text = config_to_json(small_logistic(dir / "bundle"));
    text.replace(text.find("\"cubic_logistic\""), 16, "\"van_der_pol\"");
    csv::write_text(dir / "unknown.json", text);
    EXPECT_EQ(run_cli("run " + (dir / "unknown.json").string()), 2);

    EXPECT_EQ(run_cli("reproduce nonsense"), 2);
    EXPECT_EQ(run_cli("verify " + (dir / "nowhere").string()), 1);
    EXPECT_EQ(run_cli("config duffing"), 0);
}

TEST(Cli, DetunedGammaIsReportedAsFailure) {
    const fs::path dir = scratch("cli_gamma");
    fs::create_directories(dir);
    csv::write_text(dir / "cfg.json", config_to_json(small_logistic(dir / "bundle")));
    EXPECT_EQ(run_cli("run " + (dir / "cfg.json").string() + " --gamma 2.5"), 4);
    EXPECT_TRUE(fs::exists(dir / "bundle" / "failure.json"));
    const std::string cert = slurp(dir / "bundle" / "certificate.json");
    EXPECT_NE(cert.find("\"pass\": false"), std::string::npos);
}
