#include "pfstab/csv.hpp"
#include "pfstab/pipeline.hpp"

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>

namespace fs = std::filesystem;
using namespace pfstab;

namespace {

int exit_code(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::UnknownSystemKind: return 2;
    case ErrorCode::SolverFailure: return 3;
    case ErrorCode::VerificationFailed: return 4;
    default: return 1;
    }
}

Vector parse_state(const std::string& text) {
    const auto cells = csv::split(text);
    Vector x(static_cast<Eigen::Index>(cells.size()));
    for (std::size_t i = 0; i < cells.size(); ++i) x[static_cast<Eigen::Index>(i)] = csv::parse_double(csv::trim(cells[i]));
    return x;
}

struct Overrides {
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<double> gamma;

    void attach(CLI::App* app) {
        app->add_option("-o,--out", out, "bundle directory (default: $PFSTAB_OUTPUT_ROOT/<name>-<hash>)");
        app->add_option("--seed", seed, "data seed");
        app->add_option("--gamma", gamma, "discount-like factor of the stabilization LP");
    }
    void apply(PipelineConfig& cfg) const {
        if (!out.empty()) cfg.output_dir = out;
        if (seed) cfg.data.seed = *seed;
        if (gamma) cfg.stabilization.gamma = *gamma;
    }
};

void print_summary(const RunSummary& s) {
    const auto& cert = s.verification.certificate;
    int conv = 0;
    for (const auto& r : s.closed_loop) conv += r.converged ? 1 : 0;
    std::cout << "bundle: " << s.bundle.string() << "\n"
              << "config hash: " << s.config_hash << "\n"
              << "certificate: " << (cert.pass ? "pass" : "FAIL") << ", spectral radius " << std::setprecision(10)
              << cert.spectral_radius << "\n"
              << "closed loop converged: " << conv << "/" << s.closed_loop.size() << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Data-driven stabilization with Perron-Frobenius operators"};
    app.require_subcommand(1);

    Overrides run_over, repro_over, gen_over;
    std::string config_path, bundle, preset;

    auto* run = app.add_subcommand("run", "run the whole pipeline from a JSON config");
    run->add_option("config", config_path, "config file")->required();
    run_over.attach(run);

    auto* repro = app.add_subcommand("reproduce", "run a built-in benchmark");
    repro->add_option("name", preset, "cubic_logistic, duffing, double_well or standard_map")->required();
    repro_over.attach(repro);

    auto* show = app.add_subcommand("config", "print the config of a built-in benchmark");
    show->add_option("name", preset)->required();

    auto* gen = app.add_subcommand("generate", "create a bundle and write its datasets");
    gen->add_option("config", config_path, "config file")->required();
    gen_over.attach(gen);

    auto* fit = app.add_subcommand("fit", "build the dictionary and fit one operator per action");
    fit->add_option("bundle", bundle)->required();

    auto* synth = app.add_subcommand("synthesize", "solve the stabilization LP and extract the policy");
    synth->add_option("bundle", bundle)->required();

    auto* verify = app.add_subcommand("verify", "recheck operators, balance and certificate of a bundle");
    verify->add_option("bundle", bundle)->required();

    std::vector<std::string> x0s;
    std::optional<int> horizon, n_random;
    std::string mode = "both", sim_out;
    auto* sim = app.add_subcommand("simulate", "roll out the policy of a bundle");
    sim->add_option("bundle", bundle)->required();
    sim->add_option("--x0", x0s, "initial state, comma separated (repeatable)");
    sim->add_option("--horizon", horizon);
    sim->add_option("--random", n_random, "number of uniform random initial states");
    sim->add_option("--mode", mode)->check(CLI::IsMember({"open", "closed", "both"}));
    sim->add_option("--csv", sim_out, "output CSV (default: <bundle>/rollouts/simulate.csv)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run || *repro) {
            PipelineConfig cfg = *run ? load_config(config_path) : preset_config(preset);
            (*run ? run_over : repro_over).apply(cfg);
            print_summary(run_pipeline(cfg, &std::cerr));
        } else if (*show) {
            std::cout << config_to_json(preset_config(preset), false) << "\n";
        } else if (*gen) {
            PipelineConfig cfg = load_config(config_path);
            gen_over.apply(cfg);
            const fs::path dir = resolve_output_dir(cfg);
            stage_generate(cfg, dir, &std::cerr);
            std::cout << dir.string() << "\n";
        } else if (*fit) {
            for (const auto& w : stage_fit(bundle, &std::cerr)) std::cerr << "warning: " << w << "\n";
        } else if (*synth) {
            const SynthesisReport rep = stage_synthesize(bundle, &std::cerr);
            if (!rep.certificate.pass) throw Error(ErrorCode::VerificationFailed, "Lyapunov certificate failed");
        } else if (*verify) {
            const VerifyReport rep = verify_bundle(bundle, &std::cerr);
            std::cout << "spectral radius: " << std::setprecision(10) << rep.certificate.spectral_radius << "\n";
            std::cout << "min mu_bar: " << rep.certificate.min_mu << "\n";
            std::cout << "balance residual: " << rep.balance_residual << "\n";
            for (int a : rep.bad_actions) std::cout << "operator for action " << a + 1 << " fails the Markov check\n";
            std::cout << (rep.pass ? "PASS" : "FAIL") << "\n";
            if (!rep.pass) return 4;
        } else if (*sim) {
            PipelineConfig cfg = read_bundle_config(bundle);
            if (horizon) cfg.simulation.horizon = *horizon;
            if (n_random) cfg.simulation.n_random = *n_random;
            if (!x0s.empty()) {
                cfg.simulation.initial_states.clear();
                for (const auto& s : x0s) cfg.simulation.initial_states.push_back(parse_state(s));
                if (!n_random) cfg.simulation.n_random = 0;
            }
            cfg.validate();
            const RbfDictionary dict = read_dictionary(fs::path(bundle) / "dictionary");
            Policy policy = read_policy(fs::path(bundle) / "policy.csv", cfg.grid);
            policy.feedback_mode = cfg.stabilization.feedback_mode;
            policy.grid_snap = cfg.stabilization.grid_snap;
            const QuadraticCost cost{cfg.stabilization.targets, cfg.stabilization.state_weight,
                                     cfg.stabilization.control_weight};
            const ConvergenceRule rule{cfg.stabilization.targets, cfg.converge_radius(), cfg.simulation.dwell};
            std::vector<RolloutRecord> records;
            int conv = 0, closed = 0;
            for (const auto& x0 : rollout_initial_states(cfg)) {
                if (mode != "open") {
                    records.push_back(simulate_rollout(cfg.system, x0, cfg.simulation.horizon, RolloutMode::ClosedLoop,
                                                       rule, &policy, &dict, &cost));
                    ++closed;
                    conv += records.back().converged ? 1 : 0;
                }
                if (mode != "closed")
                    records.push_back(simulate_rollout(cfg.system, x0, cfg.simulation.horizon, RolloutMode::OpenLoop,
                                                       rule, nullptr, nullptr, &cost));
            }
            const fs::path out = sim_out.empty() ? fs::path(bundle) / "rollouts" / "simulate.csv" : fs::path(sim_out);
            write_rollouts(records, out);
            std::cout << out.string() << "\n";
            if (closed) std::cout << "closed loop converged: " << conv << "/" << closed << "\n";
        }
    } catch (const StageError& e) {
        std::cerr << "pfstab: " << e.what() << "\n";
        return exit_code(e.code());
    } catch (const Error& e) {
        std::cerr << "pfstab: " << e.what() << "\n";
        return exit_code(e.code());
    } catch (const std::exception& e) {
        std::cerr << "pfstab: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
