#ifndef PFSTAB_PIPELINE_HPP
#define PFSTAB_PIPELINE_HPP

#include "pfstab/common.hpp"
#include "pfstab/control.hpp"
#include "pfstab/dictionary.hpp"
#include "pfstab/systems.hpp"
#include "pfstab/transfer_operator.hpp"

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace pfstab {

enum class CenterMode { KMeans, Grid };
std::string to_string(CenterMode mode);
CenterMode center_mode_from_string(const std::string& name);

struct DictionaryConfig {
    int k_centers = 100;
    double sigma = 0.2;
    CenterMode center_mode = CenterMode::KMeans;
    bool anchor_targets = true; // move the nearest center onto each target
    LambdaMethod lambda_method = LambdaMethod::ClosedForm;
    std::size_t mc_samples = 200000;
};

struct DataConfig {
    int n_traj = 500;
    int traj_len = 20;
    std::uint64_t seed = 1;
    std::string source_dir; // external_data only: directory holding data_a{a}.csv
};

struct StabilizationConfig {
    double gamma = 1.05;
    double r_att = -1.0; // negative: 2 * sigma
    std::vector<Vector> targets;
    double state_weight = 1.0;
    double control_weight = 1.0;
    bool normalize_flag = false;
    FeedbackMode feedback_mode = FeedbackMode::PartitionOfUnity;
    bool grid_snap = false;
};

struct SimulationConfig {
    int horizon = 50;
    int n_random = 20;
    std::uint64_t seed = 7;
    std::vector<Vector> initial_states; // simulated before the random ones
    double converge_radius = -1.0;      // negative: the attractor radius
    int dwell = 5;
};

struct PipelineConfig {
    std::string name = "run";
    SystemSpec system;
    ControlGrid grid;
    DictionaryConfig dictionary;
    DataConfig data;
    NsdmdConfig nsdmd;
    StabilizationConfig stabilization;
    SimulationConfig simulation;
    std::vector<std::string> notes;
    std::filesystem::path output_dir;

    /// Throws InvalidConfig before any computation happens.
    void validate() const;
    [[nodiscard]] double attractor_radius() const;
    [[nodiscard]] double converge_radius() const;
};

std::string config_to_json(const PipelineConfig& cfg, bool include_output_dir = true);
PipelineConfig config_from_json(const std::string& text);
PipelineConfig load_config(const std::filesystem::path& path);
/// FNV-1a over the canonical JSON without output_dir, name and notes.
std::string config_hash(const PipelineConfig& cfg);

std::vector<std::string> preset_names();
PipelineConfig preset_config(const std::string& name);

/// Output root from PFSTAB_OUTPUT_ROOT (default "runs").
std::filesystem::path output_root();
std::filesystem::path resolve_output_dir(const PipelineConfig& cfg);

enum class RolloutMode { OpenLoop, ClosedLoop };
std::string to_string(RolloutMode mode);

struct RolloutRecord {
    RolloutMode mode = RolloutMode::ClosedLoop;
    Vector initial_state;
    std::vector<Vector> states;
    std::vector<Vector> controls; // one fewer than states
    std::vector<double> costs;    // stage cost per control step
    bool converged = false;
    std::optional<int> steps_to_converge;
    bool diverged = false;
};

struct ConvergenceRule {
    std::vector<Vector> targets;
    double radius = 0.05;
    int dwell = 5;
};

/// Converged at the first step after which the state stays within `radius` of a target for
/// `dwell` consecutive samples (or until the horizon, if that comes first).
std::optional<int> first_converged_step(const std::vector<Vector>& states, const ConvergenceRule& rule);

/// Closed loop needs `policy` and `dict`; open loop applies u = 0.
RolloutRecord simulate_rollout(const SystemSpec& spec, const Vector& x0, int horizon, RolloutMode mode,
                               const ConvergenceRule& rule, const Policy* policy = nullptr,
                               const RbfDictionary* dict = nullptr, const QuadraticCost* cost = nullptr);

std::vector<Vector> rollout_initial_states(const PipelineConfig& cfg);

void write_rollouts(const std::vector<RolloutRecord>& records, const std::filesystem::path& path);
std::vector<RolloutRecord> read_rollouts(const std::filesystem::path& path);

struct StageTiming {
    std::string name;
    double seconds = 0.0;
};

struct SynthesisReport {
    StabilizationProblem problem;
    OccupationSolution solution;
    Policy policy;
    LyapunovCertificate certificate;
    double balance_residual = 0.0;
    double objective_recomputed = 0.0;
};

struct VerifyReport {
    std::vector<MarkovReport> markov;
    std::vector<int> bad_actions; // 0-based
    double balance_residual = 0.0;
    LyapunovCertificate certificate;
    bool pass = false;
};

struct RunSummary {
    std::filesystem::path bundle;
    std::string config_hash;
    SynthesisReport synthesis;
    VerifyReport verification;
    std::vector<RolloutRecord> closed_loop;
    std::vector<RolloutRecord> open_loop;
    std::vector<StageTiming> stages;
    std::vector<std::string> warnings;
};

/// Error raised by a pipeline stage; keeps the originating code.
class StageError : public Error {
public:
    StageError(std::string stage, const Error& cause)
        : Error(cause.code(), "stage '" + stage + "': " + strip_prefix(cause.what())), stage_(std::move(stage)) {}
    [[nodiscard]] const std::string& stage() const noexcept { return stage_; }

private:
    static std::string strip_prefix(const std::string& what);
    std::string stage_;
};

// Individual stages. Each reads what it needs from the bundle directory.
void stage_generate(const PipelineConfig& cfg, const std::filesystem::path& bundle, std::ostream* log = nullptr);
std::vector<std::string> stage_fit(const std::filesystem::path& bundle, std::ostream* log = nullptr);
SynthesisReport stage_synthesize(const std::filesystem::path& bundle, std::ostream* log = nullptr);
std::pair<std::vector<RolloutRecord>, std::vector<RolloutRecord>> stage_simulate(const std::filesystem::path& bundle,
                                                                                 std::ostream* log = nullptr);
VerifyReport verify_bundle(const std::filesystem::path& bundle, std::ostream* log = nullptr);

PipelineConfig read_bundle_config(const std::filesystem::path& bundle);
OperatorBank read_operator_bank(const std::filesystem::path& bundle, const ControlGrid& grid);

/// generate -> fit -> synthesize -> verify -> simulate, with a manifest and a failure record on error.
RunSummary run_pipeline(const PipelineConfig& cfg, std::ostream* log = nullptr);
RunSummary reproduce(const std::string& benchmark, std::ostream* log = nullptr);

} // namespace pfstab

#endif // PFSTAB_PIPELINE_HPP
