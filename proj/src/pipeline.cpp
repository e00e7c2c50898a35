#include "pfstab/pipeline.hpp"
#include "pfstab/csv.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <random>
#include <sstream>

namespace pfstab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

void note(std::ostream* log, const std::string& msg) {
    if (log) *log << "[pfstab] " << msg << std::endl;
}

json vector_json(const Vector& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v[i]);
    return out;
}

Vector vector_from_json(const json& j) {
    if (j.is_number()) return Vector::Constant(1, j.get<double>());
    if (!j.is_array()) throw Error(ErrorCode::InvalidConfig, "expected a number or an array, got " + j.dump());
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    return v;
}

json vectors_json(const std::vector<Vector>& vs) {
    json out = json::array();
    for (const auto& v : vs) out.push_back(vector_json(v));
    return out;
}

std::vector<Vector> vectors_from_json(const json& j) {
    std::vector<Vector> out;
    for (const auto& item : j) out.push_back(vector_from_json(item));
    return out;
}

template <class T>
void read_opt(const json& j, const char* key, T& field) {
    if (j.contains(key)) field = j.at(key).get<T>();
}

std::string lambda_method_name(LambdaMethod m) { return m == LambdaMethod::ClosedForm ? "closed_form" : "monte_carlo"; }

LambdaMethod lambda_method_from_string(const std::string& name) {
    if (name == "closed_form") return LambdaMethod::ClosedForm;
    if (name == "monte_carlo") return LambdaMethod::MonteCarlo;
    throw Error(ErrorCode::InvalidConfig, "unknown lambda method '" + name + "'");
}

json system_json(const SystemSpec& s) {
    json params = json::object();
    for (const auto& [k, v] : s.params) params[k] = v;
    json out = {{"kind", to_string(s.kind)},
                {"params", params},
                {"domain", {{"lower", vector_json(s.domain.lower)}, {"upper", vector_json(s.domain.upper)}}},
                {"time_kind", s.time_kind == TimeKind::DiscreteMap ? "discrete_map" : "continuous_flow"}};
    if (s.time_kind == TimeKind::ContinuousFlow) {
        out["dt"] = s.dt;
        out["substeps"] = s.substeps;
    }
    return out;
}

SystemSpec system_from_json(const json& j) {
    const SystemKind kind = system_kind_from_string(j.at("kind").get<std::string>());
    SystemSpec s;
    switch (kind) {
    case SystemKind::CubicLogistic: s = cubic_logistic_system(); break;
    case SystemKind::Duffing: s = duffing_system(); break;
    case SystemKind::DoubleWell: s = double_well_system(); break;
    case SystemKind::StandardMap: s = standard_map_system(); break;
    case SystemKind::ExternalData: s.kind = SystemKind::ExternalData; break;
    }
    if (j.contains("params"))
        for (const auto& [k, v] : j.at("params").items()) s.params[k] = v.get<double>();
    if (j.contains("domain")) {
        s.domain.lower = vector_from_json(j.at("domain").at("lower"));
        s.domain.upper = vector_from_json(j.at("domain").at("upper"));
        s.state_dim = s.domain.dim();
    }
    if (j.contains("time_kind")) {
        const auto tk = j.at("time_kind").get<std::string>();
        if (tk == "discrete_map")
            s.time_kind = TimeKind::DiscreteMap;
        else if (tk == "continuous_flow")
            s.time_kind = TimeKind::ContinuousFlow;
        else
            throw Error(ErrorCode::InvalidConfig, "unknown time_kind '" + tk + "'");
    }
    read_opt(j, "dt", s.dt);
    read_opt(j, "substeps", s.substeps);
    return s;
}

json grid_json(const ControlGrid& g) {
    json values = json::array();
    for (const auto& u : g.values()) {
        if (u.size() == 1)
            values.push_back(u[0]);
        else
            values.push_back(vector_json(u));
    }
    return {{"values", values}};
}

ControlGrid grid_from_json(const json& j) {
    if (j.contains("values")) return ControlGrid(vectors_from_json(j.at("values")));
    if (j.contains("lo") && j.contains("step") && j.contains("hi"))
        return ControlGrid::range(j.at("lo").get<double>(), j.at("step").get<double>(), j.at("hi").get<double>());
    throw Error(ErrorCode::InvalidConfig, "grid needs either 'values' or 'lo', 'step', 'hi'");
}

json config_json(const PipelineConfig& c, bool include_output_dir) {
    json out = {
        {"name", c.name},
        {"system", system_json(c.system)},
        {"grid", grid_json(c.grid)},
        {"dictionary",
         {{"k_centers", c.dictionary.k_centers},
          {"sigma", c.dictionary.sigma},
          {"center_mode", to_string(c.dictionary.center_mode)},
          {"anchor_targets", c.dictionary.anchor_targets},
          {"lambda_method", lambda_method_name(c.dictionary.lambda_method)},
          {"mc_samples", c.dictionary.mc_samples}}},
        {"data",
         {{"n_traj", c.data.n_traj},
          {"traj_len", c.data.traj_len},
          {"seed", c.data.seed},
          {"source_dir", c.data.source_dir}}},
        {"nsdmd",
         {{"tol_feas", c.nsdmd.tol_feas},
          {"tol_opt", c.nsdmd.tol_opt},
          {"max_iter", c.nsdmd.max_iter},
          {"post_project", c.nsdmd.post_project},
          {"method", to_string(c.nsdmd.method)},
          {"dense_max_basis", c.nsdmd.dense_max_basis}}},
        {"stabilization",
         {{"gamma", c.stabilization.gamma},
          {"r_att", c.stabilization.r_att},
          {"targets", vectors_json(c.stabilization.targets)},
          {"cost", {{"form", "quadratic"},
                    {"state_weight", c.stabilization.state_weight},
                    {"control_weight", c.stabilization.control_weight}}},
          {"normalize_flag", c.stabilization.normalize_flag},
          {"feedback_mode", to_string(c.stabilization.feedback_mode)},
          {"grid_snap", c.stabilization.grid_snap}}},
        {"simulation",
         {{"horizon", c.simulation.horizon},
          {"n_random", c.simulation.n_random},
          {"seed", c.simulation.seed},
          {"initial_states", vectors_json(c.simulation.initial_states)},
          {"converge_radius", c.simulation.converge_radius},
          {"dwell", c.simulation.dwell}}},
        {"notes", c.notes},
    };
    if (include_output_dir) out["output_dir"] = c.output_dir.string();
    return out;
}

std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(std::uint64_t v) {
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << v;
    return out.str();
}

fs::path data_dir(const fs::path& b) { return b / "data"; }
fs::path dict_dir(const fs::path& b) { return b / "dictionary"; }
fs::path op_dir(const fs::path& b) { return b / "operators"; }

void write_json(const fs::path& path, const json& j) { csv::write_text(path, j.dump(2) + "\n"); }

void require_files(const std::vector<fs::path>& files) {
    std::vector<std::string> missing;
    for (const auto& f : files)
        if (!fs::exists(f)) missing.push_back(f.string());
    if (missing.empty()) return;
    std::string msg = "missing artifacts:";
    for (const auto& m : missing) msg += " " + m;
    throw Error(ErrorCode::MissingArtifact, msg);
}

QuadraticCost make_cost(const PipelineConfig& cfg) {
    return QuadraticCost{cfg.stabilization.targets, cfg.stabilization.state_weight, cfg.stabilization.control_weight};
}

ConvergenceRule make_rule(const PipelineConfig& cfg) {
    return ConvergenceRule{cfg.stabilization.targets, cfg.converge_radius(), cfg.simulation.dwell};
}

std::string format_sig10(double v) {
    std::ostringstream out;
    out << std::setprecision(10) << v;
    return out.str();
}

json certificate_json(const SynthesisReport& r, const std::string& lp_state) {
    const auto& c = r.certificate;
    std::vector<int> attractor, flagged;
    for (int j : r.problem.attractor_indices) attractor.push_back(j + 1);
    for (std::size_t j = 0; j < r.policy.flagged.size(); ++j)
        if (r.policy.flagged[j]) flagged.push_back(static_cast<int>(j) + 1);
    return {{"pass", c.pass},
            {"spectral_radius", c.spectral_radius},
            {"spectral_radius_text", format_sig10(c.spectral_radius)},
            {"decay_bound", c.decay_bound},
            {"gamma", c.gamma},
            {"min_mu_bar", c.min_mu},
            {"certificate_residual", c.residual},
            {"balance_residual", r.balance_residual},
            {"power_iterations", c.power_iterations},
            {"power_iteration_stalled", c.stalled},
            {"lp_status", lp_state},
            {"lp_message", r.solution.message},
            {"objective", r.solution.objective},
            {"objective_recomputed", r.objective_recomputed},
            {"attractor_indices", attractor},
            {"flagged_indices", flagged}};
}

void write_theta(const OccupationSolution& sol, const std::vector<int>& free, const fs::path& path) {
    std::ostringstream out;
    out << "basis_index";
    for (Eigen::Index a = 0; a < sol.theta.cols(); ++a) out << ",a" << a + 1;
    out << '\n';
    for (Eigen::Index i = 0; i < sol.theta.rows(); ++i) {
        out << free[static_cast<std::size_t>(i)] + 1;
        for (Eigen::Index a = 0; a < sol.theta.cols(); ++a) out << ',' << csv::format_exact(sol.theta(i, a));
        out << '\n';
    }
    csv::write_text(path, out.str());
}

Matrix read_theta(const fs::path& path, const std::vector<int>& free, int n_actions) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingArtifact, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || csv::split(line).size() != static_cast<std::size_t>(n_actions + 1))
        throw Error(ErrorCode::MalformedRow, path.string() + ": bad theta header");
    Matrix theta(static_cast<Eigen::Index>(free.size()), n_actions);
    Eigen::Index row = 0;
    while (std::getline(in, line)) {
        if (csv::trim(line).empty()) continue;
        const auto cells = csv::split(line);
        if (cells.size() != static_cast<std::size_t>(n_actions + 1)) throw Error(ErrorCode::MalformedRow, path.string() + ": ragged row");
        if (row >= theta.rows()) throw Error(ErrorCode::DimensionMismatch, path.string() + " has too many rows");
        if (static_cast<int>(csv::parse_double(cells[0])) != free[static_cast<std::size_t>(row)] + 1)
            throw Error(ErrorCode::MalformedRow, path.string() + ": unexpected basis index in row " + std::to_string(row + 1));
        for (int a = 0; a < n_actions; ++a) theta(row, a) = csv::parse_double(cells[static_cast<std::size_t>(a + 1)]);
        ++row;
    }
    if (row != theta.rows()) throw Error(ErrorCode::DimensionMismatch, path.string() + " has too few rows");
    return theta;
}

void write_mu_bar(const LyapunovCertificate& cert, const std::vector<int>& free, const RbfDictionary& dict,
                  const fs::path& path) {
    std::ostringstream out;
    out << "basis_index";
    for (int i = 0; i < dict.dim(); ++i) out << ",center" << i;
    out << ",mu_bar\n";
    for (std::size_t i = 0; i < free.size() && static_cast<Eigen::Index>(i) < cert.mu_bar.size(); ++i) {
        out << free[i] + 1;
        for (int d = 0; d < dict.dim(); ++d) out << ',' << csv::format_exact(dict.centers()(free[i], d));
        out << ',' << csv::format_exact(cert.mu_bar[static_cast<Eigen::Index>(i)]) << '\n';
    }
    csv::write_text(path, out.str());
}

std::vector<TrajectoryDataset> read_datasets(const fs::path& bundle, int n_actions) {
    std::vector<fs::path> files;
    for (int a = 0; a < n_actions; ++a) files.push_back(data_dir(bundle) / dataset_filename(a));
    require_files(files);
    std::vector<TrajectoryDataset> out;
    for (int a = 0; a < n_actions; ++a) out.push_back(read_dataset(files[static_cast<std::size_t>(a)], a));
    return out;
}

Matrix stack_points(const TrajectoryDataset& data) {
    Matrix pts(static_cast<Eigen::Index>(data.count()), data.dim());
    for (std::size_t m = 0; m < data.count(); ++m) pts.row(static_cast<Eigen::Index>(m)) = data.x[m].transpose();
    return pts;
}

} // namespace

std::string to_string(CenterMode mode) { return mode == CenterMode::KMeans ? "kmeans" : "grid"; }

CenterMode center_mode_from_string(const std::string& name) {
    if (name == "kmeans") return CenterMode::KMeans;
    if (name == "grid") return CenterMode::Grid;
    throw Error(ErrorCode::InvalidConfig, "unknown center mode '" + name + "'");
}

std::string to_string(RolloutMode mode) { return mode == RolloutMode::OpenLoop ? "open_loop" : "closed_loop"; }

std::string StageError::strip_prefix(const std::string& what) {
    const auto pos = what.find(": ");
    return pos == std::string::npos ? what : what.substr(pos + 2);
}

void PipelineConfig::validate() const {
    auto bad = [](const std::string& msg) { throw Error(ErrorCode::InvalidConfig, msg); };
    if (!(dictionary.sigma > 0.0) || !std::isfinite(dictionary.sigma)) bad("dictionary.sigma must be > 0");
    if (dictionary.k_centers < 2) bad("dictionary.k_centers must be >= 2");
    if (dictionary.lambda_method == LambdaMethod::MonteCarlo && dictionary.mc_samples < 1000)
        bad("dictionary.mc_samples must be >= 1000");
    if (data.n_traj < 1 || data.traj_len < 1) bad("data.n_traj and data.traj_len must be >= 1");
    if (system.kind == SystemKind::ExternalData && data.source_dir.empty())
        bad("external_data needs data.source_dir");
    if (system.kind != SystemKind::ExternalData) system.validate();
    if (grid.size() == 0) bad("control grid is empty");
    if (!(stabilization.gamma > 0.0)) bad("stabilization.gamma must be > 0");
    if (stabilization.targets.empty()) bad("stabilization.targets is empty");
    for (const auto& t : stabilization.targets)
        if (t.size() != system.state_dim) bad("target dimension differs from the state dimension");
    if (stabilization.state_weight < 0.0 || stabilization.control_weight < 0.0) bad("cost weights must be >= 0");
    if (simulation.horizon < 0) bad("simulation.horizon must be >= 0");
    if (simulation.n_random < 0) bad("simulation.n_random must be >= 0");
    if (simulation.dwell < 1) bad("simulation.dwell must be >= 1");
    for (const auto& x : simulation.initial_states)
        if (x.size() != system.state_dim) bad("initial state dimension differs from the state dimension");
    nsdmd.validate();
}

double PipelineConfig::attractor_radius() const {
    return stabilization.r_att >= 0.0 ? stabilization.r_att : 2.0 * dictionary.sigma;
}

double PipelineConfig::converge_radius() const {
    return simulation.converge_radius > 0.0 ? simulation.converge_radius : attractor_radius();
}

std::string config_to_json(const PipelineConfig& cfg, bool include_output_dir) {
    return config_json(cfg, include_output_dir).dump(2);
}

PipelineConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
    }
    try {
        PipelineConfig c;
        read_opt(j, "name", c.name);
        if (!j.contains("system")) throw Error(ErrorCode::InvalidConfig, "config has no 'system' section");
        c.system = system_from_json(j.at("system"));
        if (!j.contains("grid")) throw Error(ErrorCode::InvalidConfig, "config has no 'grid' section");
        c.grid = grid_from_json(j.at("grid"));
        if (j.contains("dictionary")) {
            const auto& d = j.at("dictionary");
            read_opt(d, "k_centers", c.dictionary.k_centers);
            read_opt(d, "sigma", c.dictionary.sigma);
            if (d.contains("center_mode")) c.dictionary.center_mode = center_mode_from_string(d.at("center_mode"));
            read_opt(d, "anchor_targets", c.dictionary.anchor_targets);
            if (d.contains("lambda_method"))
                c.dictionary.lambda_method = lambda_method_from_string(d.at("lambda_method"));
            read_opt(d, "mc_samples", c.dictionary.mc_samples);
        }
        if (j.contains("data")) {
            const auto& d = j.at("data");
            read_opt(d, "n_traj", c.data.n_traj);
            read_opt(d, "traj_len", c.data.traj_len);
            read_opt(d, "seed", c.data.seed);
            read_opt(d, "source_dir", c.data.source_dir);
        }
        if (j.contains("nsdmd")) {
            const auto& d = j.at("nsdmd");
            read_opt(d, "tol_feas", c.nsdmd.tol_feas);
            read_opt(d, "tol_opt", c.nsdmd.tol_opt);
            read_opt(d, "max_iter", c.nsdmd.max_iter);
            read_opt(d, "post_project", c.nsdmd.post_project);
            if (d.contains("method")) c.nsdmd.method = nsdmd_method_from_string(d.at("method"));
            read_opt(d, "dense_max_basis", c.nsdmd.dense_max_basis);
        }
        if (j.contains("stabilization")) {
            const auto& d = j.at("stabilization");
            read_opt(d, "gamma", c.stabilization.gamma);
            read_opt(d, "r_att", c.stabilization.r_att);
            if (d.contains("targets")) c.stabilization.targets = vectors_from_json(d.at("targets"));
            if (d.contains("cost")) {
                const auto& cost = d.at("cost");
                if (cost.value("form", "quadratic") != "quadratic")
                    throw Error(ErrorCode::InvalidConfig, "only the quadratic cost form is supported");
                read_opt(cost, "state_weight", c.stabilization.state_weight);
                read_opt(cost, "control_weight", c.stabilization.control_weight);
            }
            read_opt(d, "normalize_flag", c.stabilization.normalize_flag);
            if (d.contains("feedback_mode"))
                c.stabilization.feedback_mode = feedback_mode_from_string(d.at("feedback_mode"));
            read_opt(d, "grid_snap", c.stabilization.grid_snap);
        }
        if (j.contains("simulation")) {
            const auto& d = j.at("simulation");
            read_opt(d, "horizon", c.simulation.horizon);
            read_opt(d, "n_random", c.simulation.n_random);
            read_opt(d, "seed", c.simulation.seed);
            if (d.contains("initial_states")) c.simulation.initial_states = vectors_from_json(d.at("initial_states"));
            read_opt(d, "converge_radius", c.simulation.converge_radius);
            read_opt(d, "dwell", c.simulation.dwell);
        }
        read_opt(j, "notes", c.notes);
        if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
        return c;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, std::string("bad config field: ") + e.what());
    }
}

PipelineConfig load_config(const fs::path& path) {
    if (!fs::exists(path)) throw Error(ErrorCode::InvalidConfig, "config file " + path.string() + " does not exist");
    return config_from_json(csv::read_text(path));
}

std::string config_hash(const PipelineConfig& cfg) {
    json j = config_json(cfg, false);
    j.erase("name");
    j.erase("notes");
    return hex64(fnv1a(j.dump()));
}

std::vector<std::string> preset_names() { return {"cubic_logistic", "duffing", "double_well", "standard_map"}; }

PipelineConfig preset_config(const std::string& name) {
    PipelineConfig c;
    c.name = name;
    if (name == "cubic_logistic") {
        c.system = cubic_logistic_system(2.3);
        c.grid = ControlGrid::range(-0.2, 0.02, 0.2);
        c.dictionary.k_centers = 200;
        c.dictionary.sigma = 0.008;
        c.dictionary.center_mode = CenterMode::Grid;
        c.data = {1000, 10, 1, {}};
        c.stabilization.targets = {Vector::Zero(1)};
        c.simulation.horizon = 20;
        c.simulation.n_random = 50;
        c.simulation.converge_radius = 0.05;
    } else if (name == "duffing") {
        c.system = duffing_system(0.1, 10);
        c.grid = ControlGrid::range(-4.0, 0.5, 4.0);
        c.dictionary.k_centers = 100;
        c.dictionary.sigma = 0.2;
        c.data = {500, 20, 1, {}};
        c.stabilization.targets = {Vector::Zero(2)};
        c.simulation.horizon = 200;
        c.simulation.n_random = 20;
        c.simulation.converge_radius = 0.15;
    } else if (name == "double_well") {
        c.system = double_well_system(0.5, 0.1, 10);
        c.grid = ControlGrid::range(-2.0, 0.2, 2.0);
        c.dictionary.k_centers = 100;
        c.dictionary.sigma = 0.22;
        c.dictionary.center_mode = CenterMode::Grid;
        c.data = {500, 20, 1, {}};
        Vector target(2);
        target << 0.5, 0.0;
        c.stabilization.targets = {target};
        // the target is a saddle: a wide attractor ball applies u = 0 where the flow leaves it
        c.stabilization.r_att = 0.0;
        c.stabilization.gamma = 1.01;
        c.simulation.horizon = 200;
        c.simulation.n_random = 20;
        c.simulation.converge_radius = 0.15;
    } else if (name == "standard_map") {
        c.system = standard_map_system(0.25);
        c.grid = ControlGrid::range(-0.5, 0.02, 0.5);
        c.dictionary.k_centers = 200;
        c.dictionary.sigma = 0.02;
        c.data = {1000, 10, 1, {}};
        Vector t1(2), t2(2);
        t1 << 0.25, 0.5;
        t2 << 0.75, 0.5;
        c.stabilization.targets = {t1, t2};
        c.simulation.horizon = 200;
        c.simulation.n_random = 20;
        c.simulation.converge_radius = 0.05;
        c.notes.push_back("control grid corrected from the printed single value [0.5:0.02:0.5] to [-0.5:0.02:0.5]");
    } else {
        throw Error(ErrorCode::InvalidConfig, "unknown benchmark '" + name + "' (expected cubic_logistic, duffing, "
                                              "double_well or standard_map)");
    }
    return c;
}

fs::path output_root() {
    const char* env = std::getenv("PFSTAB_OUTPUT_ROOT");
    return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_output_dir(const PipelineConfig& cfg) {
    if (!cfg.output_dir.empty()) return cfg.output_dir;
    return output_root() / (cfg.name + "-" + config_hash(cfg).substr(0, 8));
}

std::optional<int> first_converged_step(const std::vector<Vector>& states, const ConvergenceRule& rule) {
    const auto n = static_cast<int>(states.size());
    std::vector<char> inside(states.size(), 0);
    for (int t = 0; t < n; ++t)
        for (const auto& target : rule.targets)
            if ((states[static_cast<std::size_t>(t)] - target).norm() < rule.radius) inside[static_cast<std::size_t>(t)] = 1;
    for (int t = 0; t < n; ++t) {
        const int end = std::min(n, t + rule.dwell);
        bool ok = true;
        for (int s = t; s < end && ok; ++s) ok = inside[static_cast<std::size_t>(s)] != 0;
        if (ok) return t;
    }
    return std::nullopt;
}

RolloutRecord simulate_rollout(const SystemSpec& spec, const Vector& x0, int horizon, RolloutMode mode,
                               const ConvergenceRule& rule, const Policy* policy, const RbfDictionary* dict,
                               const QuadraticCost* cost) {
    if (horizon < 0) throw Error(ErrorCode::InvalidConfig, "horizon must be >= 0");
    if (x0.size() != spec.state_dim) throw Error(ErrorCode::DimensionMismatch, "initial state has wrong dimension");
    if (mode == RolloutMode::ClosedLoop && (!policy || !dict))
        throw Error(ErrorCode::InvalidConfig, "closed-loop rollout needs a policy and a dictionary");
    if (policy && dict && dict->dim() != spec.state_dim)
        throw Error(ErrorCode::DimensionMismatch, "policy dictionary and system dimensions differ");
    const int d = policy ? static_cast<int>(policy->control_of.front().size()) : 1;
    RolloutRecord rec;
    rec.mode = mode;
    rec.initial_state = x0;
    rec.states.push_back(x0);
    Vector x = x0;
    for (int t = 0; t < horizon; ++t) {
        const Vector u = mode == RolloutMode::ClosedLoop ? feedback(*policy, *dict, x) : Vector::Zero(d);
        Vector next;
        try {
            next = advance(spec, x, u);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NonFiniteState) throw;
            rec.diverged = true;
            break;
        }
        if (!next.allFinite()) {
            rec.diverged = true;
            break;
        }
        rec.controls.push_back(u);
        rec.costs.push_back(cost ? (*cost)(x, u) : 0.0);
        rec.states.push_back(next);
        x = std::move(next);
    }
    rec.steps_to_converge = rec.diverged ? std::nullopt : first_converged_step(rec.states, rule);
    rec.converged = rec.steps_to_converge.has_value();
    return rec;
}

std::vector<Vector> rollout_initial_states(const PipelineConfig& cfg) {
    std::vector<Vector> out = cfg.simulation.initial_states;
    std::mt19937_64 rng(cfg.simulation.seed);
    const Box& box = cfg.system.domain;
    for (int i = 0; i < cfg.simulation.n_random; ++i) {
        Vector x(box.dim());
        for (int k = 0; k < box.dim(); ++k) x[k] = box.lower[k] + (box.upper[k] - box.lower[k]) * unit_double(rng());
        out.push_back(std::move(x));
    }
    return out;
}

void write_rollouts(const std::vector<RolloutRecord>& records, const fs::path& path) {
    std::ostringstream out;
    const int q = records.empty() ? 0 : static_cast<int>(records.front().initial_state.size());
    int d = 1;
    for (const auto& r : records)
        if (!r.controls.empty()) d = static_cast<int>(r.controls.front().size());
    out << "rollout,mode,step";
    for (int i = 0; i < q; ++i) out << ",x" << i;
    for (int i = 0; i < d; ++i) out << ",u" << i;
    out << ",cost,converged,steps_to_converge,diverged\n";
    for (std::size_t r = 0; r < records.size(); ++r) {
        const auto& rec = records[r];
        for (std::size_t t = 0; t < rec.states.size(); ++t) {
            out << r + 1 << ',' << to_string(rec.mode) << ',' << t;
            for (int i = 0; i < q; ++i) out << ',' << csv::format_exact(rec.states[t][i]);
            const bool has_u = t < rec.controls.size();
            for (int i = 0; i < d; ++i) out << ',' << (has_u ? csv::format_exact(rec.controls[t][i]) : std::string("nan"));
            out << ',' << (has_u ? csv::format_exact(rec.costs[t]) : std::string("nan"));
            out << ',' << (rec.converged ? 1 : 0) << ',' << (rec.steps_to_converge ? *rec.steps_to_converge : -1) << ','
                << (rec.diverged ? 1 : 0) << '\n';
        }
    }
    csv::write_text(path, out.str());
}

std::vector<RolloutRecord> read_rollouts(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingArtifact, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::EmptyDataset, path.string() + " is empty");
    const auto header = csv::split(line);
    int q = 0, d = 0;
    for (const auto& h : header) {
        if (h.size() > 1 && h[0] == 'x') ++q;
        if (h.size() > 1 && h[0] == 'u') ++d;
    }
    if (header.size() != static_cast<std::size_t>(3 + q + d + 4))
        throw Error(ErrorCode::MalformedRow, path.string() + ": bad rollout header");
    std::vector<RolloutRecord> out;
    int current = 0;
    while (std::getline(in, line)) {
        if (csv::trim(line).empty()) continue;
        const auto cells = csv::split(line);
        if (cells.size() != header.size()) throw Error(ErrorCode::MalformedRow, path.string() + ": ragged row");
        const int id = static_cast<int>(csv::parse_double(cells[0]));
        if (id != current) {
            if (id != current + 1) throw Error(ErrorCode::MalformedRow, path.string() + ": rollouts out of order");
            current = id;
            out.emplace_back();
            out.back().mode = cells[1] == "open_loop" ? RolloutMode::OpenLoop : RolloutMode::ClosedLoop;
        }
        auto& rec = out.back();
        Vector x(q);
        for (int i = 0; i < q; ++i) x[i] = csv::parse_double(cells[static_cast<std::size_t>(3 + i)]);
        if (rec.states.empty()) rec.initial_state = x;
        rec.states.push_back(x);
        if (cells[static_cast<std::size_t>(3 + q)] != "nan") {
            Vector u(d);
            for (int i = 0; i < d; ++i) u[i] = csv::parse_double(cells[static_cast<std::size_t>(3 + q + i)]);
            rec.controls.push_back(u);
            rec.costs.push_back(csv::parse_double(cells[static_cast<std::size_t>(3 + q + d)]));
        }
        rec.converged = cells[static_cast<std::size_t>(4 + q + d)] == "1";
        const int steps = static_cast<int>(csv::parse_double(cells[static_cast<std::size_t>(5 + q + d)]));
        rec.steps_to_converge = steps >= 0 ? std::optional<int>(steps) : std::nullopt;
        rec.diverged = cells[static_cast<std::size_t>(6 + q + d)] == "1";
    }
    return out;
}

PipelineConfig read_bundle_config(const fs::path& bundle) {
    const fs::path path = bundle / "config.json";
    if (!fs::exists(path)) throw Error(ErrorCode::MissingArtifact, "missing artifacts: " + path.string());
    return config_from_json(csv::read_text(path));
}

OperatorBank read_operator_bank(const fs::path& bundle, const ControlGrid& grid) {
    std::vector<fs::path> files;
    for (int a = 0; a < grid.size(); ++a) files.push_back(op_dir(bundle) / pf_filename(a));
    require_files(files);
    OperatorBank bank;
    bank.actions = grid;
    bank.dictionary_ref = (dict_dir(bundle) / "centers.csv").string();
    for (int a = 0; a < grid.size(); ++a) bank.p_list.push_back(read_pf(op_dir(bundle), a));
    return bank;
}

void stage_generate(const PipelineConfig& cfg, const fs::path& bundle, std::ostream* log) {
    cfg.validate();
    fs::create_directories(data_dir(bundle));
    csv::write_text(bundle / "config.json", config_to_json(cfg, false) + "\n");
    if (cfg.system.kind == SystemKind::ExternalData) {
        for (int a = 0; a < cfg.grid.size(); ++a) {
            const TrajectoryDataset data = read_dataset(fs::path(cfg.data.source_dir) / dataset_filename(a), a);
            write_dataset(data, data_dir(bundle) / dataset_filename(a));
        }
        note(log, "copied " + std::to_string(cfg.grid.size()) + " external datasets");
        return;
    }
    const auto datasets = generate_dataset(cfg.system, cfg.grid, cfg.data.n_traj, cfg.data.traj_len, cfg.data.seed);
    std::size_t pairs = 0, dropped = 0;
    for (const auto& d : datasets) {
        write_dataset(d, data_dir(bundle) / dataset_filename(d.action_index));
        pairs += d.count();
        dropped += d.dropped;
    }
    note(log, "generated " + std::to_string(pairs) + " snapshot pairs over " + std::to_string(datasets.size()) +
                  " actions (" + std::to_string(dropped) + " left the domain and were dropped)");
}

std::vector<std::string> stage_fit(const fs::path& bundle, std::ostream* log) {
    const PipelineConfig cfg = read_bundle_config(bundle);
    cfg.validate();
    const std::string hash = config_hash(cfg);
    const auto datasets = read_datasets(bundle, cfg.grid.size());

    // centers come from the data recorded with the action nearest u = 0
    const int open_loop = cfg.grid.nearest(Vector::Zero(cfg.grid.dim()));
    Matrix centers;
    if (cfg.dictionary.center_mode == CenterMode::Grid)
        centers = uniform_grid_centers(cfg.system.domain, cfg.dictionary.k_centers);
    else
        centers = kmeans(stack_points(datasets[static_cast<std::size_t>(open_loop)]), cfg.dictionary.k_centers,
                         cfg.data.seed);
    if (cfg.dictionary.anchor_targets) centers = anchor_centers(centers, cfg.stabilization.targets);
    const RbfDictionary dict(centers, cfg.dictionary.sigma);
    const LambdaMatrix lam = lambda_matrix(dict, cfg.dictionary.lambda_method, &cfg.system.domain,
                                           cfg.dictionary.mc_samples, cfg.data.seed);
    write_dictionary(dict, lam, dict_dir(bundle));
    note(log, "dictionary: " + std::to_string(dict.size()) + " centers (" + to_string(cfg.dictionary.center_mode) + ")");

    std::vector<std::string> warnings;
    fs::create_directories(op_dir(bundle) / "koopman");
    for (int a = 0; a < cfg.grid.size(); ++a) {
        const auto t0 = std::chrono::steady_clock::now();
        const GramSet grams = gram_matrices(dict, datasets[static_cast<std::size_t>(a)]);
        const NsdmdFit fit = fit_nsdmd(grams, lam, cfg.nsdmd);
        write_operator(fit, a, hash, op_dir(bundle));
        for (const auto& w : fit.warnings) warnings.push_back("action " + std::to_string(a + 1) + ": " + w);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::ostringstream msg;
        msg << "fit action " << a + 1 << "/" << cfg.grid.size() << ": residual " << fit.koopman.fit_residual
            << " (unconstrained " << fit.edmd_residual << "), " << to_string(fit.status.state) << " after "
            << fit.status.iterations << " iterations, " << std::fixed << std::setprecision(1) << secs << " s";
        note(log, msg.str());
    }
    return warnings;
}

SynthesisReport stage_synthesize(const fs::path& bundle, std::ostream* log) {
    const PipelineConfig cfg = read_bundle_config(bundle);
    cfg.validate();
    require_files({dict_dir(bundle) / "centers.csv", dict_dir(bundle) / "dictionary.json"});
    const RbfDictionary dict = read_dictionary(dict_dir(bundle));
    const OperatorBank bank = read_operator_bank(bundle, cfg.grid);
    bank.validate(1e-6);

    SynthesisReport rep;
    const auto attractor = attractor_indices_near(dict, cfg.stabilization.targets, cfg.attractor_radius());
    rep.problem = make_stabilization_problem(dict, cfg.grid, make_cost(cfg), attractor, cfg.stabilization.gamma,
                                             cfg.stabilization.normalize_flag);
    const auto free = rep.problem.free_indices(dict.size());
    note(log, "stabilization LP: " + std::to_string(free.size()) + " states x " + std::to_string(cfg.grid.size()) +
                  " actions, attractor of " + std::to_string(attractor.size()) + " centers, gamma " +
                  format_sig10(cfg.stabilization.gamma));
    rep.solution = solve_stabilization(bank, rep.problem);
    const SolveState state = rep.solution.status.state;

    if (state == SolveState::Infeasible) {
        // No occupation measure exists. Report the certificate of the myopic policy as failed.
        OccupationSolution zero = rep.solution;
        zero.theta = Matrix::Zero(static_cast<Eigen::Index>(free.size()), cfg.grid.size());
        rep.policy = extract_policy(zero, rep.problem, cfg.grid, cfg.stabilization.feedback_mode,
                                    cfg.stabilization.grid_snap);
        rep.certificate = lyapunov_certificate(closed_loop_pf(bank, rep.policy), rep.problem);
        rep.certificate.pass = false;
        write_json(bundle / "certificate.json", certificate_json(rep, to_string(state)));
        throw Error(ErrorCode::VerificationFailed, rep.solution.message);
    }
    if (state != SolveState::Optimal)
        throw Error(ErrorCode::SolverFailure, "stabilization LP: " + rep.solution.message);

    rep.objective_recomputed = evaluate_cost(rep.solution, rep.problem);
    rep.balance_residual = balance_residual(bank, rep.problem, rep.solution);
    rep.policy = extract_policy(rep.solution, rep.problem, cfg.grid, cfg.stabilization.feedback_mode,
                                cfg.stabilization.grid_snap);
    StabilizationProblem cert_prob = rep.problem;
    cert_prob.m_vec = rep.solution.m_used;
    rep.certificate = lyapunov_certificate(closed_loop_pf(bank, rep.policy), cert_prob);

    write_theta(rep.solution, free, bundle / "theta.csv");
    write_policy(rep.policy, dict, bundle / "policy.csv");
    write_json(bundle / "certificate.json", certificate_json(rep, to_string(state)));
    write_mu_bar(rep.certificate, free, dict, bundle / "mu_bar.csv");
    note(log, "LP optimal, objective " + format_sig10(rep.solution.objective) + "; certificate " +
                  (rep.certificate.pass ? "passed" : "FAILED") + ", spectral radius " +
                  format_sig10(rep.certificate.spectral_radius));
    return rep;
}

std::pair<std::vector<RolloutRecord>, std::vector<RolloutRecord>> stage_simulate(const fs::path& bundle,
                                                                                 std::ostream* log) {
    const PipelineConfig cfg = read_bundle_config(bundle);
    if (cfg.system.kind == SystemKind::ExternalData) {
        note(log, "external data has no model to simulate; skipping rollouts");
        return {};
    }
    require_files({dict_dir(bundle) / "centers.csv", dict_dir(bundle) / "dictionary.json", bundle / "policy.csv"});
    const RbfDictionary dict = read_dictionary(dict_dir(bundle));
    Policy policy = read_policy(bundle / "policy.csv", cfg.grid);
    policy.feedback_mode = cfg.stabilization.feedback_mode;
    policy.grid_snap = cfg.stabilization.grid_snap;
    const QuadraticCost cost = make_cost(cfg);
    const ConvergenceRule rule = make_rule(cfg);

    std::vector<RolloutRecord> closed, open;
    for (const auto& x0 : rollout_initial_states(cfg)) {
        closed.push_back(simulate_rollout(cfg.system, x0, cfg.simulation.horizon, RolloutMode::ClosedLoop, rule, &policy,
                                          &dict, &cost));
        open.push_back(simulate_rollout(cfg.system, x0, cfg.simulation.horizon, RolloutMode::OpenLoop, rule, nullptr,
                                        nullptr, &cost));
    }
    fs::create_directories(bundle / "rollouts");
    write_rollouts(closed, bundle / "rollouts" / "closed_loop.csv");
    write_rollouts(open, bundle / "rollouts" / "open_loop.csv");

    std::ostringstream summary;
    summary << "rollout,mode";
    for (int i = 0; i < cfg.system.state_dim; ++i) summary << ",x0_" << i;
    for (int i = 0; i < cfg.system.state_dim; ++i) summary << ",final_" << i;
    summary << ",total_cost,converged,steps_to_converge,diverged\n";
    int n_conv = 0;
    for (const auto* set : {&closed, &open}) {
        for (std::size_t r = 0; r < set->size(); ++r) {
            const auto& rec = (*set)[r];
            summary << r + 1 << ',' << to_string(rec.mode);
            for (int i = 0; i < cfg.system.state_dim; ++i) summary << ',' << csv::format_exact(rec.initial_state[i]);
            for (int i = 0; i < cfg.system.state_dim; ++i) summary << ',' << csv::format_exact(rec.states.back()[i]);
            double total = 0.0;
            for (double c : rec.costs) total += c;
            summary << ',' << csv::format_exact(total) << ',' << (rec.converged ? 1 : 0) << ','
                    << (rec.steps_to_converge ? *rec.steps_to_converge : -1) << ',' << (rec.diverged ? 1 : 0) << '\n';
            if (rec.mode == RolloutMode::ClosedLoop && rec.converged) ++n_conv;
        }
    }
    csv::write_text(bundle / "rollouts" / "summary.csv", summary.str());
    note(log, "closed loop converged for " + std::to_string(n_conv) + "/" + std::to_string(closed.size()) +
                  " initial states");
    return {closed, open};
}

VerifyReport verify_bundle(const fs::path& bundle, std::ostream* log) {
    const PipelineConfig cfg = read_bundle_config(bundle);
    std::vector<fs::path> needed = {dict_dir(bundle) / "centers.csv", dict_dir(bundle) / "dictionary.json",
                                    dict_dir(bundle) / "lambda.csv", bundle / "theta.csv", bundle / "policy.csv"};
    for (int a = 0; a < cfg.grid.size(); ++a) needed.push_back(op_dir(bundle) / pf_filename(a));
    require_files(needed);

    const RbfDictionary dict = read_dictionary(dict_dir(bundle));
    OperatorBank bank;
    bank.actions = cfg.grid;
    VerifyReport rep;
    for (int a = 0; a < cfg.grid.size(); ++a) {
        bank.p_list.push_back(read_pf(op_dir(bundle), a));
        if (bank.p_list.back().p_mat.rows() != dict.size() || bank.p_list.back().p_mat.cols() != dict.size())
            throw Error(ErrorCode::DimensionMismatch, pf_filename(a) + " does not match the dictionary size");
        rep.markov.push_back(validate_markov(bank.p_list.back(), 1e-6));
        if (!rep.markov.back().pass) rep.bad_actions.push_back(a);
    }
    const auto attractor = attractor_indices_near(dict, cfg.stabilization.targets, cfg.attractor_radius());
    StabilizationProblem prob = make_stabilization_problem(dict, cfg.grid, make_cost(cfg), attractor,
                                                           cfg.stabilization.gamma, cfg.stabilization.normalize_flag);
    const auto free = prob.free_indices(dict.size());
    OccupationSolution sol;
    sol.theta = read_theta(bundle / "theta.csv", free, cfg.grid.size());
    if (cfg.stabilization.normalize_flag) {
        // the measure was a slack; recover it from the balance equation
        Vector m = Vector::Zero(static_cast<Eigen::Index>(free.size()));
        for (int a = 0; a < cfg.grid.size(); ++a) {
            const Matrix p1 = restrict_operator(bank.p_list[static_cast<std::size_t>(a)].p_mat, attractor);
            m += sol.theta.col(a) - prob.gamma * p1 * sol.theta.col(a);
        }
        prob.m_vec = m;
    }
    sol.m_used = prob.m_vec;
    rep.balance_residual = balance_residual(bank, prob, sol);
    Policy policy = read_policy(bundle / "policy.csv", cfg.grid);
    if (policy.basis_size() != dict.size()) throw Error(ErrorCode::DimensionMismatch, "policy does not match dictionary");
    rep.certificate = lyapunov_certificate(closed_loop_pf(bank, policy), prob);
    write_mu_bar(rep.certificate, free, dict, bundle / "mu_bar.csv");

    rep.pass = rep.bad_actions.empty() && rep.certificate.pass && rep.balance_residual <= 1e-7;
    json bad = json::array();
    for (int a : rep.bad_actions) bad.push_back(a + 1);
    json markov = json::array();
    for (std::size_t a = 0; a < rep.markov.size(); ++a)
        markov.push_back({{"action_index", a + 1},
                          {"max_negative_entry", rep.markov[a].max_negative_entry},
                          {"max_column_sum_deviation", rep.markov[a].max_column_sum_deviation},
                          {"pass", rep.markov[a].pass}});
    write_json(bundle / "verify.json", {{"pass", rep.pass},
                                        {"bad_actions", bad},
                                        {"balance_residual", rep.balance_residual},
                                        {"spectral_radius", rep.certificate.spectral_radius},
                                        {"spectral_radius_text", format_sig10(rep.certificate.spectral_radius)},
                                        {"min_mu_bar", rep.certificate.min_mu},
                                        {"certificate_pass", rep.certificate.pass},
                                        {"markov", markov}});
    std::ostringstream msg;
    msg << "verify: Markov checks " << (rep.bad_actions.empty() ? "pass" : "FAIL") << ", balance residual "
        << rep.balance_residual << ", spectral radius " << format_sig10(rep.certificate.spectral_radius)
        << ", certificate " << (rep.certificate.pass ? "pass" : "FAIL");
    note(log, msg.str());
    return rep;
}

RunSummary run_pipeline(const PipelineConfig& input, std::ostream* log) {
    input.validate();
    PipelineConfig cfg = input;
    const fs::path bundle = resolve_output_dir(cfg);
    cfg.output_dir.clear();
    RunSummary summary;
    summary.bundle = bundle;
    summary.config_hash = config_hash(cfg);
    fs::create_directories(bundle);
    fs::remove(bundle / "failure.json");

    auto write_manifest = [&](const std::string& status) {
        json stages = json::array();
        for (const auto& s : summary.stages) stages.push_back({{"name", s.name}, {"seconds", s.seconds}});
        const std::time_t now = std::time(nullptr);
        char stamp[32];
        std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
        write_json(bundle / "manifest.json",
                   {{"tool", "pfstab"},
                    {"version", kVersion},
                    {"name", cfg.name},
                    {"config_hash", summary.config_hash},
                    {"status", status},
                    {"n_actions", cfg.grid.size()},
                    {"basis_size", cfg.dictionary.k_centers},
                    {"eigen_version", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                          "." + std::to_string(EIGEN_MINOR_VERSION)},
                    {"compiler", __VERSION__},
                    {"notes", cfg.notes},
                    {"warnings", summary.warnings},
                    {"stages", stages},
                    {"created_utc", stamp}});
    };
    auto run_stage = [&](const std::string& name, auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            fn();
        } catch (const Error& e) {
            summary.stages.push_back({name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
            write_json(bundle / "failure.json", {{"stage", name}, {"error", to_string(e.code())}, {"message", e.what()}});
            write_manifest("failed");
            throw StageError(name, e);
        } catch (const std::exception& e) {
            const Error wrapped(ErrorCode::Io, e.what());
            write_json(bundle / "failure.json", {{"stage", name}, {"error", "Other"}, {"message", e.what()}});
            write_manifest("failed");
            throw StageError(name, wrapped);
        }
        summary.stages.push_back({name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    };

    note(log, "bundle " + bundle.string() + " (config " + summary.config_hash + ")");
    run_stage("generate", [&] { stage_generate(cfg, bundle, log); });
    run_stage("fit", [&] { summary.warnings = stage_fit(bundle, log); });
    run_stage("synthesize", [&] { summary.synthesis = stage_synthesize(bundle, log); });
    run_stage("verify", [&] { summary.verification = verify_bundle(bundle, log); });
    run_stage("simulate", [&] { std::tie(summary.closed_loop, summary.open_loop) = stage_simulate(bundle, log); });
    run_stage("certify", [&] {
        if (!summary.verification.bad_actions.empty()) {
            std::string list;
            for (int a : summary.verification.bad_actions) list += " " + std::to_string(a + 1);
            throw Error(ErrorCode::VerificationFailed, "operators failing the Markov check:" + list);
        }
        if (!summary.verification.certificate.pass)
            throw Error(ErrorCode::VerificationFailed,
                        "Lyapunov certificate failed (spectral radius " +
                            format_sig10(summary.verification.certificate.spectral_radius) + ", min mu " +
                            format_sig10(summary.verification.certificate.min_mu) + ")");
    });
    write_manifest("ok");
    return summary;
}

RunSummary reproduce(const std::string& benchmark, std::ostream* log) { return run_pipeline(preset_config(benchmark), log); }

} // namespace pfstab
