#include "pfstab/systems.hpp"
#include "pfstab/csv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

namespace pfstab {

std::string to_string(SystemKind kind) {
    switch (kind) {
    case SystemKind::CubicLogistic: return "cubic_logistic";
    case SystemKind::Duffing: return "duffing";
    case SystemKind::DoubleWell: return "double_well";
    case SystemKind::StandardMap: return "standard_map";
    case SystemKind::ExternalData: return "external_data";
    }
    return "unknown";
}

SystemKind system_kind_from_string(const std::string& name) {
    for (auto kind : {SystemKind::CubicLogistic, SystemKind::Duffing, SystemKind::DoubleWell,
                      SystemKind::StandardMap, SystemKind::ExternalData})
        if (to_string(kind) == name) return kind;
    throw Error(ErrorCode::UnknownSystemKind, "'" + name + "'");
}

bool Box::contains(const Vector& x) const {
    if (x.size() != lower.size()) return false;
    for (Eigen::Index i = 0; i < x.size(); ++i)
        if (!(x[i] >= lower[i] && x[i] <= upper[i])) return false;
    return true;
}

double Box::volume() const { return (upper - lower).prod(); }

namespace {

Box make_box(std::initializer_list<double> lo, std::initializer_list<double> hi) {
    Box b;
    b.lower = Eigen::Map<const Vector>(lo.begin(), static_cast<Eigen::Index>(lo.size()));
    b.upper = Eigen::Map<const Vector>(hi.begin(), static_cast<Eigen::Index>(hi.size()));
    return b;
}

std::vector<std::string> required_params(SystemKind kind) {
    switch (kind) {
    case SystemKind::CubicLogistic: return {"lambda"};
    case SystemKind::Duffing: return {"damping"};
    case SystemKind::DoubleWell: return {"a"};
    case SystemKind::StandardMap: return {"K"};
    case SystemKind::ExternalData: return {};
    }
    return {};
}

void check_dims(const SystemSpec& spec, const Vector& x, const Vector& u) {
    if (x.size() != spec.state_dim)
        throw Error(ErrorCode::DimensionMismatch, "state has dimension " + std::to_string(x.size()) + ", system expects " +
                                                      std::to_string(spec.state_dim));
    if (u.size() != 1)
        throw Error(ErrorCode::DimensionMismatch, "benchmarks take a scalar control, got dimension " +
                                                      std::to_string(u.size()));
}

double wrap_unit(double v) {
    double r = v - std::floor(v);
    return r >= 1.0 ? 0.0 : r;
}

} // namespace

void SystemSpec::validate() const {
    if (state_dim < 1) throw Error(ErrorCode::InvalidConfig, "state_dim must be positive");
    if (domain.lower.size() != state_dim || domain.upper.size() != state_dim)
        throw Error(ErrorCode::InvalidConfig, "state_domain dimension does not match state_dim");
    for (int i = 0; i < state_dim; ++i)
        if (!(domain.lower[i] < domain.upper[i]))
            throw Error(ErrorCode::InvalidConfig, "state_domain lower must be < upper on axis " + std::to_string(i));
    if (time_kind == TimeKind::ContinuousFlow) {
        if (!(dt > 0.0)) throw Error(ErrorCode::InvalidConfig, "dt must be > 0 for a continuous flow");
        if (substeps < 1) throw Error(ErrorCode::InvalidConfig, "substeps must be >= 1");
    }
    for (const auto& name : required_params(kind))
        if (!params.count(name))
            throw Error(ErrorCode::InvalidConfig, to_string(kind) + " needs parameter '" + name + "'");
    const int expected_dim = kind == SystemKind::CubicLogistic ? 1 : 2;
    if (kind != SystemKind::ExternalData && state_dim != expected_dim)
        throw Error(ErrorCode::InvalidConfig, to_string(kind) + " is " + std::to_string(expected_dim) + "-dimensional");
}

double SystemSpec::param(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw Error(ErrorCode::InvalidConfig, "missing parameter '" + name + "'");
    return it->second;
}

SystemSpec cubic_logistic_system(double lambda) {
    SystemSpec s;
    s.kind = SystemKind::CubicLogistic;
    s.params = {{"lambda", lambda}};
    s.state_dim = 1;
    s.domain = make_box({-1.6}, {1.6});
    s.time_kind = TimeKind::DiscreteMap;
    return s;
}

SystemSpec duffing_system(double dt, int substeps) {
    SystemSpec s;
    s.kind = SystemKind::Duffing;
    s.params = {{"damping", 0.5}};
    s.state_dim = 2;
    s.domain = make_box({-2.0, -2.0}, {2.0, 2.0});
    s.time_kind = TimeKind::ContinuousFlow;
    s.dt = dt;
    s.substeps = substeps;
    return s;
}

SystemSpec double_well_system(double a, double dt, int substeps) {
    SystemSpec s;
    s.kind = SystemKind::DoubleWell;
    s.params = {{"a", a}};
    s.state_dim = 2;
    s.domain = make_box({-2.0, -2.0}, {2.0, 2.0});
    s.time_kind = TimeKind::ContinuousFlow;
    s.dt = dt;
    s.substeps = substeps;
    return s;
}

SystemSpec standard_map_system(double kick) {
    SystemSpec s;
    s.kind = SystemKind::StandardMap;
    s.params = {{"K", kick}};
    s.state_dim = 2;
    s.domain = make_box({0.0, 0.0}, {1.0, 1.0});
    s.time_kind = TimeKind::DiscreteMap;
    return s;
}

ControlGrid::ControlGrid(std::vector<Vector> values) : values_(std::move(values)) {
    if (values_.empty()) throw Error(ErrorCode::InvalidConfig, "control grid is empty");
    const auto d = values_.front().size();
    if (d < 1) throw Error(ErrorCode::InvalidConfig, "control values must have dimension >= 1");
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (values_[i].size() != d) throw Error(ErrorCode::InvalidConfig, "control values differ in dimension");
        if (i > 0) {
            const auto& p = values_[i - 1];
            const auto& q = values_[i];
            if (!std::lexicographical_compare(p.begin(), p.end(), q.begin(), q.end()))
                throw Error(ErrorCode::InvalidConfig, "control grid must be strictly increasing without duplicates");
        }
    }
}

ControlGrid ControlGrid::range(double lo, double step, double hi) {
    if (!(step > 0.0) || !(hi >= lo)) throw Error(ErrorCode::InvalidConfig, "bad control range");
    const auto n = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
    std::vector<Vector> values;
    values.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double v = lo + step * i;
        // snap values that should be exact zero
        if (std::abs(v) < 1e-12 * std::max(1.0, std::abs(step))) v = 0.0;
        values.push_back(Vector::Constant(1, v));
    }
    return ControlGrid(std::move(values));
}

int ControlGrid::nearest(const Vector& u) const {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int a = 0; a < size(); ++a) {
        const double d = (values_[static_cast<std::size_t>(a)] - u).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = a;
        }
    }
    return best;
}

Vector step_map(const SystemSpec& spec, const Vector& x, const Vector& u) {
    if (spec.time_kind != TimeKind::DiscreteMap)
        throw Error(ErrorCode::UnknownSystemKind, to_string(spec.kind) + " is not a discrete map");
    check_dims(spec, x, u);
    Vector out(x.size());
    switch (spec.kind) {
    case SystemKind::CubicLogistic: {
        const double lambda = spec.param("lambda");
        out[0] = lambda * x[0] - x[0] * x[0] * x[0] + u[0];
        break;
    }
    case SystemKind::StandardMap: {
        const double kick = spec.param("K") * u[0] * std::sin(2.0 * std::numbers::pi * x[0]);
        out[0] = wrap_unit(x[0] + x[1] + kick);
        out[1] = x[1] + kick;
        break;
    }
    default:
        throw Error(ErrorCode::UnknownSystemKind, to_string(spec.kind) + " has no map update rule");
    }
    return out;
}

Vector vector_field(const SystemSpec& spec, const Vector& x, const Vector& u) {
    check_dims(spec, x, u);
    Vector dx(2);
    switch (spec.kind) {
    case SystemKind::Duffing: {
        const double c = spec.param("damping");
        dx[0] = x[1];
        dx[1] = (x[0] - x[0] * x[0] * x[0]) - c * x[1] + u[0];
        break;
    }
    case SystemKind::DoubleWell: {
        const double a = spec.param("a");
        dx[0] = x[1];
        dx[1] = -x[0] * x[0] * x[0] + a * x[0] * x[0] + x[0] - a + u[0];
        break;
    }
    default:
        throw Error(ErrorCode::UnknownSystemKind, to_string(spec.kind) + " has no vector field");
    }
    return dx;
}

Vector integrate_flow(const SystemSpec& spec, const Vector& x, const Vector& u, double dt, int substeps) {
    if (spec.time_kind != TimeKind::ContinuousFlow)
        throw Error(ErrorCode::UnknownSystemKind, to_string(spec.kind) + " is not a continuous flow");
    if (!(dt > 0.0) || substeps < 1) throw Error(ErrorCode::InvalidConfig, "dt must be > 0 and substeps >= 1");
    const double h = dt / substeps;
    Vector s = x;
    for (int i = 0; i < substeps; ++i) {
        const Vector k1 = vector_field(spec, s, u);
        const Vector k2 = vector_field(spec, s + 0.5 * h * k1, u);
        const Vector k3 = vector_field(spec, s + 0.5 * h * k2, u);
        const Vector k4 = vector_field(spec, s + h * k3, u);
        s += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!s.allFinite())
            throw Error(ErrorCode::NonFiniteState, "state diverged at substep " + std::to_string(i + 1));
    }
    return s;
}

Vector advance(const SystemSpec& spec, const Vector& x, const Vector& u) {
    if (spec.time_kind == TimeKind::ContinuousFlow) return integrate_flow(spec, x, u, spec.dt, spec.substeps);
    Vector y = step_map(spec, x, u);
    if (!y.allFinite()) throw Error(ErrorCode::NonFiniteState, "map produced a non-finite state");
    return y;
}

TrajectoryDataset generate_action_dataset(const SystemSpec& spec, const Vector& u, int action_index, int n_traj,
                                          int traj_len, std::uint64_t seed, std::uint64_t stream) {
    if (n_traj < 1 || traj_len < 1) throw Error(ErrorCode::InvalidConfig, "n_traj and traj_len must be >= 1");
    if (spec.kind == SystemKind::ExternalData)
        throw Error(ErrorCode::UnknownSystemKind, "external data cannot be generated, read it from CSV instead");
    spec.validate();

    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    std::mt19937_64 rng(seq);

    TrajectoryDataset data;
    data.action_index = action_index;
    data.source_seed = seed;
    data.x.reserve(static_cast<std::size_t>(n_traj) * static_cast<std::size_t>(traj_len));
    data.y.reserve(data.x.capacity());
    const Vector width = spec.domain.upper - spec.domain.lower;
    for (int t = 0; t < n_traj; ++t) {
        Vector x(spec.state_dim);
        for (int i = 0; i < spec.state_dim; ++i) x[i] = spec.domain.lower[i] + width[i] * unit_double(rng());
        for (int s = 0; s < traj_len; ++s) {
            Vector y;
            try {
                y = advance(spec, x, u);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::NonFiniteState) throw;
                data.dropped += static_cast<std::size_t>(traj_len - s);
                break;
            }
            if (!spec.domain.contains(y)) {
                data.dropped += static_cast<std::size_t>(traj_len - s);
                break;
            }
            data.x.push_back(x);
            data.y.push_back(y);
            x = std::move(y);
        }
    }
    if (data.count() == 0)
        throw Error(ErrorCode::EmptyDataset, "every pair left the domain for action " + std::to_string(action_index + 1));
    return data;
}

std::vector<TrajectoryDataset> generate_dataset(const SystemSpec& spec, const ControlGrid& grid, int n_traj,
                                                int traj_len, std::uint64_t seed) {
    if (grid.size() == 0) throw Error(ErrorCode::InvalidConfig, "control grid is empty");
    std::vector<TrajectoryDataset> out;
    out.reserve(static_cast<std::size_t>(grid.size()));
    for (int a = 0; a < grid.size(); ++a)
        out.push_back(generate_action_dataset(spec, grid[a], a, n_traj, traj_len, seed, static_cast<std::uint64_t>(a)));
    return out;
}

std::string dataset_filename(int action_index) { return "data_a" + std::to_string(action_index + 1) + ".csv"; }

void write_dataset(const TrajectoryDataset& data, const std::filesystem::path& path) {
    const int q = data.dim();
    std::ostringstream out;
    out << "action,dim";
    for (int i = 0; i < q; ++i) out << ",x" << i;
    for (int i = 0; i < q; ++i) out << ",y" << i;
    out << '\n';
    for (std::size_t m = 0; m < data.count(); ++m) {
        out << data.action_index + 1 << ',' << q;
        for (int i = 0; i < q; ++i) out << ',' << csv::format_exact(data.x[m][i]);
        for (int i = 0; i < q; ++i) out << ',' << csv::format_exact(data.y[m][i]);
        out << '\n';
    }
    csv::write_text(path, out.str());
}

TrajectoryDataset read_dataset(const std::filesystem::path& path, int expected_action) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingArtifact, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || csv::trim(line).empty())
        throw Error(ErrorCode::EmptyDataset, path.string() + " is empty");
    const auto header = csv::split(line);
    if (header.size() < 4 || header[0] != "action" || header[1] != "dim" || header.size() % 2 != 0)
        throw Error(ErrorCode::MalformedRow, path.string() + ": bad header '" + line + "'");
    const int q = static_cast<int>(header.size() - 2) / 2;

    TrajectoryDataset data;
    data.action_index = -1;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        const auto cells = csv::split(line);
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (cells.size() != header.size())
            throw Error(ErrorCode::MalformedRow, where + " has " + std::to_string(cells.size()) + " columns, expected " +
                                                     std::to_string(header.size()));
        const double action = csv::parse_double(cells[0]);
        const double dim = csv::parse_double(cells[1]);
        if (action != std::floor(action) || action < 1) throw Error(ErrorCode::MalformedRow, where + ": bad action");
        if (dim != q) throw Error(ErrorCode::MalformedRow, where + ": dim column disagrees with header");
        const int a = static_cast<int>(action) - 1;
        if (data.action_index < 0) data.action_index = a;
        if (a != data.action_index || (expected_action >= 0 && a != expected_action))
            throw Error(ErrorCode::ActionMismatch, where + ": action " + std::to_string(a + 1));
        Vector x(q), y(q);
        for (int i = 0; i < q; ++i) {
            x[i] = csv::parse_double(cells[static_cast<std::size_t>(2 + i)]);
            y[i] = csv::parse_double(cells[static_cast<std::size_t>(2 + q + i)]);
        }
        data.x.push_back(std::move(x));
        data.y.push_back(std::move(y));
    }
    if (data.count() == 0) throw Error(ErrorCode::EmptyDataset, path.string() + " has no rows");
    return data;
}

} // namespace pfstab
