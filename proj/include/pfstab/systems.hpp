#ifndef PFSTAB_SYSTEMS_HPP
#define PFSTAB_SYSTEMS_HPP

#include "pfstab/common.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pfstab {

enum class SystemKind { CubicLogistic, Duffing, DoubleWell, StandardMap, ExternalData };
enum class TimeKind { DiscreteMap, ContinuousFlow };

std::string to_string(SystemKind kind);
SystemKind system_kind_from_string(const std::string& name);

/// Axis-aligned box; bounds are inclusive.
struct Box {
    Vector lower;
    Vector upper;

    [[nodiscard]] int dim() const { return static_cast<int>(lower.size()); }
    [[nodiscard]] bool contains(const Vector& x) const;
    [[nodiscard]] double volume() const;
};

struct SystemSpec {
    SystemKind kind = SystemKind::CubicLogistic;
    std::map<std::string, double> params;
    int state_dim = 1;
    Box domain;
    TimeKind time_kind = TimeKind::DiscreteMap;
    double dt = 0.0;   // sampling period, flows only
    int substeps = 10; // RK4 sub-intervals per sample, flows only

    /// Throws InvalidConfig when an invariant is broken.
    void validate() const;
    [[nodiscard]] double param(const std::string& name) const;
};

// Benchmark systems with their standard parameters.
SystemSpec cubic_logistic_system(double lambda = 2.3);
SystemSpec duffing_system(double dt = 0.1, int substeps = 10);
SystemSpec double_well_system(double a = 0.5, double dt = 0.1, int substeps = 10);
SystemSpec standard_map_system(double kick = 0.25);

/// Quantized control set, kept in strictly increasing lexicographic order.
class ControlGrid {
public:
    ControlGrid() = default;
    explicit ControlGrid(std::vector<Vector> values);

    /// Scalar grid lo, lo+step, ..., hi (endpoint included up to rounding).
    static ControlGrid range(double lo, double step, double hi);

    [[nodiscard]] int size() const { return static_cast<int>(values_.size()); }
    [[nodiscard]] int dim() const { return values_.empty() ? 0 : static_cast<int>(values_.front().size()); }
    [[nodiscard]] const Vector& operator[](int a) const { return values_.at(static_cast<std::size_t>(a)); }
    [[nodiscard]] const std::vector<Vector>& values() const { return values_; }
    /// Index of the grid value closest (Euclidean) to u; ties go to the lower index.
    [[nodiscard]] int nearest(const Vector& u) const;

private:
    std::vector<Vector> values_;
};

/// Snapshot pairs x -> y collected under the constant control of one action.
struct TrajectoryDataset {
    int action_index = 0; // 0-based in memory, 1-based on disk
    std::vector<Vector> x;
    std::vector<Vector> y;
    std::uint64_t source_seed = 0;
    std::size_t dropped = 0; // pairs discarded because the image left the domain

    [[nodiscard]] std::size_t count() const { return x.size(); }
    [[nodiscard]] int dim() const { return x.empty() ? 0 : static_cast<int>(x.front().size()); }
};

Vector step_map(const SystemSpec& spec, const Vector& x, const Vector& u);
Vector vector_field(const SystemSpec& spec, const Vector& x, const Vector& u);
Vector integrate_flow(const SystemSpec& spec, const Vector& x, const Vector& u, double dt, int substeps);
/// One sample of the sampled system: step_map for maps, integrate_flow(dt, substeps) for flows.
Vector advance(const SystemSpec& spec, const Vector& x, const Vector& u);

/// Per-action datasets; initial conditions are uniform on the domain and drawn from a
/// stream seeded by (seed, action). A trajectory stops at its first out-of-domain image.
std::vector<TrajectoryDataset> generate_dataset(const SystemSpec& spec, const ControlGrid& grid, int n_traj,
                                                int traj_len, std::uint64_t seed);

/// Single dataset under an arbitrary constant control; `stream` selects the random stream.
TrajectoryDataset generate_action_dataset(const SystemSpec& spec, const Vector& u, int action_index, int n_traj,
                                          int traj_len, std::uint64_t seed, std::uint64_t stream);

void write_dataset(const TrajectoryDataset& data, const std::filesystem::path& path);
/// `expected_action` (0-based) is checked against every row when non-negative.
TrajectoryDataset read_dataset(const std::filesystem::path& path, int expected_action = -1);
std::string dataset_filename(int action_index);

} // namespace pfstab

#endif // PFSTAB_SYSTEMS_HPP
