#ifndef PFSTAB_CONTROL_HPP
#define PFSTAB_CONTROL_HPP

#include "pfstab/common.hpp"
#include "pfstab/dictionary.hpp"
#include "pfstab/optim.hpp"
#include "pfstab/systems.hpp"
#include "pfstab/transfer_operator.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace pfstab {

/// One P-F matrix per quantized control value, all in the same basis.
struct OperatorBank {
    ControlGrid actions;
    std::vector<PFMatrix> p_list;
    std::string dictionary_ref;

    [[nodiscard]] int basis_size() const { return p_list.empty() ? 0 : static_cast<int>(p_list.front().p_mat.rows()); }
    /// Throws DimensionMismatch / InvalidConfig when the bank is inconsistent.
    void validate(double tol = 1e-6) const;
};

/// Quadratic stage cost state_weight * dist(x, targets)^2 + control_weight * |u|^2.
struct QuadraticCost {
    std::vector<Vector> targets;
    double state_weight = 1.0;
    double control_weight = 1.0;

    [[nodiscard]] double operator()(const Vector& x, const Vector& u) const;
};

struct StabilizationProblem {
    std::vector<int> attractor_indices; // sorted, 0-based basis indices
    double gamma = 1.05;
    Vector m_vec;      // reference measure on the non-attractor indices
    Matrix cost;       // K x M, cost(j, a) = G(x_j*, u^a)
    bool normalize_flag = false;

    [[nodiscard]] std::vector<int> free_indices(int basis_size) const;
    void validate(int basis_size, int n_actions) const;
};

/// Attractor set = centers within r_att of any target (the nearest center is always included).
std::vector<int> attractor_indices_near(const RbfDictionary& dict, const std::vector<Vector>& targets, double r_att);

/// Builds a problem with m = 1 on every non-attractor index and cost evaluated at the centers.
StabilizationProblem make_stabilization_problem(const RbfDictionary& dict, const ControlGrid& grid,
                                                const QuadraticCost& cost, std::vector<int> attractor, double gamma,
                                                bool normalize_flag = false);

struct OccupationSolution {
    Matrix theta;    // (K - |A|) x M
    double objective = 0.0;
    Vector m_used;   // reference measure actually used (slack values when normalized)
    SolveStatus status;
    std::string message;
};

enum class FeedbackMode { PaperSum, PartitionOfUnity, NearestCenter };
std::string to_string(FeedbackMode mode);
FeedbackMode feedback_mode_from_string(const std::string& name);

struct Policy {
    std::vector<int> action_of;       // per basis index; -1 on attractor indices
    std::vector<char> flagged;        // 1 where theta was ~0 and the myopic action was used
    std::vector<Vector> control_of;   // control value per basis index (zero on the attractor)
    int attractor_action = 0;         // grid index nearest to u = 0
    FeedbackMode feedback_mode = FeedbackMode::PartitionOfUnity;
    bool grid_snap = false;
    ControlGrid grid;

    [[nodiscard]] int basis_size() const { return static_cast<int>(action_of.size()); }
};

struct LyapunovCertificate {
    Vector mu_bar;              // on non-attractor indices
    double spectral_radius = 0; // of gamma * P_cl^1
    double decay_bound = 0;     // spectral radius of P_cl^1 (geometric decay rate of the restricted chain)
    double gamma = 1;
    double min_mu = 0;
    double residual = 0;        // |(I - gamma P_cl^1) mu - m|_inf
    int power_iterations = 0;
    bool stalled = false;
    bool pass = false;
};

/// Deletes the rows and columns listed in `attractor` (sorted, 0-based).
Matrix restrict_operator(const Matrix& p, const std::vector<int>& attractor);

/// Variables are vec(theta) column-major (action-major blocks). Equalities encode
/// sum_a (I - gamma P_a^1) theta_a = m on the non-attractor indices; with normalize_flag the
/// measure becomes a slack m >= 1e-6 and sum_a theta_a = 1 is added.
LpProblem assemble_lp(const OperatorBank& bank, const StabilizationProblem& prob);

OccupationSolution solve_stabilization(const OperatorBank& bank, const StabilizationProblem& prob,
                                       const LpOptions& opts = {});

Policy extract_policy(const OccupationSolution& sol, const StabilizationProblem& prob, const ControlGrid& grid,
                      FeedbackMode mode = FeedbackMode::PartitionOfUnity, bool grid_snap = false);

Vector feedback(const Policy& policy, const RbfDictionary& dict, const Vector& x);

/// Column j of the result is column j of P_{a(j)}; attractor columns use the action nearest u = 0.
PFMatrix closed_loop_pf(const OperatorBank& bank, const Policy& policy);

/// Spectral radius of a nonnegative matrix by power iteration on (I + B) / 2.
double nonnegative_spectral_radius(const Matrix& b, double tol, int max_iter, int* iterations = nullptr,
                                   bool* stalled = nullptr);

LyapunovCertificate lyapunov_certificate(const PFMatrix& p_cl, const StabilizationProblem& prob, double tol = 1e-8);

double evaluate_cost(const OccupationSolution& sol, const StabilizationProblem& prob);

/// |gamma sum_a P_a^1 theta_a - sum_a theta_a + m|_inf.
double balance_residual(const OperatorBank& bank, const StabilizationProblem& prob, const OccupationSolution& sol);

void write_policy(const Policy& policy, const RbfDictionary& dict, const std::filesystem::path& path);
Policy read_policy(const std::filesystem::path& path, const ControlGrid& grid);

} // namespace pfstab

#endif // PFSTAB_CONTROL_HPP
