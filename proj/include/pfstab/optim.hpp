#ifndef PFSTAB_OPTIM_HPP
#define PFSTAB_OPTIM_HPP

#include "pfstab/common.hpp"

#include <iosfwd>
#include <string>

namespace pfstab {

/// minimize c^T z  subject to  A_eq z = b_eq,  z >= lb.
struct LpProblem {
    Vector c;
    Matrix A_eq;
    Vector b_eq;
    Vector lb; // empty means all zeros

    [[nodiscard]] int n_vars() const { return static_cast<int>(c.size()); }
    [[nodiscard]] int n_eq() const { return static_cast<int>(b_eq.size()); }
    void validate() const;
};

/// minimize 1/2 z^T H z + f^T z  subject to  A_eq z = b_eq,  A_ineq z >= b_ineq.
struct QpProblem {
    Matrix H;
    Vector f;
    Matrix A_eq;
    Vector b_eq;
    Matrix A_ineq;
    Vector b_ineq;

    [[nodiscard]] int n_vars() const { return static_cast<int>(f.size()); }
    void validate() const;
};

enum class SolveState { Optimal, Infeasible, Unbounded, MaxIter };
std::string to_string(SolveState state);

struct SolveStatus {
    SolveState state = SolveState::MaxIter;
    double objective = 0.0;
    double primal_feas = 0.0; // max equality / bound violation
    double dual_feas = 0.0;   // max dual (reduced cost) violation
    double gap = 0.0;         // relative duality gap
    int iterations = 0;

    [[nodiscard]] bool optimal() const { return state == SolveState::Optimal; }
};

struct LpResult {
    Vector z;
    Vector y;       // equality multipliers at the final basis
    Vector farkas;  // when Infeasible: y with A^T y <= 0 (shifted by lb) and b^T y > 0
    double farkas_violation = 0.0;
    SolveStatus status;
};

struct QpResult {
    Vector z;
    Vector y;      // equality multipliers
    Vector lambda; // inequality multipliers (>= 0)
    Vector farkas; // certificate from the feasibility LP when Infeasible
    SolveStatus status;
};

struct LpOptions {
    double tol = 1e-8;
    int max_iter = 200000;
    int refactor_every = 64;
};

struct QpOptions {
    double tol = 1e-9;
    double gap_tol = 1e-9; // average complementarity; degenerate optima may need it far below tol
    int max_iter = 200;
    bool check_feasibility = true; // run a phase-one LP before the interior point method
};

/// Dense two-phase revised simplex. Entering variables are priced by most negative reduced
/// cost with ties to the lowest index, falling back to Bland's rule after a run of degenerate
/// pivots; the leaving row breaks ties by lowest variable index.
LpResult solve_lp(const LpProblem& p, const LpOptions& opts = {});

/// Dense Mehrotra predictor-corrector interior point method.
QpResult solve_qp(const QpProblem& p, const QpOptions& opts = {});

/// Plain-text dump for offline debugging.
void dump_problem(std::ostream& out, const LpProblem& p);
void dump_problem(std::ostream& out, const QpProblem& p);

} // namespace pfstab

#endif // PFSTAB_OPTIM_HPP
