#ifndef PFSTAB_TRANSFER_OPERATOR_HPP
#define PFSTAB_TRANSFER_OPERATOR_HPP

#include "pfstab/common.hpp"
#include "pfstab/dictionary.hpp"
#include "pfstab/optim.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace pfstab {

enum class NsdmdMethod {
    Auto,    // DenseQp for small dictionaries, Admm otherwise
    DenseQp, // flattened QP handed to solve_qp
    Admm,    // operator splitting on the matrix form
};

std::string to_string(NsdmdMethod method);
NsdmdMethod nsdmd_method_from_string(const std::string& name);

struct NsdmdConfig {
    double tol_feas = 1e-8;
    double tol_opt = 1e-7;
    int max_iter = 2000;
    bool post_project = true;
    NsdmdMethod method = NsdmdMethod::Auto;
    int dense_max_basis = 12;

    void validate() const;
};

struct KoopmanMatrix {
    Matrix k_mat;
    double fit_residual = 0.0;          // |G K - A|_F
    double constraint_violation = 0.0;  // largest violation over all constraint families
};

/// Column-stochastic: column j is the image of basis element j.
struct PFMatrix {
    Matrix p_mat;
};

struct EdmdFit {
    KoopmanMatrix koopman;
    int rank = 0;
    bool rank_deficient = false;
};

struct NsdmdFit {
    KoopmanMatrix koopman;
    PFMatrix pf;
    SolveStatus status;
    NsdmdMethod method_used = NsdmdMethod::Auto;
    double edmd_residual = 0.0;
    double projection_deviation = 0.0; // change made by post-projection of P
    std::vector<std::string> warnings;
};

struct MarkovReport {
    double max_negative_entry = 0.0;       // magnitude of the most negative entry (0 if none)
    double max_column_sum_deviation = 0.0; // max_j |sum_i P_ij - 1|
    bool pass = false;
};

double fit_residual(const GramSet& grams, const Matrix& k_mat);

/// K0 = G^+ A with singular values below 1e-10 sigma_max discarded.
EdmdFit fit_edmd_unconstrained(const GramSet& grams);

/// min |G K - A|_F  s.t.  K >= 0,  Lambda K Lambda^-1 >= 0,  Lambda K Lambda^-1 1 = 1.
NsdmdFit fit_nsdmd(const GramSet& grams, const LambdaMatrix& lam, const NsdmdConfig& cfg = {});

/// The NSDMD problem over vec(K) (column-major) as a dense QP.
QpProblem nsdmd_qp(const GramSet& grams, const LambdaMatrix& lam);

/// P = Lambda^-1 K^T Lambda.
PFMatrix pf_from_koopman(const KoopmanMatrix& k, const LambdaMatrix& lam);
/// Inverse of pf_from_koopman: K = (Lambda P Lambda^-1)^T.
Matrix koopman_from_pf(const PFMatrix& p, const LambdaMatrix& lam);

MarkovReport validate_markov(const PFMatrix& p, double tol);

/// Euclidean projection of every row of `m` onto the probability simplex.
Matrix project_rows_to_simplex(const Matrix& m);

/// Writes P_a{a}.csv and operator_a{a}.json (plus koopman/K_a{a}.csv) under `dir`; a is 0-based.
void write_operator(const NsdmdFit& fit, int action_index, const std::string& config_hash,
                    const std::filesystem::path& dir);
PFMatrix read_pf(const std::filesystem::path& dir, int action_index);
std::string pf_filename(int action_index);

} // namespace pfstab

#endif // PFSTAB_TRANSFER_OPERATOR_HPP
