#include "pfstab/transfer_operator.hpp"
#include "pfstab/csv.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

namespace pfstab {

std::string to_string(NsdmdMethod method) {
    switch (method) {
    case NsdmdMethod::Auto: return "auto";
    case NsdmdMethod::DenseQp: return "dense_qp";
    case NsdmdMethod::Admm: return "admm";
    }
    return "unknown";
}

NsdmdMethod nsdmd_method_from_string(const std::string& name) {
    for (auto m : {NsdmdMethod::Auto, NsdmdMethod::DenseQp, NsdmdMethod::Admm})
        if (to_string(m) == name) return m;
    throw Error(ErrorCode::InvalidConfig, "unknown NSDMD method '" + name + "'");
}

void NsdmdConfig::validate() const {
    if (!(tol_feas > 0.0) || !(tol_opt > 0.0)) throw Error(ErrorCode::InvalidConfig, "NSDMD tolerances must be > 0");
    if (max_iter < 1) throw Error(ErrorCode::InvalidConfig, "NSDMD max_iter must be >= 1");
}

double fit_residual(const GramSet& grams, const Matrix& k_mat) { return (grams.G * k_mat - grams.A).norm(); }

EdmdFit fit_edmd_unconstrained(const GramSet& grams) {
    if (grams.G.rows() != grams.G.cols() || grams.A.rows() != grams.G.rows())
        throw Error(ErrorCode::DimensionMismatch, "Gram matrices must be square and of equal size");
    if (grams.G.cwiseAbs().maxCoeff() == 0.0) throw Error(ErrorCode::InvalidConfig, "G is zero");
    const Eigen::SelfAdjointEigenSolver<Matrix> es(grams.G);
    const Vector& ev = es.eigenvalues();
    const double cutoff = 1e-10 * ev.cwiseAbs().maxCoeff();
    Vector inv = Vector::Zero(ev.size());
    int rank = 0;
    for (Eigen::Index i = 0; i < ev.size(); ++i)
        if (std::abs(ev[i]) > cutoff) {
            inv[i] = 1.0 / ev[i];
            ++rank;
        }
    EdmdFit fit;
    fit.koopman.k_mat = es.eigenvectors() * inv.asDiagonal() * (es.eigenvectors().transpose() * grams.A);
    fit.koopman.fit_residual = fit_residual(grams, fit.koopman.k_mat);
    fit.rank = rank;
    fit.rank_deficient = rank < ev.size();
    return fit;
}

Matrix project_rows_to_simplex(const Matrix& m) {
    // Michelot's method on contiguous columns of the transpose: drop entries below the
    // current threshold until the support stops shrinking.
    Matrix t = m.transpose();
    const auto n = t.rows();
    std::vector<double> active(static_cast<std::size_t>(n));
    for (Eigen::Index c = 0; c < t.cols(); ++c) {
        double* col = t.col(c).data();
        std::size_t size = static_cast<std::size_t>(n);
        std::copy(col, col + n, active.begin());
        double tau = 0.0;
        while (true) {
            double sum = 0.0;
            for (std::size_t i = 0; i < size; ++i) sum += active[i];
            tau = (sum - 1.0) / static_cast<double>(size);
            std::size_t kept = 0;
            for (std::size_t i = 0; i < size; ++i)
                if (active[i] > tau) active[kept++] = active[i];
            if (kept == size || kept == 0) break;
            size = kept;
        }
        for (Eigen::Index i = 0; i < n; ++i) col[i] = std::max(col[i] - tau, 0.0);
    }
    return t.transpose();
}

namespace {

struct LambdaFactor {
    Matrix V;
    Vector d; // eigenvalues of Lambda, normalized to max 1
    Matrix lambda_inv;
};

LambdaFactor factor_lambda(const LambdaMatrix& lam) {
    const auto n = lam.lambda.rows();
    if (lam.lambda.cols() != n) throw Error(ErrorCode::SingularLambda, "Lambda must be square");
    const Eigen::SelfAdjointEigenSolver<Matrix> es(lam.lambda);
    if (es.info() != Eigen::Success) throw Error(ErrorCode::SingularLambda, "eigendecomposition failed");
    const double top = es.eigenvalues().maxCoeff();
    const double bottom = es.eigenvalues().minCoeff();
    if (!(bottom > 0.0) || bottom < 1e-15 * top)
        throw Error(ErrorCode::SingularLambda, "smallest eigenvalue " + std::to_string(bottom) + " relative to " +
                                                   std::to_string(top));
    LambdaFactor f;
    f.V = es.eigenvectors();
    f.d = es.eigenvalues() / top;
    f.lambda_inv = f.V * es.eigenvalues().cwiseInverse().asDiagonal() * f.V.transpose();
    return f;
}

double koopman_violation(const Matrix& k_mat, const Matrix& markov) {
    double v = std::max(0.0, -k_mat.minCoeff());
    v = std::max(v, std::max(0.0, -markov.minCoeff()));
    v = std::max(v, (markov.rowwise().sum().array() - 1.0).abs().maxCoeff());
    return v;
}

struct AdmmOutcome {
    Matrix markov; // Lambda K Lambda^-1, row-stochastic
    SolveStatus status;
};

// Operator splitting with K - Z1 = 0 (Z1 >= 0) and Lambda K Lambda^-1 - Z2 = 0 (Z2 row-stochastic).
// The K-update is a generalized Sylvester equation solved exactly in the eigenbasis of Lambda.
AdmmOutcome solve_admm(const GramSet& grams, const LambdaFactor& lf, const Matrix& warm, const NsdmdConfig& cfg) {
    const auto n = grams.G.rows();
    const Matrix& V = lf.V;
    const Vector& d = lf.d;
    const Vector d_inv = d.cwiseInverse();
    const Matrix H = grams.G.transpose() * grams.G;
    const Matrix GtA = grams.G.transpose() * grams.A;
    const Matrix H_hat = V.transpose() * H * V;
    const Matrix GtA_hat = V.transpose() * GtA * V;
    const double grad_scale = std::max(GtA.cwiseAbs().maxCoeff(), 1e-300);

    auto to_markov = [&](const Matrix& K_hat) -> Matrix {
        return V * (d.asDiagonal() * K_hat * d_inv.asDiagonal()) * V.transpose();
    };
    // Lambda / max eig and its inverse; used in the dual residual
    const Matrix lam_n = V * d.asDiagonal() * V.transpose();
    const Matrix lam_n_inv = V * d_inv.asDiagonal() * V.transpose();
    const Matrix v_dinv = V * d_inv.asDiagonal();
    const Matrix dinv_vt = d_inv.asDiagonal() * V.transpose();

    double rho = std::max(H.diagonal().maxCoeff(), 1e-12);
    Vector mu;
    Matrix Q, qt_dinv_vt, qt_vt, v_dinv_q, v_q, t_const;
    auto refactor = [&]() {
        Matrix S = d_inv.asDiagonal() * H_hat * d_inv.asDiagonal();
        S.diagonal() += rho * d_inv.cwiseAbs2();
        S = 0.5 * (S + S.transpose()).eval();
        const Eigen::SelfAdjointEigenSolver<Matrix> es(S);
        mu = es.eigenvalues();
        Q = es.eigenvectors();
        qt_dinv_vt = Q.transpose() * dinv_vt;
        qt_vt = Q.transpose() * V.transpose();
        v_dinv_q = v_dinv * Q;
        v_q = V * Q;
        t_const = Q.transpose() * (d_inv.asDiagonal() * GtA_hat);
    };
    refactor();

    Matrix K = warm;
    Matrix Z1 = K.cwiseMax(0.0);
    Matrix Z2 = project_rows_to_simplex(to_markov(V.transpose() * K * V));
    Matrix U1 = Matrix::Zero(n, n);
    Matrix U2 = Matrix::Zero(n, n);
    Matrix T(n, n), LK(n, n);
    const double relax = 1.6;

    AdmmOutcome out;
    out.status.state = SolveState::MaxIter;
    double best_violation = std::numeric_limits<double>::infinity();
    out.markov = Z2;
    for (int iter = 1; iter <= cfg.max_iter; ++iter) {
        // K-update: (H + rho I) K + rho Lambda^2 K Lambda^-2 = G^T A + rho (Z1 - U1) + rho Lambda (Z2 - U2) Lambda^-1,
        // diagonalized by V and then by the eigenvectors Q of the scaled system.
        T = t_const;
        T.noalias() += rho * (qt_dinv_vt * ((Z1 - U1) * V));
        T.noalias() += rho * (qt_vt * ((Z2 - U2) * v_dinv));
        for (Eigen::Index j = 0; j < n; ++j) {
            const double shift = rho * d_inv[j] * d_inv[j];
            T.col(j).array() /= (mu.array() + shift);
        }
        K.noalias() = v_dinv_q * (T * V.transpose());
        LK.noalias() = v_q * (T * dinv_vt);

        const Matrix X1 = relax * K + (1.0 - relax) * Z1;
        const Matrix X2 = relax * LK + (1.0 - relax) * Z2;
        const Matrix Z1_old = Z1;
        const Matrix Z2_old = Z2;
        Z1 = (X1 + U1).cwiseMax(0.0);
        Z2 = project_rows_to_simplex(X2 + U2);
        U1 += X1 - Z1;
        U2 += X2 - Z2;

        if (iter % 10 != 0 && iter != cfg.max_iter) continue;
        const double r1 = (K - Z1).cwiseAbs().maxCoeff();
        const double r2 = (LK - Z2).cwiseAbs().maxCoeff();
        const double primal = std::max(r1, r2);
        const Matrix dual_mat = rho * (Z1 - Z1_old) + rho * (lam_n * (Z2 - Z2_old) * lam_n_inv);
        const double dual = dual_mat.cwiseAbs().maxCoeff() / grad_scale;
        out.status.iterations = iter;
        out.status.primal_feas = primal;
        out.status.dual_feas = dual;
        if (primal < best_violation) {
            best_violation = primal;
            out.markov = Z2;
        }
        if (primal <= cfg.tol_feas && dual <= cfg.tol_opt) {
            out.status.state = SolveState::Optimal;
            out.markov = Z2;
            break;
        }
        if (iter % 50 == 0) {
            // residual balancing
            const double ratio = (primal / std::max(1.0, K.cwiseAbs().maxCoeff())) / std::max(dual, 1e-300);
            double factor = 1.0;
            if (ratio > 10.0) factor = std::min(std::sqrt(ratio), 10.0);
            if (ratio < 0.1) factor = std::max(std::sqrt(ratio), 0.1);
            if (factor != 1.0) {
                rho *= factor;
                U1 /= factor;
                U2 /= factor;
                refactor();
            }
        }
    }
    return out;
}

} // namespace

QpProblem nsdmd_qp(const GramSet& grams, const LambdaMatrix& lam) {
    const auto n = grams.G.rows();
    const LambdaFactor lf = factor_lambda(lam);
    const Matrix& L = lam.lambda;
    const Matrix& Li = lf.lambda_inv;
    const auto nn = n * n;
    QpProblem qp;
    const Matrix H = grams.G.transpose() * grams.G;
    const Matrix GtA = grams.G.transpose() * grams.A;
    qp.H = Matrix::Zero(nn, nn);
    for (Eigen::Index c = 0; c < n; ++c) qp.H.block(c * n, c * n, n, n) = H;
    qp.H = 0.5 * (qp.H + qp.H.transpose()).eval();
    qp.f = -Eigen::Map<const Vector>(GtA.data(), nn);

    // vec(Lambda K Lambda^-1) = (Lambda^-1 kron Lambda) vec(K)
    const Vector w = Li * Vector::Ones(n);
    qp.A_eq = Matrix::Zero(n, nn);
    for (Eigen::Index c = 0; c < n; ++c) qp.A_eq.block(0, c * n, n, n) = w[c] * L;
    qp.b_eq = Vector::Ones(n);
    qp.A_ineq = Matrix::Zero(2 * nn, nn);
    qp.A_ineq.topRows(nn).setIdentity();
    for (Eigen::Index r = 0; r < n; ++r)
        for (Eigen::Index c = 0; c < n; ++c) qp.A_ineq.block(nn + r * n, c * n, n, n) = Li(c, r) * L;
    qp.b_ineq = Vector::Zero(2 * nn);
    return qp;
}

PFMatrix pf_from_koopman(const KoopmanMatrix& k, const LambdaMatrix& lam) {
    const LambdaFactor lf = factor_lambda(lam);
    if (k.k_mat.rows() != lam.lambda.rows() || k.k_mat.cols() != lam.lambda.cols())
        throw Error(ErrorCode::DimensionMismatch, "Koopman and Lambda sizes differ");
    return PFMatrix{lf.lambda_inv * k.k_mat.transpose() * lam.lambda};
}

Matrix koopman_from_pf(const PFMatrix& p, const LambdaMatrix& lam) {
    const LambdaFactor lf = factor_lambda(lam);
    return (lam.lambda * p.p_mat * lf.lambda_inv).transpose();
}

MarkovReport validate_markov(const PFMatrix& p, double tol) {
    MarkovReport r;
    r.max_negative_entry = std::max(0.0, -p.p_mat.minCoeff());
    r.max_column_sum_deviation = (p.p_mat.colwise().sum().array() - 1.0).abs().maxCoeff();
    r.pass = r.max_negative_entry <= tol && r.max_column_sum_deviation <= tol;
    return r;
}

NsdmdFit fit_nsdmd(const GramSet& grams, const LambdaMatrix& lam, const NsdmdConfig& cfg) {
    cfg.validate();
    const auto n = grams.G.rows();
    if (lam.lambda.rows() != n) throw Error(ErrorCode::DimensionMismatch, "Lambda and Gram sizes differ");
    const LambdaFactor lf = factor_lambda(lam);
    const EdmdFit edmd = fit_edmd_unconstrained(grams);

    NsdmdFit fit;
    fit.edmd_residual = edmd.koopman.fit_residual;
    fit.method_used = cfg.method;
    if (fit.method_used == NsdmdMethod::Auto)
        fit.method_used = n <= cfg.dense_max_basis ? NsdmdMethod::DenseQp : NsdmdMethod::Admm;

    Matrix K;
    Matrix markov;
    if (fit.method_used == NsdmdMethod::DenseQp) {
        QpOptions opts;
        opts.tol = std::min(cfg.tol_feas, cfg.tol_opt);
        // the objective is half the squared residual, so the gap must be near its square
        opts.gap_tol = 1e-15;
        opts.max_iter = std::max(200, std::min(cfg.max_iter, 1000));
        const QpResult qp = solve_qp(nsdmd_qp(grams, lam), opts);
        fit.status = qp.status;
        if (qp.status.state == SolveState::Infeasible) {
            fit.warnings.push_back("NSDMD constraint set reported infeasible");
            fit.koopman.k_mat = Matrix::Identity(n, n);
            fit.pf.p_mat = Matrix::Identity(n, n);
            return fit;
        }
        K = Eigen::Map<const Matrix>(qp.z.data(), n, n);
        markov = lam.lambda * K * lf.lambda_inv;
    } else {
        const AdmmOutcome out = solve_admm(grams, lf, edmd.koopman.k_mat, cfg);
        fit.status = out.status;
        markov = out.markov;
        K = lf.lambda_inv * markov * lam.lambda;
    }
    fit.koopman.k_mat = K;
    fit.koopman.fit_residual = fit_residual(grams, K);
    fit.koopman.constraint_violation = koopman_violation(K, markov);
    fit.status.objective = fit.koopman.fit_residual;
    fit.pf.p_mat = markov.transpose();

    if (cfg.post_project) {
        Matrix projected = fit.pf.p_mat.cwiseMax(0.0);
        const Vector sums = projected.colwise().sum().transpose();
        for (Eigen::Index j = 0; j < n; ++j)
            if (sums[j] > 0.0) projected.col(j) /= sums[j];
        fit.projection_deviation = (projected - fit.pf.p_mat).cwiseAbs().maxCoeff();
        if (fit.projection_deviation > 1e-6) {
            std::ostringstream msg;
            msg << "post-projection changed P by " << fit.projection_deviation;
            fit.warnings.push_back(msg.str());
        }
        fit.pf.p_mat = std::move(projected);
    }
    if (fit.status.state != SolveState::Optimal) {
        std::ostringstream msg;
        msg << "NSDMD solver stopped with status " << to_string(fit.status.state) << " after "
            << fit.status.iterations << " iterations (primal " << fit.status.primal_feas << ", dual "
            << fit.status.dual_feas << ")";
        fit.warnings.push_back(msg.str());
    }
    return fit;
}

std::string pf_filename(int action_index) { return "P_a" + std::to_string(action_index + 1) + ".csv"; }

void write_operator(const NsdmdFit& fit, int action_index, const std::string& config_hash,
                    const std::filesystem::path& dir) {
    const std::string tag = std::to_string(action_index + 1);
    csv::write_matrix(fit.pf.p_mat, dir / pf_filename(action_index));
    csv::write_matrix(fit.koopman.k_mat, dir / "koopman" / ("K_a" + tag + ".csv"));
    const MarkovReport mr = validate_markov(fit.pf, 1e-6);
    nlohmann::json meta = {{"action_index", action_index + 1},
                           {"fit_residual", fit.koopman.fit_residual},
                           {"edmd_residual", fit.edmd_residual},
                           {"constraint_violation", fit.koopman.constraint_violation},
                           {"projection_deviation", fit.projection_deviation},
                           {"max_negative_entry", mr.max_negative_entry},
                           {"max_column_sum_deviation", mr.max_column_sum_deviation},
                           {"solver_status", to_string(fit.status.state)},
                           {"solver_iterations", fit.status.iterations},
                           {"method", to_string(fit.method_used)},
                           {"warnings", fit.warnings},
                           {"config_hash", config_hash}};
    csv::write_text(dir / ("operator_a" + tag + ".json"), meta.dump(2) + "\n");
}

PFMatrix read_pf(const std::filesystem::path& dir, int action_index) {
    return PFMatrix{csv::read_matrix(dir / pf_filename(action_index))};
}

} // namespace pfstab
