#include "pfstab/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

namespace pfstab {

std::string to_string(SolveState state) {
    switch (state) {
    case SolveState::Optimal: return "Optimal";
    case SolveState::Infeasible: return "Infeasible";
    case SolveState::Unbounded: return "Unbounded";
    case SolveState::MaxIter: return "MaxIter";
    }
    return "Unknown";
}

void LpProblem::validate() const {
    const auto n = c.size();
    if (A_eq.rows() != b_eq.size()) throw Error(ErrorCode::DimensionMismatch, "A_eq rows != b_eq size");
    if (A_eq.rows() > 0 && A_eq.cols() != n) throw Error(ErrorCode::DimensionMismatch, "A_eq cols != number of variables");
    if (lb.size() != 0 && lb.size() != n) throw Error(ErrorCode::DimensionMismatch, "lb size != number of variables");
    if (lb.size() && !lb.allFinite()) throw Error(ErrorCode::InvalidConfig, "lower bounds must be finite");
}

void QpProblem::validate() const {
    const auto n = f.size();
    if (H.rows() != n || H.cols() != n) throw Error(ErrorCode::DimensionMismatch, "H must be n x n");
    if (A_eq.rows() != b_eq.size() || (A_eq.rows() > 0 && A_eq.cols() != n))
        throw Error(ErrorCode::DimensionMismatch, "equality block has inconsistent dimensions");
    if (A_ineq.rows() != b_ineq.size() || (A_ineq.rows() > 0 && A_ineq.cols() != n))
        throw Error(ErrorCode::DimensionMismatch, "inequality block has inconsistent dimensions");
    if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, H.cwiseAbs().maxCoeff()))
        throw Error(ErrorCode::InvalidConfig, "H is not symmetric");
}

namespace {

struct Simplex {
    const Matrix& A; // sign-normalized constraint matrix (m x n)
    const Vector& b; // >= 0
    int m;
    int n;
    std::vector<int> basis;
    std::vector<char> is_basic;
    Matrix Binv;
    Vector xB;
    int iterations = 0;

    Simplex(const Matrix& A_, const Vector& b_)
        : A(A_), b(b_), m(static_cast<int>(A_.rows())), n(static_cast<int>(A_.cols())),
          basis(static_cast<std::size_t>(m)), is_basic(static_cast<std::size_t>(n + m), 0) {
        for (int i = 0; i < m; ++i) {
            basis[static_cast<std::size_t>(i)] = n + i;
            is_basic[static_cast<std::size_t>(n + i)] = 1;
        }
        Binv = Matrix::Identity(m, m);
        xB = b;
    }

    [[nodiscard]] bool artificial(int j) const { return j >= n; }

    void refactor() {
        if (m == 0) return;
        Matrix B(m, m);
        for (int i = 0; i < m; ++i) {
            const int j = basis[static_cast<std::size_t>(i)];
            if (artificial(j))
                B.col(i) = Vector::Unit(m, j - n);
            else
                B.col(i) = A.col(j);
        }
        Binv = B.partialPivLu().inverse();
        xB = Binv * b;
    }

    Vector column(int j) const { return artificial(j) ? Vector(Binv.col(j - n)) : Vector(Binv * A.col(j)); }

    void pivot(int r, int q, const Vector& w, double theta) {
        xB -= theta * w;
        xB[r] = theta;
        const Eigen::RowVectorXd row = Binv.row(r) / w[r];
        Binv.noalias() -= w * row;
        Binv.row(r) = row;
        is_basic[static_cast<std::size_t>(basis[static_cast<std::size_t>(r)])] = 0;
        basis[static_cast<std::size_t>(r)] = q;
        is_basic[static_cast<std::size_t>(q)] = 1;
    }

    // Runs one phase; returns Optimal, Unbounded or MaxIter.
    SolveState run(const Vector& cost, int phase, const LpOptions& opts, int& degenerate_streak) {
        const double piv_tol = 1e-11;
        const double d_tol = opts.tol * 0.1;
        for (;;) {
            if (iterations >= opts.max_iter) return SolveState::MaxIter;
            if (iterations % opts.refactor_every == 0) refactor();
            Vector cB(m);
            for (int i = 0; i < m; ++i) cB[i] = cost[basis[static_cast<std::size_t>(i)]];
            const Vector y = Binv.transpose() * cB;
            const Vector d = cost.head(n) - A.transpose() * y;

            int q = -1;
            const bool bland = degenerate_streak > 50;
            double best = -d_tol;
            for (int j = 0; j < n; ++j) {
                if (is_basic[static_cast<std::size_t>(j)]) continue;
                if (d[j] < best) {
                    q = j;
                    if (bland) break;
                    best = d[j];
                }
            }
            if (q < 0) return SolveState::Optimal;

            const Vector w = column(q);
            int r = -1;
            double best_ratio = std::numeric_limits<double>::infinity();
            for (int i = 0; i < m; ++i) {
                const int var = basis[static_cast<std::size_t>(i)];
                double ratio;
                if (phase == 2 && artificial(var)) {
                    if (std::abs(w[i]) <= piv_tol) continue;
                    ratio = 0.0;
                } else {
                    if (w[i] <= piv_tol) continue;
                    ratio = std::max(xB[i], 0.0) / w[i];
                }
                if (r < 0) {
                    r = i;
                    best_ratio = ratio;
                    continue;
                }
                const double tie = 1e-12 * (1.0 + best_ratio);
                if (ratio < best_ratio - tie) {
                    r = i;
                    best_ratio = ratio;
                } else if (ratio <= best_ratio + tie && var < basis[static_cast<std::size_t>(r)]) {
                    r = i;
                }
            }
            if (r < 0) return SolveState::Unbounded;
            const double theta = best_ratio;
            degenerate_streak = theta <= 1e-12 ? degenerate_streak + 1 : 0;
            pivot(r, q, w, theta);
            ++iterations;
        }
    }

    // After phase one, pivots zero-level artificials out of the basis where possible.
    void expel_artificials() {
        for (int i = 0; i < m; ++i) {
            if (!artificial(basis[static_cast<std::size_t>(i)])) continue;
            const Eigen::RowVectorXd row = Binv.row(i) * A;
            int best = -1;
            double best_v = 1e-9;
            for (int j = 0; j < n; ++j) {
                if (is_basic[static_cast<std::size_t>(j)]) continue;
                if (std::abs(row[j]) > best_v) {
                    best_v = std::abs(row[j]);
                    best = j;
                }
            }
            if (best < 0) continue; // redundant row
            const Vector w = column(best);
            pivot(i, best, w, xB[i] / w[i]);
        }
    }

    Vector primal() const {
        Vector x = Vector::Zero(n);
        for (int i = 0; i < m; ++i) {
            const int j = basis[static_cast<std::size_t>(i)];
            if (!artificial(j)) x[j] = std::max(xB[i], 0.0);
        }
        return x;
    }
};

} // namespace

LpResult solve_lp(const LpProblem& p, const LpOptions& opts) {
    p.validate();
    const int m = p.n_eq();
    const int n = p.n_vars();
    const Vector lb = p.lb.size() ? p.lb : Vector::Zero(n);

    Vector b = m > 0 ? Vector(p.b_eq - p.A_eq * lb) : Vector(0);
    Vector sign = Vector::Ones(m);
    for (int i = 0; i < m; ++i)
        if (b[i] < 0) sign[i] = -1.0;
    const Matrix A = m > 0 ? Matrix(sign.asDiagonal() * p.A_eq) : Matrix(0, n);
    b = sign.cwiseProduct(b);

    Simplex sx(A, b);
    LpResult res;
    int streak = 0;
    const double b_scale = 1.0 + (m > 0 ? b.cwiseAbs().maxCoeff() : 0.0);

    // phase one
    Vector cost1 = Vector::Zero(n + m);
    cost1.tail(m).setOnes();
    SolveState s1 = sx.run(cost1, 1, opts, streak);
    sx.refactor();
    double infeas = 0.0;
    for (int i = 0; i < m; ++i)
        if (sx.artificial(sx.basis[static_cast<std::size_t>(i)])) infeas += std::max(sx.xB[i], 0.0);

    auto fill_status = [&](SolveState state) {
        res.z = lb + sx.primal();
        res.status.state = state;
        res.status.iterations = sx.iterations;
        res.status.objective = p.c.dot(res.z);
        res.status.primal_feas = m > 0 ? (p.A_eq * res.z - p.b_eq).cwiseAbs().maxCoeff() : 0.0;
    };

    if (s1 == SolveState::MaxIter) {
        fill_status(SolveState::MaxIter);
        return res;
    }
    if (infeas > opts.tol * b_scale) {
        Vector cB(m);
        for (int i = 0; i < m; ++i) cB[i] = cost1[sx.basis[static_cast<std::size_t>(i)]];
        const Vector y = sx.Binv.transpose() * cB;
        // Farkas: A^T y <= 0 and b^T y > 0 for the lb-shifted system.
        res.farkas = sign.cwiseProduct(y);
        res.farkas_violation = b.dot(y);
        fill_status(SolveState::Infeasible);
        res.status.primal_feas = infeas;
        return res;
    }

    sx.expel_artificials();
    Vector cost2 = Vector::Zero(n + m);
    cost2.head(n) = p.c;
    streak = 0;
    const SolveState s2 = sx.run(cost2, 2, opts, streak);
    sx.refactor();
    fill_status(s2);

    Vector cB(m);
    for (int i = 0; i < m; ++i) cB[i] = cost2[sx.basis[static_cast<std::size_t>(i)]];
    const Vector y = sx.Binv.transpose() * cB;
    res.y = sign.cwiseProduct(y);
    const Vector d = p.c - (m > 0 ? Vector(p.A_eq.transpose() * res.y) : Vector(Vector::Zero(n)));
    res.status.dual_feas = n > 0 ? std::max(0.0, -d.minCoeff()) : 0.0;
    const double dual_obj = (m > 0 ? p.b_eq.dot(res.y) : 0.0) + d.dot(lb);
    res.status.gap = std::abs(res.status.objective - dual_obj) / (1.0 + std::abs(res.status.objective));
    if (s2 == SolveState::Optimal) {
        const double feas_tol = opts.tol * b_scale;
        if (res.status.primal_feas > feas_tol || (res.z - lb).minCoeff() < -feas_tol) res.status.state = SolveState::MaxIter;
    }
    return res;
}

namespace {

double max_step(const Vector& v, const Vector& dv) {
    double alpha = 1.0;
    for (Eigen::Index i = 0; i < v.size(); ++i)
        if (dv[i] < 0.0) alpha = std::min(alpha, -v[i] / dv[i]);
    return alpha;
}

double inf_norm(const Vector& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

} // namespace

QpResult solve_qp(const QpProblem& p, const QpOptions& opts) {
    p.validate();
    const int n = p.n_vars();
    const auto me = p.A_eq.rows();
    const auto mi = p.A_ineq.rows();
    const Matrix E = me ? p.A_eq : Matrix(0, n);
    const Matrix C = mi ? p.A_ineq : Matrix(0, n);
    QpResult res;

    if (opts.check_feasibility && (me > 0 || mi > 0)) {
        // z = zp - zm, C z - s = d, s >= 0
        LpProblem feas;
        feas.c = Vector::Zero(2 * n + mi);
        feas.A_eq = Matrix::Zero(me + mi, 2 * n + mi);
        feas.b_eq.resize(me + mi);
        if (me) {
            feas.A_eq.block(0, 0, me, n) = E;
            feas.A_eq.block(0, n, me, n) = -E;
            feas.b_eq.head(me) = p.b_eq;
        }
        if (mi) {
            feas.A_eq.block(me, 0, mi, n) = C;
            feas.A_eq.block(me, n, mi, n) = -C;
            feas.A_eq.block(me, 2 * n, mi, mi) = -Matrix::Identity(mi, mi);
            feas.b_eq.tail(mi) = p.b_ineq;
        }
        const LpResult lp = solve_lp(feas);
        if (lp.status.state == SolveState::Infeasible) {
            res.farkas = lp.farkas;
            res.status.state = SolveState::Infeasible;
            res.status.primal_feas = lp.status.primal_feas;
            res.z = Vector::Zero(n);
            return res;
        }
    }

    Vector z = Vector::Zero(n);
    Vector y = Vector::Zero(me);
    Vector s = mi ? Vector((C * z - p.b_ineq).cwiseMax(1.0)) : Vector(0);
    Vector lam = Vector::Ones(mi);
    const double f_scale = 1.0 + inf_norm(p.f) + p.H.cwiseAbs().maxCoeff();
    const double b_scale = 1.0 + std::max(inf_norm(p.b_eq), inf_norm(p.b_ineq));

    res.status.state = SolveState::MaxIter;
    for (int iter = 0; iter < opts.max_iter; ++iter) {
        const Vector r_d = p.H * z + p.f - E.transpose() * y - C.transpose() * lam;
        const Vector r_e = me ? Vector(E * z - p.b_eq) : Vector(0);
        const Vector r_i = mi ? Vector(C * z - s - p.b_ineq) : Vector(0);
        const double mu = mi ? s.dot(lam) / static_cast<double>(mi) : 0.0;
        res.status.iterations = iter;
        res.status.primal_feas = std::max(inf_norm(r_e), inf_norm(r_i));
        res.status.dual_feas = inf_norm(r_d);
        res.status.gap = mu;
        if (res.status.primal_feas <= opts.tol * b_scale && res.status.dual_feas <= opts.tol * f_scale &&
            mu <= opts.gap_tol) {
            res.status.state = SolveState::Optimal;
            break;
        }
        if (inf_norm(z) > 1e15) {
            res.status.state = SolveState::Unbounded;
            break;
        }

        const Vector sigma_diag = mi ? Vector(lam.cwiseQuotient(s)) : Vector(0);
        Matrix kkt = Matrix::Zero(n + me, n + me);
        kkt.topLeftCorner(n, n) = p.H;
        if (mi) kkt.topLeftCorner(n, n).noalias() += C.transpose() * sigma_diag.asDiagonal() * C;
        kkt.topLeftCorner(n, n).diagonal().array() += 1e-12 * f_scale;
        if (me) {
            kkt.topRightCorner(n, me) = E.transpose();
            kkt.bottomLeftCorner(me, n) = E;
            kkt.bottomRightCorner(me, me).diagonal().array() = -1e-13 * f_scale;
        }
        const Eigen::PartialPivLU<Matrix> lu(kkt);

        struct Dir {
            Vector dz, dy, ds, dl;
        };
        auto solve_dir = [&](const Vector& r_c) {
            Vector rhs(n + me);
            Vector tmp = mi ? Vector(r_c.cwiseQuotient(s) + sigma_diag.cwiseProduct(r_i)) : Vector(0);
            rhs.head(n) = -r_d - (mi ? Vector(C.transpose() * tmp) : Vector(Vector::Zero(n)));
            if (me) rhs.tail(me) = -r_e;
            const Vector sol = lu.solve(rhs);
            Dir d;
            d.dz = sol.head(n);
            d.dy = me ? Vector(-sol.tail(me)) : Vector(0);
            if (mi) {
                d.ds = C * d.dz + r_i;
                d.dl = -(r_c.cwiseQuotient(s)) - sigma_diag.cwiseProduct(d.ds);
            }
            return d;
        };

        Dir step;
        if (mi) {
            const Vector rc_aff = s.cwiseProduct(lam);
            const Dir aff = solve_dir(rc_aff);
            const double a_aff = std::min(max_step(s, aff.ds), max_step(lam, aff.dl));
            const double mu_aff = (s + a_aff * aff.ds).dot(lam + a_aff * aff.dl) / static_cast<double>(mi);
            const double centering = std::pow(mu_aff / mu, 3);
            const Vector rc = rc_aff + aff.ds.cwiseProduct(aff.dl) - Vector::Constant(mi, centering * mu);
            step = solve_dir(rc);
        } else {
            step = solve_dir(Vector(0));
        }
        double alpha = 1.0;
        if (mi) alpha = std::min(1.0, 0.995 * std::min(max_step(s, step.ds), max_step(lam, step.dl)));
        z += alpha * step.dz;
        if (me) y += alpha * step.dy;
        if (mi) {
            s += alpha * step.ds;
            lam += alpha * step.dl;
            s = s.cwiseMax(1e-300);
            lam = lam.cwiseMax(1e-300);
        }
    }
    res.z = z;
    res.y = y;
    res.lambda = lam;
    res.status.objective = 0.5 * z.dot(p.H * z) + p.f.dot(z);
    return res;
}

void dump_problem(std::ostream& out, const LpProblem& p) {
    const Eigen::IOFormat fmt(Eigen::FullPrecision, Eigen::DontAlignCols, " ", "\n");
    out << "# lp n_vars " << p.n_vars() << " n_eq " << p.n_eq() << "\n# c\n"
        << p.c.transpose().format(fmt) << "\n# A_eq\n"
        << p.A_eq.format(fmt) << "\n# b_eq\n"
        << p.b_eq.transpose().format(fmt) << "\n# lb\n"
        << p.lb.transpose().format(fmt) << "\n";
}

void dump_problem(std::ostream& out, const QpProblem& p) {
    const Eigen::IOFormat fmt(Eigen::FullPrecision, Eigen::DontAlignCols, " ", "\n");
    out << "# qp n_vars " << p.n_vars() << "\n# H\n"
        << p.H.format(fmt) << "\n# f\n"
        << p.f.transpose().format(fmt) << "\n# A_eq\n"
        << p.A_eq.format(fmt) << "\n# b_eq\n"
        << p.b_eq.transpose().format(fmt) << "\n# A_ineq\n"
        << p.A_ineq.format(fmt) << "\n# b_ineq\n"
        << p.b_ineq.transpose().format(fmt) << "\n";
}

} // namespace pfstab
