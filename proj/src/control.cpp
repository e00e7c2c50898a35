#include "pfstab/control.hpp"
#include "pfstab/csv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace pfstab {

void OperatorBank::validate(double tol) const {
    if (p_list.empty()) throw Error(ErrorCode::InvalidConfig, "operator bank is empty");
    if (static_cast<int>(p_list.size()) != actions.size())
        throw Error(ErrorCode::DimensionMismatch, "bank has " + std::to_string(p_list.size()) + " operators for " +
                                                      std::to_string(actions.size()) + " actions");
    const auto k = p_list.front().p_mat.rows();
    for (std::size_t a = 0; a < p_list.size(); ++a) {
        const auto& p = p_list[a].p_mat;
        if (p.rows() != k || p.cols() != k)
            throw Error(ErrorCode::DimensionMismatch, "operator " + std::to_string(a + 1) + " is not " +
                                                          std::to_string(k) + "x" + std::to_string(k));
        const MarkovReport r = validate_markov(p_list[a], tol);
        if (!r.pass)
            throw Error(ErrorCode::InvalidConfig, "operator " + std::to_string(a + 1) + " is not column-stochastic");
    }
}

double QuadraticCost::operator()(const Vector& x, const Vector& u) const {
    double d2 = targets.empty() ? x.squaredNorm() : std::numeric_limits<double>::infinity();
    for (const auto& t : targets) d2 = std::min(d2, (x - t).squaredNorm());
    return state_weight * d2 + control_weight * u.squaredNorm();
}

std::vector<int> StabilizationProblem::free_indices(int basis_size) const {
    std::vector<int> out;
    std::size_t next = 0;
    for (int j = 0; j < basis_size; ++j) {
        if (next < attractor_indices.size() && attractor_indices[next] == j) {
            ++next;
            continue;
        }
        out.push_back(j);
    }
    return out;
}

void StabilizationProblem::validate(int basis_size, int n_actions) const {
    if (attractor_indices.empty()) throw Error(ErrorCode::InvalidConfig, "attractor index set is empty");
    if (!std::is_sorted(attractor_indices.begin(), attractor_indices.end()) ||
        std::adjacent_find(attractor_indices.begin(), attractor_indices.end()) != attractor_indices.end())
        throw Error(ErrorCode::InvalidConfig, "attractor indices must be sorted and unique");
    if (attractor_indices.front() < 0 || attractor_indices.back() >= basis_size)
        throw Error(ErrorCode::InvalidConfig, "attractor index out of range");
    if (static_cast<int>(attractor_indices.size()) == basis_size)
        throw Error(ErrorCode::AllStatesAttractor, "every basis element is in the attractor");
    if (!(gamma > 0.0)) throw Error(ErrorCode::InvalidConfig, "gamma must be > 0");
    const auto n_free = basis_size - static_cast<int>(attractor_indices.size());
    if (m_vec.size() != n_free)
        throw Error(ErrorCode::DimensionMismatch, "m has " + std::to_string(m_vec.size()) + " entries, expected " +
                                                      std::to_string(n_free));
    if (m_vec.minCoeff() < 0.0 || m_vec.maxCoeff() <= 0.0)
        throw Error(ErrorCode::InvalidConfig, "m must be nonnegative and nonzero");
    if (cost.rows() != basis_size || cost.cols() != n_actions)
        throw Error(ErrorCode::DimensionMismatch, "cost matrix must be K x M");
    if (cost.minCoeff() < 0.0) throw Error(ErrorCode::InvalidConfig, "cost must be nonnegative");
}

std::vector<int> attractor_indices_near(const RbfDictionary& dict, const std::vector<Vector>& targets, double r_att) {
    if (targets.empty()) throw Error(ErrorCode::InvalidConfig, "no attractor targets given");
    std::set<int> picked;
    for (const auto& t : targets) {
        const Vector d2 = dict.squared_distances(t);
        Eigen::Index nearest = 0;
        d2.minCoeff(&nearest);
        picked.insert(static_cast<int>(nearest));
        for (Eigen::Index j = 0; j < d2.size(); ++j)
            if (d2[j] <= r_att * r_att) picked.insert(static_cast<int>(j));
    }
    return {picked.begin(), picked.end()};
}

StabilizationProblem make_stabilization_problem(const RbfDictionary& dict, const ControlGrid& grid,
                                                const QuadraticCost& cost, std::vector<int> attractor, double gamma,
                                                bool normalize_flag) {
    StabilizationProblem prob;
    std::sort(attractor.begin(), attractor.end());
    attractor.erase(std::unique(attractor.begin(), attractor.end()), attractor.end());
    prob.attractor_indices = std::move(attractor);
    prob.gamma = gamma;
    prob.normalize_flag = normalize_flag;
    const int K = dict.size();
    prob.cost.resize(K, grid.size());
    for (int j = 0; j < K; ++j)
        for (int a = 0; a < grid.size(); ++a) prob.cost(j, a) = cost(dict.center(j), grid[a]);
    const auto n_free = K - static_cast<int>(prob.attractor_indices.size());
    if (n_free <= 0) throw Error(ErrorCode::AllStatesAttractor, "every basis element is in the attractor");
    prob.m_vec = Vector::Ones(n_free);
    prob.validate(K, grid.size());
    return prob;
}

std::string to_string(FeedbackMode mode) {
    switch (mode) {
    case FeedbackMode::PaperSum: return "paper_sum";
    case FeedbackMode::PartitionOfUnity: return "partition_of_unity";
    case FeedbackMode::NearestCenter: return "nearest_center";
    }
    return "unknown";
}

FeedbackMode feedback_mode_from_string(const std::string& name) {
    for (auto m : {FeedbackMode::PaperSum, FeedbackMode::PartitionOfUnity, FeedbackMode::NearestCenter})
        if (to_string(m) == name) return m;
    throw Error(ErrorCode::InvalidConfig, "unknown feedback mode '" + name + "'");
}

Matrix restrict_operator(const Matrix& p, const std::vector<int>& attractor) {
    const auto k = static_cast<int>(p.rows());
    if (p.cols() != k) throw Error(ErrorCode::DimensionMismatch, "operator must be square");
    if (attractor.empty()) throw Error(ErrorCode::InvalidConfig, "attractor index set is empty");
    std::vector<char> drop(static_cast<std::size_t>(k), 0);
    for (int j : attractor) {
        if (j < 0 || j >= k) throw Error(ErrorCode::InvalidConfig, "attractor index " + std::to_string(j) + " out of range");
        drop[static_cast<std::size_t>(j)] = 1;
    }
    std::vector<int> keep;
    for (int j = 0; j < k; ++j)
        if (!drop[static_cast<std::size_t>(j)]) keep.push_back(j);
    if (keep.empty()) throw Error(ErrorCode::AllStatesAttractor, "nothing left after removing the attractor");
    const auto n = static_cast<Eigen::Index>(keep.size());
    Matrix out(n, n);
    for (Eigen::Index c = 0; c < n; ++c)
        for (Eigen::Index r = 0; r < n; ++r) out(r, c) = p(keep[static_cast<std::size_t>(r)], keep[static_cast<std::size_t>(c)]);
    return out;
}

LpProblem assemble_lp(const OperatorBank& bank, const StabilizationProblem& prob) {
    const int K = bank.basis_size();
    const int M = static_cast<int>(bank.p_list.size());
    if (M == 0) throw Error(ErrorCode::InvalidConfig, "operator bank is empty");
    for (const auto& p : bank.p_list)
        if (p.p_mat.rows() != K || p.p_mat.cols() != K)
            throw Error(ErrorCode::DimensionMismatch, "operators in the bank differ in size");
    prob.validate(K, M);
    const auto free = prob.free_indices(K);
    const auto n = static_cast<Eigen::Index>(free.size());
    const Eigen::Index n_theta = n * M;

    LpProblem lp;
    const Eigen::Index n_vars = prob.normalize_flag ? n_theta + n : n_theta;
    const Eigen::Index n_rows = prob.normalize_flag ? 2 * n : n;
    lp.c = Vector::Zero(n_vars);
    lp.A_eq = Matrix::Zero(n_rows, n_vars);
    lp.b_eq = Vector::Zero(n_rows);
    lp.lb = Vector::Zero(n_vars);
    for (int a = 0; a < M; ++a) {
        const Matrix p1 = restrict_operator(bank.p_list[static_cast<std::size_t>(a)].p_mat, prob.attractor_indices);
        auto block = lp.A_eq.block(0, a * n, n, n);
        block = -prob.gamma * p1;
        block.diagonal().array() += 1.0;
        for (Eigen::Index i = 0; i < n; ++i) lp.c[a * n + i] = prob.cost(free[static_cast<std::size_t>(i)], a);
    }
    if (prob.normalize_flag) {
        lp.A_eq.block(0, n_theta, n, n) = -Matrix::Identity(n, n);
        for (int a = 0; a < M; ++a) lp.A_eq.block(n, a * n, n, n) = Matrix::Identity(n, n);
        lp.b_eq.tail(n).setOnes();
        lp.lb.tail(n).setConstant(1e-6);
    } else {
        lp.b_eq = prob.m_vec;
    }
    return lp;
}

OccupationSolution solve_stabilization(const OperatorBank& bank, const StabilizationProblem& prob,
                                       const LpOptions& opts) {
    const LpProblem lp = assemble_lp(bank, prob);
    const LpResult res = solve_lp(lp, opts);
    const int M = static_cast<int>(bank.p_list.size());
    const auto n = static_cast<Eigen::Index>(prob.m_vec.size());
    OccupationSolution sol;
    sol.status = res.status;
    sol.theta = Eigen::Map<const Matrix>(res.z.data(), n, M);
    sol.objective = res.status.objective;
    sol.m_used = prob.normalize_flag ? Vector(res.z.tail(n)) : prob.m_vec;
    switch (res.status.state) {
    case SolveState::Optimal: sol.message = "optimal"; break;
    case SolveState::Infeasible: {
        std::ostringstream msg;
        msg << "no stabilizing randomized policy exists in this basis at gamma = " << prob.gamma
            << "; lower gamma (Farkas certificate value " << res.farkas_violation << ")";
        sol.message = msg.str();
        break;
    }
    case SolveState::Unbounded: sol.message = "stabilization LP is unbounded"; break;
    case SolveState::MaxIter: sol.message = "LP iteration limit reached"; break;
    }
    return sol;
}

Policy extract_policy(const OccupationSolution& sol, const StabilizationProblem& prob, const ControlGrid& grid,
                      FeedbackMode mode, bool grid_snap) {
    const int K = static_cast<int>(prob.cost.rows());
    const int M = grid.size();
    if (sol.theta.cols() != M) throw Error(ErrorCode::DimensionMismatch, "theta has wrong number of actions");
    const auto free = prob.free_indices(K);
    if (sol.theta.rows() != static_cast<Eigen::Index>(free.size()))
        throw Error(ErrorCode::DimensionMismatch, "theta has wrong number of states");

    Policy policy;
    policy.grid = grid;
    policy.feedback_mode = mode;
    policy.grid_snap = grid_snap;
    policy.attractor_action = grid.nearest(Vector::Zero(grid.dim()));
    policy.action_of.assign(static_cast<std::size_t>(K), -1);
    policy.flagged.assign(static_cast<std::size_t>(K), 0);
    policy.control_of.assign(static_cast<std::size_t>(K), Vector::Zero(grid.dim()));
    for (std::size_t i = 0; i < free.size(); ++i) {
        const int j = free[i];
        const auto row = sol.theta.row(static_cast<Eigen::Index>(i));
        int best = 0;
        for (int a = 1; a < M; ++a)
            if (row[a] > row[best]) best = a;
        if (row[best] < 1e-12) {
            best = 0;
            for (int a = 1; a < M; ++a)
                if (prob.cost(j, a) < prob.cost(j, best)) best = a;
            policy.flagged[static_cast<std::size_t>(j)] = 1;
        }
        policy.action_of[static_cast<std::size_t>(j)] = best;
        policy.control_of[static_cast<std::size_t>(j)] = grid[best];
    }
    return policy;
}

Vector feedback(const Policy& policy, const RbfDictionary& dict, const Vector& x) {
    if (policy.basis_size() != dict.size()) throw Error(ErrorCode::DimensionMismatch, "policy and dictionary sizes differ");
    const Vector d2 = dict.squared_distances(x);
    const double scale = 0.5 / (dict.sigma() * dict.sigma());
    const auto d = policy.control_of.front().size();
    Vector u = Vector::Zero(d);
    switch (policy.feedback_mode) {
    case FeedbackMode::PaperSum:
        for (Eigen::Index j = 0; j < d2.size(); ++j) u += policy.control_of[static_cast<std::size_t>(j)] * std::exp(-scale * d2[j]);
        break;
    case FeedbackMode::PartitionOfUnity: {
        const double dmin = d2.minCoeff();
        double total = 0.0;
        for (Eigen::Index j = 0; j < d2.size(); ++j) {
            const double w = std::exp(-scale * (d2[j] - dmin));
            total += w;
            u += policy.control_of[static_cast<std::size_t>(j)] * w;
        }
        u /= total;
        break;
    }
    case FeedbackMode::NearestCenter: {
        Eigen::Index j = 0;
        d2.minCoeff(&j);
        u = policy.control_of[static_cast<std::size_t>(j)];
        break;
    }
    }
    if (policy.grid_snap && policy.grid.size() > 0) u = policy.grid[policy.grid.nearest(u)];
    return u;
}

PFMatrix closed_loop_pf(const OperatorBank& bank, const Policy& policy) {
    const int K = bank.basis_size();
    const int M = static_cast<int>(bank.p_list.size());
    if (policy.basis_size() != K)
        throw Error(ErrorCode::MissingAction, "policy covers " + std::to_string(policy.basis_size()) + " of " +
                                                  std::to_string(K) + " basis elements");
    if (policy.attractor_action < 0 || policy.attractor_action >= M)
        throw Error(ErrorCode::MissingAction, "attractor action is not in the bank");
    PFMatrix out{Matrix(K, K)};
    for (int j = 0; j < K; ++j) {
        int a = policy.action_of[static_cast<std::size_t>(j)];
        if (a < 0) a = policy.attractor_action;
        if (a >= M) throw Error(ErrorCode::MissingAction, "action " + std::to_string(a + 1) + " is not in the bank");
        out.p_mat.col(j) = bank.p_list[static_cast<std::size_t>(a)].p_mat.col(j);
    }
    return out;
}

double nonnegative_spectral_radius(const Matrix& b, double tol, int max_iter, int* iterations, bool* stalled) {
    const auto n = b.rows();
    if (n == 0) return 0.0;
    if (b.minCoeff() < 0.0) throw Error(ErrorCode::InvalidConfig, "power iteration needs a nonnegative matrix");
    // (I + B)/2 is aperiodic and has spectral radius (1 + rho(B))/2
    Vector v = Vector::Constant(n, 1.0 / static_cast<double>(n));
    double est = 0.0;
    double prev = -1.0;
    int stable = 0;
    bool done = false;
    int it = 0;
    for (; it < max_iter; ++it) {
        Vector w = 0.5 * (v + b * v);
        const double norm = w.sum();
        if (norm <= 0.0) {
            est = 0.5;
            done = true;
            break;
        }
        // Collatz-Wielandt bounds
        double lo = std::numeric_limits<double>::infinity();
        double hi = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (v[i] <= 1e-300) continue;
            const double r = w[i] / v[i];
            lo = std::min(lo, r);
            hi = std::max(hi, r);
        }
        est = norm;
        v = w / norm;
        if (hi - lo <= tol) {
            est = 0.5 * (hi + lo);
            done = true;
            break;
        }
        stable = std::abs(est - prev) <= 1e-3 * tol ? stable + 1 : 0;
        if (stable >= 20) {
            done = true;
            break;
        }
        prev = est;
    }
    if (iterations) *iterations = it;
    if (stalled) *stalled = !done;
    return std::max(0.0, 2.0 * est - 1.0);
}

LyapunovCertificate lyapunov_certificate(const PFMatrix& p_cl, const StabilizationProblem& prob, double tol) {
    const int K = static_cast<int>(p_cl.p_mat.rows());
    const Matrix p1 = restrict_operator(p_cl.p_mat, prob.attractor_indices);
    if (p1.rows() != prob.m_vec.size()) throw Error(ErrorCode::DimensionMismatch, "m does not match the restricted operator");
    (void)K;
    LyapunovCertificate cert;
    cert.gamma = prob.gamma;
    const Matrix b = prob.gamma * p1.cwiseMax(0.0);
    cert.spectral_radius = nonnegative_spectral_radius(b, 1e-10, 100000, &cert.power_iterations, &cert.stalled);
    cert.decay_bound = cert.spectral_radius / prob.gamma;
    if (cert.stalled) return cert;
    Matrix sys = -prob.gamma * p1;
    sys.diagonal().array() += 1.0;
    cert.mu_bar = sys.partialPivLu().solve(prob.m_vec);
    cert.residual = (sys * cert.mu_bar - prob.m_vec).cwiseAbs().maxCoeff();
    cert.min_mu = cert.mu_bar.size() ? cert.mu_bar.minCoeff() : 0.0;
    cert.pass = cert.spectral_radius < 1.0 && cert.min_mu >= -tol && cert.mu_bar.allFinite();
    return cert;
}

double evaluate_cost(const OccupationSolution& sol, const StabilizationProblem& prob) {
    const int K = static_cast<int>(prob.cost.rows());
    const auto free = prob.free_indices(K);
    if (sol.theta.rows() != static_cast<Eigen::Index>(free.size()) || sol.theta.cols() != prob.cost.cols())
        throw Error(ErrorCode::DimensionMismatch, "theta and cost dimensions disagree");
    double total = 0.0;
    for (Eigen::Index a = 0; a < sol.theta.cols(); ++a)
        for (std::size_t i = 0; i < free.size(); ++i)
            total += prob.cost(free[i], a) * sol.theta(static_cast<Eigen::Index>(i), a);
    return total;
}

double balance_residual(const OperatorBank& bank, const StabilizationProblem& prob, const OccupationSolution& sol) {
    const auto n = sol.theta.rows();
    Vector acc = -sol.m_used;
    for (std::size_t a = 0; a < bank.p_list.size(); ++a) {
        const Matrix p1 = restrict_operator(bank.p_list[a].p_mat, prob.attractor_indices);
        const Vector th = sol.theta.col(static_cast<Eigen::Index>(a));
        acc += th - prob.gamma * p1 * th;
    }
    (void)n;
    return acc.cwiseAbs().maxCoeff();
}

void write_policy(const Policy& policy, const RbfDictionary& dict, const std::filesystem::path& path) {
    const auto d = policy.control_of.front().size();
    std::ostringstream out;
    out << "basis_index";
    for (int i = 0; i < dict.dim(); ++i) out << ",center" << i;
    out << ",action_index";
    if (d == 1)
        out << ",control_value";
    else
        for (Eigen::Index i = 0; i < d; ++i) out << ",control_value" << i;
    out << '\n';
    for (int j = 0; j < policy.basis_size(); ++j) {
        out << j + 1;
        for (int i = 0; i < dict.dim(); ++i) out << ',' << csv::format_17(dict.centers()(j, i));
        out << ',' << policy.action_of[static_cast<std::size_t>(j)] + 1;
        for (Eigen::Index i = 0; i < d; ++i) out << ',' << csv::format_17(policy.control_of[static_cast<std::size_t>(j)][i]);
        out << '\n';
    }
    csv::write_text(path, out.str());
}

Policy read_policy(const std::filesystem::path& path, const ControlGrid& grid) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::MissingArtifact, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::EmptyDataset, path.string() + " is empty");
    const auto header = csv::split(line);
    int action_col = -1;
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == "action_index") action_col = static_cast<int>(i);
    if (action_col < 0 || header.front() != "basis_index")
        throw Error(ErrorCode::MalformedRow, path.string() + ": bad policy header");
    const int d = static_cast<int>(header.size()) - action_col - 1;
    if (d != grid.dim()) throw Error(ErrorCode::DimensionMismatch, "policy control dimension differs from grid");

    Policy policy;
    policy.grid = grid;
    policy.attractor_action = grid.nearest(Vector::Zero(grid.dim()));
    int expected = 1;
    while (std::getline(in, line)) {
        if (csv::trim(line).empty()) continue;
        const auto cells = csv::split(line);
        if (cells.size() != header.size()) throw Error(ErrorCode::MalformedRow, path.string() + ": ragged row");
        if (static_cast<int>(csv::parse_double(cells[0])) != expected)
            throw Error(ErrorCode::MalformedRow, path.string() + ": basis indices must be consecutive");
        ++expected;
        const int a = static_cast<int>(csv::parse_double(cells[static_cast<std::size_t>(action_col)])) - 1;
        if (a >= grid.size()) throw Error(ErrorCode::MissingAction, "policy uses action " + std::to_string(a + 1));
        Vector u(d);
        for (int i = 0; i < d; ++i) u[i] = csv::parse_double(cells[static_cast<std::size_t>(action_col + 1 + i)]);
        policy.action_of.push_back(a < 0 ? -1 : a);
        policy.control_of.push_back(std::move(u));
        policy.flagged.push_back(0);
    }
    if (policy.action_of.empty()) throw Error(ErrorCode::EmptyDataset, path.string() + " has no rows");
    return policy;
}

} // namespace pfstab
