#include "pfstab/dictionary.hpp"
#include "pfstab/csv.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

namespace pfstab {

RbfDictionary::RbfDictionary(Matrix centers, double sigma) : centers_(std::move(centers)), sigma_(sigma) {
    if (!(sigma_ > 0.0) || !std::isfinite(sigma_)) throw Error(ErrorCode::InvalidConfig, "sigma must be > 0");
    if (centers_.rows() < 2) throw Error(ErrorCode::InvalidConfig, "dictionary needs at least two centers");
    if (centers_.cols() < 1) throw Error(ErrorCode::InvalidConfig, "centers must have dimension >= 1");
    for (Eigen::Index i = 0; i < centers_.rows(); ++i)
        for (Eigen::Index j = 0; j < i; ++j)
            if (centers_.row(i) == centers_.row(j))
                throw Error(ErrorCode::InvalidConfig, "duplicate centers " + std::to_string(j) + " and " + std::to_string(i));
}

namespace {

// Values below exp(-345) are returned as exact zeros. Products of two such values would be
// subnormal, and subnormal arithmetic is slow enough to dominate the Gram accumulation.
constexpr double kExpFloor = -345.0;

double gauss(double arg) { return arg < kExpFloor ? 0.0 : std::exp(arg); }

} // namespace

Vector RbfDictionary::squared_distances(const Vector& x) const {
    if (x.size() != centers_.cols())
        throw Error(ErrorCode::DimensionMismatch, "point has dimension " + std::to_string(x.size()) +
                                                      ", dictionary has " + std::to_string(centers_.cols()));
    return (centers_.rowwise() - x.transpose()).rowwise().squaredNorm();
}

Vector RbfDictionary::eval(const Vector& x) const {
    const double scale = -0.5 / (sigma_ * sigma_);
    return (squared_distances(x) * scale).unaryExpr(&gauss);
}

Matrix RbfDictionary::eval_rows(const Matrix& points) const {
    if (points.cols() != centers_.cols()) throw Error(ErrorCode::DimensionMismatch, "point dimension mismatch");
    const double scale = -0.5 / (sigma_ * sigma_);
    Matrix out(points.rows(), centers_.rows());
    for (Eigen::Index m = 0; m < points.rows(); ++m)
        for (Eigen::Index j = 0; j < centers_.rows(); ++j)
            out(m, j) = gauss(scale * (points.row(m) - centers_.row(j)).squaredNorm());
    return out;
}

Vector RbfDictionary::gradient(int j, const Vector& x) const {
    const Vector diff = x - center(j);
    const double psi = gauss(-0.5 * diff.squaredNorm() / (sigma_ * sigma_));
    return -diff * psi / (sigma_ * sigma_);
}

namespace {

int nearest_row(const Matrix& centers, const Eigen::RowVectorXd& p, double* dist2 = nullptr) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < centers.rows(); ++j) {
        const double d = (centers.row(j) - p).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = static_cast<int>(j);
        }
    }
    if (dist2) *dist2 = best_d;
    return best;
}

} // namespace

Matrix kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter) {
    const auto n = points.rows();
    if (k < 1 || n < k)
        throw Error(ErrorCode::TooFewPoints, std::to_string(n) + " points cannot form " + std::to_string(k) + " clusters");
    std::mt19937_64 rng(seed);

    // k-means++ seeding
    Matrix centers(k, points.cols());
    centers.row(0) = points.row(static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(n)));
    Vector d2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
    for (int c = 1; c < k; ++c) {
        const double total = d2.sum();
        Eigen::Index pick = 0;
        if (total > 0.0) {
            const double r = unit_double(rng()) * total;
            double acc = 0.0;
            pick = n - 1;
            for (Eigen::Index i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc > r && d2[i] > 0.0) {
                    pick = i;
                    break;
                }
            }
        } else {
            pick = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(n));
        }
        centers.row(c) = points.row(pick);
        d2 = d2.cwiseMin((points.rowwise() - centers.row(c)).rowwise().squaredNorm());
    }

    std::vector<int> assign(static_cast<std::size_t>(n), 0);
    Vector dist(n);
    for (int iter = 0; iter < max_iter; ++iter) {
        for (Eigen::Index i = 0; i < n; ++i) assign[static_cast<std::size_t>(i)] = nearest_row(centers, points.row(i), &dist[i]);

        Matrix sums = Matrix::Zero(k, points.cols());
        std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
            ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
        }
        Matrix next = centers;
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                next.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
            } else {
                Eigen::Index far = 0;
                dist.maxCoeff(&far);
                next.row(c) = points.row(far);
                dist[far] = 0.0;
            }
        }
        const double moved = (next - centers).rowwise().norm().maxCoeff();
        centers = std::move(next);
        if (moved < 1e-9) break;
    }
    return centers;
}

double within_cluster_ss(const Matrix& points, const Matrix& centers) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
        double d = 0.0;
        nearest_row(centers, points.row(i), &d);
        total += d;
    }
    return total;
}

Matrix uniform_grid_centers(const Box& box, int k) {
    const int q = box.dim();
    const int per_axis = static_cast<int>(std::lround(std::pow(static_cast<double>(k), 1.0 / q)));
    int total = 1;
    for (int i = 0; i < q; ++i) total *= per_axis;
    if (total != k || per_axis < 1)
        throw Error(ErrorCode::InvalidConfig, "grid centers need K to be a perfect power of the state dimension");
    Matrix centers(k, q);
    for (int idx = 0; idx < k; ++idx) {
        int rem = idx;
        for (int axis = q - 1; axis >= 0; --axis) {
            const int i = rem % per_axis;
            rem /= per_axis;
            const double h = (box.upper[axis] - box.lower[axis]) / per_axis;
            centers(idx, axis) = box.lower[axis] + (i + 0.5) * h;
        }
    }
    return centers;
}

Matrix anchor_centers(Matrix centers, const std::vector<Vector>& targets) {
    std::vector<bool> used(static_cast<std::size_t>(centers.rows()), false);
    for (const auto& t : targets) {
        if (t.size() != centers.cols()) throw Error(ErrorCode::DimensionMismatch, "target dimension mismatch");
        int best = -1;
        double best_d = std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < centers.rows(); ++j) {
            if (used[static_cast<std::size_t>(j)]) continue;
            const double d = (centers.row(j).transpose() - t).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(j);
            }
        }
        if (best < 0) throw Error(ErrorCode::InvalidConfig, "more targets than centers");
        centers.row(best) = t.transpose();
        used[static_cast<std::size_t>(best)] = true;
    }
    return centers;
}

GramSet gram_matrices(const RbfDictionary& dict, const TrajectoryDataset& data) {
    const auto L = data.count();
    if (L == 0) throw Error(ErrorCode::EmptyDataset, "no snapshot pairs");
    if (data.dim() != dict.dim()) throw Error(ErrorCode::DimensionMismatch, "dataset and dictionary dimensions differ");
    const int K = dict.size();
    GramSet out;
    out.sample_count = L;
    out.G = Matrix::Zero(K, K);
    out.A = Matrix::Zero(K, K);
    // Accumulate in fixed-size chunks so memory stays bounded and the reduction order is fixed.
    constexpr std::size_t chunk = 4096;
    for (std::size_t start = 0; start < L; start += chunk) {
        const std::size_t len = std::min(chunk, L - start);
        Matrix px(static_cast<Eigen::Index>(len), K), py(static_cast<Eigen::Index>(len), K);
        for (std::size_t m = 0; m < len; ++m) {
            px.row(static_cast<Eigen::Index>(m)) = dict.eval(data.x[start + m]).transpose();
            py.row(static_cast<Eigen::Index>(m)) = dict.eval(data.y[start + m]).transpose();
        }
        out.G.noalias() += px.transpose() * px;
        out.A.noalias() += px.transpose() * py;
    }
    out.G /= static_cast<double>(L);
    out.A /= static_cast<double>(L);
    out.G = 0.5 * (out.G + out.G.transpose()).eval();
    return out;
}

LambdaMatrix lambda_matrix(const RbfDictionary& dict, LambdaMethod method, const Box* domain, std::size_t mc_samples,
                           std::uint64_t seed) {
    const int K = dict.size();
    const int q = dict.dim();
    const double s = dict.sigma();
    LambdaMatrix out;
    out.method = method;
    out.lambda.resize(K, K);
    if (method == LambdaMethod::ClosedForm) {
        const double scale = std::pow(s * std::sqrt(std::numbers::pi), q);
        for (int i = 0; i < K; ++i)
            for (int j = 0; j <= i; ++j) {
                const double d2 = (dict.centers().row(i) - dict.centers().row(j)).squaredNorm();
                out.lambda(i, j) = out.lambda(j, i) = scale * gauss(-d2 / (4.0 * s * s));
            }
    } else {
        if (!domain) throw Error(ErrorCode::InvalidConfig, "Monte-Carlo overlap needs an integration domain");
        if (domain->dim() != q) throw Error(ErrorCode::DimensionMismatch, "domain dimension mismatch");
        if (mc_samples == 0) throw Error(ErrorCode::InvalidConfig, "mc_samples must be positive");
        std::mt19937_64 rng(seed);
        out.lambda.setZero();
        const Vector width = domain->upper - domain->lower;
        constexpr std::size_t chunk = 8192;
        for (std::size_t start = 0; start < mc_samples; start += chunk) {
            const std::size_t len = std::min(chunk, mc_samples - start);
            Matrix pts(static_cast<Eigen::Index>(len), q);
            for (std::size_t m = 0; m < len; ++m)
                for (int i = 0; i < q; ++i)
                    pts(static_cast<Eigen::Index>(m), i) = domain->lower[i] + width[i] * unit_double(rng());
            const Matrix psi = dict.eval_rows(pts);
            out.lambda.noalias() += psi.transpose() * psi;
        }
        out.lambda *= domain->volume() / static_cast<double>(mc_samples);
        out.lambda = 0.5 * (out.lambda + out.lambda.transpose()).eval();
    }
    out.regularization = 1e-10 * out.lambda.trace() / K;
    out.lambda.diagonal().array() += out.regularization;
    return out;
}

void write_dictionary(const RbfDictionary& dict, const LambdaMatrix& lam, const std::filesystem::path& dir) {
    std::ostringstream out;
    for (int i = 0; i < dict.dim(); ++i) out << (i ? "," : "") << "center" << i;
    out << '\n';
    for (int j = 0; j < dict.size(); ++j) {
        for (int i = 0; i < dict.dim(); ++i) out << (i ? "," : "") << csv::format_17(dict.centers()(j, i));
        out << '\n';
    }
    csv::write_text(dir / "centers.csv", out.str());
    nlohmann::json meta = {{"sigma", dict.sigma()},
                           {"q", dict.dim()},
                           {"K", dict.size()},
                           {"epsilon", lam.regularization},
                           {"method", lam.method == LambdaMethod::ClosedForm ? "closed_form" : "monte_carlo"}};
    csv::write_text(dir / "dictionary.json", meta.dump(2) + "\n");
    csv::write_matrix(lam.lambda, dir / "lambda.csv");
}

RbfDictionary read_dictionary(const std::filesystem::path& dir) {
    const auto meta = nlohmann::json::parse(csv::read_text(dir / "dictionary.json"));
    const std::string text = csv::read_text(dir / "centers.csv");
    std::istringstream in(text);
    std::string line;
    std::getline(in, line); // header
    const int q = meta.at("q").get<int>();
    std::vector<std::vector<double>> rows;
    while (std::getline(in, line)) {
        if (csv::trim(line).empty()) continue;
        const auto cells = csv::split(line);
        if (static_cast<int>(cells.size()) != q)
            throw Error(ErrorCode::MalformedRow, "centers.csv row has " + std::to_string(cells.size()) + " columns");
        std::vector<double> r;
        for (const auto& c : cells) r.push_back(csv::parse_double(c));
        rows.push_back(std::move(r));
    }
    if (static_cast<int>(rows.size()) != meta.at("K").get<int>())
        throw Error(ErrorCode::MalformedRow, "centers.csv row count disagrees with dictionary.json");
    Matrix centers(static_cast<Eigen::Index>(rows.size()), q);
    for (std::size_t j = 0; j < rows.size(); ++j)
        for (int i = 0; i < q; ++i) centers(static_cast<Eigen::Index>(j), i) = rows[j][static_cast<std::size_t>(i)];
    return RbfDictionary(std::move(centers), meta.at("sigma").get<double>());
}

LambdaMatrix read_lambda(const std::filesystem::path& dir) {
    const auto meta = nlohmann::json::parse(csv::read_text(dir / "dictionary.json"));
    LambdaMatrix lam;
    lam.lambda = csv::read_matrix(dir / "lambda.csv");
    lam.regularization = meta.at("epsilon").get<double>();
    lam.method = meta.at("method").get<std::string>() == "monte_carlo" ? LambdaMethod::MonteCarlo : LambdaMethod::ClosedForm;
    return lam;
}

} // namespace pfstab
