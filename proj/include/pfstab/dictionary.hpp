#ifndef PFSTAB_DICTIONARY_HPP
#define PFSTAB_DICTIONARY_HPP

#include "pfstab/common.hpp"
#include "pfstab/systems.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace pfstab {

/// Gaussian radial basis functions psi_j(x) = exp(-|x - c_j|^2 / (2 sigma^2)) sharing one width.
class RbfDictionary {
public:
    RbfDictionary() = default;
    /// `centers` holds one center per row. Requires at least two distinct centers and sigma > 0.
    RbfDictionary(Matrix centers, double sigma);

    [[nodiscard]] int size() const { return static_cast<int>(centers_.rows()); }
    [[nodiscard]] int dim() const { return static_cast<int>(centers_.cols()); }
    [[nodiscard]] double sigma() const { return sigma_; }
    [[nodiscard]] const Matrix& centers() const { return centers_; }
    [[nodiscard]] Vector center(int j) const { return centers_.row(j).transpose(); }

    /// Psi(x); every entry lies in (0, 1] unless it underflows far from all centers.
    [[nodiscard]] Vector eval(const Vector& x) const;
    /// Psi evaluated at every row of `points` (result is N x K).
    [[nodiscard]] Matrix eval_rows(const Matrix& points) const;
    /// Squared distances |x - c_j|^2.
    [[nodiscard]] Vector squared_distances(const Vector& x) const;
    /// Analytic gradient of psi_j at x.
    [[nodiscard]] Vector gradient(int j, const Vector& x) const;

private:
    Matrix centers_;
    double sigma_ = 0.0;
};

/// Seeded k-means++ initialization followed by Lloyd iterations. Stops when no center moves by
/// more than 1e-9 or after max_iter sweeps; an emptied cluster is reseeded at the point farthest
/// from its assigned center. Points are rows.
Matrix kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iter = 300);
/// Within-cluster sum of squares of `points` against their nearest center.
double within_cluster_ss(const Matrix& points, const Matrix& centers);

/// Cell-centered uniform grid of K points over the box; K must be a perfect q-th power.
Matrix uniform_grid_centers(const Box& box, int k);
/// Moves the center nearest to each target onto the target (each center is moved at most once).
Matrix anchor_centers(Matrix centers, const std::vector<Vector>& targets);

struct GramSet {
    Matrix G;
    Matrix A;
    std::size_t sample_count = 0;
};

/// G = (1/L) sum Psi(x_m) Psi(x_m)^T and A = (1/L) sum Psi(x_m) Psi(y_m)^T.
GramSet gram_matrices(const RbfDictionary& dict, const TrajectoryDataset& data);

enum class LambdaMethod { ClosedForm, MonteCarlo };

struct LambdaMatrix {
    Matrix lambda;
    double regularization = 0.0;
    LambdaMethod method = LambdaMethod::ClosedForm;
};

/// Overlap integrals of basis pairs plus eps = 1e-10 trace/K on the diagonal. ClosedForm
/// integrates over all of R^q; MonteCarlo averages over `domain`.
LambdaMatrix lambda_matrix(const RbfDictionary& dict, LambdaMethod method = LambdaMethod::ClosedForm,
                           const Box* domain = nullptr, std::size_t mc_samples = 1000000, std::uint64_t seed = 0);

void write_dictionary(const RbfDictionary& dict, const LambdaMatrix& lam, const std::filesystem::path& dir);
RbfDictionary read_dictionary(const std::filesystem::path& dir);
LambdaMatrix read_lambda(const std::filesystem::path& dir);

} // namespace pfstab

#endif // PFSTAB_DICTIONARY_HPP
