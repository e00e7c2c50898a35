#include "pfstab/transfer_operator.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace pfstab;

namespace {

Matrix random_spd(int n, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Matrix r(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) r(i, j) = nd(rng);
    return r * r.transpose() / n + 0.5 * Matrix::Identity(n, n);
}

LambdaMatrix plain_lambda(Matrix l) {
    LambdaMatrix lam;
    lam.lambda = std::move(l);
    return lam;
}

// Projection of v onto the simplex by bisection on the threshold tau: sum max(v - tau, 0) = 1.
Vector simplex_bisection(const Vector& v) {
    double lo = v.minCoeff() - 1.0, hi = v.maxCoeff();
    for (int k = 0; k < 200; ++k) {
        const double mid = 0.5 * (lo + hi);
        if ((v.array() - mid).max(0.0).sum() > 1.0)
            lo = mid;
        else
            hi = mid;
    }
    return (v.array() - 0.5 * (lo + hi)).max(0.0).matrix();
}

// Dictionary-based identity-map data: y = x.
GramSet identity_grams(int k, std::uint64_t seed, RbfDictionary* dict_out = nullptr) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix centers(k, 1);
    for (int i = 0; i < k; ++i) centers(i, 0) = (i + 0.5) / k;
    const RbfDictionary dict(centers, 0.6 / k);
    TrajectoryDataset d;
    for (int m = 0; m < 400; ++m) {
        d.x.push_back(Vector::Constant(1, u(rng)));
        d.y.push_back(d.x.back());
    }
    if (dict_out) *dict_out = dict;
    return gram_matrices(dict, d);
}

} // namespace

TEST(Edmd, IdentityAndPseudoInverse) {
    GramSet g;
    g.G = Matrix::Identity(3, 3);
    g.A = Matrix::Identity(3, 3);
    EXPECT_LT((fit_edmd_unconstrained(g).koopman.k_mat - Matrix::Identity(3, 3)).norm(), 1e-14);

    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd(0.0, 1.0);
    g.A = Matrix(3, 3);
    for (int i = 0; i < 9; ++i) g.A(i) = nd(rng);
    EXPECT_LT((fit_edmd_unconstrained(g).koopman.k_mat - g.A).norm(), 1e-14);
}

TEST(Edmd, LeastSquaresOptimality) {
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd(0.0, 1.0);
    GramSet g;
    g.G = random_spd(6, rng);
    g.A = Matrix(6, 6);
    for (int i = 0; i < 36; ++i) g.A(i) = nd(rng);
    const EdmdFit fit = fit_edmd_unconstrained(g);
    EXPECT_FALSE(fit.rank_deficient);
    for (int trial = 0; trial < 100; ++trial) {
        Matrix k(6, 6);
        for (int i = 0; i < 36; ++i) k(i) = nd(rng);
        EXPECT_LE(fit.koopman.fit_residual, fit_residual(g, k) + 1e-12);
    }
}

TEST(Edmd, RankDeficientGram) {
    GramSet g;
    g.G = Matrix::Zero(3, 3);
    g.G(0, 0) = 1.0;
    g.A = Matrix::Ones(3, 3);
    const EdmdFit fit = fit_edmd_unconstrained(g);
    EXPECT_TRUE(fit.rank_deficient);
    EXPECT_EQ(fit.rank, 1);
}

TEST(PfFromKoopman, Examples) {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const LambdaMatrix lam = plain_lambda(random_spd(4, rng));
    KoopmanMatrix id;
    id.k_mat = Matrix::Identity(4, 4);
    EXPECT_LT((pf_from_koopman(id, lam).p_mat - Matrix::Identity(4, 4)).norm(), 1e-12);

    KoopmanMatrix k;
    k.k_mat = Matrix(4, 4);
    for (int i = 0; i < 16; ++i) k.k_mat(i) = u(rng);
    EXPECT_EQ(pf_from_koopman(k, plain_lambda(Matrix::Identity(4, 4))).p_mat, k.k_mat.transpose());

    const PFMatrix p = pf_from_koopman(k, lam);
    EXPECT_LT((koopman_from_pf(p, lam) - k.k_mat).norm(), 1e-10);
    // duality: Lambda K = P^T Lambda
    EXPECT_LT((lam.lambda * k.k_mat - p.p_mat.transpose() * lam.lambda).norm(), 1e-10);
}

TEST(ValidateMarkov, Examples) {
    PFMatrix p{Matrix::Identity(3, 3)};
    EXPECT_TRUE(validate_markov(p, 1e-15).pass);
    p.p_mat(1, 1) = 0.9;
    const MarkovReport r = validate_markov(p, 1e-6);
    EXPECT_NEAR(r.max_column_sum_deviation, 0.1, 1e-15);
    EXPECT_FALSE(r.pass);
    p.p_mat(1, 1) = 1.0;
    p.p_mat(0, 2) = -0.01;
    p.p_mat(2, 2) = 1.01;
    const MarkovReport neg = validate_markov(p, 1e-6);
    EXPECT_NEAR(neg.max_negative_entry, 0.01, 1e-15);
    EXPECT_FALSE(neg.pass);
}

TEST(SimplexProjection, MatchesBisectionOracle) {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> nd(0.0, 2.0);
    Matrix m(30, 9);
    for (int i = 0; i < m.size(); ++i) m(i) = nd(rng);
    m.row(0) = Vector::Constant(9, 1.0 / 9).transpose(); // already on the simplex
    const Matrix p = project_rows_to_simplex(m);
    for (int i = 0; i < m.rows(); ++i) {
        EXPECT_LT((p.row(i).transpose() - simplex_bisection(m.row(i).transpose())).norm(), 1e-12);
        EXPECT_NEAR(p.row(i).sum(), 1.0, 1e-12);
        EXPECT_GE(p.row(i).minCoeff(), 0.0);
    }
}

TEST(FitNsdmd, IdentityMapRecoversIdentity) {
    for (auto method : {NsdmdMethod::DenseQp, NsdmdMethod::Admm}) {
        RbfDictionary dict;
        const GramSet g = identity_grams(5, 3, &dict);
        NsdmdConfig cfg;
        cfg.method = method;
        cfg.max_iter = method == NsdmdMethod::Admm ? 20000 : cfg.max_iter;
        const NsdmdFit fit = fit_nsdmd(g, lambda_matrix(dict), cfg);
        EXPECT_EQ(fit.method_used, method);
        EXPECT_LT(fit.koopman.fit_residual, 1e-6) << to_string(method);
        EXPECT_LT((fit.koopman.k_mat - Matrix::Identity(5, 5)).norm(), 1e-4) << to_string(method);
    }
}

TEST(FitNsdmd, PlantedFeasibleOptimum) {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix centers(3, 1);
    centers << 0.0, 1.0, 2.0;
    const RbfDictionary dict(centers, 0.3);
    const LambdaMatrix lam = lambda_matrix(dict);
    const Eigen::LLT<Matrix> llt(lam.lambda);

    int planted = 0;
    for (int trial = 0; trial < 200 && planted < 5; ++trial) {
        // M* row-stochastic, K* = Lambda^-1 M* Lambda must also be nonnegative
        Matrix mstar(3, 3);
        for (int i = 0; i < 9; ++i) mstar(i) = u(rng);
        mstar = 0.6 * Matrix::Identity(3, 3) + 0.4 * (mstar.array().colwise() / mstar.rowwise().sum().array()).matrix();
        const Matrix kstar = llt.solve(mstar * lam.lambda);
        if (kstar.minCoeff() < 0.0) continue;
        ++planted;

        GramSet g;
        g.G = random_spd(3, rng);
        g.A = g.G * kstar;
        for (auto method : {NsdmdMethod::DenseQp, NsdmdMethod::Admm}) {
            NsdmdConfig cfg;
            cfg.method = method;
            cfg.max_iter = method == NsdmdMethod::Admm ? 50000 : cfg.max_iter;
            const NsdmdFit fit = fit_nsdmd(g, lam, cfg);
            if (method == NsdmdMethod::DenseQp) EXPECT_TRUE(fit.status.optimal()) << to_string(fit.status.state);
            EXPECT_LE(fit.koopman.fit_residual, 1e-6) << to_string(method);
            EXPECT_LE((fit.koopman.k_mat - kstar).norm(), 1e-4) << to_string(method);
            EXPECT_TRUE(validate_markov(fit.pf, 1e-8).pass);
        }
    }
    EXPECT_EQ(planted, 5);
}

TEST(FitNsdmd, ConstrainedResidualBoundsAndMarkov) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix centers(8, 1);
    for (int i = 0; i < 8; ++i) centers(i, 0) = i / 7.0;
    const RbfDictionary dict(centers, 0.1);
    TrajectoryDataset d;
    for (int m = 0; m < 500; ++m) {
        const double x = u(rng);
        d.x.push_back(Vector::Constant(1, x));
        d.y.push_back(Vector::Constant(1, 3.7 * x * (1 - x) / 1.0 * 0.27));
    }
    const GramSet g = gram_matrices(dict, d);
    const LambdaMatrix lam = lambda_matrix(dict);
    NsdmdConfig qp_cfg;
    qp_cfg.method = NsdmdMethod::DenseQp;
    NsdmdConfig admm_cfg;
    admm_cfg.method = NsdmdMethod::Admm;
    admm_cfg.max_iter = 50000;
    const NsdmdFit qp = fit_nsdmd(g, lam, qp_cfg);
    const NsdmdFit admm = fit_nsdmd(g, lam, admm_cfg);
    EXPECT_TRUE(qp.status.optimal()) << to_string(qp.status.state);
    const double edmd = fit_edmd_unconstrained(g).koopman.fit_residual;
    for (const auto* fit : {&qp, &admm}) {
        EXPECT_GE(fit->koopman.fit_residual, edmd - 1e-12);
        EXPECT_NEAR(fit->edmd_residual, edmd, 1e-12);
        const MarkovReport r = validate_markov(fit->pf, 1e-6);
        EXPECT_TRUE(r.pass) << r.max_negative_entry << " " << r.max_column_sum_deviation;
        EXPECT_LT((lam.lambda * fit->koopman.k_mat - fit->pf.p_mat.transpose() * lam.lambda).norm(), 1e-8);
    }
    // two independent solvers agree on the optimal value
    EXPECT_NEAR(qp.koopman.fit_residual, admm.koopman.fit_residual, 1e-5 * std::max(1.0, qp.koopman.fit_residual));
}

TEST(FitNsdmd, RejectsSingularLambda) {
    GramSet g;
    g.G = Matrix::Identity(2, 2);
    g.A = Matrix::Identity(2, 2);
    LambdaMatrix lam = plain_lambda(Matrix::Ones(2, 2));
    try {
        fit_nsdmd(g, lam);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::SingularLambda);
    }
}

TEST(OperatorIo, RoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "pfstab_test_operator_io";
    std::filesystem::remove_all(dir);
    RbfDictionary dict;
    const GramSet g = identity_grams(4, 1, &dict);
    const NsdmdFit fit = fit_nsdmd(g, lambda_matrix(dict));
    write_operator(fit, 2, "abc", dir);
    EXPECT_EQ(pf_filename(2), "P_a3.csv");
    EXPECT_TRUE(std::filesystem::exists(dir / "P_a3.csv"));
    EXPECT_EQ(read_pf(dir, 2).p_mat, fit.pf.p_mat);
    EXPECT_THROW(read_pf(dir, 5), Error);
}
