#include "pfstab/systems.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace pfstab;

namespace {

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("pfstab_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace

TEST(StepMap, LogisticFixedPointAndUnitInput) {
    const auto spec = cubic_logistic_system(2.3);
    EXPECT_DOUBLE_EQ(step_map(spec, vec({0.0}), vec({0.0}))[0], 0.0);
    EXPECT_NEAR(step_map(spec, vec({1.0}), vec({0.0}))[0], 1.3, 1e-15);
    EXPECT_NEAR(step_map(spec, vec({0.5}), vec({0.1}))[0], 2.3 * 0.5 - 0.125 + 0.1, 1e-15);
}

TEST(StepMap, StandardMapFixedAndWrapped) {
    const auto spec = standard_map_system(0.25);
    const Vector y = step_map(spec, vec({0.25, 0.0}), vec({0.0}));
    EXPECT_DOUBLE_EQ(y[0], 0.25);
    EXPECT_DOUBLE_EQ(y[1], 0.0);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(-2.0, 2.0);
    for (int i = 0; i < 1000; ++i) {
        const Vector out = step_map(spec, vec({d(rng), d(rng)}), vec({d(rng)}));
        EXPECT_GE(out[0], 0.0);
        EXPECT_LT(out[0], 1.0);
    }
    // y is not wrapped
    const Vector big = step_map(spec, vec({0.1, 3.0}), vec({0.0}));
    EXPECT_DOUBLE_EQ(big[1], 3.0);
}

TEST(StepMap, PeriodTwoOrbitOfStandardMap) {
    const auto spec = standard_map_system(0.25);
    const Vector a = step_map(spec, vec({0.25, 0.5}), vec({0.0}));
    EXPECT_NEAR(a[0], 0.75, 1e-15);
    const Vector b = step_map(spec, a, vec({0.0}));
    EXPECT_NEAR(b[0], 0.25, 1e-15);
    EXPECT_NEAR(b[1], 0.5, 1e-15);
}

TEST(StepMap, Errors) {
    EXPECT_THROW(step_map(cubic_logistic_system(), vec({0.0, 1.0}), vec({0.0})), Error);
    try {
        step_map(duffing_system(), vec({0.0, 0.0}), vec({0.0}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnknownSystemKind);
    }
    try {
        step_map(cubic_logistic_system(), vec({0.0, 1.0}), vec({0.0}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
    }
}

TEST(IntegrateFlow, EquilibriaArePreserved) {
    const auto duff = duffing_system();
    EXPECT_EQ(integrate_flow(duff, vec({0.0, 0.0}), vec({0.0}), 0.1, 10), vec({0.0, 0.0}));
    EXPECT_EQ(integrate_flow(duff, vec({0.0, 0.0}), vec({0.0}), 3.7, 5), vec({0.0, 0.0}));
    for (double s : {-1.0, 1.0}) EXPECT_EQ(integrate_flow(duff, vec({s, 0.0}), vec({0.0}), 0.1, 10), vec({s, 0.0}));

    const auto well = double_well_system(0.5);
    for (double s : {-1.0, 1.0, 0.5}) {
        const Vector out = integrate_flow(well, vec({s, 0.0}), vec({0.0}), 0.1, 10);
        EXPECT_NEAR(out[0], s, 1e-15);
        EXPECT_NEAR(out[1], 0.0, 1e-15);
    }
}

TEST(IntegrateFlow, MatchesFineReference) {
    const auto duff = duffing_system();
    const Vector coarse = integrate_flow(duff, vec({1.0, 0.0}), vec({0.0}), 0.1, 10);
    const Vector fine = integrate_flow(duff, vec({1.0, 0.0}), vec({0.0}), 0.1, 1000);
    EXPECT_LT((coarse - fine).norm(), 1e-6);
    // and a nontrivial state
    const Vector c2 = integrate_flow(duff, vec({1.5, -0.7}), vec({1.0}), 0.1, 10);
    const Vector f2 = integrate_flow(duff, vec({1.5, -0.7}), vec({1.0}), 0.1, 1000);
    EXPECT_LT((c2 - f2).norm(), 1e-6);
}

TEST(IntegrateFlow, FourthOrderConvergence) {
    const auto duff = duffing_system();
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> d(-2.0, 2.0);
    for (int trial = 0; trial < 10; ++trial) {
        const Vector x = vec({d(rng), d(rng)});
        const Vector u = vec({0.0});
        const double T = 1.0;
        const Vector ref = integrate_flow(duff, x, u, T, 4096);
        const double e1 = (integrate_flow(duff, x, u, T, 8) - ref).norm();
        const double e2 = (integrate_flow(duff, x, u, T, 16) - ref).norm();
        const double ratio = e1 / e2;
        EXPECT_GT(ratio, 11.0) << "trial " << trial;
        EXPECT_LT(ratio, 22.0) << "trial " << trial;
    }
}

TEST(IntegrateFlow, DivergenceIsReported) {
    SystemSpec spec = duffing_system();
    try {
        integrate_flow(spec, vec({1e60, 1e60}), vec({0.0}), 10.0, 2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonFiniteState);
    }
}

TEST(SystemSpec, Validation) {
    SystemSpec spec = duffing_system();
    spec.dt = 0.0;
    EXPECT_THROW(spec.validate(), Error);
    spec = cubic_logistic_system();
    spec.params.clear();
    EXPECT_THROW(spec.validate(), Error);
    spec = cubic_logistic_system();
    spec.domain.upper[0] = spec.domain.lower[0];
    EXPECT_THROW(spec.validate(), Error);
    EXPECT_NO_THROW(standard_map_system().validate());
}

TEST(ControlGridTest, RangeAndNearest) {
    const auto g = ControlGrid::range(-0.2, 0.02, 0.2);
    ASSERT_EQ(g.size(), 21);
    EXPECT_DOUBLE_EQ(g[10][0], 0.0);
    EXPECT_NEAR(g[0][0], -0.2, 1e-15);
    EXPECT_NEAR(g[20][0], 0.2, 1e-12);
    EXPECT_EQ(g.nearest(vec({0.031})), 12);
    EXPECT_EQ(ControlGrid::range(-4, 0.5, 4).size(), 17);
    EXPECT_EQ(ControlGrid::range(-2, 0.2, 2).size(), 21);
    EXPECT_EQ(ControlGrid::range(-0.5, 0.02, 0.5).size(), 51);
    EXPECT_THROW(ControlGrid({vec({1.0}), vec({0.0})}), Error);
    EXPECT_THROW(ControlGrid({vec({1.0}), vec({1.0})}), Error);
    EXPECT_THROW(ControlGrid(std::vector<Vector>{}), Error);
}

TEST(GenerateDataset, OnePairPerTrajectoryOfLengthOne) {
    const auto spec = cubic_logistic_system();
    const auto grid = ControlGrid::range(-0.2, 0.1, 0.2);
    const auto data = generate_dataset(spec, grid, 1, 1, 5);
    ASSERT_EQ(data.size(), 5u);
    for (const auto& d : data) EXPECT_EQ(d.count() + d.dropped, 1u);
}

TEST(GenerateDataset, PairsFollowTheMap) {
    const auto spec = cubic_logistic_system();
    const auto grid = ControlGrid::range(-0.2, 0.02, 0.2);
    const auto data = generate_dataset(spec, grid, 50, 10, 99);
    for (const auto& d : data) {
        const double u = grid[d.action_index][0];
        for (std::size_t m = 0; m < d.count(); ++m) {
            const double x = d.x[m][0];
            EXPECT_EQ(d.y[m][0], 2.3 * x - x * x * x + u);
            EXPECT_TRUE(spec.domain.contains(d.y[m]));
        }
    }
}

TEST(GenerateDataset, DeterministicInSeed) {
    const auto spec = duffing_system();
    const auto grid = ControlGrid::range(-1, 1, 1);
    const auto a = generate_dataset(spec, grid, 5, 4, 7);
    const auto b = generate_dataset(spec, grid, 5, 4, 7);
    const auto c = generate_dataset(spec, grid, 5, 4, 8);
    for (std::size_t k = 0; k < a.size(); ++k) {
        ASSERT_EQ(a[k].count(), b[k].count());
        for (std::size_t m = 0; m < a[k].count(); ++m) {
            EXPECT_EQ(a[k].x[m], b[k].x[m]);
            EXPECT_EQ(a[k].y[m], b[k].y[m]);
        }
    }
    EXPECT_NE(a[0].x[0], c[0].x[0]);
    // different actions get different streams
    EXPECT_NE(a[0].x[0], a[1].x[0]);
}

TEST(GenerateDataset, AllEscapingIsAnError) {
    SystemSpec spec = cubic_logistic_system();
    try {
        generate_action_dataset(spec, vec({100.0}), 0, 10, 5, 1, 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyDataset);
    }
}

TEST(DatasetIo, RoundTripIsExact) {
    const auto dir = temp_dir("dataset_io");
    const auto data = generate_dataset(standard_map_system(), ControlGrid::range(-0.5, 0.5, 0.5), 20, 5, 3);
    for (const auto& d : data) {
        const auto path = dir / dataset_filename(d.action_index);
        write_dataset(d, path);
        const auto back = read_dataset(path, d.action_index);
        ASSERT_EQ(back.count(), d.count());
        EXPECT_EQ(back.action_index, d.action_index);
        for (std::size_t m = 0; m < d.count(); ++m) {
            EXPECT_EQ(back.x[m], d.x[m]);
            EXPECT_EQ(back.y[m], d.y[m]);
        }
    }
    EXPECT_EQ(dataset_filename(0), "data_a1.csv");
}

TEST(DatasetIo, MalformedInputs) {
    const auto dir = temp_dir("dataset_bad");
    {
        std::ofstream(dir / "ragged.csv") << "action,dim,x0,y0\n1,1,0.5\n";
        std::ofstream(dir / "empty.csv") << "";
        std::ofstream(dir / "wrong_action.csv") << "action,dim,x0,y0\n2,1,0.5,0.6\n";
    }
    auto code_of = [](auto&& fn) {
        try {
            fn();
        } catch (const Error& e) {
            return e.code();
        }
        return ErrorCode::Io;
    };
    EXPECT_EQ(code_of([&] { read_dataset(dir / "ragged.csv"); }), ErrorCode::MalformedRow);
    EXPECT_EQ(code_of([&] { read_dataset(dir / "empty.csv"); }), ErrorCode::EmptyDataset);
    EXPECT_EQ(code_of([&] { read_dataset(dir / "wrong_action.csv", 0); }), ErrorCode::ActionMismatch);
}
