#include "oracles.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace ecpc;

namespace {

struct Instance {
    Matrix X;
    Vector w, omega, beta;
    std::vector<IndexSet> groups;
};

Instance random_instance(std::mt19937_64& rng, Index n, Index p, std::size_t G, bool overlapping) {
    Instance in;
    in.X = oracle::random_matrix(n, p, rng);
    in.w = oracle::random_positive(n, 0.2, 2.0, rng);
    in.omega = oracle::random_positive(p, 0.3, 3.0, rng);
    in.beta = oracle::random_vector(p, rng);
    in.groups = oracle::random_groups(static_cast<std::size_t>(p), G, overlapping, rng);
    return in;
}

double max_abs(const Matrix& a, const Matrix& b) { return (a - b).cwiseAbs().maxCoeff(); }

} // namespace

TEST(MomentCore, OrthonormalColumnsClosedForm) {
    std::mt19937_64 rng(1);
    const Matrix Q = Eigen::HouseholderQR<Matrix>(oracle::random_matrix(10, 4, rng)).householderQ() * Matrix::Identity(10, 4);
    const double lambda = 1.7;
    const MomentCore core(Q, Vector::Ones(10), Vector::Constant(4, lambda), Vector::Zero(4));
    EXPECT_LE(max_abs(core.C(), Matrix::Identity(4, 4) / (1.0 + lambda)), 1e-12);
    EXPECT_LE(max_abs(core.v(), Vector::Constant(4, 1.0 / ((1.0 + lambda) * (1.0 + lambda)))), 1e-12);
}

TEST(MomentCore, MatchesDirectInversion) {
    std::mt19937_64 rng(2);
    for (int rep = 0; rep < 20; ++rep) {
        const auto in = random_instance(rng, 3 + rep % 10, 2 + (rep * 5) % 11, 2, false);
        const auto ref = oracle::moments(in.X, in.w, in.omega);
        for (auto path : {SolvePath::primal, SolvePath::dual, SolvePath::automatic}) {
            MomentCoreOptions opts;
            opts.path = path;
            const MomentCore core(in.X, in.w, in.omega, in.beta, opts);
            EXPECT_LE(max_abs(core.C(), ref.C), 1e-8);
            EXPECT_LE(max_abs(core.v(), ref.v), 1e-8);
            EXPECT_TRUE((core.v().array() >= 0.0).all());
        }
    }
}

TEST(MomentCore, UnpenalisedColumnIsZeroOffDiagonal) {
    std::mt19937_64 rng(3);
    auto in = random_instance(rng, 8, 5, 2, false);
    in.omega[2] = 0.0;
    const MomentCore core(in.X, in.w, in.omega, in.beta);
    for (Index k = 0; k < 5; ++k) EXPECT_EQ(core.C()(k, 2), k == 2 ? 1.0 : 0.0);
    // The direct formula gives the same column up to rounding.
    const auto ref = oracle::moments(in.X, in.w, in.omega);
    for (Index k = 0; k < 5; ++k)
        if (k != 2) EXPECT_LE(std::abs(ref.C(k, 2)), 1e-10);
    EXPECT_EQ(core.penalized(), (IndexSet{0, 1, 3, 4}));
}

TEST(MomentCore, StreamedRowsMatchDenseStorage) {
    std::mt19937_64 rng(4);
    const auto in = random_instance(rng, 9, 14, 3, true);
    MomentCoreOptions streamed;
    streamed.dense_threshold = 0;
    const MomentCore dense(in.X, in.w, in.omega, in.beta), lowrank(in.X, in.w, in.omega, in.beta, streamed);
    ASSERT_FALSE(lowrank.is_dense());
    EXPECT_THROW((void)lowrank.C(), Error);
    const Grouping g(14, in.groups);
    const auto Z = build_codata_matrix(g);
    const auto a = build_variance_system(dense, Z, g), b = build_variance_system(lowrank, Z, g);
    EXPECT_LE(max_abs(a.A, b.A), 1e-10);
    EXPECT_LE(max_abs(a.b, b.b), 1e-10);
    EXPECT_LE(max_abs(build_mean_system(dense, Z, g).A, build_mean_system(lowrank, Z, g).A), 1e-10);
}

TEST(VarianceSystem, MatchesExplicitSummation) {
    std::mt19937_64 rng(5);
    for (int rep = 0; rep < 20; ++rep) {
        const Index p = 3 + rep % 10;
        const auto in = random_instance(rng, 2 + (rep * 3) % 11, p, 1 + static_cast<std::size_t>(rep) % std::min<Index>(p, 5), rep % 2);
        const Grouping g(static_cast<std::size_t>(p), in.groups);
        const MomentCore core(in.X, in.w, in.omega, in.beta);
        const auto sys = build_variance_system(core, build_codata_matrix(g), g);
        const auto ref = oracle::moments(in.X, in.w, in.omega);
        const Matrix Z = oracle::codata_dense(static_cast<std::size_t>(p), in.groups);
        EXPECT_LE(max_abs(sys.A, oracle::variance_A(ref.C, Z, in.groups)), 1e-8);
        EXPECT_LE(max_abs(sys.b, oracle::group_means(in.beta.cwiseAbs2() - ref.v, in.groups)), 1e-8);
        EXPECT_TRUE((sys.A.array() >= 0.0).all());
        EXPECT_TRUE(sys.A.allFinite());
    }
}

TEST(VarianceSystem, SingleGroupIsPositiveScalar) {
    std::mt19937_64 rng(6);
    const auto in = random_instance(rng, 6, 9, 1, false);
    const Grouping g(9, in.groups);
    const MomentCore core(in.X, in.w, in.omega, in.beta);
    const auto sys = build_variance_system(core, build_codata_matrix(g), g);
    ASSERT_EQ(sys.A.rows(), 1);
    ASSERT_EQ(sys.A.cols(), 1);
    const auto ref = oracle::moments(in.X, in.w, in.omega);
    EXPECT_NEAR(sys.A(0, 0), ref.C.cwiseAbs2().sum() / 9.0, 1e-10);
    EXPECT_NEAR(sys.b[0], (in.beta.cwiseAbs2() - ref.v).mean(), 1e-10);
    EXPECT_GT(sys.A(0, 0), 0.0);
}

TEST(VarianceSystem, ZeroPriorMeanLeavesTargetUnchanged) {
    std::mt19937_64 rng(7);
    const auto in = random_instance(rng, 6, 8, 2, false);
    const Grouping g(8, in.groups);
    const MomentCore core(in.X, in.w, in.omega, in.beta);
    const auto Z = build_codata_matrix(g);
    const auto plain = build_variance_system(core, Z, g);
    const auto zero = build_variance_system(core, Z, g, PriorMean{Vector::Zero(8), Vector::Zero(2)});
    EXPECT_EQ(plain.b, zero.b);
}

TEST(MeanSystem, MatchesExplicitSummation) {
    std::mt19937_64 rng(8);
    for (int rep = 0; rep < 20; ++rep) {
        const Index p = 4 + rep % 9;
        const auto in = random_instance(rng, 3 + rep % 10, p, 1 + static_cast<std::size_t>(rep % 4), true);
        const Grouping g(static_cast<std::size_t>(p), in.groups);
        const MomentCore core(in.X, in.w, in.omega, in.beta);
        const auto ref = oracle::moments(in.X, in.w, in.omega);
        const Matrix Z = oracle::codata_dense(static_cast<std::size_t>(p), in.groups);
        const Vector mu_tilde = oracle::random_vector(p, rng);
        const auto sys0 = build_mean_system(core, build_codata_matrix(g), g);
        EXPECT_LE(max_abs(sys0.A, oracle::mean_A(ref.C, Z, in.groups)), 1e-10);
        EXPECT_LE(max_abs(sys0.b, oracle::group_means(in.beta, in.groups)), 1e-12);
        const auto sys = build_mean_system(core, build_codata_matrix(g), g, mu_tilde);
        const Vector target = in.beta - (Matrix::Identity(p, p) - ref.C) * mu_tilde;
        EXPECT_LE(max_abs(sys.b, oracle::group_means(target, in.groups)), 1e-10);
    }
}

TEST(MeanSystem, UniformCaseClosedForm) {
    std::mt19937_64 rng(9);
    const Matrix Q = Eigen::HouseholderQR<Matrix>(oracle::random_matrix(12, 5, rng)).householderQ() * Matrix::Identity(12, 5);
    const Vector beta = oracle::random_vector(5, rng);
    const MomentCore core(Q, Vector::Ones(12), Vector::Constant(5, 3.0), beta);
    const Grouping g(5, {{0, 1, 2, 3, 4}});
    const auto sys = build_mean_system(core, build_codata_matrix(g), g);
    EXPECT_NEAR(sys.A(0, 0), 0.25, 1e-12);
    EXPECT_NEAR(sys.b[0], beta.mean(), 1e-12);
}

TEST(SplitSystems, FullInPartEqualsVarianceSystem) {
    std::mt19937_64 rng(10);
    const auto in = random_instance(rng, 7, 10, 3, false);
    const Grouping g(10, in.groups);
    const MomentCore core(in.X, in.w, in.omega, in.beta);
    const auto Z = build_codata_matrix(g);
    GroupSplit split;
    split.in_groups = g.groups();
    split.out_groups = g.groups();
    const auto [a, b] = build_split_systems(core, Z, g, split);
    const auto full = build_variance_system(core, Z, g);
    EXPECT_EQ(a.A, full.A);
    EXPECT_EQ(a.b, full.b);
}

TEST(SplitSystems, GroupSumIdentity) {
    std::mt19937_64 rng(11);
    for (int rep = 0; rep < 10; ++rep) {
        auto in = random_instance(rng, 8, 12, 3, false);
        // Groups of four, so neither split part is empty.
        IndexSet perm(12);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        in.groups.assign(3, {});
        for (std::size_t k = 0; k < 12; ++k) in.groups[k / 4].push_back(perm[k]);
        const Grouping g(12, in.groups);
        const MomentCore core(in.X, in.w, in.omega, in.beta);
        const auto Z = build_codata_matrix(g);
        const auto split = split_groups_random(g, static_cast<std::uint64_t>(rep));
        const auto [sin, sout] = build_split_systems(core, Z, g, split);
        const auto full = build_variance_system(core, Z, g);
        ASSERT_EQ(sin.rows.size(), g.size());
        ASSERT_EQ(sout.rows.size(), g.size());
        for (std::size_t h = 0; h < g.size(); ++h) {
            const auto r = static_cast<Index>(h);
            const double ni = static_cast<double>(split.in_groups[h].size()), no = static_cast<double>(split.out_groups[h].size());
            const Vector lhs = ni * sin.A.row(r).transpose() + no * sout.A.row(r).transpose();
            EXPECT_LE(max_abs(lhs, static_cast<double>(g.group(h).size()) * full.A.row(r).transpose()), 1e-10);
        }
    }
}

TEST(SplitSystems, DisjointHandSummation) {
    std::mt19937_64 rng(12);
    const auto in = random_instance(rng, 5, 4, 2, false);
    const Grouping g(4, {{0, 1}, {2, 3}});
    const MomentCore core(in.X, in.w, in.omega, in.beta);
    GroupSplit split{{{0}, {3}}, {{1}, {2}}, 0};
    const auto [sin, sout] = build_split_systems(core, build_codata_matrix(g), g, split);
    const Matrix& C = core.C();
    auto row_sum = [&](Index k, Index a, Index b) { return C(k, a) * C(k, a) + C(k, b) * C(k, b); };
    EXPECT_NEAR(sin.A(0, 0), row_sum(0, 0, 1), 1e-12);
    EXPECT_NEAR(sin.A(1, 0), row_sum(3, 0, 1), 1e-12);
    EXPECT_NEAR(sout.A(0, 1), row_sum(1, 2, 3), 1e-12);
    EXPECT_NEAR(sout.A(1, 1), row_sum(2, 2, 3), 1e-12);
    EXPECT_NEAR(sout.b[1], in.beta[2] * in.beta[2] - core.v()[2], 1e-12);
}

TEST(SplitSystems, EmptyPartDropsEquation) {
    std::mt19937_64 rng(13);
    const auto in = random_instance(rng, 5, 5, 2, false);
    const Grouping g(5, {{0, 1, 2, 3}, {4}});
    const MomentCore core(in.X, in.w, in.omega, in.beta);
    std::vector<std::string> warnings;
    log::set_sink([&](const std::string& m) { warnings.push_back(m); });
    const auto [sin, sout] = build_split_systems(core, build_codata_matrix(g), g, split_groups_random(g, 1));
    log::set_sink(nullptr);
    EXPECT_EQ(sin.rows, (IndexSet{0, 1}));
    EXPECT_EQ(sout.rows, IndexSet{0});
    EXPECT_EQ(sout.A.cols(), 2);
    EXPECT_FALSE(warnings.empty());
}

TEST(GroupingWeightSystem, MatchesBlockAssembly) {
    std::mt19937_64 rng(14);
    for (int rep = 0; rep < 10; ++rep) {
        const Index p = 10;
        const auto in = random_instance(rng, 7, p, 3, false);
        const auto groups2 = oracle::random_groups(10, 4, true, rng);
        const Grouping g1(10, in.groups), g2(10, groups2);
        const MomentCore core(in.X, in.w, in.omega, in.beta);
        const Vector gam1 = oracle::random_positive(3, 0.1, 2.0, rng), gam2 = oracle::random_positive(4, 0.1, 2.0, rng);
        const double tau = 0.37;
        const auto sys = build_grouping_weight_system(core, {build_codata_matrix(g1), build_codata_matrix(g2)}, {g1, g2}, {gam1, gam2}, tau);
        const auto ref = oracle::moments(in.X, in.w, in.omega);
        const Matrix Z1 = oracle::codata_dense(10, in.groups), Z2 = oracle::codata_dense(10, groups2);
        std::vector<IndexSet> pooled = in.groups;
        pooled.insert(pooled.end(), groups2.begin(), groups2.end());
        const Matrix expected_cols = (Matrix(7, 2) << tau * oracle::variance_A(ref.C, Z1, pooled) * gam1,
                                      tau * oracle::variance_A(ref.C, Z2, pooled) * gam2).finished();
        EXPECT_LE(max_abs(sys.A, expected_cols), 1e-10);
        EXPECT_LE(max_abs(sys.b, oracle::group_means(in.beta.cwiseAbs2() - ref.v, pooled)), 1e-10);
    }
}

TEST(GroupingWeightSystem, SingleAndDuplicatedSources) {
    std::mt19937_64 rng(15);
    const auto in = random_instance(rng, 6, 8, 2, false);
    const Grouping g(8, in.groups);
    const MomentCore core(in.X, in.w, in.omega, in.beta);
    const auto Z = build_codata_matrix(g);
    const Vector gam = (Vector(2) << 0.5, 1.5).finished();
    const auto one = build_grouping_weight_system(core, {Z}, {g}, {gam}, 2.0);
    const auto var = build_variance_system(core, Z, g);
    EXPECT_LE(max_abs(one.A.col(0), 2.0 * var.A * gam), 1e-12);
    const auto two = build_grouping_weight_system(core, {Z, Z}, {g, g}, {gam, gam}, 2.0);
    EXPECT_EQ(two.A.col(0), two.A.col(1));
    EXPECT_THROW(build_grouping_weight_system(core, {Z}, {g}, {Vector::Ones(3)}, 1.0), InputError);
}

TEST(Decoupling, CentredInterceptLeavesPenalisedSystemUnchanged) {
    std::mt19937_64 rng(16);
    for (int rep = 0; rep < 5; ++rep) {
        Matrix X = oracle::random_matrix(20, 30, rng);
        X.rowwise() -= X.colwise().mean();
        const Vector y = oracle::random_vector(20, rng).array() + 3.0;
        const Response r = Response::gaussian(y, 1.5);
        const Grouping g(30, oracle::random_groups(30, 4, true, rng));
        const auto Z = build_codata_matrix(g);

        const auto plain_pen = PenaltyState::ordinary(0.2, 30);
        const auto plain_fit = fit_weighted_ridge(X, r, plain_pen);
        const MomentCore plain(X, information_weights(r, plain_fit), plain_pen.precision_diag(), plain_fit.beta);

        Matrix X1(20, 31);
        X1 << X, Vector::Ones(20);
        std::vector<bool> mask(31, false);
        mask[30] = true;
        const PenaltyState pen1(0.2, Vector::Ones(31), mask);
        const auto fit1 = fit_weighted_ridge(X1, r, pen1);
        const MomentCore with(X1, information_weights(r, fit1), pen1.precision_diag(), fit1.beta);

        const auto a = build_variance_system(plain, Z, g), b = build_variance_system(with, Z, g);
        EXPECT_LE(max_abs(a.A, b.A), 1e-10);
        EXPECT_LE(max_abs(a.b, b.b), 1e-10);
    }
}

TEST(MonteCarlo, GaussianFirstAndSecondMoments) {
    std::mt19937_64 rng(17);
    const Index n = 40, p = 60;
    const Matrix X = oracle::random_matrix(n, p, rng);
    std::vector<IndexSet> groups(2);
    for (std::size_t k = 0; k < 60; ++k) groups[k < 30 ? 0 : 1].push_back(k);
    const Grouping two(60, groups);
    const double sigma2 = 1.0, tau = 0.1;
    const Vector mu = (Vector(2) << 0.3, -0.2).finished();
    const Vector gamma = (Vector(2) << 0.4, 1.6).finished();
    const auto pen = PenaltyState::ordinary(tau, p);
    const Matrix H = (X.transpose() * X / sigma2 + Matrix(pen.precision_diag().asDiagonal())).ldlt().solve(X.transpose() / sigma2);
    const MomentCore core(X, Vector::Constant(n, 1.0 / sigma2), pen.precision_diag(), Vector::Zero(p));
    const auto Z = build_codata_matrix(two);
    const Matrix A_mu = build_mean_system(core, Z, two).A;

    const int reps = 2000;
    std::normal_distribution<double> z;
    Matrix means(reps, 2);
    for (int r = 0; r < reps; ++r) {
        Vector beta(p), eps(n);
        for (Index k = 0; k < p; ++k) beta[k] = mu[k < 30 ? 0 : 1] + std::sqrt(tau * gamma[k < 30 ? 0 : 1]) * z(rng);
        for (Index i = 0; i < n; ++i) eps[i] = std::sqrt(sigma2) * z(rng);
        means.row(r) = oracle::group_means(H * (X * beta + eps), groups).transpose();
    }
    const Vector predicted = A_mu * mu;
    for (Index h = 0; h < 2; ++h) {
        const double m = means.col(h).mean();
        const double se = std::sqrt((means.col(h).array() - m).square().sum() / (reps - 1) / reps);
        EXPECT_LE(std::abs(m - predicted[h]), 3.0 * se) << "group " << h;
    }
}
