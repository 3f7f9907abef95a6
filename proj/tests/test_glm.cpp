#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace ecpc;

namespace {

Response binary_response(const Matrix& X, const Vector& beta, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Vector y(X.rows());
    const Vector lp = X * beta;
    for (Index i = 0; i < y.size(); ++i) y[i] = u(rng) < 1.0 / (1.0 + std::exp(-lp[i])) ? 1.0 : 0.0;
    return Response::binomial(y);
}

Response survival_response(const Matrix& X, const Vector& beta, std::mt19937_64& rng) {
    std::exponential_distribution<double> e(1.0);
    std::bernoulli_distribution censored(0.3);
    Vector t(X.rows()), s(X.rows());
    const Vector lp = X * beta;
    for (Index i = 0; i < t.size(); ++i) {
        t[i] = e(rng) * std::exp(-lp[i]) + 1e-3;
        s[i] = censored(rng) ? 0.0 : 1.0;
    }
    return Response::cox(t, s);
}

double penalised_loglik(const Matrix& X, const Response& r, const Vector& omega, const Vector& b) {
    return log_likelihood(r, X * b) - 0.5 * (omega.array() * b.array().square()).sum();
}

} // namespace

TEST(WeightedRidge, IdentityDesignClosedForm) {
    const Vector y = (Vector(4) << 1.0, -2.0, 0.5, 3.0).finished();
    const double lambda = 2.5;
    const auto fit = fit_weighted_ridge(Matrix::Identity(4, 4), Response::gaussian(y, 1.0), PenaltyState::ordinary(1.0 / lambda, 4));
    EXPECT_LE((fit.beta - y / (1.0 + lambda)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(WeightedRidge, GaussianMatchesClosedFormOnRandomInstances) {
    std::mt19937_64 rng(1);
    for (int rep = 0; rep < 20; ++rep) {
        const Index n = 5 + rep * 2, p = 3 + (rep * 7) % 45;
        const Matrix X = oracle::random_matrix(n, p, rng);
        const Vector y = oracle::random_vector(n, rng);
        const double s2 = 0.5 + 0.1 * rep;
        const Vector tl = oracle::random_positive(p, 0.2, 3.0, rng);
        const PenaltyState pen(0.7, tl);
        const Vector omega = pen.precision_diag();
        const auto fit = fit_weighted_ridge(X, Response::gaussian(y, s2), pen);
        const Vector closed = (X.transpose() * X + s2 * Matrix(omega.asDiagonal())).ldlt().solve(X.transpose() * y);
        EXPECT_LE((fit.beta - closed).cwiseAbs().maxCoeff(), 1e-8) << "n=" << n << " p=" << p;
    }
}

TEST(WeightedRidge, PrimalAndDualPathsAgree) {
    std::mt19937_64 rng(2);
    for (int rep = 0; rep < 6; ++rep) {
        const Index n = 12, p = rep % 2 ? 30 : 8;
        const Matrix X = oracle::random_matrix(n, p, rng);
        std::vector<Response> responses{Response::gaussian(oracle::random_vector(n, rng), 1.3),
                                        binary_response(X, 0.3 * oracle::random_vector(p, rng), rng),
                                        survival_response(X, 0.3 * oracle::random_vector(p, rng), rng)};
        std::vector<bool> unpen(static_cast<std::size_t>(p), false);
        unpen[0] = true;
        for (const auto& r : responses) {
            const PenaltyState pen(0.5, oracle::random_positive(p, 0.5, 2.0, rng), r.family() == Family::binomial ? unpen : std::vector<bool>{});
            RidgeOptions primal, dual;
            primal.path = SolvePath::primal;
            dual.path = SolvePath::dual;
            const auto a = fit_weighted_ridge(X, r, pen, primal);
            const auto b = fit_weighted_ridge(X, r, pen, dual);
            EXPECT_LE((a.beta - b.beta).cwiseAbs().maxCoeff(), 1e-8) << to_string(r.family());
        }
    }
}

TEST(WeightedRidge, PenalisedLikelihoodNonDecreasingAcrossIterations) {
    std::mt19937_64 rng(3);
    const Matrix X = oracle::random_matrix(40, 15, rng);
    const Vector beta0 = oracle::random_vector(15, rng);
    for (const auto& r : {binary_response(X, beta0, rng), survival_response(X, 0.5 * beta0, rng)}) {
        const auto pen = PenaltyState::ordinary(2.0, 15);
        const Vector omega = pen.precision_diag();
        double prev = penalised_loglik(X, r, omega, Vector::Zero(15));
        for (int k = 1; k <= 12; ++k) {
            RidgeOptions opts;
            opts.max_iterations = k;
            Vector b;
            try {
                b = fit_weighted_ridge(X, r, pen, opts).beta;
            } catch (const ConvergenceError& e) {
                b = e.last_iterate();
            }
            const double cur = penalised_loglik(X, r, omega, b);
            EXPECT_GE(cur, prev - 1e-10) << to_string(r.family()) << " iteration " << k;
            prev = cur;
        }
    }
}

TEST(WeightedRidge, ColumnRescalingLeavesLinearPredictorUnchanged) {
    std::mt19937_64 rng(4);
    const Matrix X = oracle::random_matrix(30, 10, rng);
    const Vector beta0 = oracle::random_vector(10, rng);
    const std::vector<Response> rs{Response::gaussian(X * beta0 + oracle::random_vector(30, rng), 1.0), binary_response(X, 0.5 * beta0, rng),
                                   survival_response(X, 0.3 * beta0, rng)};
    for (const auto& r : rs) {
        const Vector tl = oracle::random_positive(10, 0.5, 2.0, rng);
        Matrix Xs = X;
        Vector tls = tl;
        for (Index j = 0; j < 10; j += 3) {
            const double c = 0.5 + j;
            Xs.col(j) *= c;
            tls[j] /= c * c;
        }
        const auto a = fit_weighted_ridge(X, r, PenaltyState(0.8, tl));
        const auto b = fit_weighted_ridge(Xs, r, PenaltyState(0.8, tls));
        EXPECT_LE((a.linear_predictor - b.linear_predictor).cwiseAbs().maxCoeff(), 1e-8) << to_string(r.family());
    }
}

TEST(WeightedRidge, HugePenaltyLeavesInterceptAtLogitMean) {
    std::mt19937_64 rng(5);
    Matrix X = oracle::random_matrix(50, 4, rng);
    X.col(3).setOnes();
    Vector y = Vector::Zero(50);
    for (Index i = 0; i < 18; ++i) y[i] = 1.0;
    const PenaltyState pen(1e-12, Vector::Ones(4), {false, false, false, true});
    const auto fit = fit_weighted_ridge(X, Response::binomial(y), pen);
    EXPECT_LE(fit.beta.head(3).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NEAR(fit.beta[3], std::log(18.0 / 32.0), 1e-8);
}

TEST(WeightedRidge, CoxMatchesNewtonOracle) {
    std::mt19937_64 rng(6);
    for (int rep = 0; rep < 10; ++rep) {
        const Matrix X = oracle::random_matrix(6, 2, rng);
        Vector t = oracle::random_positive(6, 0.5, 5.0, rng);
        Vector s = Vector::Ones(6);
        s[rep % 6] = 0.0;
        if (rep % 3 == 0) t[1] = t[2];
        const Vector omega = Vector::Constant(2, 0.5);
        const auto fit = fit_weighted_ridge(X, Response::cox(t, s), PenaltyState::ordinary(2.0, 2));
        const Vector ref = oracle::cox_newton(X, t, s, omega);
        EXPECT_LE((fit.beta - ref).cwiseAbs().maxCoeff(), 1e-6);
    }
}

TEST(WeightedRidge, DimensionMismatchIsInputError) {
    EXPECT_THROW(fit_weighted_ridge(Matrix::Zero(3, 2), Response::gaussian(Vector::Zero(4), 1.0), PenaltyState::ordinary(1.0, 2)), InputError);
}

TEST(WeightMatrix, BinomialAtZeroIsQuarter) {
    RidgeFit fit;
    fit.linear_predictor = Vector::Zero(5);
    const Vector w = weight_matrix(Response::binomial(Vector::Zero(5)), fit);
    EXPECT_TRUE((w.array() == 0.25).all());
}

TEST(WeightMatrix, GaussianIsNoiseVariance) {
    RidgeFit fit;
    fit.linear_predictor = Vector::Zero(3);
    const Vector w = weight_matrix(Response::gaussian(Vector::Zero(3), 2.0), fit);
    EXPECT_EQ(w, Vector::Constant(3, 2.0));
    EXPECT_EQ(information_weights(Response::gaussian(Vector::Zero(3), 2.0), fit), Vector::Constant(3, 0.5));
}

TEST(WeightMatrix, CoxToyEqualsCumulativeHazard) {
    const Vector t = (Vector(3) << 1, 2, 3).finished();
    const Vector s = Vector::Ones(3);
    RidgeFit fit;
    fit.linear_predictor = Vector::Zero(3);
    const Vector H = breslow_cumhaz(t, s, fit.linear_predictor);
    EXPECT_LE((weight_matrix(Response::cox(t, s), fit, H) - H).cwiseAbs().maxCoeff(), 1e-15);
    EXPECT_THROW(weight_matrix(Response::cox(t, s), fit), InputError);
}

TEST(Breslow, ToyExample) {
    const Vector t = (Vector(3) << 1, 2, 3).finished();
    const Vector H = breslow_cumhaz(t, Vector::Ones(3), Vector::Zero(3));
    EXPECT_NEAR(H[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(H[1], 5.0 / 6.0, 1e-15);
    EXPECT_NEAR(H[2], 11.0 / 6.0, 1e-15);
    const Vector m = martingale_residuals(Vector::Ones(3), Vector::Zero(3), H);
    EXPECT_NEAR(m[0], 2.0 / 3.0, 1e-15);
}

TEST(Breslow, AllCensoredIsZero) {
    const Vector t = (Vector(4) << 3, 1, 2, 5).finished();
    const Vector H = breslow_cumhaz(t, Vector::Zero(4), Vector::Ones(4));
    EXPECT_EQ(H, Vector::Zero(4));
    EXPECT_EQ(martingale_residuals(Vector::Zero(4), Vector::Ones(4), H), Vector::Zero(4));
}

TEST(Breslow, SingleEvent) {
    const Vector H = breslow_cumhaz(Vector::Ones(1), Vector::Ones(1), Vector::Zero(1));
    EXPECT_DOUBLE_EQ(H[0], 1.0);
}

TEST(Breslow, NonDecreasingStepsAtEventTimesOnly) {
    std::mt19937_64 rng(7);
    std::bernoulli_distribution ev(0.6);
    for (int rep = 0; rep < 20; ++rep) {
        const Index n = 15;
        Vector t = oracle::random_positive(n, 0.1, 3.0, rng);
        t[3] = t[4];
        Vector s(n);
        for (Index i = 0; i < n; ++i) s[i] = ev(rng) ? 1.0 : 0.0;
        const Vector lp = oracle::random_vector(n, rng);
        const Vector H = breslow_cumhaz(t, s, lp);
        std::vector<Index> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), Index{0});
        std::sort(order.begin(), order.end(), [&](Index a, Index b) { return t[a] < t[b]; });
        double prev = 0.0;
        for (auto i : order) {
            EXPECT_GE(H[i], prev - 1e-15);
            // Between a sample's time and the previous time, a jump needs an event at this time.
            if (H[i] > prev + 1e-15) {
                bool event_here = false;
                for (Index j = 0; j < n; ++j) event_here |= t[j] == t[i] && s[j] == 1.0;
                EXPECT_TRUE(event_here);
            }
            prev = H[i];
        }
    }
}

TEST(Breslow, MartingaleResidualsSumToZero) {
    std::mt19937_64 rng(8);
    std::bernoulli_distribution ev(0.7);
    for (int rep = 0; rep < 50; ++rep) {
        const Index n = 5 + rep;
        Vector t = oracle::random_positive(n, 0.1, 3.0, rng);
        if (n > 6) t[5] = t[6];
        Vector s(n);
        for (Index i = 0; i < n; ++i) s[i] = ev(rng) ? 1.0 : 0.0;
        const Vector lp = oracle::random_vector(n, rng);
        const Vector m = martingale_residuals(s, lp, breslow_cumhaz(t, s, lp));
        EXPECT_LE(std::abs(m.sum()), 1e-8);
    }
}

TEST(GlobalVariance, GaussianWithinFactorTwoOnAverage) {
    SimulationConfig cfg;
    double sum = 0.0;
    for (std::uint64_t r = 0; r < 50; ++r) {
        const auto d = simulate_linear(cfg, 100 + r);
        sum += estimate_global_variance(d.X, Response::gaussian(d.y)).tau_global;
    }
    const double mean = sum / 50.0;
    EXPECT_GT(mean, 0.05);
    EXPECT_LT(mean, 0.2);
}

TEST(GlobalVariance, ZeroResponseDrivesVarianceDown) {
    std::mt19937_64 rng(9);
    const Matrix X = oracle::random_matrix(30, 50, rng);
    EXPECT_LT(estimate_global_variance(X, Response::gaussian(Vector::Zero(30), 1.0)).tau_global, 1e-6);
}

TEST(GlobalVariance, BinomialDuplicatedRowsKeepPenalty) {
    std::mt19937_64 rng(10);
    const Index n = 40, p = 20;
    const Matrix X = oracle::random_matrix(n, p, rng);
    const Response r = binary_response(X, 0.6 * oracle::random_vector(p, rng), rng);
    GlobalVarianceOptions opts;
    opts.folds = 5;
    opts.fold_ids.resize(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < opts.fold_ids.size(); ++i) opts.fold_ids[i] = i % 5;
    const auto single = estimate_global_variance(X, r, {}, opts);

    Matrix X2(2 * n, p);
    X2 << X, X;
    Vector y2(2 * n);
    y2 << r.y(), r.y();
    GlobalVarianceOptions opts2 = opts;
    opts2.fold_ids.resize(static_cast<std::size_t>(2 * n));
    for (std::size_t i = 0; i < opts2.fold_ids.size(); ++i) opts2.fold_ids[i] = (i % static_cast<std::size_t>(n)) % 5;
    const auto dup = estimate_global_variance(X2, Response::binomial(y2), {}, opts2);
    ASSERT_TRUE(single.lambda && dup.lambda);
    EXPECT_DOUBLE_EQ(*single.lambda, *dup.lambda);
}

TEST(GlobalVariance, StratifiedFoldsBalanceClasses) {
    Vector y = Vector::Zero(40);
    for (Index i = 0; i < 10; ++i) y[i] = 1.0;
    const auto folds = stratified_folds(Response::binomial(y), 5, 3);
    std::vector<int> pos(5, 0);
    for (Index i = 0; i < 10; ++i) ++pos[folds[static_cast<std::size_t>(i)]];
    for (int c : pos) EXPECT_EQ(c, 2);
    EXPECT_EQ(folds, stratified_folds(Response::binomial(y), 5, 3));
}

TEST(GlobalVariance, ZeroDesignRejected) {
    EXPECT_ANY_THROW(estimate_global_variance(Matrix::Zero(10, 5), Response::gaussian(Vector::Ones(10))));
}
