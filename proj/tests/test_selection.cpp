#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace ecpc;

namespace {

struct Quiet {
    Quiet() { log::set_sink([](const std::string&) {}); }
};

const Quiet quiet;

struct Fitted {
    SimulatedData data;
    FittedModel model;
};

const Fitted& gaussian_fit() {
    static const Fitted f = [] {
        SimulationConfig cfg;
        Fitted out{simulate_linear(cfg, 21), {}};
        out.model = fit_ecpc(out.data.X, Response::gaussian(out.data.y),
                             {CoDataSource{informative_grouping(out.data.beta, 10), HyperKind::ridge, std::nullopt}});
        return out;
    }();
    return f;
}

/// Hand-built gaussian model with given variances; only the fields selection reads.
FittedModel manual_model(const Vector& beta, double tau, const Vector& tau_local, double sigma2) {
    FittedModel m;
    m.beta = beta;
    m.tau_global = tau;
    m.tau_local = tau_local;
    m.sigma2 = sigma2;
    m.excluded.assign(static_cast<std::size_t>(beta.size()), false);
    return m;
}

} // namespace

TEST(Metrics, AucHandExample) {
    const Vector s = (Vector(4) << 0.1, 0.4, 0.35, 0.8).finished();
    const Vector y = (Vector(4) << 0, 0, 1, 1).finished();
    EXPECT_DOUBLE_EQ(auc(s, y), 0.75);
    EXPECT_DOUBLE_EQ(auc(y, y), 1.0);
    EXPECT_DOUBLE_EQ(auc(Vector::Zero(4), y), 0.5);
    EXPECT_THROW(auc(s, Vector::Ones(4)), InputError);
}

TEST(Metrics, AucOfRandomLabelsNearHalf) {
    std::mt19937_64 rng(1);
    const Vector s = oracle::random_vector(2000, rng);
    Vector y(2000);
    std::bernoulli_distribution coin(0.5);
    for (Index i = 0; i < y.size(); ++i) y[i] = coin(rng) ? 1.0 : 0.0;
    const double a = auc(s, y);
    EXPECT_GT(a, 0.4);
    EXPECT_LT(a, 0.6);
}

TEST(Metrics, ConcordanceHandExample) {
    const Vector t = (Vector(3) << 1, 2, 3).finished();
    const Vector st = (Vector(3) << 1, 1, 0).finished();
    EXPECT_NEAR(concordance((Vector(3) << 3, 1, 2).finished(), t, st), 2.0 / 3.0, 1e-15);
    EXPECT_DOUBLE_EQ(concordance((Vector(3) << 3, 2, 1).finished(), t, st), 1.0);
    EXPECT_DOUBLE_EQ(mean_squared_error(t, st), 10.0 / 3.0);
}

TEST(ElasticNet, ZeroL1MatchesLocalVarianceRidge) {
    std::mt19937_64 rng(2);
    const Matrix X = oracle::random_matrix(20, 12, rng);
    const Vector y = oracle::random_vector(20, rng);
    const Vector tl = oracle::random_positive(12, 0.2, 3.0, rng);
    const double tau = 0.4;
    const Response r = Response::gaussian(y, 1.0);
    ElasticNet net(X * tl.cwiseSqrt().asDiagonal(), r, Vector::Constant(12, 1.0 / tau), std::vector<bool>(12, true));
    const Vector scaled = net.solve(0.0, Vector::Zero(12));
    const RidgeFit ridge = fit_weighted_ridge(X, r, PenaltyState(tau, tl, std::vector<bool>(12, false)));
    // The scaled problem has the same fitted values.
    EXPECT_LE((X * tl.cwiseSqrt().asDiagonal() * scaled - ridge.linear_predictor).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LE((tl.cwiseSqrt().cwiseProduct(scaled) - ridge.beta).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(ElasticNet, KktConditionsForBinomial) {
    std::mt19937_64 rng(3);
    const Matrix X = oracle::random_matrix(40, 8, rng);
    Vector y(40);
    for (Index i = 0; i < 40; ++i) y[i] = X(i, 0) + 0.3 * X(i, 1) > 0.0 ? 1.0 : 0.0;
    y[0] = 1.0 - y[0];
    y[1] = 1.0 - y[1];
    ElasticNet net(X, Response::binomial(y), Vector::Constant(8, 0.5), std::vector<bool>(8, true));
    const double lambda = 0.3 * net.lambda_max();
    const Vector b = net.solve(lambda, Vector::Zero(8));
    Vector p(40);
    for (Index i = 0; i < 40; ++i) p[i] = 1.0 / (1.0 + std::exp(-X.row(i).dot(b)));
    const Vector score = X.transpose() * (y - p) - 0.5 * b;
    for (Index k = 0; k < 8; ++k) {
        if (b[k] != 0.0) EXPECT_NEAR(score[k], lambda * (b[k] > 0 ? 1.0 : -1.0), 1e-6);
        else EXPECT_LE(std::abs(score[k]), lambda + 1e-6);
    }
    EXPECT_EQ(net.solve(1.0001 * net.lambda_max(), Vector::Zero(8)), Vector::Zero(8));
}

TEST(SelectL1, HitsRequestedCounts) {
    const auto& f = gaussian_fit();
    const Response r = Response::gaussian(f.data.y);
    for (std::size_t target : {5u, 25u, 50u}) {
        const auto sel = select_l1(f.model, f.data.X, r, target);
        EXPECT_EQ(sel.selected.size(), target);
        EXPECT_FALSE(sel.count_adjusted);
        EXPECT_TRUE(std::is_sorted(sel.selected.begin(), sel.selected.end()));
        for (Index k = 0; k < sel.beta.size(); ++k)
            if (!std::binary_search(sel.selected.begin(), sel.selected.end(), static_cast<std::size_t>(k))) EXPECT_EQ(sel.beta[k], 0.0);
    }
    EXPECT_THROW(select_l1(f.model, f.data.X, r, 0), InputError);
    EXPECT_THROW(select_l1(f.model, f.data.X, r, 301), InputError);
}

TEST(Refit, FullSelectionReproducesDenseFit) {
    const auto& f = gaussian_fit();
    IndexSet all(300);
    std::iota(all.begin(), all.end(), std::size_t{0});
    const auto sel = refit_selected(f.model, f.data.X, Response::gaussian(f.data.y), all, RefitMode::dense);
    EXPECT_LE((sel.beta - f.model.beta).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_THROW(refit_selected(f.model, f.data.X, Response::gaussian(f.data.y), {}, RefitMode::dense), InputError);
}

TEST(Refit, RecalibratedUsesUnitLocalVariances) {
    const auto& f = gaussian_fit();
    const IndexSet s{3, 10, 200};
    const auto sel = refit_selected(f.model, f.data.X, Response::gaussian(f.data.y), s, RefitMode::recalibrated);
    const auto ref = fit_ordinary_ridge(detail::select_columns(f.data.X, s), Response::gaussian(f.data.y));
    for (std::size_t j = 0; j < s.size(); ++j) EXPECT_NEAR(sel.beta[static_cast<Index>(s[j])], ref.beta[static_cast<Index>(j)], 1e-10);
}

TEST(Dss, LimitsAndKkt) {
    const auto& f = gaussian_fit();
    const Matrix& X = f.data.X;
    EXPECT_LE((dss_coefficients(f.model, X, 0.0) - f.model.beta).cwiseAbs().maxCoeff(), 1e-10);
    const double lmax = dss_lambda_max(f.model, X);
    EXPECT_EQ(dss_coefficients(f.model, X, 1.0001 * lmax), Vector::Zero(300));
    EXPECT_THROW(select_dss(f.model, X, Response::gaussian(f.data.y), 1.0001 * lmax), NumericError);

    const double lambda = 0.05 * lmax, n = 100.0;
    const Vector g = dss_coefficients(f.model, X, lambda);
    const Vector grad = -(2.0 / n) * X.transpose() * (X * f.model.beta - X * g);
    for (Index j = 0; j < 300; ++j) {
        const double pen = lambda / std::abs(f.model.beta[j]);
        if (g[j] != 0.0) EXPECT_NEAR(grad[j] + pen * (g[j] > 0 ? 1.0 : -1.0), 0.0, 1e-8 * std::max(1.0, pen));
        else EXPECT_LE(std::abs(grad[j]), pen * (1.0 + 1e-8));
    }
}

TEST(Dss, CountTargeting) {
    const auto& f = gaussian_fit();
    const auto sel = select_dss_count(f.model, f.data.X, Response::gaussian(f.data.y), 10);
    EXPECT_EQ(sel.selected.size(), 10u);
    EXPECT_EQ(sel.method, "dss");
}

TEST(CredibleSds, MatchDirectInversion) {
    std::mt19937_64 rng(4);
    for (int rep = 0; rep < 20; ++rep) {
        const Index n = 4 + rep % 9, p = 3 + (rep * 7) % 11;
        const Matrix X = oracle::random_matrix(n, p, rng);
        const Vector tl = oracle::random_positive(p, 0.1, 2.0, rng);
        const double tau = 0.7, sigma2 = 1.3;
        const auto m = manual_model(oracle::random_vector(p, rng), tau, tl, sigma2);
        const Vector sd = credible_sds(m, X, Response::gaussian(Vector::Zero(n)));
        const Vector ref = oracle::posterior_sd(X, Vector::Constant(n, 1.0 / sigma2), (tau * tl).cwiseInverse());
        EXPECT_LE((sd - ref).cwiseAbs().maxCoeff(), 1e-8);
    }
}

TEST(CredibleSds, InterceptIsProfiledOut) {
    std::mt19937_64 rng(5);
    const Index n = 9, p = 6;
    const Matrix X = oracle::random_matrix(n, p, rng);
    const Vector tl = oracle::random_positive(p, 0.1, 2.0, rng);
    auto m = manual_model(oracle::random_vector(p, rng), 0.5, tl, 1.0);
    m.has_intercept = true;
    const Vector sd = credible_sds(m, X, Response::gaussian(Vector::Zero(n)));
    Matrix full(n, p + 1);
    full << X, Vector::Ones(n);
    Matrix prec = full.transpose() * full;
    prec.diagonal().head(p) += (0.5 * tl).cwiseInverse();
    const Vector ref = Matrix(prec.inverse()).diagonal().head(p).cwiseSqrt();
    EXPECT_LE((sd - ref).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(CredibleSds, ColumnRescalingEquivariance) {
    std::mt19937_64 rng(6);
    const Index n = 10, p = 7;
    const Matrix X = oracle::random_matrix(n, p, rng);
    const Vector c = oracle::random_positive(p, 0.5, 4.0, rng);
    const Vector tl = oracle::random_positive(p, 0.1, 2.0, rng);
    const Vector beta = oracle::random_vector(p, rng);
    const auto a = manual_model(beta, 0.8, tl, 1.0);
    const auto b = manual_model(beta.cwiseQuotient(c), 0.8, tl.cwiseQuotient(c.cwiseAbs2()), 1.0);
    const Response r = Response::gaussian(Vector::Zero(n));
    const Vector sa = credible_sds(a, X, r), sb = credible_sds(b, X * c.asDiagonal(), r);
    EXPECT_LE((sb.cwiseProduct(c) - sa).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(SelectCredible, ScoresAgainstRelativeSds) {
    const auto& f = gaussian_fit();
    const Response r = Response::gaussian(f.data.y);
    const Vector sd = credible_sds(f.model, f.data.X, r);
    const double min_sd = sd.minCoeff();
    EXPECT_DOUBLE_EQ((sd / min_sd).minCoeff(), 1.0);
    const auto sel = select_credible(f.model, f.data.X, r, 15);
    ASSERT_EQ(sel.selected.size(), 15u);
    double worst_in = std::numeric_limits<double>::infinity(), best_out = 0.0;
    for (Index k = 0; k < 300; ++k) {
        const double score = std::abs(f.model.beta[k]) / (sd[k] / min_sd);
        if (std::binary_search(sel.selected.begin(), sel.selected.end(), static_cast<std::size_t>(k))) worst_in = std::min(worst_in, score);
        else best_out = std::max(best_out, score);
    }
    EXPECT_GE(worst_in, best_out);
    EXPECT_DOUBLE_EQ(sel.tuning, worst_in);
}

TEST(SelectL1, BinomialRuns) {
    std::mt19937_64 rng(7);
    const Matrix X = oracle::random_matrix(80, 30, rng);
    Vector y(80);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (Index i = 0; i < 80; ++i) y[i] = u(rng) < 1.0 / (1.0 + std::exp(-(X(i, 0) - X(i, 1)))) ? 1.0 : 0.0;
    std::vector<IndexSet> groups(3);
    for (std::size_t k = 0; k < 30; ++k) groups[k % 3].push_back(k);
    EcpcOptions opts;
    opts.intercept = true;
    opts.global.folds = 5;
    const Response r = Response::binomial(y);
    const auto model = fit_ecpc(X, r, {CoDataSource{Grouping(30, groups), HyperKind::ridge, std::nullopt}}, opts);
    const auto sel = select_l1(model, X, r, 4);
    EXPECT_EQ(sel.selected.size(), 4u);
    EXPECT_GT(auc(X * sel.beta + Vector::Constant(80, sel.intercept), y), 0.6);
}
