#pragma once

#include "ecpc/core.hpp"
#include "ecpc/cox.hpp"
#include "ecpc/response.hpp"
#include "ecpc/ridge_solver.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <cmath>
#include <limits>
#include <optional>
#include <random>

namespace ecpc {

/// Prior variances of a weighted ridge penalty. Column k has precision
/// 1 / (tau_global * tau_local[k]) unless it is unpenalised (precision 0).
class PenaltyState {
public:
    PenaltyState(double tau_global, Vector tau_local, std::vector<bool> unpenalized = {})
        : tau_global_(tau_global), tau_local_(std::move(tau_local)), unpenalized_(std::move(unpenalized)) {
        if (unpenalized_.empty()) unpenalized_.assign(static_cast<std::size_t>(tau_local_.size()), false);
        if (unpenalized_.size() != static_cast<std::size_t>(tau_local_.size()))
            throw InputError("unpenalised mask length does not match local variances");
        if (!(tau_global_ > 0.0) || !std::isfinite(tau_global_)) throw InputError("global prior variance must be positive");
        for (Index k = 0; k < tau_local_.size(); ++k)
            if (!unpenalized_[static_cast<std::size_t>(k)] && !(tau_local_[k] > 0.0))
                throw InputError("local prior variance of penalised covariate " + std::to_string(k + 1) + " must be positive");
    }

    /// Uniform local variances of one.
    static PenaltyState ordinary(double tau_global, Index p, std::vector<bool> unpenalized = {}) {
        return PenaltyState(tau_global, Vector::Ones(p), std::move(unpenalized));
    }

    [[nodiscard]] double tau_global() const noexcept { return tau_global_; }
    [[nodiscard]] const Vector& tau_local() const noexcept { return tau_local_; }
    [[nodiscard]] const std::vector<bool>& unpenalized() const noexcept { return unpenalized_; }
    [[nodiscard]] Index size() const noexcept { return tau_local_.size(); }

    [[nodiscard]] Vector precision_diag() const {
        Vector omega(tau_local_.size());
        for (Index k = 0; k < omega.size(); ++k)
            omega[k] = unpenalized_[static_cast<std::size_t>(k)] ? 0.0 : 1.0 / (tau_global_ * tau_local_[k]);
        return omega;
    }

private:
    double tau_global_;
    Vector tau_local_;
    std::vector<bool> unpenalized_;
};

struct RidgeFit {
    Vector beta;
    Vector linear_predictor;
    bool converged = false;
    int iterations = 0;
    double deviance = 0.0;
    /// Fitted probabilities numerically at 0 or 1 (binomial only).
    bool separation = false;
    /// Breslow H0 at the training times (cox only).
    Vector cumhaz;
};

struct RidgeOptions {
    SolvePath path = SolvePath::automatic;
    int max_iterations = 100;
    double tolerance = 1e-8;
    std::optional<Vector> start;
};

namespace detail {

inline double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

inline double gaussian_sigma2(const Response& resp) {
    if (!resp.sigma2()) throw InputError("gaussian fit requires a noise variance; estimate it first");
    return *resp.sigma2();
}

} // namespace detail

/// Log-likelihood of the response at linear predictor lp (partial likelihood for cox).
inline double log_likelihood(const Response& resp, const Vector& lp) {
    switch (resp.family()) {
    case Family::gaussian: {
        const double s2 = detail::gaussian_sigma2(resp);
        const double n = static_cast<double>(lp.size());
        return -0.5 * (resp.y() - lp).squaredNorm() / s2 - 0.5 * n * std::log(2.0 * M_PI * s2);
    }
    case Family::binomial: {
        double ll = 0.0;
        for (Index i = 0; i < lp.size(); ++i) ll += resp.y()[i] * lp[i] - detail::log1pexp(lp[i]);
        return ll;
    }
    case Family::cox: return cox_partial_loglik(resp.time(), resp.status(), lp);
    }
    return 0.0;
}

inline double deviance(const Response& resp, const Vector& lp) {
    if (resp.family() == Family::gaussian) return (resp.y() - lp).squaredNorm() / detail::gaussian_sigma2(resp);
    return -2.0 * log_likelihood(resp, lp);
}

/// Diagonal of W = Var(Y | beta) at the fit: sigma^2 for gaussian,
/// p(1-p) for binomial, H0(t_i) exp(lp_i) for cox (H0 must be supplied).
inline Vector weight_matrix(const Response& resp, const RidgeFit& fit, const std::optional<Vector>& cumhaz = std::nullopt) {
    const Vector& lp = fit.linear_predictor;
    switch (resp.family()) {
    case Family::gaussian: return Vector::Constant(lp.size(), detail::gaussian_sigma2(resp));
    case Family::binomial: {
        Vector w(lp.size());
        for (Index i = 0; i < lp.size(); ++i) {
            const double p = detail::sigmoid(lp[i]);
            w[i] = p * (1.0 - p);
        }
        return w;
    }
    case Family::cox: {
        if (!cumhaz) throw InputError("cox weight matrix requires the cumulative baseline hazard");
        Vector w(lp.size());
        for (Index i = 0; i < lp.size(); ++i) w[i] = (*cumhaz)[i] * detail::safe_exp(lp[i]);
        return w;
    }
    }
    return {};
}

/// Curvature weights of the log-likelihood in the linear predictor, i.e. the W
/// entering X'WX + Omega. Equal to weight_matrix for binomial and cox; the
/// gaussian log-likelihood has curvature 1/sigma^2.
inline Vector information_weights(const Response& resp, const RidgeFit& fit) {
    switch (resp.family()) {
    case Family::gaussian: return Vector::Constant(fit.linear_predictor.size(), 1.0 / detail::gaussian_sigma2(resp));
    case Family::binomial: return weight_matrix(resp, fit);
    case Family::cox:
        return weight_matrix(resp, fit, fit.cumhaz.size() ? fit.cumhaz
                                                          : breslow_cumhaz(resp.time(), resp.status(), fit.linear_predictor));
    }
    return {};
}

namespace detail {

/// Score X' dl/dlp and a factor Xt with Xt'Xt = X' (-d2l/dlp2) X.
struct Curvature {
    Vector score;
    Matrix Xt;
};

inline Curvature curvature(const Matrix& X, const Response& resp, const Vector& lp) {
    const Index n = X.rows();
    switch (resp.family()) {
    case Family::gaussian: {
        const double s2 = gaussian_sigma2(resp);
        return {X.transpose() * (resp.y() - lp) / s2, X / std::sqrt(s2)};
    }
    case Family::binomial: {
        Vector resid(n), sw(n);
        for (Index i = 0; i < n; ++i) {
            const double p = sigmoid(lp[i]);
            resid[i] = resp.y()[i] - p;
            sw[i] = std::sqrt(std::max(p * (1.0 - p), 1e-300));
        }
        return {X.transpose() * resid, sw.asDiagonal() * X};
    }
    case Family::cox: {
        const Vector H = breslow_cumhaz(resp.time(), resp.status(), lp);
        const Vector delta = martingale_residuals(resp.status(), lp, H);
        const Matrix info = cox_lp_information(resp.time(), resp.status(), lp);
        Eigen::SelfAdjointEigenSolver<Matrix> eig(info);
        const Vector& ev = eig.eigenvalues();
        const double cut = std::max(ev.cwiseAbs().maxCoeff(), 1e-300) * 1e-13;
        IndexSet keep;
        for (Index i = 0; i < ev.size(); ++i)
            if (ev[i] > cut) keep.push_back(static_cast<std::size_t>(i));
        Matrix root(static_cast<Index>(keep.size()), n);
        for (std::size_t j = 0; j < keep.size(); ++j)
            root.row(static_cast<Index>(j)) = std::sqrt(ev[static_cast<Index>(keep[j])]) * eig.eigenvectors().col(static_cast<Index>(keep[j])).transpose();
        return {X.transpose() * delta, root * X};
    }
    }
    return {};
}

} // namespace detail

/// Maximises log-lik(beta) - 1/2 beta' Omega beta by damped Newton steps
/// (a single exact step for gaussian). Convergence: relative deviance change
/// below the tolerance together with a negligible coefficient step.
inline RidgeFit fit_weighted_ridge(const Matrix& X, const Response& resp, const PenaltyState& pen, const RidgeOptions& opts = {}) {
    if (X.rows() != resp.n()) throw InputError("design has " + std::to_string(X.rows()) + " rows but response has " + std::to_string(resp.n()));
    if (X.cols() != pen.size()) throw InputError("design has " + std::to_string(X.cols()) + " columns but penalty has " + std::to_string(pen.size()));
    const Vector omega = pen.precision_diag();
    auto objective = [&](const Vector& beta, const Vector& lp) {
        return log_likelihood(resp, lp) - 0.5 * (omega.array() * beta.array().square()).sum();
    };

    RidgeFit fit;
    fit.beta = opts.start ? *opts.start : Vector::Zero(X.cols());
    fit.linear_predictor = X * fit.beta;
    double obj = objective(fit.beta, fit.linear_predictor);
    double dev = deviance(resp, fit.linear_predictor);
    for (fit.iterations = 1; fit.iterations <= opts.max_iterations; ++fit.iterations) {
        const auto curv = detail::curvature(X, resp, fit.linear_predictor);
        const WeightedRidgeSolver solver(curv.Xt, omega, opts.path);
        const Vector step = solver.solve_general(Vector(curv.score - omega.cwiseProduct(fit.beta)));
        double scale = 1.0;
        Vector beta_new, lp_new;
        double obj_new = -std::numeric_limits<double>::infinity();
        for (int halving = 0; halving < 40; ++halving, scale *= 0.5) {
            beta_new = fit.beta + scale * step;
            lp_new = X * beta_new;
            obj_new = objective(beta_new, lp_new);
            if (std::isfinite(obj_new) && obj_new >= obj - 1e-10 * (1.0 + std::abs(obj))) break;
        }
        if (!(std::isfinite(obj_new) && obj_new >= obj - 1e-10 * (1.0 + std::abs(obj)))) {
            fit.converged = true;  // no ascent direction left at working precision
            break;
        }
        const double dev_new = deviance(resp, lp_new);
        const double max_step = (beta_new - fit.beta).cwiseAbs().maxCoeff();
        const bool small = std::abs(dev_new - dev) / (std::abs(dev_new) + 0.1) < opts.tolerance &&
                           max_step <= 1e-6 * (1.0 + beta_new.cwiseAbs().maxCoeff());
        fit.beta = std::move(beta_new);
        fit.linear_predictor = std::move(lp_new);
        obj = obj_new;
        dev = dev_new;
        if (small || (resp.family() == Family::gaussian && fit.iterations >= 2)) {
            fit.converged = true;
            break;
        }
    }
    fit.iterations = std::min(fit.iterations, opts.max_iterations);
    fit.deviance = dev;
    if (resp.family() == Family::binomial) {
        for (Index i = 0; i < fit.linear_predictor.size(); ++i) {
            const double p = detail::sigmoid(fit.linear_predictor[i]);
            if (p < 1e-10 || p > 1.0 - 1e-10) fit.separation = true;
        }
        if (fit.separation) log::warn("fitted probabilities numerically 0 or 1; data may be separable");
    }
    if (resp.family() == Family::cox) fit.cumhaz = breslow_cumhaz(resp.time(), resp.status(), fit.linear_predictor);
    if (!fit.converged) throw ConvergenceError("weighted ridge fit did not converge in " + std::to_string(opts.max_iterations) + " iterations", fit.beta);
    return fit;
}

/// Result of estimating the overall prior variance.
struct GlobalVariance {
    double tau_global = 1.0;
    /// Gaussian noise variance (estimated or the supplied value).
    std::optional<double> sigma2;
    /// Selected per-observation penalty for the cross-validated families.
    std::optional<double> lambda;
    /// Criterion along the searched grid (marginal log-likelihood or CV log-likelihood).
    Vector grid;
    Vector criterion;
    /// sigma^2 / (sigma^2 + tau^2 mean eigenvalue of XX') at the joint maximum. For
    /// p > n the likelihood is often maximised as this share vanishes.
    std::optional<double> noise_share;
};

struct GlobalVarianceOptions {
    std::size_t folds = 10;
    std::size_t grid_size = 50;
    double lambda_min = 1e-4;
    double lambda_max = 1e6;
    std::uint64_t seed = 1;
    /// Optional explicit fold id per sample (0-based); overrides stratified assignment.
    std::vector<std::size_t> fold_ids;
    RidgeOptions ridge;
};

/// Stratified fold assignment: samples are shuffled within each stratum and dealt
/// round-robin over the folds.
inline std::vector<std::size_t> stratified_folds(const Response& resp, std::size_t folds, std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(resp.n());
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> ids(n);
    std::vector<std::pair<int, IndexSet>> strata;
    for (std::size_t i = 0; i < n; ++i) {
        const int s = resp.stratum(static_cast<Index>(i));
        auto it = std::find_if(strata.begin(), strata.end(), [&](const auto& e) { return e.first == s; });
        if (it == strata.end()) {
            strata.push_back({s, {}});
            it = std::prev(strata.end());
        }
        it->second.push_back(i);
    }
    std::sort(strata.begin(), strata.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::size_t next = 0;
    for (auto& [label, members] : strata) {
        std::shuffle(members.begin(), members.end(), rng);
        for (auto i : members) ids[i] = next++ % folds;
    }
    return ids;
}

namespace detail {

struct GaussianSpectrum {
    Vector s;   // eigenvalues of X_P X_P' on the restricted space
    Vector u2;  // squared projections of y on the eigenvectors
};

inline GaussianSpectrum gaussian_spectrum(const Matrix& X, const Response& resp, const std::vector<bool>& unpenalized) {
    IndexSet pen, unpen;
    for (std::size_t k = 0; k < unpenalized.size(); ++k) (unpenalized[k] ? unpen : pen).push_back(k);
    Matrix XP = select_columns(X, pen);
    Vector y = resp.y();
    if (!unpen.empty()) {
        // Restricted likelihood: project onto the orthogonal complement of the unpenalised columns.
        const Matrix XU = select_columns(X, unpen);
        Eigen::HouseholderQR<Matrix> qr(XU);
        const Matrix Q = qr.householderQ();
        const Matrix Qc = Q.rightCols(X.rows() - XU.cols());
        XP = Qc.transpose() * XP;
        y = Qc.transpose() * y;
    }
    if (XP.size() == 0 || XP.cwiseAbs().maxCoeff() == 0.0) throw NumericError("design matrix of penalised covariates is zero");
    Eigen::SelfAdjointEigenSolver<Matrix> eig(XP * XP.transpose());
    return {eig.eigenvalues().cwiseMax(0.0), (eig.eigenvectors().transpose() * y).array().square()};
}

inline double profile_sigma2(const Vector& s, const Vector& u2, double x);

inline GlobalVariance gaussian_marginal_likelihood(const Matrix& X, const Response& resp, const std::vector<bool>& unpenalized) {
    const auto [s, u2] = gaussian_spectrum(X, resp, unpenalized);
    const double m = static_cast<double>(s.size());
    const double s_mean = s.mean();

    GlobalVariance out;
    const auto known = resp.sigma2();
    // Negative twice the log marginal likelihood, up to constants, as a function of log(x).
    // Known sigma^2: x = tau^2. Unknown: x = tau^2 / sigma^2 with sigma^2 profiled out.
    auto criterion = [&](double logx) {
        const double x = std::exp(logx);
        if (known) {
            double v = 0.0;
            for (Index i = 0; i < s.size(); ++i) {
                const double c = *known + x * s[i];
                v += std::log(c) + u2[i] / c;
            }
            return v;
        }
        double rss = 0.0, logdet = 0.0;
        for (Index i = 0; i < s.size(); ++i) {
            const double c = 1.0 + x * s[i];
            rss += u2[i] / c;
            logdet += std::log(c);
        }
        return m * std::log(std::max(rss / m, 1e-300)) + logdet;
    };
    const double centre = std::log((known ? *known : 1.0) / s_mean);
    const int points = 161;
    const double lo = centre - 8.0 * std::log(10.0), hi = centre + 8.0 * std::log(10.0);
    out.grid.resize(points);
    out.criterion.resize(points);
    int best = 0;
    for (int i = 0; i < points; ++i) {
        out.grid[i] = lo + (hi - lo) * i / (points - 1);
        out.criterion[i] = criterion(out.grid[i]);
        if (out.criterion[i] < out.criterion[best]) best = i;
    }
    double a = out.grid[std::max(best - 1, 0)], b = out.grid[std::min(best + 1, points - 1)];
    const double phi = 0.5 * (std::sqrt(5.0) - 1.0);
    double c = b - phi * (b - a), d = a + phi * (b - a);
    double fc = criterion(c), fd = criterion(d);
    for (int it = 0; it < 200 && b - a > 1e-12; ++it) {
        if (fc < fd) {
            b = d; d = c; fd = fc;
            c = b - phi * (b - a); fc = criterion(c);
        } else {
            a = c; c = d; fc = fd;
            d = a + phi * (b - a); fd = criterion(d);
        }
    }
    double logx = 0.5 * (a + b);
    if (criterion(out.grid[best]) < criterion(logx)) logx = out.grid[best];
    const double x = std::exp(logx);
    out.grid = out.grid.array().exp();
    out.criterion = -0.5 * out.criterion;
    if (known) {
        out.sigma2 = *known;
        out.tau_global = x;
    } else {
        out.sigma2 = profile_sigma2(s, u2, x);
        out.tau_global = x * *out.sigma2;
        out.noise_share = 1.0 / (1.0 + x * s_mean);
    }
    return out;
}

/// Noise variance maximising the marginal likelihood at ratio x = tau^2 / sigma^2.
inline double profile_sigma2(const Vector& s, const Vector& u2, double x) {
    double rss = 0.0;
    for (Index i = 0; i < s.size(); ++i) rss += u2[i] / (1.0 + x * s[i]);
    return rss / static_cast<double>(s.size());
}

/// Out-of-fold log-likelihood; cross-validated partial likelihood for cox.
inline double held_out_loglik(const Matrix& X, const Response& resp, const Vector& beta, const IndexSet& train, const IndexSet& test) {
    if (resp.family() == Family::cox) {
        const double full = cox_partial_loglik(resp.time(), resp.status(), X * beta);
        const Response tr = resp.subset(train);
        return full - cox_partial_loglik(tr.time(), tr.status(), select_rows(X, train) * beta);
    }
    const Response te = resp.subset(test);
    return log_likelihood(te, select_rows(X, test) * beta);
}

inline GlobalVariance cross_validated_penalty(const Matrix& X, const Response& resp, const std::vector<bool>& unpenalized,
                                              const GlobalVarianceOptions& opts) {
    const auto n = static_cast<std::size_t>(resp.n());
    const std::size_t folds = std::min(opts.folds, n);
    if (folds < 2) throw InputError("cross-validation needs at least two folds");
    const auto ids = opts.fold_ids.empty() ? stratified_folds(resp, folds, opts.seed) : opts.fold_ids;
    if (ids.size() != n) throw InputError("fold id count does not match sample count");
    const std::size_t nfold = *std::max_element(ids.begin(), ids.end()) + 1;
    if (X.cwiseAbs().maxCoeff() == 0.0) throw NumericError("design matrix is zero");

    // Descending grid so warm starts move from sparse-ish to dense fits.
    Vector grid = log_spaced(opts.lambda_max, opts.lambda_min, opts.grid_size);
    Matrix score = Matrix::Zero(grid.size(), static_cast<Index>(nfold));
    parallel_for(nfold, [&](std::size_t f) {
        IndexSet train, test;
        for (std::size_t i = 0; i < n; ++i) (ids[i] == f ? test : train).push_back(i);
        if (test.empty() || train.empty()) return;
        const Matrix Xtr = select_rows(X, train);
        const Response rtr = resp.subset(train);
        std::optional<Vector> start;
        for (Index l = 0; l < grid.size(); ++l) {
            Vector omega(X.cols());
            for (Index k = 0; k < X.cols(); ++k)
                omega[k] = unpenalized[static_cast<std::size_t>(k)] ? 1.0 : 1.0 / (static_cast<double>(train.size()) * grid[l]);
            RidgeOptions ro = opts.ridge;
            ro.start = start;
            RidgeFit fit;
            try {
                fit = fit_weighted_ridge(Xtr, rtr, PenaltyState(1.0, omega, unpenalized), ro);
            } catch (const ConvergenceError& e) {
                fit.beta = e.last_iterate();
            }
            start = fit.beta;
            score(l, static_cast<Index>(f)) = held_out_loglik(X, resp, fit.beta, train, test);
        }
    });
    Vector total = score.rowwise().sum();
    Index best = 0;
    for (Index l = 0; l < total.size(); ++l)
        if (std::isfinite(total[l]) && (total[l] > total[best] || !std::isfinite(total[best]))) best = l;
    GlobalVariance out;
    out.lambda = grid[best];
    out.tau_global = 1.0 / (static_cast<double>(n) * grid[best]);
    out.grid = grid;
    out.criterion = total;
    return out;
}

} // namespace detail

/// Global prior variance with all local variances at one. Gaussian: joint
/// maximisation of the marginal likelihood Y ~ N(0, sigma^2 I + tau^2 X X')
/// over (sigma^2, tau^2), restricted to the complement of unpenalised columns.
/// Binomial/cox: k-fold CV over a log grid of per-observation penalties lambda,
/// with tau^2 = 1 / (n lambda*).
inline GlobalVariance estimate_global_variance(const Matrix& X, const Response& resp, const std::vector<bool>& unpenalized = {},
                                               const GlobalVarianceOptions& opts = {}) {
    if (X.rows() != resp.n()) throw InputError("design and response sample counts differ");
    std::vector<bool> mask = unpenalized.empty() ? std::vector<bool>(static_cast<std::size_t>(X.cols()), false) : unpenalized;
    if (mask.size() != static_cast<std::size_t>(X.cols())) throw InputError("unpenalised mask length does not match design");
    if (std::none_of(mask.begin(), mask.end(), [](bool u) { return !u; })) throw InputError("no penalised covariates");
    if (resp.family() == Family::gaussian) return detail::gaussian_marginal_likelihood(X, resp, mask);
    return detail::cross_validated_penalty(X, resp, mask, opts);
}

} // namespace ecpc
