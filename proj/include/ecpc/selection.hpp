#pragma once

#include "ecpc/elastic_net.hpp"
#include "ecpc/estimator.hpp"

#include <Eigen/SVD>

#include <string_view>

namespace ecpc {

enum class RefitMode { dense, recalibrated };

inline std::string_view to_string(RefitMode m) { return m == RefitMode::dense ? "dense" : "recalibrated"; }

inline RefitMode refit_mode_from_string(std::string_view s) {
    if (s == "dense") return RefitMode::dense;
    if (s == "recalibrated" || s == "recal") return RefitMode::recalibrated;
    throw InputError("unknown refit mode '" + std::string(s) + "'");
}

struct SelectionOptions {
    /// Unpenalised covariates used when the model was fitted.
    Matrix unpenalized;
    RefitMode refit = RefitMode::dense;
    std::size_t path_points = 100;
    double path_ratio = 1e-4;
    int max_bisections = 60;
    RidgeOptions ridge;
    GlobalVarianceOptions global;
};

struct SelectionResult {
    IndexSet selected;
    std::string method;
    /// Penalty at which the selection was taken.
    double tuning = 0.0;
    /// Selected count differs from the request, or ties at the boundary were broken by |beta|.
    bool count_adjusted = false;
    RefitMode refit = RefitMode::dense;
    Vector beta;
    Vector beta_unpenalized;
    double intercept = 0.0;
    double tau_global = 0.0;
};

namespace detail {

inline Response selection_response(const FittedModel& model, const Response& resp) {
    if (resp.family() != model.family) throw InputError("response family does not match the model");
    if (resp.family() == Family::gaussian && !resp.sigma2()) {
        if (!model.sigma2) throw InputError("gaussian model lacks a noise variance");
        return resp.with_sigma2(*model.sigma2);
    }
    return resp;
}

inline IndexSet candidates(const FittedModel& model) {
    IndexSet out;
    for (std::size_t k = 0; k < model.p(); ++k)
        if (!model.excluded[k]) out.push_back(k);
    return out;
}

/// [X_S diag(sqrt(tau_local_S)), U, 1].
inline Matrix scaled_design(const FittedModel& model, const Matrix& X, const IndexSet& cols, const Matrix& U) {
    const Index extra = (U.size() ? U.cols() : 0) + (model.has_intercept ? 1 : 0);
    Matrix out(X.rows(), static_cast<Index>(cols.size()) + extra);
    for (std::size_t j = 0; j < cols.size(); ++j)
        out.col(static_cast<Index>(j)) = X.col(static_cast<Index>(cols[j])) * std::sqrt(model.tau_local[static_cast<Index>(cols[j])]);
    if (U.size()) out.middleCols(static_cast<Index>(cols.size()), U.cols()) = U;
    if (model.has_intercept) out.col(out.cols() - 1).setOnes();
    return out;
}

inline void check_inputs(const FittedModel& model, const Matrix& X, const SelectionOptions& opts) {
    if (static_cast<std::size_t>(X.cols()) != model.p()) throw InputError("design columns do not match the model");
    if (model.beta_unpenalized.size() != (opts.unpenalized.size() ? opts.unpenalized.cols() : 0))
        throw InputError("unpenalised covariates do not match the model");
}

} // namespace detail

/// Weighted ridge on the selected covariates. Dense mode keeps the learnt
/// global and local variances; recalibrated mode resets local variances to one
/// and re-estimates the global variance on the submodel.
inline SelectionResult refit_selected(const FittedModel& model, const Matrix& X, const Response& resp, const IndexSet& selected,
                                      RefitMode mode, const SelectionOptions& opts = {}) {
    if (selected.empty()) throw InputError("cannot refit an empty selection");
    detail::check_inputs(model, X, opts);
    IndexSet sel = selected;
    std::sort(sel.begin(), sel.end());
    const Matrix XS = detail::select_columns(X, sel);
    const auto d = detail::full_design(XS, resp, opts.unpenalized, model.has_intercept);
    Response r = resp;
    FittedModel sub;
    sub.family = model.family;
    if (mode == RefitMode::dense) {
        r = detail::selection_response(model, resp);
        sub.tau_global = model.tau_global;
        sub.tau_local = detail::select(model.tau_local, sel);
    } else {
        const auto gv = estimate_global_variance(d.X, resp, d.unpenalized, opts.global);
        sub.tau_global = gv.tau_global;
        if (gv.sigma2) r = resp.with_sigma2(*gv.sigma2);
        sub.tau_local = Vector::Ones(static_cast<Index>(sel.size()));
    }
    sub.excluded.assign(sel.size(), false);
    detail::final_fit(sub, d, r, sub.excluded, opts.ridge);
    SelectionResult out;
    out.selected = sel;
    out.refit = mode;
    out.beta = Vector::Zero(static_cast<Index>(model.p()));
    for (std::size_t j = 0; j < sel.size(); ++j) out.beta[static_cast<Index>(sel[j])] = sub.beta[static_cast<Index>(j)];
    out.beta_unpenalized = sub.beta_unpenalized;
    out.intercept = sub.intercept;
    out.tau_global = sub.tau_global;
    return out;
}

/// Elastic net on X' = X Delta^{-1/2} with the ridge part fixed at 1/tau_global
/// and the L1 penalty tuned so that exactly `target` covariates are non-zero.
inline SelectionResult select_l1(const FittedModel& model, const Matrix& X, const Response& resp, std::size_t target,
                                 const SelectionOptions& opts = {}) {
    detail::check_inputs(model, X, opts);
    const IndexSet cand = detail::candidates(model);
    if (target < 1 || target > cand.size())
        throw InputError("target count " + std::to_string(target) + " must lie in [1, " + std::to_string(cand.size()) + "]");
    const Matrix Xs = detail::scaled_design(model, X, cand, opts.unpenalized);
    const auto m = static_cast<Index>(cand.size());
    Vector ridge = Vector::Zero(Xs.cols());
    ridge.head(m).setConstant(1.0 / model.tau_global);
    std::vector<bool> l1(static_cast<std::size_t>(Xs.cols()), false);
    std::fill(l1.begin(), l1.begin() + m, true);
    ElasticNet net(Xs, detail::selection_response(model, resp), ridge, l1);

    auto count = [&](const Vector& b) {
        std::size_t c = 0;
        for (Index k = 0; k < m; ++k) c += b[k] != 0.0;
        return c;
    };
    const double lmax = net.lambda_max();
    Vector grid = detail::log_spaced(lmax, lmax * opts.path_ratio, std::max<std::size_t>(opts.path_points, 2));
    grid.conservativeResize(grid.size() + 1);
    grid[grid.size() - 1] = 0.0;

    Vector prev = net.solve(std::numeric_limits<double>::infinity(), Vector::Zero(Xs.cols()));
    double prev_lambda = lmax;
    Vector hit;
    double hit_lambda = 0.0;
    for (Index i = 0; i < grid.size(); ++i) {
        Vector b = net.solve(grid[i], prev);
        const std::size_t c = count(b);
        if (c == target) {
            hit = b;
            hit_lambda = grid[i];
            break;
        }
        if (c > target) {
            // Bisect in log-penalty between the bracketing path points.
            double lo = grid[i], hi = prev_lambda;
            Vector best_over = b;
            double best_over_lambda = grid[i];
            for (int it = 0; it < opts.max_bisections; ++it) {
                const double mid = lo > 0.0 ? std::sqrt(lo * hi) : 0.5 * hi;
                Vector bm = net.solve(mid, prev);
                const std::size_t cm = count(bm);
                if (cm == target) {
                    hit = bm;
                    hit_lambda = mid;
                    break;
                }
                if (cm > target) {
                    lo = mid;
                    best_over = bm;
                    best_over_lambda = mid;
                } else {
                    hi = mid;
                    prev = bm;
                }
            }
            if (hit.size() == 0) {
                hit = best_over;
                hit_lambda = best_over_lambda;
            }
            break;
        }
        prev = b;
        prev_lambda = grid[i];
    }
    if (hit.size() == 0) {
        hit = prev;
        hit_lambda = 0.0;
    }

    IndexSet order;
    for (Index k = 0; k < m; ++k)
        if (hit[k] != 0.0) order.push_back(static_cast<std::size_t>(k));
    bool adjusted = false;
    if (order.size() != target) {
        adjusted = true;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return std::abs(hit[static_cast<Index>(a)]) > std::abs(hit[static_cast<Index>(b)]); });
        if (order.size() > target) order.resize(target);
        log::warn("L1 selection reached " + std::to_string(count(hit)) + " covariates instead of " + std::to_string(target));
    }
    IndexSet selected;
    for (auto j : order) selected.push_back(cand[j]);
    if (selected.empty()) throw NumericError("L1 selection selected no covariates");
    auto out = refit_selected(model, X, resp, selected, opts.refit, opts);
    out.method = "l1";
    out.tuning = hit_lambda;
    out.count_adjusted = adjusted;
    return out;
}

/// Decoupled shrinkage and selection: argmin_g sum_j (lambda/|b_j|)|g_j| + (1/n)||X b - X g||^2
/// over the penalised block, with b the dense estimate. Coordinates with b_j = 0 stay zero.
/// `tol` is relative to the root mean square of X b; `start` warm-starts the descent.
inline Vector dss_coefficients(const FittedModel& model, const Matrix& X, double lambda, int max_sweeps = 100000, double tol = 1e-12,
                               const Vector* start = nullptr) {
    if (static_cast<std::size_t>(X.cols()) != model.p()) throw InputError("design columns do not match the model");
    if (!(lambda >= 0.0)) throw InputError("DSS penalty must be non-negative");
    const double n = static_cast<double>(X.rows());
    const Vector& b = model.beta;
    Vector g = start ? *start : b;
    for (Index j = 0; j < g.size(); ++j)
        if (b[j] == 0.0) g[j] = 0.0;
    const Vector xb = X * b;
    Vector resid = xb - X * g;  // X b - X g
    tol *= std::max(1.0, std::sqrt(xb.squaredNorm() / std::max(n, 1.0)));
    const Vector a = (2.0 / n) * X.colwise().squaredNorm().transpose();
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double change = 0.0;
        for (Index j = 0; j < X.cols(); ++j) {
            if (b[j] == 0.0 || a[j] == 0.0) continue;
            const double c = (2.0 / n) * X.col(j).dot(resid) + a[j] * g[j];
            const double nj = detail::soft_threshold(c, lambda / std::abs(b[j])) / a[j];
            const double d = nj - g[j];
            if (d != 0.0) {
                resid -= d * X.col(j);
                g[j] = nj;
                change = std::max(change, std::abs(d) * std::sqrt(a[j]));
            }
        }
        if (change <= tol) return g;
    }
    throw ConvergenceError("DSS coordinate descent did not converge", g);
}

/// Smallest DSS penalty with an empty selection: max_j (2/n)|x_j' X b| |b_j|.
inline double dss_lambda_max(const FittedModel& model, const Matrix& X) {
    const Vector fit = X * model.beta;
    return ((2.0 / static_cast<double>(X.rows())) * (X.transpose() * fit).cwiseAbs().cwiseProduct(model.beta.cwiseAbs())).maxCoeff();
}

inline SelectionResult select_dss(const FittedModel& model, const Matrix& X, const Response& resp, double lambda,
                                  const SelectionOptions& opts = {}) {
    const Vector g = dss_coefficients(model, X, lambda);
    IndexSet selected;
    for (Index j = 0; j < g.size(); ++j)
        if (g[j] != 0.0) selected.push_back(static_cast<std::size_t>(j));
    if (selected.empty()) throw NumericError("DSS penalty " + std::to_string(lambda) + " selects no covariates");
    auto out = refit_selected(model, X, resp, selected, opts.refit, opts);
    out.method = "dss";
    out.tuning = lambda;
    return out;
}

/// DSS with the penalty bisected (in log scale) to hit a target count.
inline SelectionResult select_dss_count(const FittedModel& model, const Matrix& X, const Response& resp, std::size_t target,
                                        const SelectionOptions& opts = {}) {
    std::size_t available = 0;
    for (Index j = 0; j < model.beta.size(); ++j) available += model.beta[j] != 0.0;
    if (target < 1 || target > available) throw InputError("target count must lie in [1, " + std::to_string(available) + "]");
    auto count = [](const Vector& g) {
        std::size_t c = 0;
        for (Index j = 0; j < g.size(); ++j) c += g[j] != 0.0;
        return c;
    };
    // Descend from lambda_max by decades, warm-starting from the sparser
    // solution, then bisect inside the bracketing decade. Only the zero pattern
    // matters here, so a non-converged iterate is accepted.
    auto solve = [&](double lambda, const Vector& warm) {
        try {
            return dss_coefficients(model, X, lambda, 20000, 1e-10, &warm);
        } catch (const ConvergenceError& e) {
            return Vector(e.last_iterate());
        }
    };
    double hi = dss_lambda_max(model, X), lo = hi;
    Vector warm = Vector::Zero(model.beta.size());
    Vector best = model.beta;
    double best_lambda = 0.0;
    bool bracketed = false;
    for (int k = 1; k <= 12; ++k) {
        lo = hi * std::pow(10.0, -k);
        const Vector g = solve(lo, warm);
        const std::size_t c = count(g);
        if (c >= target) {
            best = g;
            best_lambda = lo;
            bracketed = c > target;
            hi = lo * 10.0;
            break;
        }
        warm = g;
    }
    if (bracketed) {
        for (int it = 0; it < opts.max_bisections; ++it) {
            const double mid = std::sqrt(lo * hi);
            const Vector g = solve(mid, warm);
            const std::size_t c = count(g);
            if (c >= target) {
                best = g;
                best_lambda = mid;
                lo = mid;
                if (c == target) break;
            } else {
                hi = mid;
                warm = g;
            }
        }
    }
    IndexSet order;
    for (Index j = 0; j < best.size(); ++j)
        if (best[j] != 0.0) order.push_back(static_cast<std::size_t>(j));
    const bool adjusted = order.size() != target;
    if (adjusted) {
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return std::abs(best[static_cast<Index>(a)]) > std::abs(best[static_cast<Index>(b)]); });
        if (order.size() > target) order.resize(target);
    }
    std::sort(order.begin(), order.end());
    auto out = refit_selected(model, X, resp, order, opts.refit, opts);
    out.method = "dss";
    out.tuning = best_lambda;
    out.count_adjusted = adjusted;
    return out;
}

/// Marginal posterior standard deviations of the penalised coefficients from
/// the SVD of Xt = (I - H_U) W^{1/2} X Delta^{-1/2}, Delta the prior precision:
/// sd_j = Delta_jj^{-1/2} sqrt(1 - [V D^2 (D^2 + I)^{-1} V']_jj).
/// Excluded covariates get sd 0.
inline Vector credible_sds(const FittedModel& model, const Matrix& X, const Response& resp, const SelectionOptions& opts = {}) {
    detail::check_inputs(model, X, opts);
    const Response r = detail::selection_response(model, resp);
    const IndexSet cand = detail::candidates(model);
    const Prediction pred = predict(model, X, opts.unpenalized);
    RidgeFit at_mode;
    at_mode.linear_predictor = pred.linear_predictor;
    const Vector sw = information_weights(r, at_mode).cwiseSqrt();

    Vector prior_sd(static_cast<Index>(cand.size()));
    for (std::size_t j = 0; j < cand.size(); ++j)
        prior_sd[static_cast<Index>(j)] = std::sqrt(model.tau_global * model.tau_local[static_cast<Index>(cand[j])]);
    Matrix Xt = sw.asDiagonal() * detail::select_columns(X, cand) * prior_sd.asDiagonal();
    const Index u = (opts.unpenalized.size() ? opts.unpenalized.cols() : 0) + (model.has_intercept ? 1 : 0);
    if (u > 0) {
        Matrix U(X.rows(), u);
        if (opts.unpenalized.size()) U.leftCols(opts.unpenalized.cols()) = opts.unpenalized;
        if (model.has_intercept) U.col(u - 1).setOnes();
        U = sw.asDiagonal() * U;
        Eigen::HouseholderQR<Matrix> qr(U);
        const Matrix Q = Matrix(qr.householderQ()).leftCols(u);
        Xt -= Q * (Q.transpose() * Xt);
    }
    Eigen::BDCSVD<Matrix> svd(Xt, Eigen::ComputeThinV);
    const Vector d2 = svd.singularValues().cwiseAbs2();
    const Vector shrink = d2.cwiseQuotient((d2.array() + 1.0).matrix());
    const Matrix& V = svd.matrixV();
    Vector sd = Vector::Zero(static_cast<Index>(model.p()));
    for (std::size_t j = 0; j < cand.size(); ++j) {
        const auto jj = static_cast<Index>(j);
        const double reduction = (V.row(jj).cwiseAbs2().transpose().cwiseProduct(shrink)).sum();
        sd[static_cast<Index>(cand[j])] = prior_sd[jj] * std::sqrt(std::max(1.0 - reduction, 0.0));
    }
    return sd;
}

/// Thresholding |beta_j| > s_j t with s_j = sd_j / min sd; t is chosen implicitly
/// so that `target` covariates pass.
inline SelectionResult select_credible(const FittedModel& model, const Matrix& X, const Response& resp, std::size_t target,
                                       const SelectionOptions& opts = {}) {
    const Vector sd = credible_sds(model, X, resp, opts);
    const IndexSet cand = detail::candidates(model);
    if (target < 1 || target > cand.size()) throw InputError("target count must lie in [1, " + std::to_string(cand.size()) + "]");
    double min_sd = std::numeric_limits<double>::infinity();
    for (auto k : cand) min_sd = std::min(min_sd, sd[static_cast<Index>(k)]);
    if (!(min_sd > 0.0)) throw NumericError("a posterior standard deviation is zero");
    std::vector<std::pair<double, std::size_t>> scores;
    for (auto k : cand) scores.push_back({std::abs(model.beta[static_cast<Index>(k)]) / (sd[static_cast<Index>(k)] / min_sd), k});
    std::stable_sort(scores.begin(), scores.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    IndexSet selected;
    for (std::size_t i = 0; i < target; ++i) selected.push_back(scores[i].second);
    auto out = refit_selected(model, X, resp, selected, opts.refit, opts);
    out.method = "credible";
    out.tuning = scores[target - 1].first;
    return out;
}

} // namespace ecpc
