#pragma once

#include "ecpc/codata.hpp"
#include "ecpc/cox.hpp"
#include "ecpc/glm.hpp"
#include "ecpc/hypershrinkage.hpp"
#include "ecpc/mom.hpp"
#include "ecpc/response.hpp"

#include <Eigen/QR>

#include <optional>

namespace ecpc {

/// One co-data source: a grouping of the penalised covariates and how its group
/// weights are shrunk. A fixed `lambda` skips the split-based tuning.
struct CoDataSource {
    Grouping grouping;
    HyperKind kind = HyperKind::ridge;
    std::optional<double> lambda;
};

struct EcpcOptions {
    /// Unpenalised covariates (n x u), appended after the penalised ones.
    Matrix unpenalized;
    bool intercept = false;
    std::optional<double> tau_global;
    std::size_t n_splits = 10;
    std::uint64_t seed = 1;
    std::size_t hyper_grid_size = 25;
    double tau_local_floor = 1e-6;
    GlobalVarianceOptions global;
    MomentCoreOptions moment;
    RidgeOptions ridge;
};

struct FittedGrouping {
    std::string name;
    HyperKind kind = HyperKind::ridge;
    std::vector<std::string> group_names;
    std::vector<IndexSet> groups;
    std::optional<HierTree> tree;
    Vector gamma;
    Vector gamma_raw;
    std::vector<bool> selected;
    double lambda = 0.0;
    std::optional<double> refit_lambda;
    double w = 1.0;

    [[nodiscard]] Grouping grouping(std::size_t p) const { return Grouping(p, groups, name, group_names, tree); }

    /// Co-data matrix with averaging restricted to selected groups for the sparse kinds.
    [[nodiscard]] CoDataMatrix codata(std::size_t p) const {
        const Grouping g = grouping(p);
        return is_sparse(kind) ? build_codata_matrix(g, selected) : build_codata_matrix(g);
    }
};

struct FitDiagnostics {
    bool converged = true;
    int iterations = 0;
    double deviance = 0.0;
    bool separation = false;
    bool weights_rank_deficient = false;
};

struct FittedModel {
    Family family = Family::gaussian;
    Vector beta;
    Vector beta_unpenalized;
    bool has_intercept = false;
    double intercept = 0.0;
    double tau_global = 1.0;
    std::optional<double> sigma2;
    std::vector<FittedGrouping> groupings;
    Vector w;
    Vector tau_local;
    /// Covariates dropped by group selection (beta exactly zero).
    std::vector<bool> excluded;
    std::vector<std::string> covariate_names;
    std::optional<BaselineHazard> baseline;
    FitDiagnostics diagnostics;

    [[nodiscard]] std::size_t p() const noexcept { return static_cast<std::size_t>(beta.size()); }
};

/// tau_local = sum_d w_d Z_d gamma_d.
inline Vector combine_local_variances(const std::vector<CoDataMatrix>& Zs, const std::vector<Vector>& gammas, const Vector& w) {
    if (Zs.empty() || gammas.size() != Zs.size() || static_cast<std::size_t>(w.size()) != Zs.size())
        throw InputError("co-data, group weight and grouping weight counts differ");
    Vector tau = Vector::Zero(static_cast<Index>(Zs[0].p()));
    for (std::size_t d = 0; d < Zs.size(); ++d) {
        if (Zs[d].p() != static_cast<std::size_t>(tau.size())) throw InputError("co-data matrices cover different covariate counts");
        tau += w[static_cast<Index>(d)] * Zs[d].apply(gammas[d]);
    }
    return tau;
}

struct GroupingWeights {
    Vector w;
    bool rank_deficient = false;
};

/// Least squares on the pooled system, truncated at zero; least-norm when rank deficient.
inline GroupingWeights solve_grouping_weights(const MomentSystem& sys) {
    if (sys.A.rows() != sys.b.size()) throw InputError("moment system rows of A and b differ");
    if (sys.A.cols() > sys.A.rows()) throw InputError("more groupings than pooled group equations");
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(sys.A);
    GroupingWeights out;
    out.rank_deficient = cod.rank() < sys.A.cols();
    if (out.rank_deficient) log::warn("grouping weight system is rank deficient; groupings may be strongly correlated");
    out.w = cod.solve(sys.b).cwiseMax(0.0);
    return out;
}

namespace detail {

struct FullDesign {
    Matrix X;
    std::vector<bool> unpenalized;
    std::size_t p = 0;
    std::size_t u = 0;
    bool intercept = false;
};

inline FullDesign full_design(const Matrix& X, const Response& resp, const Matrix& unpen, bool intercept) {
    if (X.rows() != resp.n()) throw InputError("design has " + std::to_string(X.rows()) + " rows but response has " + std::to_string(resp.n()));
    if (!X.allFinite()) throw InputError("design matrix contains non-finite values");
    if (unpen.size() && unpen.rows() != X.rows()) throw InputError("unpenalised covariates have the wrong number of rows");
    FullDesign d;
    d.p = static_cast<std::size_t>(X.cols());
    d.u = static_cast<std::size_t>(unpen.size() ? unpen.cols() : 0);
    d.intercept = intercept && resp.family() != Family::cox;
    if (intercept && resp.family() == Family::cox) log::warn("cox models have no intercept; ignoring it");
    d.X.resize(X.rows(), X.cols() + static_cast<Index>(d.u) + (d.intercept ? 1 : 0));
    d.X.leftCols(X.cols()) = X;
    if (d.u) d.X.middleCols(X.cols(), static_cast<Index>(d.u)) = unpen;
    if (d.intercept) d.X.col(d.X.cols() - 1).setOnes();
    d.unpenalized.assign(static_cast<std::size_t>(d.X.cols()), false);
    for (std::size_t k = d.p; k < d.unpenalized.size(); ++k) d.unpenalized[k] = true;
    return d;
}

/// Final weighted-ridge fit with the given local variances; excluded covariates
/// are left out of the design and get beta = 0.
inline void final_fit(FittedModel& model, const FullDesign& d, const Response& resp, const std::vector<bool>& excluded, const RidgeOptions& ro) {
    IndexSet keep;
    for (std::size_t k = 0; k < d.unpenalized.size(); ++k)
        if (k >= d.p || !excluded[k]) keep.push_back(k);
    const Matrix Xk = select_columns(d.X, keep);
    Vector tl(static_cast<Index>(keep.size()));
    std::vector<bool> mask(keep.size());
    for (std::size_t j = 0; j < keep.size(); ++j) {
        mask[j] = d.unpenalized[keep[j]];
        tl[static_cast<Index>(j)] = mask[j] ? 1.0 : model.tau_local[static_cast<Index>(keep[j])];
    }
    const RidgeFit fit = fit_weighted_ridge(Xk, resp, PenaltyState(model.tau_global, tl, mask), ro);
    Vector full = Vector::Zero(d.X.cols());
    for (std::size_t j = 0; j < keep.size(); ++j) full[static_cast<Index>(keep[j])] = fit.beta[static_cast<Index>(j)];
    model.beta = full.head(static_cast<Index>(d.p));
    model.beta_unpenalized = full.segment(static_cast<Index>(d.p), static_cast<Index>(d.u));
    model.has_intercept = d.intercept;
    model.intercept = d.intercept ? full[full.size() - 1] : 0.0;
    model.diagnostics.converged = fit.converged;
    model.diagnostics.iterations = fit.iterations;
    model.diagnostics.deviance = fit.deviance;
    model.diagnostics.separation = fit.separation;
    if (resp.family() == Family::cox) model.baseline = baseline_hazard(resp.time(), resp.status(), fit.linear_predictor);
}

struct GroupingResult {
    FittedGrouping fitted;
    CoDataMatrix Z{0, 0};
};

inline GroupingResult fit_grouping(const MomentCore& core, const CoDataSource& src, double tau, const EcpcOptions& opts, std::size_t d) {
    const Grouping& grouping = src.grouping;
    check_grouping(core, grouping);
    const Vector sizes = group_size_scaling(grouping);
    const Vector target = core.beta_penalized().cwiseAbs2() - core.v_penalized();
    CoDataMatrix Z = build_codata_matrix(grouping);
    const Matrix R = tau * core.squared_times(Z.dense());
    const auto full = variance_system_from(R, target, grouping.groups());

    HyperlambdaOptions ho;
    ho.n_splits = opts.n_splits;
    ho.seed = opts.seed + 1000 * d;
    ho.grid_size = opts.hyper_grid_size;

    FittedGrouping fg;
    fg.name = grouping.name();
    fg.kind = src.kind;
    fg.group_names = grouping.group_names();
    fg.groups = grouping.groups();
    fg.tree = grouping.tree();

    if (src.kind == HyperKind::none || src.kind == HyperKind::ridge) {
        double lambda = 0.0;
        if (src.kind == HyperKind::ridge)
            lambda = src.lambda ? *src.lambda
                                : tune_hyperlambda(R, target, grouping.groups(), hyper_solver(src.kind, sizes, grouping.tree()),
                                                   default_hyper_grid(src.kind, full, sizes, grouping.tree(), ho.grid_size), ho)
                                      .lambda;
        const auto gw = solve_ridge_hyper(full, lambda, sizes);
        fg.gamma = gw.gamma;
        fg.gamma_raw = gw.gamma_raw;
        fg.selected = gw.selected;
        fg.lambda = lambda;
        return {std::move(fg), std::move(Z)};
    }

    // Sparse kinds: select groups, then refit the selected weights with co-data
    // averaging restricted to the selected groups.
    const double lambda = src.lambda ? *src.lambda
                                     : tune_hyperlambda(R, target, grouping.groups(), hyper_solver(src.kind, sizes, grouping.tree()),
                                                        default_hyper_grid(src.kind, full, sizes, grouping.tree(), ho.grid_size), ho)
                                           .lambda;
    const GroupWeights sel = is_hierarchical(src.kind) ? solve_hierarchical_lasso(full, *grouping.tree(), lambda, sizes)
                                                       : solve_lasso_hyper(full, lambda, sizes);
    fg.selected = sel.selected;
    fg.lambda = lambda;
    fg.gamma = Vector::Zero(static_cast<Index>(grouping.size()));
    fg.gamma_raw = fg.gamma;
    const IndexSet chosen = flagged(sel.selected);
    Z = build_codata_matrix(grouping, sel.selected);
    if (chosen.empty()) {
        log::warn("no group of grouping '" + grouping.name() + "' was selected");
        return {std::move(fg), std::move(Z)};
    }
    const Matrix Ract = select_columns(tau * core.squared_times(Z.dense()), chosen);
    std::vector<IndexSet> sets;
    for (auto g : chosen) sets.push_back(grouping.group(g));
    const Vector sub_sizes = select(sizes, chosen);
    const auto reduced = variance_system_from(Ract, target, sets);
    double refit = 0.0;
    if (src.kind == HyperKind::lasso_then_ridge || src.kind == HyperKind::hier_lasso_then_ridge) {
        HyperlambdaOptions ro = ho;
        ro.seed = ho.seed + 500;
        refit = tune_hyperlambda(Ract, target, sets, hyper_solver(HyperKind::ridge, sub_sizes, std::nullopt),
                                 default_hyper_grid(HyperKind::ridge, reduced, sub_sizes, std::nullopt, ho.grid_size), ro)
                    .lambda;
    }
    fg.refit_lambda = refit;
    const auto gw = solve_ridge_hyper(reduced, refit, sub_sizes);
    for (std::size_t j = 0; j < chosen.size(); ++j) {
        fg.gamma[static_cast<Index>(chosen[j])] = gw.gamma[static_cast<Index>(j)];
        fg.gamma_raw[static_cast<Index>(chosen[j])] = gw.gamma_raw[static_cast<Index>(j)];
    }
    return {std::move(fg), std::move(Z)};
}

} // namespace detail

/// Ridge fit with all local variances one and the estimated global variance.
inline FittedModel fit_ordinary_ridge(const Matrix& X, const Response& resp, const EcpcOptions& opts = {}) {
    const auto d = detail::full_design(X, resp, opts.unpenalized, opts.intercept);
    FittedModel model;
    model.family = resp.family();
    Response r = resp;
    if (opts.tau_global) {
        model.tau_global = *opts.tau_global;
        if (resp.family() == Family::gaussian && !resp.sigma2())
            r = resp.with_sigma2(*detail::gaussian_marginal_likelihood(d.X, resp, d.unpenalized).sigma2);
    } else {
        const auto gv = estimate_global_variance(d.X, resp, d.unpenalized, opts.global);
        model.tau_global = gv.tau_global;
        if (gv.sigma2) r = resp.with_sigma2(*gv.sigma2);
    }
    model.sigma2 = r.sigma2();
    model.w = Vector(0);
    model.tau_local = Vector::Ones(static_cast<Index>(d.p));
    model.excluded.assign(d.p, false);
    detail::final_fit(model, d, r, model.excluded, opts.ridge);
    return model;
}

/// Global variance, then per-grouping group weights from the moment systems
/// with tuned hypershrinkage, then grouping weights, then the final fit.
inline FittedModel fit_ecpc(const Matrix& X, const Response& resp, const std::vector<CoDataSource>& codata, const EcpcOptions& opts = {}) {
    if (codata.empty()) throw InputError("at least one co-data source is required");
    for (const auto& src : codata) {
        if (src.grouping.p() != static_cast<std::size_t>(X.cols()))
            throw InputError("grouping '" + src.grouping.name() + "' covers " + std::to_string(src.grouping.p()) + " covariates but X has " +
                             std::to_string(X.cols()));
        if (is_hierarchical(src.kind) && !src.grouping.tree())
            throw InputError("grouping '" + src.grouping.name() + "' needs a hierarchy for hierarchical hypershrinkage");
    }
    const auto d = detail::full_design(X, resp, opts.unpenalized, opts.intercept);
    FittedModel model;
    model.family = resp.family();

    // Step 1: global variance and the initial fit with all local variances one.
    Response r = resp;
    if (opts.tau_global) {
        model.tau_global = *opts.tau_global;
        if (resp.family() == Family::gaussian && !resp.sigma2())
            r = resp.with_sigma2(*detail::gaussian_marginal_likelihood(d.X, resp, d.unpenalized).sigma2);
    } else {
        const auto gv = estimate_global_variance(d.X, resp, d.unpenalized, opts.global);
        model.tau_global = gv.tau_global;
        if (gv.sigma2) r = resp.with_sigma2(*gv.sigma2);
    }
    model.sigma2 = r.sigma2();
    const PenaltyState initial = PenaltyState::ordinary(model.tau_global, d.X.cols(), d.unpenalized);
    const RidgeFit init = fit_weighted_ridge(d.X, r, initial, opts.ridge);
    const MomentCore core(d.X, information_weights(r, init), initial.precision_diag(), init.beta, opts.moment);

    // Step 2: group weights per grouping.
    const std::size_t D = codata.size();
    std::vector<std::optional<detail::GroupingResult>> results(D);
    parallel_for(D, [&](std::size_t k) { results[k] = detail::fit_grouping(core, codata[k], model.tau_global, opts, k); });

    std::vector<CoDataMatrix> Zs;
    std::vector<Grouping> groupings;
    std::vector<Vector> gammas;
    for (std::size_t k = 0; k < D; ++k) {
        Zs.push_back(results[k]->Z);
        groupings.push_back(codata[k].grouping);
        gammas.push_back(results[k]->fitted.gamma);
        model.groupings.push_back(results[k]->fitted);
    }

    // Step 3: grouping weights; a single grouping keeps weight one.
    if (D == 1) {
        model.w = Vector::Ones(1);
    } else {
        const auto gw = solve_grouping_weights(build_grouping_weight_system(core, Zs, groupings, gammas, model.tau_global));
        model.w = gw.w;
        model.diagnostics.weights_rank_deficient = gw.rank_deficient;
    }
    for (std::size_t k = 0; k < D; ++k) model.groupings[k].w = model.w[static_cast<Index>(k)];

    model.tau_local = combine_local_variances(Zs, gammas, model.w);
    model.excluded.assign(d.p, false);
    std::size_t floored = 0, kept = 0;
    for (std::size_t k = 0; k < d.p; ++k) {
        bool dropped = false, any_sparse = false;
        for (std::size_t s = 0; s < D; ++s) {
            if (!(model.w[static_cast<Index>(s)] > 0.0)) continue;
            if (!is_sparse(codata[s].kind) || Zs[s].membership_count(k) > 0) {
                dropped = false;
                any_sparse = false;
                break;
            }
            any_sparse = dropped = true;
        }
        model.excluded[k] = dropped && any_sparse;
        auto& t = model.tau_local[static_cast<Index>(k)];
        if (model.excluded[k]) {
            t = 0.0;
            continue;
        }
        if (t > 0.0) ++kept;
        if (t < opts.tau_local_floor) {
            t = opts.tau_local_floor;
            ++floored;
        }
    }
    if (kept == 0) throw NumericError("all local prior variances are zero; co-data gives no usable penalties");
    if (floored) log::warn(std::to_string(floored) + " local prior variance(s) floored at " + std::to_string(opts.tau_local_floor));

    detail::final_fit(model, d, r, model.excluded, opts.ridge);
    return model;
}

struct Prediction {
    Vector linear_predictor;
    /// Response scale: mean for gaussian, probability for binomial, relative risk exp(lp) for cox.
    Vector response;
};

inline Prediction predict(const FittedModel& model, const Matrix& X, const Matrix& unpenalized = Matrix()) {
    if (static_cast<std::size_t>(X.cols()) != model.p())
        throw InputError("new data has " + std::to_string(X.cols()) + " columns but the model has " + std::to_string(model.p()));
    Prediction out;
    out.linear_predictor = X * model.beta;
    if (model.beta_unpenalized.size()) {
        if (unpenalized.cols() != model.beta_unpenalized.size() || unpenalized.rows() != X.rows())
            throw InputError("new data lacks the model's unpenalised covariates");
        out.linear_predictor += unpenalized * model.beta_unpenalized;
    }
    out.linear_predictor.array() += model.intercept;
    out.response.resize(out.linear_predictor.size());
    for (Index i = 0; i < out.linear_predictor.size(); ++i) {
        const double lp = out.linear_predictor[i];
        switch (model.family) {
        case Family::gaussian: out.response[i] = lp; break;
        case Family::binomial: out.response[i] = detail::sigmoid(lp); break;
        case Family::cox: out.response[i] = detail::safe_exp(lp); break;
        }
    }
    return out;
}

/// Survival probability exp(-H0(t) exp(lp)) from the stored baseline hazard.
inline double survival_probability(const FittedModel& model, double lp, double t) {
    if (!model.baseline) throw InputError("model has no baseline hazard");
    return std::exp(-model.baseline->at(t) * detail::safe_exp(lp));
}

/// Recomputes tau_local from the stored groupings and weights.
inline Vector reconstruct_tau_local(const FittedModel& model) {
    std::vector<CoDataMatrix> Zs;
    std::vector<Vector> gammas;
    for (const auto& g : model.groupings) {
        Zs.push_back(g.codata(model.p()));
        gammas.push_back(g.gamma);
    }
    return combine_local_variances(Zs, gammas, model.w);
}

} // namespace ecpc
