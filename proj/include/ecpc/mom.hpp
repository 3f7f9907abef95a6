#pragma once

#include "ecpc/codata.hpp"
#include "ecpc/core.hpp"
#include "ecpc/ridge_solver.hpp"

#include <optional>

namespace ecpc {

struct MomentCoreOptions {
    /// Above this many covariates C is never stored; its rows are streamed from
    /// the p x n factor F.
    std::size_t dense_threshold = 5000;
    SolvePath path = SolvePath::automatic;
};

/// Mean/variance summary of the initial ridge estimate
///   beta~ = M^{-1} X' W z,  M = X' W X + Omega,
/// with C = M^{-1} X' W X and v = diag(M^{-1} X' W X M^{-1}). Here W are the
/// curvature weights of the log-likelihood at beta~.
///
/// Covariates with zero precision are unpenalised; their columns of C are unit
/// vectors, so they decouple from the moment systems, which are expressed over
/// the penalised covariates only (in their original order).
class MomentCore {
public:
    MomentCore(const Matrix& X, const Vector& weights, const Vector& omega, Vector beta_tilde, const MomentCoreOptions& opts = {})
        : beta_(std::move(beta_tilde)) {
        if (weights.size() != X.rows()) throw InputError("weight vector length does not match the number of samples");
        if (omega.size() != X.cols() || beta_.size() != X.cols()) throw InputError("precision or estimate length does not match the design");
        for (Index i = 0; i < weights.size(); ++i)
            if (!(weights[i] >= 0.0) || !std::isfinite(weights[i])) throw InputError("weights must be finite and non-negative");
        for (Index k = 0; k < omega.size(); ++k) (omega[k] > 0.0 ? pen_ : unpen_).push_back(static_cast<std::size_t>(k));
        if (pen_.empty()) throw InputError("moment systems need at least one penalised covariate");

        const Matrix Xt = weights.cwiseSqrt().asDiagonal() * X;
        const WeightedRidgeSolver solver(Xt, omega, opts.path);
        const Matrix F = solver.hat_operator();
        v_ = F.rowwise().squaredNorm();
        dense_ = static_cast<std::size_t>(X.cols()) <= opts.dense_threshold;
        if (dense_) {
            C_ = F * Xt;
            for (auto l : unpen_) {
                C_.col(static_cast<Index>(l)).setZero();
                C_(static_cast<Index>(l), static_cast<Index>(l)) = 1.0;
            }
        } else {
            FP_ = detail::select_rows(F, pen_);
            XP_ = detail::select_columns(Xt, pen_);
        }
    }

    [[nodiscard]] Index p() const noexcept { return beta_.size(); }
    [[nodiscard]] bool is_dense() const noexcept { return dense_; }
    [[nodiscard]] const IndexSet& penalized() const noexcept { return pen_; }
    [[nodiscard]] const Vector& v() const noexcept { return v_; }
    [[nodiscard]] const Vector& beta_tilde() const noexcept { return beta_; }

    [[nodiscard]] const Matrix& C() const {
        if (!dense_) throw Error("C is not materialised above the dense threshold");
        return C_;
    }

    [[nodiscard]] Vector v_penalized() const { return detail::select(v_, pen_); }
    [[nodiscard]] Vector beta_penalized() const { return detail::select(beta_, pen_); }

    /// Row k (penalised position) of the penalised block C_PP.
    [[nodiscard]] Vector penalized_row(std::size_t k) const {
        if (dense_) {
            Vector row(static_cast<Index>(pen_.size()));
            for (std::size_t j = 0; j < pen_.size(); ++j)
                row[static_cast<Index>(j)] = C_(static_cast<Index>(pen_[k]), static_cast<Index>(pen_[j]));
            return row;
        }
        return (FP_.row(static_cast<Index>(k)) * XP_).transpose();
    }

    /// R = (C_PP .^ 2) Z, a p_P x G matrix.
    [[nodiscard]] Matrix squared_times(const Matrix& Z) const { return apply(Z, true); }

    /// C_PP Z.
    [[nodiscard]] Matrix times(const Matrix& Z) const { return apply(Z, false); }

private:
    Matrix apply(const Matrix& Z, bool squared) const {
        const auto pp = static_cast<Index>(pen_.size());
        if (Z.rows() != pp) throw InputError("co-data matrix rows do not match the penalised covariates");
        if (dense_) {
            Matrix CPP(pp, pp);
            for (Index a = 0; a < pp; ++a)
                for (Index b = 0; b < pp; ++b) CPP(a, b) = C_(static_cast<Index>(pen_[static_cast<std::size_t>(a)]), static_cast<Index>(pen_[static_cast<std::size_t>(b)]));
            return squared ? Matrix(CPP.cwiseAbs2() * Z) : Matrix(CPP * Z);
        }
        Matrix out(pp, Z.cols());
        parallel_for(static_cast<std::size_t>(pp), [&](std::size_t k) {
            Vector row = penalized_row(k);
            if (squared) row = row.cwiseAbs2();
            out.row(static_cast<Index>(k)) = row.transpose() * Z;
        });
        return out;
    }

    Vector beta_;
    Vector v_;
    IndexSet pen_, unpen_;
    bool dense_ = true;
    Matrix C_;
    Matrix FP_, XP_;
};

inline MomentCore compute_moment_core(const Matrix& X, const Vector& weights, const Vector& omega, const Vector& beta_tilde,
                                      const MomentCoreOptions& opts = {}) {
    return MomentCore(X, weights, omega, beta_tilde, opts);
}

/// Group-level linear system A x = b. Row r is the equation of group rows[r];
/// columns are the unknowns (one per group, or one per grouping).
struct MomentSystem {
    Matrix A;
    Vector b;
    IndexSet rows;
};

/// Optional non-zero prior mean: mu_tilde is the per-covariate target used by
/// the initial fit, mu the per-group means.
struct PriorMean {
    Vector mu_tilde;
    Vector mu;
};

namespace detail {

inline void check_grouping(const MomentCore& core, const Grouping& grouping) {
    if (grouping.p() != core.penalized().size())
        throw InputError("grouping '" + grouping.name() + "' covers " + std::to_string(grouping.p()) + " covariates but there are " +
                         std::to_string(core.penalized().size()) + " penalised covariates");
}

/// Averages the rows of M over each listed member set; empty sets are skipped.
inline std::pair<Matrix, IndexSet> average_rows(const Matrix& M, const std::vector<IndexSet>& sets) {
    IndexSet kept;
    for (std::size_t g = 0; g < sets.size(); ++g)
        if (!sets[g].empty()) kept.push_back(g);
    Matrix out(static_cast<Index>(kept.size()), M.cols());
    for (std::size_t r = 0; r < kept.size(); ++r) {
        const auto& members = sets[kept[r]];
        auto row = out.row(static_cast<Index>(r));
        row.setZero();
        for (auto k : members) row += M.row(static_cast<Index>(k));
        row /= static_cast<double>(members.size());
    }
    return {out, kept};
}

inline Vector variance_target(const MomentCore& core, const Matrix& Z, const std::optional<PriorMean>& prior) {
    const Vector bt = core.beta_penalized();
    Vector t = bt.cwiseAbs2() - core.v_penalized();
    if (prior) {
        if (prior->mu_tilde.size() != bt.size() || prior->mu.size() != Z.cols()) throw InputError("prior mean dimensions do not match");
        const Vector mean = prior->mu_tilde - core.times(Matrix(prior->mu_tilde)).col(0) + core.times(Z * prior->mu).col(0);
        t -= mean.cwiseAbs2();
    }
    return t;
}

} // namespace detail

/// A_{g,h} = mean_{k in G_g} sum_l C_kl^2 Z_lh and b_g = mean_{k in G_g}(beta~_k^2 - v_k),
/// with the prior-mean term subtracted from b when supplied. Unknowns are the
/// group prior variances; multiply A by the global variance to solve for weights.
inline MomentSystem build_variance_system(const MomentCore& core, const CoDataMatrix& Z, const Grouping& grouping,
                                          const std::optional<PriorMean>& prior = std::nullopt) {
    detail::check_grouping(core, grouping);
    const Matrix Zd = Z.dense();
    const Matrix R = core.squared_times(Zd);
    auto [A, rows] = detail::average_rows(R, grouping.groups());
    auto [b, rows_b] = detail::average_rows(Matrix(detail::variance_target(core, Zd, prior)), grouping.groups());
    return {std::move(A), b.col(0), std::move(rows)};
}

/// Variance system from a precomputed R = (C_PP .^ 2) Z and target beta~^2 - v.
inline MomentSystem variance_system_from(const Matrix& R, const Vector& target, const std::vector<IndexSet>& sets) {
    auto [A, rows] = detail::average_rows(R, sets);
    auto [b, rows_b] = detail::average_rows(Matrix(target), sets);
    return {std::move(A), b.col(0), std::move(rows)};
}

/// A_mu = P C Z and b_mu = P[beta~ - (I - C) mu_tilde].
inline MomentSystem build_mean_system(const MomentCore& core, const CoDataMatrix& Z, const Grouping& grouping,
                                      const std::optional<Vector>& mu_tilde = std::nullopt) {
    detail::check_grouping(core, grouping);
    const Matrix CZ = core.times(Z.dense());
    Vector target = core.beta_penalized();
    if (mu_tilde) {
        if (mu_tilde->size() != target.size()) throw InputError("prior mean target length does not match");
        target -= *mu_tilde - core.times(Matrix(*mu_tilde)).col(0);
    }
    auto [A, rows] = detail::average_rows(CZ, grouping.groups());
    auto [b, rows_b] = detail::average_rows(Matrix(target), grouping.groups());
    return {std::move(A), b.col(0), std::move(rows)};
}

/// Variance systems whose group averages run over the in-part (resp. out-part)
/// of each group. Groups with an empty part lose their equation in that system.
inline std::pair<MomentSystem, MomentSystem> split_systems_from(const Matrix& R, const Vector& target, const GroupSplit& split) {
    auto in = variance_system_from(R, target, split.in_groups);
    auto out = variance_system_from(R, target, split.out_groups);
    return {std::move(in), std::move(out)};
}

inline std::pair<MomentSystem, MomentSystem> build_split_systems(const MomentCore& core, const CoDataMatrix& Z, const Grouping& grouping,
                                                                 const GroupSplit& split) {
    detail::check_grouping(core, grouping);
    if (split.in_groups.size() != grouping.size() || split.out_groups.size() != grouping.size())
        throw InputError("split does not match the grouping");
    for (std::size_t g = 0; g < grouping.size(); ++g)
        if (split.in_groups[g].empty() || split.out_groups[g].empty())
            log::warn("group '" + grouping.group_name(g) + "' has an empty split part; its equation is dropped there");
    const Matrix Zd = Z.dense();
    return split_systems_from(core.squared_times(Zd), detail::variance_target(core, Zd, std::nullopt), split);
}

/// Pooled system for the grouping weights: one row per group of every grouping,
/// column d equal to tau_global * A_w[:, block d] * gamma_d, b the pooled targets.
inline MomentSystem build_grouping_weight_system(const MomentCore& core, const std::vector<CoDataMatrix>& Zs,
                                                 const std::vector<Grouping>& groupings, const std::vector<Vector>& gammas,
                                                 double tau_global) {
    const std::size_t D = Zs.size();
    if (groupings.size() != D || gammas.size() != D) throw InputError("grouping, co-data and group weight counts differ");
    std::vector<IndexSet> sets;
    for (std::size_t d = 0; d < D; ++d) {
        detail::check_grouping(core, groupings[d]);
        if (static_cast<std::size_t>(gammas[d].size()) != Zs[d].groups())
            throw InputError("group weights of grouping " + std::to_string(d + 1) + " have the wrong length");
        sets.insert(sets.end(), groupings[d].groups().begin(), groupings[d].groups().end());
    }
    Matrix cols(static_cast<Index>(core.penalized().size()), static_cast<Index>(D));
    for (std::size_t d = 0; d < D; ++d)
        cols.col(static_cast<Index>(d)) = tau_global * core.squared_times(Zs[d].dense()) * gammas[d];
    return variance_system_from(cols, detail::variance_target(core, Matrix(0, 0), std::nullopt), sets);
}

} // namespace ecpc
