#pragma once

#include "ecpc/codata.hpp"
#include "ecpc/core.hpp"
#include "ecpc/mom.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <cmath>
#include <functional>
#include <limits>
#include <string_view>

namespace ecpc {

enum class HyperKind { none, ridge, lasso, hierarchical_lasso, hier_lasso_then_ridge, lasso_then_ridge };

inline std::string_view to_string(HyperKind k) {
    switch (k) {
    case HyperKind::none: return "none";
    case HyperKind::ridge: return "ridge";
    case HyperKind::lasso: return "lasso";
    case HyperKind::hierarchical_lasso: return "hierLasso";
    case HyperKind::hier_lasso_then_ridge: return "hierLasso,ridge";
    case HyperKind::lasso_then_ridge: return "lasso,ridge";
    }
    return "unknown";
}

inline HyperKind hyper_kind_from_string(std::string_view s) {
    if (s == "none") return HyperKind::none;
    if (s == "ridge") return HyperKind::ridge;
    if (s == "lasso") return HyperKind::lasso;
    if (s == "hierLasso" || s == "hierarchical_lasso") return HyperKind::hierarchical_lasso;
    if (s == "hierLasso,ridge" || s == "hierLasso+ridge" || s == "hier_lasso_then_ridge") return HyperKind::hier_lasso_then_ridge;
    if (s == "lasso,ridge" || s == "lasso+ridge" || s == "lasso_then_ridge") return HyperKind::lasso_then_ridge;
    throw InputError("unknown hypershrinkage kind '" + std::string(s) + "'");
}

[[nodiscard]] inline bool is_sparse(HyperKind k) noexcept {
    return k == HyperKind::lasso || k == HyperKind::lasso_then_ridge || k == HyperKind::hierarchical_lasso ||
           k == HyperKind::hier_lasso_then_ridge;
}

[[nodiscard]] inline bool is_hierarchical(HyperKind k) noexcept {
    return k == HyperKind::hierarchical_lasso || k == HyperKind::hier_lasso_then_ridge;
}

struct GroupWeights {
    /// Final weights, truncated at zero.
    Vector gamma;
    /// Ridge (or least-squares) solution before truncation.
    Vector gamma_raw;
    /// Sparse-stage solution for the lasso kinds (empty otherwise).
    Vector sparse_raw;
    std::vector<bool> selected;
    double lambda_used = 0.0;
    bool rank_deficient = false;
};

/// W_gamma = diag(group sizes).
inline Vector group_size_scaling(const Grouping& grouping) { return grouping.group_sizes(); }

namespace detail {

inline void check_system(const MomentSystem& sys, const Vector& sizes) {
    if (sys.A.rows() != sys.b.size()) throw InputError("moment system rows of A and b differ");
    if (sys.A.cols() != sizes.size()) throw InputError("size scaling does not match the number of unknowns");
    for (Index g = 0; g < sizes.size(); ++g)
        if (!(sizes[g] > 0.0)) throw InputError("size scaling entries must be positive");
    if (!sys.A.allFinite() || !sys.b.allFinite()) throw NumericError("moment system has non-finite entries");
}

/// argmin ||A W^{-1/2} g' - b||^2 + lambda ||g' - W^{1/2} 1||^2, returned as W^{-1/2} g'.
inline Vector ridge_raw(const Matrix& A, const Vector& b, const Vector& sizes, double lambda, bool* rank_deficient = nullptr) {
    const Vector root = sizes.cwiseSqrt();
    const Matrix B = A * root.cwiseInverse().asDiagonal();
    Vector gp;
    if (lambda > 0.0) {
        Matrix N = B.transpose() * B;
        N.diagonal().array() += lambda;
        gp = N.llt().solve(B.transpose() * b + lambda * root);
    } else {
        Eigen::CompleteOrthogonalDecomposition<Matrix> cod(B);
        if (rank_deficient) *rank_deficient = cod.rank() < B.cols();
        gp = cod.solve(b);
    }
    return gp.cwiseQuotient(root);
}

/// Coordinate descent for ||B x - b||^2 + lambda ||x||_1.
inline Vector lasso_cd(const Matrix& B, const Vector& b, double lambda, int max_sweeps = 100000, double tol = 1e-13) {
    const Index m = B.cols();
    Vector x = Vector::Zero(m);
    Vector r = b;
    const Vector norms = B.colwise().squaredNorm();
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double change = 0.0;
        for (Index j = 0; j < m; ++j) {
            if (norms[j] == 0.0) continue;
            const double rho = 2.0 * B.col(j).dot(r) + 2.0 * norms[j] * x[j];
            const double xj = soft_threshold(rho, lambda) / (2.0 * norms[j]);
            const double d = xj - x[j];
            if (d != 0.0) {
                r -= d * B.col(j);
                x[j] = xj;
                change = std::max(change, std::abs(d) * std::sqrt(norms[j]));
            }
        }
        if (change <= tol * (1.0 + b.norm())) return x;
    }
    throw ConvergenceError("lasso hypershrinkage did not converge", x);
}

inline std::vector<bool> nonzero(const Vector& x) {
    std::vector<bool> out(static_cast<std::size_t>(x.size()));
    for (Index i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(i)] = x[i] != 0.0;
    return out;
}

inline IndexSet flagged(const std::vector<bool>& mask) {
    IndexSet out;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) out.push_back(i);
    return out;
}

/// Ridge refit on the selected unknowns; unselected weights are zero.
inline GroupWeights refit_selected(const MomentSystem& sys, const Vector& sizes, const std::vector<bool>& selected, double refit_lambda) {
    GroupWeights out;
    out.selected = selected;
    out.gamma_raw = Vector::Zero(sys.A.cols());
    const IndexSet cols = flagged(selected);
    if (!cols.empty()) {
        const Vector sub = ridge_raw(select_columns(sys.A, cols), sys.b, select(sizes, cols), refit_lambda, &out.rank_deficient);
        for (std::size_t j = 0; j < cols.size(); ++j) out.gamma_raw[static_cast<Index>(cols[j])] = sub[static_cast<Index>(j)];
    }
    out.gamma = out.gamma_raw.cwiseMax(0.0);
    return out;
}

/// Latent overlapping group-lasso layout for a tree: root and detached nodes are
/// free variables; every other node g owns a latent copy of the path from the
/// root's children down to g.
struct LatentLayout {
    IndexSet free;
    std::vector<std::size_t> owner;  // node per latent block
    std::vector<IndexSet> paths;     // covered nodes per latent block
    Matrix E;                        // nodes x latent variables
};

inline LatentLayout latent_layout(const HierTree& tree) {
    LatentLayout lay;
    const std::size_t G = tree.size();
    for (std::size_t g = 0; g < G; ++g) {
        if (g == tree.root || tree.is_detached(g)) {
            lay.free.push_back(g);
            continue;
        }
        IndexSet path = tree.path_from_root(g);
        path.erase(path.begin());
        lay.owner.push_back(g);
        lay.paths.push_back(std::move(path));
    }
    Index cols = static_cast<Index>(lay.free.size());
    for (const auto& path : lay.paths) cols += static_cast<Index>(path.size());
    lay.E = Matrix::Zero(static_cast<Index>(G), cols);
    Index c = 0;
    for (auto g : lay.free) lay.E(static_cast<Index>(g), c++) = 1.0;
    for (const auto& path : lay.paths)
        for (auto g : path) lay.E(static_cast<Index>(g), c++) = 1.0;
    return lay;
}

} // namespace detail

/// Ridge hypershrinkage towards the target weight 1 on the size-scaled system.
inline GroupWeights solve_ridge_hyper(const MomentSystem& sys, double lambda, const Vector& sizes) {
    detail::check_system(sys, sizes);
    if (!(lambda >= 0.0)) throw InputError("hyperpenalty must be non-negative");
    GroupWeights out;
    out.lambda_used = lambda;
    out.gamma_raw = detail::ridge_raw(sys.A, sys.b, sizes, lambda, &out.rank_deficient);
    out.gamma = out.gamma_raw.cwiseMax(0.0);
    out.selected.assign(static_cast<std::size_t>(sizes.size()), true);
    return out;
}

/// Smallest lasso hyperpenalty that deselects every group: ||2 (A W^{-1/2})' b||_inf.
inline double lasso_lambda_max(const MomentSystem& sys, const Vector& sizes) {
    const Matrix B = sys.A * sizes.cwiseSqrt().cwiseInverse().asDiagonal();
    return (2.0 * B.transpose() * sys.b).cwiseAbs().maxCoeff();
}

/// Lasso selection on the size-scaled system followed by a ridge refit of the
/// surviving groups at `refit_lambda`.
inline GroupWeights solve_lasso_hyper(const MomentSystem& sys, double lambda, const Vector& sizes, double refit_lambda = 0.0) {
    detail::check_system(sys, sizes);
    if (!(lambda >= 0.0)) throw InputError("hyperpenalty must be non-negative");
    const Vector root = sizes.cwiseSqrt();
    const Matrix B = sys.A * root.cwiseInverse().asDiagonal();
    const Vector sparse = detail::lasso_cd(B, sys.b, lambda).cwiseQuotient(root);
    auto out = detail::refit_selected(sys, sizes, detail::nonzero(sparse), refit_lambda);
    out.sparse_raw = sparse;
    out.lambda_used = lambda;
    return out;
}

/// Objective ||A gamma - b||^2 + lambda sum_g ||latent_g|| of the latent
/// overlapping group lasso, gamma = E z.
inline double hierarchical_objective(const MomentSystem& sys, const detail::LatentLayout& lay, const Vector& z, double lambda) {
    double pen = 0.0;
    Index c = static_cast<Index>(lay.free.size());
    for (const auto& path : lay.paths) {
        pen += z.segment(c, static_cast<Index>(path.size())).norm();
        c += static_cast<Index>(path.size());
    }
    return (sys.A * (lay.E * z) - sys.b).squaredNorm() + lambda * pen;
}

/// Hyperpenalty above which only the root (and detached groups) remain.
inline double hierarchical_lambda_max(const MomentSystem& sys, const HierTree& tree) {
    const auto lay = detail::latent_layout(tree);
    const Matrix AF = detail::select_columns(sys.A, lay.free);
    const Vector u = Eigen::CompleteOrthogonalDecomposition<Matrix>(AF).solve(sys.b);
    const Vector grad = 2.0 * sys.A.transpose() * (AF * u - sys.b);
    double lmax = 0.0;
    for (const auto& path : lay.paths) lmax = std::max(lmax, detail::select(grad, path).norm());
    return lmax;
}

struct HierarchicalSolution {
    Vector latent;
    Vector gamma;
    double objective = 0.0;
};

namespace detail {

struct LatentBlock {
    Index start, len;
    bool free;
};

inline std::vector<LatentBlock> latent_blocks(const LatentLayout& lay) {
    std::vector<LatentBlock> blocks;
    if (!lay.free.empty()) blocks.push_back({0, static_cast<Index>(lay.free.size()), true});
    Index c = static_cast<Index>(lay.free.size());
    for (const auto& path : lay.paths) {
        blocks.push_back({c, static_cast<Index>(path.size()), false});
        c += static_cast<Index>(path.size());
    }
    return blocks;
}

/// Exact block coordinate descent sweeps on ||AE z - b||^2 + lambda sum ||z_g||.
/// Monotone in the objective and produces exact zero blocks.
inline void latent_bcd(const Matrix& AE, const Vector& b, const std::vector<LatentBlock>& blocks, double lambda, Vector& z, int sweeps,
                       double tol) {
    std::vector<Matrix> V;
    std::vector<Vector> e;
    for (const auto& blk : blocks) {
        Eigen::SelfAdjointEigenSolver<Matrix> eig(2.0 * AE.middleCols(blk.start, blk.len).transpose() * AE.middleCols(blk.start, blk.len));
        V.push_back(eig.eigenvectors());
        e.push_back(eig.eigenvalues().cwiseMax(0.0));
    }
    Vector r = AE * z - b;
    const double scale = 1.0 + b.norm();
    for (int sweep = 0; sweep < sweeps; ++sweep) {
        double change = 0.0;
        for (std::size_t k = 0; k < blocks.size(); ++k) {
            const auto& blk = blocks[k];
            const auto cols = AE.middleCols(blk.start, blk.len);
            const Vector old = z.segment(blk.start, blk.len);
            const Vector c = 2.0 * cols.transpose() * (r - cols * old);
            const Vector w = V[k].transpose() * c;
            const double emax = std::max(e[k].maxCoeff(), 1e-300);
            Vector coef = Vector::Zero(blk.len);
            if (blk.free || lambda == 0.0) {
                for (Index i = 0; i < blk.len; ++i)
                    if (e[k][i] > 1e-12 * emax) coef[i] = -w[i] / e[k][i];
            } else if (c.norm() > lambda) {
                // sum_i w_i^2 / (e_i nu + lambda)^2 = 1 with nu = ||u||; the left side decreases in nu.
                auto excess = [&](double nu) { return (w.array() / (e[k].array() * nu + lambda)).square().sum() - 1.0; };
                double lo = 0.0, hi = c.norm() / emax + 1.0;
                for (int it = 0; it < 2000 && excess(hi) > 0.0; ++it) hi *= 2.0;
                for (int it = 0; it < 200 && hi - lo > 1e-15 * hi; ++it) {
                    const double mid = 0.5 * (lo + hi);
                    (excess(mid) > 0.0 ? lo : hi) = mid;
                }
                const double nu = 0.5 * (lo + hi);
                coef = -(w.array() * nu / (e[k].array() * nu + lambda)).matrix();
            }
            const Vector u = V[k] * coef;
            const Vector moved = cols * (u - old);
            r += moved;
            z.segment(blk.start, blk.len) = u;
            change = std::max(change, moved.norm());
        }
        if (change <= tol * scale) break;
    }
}

/// Log-barrier interior point for min ||At z - bt||^2 + lambda sum t_g subject to
/// ||z_g|| <= t_g. Newton systems are solved with the Woodbury identity: the
/// barrier Hessian is block diagonal and the quadratic part has rank <= rows(At).
inline Vector latent_interior_point(const Matrix& At, const Vector& bt, const std::vector<LatentBlock>& blocks, double lambda, double gap_tol) {
    const Index m = At.cols();
    const auto nb = static_cast<Index>(blocks.size());
    const Index rows = At.rows();
    Vector z = Vector::Zero(m), t = Vector::Ones(nb);
    auto slack = [&](const Vector& zz, const Vector& tt, Index g) {
        return tt[g] * tt[g] - zz.segment(blocks[static_cast<std::size_t>(g)].start, blocks[static_cast<std::size_t>(g)].len).squaredNorm();
    };
    auto f0 = [&](const Vector& zz, const Vector& tt) { return (At * zz - bt).squaredNorm() + lambda * tt.sum(); };
    auto psi = [&](const Vector& zz, const Vector& tt, double kappa) {
        double barrier = 0.0;
        for (Index g = 0; g < nb; ++g) {
            const double s = slack(zz, tt, g);
            if (!(s > 0.0) || !(tt[g] > 0.0)) return std::numeric_limits<double>::infinity();
            barrier -= std::log(s);
        }
        return kappa * f0(zz, tt) + barrier;
    };
    double kappa = 1.0 / (1.0 + f0(z, t));
    std::vector<Eigen::LDLT<Matrix>> Hinv(static_cast<std::size_t>(nb));
    // Applies D^{-1} to the stacked (z, t) rows of M.
    auto apply_dinv = [&](const Matrix& Mz, const Matrix& Mt, Matrix& Oz, Matrix& Ot) {
        Oz.resize(Mz.rows(), Mz.cols());
        Ot.resize(Mt.rows(), Mt.cols());
        for (Index g = 0; g < nb; ++g) {
            const auto& blk = blocks[static_cast<std::size_t>(g)];
            Matrix in(blk.len + 1, Mz.cols());
            in.topRows(blk.len) = Mz.middleRows(blk.start, blk.len);
            in.row(blk.len) = Mt.row(g);
            const Matrix out = Hinv[static_cast<std::size_t>(g)].solve(in);
            Oz.middleRows(blk.start, blk.len) = out.topRows(blk.len);
            Ot.row(g) = out.row(blk.len);
        }
    };
    for (int outer = 0; outer < 200; ++outer) {
        for (int it = 0; it < 100; ++it) {
            const Vector r = At * z - bt;
            Vector gz = 2.0 * kappa * (At.transpose() * r);
            Vector gt = Vector::Constant(nb, kappa * lambda);
            for (Index g = 0; g < nb; ++g) {
                const auto& blk = blocks[static_cast<std::size_t>(g)];
                const double s = slack(z, t, g);
                const Vector zg = z.segment(blk.start, blk.len);
                gz.segment(blk.start, blk.len) += 2.0 * zg / s;
                gt[g] -= 2.0 * t[g] / s;
                Matrix H(blk.len + 1, blk.len + 1);
                H.topLeftCorner(blk.len, blk.len) = (2.0 / s) * Matrix::Identity(blk.len, blk.len) + (4.0 / (s * s)) * zg * zg.transpose();
                H.topRightCorner(blk.len, 1) = (-4.0 * t[g] / (s * s)) * zg;
                H.bottomLeftCorner(1, blk.len) = H.topRightCorner(blk.len, 1).transpose();
                H(blk.len, blk.len) = -2.0 / s + 4.0 * t[g] * t[g] / (s * s);
                Hinv[static_cast<std::size_t>(g)].compute(H);
            }
            // (D + U U') d = -grad with U = sqrt(2 kappa) [At'; 0].
            const Matrix Uz = std::sqrt(2.0 * kappa) * At.transpose();
            const Matrix Ut = Matrix::Zero(nb, rows);
            Matrix Yz, Yt, dz, dt;
            apply_dinv(Uz, Ut, Yz, Yt);
            apply_dinv(gz, gt, dz, dt);
            Matrix S = Uz.transpose() * Yz;
            S.diagonal().array() += 1.0;
            const Vector corr = S.ldlt().solve(Uz.transpose() * dz);
            const Vector step_z = -(dz.col(0) - Yz * corr);
            const Vector step_t = -(dt.col(0) - Yt * corr);
            const double dec2 = -(gz.dot(step_z) + gt.dot(step_t));
            const double cur = psi(z, t, kappa);
            // Centering only needs moderate accuracy; at large kappa rounding in psi dominates.
            if (!(dec2 > 1e-8) || dec2 <= 1e-13 * std::abs(cur)) break;
            double alpha = 1.0;
            bool moved = false;
            for (int ls = 0; ls < 80; ++ls, alpha *= 0.5) {
                const Vector zn = z + alpha * step_z, tn = t + alpha * step_t;
                if (psi(zn, tn, kappa) <= cur - 0.25 * alpha * dec2) {
                    z = zn;
                    t = tn;
                    moved = true;
                    break;
                }
            }
            if (!moved) break;
        }
        if (2.0 * static_cast<double>(nb) / kappa <= gap_tol * (1.0 + f0(z, t))) break;
        kappa *= 20.0;
    }
    return z;
}

} // namespace detail

/// Latent overlapping group lasso: interior point on the second-order cone form
/// (free latent variables profiled out), then exact block coordinate sweeps so
/// that inactive blocks are exactly zero.
inline HierarchicalSolution solve_latent_group_lasso(const MomentSystem& sys, const HierTree& tree, double lambda, double gap_tol = 1e-11,
                                                     int polish_sweeps = 200) {
    const auto lay = detail::latent_layout(tree);
    const Matrix AE = sys.A * lay.E;
    const auto blocks = detail::latent_blocks(lay);
    const auto nfree = static_cast<Index>(lay.free.size());
    const Index m = AE.cols() - nfree;
    Vector z = Vector::Zero(AE.cols());
    const Matrix AF = AE.leftCols(nfree), AP = AE.rightCols(m);
    Eigen::CompleteOrthogonalDecomposition<Matrix> codF;
    auto project = [&](const Matrix& M) -> Matrix {
        if (nfree == 0) return M;
        return M - AF * codF.solve(M);
    };
    if (nfree > 0) codF.compute(AF);
    if (m > 0) {
        const Matrix At = project(AP);
        const Vector bt = project(sys.b);
        if (lambda == 0.0) {
            z.tail(m) = Eigen::CompleteOrthogonalDecomposition<Matrix>(At).solve(bt);
        } else {
            std::vector<detail::LatentBlock> pen(blocks.begin() + (nfree > 0 ? 1 : 0), blocks.end());
            for (auto& b : pen) b.start -= nfree;
            z.tail(m) = detail::latent_interior_point(At, bt, pen, lambda, gap_tol);
        }
    }
    if (nfree > 0) z.head(nfree) = codF.solve(sys.b - AP * z.tail(m));
    if (lambda > 0.0) detail::latent_bcd(AE, sys.b, blocks, lambda, z, polish_sweeps, 1e-15);
    return {z, lay.E * z, hierarchical_objective(sys, lay, z, lambda)};
}

/// Latent overlapping group lasso over root-to-node paths; the selected set is
/// the union of paths with non-zero latent blocks plus the root and detached
/// groups, hence ancestor-closed. Selected weights are refit by ridge.
inline GroupWeights solve_hierarchical_lasso(const MomentSystem& sys, const HierTree& tree, double lambda, const Vector& sizes,
                                             double refit_lambda = 0.0) {
    detail::check_system(sys, sizes);
    if (tree.size() != static_cast<std::size_t>(sys.A.cols())) throw InputError("hierarchy does not match the number of groups");
    if (!(lambda >= 0.0)) throw InputError("hyperpenalty must be non-negative");
    const auto lay = detail::latent_layout(tree);
    const auto sol = solve_latent_group_lasso(sys, tree, lambda);
    std::vector<bool> selected(tree.size(), false);
    for (auto g : lay.free) selected[g] = true;
    Index c = static_cast<Index>(lay.free.size());
    for (const auto& path : lay.paths) {
        if (sol.latent.segment(c, static_cast<Index>(path.size())).norm() > 0.0)
            for (auto g : path) selected[g] = true;
        c += static_cast<Index>(path.size());
    }
    auto out = detail::refit_selected(sys, sizes, selected, refit_lambda);
    out.sparse_raw = sol.gamma;
    out.lambda_used = lambda;
    return out;
}

struct HyperlambdaOptions {
    std::size_t n_splits = 10;
    std::uint64_t seed = 1;
    /// Candidate hyperpenalties; empty means the default grid for the kind.
    Vector grid;
    std::size_t grid_size = 25;
    bool extend_boundary = true;
    /// Sanity mode: in- and out-parts both equal the full groups.
    bool full_split = false;
};

struct HyperlambdaResult {
    double lambda = 0.0;
    Vector grid;
    Vector score;
};

/// Returns the untruncated weights used to score a candidate hyperpenalty.
using HyperSolver = std::function<Vector(const MomentSystem&, double)>;

/// Mean out-part RSS ||A_out g_in(lambda) - b_out||^2 over random group splits,
/// minimised over the grid. R and target are the per-covariate rows that are
/// averaged into equations; `sets` are the groups being split.
inline HyperlambdaResult tune_hyperlambda(const Matrix& R, const Vector& target, const std::vector<IndexSet>& sets,
                                          const HyperSolver& solve, Vector grid, const HyperlambdaOptions& opts) {
    if (grid.size() == 0) throw InputError("hyperpenalty grid is empty");
    const std::size_t S = opts.full_split ? 1 : std::max<std::size_t>(opts.n_splits, 1);
    std::vector<std::pair<MomentSystem, MomentSystem>> systems(S);
    for (std::size_t s = 0; s < S; ++s) {
        GroupSplit split;
        if (opts.full_split) {
            split.in_groups = sets;
            split.out_groups = sets;
        } else {
            split = detail::split_sets(sets, opts.seed + s);
        }
        auto in = variance_system_from(R, target, split.in_groups);
        auto out = variance_system_from(R, target, split.out_groups);
        systems[s] = {std::move(in), std::move(out)};
    }
    auto evaluate = [&](const Vector& lambdas) {
        Matrix scores(lambdas.size(), static_cast<Index>(S));
        parallel_for(S, [&](std::size_t s) {
            const auto& [in, out] = systems[s];
            for (Index l = 0; l < lambdas.size(); ++l) {
                double rss = std::numeric_limits<double>::infinity();
                try {
                    rss = (out.A * solve(in, lambdas[l]) - out.b).squaredNorm();
                } catch (const NumericError&) {
                }
                scores(l, static_cast<Index>(s)) = rss;
            }
        });
        return Vector(scores.rowwise().mean());
    };

    HyperlambdaResult res;
    res.grid = std::move(grid);
    res.score = evaluate(res.grid);
    auto argmin = [](const Vector& v) {
        Index best = -1;
        for (Index i = 0; i < v.size(); ++i)
            if (std::isfinite(v[i]) && (best < 0 || v[i] < v[best])) best = i;
        return best;
    };
    Index best = argmin(res.score);
    if (best < 0) throw NumericError("every hyperpenalty candidate gave a non-finite out-part RSS");
    const Index m = res.grid.size();
    if (opts.extend_boundary && m > 1 && (best == 0 || best == m - 1)) {
        const bool low = best == 0;
        const double edge = res.grid[best];
        const Vector extra = detail::log_spaced(low ? edge / 10.0 : edge * std::pow(10.0, 1.0 / 3.0),
                                                low ? edge * std::pow(10.0, -1.0 / 3.0) : edge * 10.0, 3);
        const Vector extra_score = evaluate(extra);
        Vector g(m + 3), sc(m + 3);
        if (low) {
            g << extra, res.grid;
            sc << extra_score, res.score;
        } else {
            g << res.grid, extra;
            sc << res.score, extra_score;
        }
        res.grid = g;
        res.score = sc;
        best = argmin(res.score);
    }
    res.lambda = res.grid[best];
    return res;
}

/// Default candidate grid: 25 log-spaced points over ten decades, expressed
/// relative to the scale of the size-scaled system so that it does not depend
/// on the units of the moment equations. Ridge: scale = mean squared column norm
/// of A W^{-1/2}; sparse kinds: the penalty at which everything is deselected.
inline Vector default_hyper_grid(HyperKind kind, const MomentSystem& full, const Vector& sizes, const std::optional<HierTree>& tree,
                                 std::size_t count = 25) {
    double scale = 0.0;
    if (kind == HyperKind::ridge) {
        scale = (full.A * sizes.cwiseSqrt().cwiseInverse().asDiagonal()).squaredNorm() / static_cast<double>(full.A.cols());
        if (!(scale > 0.0)) scale = 1.0;
        return detail::log_spaced(scale * 1e-3, scale * 1e7, count);
    }
    scale = is_hierarchical(kind) ? hierarchical_lambda_max(full, *tree) : lasso_lambda_max(full, sizes);
    if (!(scale > 0.0)) scale = 1.0;
    return detail::log_spaced(scale * 1e-6, scale, count);
}

/// Untruncated scoring solution for a kind's selection stage.
inline HyperSolver hyper_solver(HyperKind kind, const Vector& sizes, const std::optional<HierTree>& tree) {
    switch (kind) {
    case HyperKind::ridge:
        return [sizes](const MomentSystem& s, double l) { return detail::ridge_raw(s.A, s.b, sizes, l); };
    case HyperKind::lasso:
    case HyperKind::lasso_then_ridge:
        return [sizes](const MomentSystem& s, double l) {
            const Vector root = sizes.cwiseSqrt();
            return Vector(detail::lasso_cd(s.A * root.cwiseInverse().asDiagonal(), s.b, l).cwiseQuotient(root));
        };
    case HyperKind::hierarchical_lasso:
    case HyperKind::hier_lasso_then_ridge: {
        if (!tree) throw InputError("hierarchical hypershrinkage needs a grouping with a hierarchy");
        const HierTree t = *tree;
        return [t](const MomentSystem& s, double l) { return solve_latent_group_lasso(s, t, l).gamma; };
    }
    case HyperKind::none: break;
    }
    throw InputError("hypershrinkage kind 'none' has no hyperpenalty");
}

/// Hyperpenalty for one grouping by random group splits. The system is
/// expressed in group weights, i.e. with R scaled by the global variance.
inline HyperlambdaResult estimate_hyperlambda(const MomentCore& core, const CoDataMatrix& Z, const Grouping& grouping, HyperKind kind,
                                              double tau_global, const HyperlambdaOptions& opts = {}) {
    detail::check_grouping(core, grouping);
    const Vector sizes = group_size_scaling(grouping);
    const Matrix R = tau_global * core.squared_times(Z.dense());
    const Vector target = core.beta_penalized().cwiseAbs2() - core.v_penalized();
    const auto full = variance_system_from(R, target, grouping.groups());
    Vector grid = opts.grid.size() ? opts.grid : default_hyper_grid(kind, full, sizes, grouping.tree(), opts.grid_size);
    return tune_hyperlambda(R, target, grouping.groups(), hyper_solver(kind, sizes, grouping.tree()), std::move(grid), opts);
}

} // namespace ecpc
