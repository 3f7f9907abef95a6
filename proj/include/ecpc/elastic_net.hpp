#pragma once

#include "ecpc/cox.hpp"
#include "ecpc/glm.hpp"
#include "ecpc/response.hpp"

#include <cmath>

namespace ecpc {

struct ElasticNetOptions {
    int max_outer = 100;
    int max_sweeps = 10000;
    double tolerance = 1e-10;
};

/// Penalised GLM with objective
///   -loglik(X b) + 1/2 sum_k ridge_k b_k^2 + lambda sum_{k in l1} |b_k|,
/// solved by proximal Newton steps (coordinate descent on the quadratic
/// approximation, diagonal curvature for cox) with backtracking on the objective.
class ElasticNet {
public:
    ElasticNet(Matrix X, Response resp, Vector ridge, std::vector<bool> l1, ElasticNetOptions opts = {})
        : X_(std::move(X)), resp_(std::move(resp)), ridge_(std::move(ridge)), l1_(std::move(l1)), opts_(opts) {
        if (X_.rows() != resp_.n()) throw InputError("elastic net: design and response sample counts differ");
        if (ridge_.size() != X_.cols() || l1_.size() != static_cast<std::size_t>(X_.cols()))
            throw InputError("elastic net: penalty vectors do not match the design");
        if (resp_.family() == Family::gaussian && !resp_.sigma2()) throw InputError("elastic net: gaussian response needs a noise variance");
    }

    [[nodiscard]] Index cols() const noexcept { return X_.cols(); }

    [[nodiscard]] double objective(const Vector& beta, double lambda) const {
        double pen = 0.5 * (ridge_.array() * beta.array().square()).sum();
        for (Index k = 0; k < beta.size(); ++k)
            if (l1_[static_cast<std::size_t>(k)]) pen += lambda * std::abs(beta[k]);
        return -log_likelihood(resp_, X_ * beta) + pen;
    }

    /// Largest |d loglik / d b_k| over l1 coordinates at the fit with every l1
    /// coordinate at zero: the smallest lambda giving an empty selection.
    [[nodiscard]] double lambda_max() {
        const Vector b = solve(std::numeric_limits<double>::infinity(), Vector::Zero(X_.cols()));
        const auto [grad, w] = derivatives(X_ * b);
        const Vector g = X_.transpose() * grad;
        double lmax = 0.0;
        for (Index k = 0; k < g.size(); ++k)
            if (l1_[static_cast<std::size_t>(k)]) lmax = std::max(lmax, std::abs(g[k]));
        return lmax;
    }

    /// Minimiser at `lambda`, warm-started from `start`. An infinite lambda
    /// fixes every l1 coordinate at zero.
    [[nodiscard]] Vector solve(double lambda, Vector start) const {
        Vector beta = std::move(start);
        const bool exclude = std::isinf(lambda);
        if (exclude)
            for (Index k = 0; k < beta.size(); ++k)
                if (l1_[static_cast<std::size_t>(k)]) beta[k] = 0.0;
        const double lam = exclude ? 0.0 : lambda;
        double obj = objective(beta, lam);
        for (int outer = 0; outer < opts_.max_outer; ++outer) {
            const Vector lp = X_ * beta;
            auto [grad, w] = derivatives(lp);
            const double wmax = w.maxCoeff();
            for (Index i = 0; i < w.size(); ++i) w[i] = std::max(w[i], 1e-10 * std::max(wmax, 1e-300));
            // Quadratic model in b: 1/2 sum_i w_i (z_i - x_i b)^2 with z = lp + grad / w.
            Vector resid = grad.cwiseQuotient(w);
            Vector cand = beta;
            for (int sweep = 0; sweep < opts_.max_sweeps; ++sweep) {
                double change = 0.0;
                for (Index k = 0; k < cand.size(); ++k) {
                    const bool pen_l1 = l1_[static_cast<std::size_t>(k)];
                    if (exclude && pen_l1) continue;
                    const auto xk = X_.col(k);
                    const double a = (w.array() * xk.array().square()).sum() + ridge_[k];
                    if (a <= 0.0) continue;
                    const double c = (w.array() * xk.array() * resid.array()).sum() + (a - ridge_[k]) * cand[k];
                    const double nk = pen_l1 ? detail::soft_threshold(c, lam) / a : c / a;
                    const double d = nk - cand[k];
                    if (d != 0.0) {
                        resid -= d * xk;
                        cand[k] = nk;
                        change = std::max(change, std::abs(d) * std::sqrt(a));
                    }
                }
                if (change <= opts_.tolerance) break;
            }
            double step = 1.0;
            Vector next = cand;
            double next_obj = objective(next, lam);
            for (int h = 0; h < 40 && !(next_obj <= obj + 1e-12 * (1.0 + std::abs(obj))); ++h) {
                step *= 0.5;
                next = beta + step * (cand - beta);
                next_obj = objective(next, lam);
            }
            if (!(next_obj <= obj + 1e-12 * (1.0 + std::abs(obj)))) break;
            const double moved = (next - beta).cwiseAbs().maxCoeff();
            beta = std::move(next);
            obj = next_obj;
            if (resp_.family() == Family::gaussian || moved <= 1e-9 * (1.0 + beta.cwiseAbs().maxCoeff())) break;
        }
        return beta;
    }

private:
    /// d loglik / d lp and the (diagonal) curvature.
    [[nodiscard]] std::pair<Vector, Vector> derivatives(const Vector& lp) const {
        const Index n = lp.size();
        Vector g(n), w(n);
        switch (resp_.family()) {
        case Family::gaussian: {
            const double s2 = *resp_.sigma2();
            g = (resp_.y() - lp) / s2;
            w.setConstant(1.0 / s2);
            break;
        }
        case Family::binomial:
            for (Index i = 0; i < n; ++i) {
                const double p = detail::sigmoid(lp[i]);
                g[i] = resp_.y()[i] - p;
                w[i] = p * (1.0 - p);
            }
            break;
        case Family::cox: {
            const Vector H = breslow_cumhaz(resp_.time(), resp_.status(), lp);
            g = martingale_residuals(resp_.status(), lp, H);
            w = cox_lp_information_diagonal(resp_.time(), resp_.status(), lp);
            break;
        }
        }
        return {g, w};
    }

    Matrix X_;
    Response resp_;
    Vector ridge_;
    std::vector<bool> l1_;
    ElasticNetOptions opts_;
};

} // namespace ecpc
