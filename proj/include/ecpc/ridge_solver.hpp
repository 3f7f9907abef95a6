#pragma once

#include "ecpc/core.hpp"

#include <Eigen/Cholesky>

namespace ecpc {

enum class SolvePath { automatic, primal, dual };

/// Factorises (Xt' Xt + diag(omega)) for a weighted design Xt (n x p) and a
/// diagonal precision omega, where omega_k = 0 marks an unpenalised column.
///
/// The primal path factorises the p x p matrix. The dual path works with the
/// n x n kernel K = I + Xt_P Omega_P^{-1} Xt_P' and profiles the unpenalised
/// block through S = Xt_U' K^{-1} Xt_U, so nothing of size p x p is formed.
class WeightedRidgeSolver {
public:
    WeightedRidgeSolver(const Matrix& Xt, const Vector& omega, SolvePath path = SolvePath::automatic) : Xt_(Xt), omega_(omega) {
        if (omega.size() != Xt.cols()) throw InputError("precision length does not match the number of columns");
        for (Index k = 0; k < omega.size(); ++k) {
            if (!(omega[k] >= 0.0) || !std::isfinite(omega[k])) throw InputError("precision entries must be finite and non-negative");
            (omega[k] > 0.0 ? pen_ : unpen_).push_back(static_cast<std::size_t>(k));
        }
        if (path == SolvePath::automatic) path = (Xt.cols() <= Xt.rows() || pen_.empty()) ? SolvePath::primal : SolvePath::dual;
        if (path == SolvePath::dual && pen_.empty()) path = SolvePath::primal;
        dual_ = path == SolvePath::dual;
        dual_ ? factor_dual() : factor_primal();
    }

    [[nodiscard]] bool is_dual() const noexcept { return dual_; }

    /// (Xt' Xt + Omega)^{-1} G for a p x m right-hand side.
    [[nodiscard]] Matrix solve_general(const Matrix& G) const {
        if (G.rows() != Xt_.cols()) throw InputError("right-hand side has wrong length");
        if (!dual_) return primal_.solve(G);
        const Matrix GP = detail::select_rows(G, pen_);
        const Matrix scaledP = oinv_.asDiagonal() * GP;
        Matrix betaU;
        Matrix H = GP;
        if (!unpen_.empty()) {
            const Matrix GU = detail::select_rows(G, unpen_);
            const Matrix t = XP_ * scaledP;
            betaU = schur_.solve(GU - XU_.transpose() * kernel_.solve(t));
            H.noalias() -= XP_.transpose() * (XU_ * betaU);
        }
        const Matrix OH = oinv_.asDiagonal() * H;
        const Matrix BP = OH - oinv_.asDiagonal() * (XP_.transpose() * kernel_.solve(XP_ * OH));
        Matrix out(Xt_.cols(), G.cols());
        for (std::size_t j = 0; j < pen_.size(); ++j) out.row(static_cast<Index>(pen_[j])) = BP.row(static_cast<Index>(j));
        for (std::size_t j = 0; j < unpen_.size(); ++j) out.row(static_cast<Index>(unpen_[j])) = betaU.row(static_cast<Index>(j));
        return out;
    }

    [[nodiscard]] Vector solve_general(const Vector& g) const { return solve_general(Matrix(g)).col(0); }

    /// Ridge solution (Xt' Xt + Omega)^{-1} Xt' z.
    [[nodiscard]] Vector solve(const Vector& z) const { return solve_general(Vector(Xt_.transpose() * z)); }

    /// The p x n operator F = (Xt' Xt + Omega)^{-1} Xt'.
    [[nodiscard]] Matrix hat_operator() const { return solve_general(Matrix(Xt_.transpose())); }

private:
    void factor_primal() {
        Matrix M = Xt_.transpose() * Xt_;
        M.diagonal() += omega_;
        primal_.compute(M);
        if (primal_.info() != Eigen::Success) throw NumericError("penalised normal matrix is not positive definite");
        check_conditioning(primal_.vectorD(), "penalised normal matrix");
    }

    void factor_dual() {
        XP_ = detail::select_columns(Xt_, pen_);
        oinv_ = detail::select(omega_, pen_).cwiseInverse();
        Matrix K = XP_ * oinv_.asDiagonal() * XP_.transpose();
        K.diagonal().array() += 1.0;
        kernel_.compute(K);
        if (kernel_.info() != Eigen::Success) throw NumericError("n x n kernel matrix is not positive definite");
        if (!unpen_.empty()) {
            XU_ = detail::select_columns(Xt_, unpen_);
            const Matrix S = XU_.transpose() * kernel_.solve(XU_);
            schur_.compute(S);
            if (schur_.info() != Eigen::Success) throw NumericError("unpenalised covariates are linearly dependent");
            check_conditioning(schur_.vectorD(), "unpenalised block");
        }
    }

    static void check_conditioning(const Vector& d, const char* what) {
        const double hi = d.cwiseAbs().maxCoeff(), lo = d.minCoeff();
        if (!(lo > hi * 1e-14))
            throw NumericError(std::string(what) + " is singular (pivot ratio " + std::to_string(hi > 0 ? lo / hi : 0.0) + ")");
    }

    Matrix Xt_;
    Vector omega_;
    IndexSet pen_, unpen_;
    bool dual_ = false;
    Eigen::LDLT<Matrix> primal_;
    Matrix XP_, XU_;
    Vector oinv_;
    Eigen::LLT<Matrix> kernel_;
    Eigen::LDLT<Matrix> schur_;
};

} // namespace ecpc
