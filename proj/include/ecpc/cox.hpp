#pragma once

#include "ecpc/core.hpp"

#include <cmath>
#include <numeric>

namespace ecpc {

namespace detail {

inline double safe_exp(double x) { return std::exp(std::min(x, 700.0)); }

/// Samples sorted by time with the boundaries of tied-time blocks.
struct TimeBlocks {
    IndexSet order;              // sample indices sorted by time
    std::vector<std::size_t> start; // block start positions into `order`, plus end sentinel
};

inline TimeBlocks time_blocks(const Vector& times) {
    TimeBlocks tb;
    tb.order.resize(static_cast<std::size_t>(times.size()));
    std::iota(tb.order.begin(), tb.order.end(), std::size_t{0});
    std::stable_sort(tb.order.begin(), tb.order.end(),
                     [&](std::size_t a, std::size_t b) { return times[static_cast<Index>(a)] < times[static_cast<Index>(b)]; });
    for (std::size_t pos = 0; pos < tb.order.size(); ++pos)
        if (pos == 0 || times[static_cast<Index>(tb.order[pos])] != times[static_cast<Index>(tb.order[pos - 1])])
            tb.start.push_back(pos);
    tb.start.push_back(tb.order.size());
    return tb;
}

/// Per-block risk-set sums S_b = sum_{j: t_j >= t_b} exp(lp_j) and event counts d_b.
struct RiskSets {
    TimeBlocks blocks;
    std::vector<double> risk;
    std::vector<double> events;
};

inline RiskSets risk_sets(const Vector& times, const Vector& status, const Vector& lp) {
    RiskSets rs{time_blocks(times), {}, {}};
    const auto nb = rs.blocks.start.size() - 1;
    rs.risk.assign(nb, 0.0);
    rs.events.assign(nb, 0.0);
    double suffix = 0.0;
    for (std::size_t b = nb; b-- > 0;) {
        for (auto pos = rs.blocks.start[b]; pos < rs.blocks.start[b + 1]; ++pos) {
            const auto i = static_cast<Index>(rs.blocks.order[pos]);
            suffix += safe_exp(lp[i]);
            rs.events[b] += status[i];
        }
        rs.risk[b] = suffix;
    }
    return rs;
}

} // namespace detail

/// Breslow cumulative baseline hazard evaluated at every sample's own time:
/// h0(t_b) = d_b / sum_{j: t_j >= t_b} exp(lp_j), H0(t) = sum_{t_b <= t} h0(t_b).
/// Tied times share one risk set.
inline Vector breslow_cumhaz(const Vector& times, const Vector& status, const Vector& lp) {
    if (times.size() != status.size() || times.size() != lp.size())
        throw InputError("breslow_cumhaz: times, status and linear predictor lengths differ");
    const auto rs = detail::risk_sets(times, status, lp);
    Vector H(times.size());
    double cum = 0.0;
    for (std::size_t b = 0; b + 1 < rs.blocks.start.size(); ++b) {
        if (rs.events[b] > 0.0) cum += rs.events[b] / rs.risk[b];
        for (auto pos = rs.blocks.start[b]; pos < rs.blocks.start[b + 1]; ++pos) H[static_cast<Index>(rs.blocks.order[pos])] = cum;
    }
    return H;
}

/// Delta_i = d_i - H0(t_i) exp(lp_i).
inline Vector martingale_residuals(const Vector& status, const Vector& lp, const Vector& cumhaz) {
    Vector out(status.size());
    for (Index i = 0; i < status.size(); ++i) out[i] = status[i] - cumhaz[i] * detail::safe_exp(lp[i]);
    return out;
}

/// Breslow partial log-likelihood: sum over events of lp_i - log S(t_i).
inline double cox_partial_loglik(const Vector& times, const Vector& status, const Vector& lp) {
    const auto rs = detail::risk_sets(times, status, lp);
    double ll = 0.0;
    for (Index i = 0; i < lp.size(); ++i)
        if (status[i] > 0.0) ll += lp[i];
    for (std::size_t b = 0; b < rs.risk.size(); ++b)
        if (rs.events[b] > 0.0) ll -= rs.events[b] * std::log(rs.risk[b]);
    return ll;
}

/// Negative Hessian of the partial log-likelihood with respect to the linear
/// predictor: diag(H0 exp(lp)) - sum_b d_b / S_b^2 a_b a_b^T with a_b the
/// risk-set indicator times exp(lp).
inline Matrix cox_lp_information(const Vector& times, const Vector& status, const Vector& lp) {
    const Index n = lp.size();
    const auto rs = detail::risk_sets(times, status, lp);
    const Vector H = breslow_cumhaz(times, status, lp);
    Matrix info = Matrix::Zero(n, n);
    Vector e(n);
    for (Index i = 0; i < n; ++i) e[i] = detail::safe_exp(lp[i]);
    for (Index i = 0; i < n; ++i) info(i, i) = H[i] * e[i];
    Vector a = Vector::Zero(n);
    // Risk-set indicators grow as blocks move back in time, so build a_b by suffix.
    for (std::size_t b = rs.risk.size(); b-- > 0;) {
        for (auto pos = rs.blocks.start[b]; pos < rs.blocks.start[b + 1]; ++pos) {
            const auto i = static_cast<Index>(rs.blocks.order[pos]);
            a[i] = e[i];
        }
        if (rs.events[b] > 0.0) info.noalias() -= (rs.events[b] / (rs.risk[b] * rs.risk[b])) * (a * a.transpose());
    }
    return info;
}

/// Diagonal of cox_lp_information without forming the n x n matrix.
inline Vector cox_lp_information_diagonal(const Vector& times, const Vector& status, const Vector& lp) {
    const auto rs = detail::risk_sets(times, status, lp);
    Vector out(lp.size());
    double cum = 0.0, cum2 = 0.0;
    for (std::size_t b = 0; b + 1 < rs.blocks.start.size(); ++b) {
        if (rs.events[b] > 0.0) {
            cum += rs.events[b] / rs.risk[b];
            cum2 += rs.events[b] / (rs.risk[b] * rs.risk[b]);
        }
        for (auto pos = rs.blocks.start[b]; pos < rs.blocks.start[b + 1]; ++pos) {
            const auto i = static_cast<Index>(rs.blocks.order[pos]);
            const double e = detail::safe_exp(lp[i]);
            out[i] = cum * e - cum2 * e * e;
        }
    }
    return out;
}

/// Step-function baseline cumulative hazard at distinct event times.
struct BaselineHazard {
    std::vector<double> times;
    std::vector<double> cumhaz;

    [[nodiscard]] double at(double t) const {
        const auto it = std::upper_bound(times.begin(), times.end(), t);
        if (it == times.begin()) return 0.0;
        return cumhaz[static_cast<std::size_t>(it - times.begin()) - 1];
    }
};

inline BaselineHazard baseline_hazard(const Vector& times, const Vector& status, const Vector& lp) {
    const auto rs = detail::risk_sets(times, status, lp);
    BaselineHazard bh;
    double cum = 0.0;
    for (std::size_t b = 0; b + 1 < rs.blocks.start.size(); ++b) {
        if (rs.events[b] <= 0.0) continue;
        cum += rs.events[b] / rs.risk[b];
        bh.times.push_back(times[static_cast<Index>(rs.blocks.order[rs.blocks.start[b]])]);
        bh.cumhaz.push_back(cum);
    }
    return bh;
}

} // namespace ecpc
