#pragma once

#include "ecpc/core.hpp"

#include <numeric>

namespace ecpc {

inline double mean_squared_error(const Vector& truth, const Vector& pred) {
    if (truth.size() != pred.size()) throw InputError("prediction and response lengths differ");
    if (truth.size() == 0) return 0.0;
    return (truth - pred).squaredNorm() / static_cast<double>(truth.size());
}

/// Area under the ROC curve as the Mann-Whitney statistic; tied scores count 1/2.
inline double auc(const Vector& scores, const Vector& labels) {
    if (scores.size() != labels.size()) throw InputError("score and label lengths differ");
    IndexSet order(static_cast<std::size_t>(scores.size()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[static_cast<Index>(a)] < scores[static_cast<Index>(b)]; });
    // Midranks over tied blocks.
    double rank_sum = 0.0, n_pos = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[static_cast<Index>(order[j])] == scores[static_cast<Index>(order[i])]) ++j;
        const double mid = 0.5 * static_cast<double>(i + j + 1);
        for (std::size_t k = i; k < j; ++k)
            if (labels[static_cast<Index>(order[k])] == 1.0) {
                rank_sum += mid;
                n_pos += 1.0;
            }
        i = j;
    }
    const double n_neg = static_cast<double>(scores.size()) - n_pos;
    if (n_pos == 0.0 || n_neg == 0.0) throw InputError("AUC needs both classes");
    return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

/// Harrell's concordance for right-censored data: among usable pairs (the
/// shorter time is an event), the fraction where the shorter time has the
/// higher risk score; tied scores count 1/2.
inline double concordance(const Vector& risk, const Vector& time, const Vector& status) {
    if (risk.size() != time.size() || time.size() != status.size()) throw InputError("concordance inputs have different lengths");
    double agree = 0.0, usable = 0.0;
    for (Index i = 0; i < time.size(); ++i) {
        if (status[i] != 1.0) continue;
        for (Index j = 0; j < time.size(); ++j) {
            if (!(time[j] > time[i])) continue;
            usable += 1.0;
            if (risk[i] > risk[j]) agree += 1.0;
            else if (risk[i] == risk[j]) agree += 0.5;
        }
    }
    if (usable == 0.0) throw InputError("no comparable pairs for concordance");
    return agree / usable;
}

} // namespace ecpc
