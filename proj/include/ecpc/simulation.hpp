#pragma once

#include "ecpc/estimator.hpp"
#include "ecpc/metrics.hpp"

#include <random>

namespace ecpc {

/// Linear-model benchmark with random and informative co-data groupings.
struct SimulationConfig {
    std::size_t n = 100;
    std::size_t n_test = 100;
    std::size_t p = 300;
    double sigma2 = 1.0;
    double tau2 = 0.1;
    std::size_t replicates = 30;
    std::vector<std::size_t> group_counts{1, 5, 10, 20, 30};
    bool random_codata = true;
    bool informative_codata = true;
    std::uint64_t seed = 1;
    std::size_t n_splits = 10;
};

struct SimulationRow {
    std::string method;
    std::string codata;
    std::size_t groups = 0;
    std::size_t replicate = 0;
    double mse = 0.0;
};

struct SimulatedData {
    Vector beta;
    Matrix X, X_test;
    Vector y, y_test;
};

inline SimulatedData simulate_linear(const SimulationConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> z;
    SimulatedData d;
    const auto p = static_cast<Index>(cfg.p);
    d.beta.resize(p);
    for (Index k = 0; k < p; ++k) d.beta[k] = std::sqrt(cfg.tau2) * z(rng);
    auto draw = [&](std::size_t rows, Matrix& X, Vector& y) {
        X.resize(static_cast<Index>(rows), p);
        for (Index i = 0; i < X.rows(); ++i)
            for (Index k = 0; k < p; ++k) X(i, k) = z(rng);
        y = X * d.beta;
        for (Index i = 0; i < y.size(); ++i) y[i] += std::sqrt(cfg.sigma2) * z(rng);
    };
    draw(cfg.n, d.X, d.y);
    draw(cfg.n_test, d.X_test, d.y_test);
    return d;
}

/// `order` dealt into G consecutive chunks of (near-)equal size.
inline Grouping chunk_grouping(const IndexSet& order, std::size_t G, std::string name) {
    std::vector<IndexSet> groups(G);
    const std::size_t p = order.size();
    for (std::size_t g = 0; g < G; ++g) {
        const std::size_t lo = g * p / G, hi = (g + 1) * p / G;
        groups[g].assign(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
    }
    return Grouping(p, std::move(groups), std::move(name));
}

inline Grouping random_grouping(std::size_t p, std::size_t G, std::mt19937_64& rng) {
    IndexSet order(p);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    return chunk_grouping(order, G, "random");
}

/// Groups ordered by increasing |beta|.
inline Grouping informative_grouping(const Vector& beta, std::size_t G) {
    IndexSet order(static_cast<std::size_t>(beta.size()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(beta[static_cast<Index>(a)]) < std::abs(beta[static_cast<Index>(b)]); });
    return chunk_grouping(order, G, "informative");
}

/// Test MSE of ordinary ridge and of the co-data model with and without ridge
/// hypershrinkage, per replicate, co-data type and group count. Rows are
/// ordered by replicate, then co-data type, group count and method.
inline std::vector<SimulationRow> run_simulation(const SimulationConfig& cfg) {
    if (cfg.replicates < 1) throw InputError("simulation needs at least one replicate");
    for (auto G : cfg.group_counts)
        if (G < 1 || G > cfg.p) throw InputError("group count " + std::to_string(G) + " is out of range");
    std::vector<std::vector<SimulationRow>> per_rep(cfg.replicates);
    parallel_for(cfg.replicates, [&](std::size_t r) {
        const auto data = simulate_linear(cfg, cfg.seed + r);
        std::mt19937_64 rng(cfg.seed + r + 7919);
        EcpcOptions opts;
        opts.n_splits = cfg.n_splits;
        opts.seed = cfg.seed + r;
        const Response resp = Response::gaussian(data.y);
        auto& rows = per_rep[r];
        const auto ridge = fit_ordinary_ridge(data.X, resp, opts);
        rows.push_back({"ordinary_ridge", "none", 1, r, mean_squared_error(data.y_test, predict(ridge, data.X_test).response)});
        std::vector<std::string> kinds;
        if (cfg.random_codata) kinds.push_back("random");
        if (cfg.informative_codata) kinds.push_back("informative");
        for (const auto& kind : kinds) {
            for (auto G : cfg.group_counts) {
                const Grouping grouping = kind == "random" ? random_grouping(cfg.p, G, rng) : informative_grouping(data.beta, G);
                for (auto hk : {HyperKind::ridge, HyperKind::none}) {
                    const auto model = fit_ecpc(data.X, resp, {CoDataSource{grouping, hk, std::nullopt}}, opts);
                    rows.push_back({hk == HyperKind::ridge ? "ecpc_hyper" : "ecpc_nohyper", kind, G, r,
                                    mean_squared_error(data.y_test, predict(model, data.X_test).response)});
                }
            }
        }
    });
    std::vector<SimulationRow> out;
    for (auto& rows : per_rep) out.insert(out.end(), rows.begin(), rows.end());
    return out;
}

/// Mean MSE over replicates for one (method, co-data, G) cell.
inline double mean_mse(const std::vector<SimulationRow>& rows, const std::string& method, const std::string& codata, std::size_t G) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& r : rows)
        if (r.method == method && (method == "ordinary_ridge" || (r.codata == codata && r.groups == G))) {
            sum += r.mse;
            ++count;
        }
    if (count == 0) throw InputError("no simulation rows for " + method + "/" + codata + "/" + std::to_string(G));
    return sum / static_cast<double>(count);
}

} // namespace ecpc
