#pragma once

#include "ecpc/estimator.hpp"
#include "ecpc/io.hpp"
#include "ecpc/metrics.hpp"
#include "ecpc/selection.hpp"
#include "ecpc/serialize.hpp"
#include "ecpc/simulation.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>

namespace ecpc::cli {

struct CoDataSpec {
    std::string path;
    HyperKind kind = HyperKind::ridge;
    std::optional<double> lambda;
};

struct SelectSpec {
    std::string method = "l1";
    std::size_t count = 0;
    RefitMode refit = RefitMode::dense;
};

struct RunConfig {
    std::string command;
    std::string x, y, model, out = ".";
    std::string family = "gaussian";
    std::vector<CoDataSpec> codata;
    std::size_t folds = 10;
    std::size_t splits = 10;
    std::optional<std::uint64_t> seed;
    std::optional<SelectSpec> select;
    bool intercept = false;
    /// 1-based columns of X left unpenalised.
    std::vector<std::size_t> unpenalized;
    std::optional<double> sigma2;
    std::optional<double> tau_global;
    HierarchyOptions hierarchy{20, std::nullopt, false, "continuous"};
    std::size_t replicates = 30;
    std::vector<std::size_t> groups{1, 5, 10, 20, 30};
    std::size_t subsamples = 50;
    bool fixed_subsample = false;
    bool plot = false;
};

inline SelectSpec parse_select(const std::string& s) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t pos; (pos = s.find(':', start)) != std::string::npos; start = pos + 1) parts.push_back(s.substr(start, pos - start));
    parts.push_back(s.substr(start));
    if (parts.size() < 2 || parts.size() > 3) throw InputError("--select expects method:count[:mode], got '" + s + "'");
    SelectSpec out;
    out.method = parts[0];
    if (out.method != "l1" && out.method != "dss" && out.method != "credible")
        throw InputError("unknown selection method '" + out.method + "' (expected l1, dss or credible)");
    try {
        std::size_t used = 0;
        const long long c = std::stoll(parts[1], &used);
        if (used != parts[1].size() || c < 1) throw std::invalid_argument("count");
        out.count = static_cast<std::size_t>(c);
    } catch (const std::exception&) {
        throw InputError("selection count must be a positive integer, got '" + parts[1] + "'");
    }
    if (parts.size() == 3) out.refit = refit_mode_from_string(parts[2]);
    return out;
}

namespace detail {

using ojson = nlohmann::ordered_json;

inline void require_file(const std::string& path, const std::string& what) {
    if (path.empty()) throw InputError("missing " + what + " path");
    if (!std::filesystem::exists(path)) throw InputError(what + " file '" + path + "' does not exist");
}

/// Fills options absent from the command line with values from a JSON document.
inline void merge_config(RunConfig& cfg, const CLI::App& app, const std::string& path, std::vector<std::string>& codata_paths,
                         std::vector<std::string>& hypers, std::string& select) {
    require_file(path, "config");
    std::ifstream in(path);
    ojson j;
    try {
        j = ojson::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw InputError("config file '" + path + "' must hold a JSON object");
    static const std::vector<std::string> known{"command",  "x",         "y",          "family",     "codata",          "hyper",
                                                "folds",    "splits",    "seed",       "select",     "out",             "model",
                                                "intercept", "unpenalized", "sigma2",  "tau_global", "min_group_size",  "threshold",
                                                "low_only", "replicates", "groups",    "subsamples", "fixed_subsample", "plot"};
    for (const auto& [key, value] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end()) throw InputError("config file '" + path + "': unknown key '" + key + "'");
    auto take = [&](const std::string& key, auto& target) {
        if (!j.contains(key) || app.count("--" + key)) return;
        try {
            target = j.at(key).get<std::remove_reference_t<decltype(target)>>();
        } catch (const nlohmann::json::exception& e) {
            throw InputError("config key '" + key + "' has the wrong type: " + e.what());
        }
    };
    auto take_opt = [&](const std::string& key, const std::string& flag, auto& target) {
        if (!j.contains(key) || app.count(flag)) return;
        try {
            target = j.at(key).get<typename std::remove_reference_t<decltype(target)>::value_type>();
        } catch (const nlohmann::json::exception& e) {
            throw InputError("config key '" + key + "' has the wrong type: " + e.what());
        }
    };
    take("command", cfg.command);
    take("x", cfg.x);
    take("y", cfg.y);
    take("family", cfg.family);
    take("folds", cfg.folds);
    take("splits", cfg.splits);
    take("out", cfg.out);
    take("model", cfg.model);
    take("intercept", cfg.intercept);
    take("unpenalized", cfg.unpenalized);
    take("replicates", cfg.replicates);
    take("groups", cfg.groups);
    take("subsamples", cfg.subsamples);
    take("plot", cfg.plot);
    take_opt("seed", "--seed", cfg.seed);
    take_opt("sigma2", "--sigma2", cfg.sigma2);
    take_opt("tau_global", "--tau-global", cfg.tau_global);
    take_opt("threshold", "--threshold", cfg.hierarchy.initial_threshold);
    if (j.contains("min_group_size") && !app.count("--min-group-size")) cfg.hierarchy.min_group_size = j["min_group_size"].get<std::size_t>();
    if (j.contains("low_only") && !app.count("--low-only")) cfg.hierarchy.recurse_low_only = j["low_only"].get<bool>();
    if (j.contains("fixed_subsample") && !app.count("--fixed-subsample")) cfg.fixed_subsample = j["fixed_subsample"].get<bool>();
    if (j.contains("select") && !app.count("--select")) select = j["select"].get<std::string>();
    if (j.contains("hyper") && !app.count("--hyper")) {
        hypers.clear();
        const auto& h = j["hyper"];
        if (h.is_string()) hypers.push_back(h.get<std::string>());
        else hypers = h.get<std::vector<std::string>>();
    }
    if (j.contains("codata") && !app.count("--codata")) {
        codata_paths.clear();
        for (const auto& c : j["codata"]) {
            if (c.is_string()) {
                cfg.codata.push_back({c.get<std::string>(), HyperKind::ridge, std::nullopt});
                continue;
            }
            if (!c.is_object() || !c.contains("path")) throw InputError("config 'codata' entries must be paths or objects with a 'path'");
            CoDataSpec spec;
            spec.path = c["path"].get<std::string>();
            if (c.contains("hyper")) spec.kind = hyper_kind_from_string(c["hyper"].get<std::string>());
            if (c.contains("lambda")) spec.lambda = c["lambda"].get<double>();
            cfg.codata.push_back(spec);
        }
    }
}

struct Design {
    Matrix X;
    Matrix U;
    std::vector<std::string> names;
    std::vector<std::string> unpenalized_names;
};

inline Design read_design(const std::string& path, const std::vector<std::size_t>& unpenalized) {
    const auto t = io::read_csv(path, "X");
    const auto cols = static_cast<std::size_t>(t.data.cols());
    std::vector<bool> is_unpen(cols, false);
    for (auto c : unpenalized) {
        if (c < 1 || c > cols) throw InputError("--unpenalized column " + std::to_string(c) + " is outside 1.." + std::to_string(cols));
        is_unpen[c - 1] = true;
    }
    IndexSet pen, unpen;
    for (std::size_t c = 0; c < cols; ++c) (is_unpen[c] ? unpen : pen).push_back(c);
    if (pen.empty()) throw InputError("X has no penalised columns");
    Design d;
    d.X = ecpc::detail::select_columns(t.data, pen);
    if (!unpen.empty()) d.U = ecpc::detail::select_columns(t.data, unpen);
    for (auto c : pen) d.names.push_back(t.header[c]);
    for (auto c : unpen) d.unpenalized_names.push_back(t.header[c]);
    return d;
}

inline Matrix rows_of(const Matrix& M, const IndexSet& rows) { return M.size() ? ecpc::detail::select_rows(M, rows) : Matrix(); }

struct Context {
    RunConfig cfg;
    std::ostream& out;
    std::ostream& err;

    [[nodiscard]] std::string path(const std::string& file) const { return (std::filesystem::path(cfg.out) / file).string(); }
};

inline std::string fmt(double v) { return io::format_double(v); }

inline std::vector<Grouping> read_groupings(const RunConfig& cfg, std::size_t p) {
    io::CoDataReadOptions ro;
    ro.hierarchy = cfg.hierarchy;
    std::vector<Grouping> out;
    for (const auto& c : cfg.codata) out.push_back(io::read_codata(c.path, p, ro));
    return out;
}

inline EcpcOptions fit_options(const RunConfig& cfg, const Matrix& U, std::uint64_t seed) {
    EcpcOptions o;
    o.unpenalized = U;
    o.intercept = cfg.intercept;
    o.n_splits = cfg.splits;
    o.seed = seed;
    o.tau_global = cfg.tau_global;
    o.global.folds = cfg.folds;
    o.global.seed = seed;
    return o;
}

inline FittedModel fit_model(const RunConfig& cfg, const std::vector<Grouping>& groupings, const Matrix& X, const Matrix& U, const Response& resp,
                             std::uint64_t seed) {
    const auto opts = fit_options(cfg, U, seed);
    if (groupings.empty()) return fit_ordinary_ridge(X, resp, opts);
    std::vector<CoDataSource> src;
    for (std::size_t d = 0; d < groupings.size(); ++d) src.push_back({groupings[d], cfg.codata[d].kind, cfg.codata[d].lambda});
    return fit_ecpc(X, resp, src, opts);
}

inline SelectionResult run_selection(const SelectSpec& s, const FittedModel& model, const Matrix& X, const Matrix& U, const Response& resp,
                                     const RunConfig& cfg) {
    SelectionOptions so;
    so.unpenalized = U;
    so.refit = s.refit;
    so.global.folds = cfg.folds;
    so.global.seed = *cfg.seed;
    if (s.method == "l1") return select_l1(model, X, resp, s.count, so);
    if (s.method == "dss") return select_dss_count(model, X, resp, s.count, so);
    return select_credible(model, X, resp, s.count, so);
}

inline Vector selection_lp(const SelectionResult& s, const Matrix& X, const Matrix& U) {
    Vector lp = X * s.beta;
    if (s.beta_unpenalized.size()) lp += U * s.beta_unpenalized;
    lp.array() += s.intercept;
    return lp;
}

/// Held-out performance: MSE (gaussian), AUC (binomial) or concordance (cox).
inline std::pair<std::string, double> score(const Response& resp, const Vector& lp) {
    switch (resp.family()) {
    case Family::gaussian: return {"mse", mean_squared_error(resp.y(), lp)};
    case Family::binomial: return {"auc", auc(lp, resp.y())};
    case Family::cox: return {"concordance", concordance(lp, resp.time(), resp.status())};
    }
    throw InputError("unknown family");
}

inline void ensure_out_dir(const RunConfig& cfg) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out, ec);
    if (ec || !std::filesystem::is_directory(cfg.out)) throw InputError("cannot create output directory '" + cfg.out + "'");
}

inline void require_seed(const RunConfig& cfg) {
    if (!cfg.seed) throw InputError("--seed is required for command '" + cfg.command + "'");
}

inline Response load_response(const RunConfig& cfg, Index n) {
    require_file(cfg.y, "response");
    auto resp = io::read_response(cfg.y, family_from_string(cfg.family), cfg.sigma2);
    if (resp.n() != n)
        throw InputError("response has " + std::to_string(resp.n()) + " rows but X has " + std::to_string(n));
    return resp;
}

inline void write_group_weights(const Context& ctx, const FittedModel& m) {
    std::vector<std::vector<std::string>> rows;
    for (std::size_t d = 0; d < m.groupings.size(); ++d) {
        const auto& g = m.groupings[d];
        for (std::size_t k = 0; k < g.groups.size(); ++k)
            rows.push_back({g.name, g.group_names[k], std::to_string(g.groups[k].size()), fmt(g.gamma[static_cast<Index>(k)]),
                            fmt(g.gamma_raw[static_cast<Index>(k)]), g.selected[k] ? "1" : "0", std::string(to_string(g.kind)), fmt(g.lambda),
                            g.refit_lambda ? fmt(*g.refit_lambda) : "NA", fmt(m.w[static_cast<Index>(d)])});
    }
    io::write_csv(ctx.path("group_weights.csv"),
                  {"grouping", "group", "size", "gamma", "gamma_raw", "selected", "hypershrinkage", "lambda", "refit_lambda", "w"}, rows);
}

inline void save_fitted(const Context& ctx, const FittedModel& m, const Design& d) {
    auto j = model_to_json(m);
    j["unpenalized_names"] = d.unpenalized_names;
    std::ofstream f(ctx.path("model.json"), std::ios::binary);
    if (!f) throw InputError("cannot write '" + ctx.path("model.json") + "'");
    f << j.dump(2) << '\n';
}

inline void write_selection(const Context& ctx, const SelectionResult& s, const std::vector<std::string>& names) {
    std::vector<std::vector<std::string>> rows;
    for (auto k : s.selected) rows.push_back({std::to_string(k + 1), names[k], fmt(s.beta[static_cast<Index>(k)])});
    io::write_csv(ctx.path("selection.csv"), {"index", "covariate", "beta"}, rows);
    ctx.out << "selection: method " << s.method << ", " << s.selected.size() << " covariates, refit " << to_string(s.refit) << ", penalty "
            << fmt(s.tuning) << (s.count_adjusted ? " (count adjusted)" : "") << '\n';
}

inline void write_summary(const Context& ctx, const FittedModel& m) {
    std::ofstream log(ctx.path("fit.log"), std::ios::binary);
    auto line = [&](const std::string& s) {
        log << s << '\n';
        ctx.out << s << '\n';
    };
    line("family: " + std::string(to_string(m.family)));
    line("covariates: " + std::to_string(m.p()));
    line("tau_global: " + fmt(m.tau_global));
    if (m.sigma2) line("sigma2: " + fmt(*m.sigma2));
    if (m.has_intercept) line("intercept: " + fmt(m.intercept));
    for (std::size_t d = 0; d < m.groupings.size(); ++d)
        line("grouping " + m.groupings[d].name + ": w " + fmt(m.w[static_cast<Index>(d)]) + ", lambda " + fmt(m.groupings[d].lambda) + ", " +
             std::string(to_string(m.groupings[d].kind)));
    std::size_t excluded = 0;
    for (bool e : m.excluded) excluded += e;
    if (excluded) line("excluded covariates: " + std::to_string(excluded));
    line("converged: " + std::string(m.diagnostics.converged ? "yes" : "no"));
}

inline int cmd_fit(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    require_seed(cfg);
    require_file(cfg.x, "X");
    for (const auto& c : cfg.codata) require_file(c.path, "co-data");
    const auto d = read_design(cfg.x, cfg.unpenalized);
    const auto resp = load_response(cfg, d.X.rows());
    const auto groupings = read_groupings(cfg, static_cast<std::size_t>(d.X.cols()));
    ensure_out_dir(cfg);
    auto model = fit_model(cfg, groupings, d.X, d.U, resp, *cfg.seed);
    model.covariate_names = d.names;
    save_fitted(ctx, model, d);
    write_group_weights(ctx, model);
    write_summary(ctx, model);
    return 0;
}

inline int cmd_predict(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    require_file(cfg.model, "model");
    require_file(cfg.x, "X");
    const auto model = load_model(cfg.model);
    std::vector<std::string> unpen_names;
    {
        std::ifstream in(cfg.model);
        const auto j = detail::ojson::parse(in);
        if (j.contains("unpenalized_names")) unpen_names = j["unpenalized_names"].get<std::vector<std::string>>();
    }
    if (unpen_names.size() != static_cast<std::size_t>(model.beta_unpenalized.size())) unpen_names.clear();
    const auto t = io::read_csv(cfg.x, "X");
    const std::size_t need = model.p() + static_cast<std::size_t>(model.beta_unpenalized.size());
    std::map<std::string, std::size_t> by_name;
    for (std::size_t c = 0; c < t.header.size(); ++c) by_name.emplace(t.header[c], c);
    auto lookup = [&](const std::vector<std::string>& names, IndexSet& cols) {
        for (const auto& n : names) {
            const auto it = by_name.find(n);
            if (it == by_name.end()) return false;
            cols.push_back(it->second);
        }
        return true;
    };
    IndexSet pen, unpen;
    const bool named = !model.covariate_names.empty() && by_name.size() == t.header.size() && lookup(model.covariate_names, pen) &&
                       (model.beta_unpenalized.size() == 0 || (!unpen_names.empty() && lookup(unpen_names, unpen)));
    if (!named) {
        pen.clear();
        unpen.clear();
        if (t.header.size() != need)
            throw InputError("X has " + std::to_string(t.header.size()) + " columns but the model needs " + std::to_string(need) +
                             " and the headers do not match its covariate names");
        for (std::size_t c = 0; c < model.p(); ++c) pen.push_back(c);
        for (std::size_t c = model.p(); c < need; ++c) unpen.push_back(c);
    }
    const Matrix X = ecpc::detail::select_columns(t.data, pen);
    const Matrix U = unpen.empty() ? Matrix() : Matrix(ecpc::detail::select_columns(t.data, unpen));
    const auto pred = predict(model, X, U);
    ensure_out_dir(cfg);
    std::vector<std::vector<std::string>> rows;
    for (Index i = 0; i < pred.linear_predictor.size(); ++i)
        rows.push_back({std::to_string(i + 1), fmt(pred.linear_predictor[i]), fmt(pred.response[i])});
    io::write_csv(ctx.path("predictions.csv"), {"row", "linear_predictor", "response"}, rows);
    ctx.out << "predictions: " << rows.size() << " rows\n";
    return 0;
}

inline int cmd_select(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    require_seed(cfg);
    if (!cfg.select) throw InputError("command 'select' needs --select method:count:mode");
    require_file(cfg.x, "X");
    const auto d = read_design(cfg.x, cfg.unpenalized);
    const auto resp = load_response(cfg, d.X.rows());
    FittedModel model;
    if (!cfg.model.empty()) {
        require_file(cfg.model, "model");
        model = load_model(cfg.model);
        ensure_out_dir(cfg);
    } else {
        for (const auto& c : cfg.codata) require_file(c.path, "co-data");
        const auto groupings = read_groupings(cfg, static_cast<std::size_t>(d.X.cols()));
        ensure_out_dir(cfg);
        model = fit_model(cfg, groupings, d.X, d.U, resp, *cfg.seed);
        model.covariate_names = d.names;
        save_fitted(ctx, model, d);
        write_group_weights(ctx, model);
    }
    const auto sel = run_selection(*cfg.select, model, d.X, d.U, resp, cfg);
    write_selection(ctx, sel, d.names);
    return 0;
}

/// Test-fold rows are also used to flag folds that lack both classes.
inline void check_fold_classes(const Response& resp, const std::vector<std::size_t>& ids, std::size_t folds) {
    if (resp.family() != Family::binomial) return;
    for (std::size_t f = 0; f < folds; ++f) {
        double pos = 0, all = 0;
        for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == f) {
                pos += resp.y()[static_cast<Index>(i)];
                all += 1;
            }
        if (pos == 0 || pos == all)
            throw InputError("fold " + std::to_string(f + 1) + " holds a single class; use fewer folds (each class needs at least " +
                             std::to_string(folds) + " samples)");
    }
}

inline int cmd_cv(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    require_seed(cfg);
    if (cfg.folds < 2) throw InputError("--folds must be at least 2");
    require_file(cfg.x, "X");
    for (const auto& c : cfg.codata) require_file(c.path, "co-data");
    const auto d = read_design(cfg.x, cfg.unpenalized);
    const auto resp = load_response(cfg, d.X.rows());
    if (static_cast<std::size_t>(resp.n()) < cfg.folds) throw InputError("more folds than samples");
    const auto groupings = read_groupings(cfg, static_cast<std::size_t>(d.X.cols()));
    ensure_out_dir(cfg);
    const auto ids = stratified_folds(resp, cfg.folds, *cfg.seed);
    check_fold_classes(resp, ids, cfg.folds);

    struct Row {
        std::string method;
        std::string metric;
        double value;
        std::size_t selected;
    };
    std::vector<std::vector<Row>> per_fold(cfg.folds);
    parallel_for(cfg.folds, [&](std::size_t f) {
        IndexSet train, test;
        for (std::size_t i = 0; i < ids.size(); ++i) (ids[i] == f ? test : train).push_back(i);
        const Matrix Xtr = ecpc::detail::select_rows(d.X, train), Xte = ecpc::detail::select_rows(d.X, test);
        const Matrix Utr = rows_of(d.U, train), Ute = rows_of(d.U, test);
        const Response rtr = resp.subset(train), rte = resp.subset(test);
        const std::uint64_t seed = *cfg.seed + f;
        auto& rows = per_fold[f];
        const auto p = static_cast<std::size_t>(d.X.cols());
        const auto ridge = fit_model(cfg, {}, Xtr, Utr, rtr, seed);
        auto [metric, value] = score(rte, predict(ridge, Xte, Ute).linear_predictor);
        rows.push_back({"ordinary_ridge", metric, value, p});
        const FittedModel* dense = &ridge;
        FittedModel model;
        if (!groupings.empty()) {
            model = fit_model(cfg, groupings, Xtr, Utr, rtr, seed);
            std::size_t nonzero = 0;
            for (Index k = 0; k < model.beta.size(); ++k) nonzero += model.beta[k] != 0.0;
            auto [m2, v2] = score(rte, predict(model, Xte, Ute).linear_predictor);
            rows.push_back({"ecpc", m2, v2, nonzero});
            dense = &model;
        }
        if (cfg.select) {
            const auto sel = run_selection(*cfg.select, *dense, Xtr, Utr, rtr, cfg);
            auto [m3, v3] = score(rte, selection_lp(sel, Xte, Ute));
            rows.push_back({(groupings.empty() ? "ridge_" : "ecpc_") + cfg.select->method + "_" + std::string(to_string(cfg.select->refit)), m3,
                            v3, sel.selected.size()});
        }
    });
    std::vector<std::vector<std::string>> out;
    std::map<std::string, std::pair<double, std::size_t>> means;
    std::vector<std::string> order;
    for (std::size_t f = 0; f < cfg.folds; ++f)
        for (const auto& r : per_fold[f]) {
            out.push_back({r.method, std::to_string(f + 1), r.metric, fmt(r.value), std::to_string(r.selected)});
            if (!means.contains(r.method)) order.push_back(r.method);
            means[r.method].first += r.value;
            means[r.method].second += 1;
        }
    io::write_csv(ctx.path("cv_metrics.csv"), {"method", "fold", "metric", "value", "selected"}, out);
    for (const auto& m : order)
        ctx.out << m << ": mean " << per_fold[0][0].metric << ' ' << fmt(means[m].first / static_cast<double>(means[m].second)) << '\n';
    return 0;
}

inline void write_simulation_plot(const Context& ctx, const std::vector<std::size_t>& groups) {
    std::ofstream gp(ctx.path("simulation.gp"), std::ios::binary);
    gp << "# gnuplot -persist simulation.gp\n"
       << "set datafile separator ','\n"
       << "set key top left\n"
       << "set xlabel 'number of groups G'\n"
       << "set ylabel 'mean test MSE'\n"
       << "set xtics (";
    for (std::size_t i = 0; i < groups.size(); ++i) gp << (i ? ", " : "") << groups[i];
    gp << ")\n"
       << "set multiplot layout 1,2\n";
    for (const std::string cod : {"random", "informative"}) {
        gp << "set title '" << cod << " co-data'\n"
           << "plot '< grep \"^" << cod << ",\" simulation_summary.csv' using 2:(strcol(3) eq 'ecpc_hyper' ? $4 : 1/0) with linespoints title "
              "'ecpc with hypershrinkage', \\\n"
           << "     '' using 2:(strcol(3) eq 'ecpc_nohyper' ? $4 : 1/0) with linespoints title 'ecpc without hypershrinkage', \\\n"
           << "     '' using 2:(strcol(3) eq 'ordinary_ridge' ? $4 : 1/0) with lines title 'ordinary ridge'\n";
    }
    gp << "unset multiplot\n";
}

inline int cmd_simulate(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    require_seed(cfg);
    if (cfg.replicates < 1) throw InputError("--replicates must be at least 1");
    SimulationConfig sc;
    sc.replicates = cfg.replicates;
    sc.group_counts = cfg.groups;
    sc.seed = *cfg.seed;
    sc.n_splits = cfg.splits;
    ensure_out_dir(cfg);
    const auto rows = run_simulation(sc);
    std::vector<std::vector<std::string>> out;
    for (const auto& r : rows) out.push_back({std::to_string(r.replicate + 1), r.codata, std::to_string(r.groups), r.method, fmt(r.mse)});
    io::write_csv(ctx.path("simulation.csv"), {"replicate", "codata", "groups", "method", "mse"}, out);

    std::vector<std::vector<std::string>> summary;
    const double ridge = mean_mse(rows, "ordinary_ridge", "none", 1);
    for (const std::string cod : {"random", "informative"})
        for (auto G : cfg.groups) {
            for (const std::string method : {"ecpc_hyper", "ecpc_nohyper"}) {
                const double m = mean_mse(rows, method, cod, G);
                summary.push_back({cod, std::to_string(G), method, fmt(m), fmt(m / ridge)});
            }
            summary.push_back({cod, std::to_string(G), "ordinary_ridge", fmt(ridge), "1"});
        }
    io::write_csv(ctx.path("simulation_summary.csv"), {"codata", "groups", "method", "mean_mse", "ratio_to_ridge"}, summary);
    for (const auto& s : summary)
        if (s[2] != "ordinary_ridge") ctx.out << s[0] << " G=" << s[1] << ' ' << s[2] << ": mean MSE " << s[3] << " (ridge " << fmt(ridge) << ")\n";
    if (cfg.plot) write_simulation_plot(ctx, cfg.groups);
    return 0;
}

inline int cmd_stability(const Context& ctx) {
    const auto& cfg = ctx.cfg;
    require_seed(cfg);
    if (!cfg.select) throw InputError("command 'stability' needs --select method:count:mode");
    if (cfg.subsamples < 2) throw InputError("--subsamples must be at least 2");
    require_file(cfg.x, "X");
    for (const auto& c : cfg.codata) require_file(c.path, "co-data");
    const auto d = read_design(cfg.x, cfg.unpenalized);
    const auto resp = load_response(cfg, d.X.rows());
    const auto groupings = read_groupings(cfg, static_cast<std::size_t>(d.X.cols()));
    // Two thirds for training, stratified by class or event status.
    std::map<int, std::size_t> strata;
    for (Index i = 0; i < resp.n(); ++i) ++strata[resp.stratum(i)];
    for (const auto& [s, count] : strata)
        if (count < 3) throw InputError("subsample too small to stratify: a stratum has " + std::to_string(count) + " sample(s), need at least 3");
    ensure_out_dir(cfg);
    const std::size_t S = cfg.subsamples;
    std::vector<IndexSet> selected(S);
    std::vector<std::pair<std::string, double>> perf(S);
    std::vector<std::size_t> n_train(S);
    parallel_for(S, [&](std::size_t s) {
        const std::uint64_t seed = cfg.fixed_subsample ? *cfg.seed : *cfg.seed + s;
        const auto ids = stratified_folds(resp, 3, seed);
        IndexSet train, test;
        for (std::size_t i = 0; i < ids.size(); ++i) (ids[i] == 0 ? test : train).push_back(i);
        const Matrix Xtr = ecpc::detail::select_rows(d.X, train);
        const Matrix Utr = rows_of(d.U, train);
        const Response rtr = resp.subset(train);
        const auto model = fit_model(cfg, groupings, Xtr, Utr, rtr, seed);
        const auto sel = run_selection(*cfg.select, model, Xtr, Utr, rtr, cfg);
        selected[s] = sel.selected;
        perf[s] = score(resp.subset(test), selection_lp(sel, ecpc::detail::select_rows(d.X, test), rows_of(d.U, test)));
        n_train[s] = train.size();
    });
    std::vector<std::vector<std::string>> sub_rows;
    for (std::size_t s = 0; s < S; ++s)
        sub_rows.push_back({std::to_string(s + 1), std::to_string(n_train[s]), std::to_string(selected[s].size()), perf[s].first, fmt(perf[s].second)});
    io::write_csv(ctx.path("stability_subsamples.csv"), {"subsample", "n_train", "selected", "metric", "value"}, sub_rows);

    std::vector<std::vector<std::string>> pair_rows;
    std::map<std::size_t, std::size_t> histogram;
    double overlap_sum = 0.0;
    for (std::size_t a = 0; a < S; ++a)
        for (std::size_t b = a + 1; b < S; ++b) {
            IndexSet common;
            std::set_intersection(selected[a].begin(), selected[a].end(), selected[b].begin(), selected[b].end(), std::back_inserter(common));
            pair_rows.push_back({std::to_string(a + 1), std::to_string(b + 1), std::to_string(common.size())});
            ++histogram[common.size()];
            overlap_sum += static_cast<double>(common.size());
        }
    io::write_csv(ctx.path("stability_overlap.csv"), {"subsample_a", "subsample_b", "overlap"}, pair_rows);
    std::vector<std::vector<std::string>> hist_rows;
    for (const auto& [k, c] : histogram) hist_rows.push_back({std::to_string(k), std::to_string(c)});
    io::write_csv(ctx.path("stability_histogram.csv"), {"overlap", "pairs"}, hist_rows);

    const double size = static_cast<double>(cfg.select->count);
    const double p = static_cast<double>(d.X.cols());
    const double mean_overlap = overlap_sum / static_cast<double>(pair_rows.size());
    double mean_perf = 0.0;
    for (const auto& pr : perf) mean_perf += pr.second / static_cast<double>(S);
    io::write_csv(ctx.path("stability_summary.csv"), {"subsamples", "selection_size", "p", "mean_overlap", "random_overlap", "mean_" + perf[0].first},
                  {{std::to_string(S), std::to_string(cfg.select->count), std::to_string(d.X.cols()), fmt(mean_overlap), fmt(size * size / p),
                    fmt(mean_perf)}});
    ctx.out << "mean pairwise overlap " << fmt(mean_overlap) << " (random selection " << fmt(size * size / p) << "), mean test " << perf[0].first
            << ' ' << fmt(mean_perf) << '\n';
    if (cfg.plot) {
        std::ofstream gp(ctx.path("stability.gp"), std::ios::binary);
        gp << "set datafile separator ','\n"
           << "set style fill solid 0.6\n"
           << "set xlabel 'overlap of selected sets'\n"
           << "set ylabel 'subsample pairs'\n"
           << "set arrow from " << fmt(size * size / p) << ", graph 0 to " << fmt(size * size / p) << ", graph 1 nohead dt 2\n"
           << "plot 'stability_histogram.csv' every ::1 using 1:2 with boxes notitle\n";
    }
    return 0;
}

} // namespace detail

/// Runs one command. `args` excludes the program name. Returns the exit code:
/// 0 success, 1 numeric failure, 2 input or configuration failure.
inline int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    std::vector<std::string> codata_paths, hypers;
    std::string select, config;
    std::optional<std::uint64_t> seed;
    CLI::App app{"Co-data learnt group-adaptive ridge regression with posterior selection", "ecpc"};
    app.add_option("--command", cfg.command, "fit, predict, select, cv, simulate or stability");
    app.add_option("--x", cfg.x, "design CSV with a header row");
    app.add_option("--y", cfg.y, "response CSV (one column; cox: time,status)");
    app.add_option("--family", cfg.family, "gaussian, binomial or cox");
    app.add_option("--codata", codata_paths, "grouping JSON or continuous co-data CSV (repeatable)");
    app.add_option("--hyper", hypers, "hypershrinkage per --codata: none, ridge, lasso, hierLasso, lasso,ridge, hierLasso,ridge")->delimiter(';');
    app.add_option("--folds", cfg.folds, "cross-validation folds");
    app.add_option("--splits", cfg.splits, "random group splits for the hyperpenalty");
    app.add_option("--seed", seed, "seed for every randomised step");
    app.add_option("--select", select, "posterior selection method:count:mode, e.g. l1:25:dense");
    app.add_option("--out", cfg.out, "output directory");
    app.add_option("--config", config, "JSON document with the same keys; command-line flags take precedence");
    app.add_option("--model", cfg.model, "fitted model JSON");
    app.add_flag("--intercept", cfg.intercept, "add an unpenalised intercept");
    app.add_option("--unpenalized", cfg.unpenalized, "1-based X columns left unpenalised")->delimiter(',');
    app.add_option("--sigma2", cfg.sigma2, "known gaussian noise variance");
    app.add_option("--tau-global", cfg.tau_global, "fixed global prior variance");
    app.add_option("--min-group-size", cfg.hierarchy.min_group_size, "smallest group when discretising continuous co-data");
    app.add_option("--threshold", cfg.hierarchy.initial_threshold, "first split value for continuous co-data");
    app.add_flag("--low-only", cfg.hierarchy.recurse_low_only, "refine only the low side of each split");
    app.add_option("--replicates", cfg.replicates, "simulation replicates");
    app.add_option("--groups", cfg.groups, "group counts for the simulation")->delimiter(',');
    app.add_option("--subsamples", cfg.subsamples, "stability subsamples");
    app.add_flag("--fixed-subsample", cfg.fixed_subsample, "reuse one subsample seed (determinism check)");
    app.add_flag("--plot", cfg.plot, "also write a gnuplot script");
    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }
    try {
        cfg.seed = seed;
        if (!config.empty()) detail::merge_config(cfg, app, config, codata_paths, hypers, select);
        if (!select.empty()) cfg.select = parse_select(select);
        if (!codata_paths.empty()) {
            if (!hypers.empty() && hypers.size() != 1 && hypers.size() != codata_paths.size())
                throw InputError("give one --hyper per --codata (or a single kind for all)");
            cfg.codata.clear();
            for (std::size_t d = 0; d < codata_paths.size(); ++d) {
                CoDataSpec spec;
                spec.path = codata_paths[d];
                if (!hypers.empty()) spec.kind = hyper_kind_from_string(hypers.size() == 1 ? hypers[0] : hypers[d]);
                cfg.codata.push_back(spec);
            }
        } else if (!hypers.empty()) {
            if (hypers.size() != 1 && hypers.size() != cfg.codata.size()) throw InputError("give one --hyper per --codata (or a single kind for all)");
            for (std::size_t d = 0; d < cfg.codata.size(); ++d) cfg.codata[d].kind = hyper_kind_from_string(hypers.size() == 1 ? hypers[0] : hypers[d]);
        }
        (void)family_from_string(cfg.family);
        detail::Context ctx{cfg, out, err};
        if (cfg.command == "fit") return detail::cmd_fit(ctx);
        if (cfg.command == "predict") return detail::cmd_predict(ctx);
        if (cfg.command == "select") return detail::cmd_select(ctx);
        if (cfg.command == "cv") return detail::cmd_cv(ctx);
        if (cfg.command == "simulate") return detail::cmd_simulate(ctx);
        if (cfg.command == "stability") return detail::cmd_stability(ctx);
        throw InputError(cfg.command.empty() ? "missing --command" : "unknown command '" + cfg.command + "'");
    } catch (const InputError& e) {
        err << "ecpc: error: " << e.what() << '\n';
        return 2;
    } catch (const nlohmann::json::exception& e) {
        err << "ecpc: error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "ecpc: numeric failure: " << e.what() << '\n';
        return 1;
    }
}

} // namespace ecpc::cli
