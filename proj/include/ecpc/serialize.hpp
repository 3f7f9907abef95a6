#pragma once

#include "ecpc/estimator.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace ecpc {

inline constexpr const char* model_format_version = "ecpc-model/1";

namespace detail {

using ojson = nlohmann::ordered_json;

inline ojson vec_to_json(const Vector& v) {
    ojson a = ojson::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline Vector vec_from_json(const ojson& a) {
    Vector v(static_cast<Index>(a.size()));
    for (std::size_t i = 0; i < a.size(); ++i) v[static_cast<Index>(i)] = a[i].get<double>();
    return v;
}

inline ojson bools_to_json(const std::vector<bool>& b) {
    ojson a = ojson::array();
    for (bool x : b) a.push_back(x);
    return a;
}

inline std::vector<bool> bools_from_json(const ojson& a) {
    std::vector<bool> b;
    for (const auto& x : a) b.push_back(x.get<bool>());
    return b;
}

} // namespace detail

/// JSON document holding every fitted quantity plus the groupings needed to
/// recompute the local variances. Group member indices are 1-based.
inline nlohmann::ordered_json model_to_json(const FittedModel& m) {
    using detail::ojson;
    ojson j;
    j["format"] = model_format_version;
    j["family"] = std::string(to_string(m.family));
    j["p"] = m.p();
    j["covariate_names"] = m.covariate_names;
    j["tau_global"] = m.tau_global;
    j["sigma2"] = m.sigma2 ? ojson(*m.sigma2) : ojson(nullptr);
    j["intercept"] = m.has_intercept ? ojson(m.intercept) : ojson(nullptr);
    j["beta"] = detail::vec_to_json(m.beta);
    j["beta_unpenalized"] = detail::vec_to_json(m.beta_unpenalized);
    j["tau_local"] = detail::vec_to_json(m.tau_local);
    j["excluded"] = detail::bools_to_json(m.excluded);
    j["w"] = detail::vec_to_json(m.w);
    ojson gs = ojson::array();
    for (const auto& g : m.groupings) {
        ojson o;
        o["name"] = g.name;
        o["hypershrinkage"] = std::string(to_string(g.kind));
        o["lambda"] = g.lambda;
        o["refit_lambda"] = g.refit_lambda ? ojson(*g.refit_lambda) : ojson(nullptr);
        o["w"] = g.w;
        o["group_names"] = g.group_names;
        ojson members = ojson::array();
        for (const auto& grp : g.groups) {
            ojson a = ojson::array();
            for (auto k : grp) a.push_back(k + 1);
            members.push_back(a);
        }
        o["groups"] = members;
        o["gamma"] = detail::vec_to_json(g.gamma);
        o["gamma_raw"] = detail::vec_to_json(g.gamma_raw);
        o["selected"] = detail::bools_to_json(g.selected);
        if (g.tree) {
            ojson par = ojson::array();
            for (const auto& p : g.tree->parent) par.push_back(p ? ojson(*p) : ojson(nullptr));
            o["tree"] = {{"parent", par}, {"detached", g.tree->detached}};
        }
        gs.push_back(o);
    }
    j["groupings"] = gs;
    if (m.baseline) j["baseline_hazard"] = {{"times", m.baseline->times}, {"cumhaz", m.baseline->cumhaz}};
    j["diagnostics"] = {{"converged", m.diagnostics.converged},
                        {"iterations", m.diagnostics.iterations},
                        {"deviance", m.diagnostics.deviance},
                        {"separation", m.diagnostics.separation},
                        {"weights_rank_deficient", m.diagnostics.weights_rank_deficient}};
    return j;
}

inline FittedModel model_from_json(const nlohmann::ordered_json& j) {
    try {
        if (j.value("format", std::string{}) != model_format_version)
            throw InputError("unsupported model format '" + j.value("format", std::string{"<missing>"}) + "'");
        FittedModel m;
        m.family = family_from_string(j.at("family").get<std::string>());
        m.covariate_names = j.at("covariate_names").get<std::vector<std::string>>();
        m.tau_global = j.at("tau_global").get<double>();
        if (!j.at("sigma2").is_null()) m.sigma2 = j.at("sigma2").get<double>();
        m.has_intercept = !j.at("intercept").is_null();
        m.intercept = m.has_intercept ? j.at("intercept").get<double>() : 0.0;
        m.beta = detail::vec_from_json(j.at("beta"));
        m.beta_unpenalized = detail::vec_from_json(j.at("beta_unpenalized"));
        m.tau_local = detail::vec_from_json(j.at("tau_local"));
        m.excluded = detail::bools_from_json(j.at("excluded"));
        m.w = detail::vec_from_json(j.at("w"));
        if (j.at("p").get<std::size_t>() != m.p()) throw InputError("model file: p does not match beta");
        for (const auto& o : j.at("groupings")) {
            FittedGrouping g;
            g.name = o.at("name").get<std::string>();
            g.kind = hyper_kind_from_string(o.at("hypershrinkage").get<std::string>());
            g.lambda = o.at("lambda").get<double>();
            if (!o.at("refit_lambda").is_null()) g.refit_lambda = o.at("refit_lambda").get<double>();
            g.w = o.at("w").get<double>();
            g.group_names = o.at("group_names").get<std::vector<std::string>>();
            for (const auto& a : o.at("groups")) {
                IndexSet grp;
                for (const auto& k : a) grp.push_back(k.get<std::size_t>() - 1);
                g.groups.push_back(std::move(grp));
            }
            g.gamma = detail::vec_from_json(o.at("gamma"));
            g.gamma_raw = detail::vec_from_json(o.at("gamma_raw"));
            g.selected = detail::bools_from_json(o.at("selected"));
            if (o.contains("tree")) {
                HierTree t;
                for (const auto& p : o.at("tree").at("parent"))
                    t.parent.push_back(p.is_null() ? std::nullopt : std::optional<std::size_t>(p.get<std::size_t>()));
                t.detached = o.at("tree").at("detached").get<IndexSet>();
                // Validation fills in root and leaves.
                g.tree = Grouping(m.p(), g.groups, g.name, g.group_names, t).tree();
            }
            m.groupings.push_back(std::move(g));
        }
        if (j.contains("baseline_hazard"))
            m.baseline = BaselineHazard{j.at("baseline_hazard").at("times").get<std::vector<double>>(),
                                        j.at("baseline_hazard").at("cumhaz").get<std::vector<double>>()};
        const auto& d = j.at("diagnostics");
        m.diagnostics.converged = d.at("converged").get<bool>();
        m.diagnostics.iterations = d.at("iterations").get<int>();
        m.diagnostics.deviance = d.at("deviance").get<double>();
        m.diagnostics.separation = d.at("separation").get<bool>();
        m.diagnostics.weights_rank_deficient = d.at("weights_rank_deficient").get<bool>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("malformed model file: ") + e.what());
    }
}

inline void save_model(const FittedModel& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write model file '" + path + "'");
    out << model_to_json(m).dump(2) << '\n';
}

inline FittedModel load_model(const std::string& path) {
    if (!std::filesystem::exists(path)) throw InputError("model file '" + path + "' does not exist");
    std::ifstream in(path);
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw InputError("model file '" + path + "' is not valid JSON: " + e.what());
    }
    return model_from_json(j);
}

} // namespace ecpc
