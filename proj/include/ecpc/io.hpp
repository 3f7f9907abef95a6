#pragma once

#include "ecpc/codata.hpp"
#include "ecpc/core.hpp"
#include "ecpc/response.hpp"

#include <json.hpp>

#include <cerrno>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace ecpc::io {

struct Table {
    std::vector<std::string> header;
    Matrix data;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    s = s.substr(first, last - first + 1);
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return s;
}

inline std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(trim(cell));
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::ifstream open(const std::string& path, const std::string& what) {
    if (!std::filesystem::exists(path)) throw InputError(what + " file '" + path + "' does not exist");
    std::ifstream in(path);
    if (!in) throw InputError("cannot open " + what + " file '" + path + "'");
    return in;
}

} // namespace detail

/// Numeric CSV with a header row. Non-finite cells are rejected with their
/// coordinates unless `allow_nan` (then NA/NaN/empty cells read as NaN).
inline Table read_csv(const std::string& path, const std::string& what, bool allow_nan = false) {
    auto in = detail::open(path, what);
    Table t;
    std::string line;
    while (std::getline(in, line) && detail::trim(line).empty()) {
    }
    if (detail::trim(line).empty()) throw InputError(what + " file '" + path + "' is empty");
    t.header = detail::split_line(line);
    const auto cols = t.header.size();
    std::vector<double> values;
    std::size_t rows = 0, line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        const auto cells = detail::split_line(line);
        if (cells.size() != cols)
            throw InputError(what + " file '" + path + "' line " + std::to_string(line_no) + ": expected " + std::to_string(cols) +
                             " columns, found " + std::to_string(cells.size()));
        for (std::size_t c = 0; c < cols; ++c) {
            const std::string& cell = cells[c];
            const bool missing = cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan";
            double v = std::numeric_limits<double>::quiet_NaN();
            if (!missing) {
                char* end = nullptr;
                errno = 0;
                v = std::strtod(cell.c_str(), &end);
                if (end == cell.c_str() || *end != '\0')
                    throw InputError(what + " file '" + path + "' row " + std::to_string(rows + 1) + ", column '" + t.header[c] +
                                     "': cannot parse '" + cell + "'");
            }
            if (!std::isfinite(v) && !(allow_nan && std::isnan(v)))
                throw InputError(what + " file '" + path + "' row " + std::to_string(rows + 1) + ", column " + std::to_string(c + 1) + " ('" +
                                 t.header[c] + "'): non-finite value");
            values.push_back(v);
        }
        ++rows;
    }
    t.data.resize(static_cast<Index>(rows), static_cast<Index>(cols));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) t.data(static_cast<Index>(r), static_cast<Index>(c)) = values[r * cols + c];
    return t;
}

/// One column for gaussian/binomial, two (time, status) for cox.
inline Response read_response(const std::string& path, Family family, std::optional<double> sigma2 = std::nullopt) {
    const Table t = read_csv(path, "response");
    const Index need = family == Family::cox ? 2 : 1;
    if (t.data.cols() != need)
        throw InputError("response file '" + path + "' must have " + std::to_string(need) + " column(s) for family " +
                         std::string(to_string(family)));
    switch (family) {
    case Family::gaussian: return Response::gaussian(t.data.col(0), sigma2);
    case Family::binomial: return Response::binomial(t.data.col(0));
    case Family::cox: return Response::cox(t.data.col(0), t.data.col(1));
    }
    throw InputError("unknown family");
}

/// Grouping from JSON: {"group name": [1-based indices], ..., "parent": {"child": "parent"}}.
inline Grouping grouping_from_json(const nlohmann::ordered_json& j, std::size_t p, const std::string& name) {
    if (!j.is_object()) throw InputError("grouping '" + name + "' must be a JSON object");
    std::vector<std::string> names;
    std::vector<IndexSet> groups;
    std::map<std::string, std::size_t> index;
    for (const auto& [key, value] : j.items()) {
        if (key == "parent") continue;
        if (!value.is_array()) throw InputError("group '" + key + "' of grouping '" + name + "' must be an array of indices");
        IndexSet members;
        for (const auto& v : value) {
            if (!v.is_number_integer()) throw InputError("group '" + key + "' of grouping '" + name + "' has a non-integer index");
            const auto k = v.get<long long>();
            if (k < 1 || static_cast<std::size_t>(k) > p)
                throw InputError("group '" + key + "' of grouping '" + name + "' has index " + std::to_string(k) + " outside 1.." + std::to_string(p));
            members.push_back(static_cast<std::size_t>(k - 1));
        }
        index[key] = names.size();
        names.push_back(key);
        groups.push_back(std::move(members));
    }
    std::optional<HierTree> tree;
    if (j.contains("parent")) {
        const auto& par = j.at("parent");
        if (!par.is_object()) throw InputError("'parent' of grouping '" + name + "' must map child names to parent names");
        HierTree t;
        t.parent.assign(names.size(), std::nullopt);
        for (const auto& [child, parent] : par.items()) {
            if (!index.contains(child)) throw InputError("'parent' names unknown group '" + child + "'");
            if (!parent.is_string() || !index.contains(parent.get<std::string>()))
                throw InputError("parent of group '" + child + "' is not a known group name");
            t.parent[index[child]] = index[parent.get<std::string>()];
        }
        tree = std::move(t);
    }
    return Grouping(p, std::move(groups), name, std::move(names), std::move(tree));
}

struct CoDataReadOptions {
    HierarchyOptions hierarchy;
};

/// Grouping from a .json grouping file or a single-column .csv of continuous
/// co-data (discretised into a hierarchy).
inline Grouping read_codata(const std::string& path, std::size_t p, const CoDataReadOptions& opts = {}) {
    const std::filesystem::path fp(path);
    const std::string name = fp.stem().string();
    if (fp.extension() == ".json") {
        auto in = detail::open(path, "co-data");
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw InputError("co-data file '" + path + "' is not valid JSON: " + e.what());
        }
        return grouping_from_json(j, p, name);
    }
    const Table t = read_csv(path, "co-data", true);
    if (t.data.cols() != 1) throw InputError("continuous co-data file '" + path + "' must have one column");
    if (static_cast<std::size_t>(t.data.rows()) != p)
        throw InputError("continuous co-data file '" + path + "' has " + std::to_string(t.data.rows()) + " values for " + std::to_string(p) +
                         " covariates");
    HierarchyOptions ho = opts.hierarchy;
    ho.name = name;
    const std::vector<double> values(t.data.data(), t.data.data() + t.data.rows());
    return build_hierarchy_from_continuous(values, ho);
}

/// Shortest text that reads back to the same double.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "NA";
    char buf[32];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

/// Writes a CSV table; cells are already formatted.
inline void write_csv(const std::string& path, const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path + "'");
    auto cell_text = [](const std::string& c) {
        if (c.find_first_of(",\"\n") == std::string::npos) return c;
        std::string q = "\"";
        for (char ch : c) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
        return q + "\"";
    };
    auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cell_text(cells[i]);
        out << '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    if (!out) throw InputError("failed writing '" + path + "'");
}

} // namespace ecpc::io
