#pragma once

#include "ecpc/core.hpp"

#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <utility>

namespace ecpc {

/// Hierarchy over the groups of a grouping: node g is group g.
///
/// Groups listed in `detached` sit outside the tree (for instance the group
/// of covariates with missing co-data); they have neither parent nor children.
struct HierTree {
    std::vector<std::optional<std::size_t>> parent;
    std::size_t root = 0;
    IndexSet detached;
    /// Leaves in depth-first order.
    IndexSet leaves;

    [[nodiscard]] std::size_t size() const noexcept { return parent.size(); }

    [[nodiscard]] bool is_detached(std::size_t g) const {
        return std::find(detached.begin(), detached.end(), g) != detached.end();
    }

    [[nodiscard]] IndexSet children(std::size_t g) const {
        IndexSet out;
        for (std::size_t c = 0; c < parent.size(); ++c)
            if (parent[c] && *parent[c] == g) out.push_back(c);
        return out;
    }

    /// Nodes from the root down to g, both included.
    [[nodiscard]] IndexSet path_from_root(std::size_t g) const {
        IndexSet path{g};
        for (auto cur = parent[g]; cur; cur = parent[*cur]) path.push_back(*cur);
        std::reverse(path.begin(), path.end());
        return path;
    }

    [[nodiscard]] bool is_ancestor_closed(const std::vector<bool>& selected) const {
        for (std::size_t g = 0; g < parent.size(); ++g)
            if (selected[g] && parent[g] && !selected[*parent[g]]) return false;
        return true;
    }
};

/// A collection of covariate groups covering {0..p-1}. Indices are 0-based and
/// stored sorted; the file formats use 1-based indices.
class Grouping {
public:
    Grouping() = default;

    Grouping(std::size_t p, std::vector<IndexSet> groups, std::string name = {},
             std::vector<std::string> group_names = {}, std::optional<HierTree> tree = std::nullopt)
        : p_(p), groups_(std::move(groups)), name_(std::move(name)), group_names_(std::move(group_names)),
          tree_(std::move(tree)) {
        if (groups_.empty()) throw InputError("grouping '" + name_ + "' has no groups");
        if (group_names_.empty()) {
            for (std::size_t g = 0; g < groups_.size(); ++g) group_names_.push_back("group" + std::to_string(g + 1));
        }
        if (group_names_.size() != groups_.size())
            throw InputError("grouping '" + name_ + "': group name count does not match group count");
        std::vector<bool> covered(p_, false);
        for (std::size_t g = 0; g < groups_.size(); ++g) {
            auto& grp = groups_[g];
            if (grp.empty()) throw InputError("grouping '" + name_ + "': group '" + group_names_[g] + "' is empty");
            std::sort(grp.begin(), grp.end());
            if (std::adjacent_find(grp.begin(), grp.end()) != grp.end())
                throw InputError("grouping '" + name_ + "': group '" + group_names_[g] + "' has duplicate indices");
            if (grp.back() >= p_)
                throw InputError("grouping '" + name_ + "': group '" + group_names_[g] + "' has index " +
                                 std::to_string(grp.back() + 1) + " beyond p=" + std::to_string(p_));
            for (auto k : grp) covered[k] = true;
        }
        for (std::size_t k = 0; k < p_; ++k)
            if (!covered[k]) throw CoverageError(k, name_);
        if (tree_) validate_tree();
    }

    [[nodiscard]] std::size_t p() const noexcept { return p_; }
    [[nodiscard]] std::size_t size() const noexcept { return groups_.size(); }
    [[nodiscard]] const IndexSet& group(std::size_t g) const { return groups_[g]; }
    [[nodiscard]] const std::vector<IndexSet>& groups() const noexcept { return groups_; }
    [[nodiscard]] const std::string& name() const noexcept { return name_; }
    [[nodiscard]] const std::string& group_name(std::size_t g) const { return group_names_[g]; }
    [[nodiscard]] const std::vector<std::string>& group_names() const noexcept { return group_names_; }
    [[nodiscard]] const std::optional<HierTree>& tree() const noexcept { return tree_; }

    [[nodiscard]] Vector group_sizes() const {
        Vector s(static_cast<Index>(groups_.size()));
        for (std::size_t g = 0; g < groups_.size(); ++g) s[static_cast<Index>(g)] = static_cast<double>(groups_[g].size());
        return s;
    }

    [[nodiscard]] bool is_disjoint() const {
        std::size_t total = 0;
        for (const auto& grp : groups_) total += grp.size();
        return total == p_;
    }

private:
    void validate_tree() {
        auto& t = *tree_;
        if (t.parent.size() != groups_.size())
            throw InputError("grouping '" + name_ + "': hierarchy size does not match group count");
        std::size_t roots = 0;
        for (std::size_t g = 0; g < t.parent.size(); ++g) {
            if (t.is_detached(g)) {
                if (t.parent[g] || !t.children(g).empty())
                    throw InputError("grouping '" + name_ + "': detached group '" + group_names_[g] + "' is linked in the hierarchy");
                continue;
            }
            if (!t.parent[g]) {
                ++roots;
                t.root = g;
            } else if (*t.parent[g] >= groups_.size() || *t.parent[g] == g) {
                throw InputError("grouping '" + name_ + "': invalid parent for group '" + group_names_[g] + "'");
            }
        }
        if (roots != 1)
            throw InputError("grouping '" + name_ + "': hierarchy must have exactly one root, found " + std::to_string(roots));
        // Cycle check: every node must reach the root.
        for (std::size_t g = 0; g < t.parent.size(); ++g) {
            if (t.is_detached(g)) continue;
            std::size_t steps = 0;
            for (auto cur = t.parent[g]; cur; cur = t.parent[*cur])
                if (++steps > t.parent.size()) throw InputError("grouping '" + name_ + "': hierarchy has a cycle");
        }
        for (std::size_t g = 0; g < t.parent.size(); ++g) {
            if (t.is_detached(g)) continue;
            const auto kids = t.children(g);
            if (kids.empty()) continue;
            IndexSet merged;
            for (auto c : kids) merged.insert(merged.end(), groups_[c].begin(), groups_[c].end());
            std::sort(merged.begin(), merged.end());
            if (std::adjacent_find(merged.begin(), merged.end()) != merged.end() || merged != groups_[g])
                throw InputError("grouping '" + name_ + "': children of '" + group_names_[g] +
                                 "' do not partition its members");
        }
        t.leaves.clear();
        std::vector<std::size_t> stack{t.root};
        while (!stack.empty()) {
            const auto g = stack.back();
            stack.pop_back();
            auto kids = t.children(g);
            if (kids.empty()) {
                t.leaves.push_back(g);
                continue;
            }
            for (auto it = kids.rbegin(); it != kids.rend(); ++it) stack.push_back(*it);
        }
    }

    std::size_t p_ = 0;
    std::vector<IndexSet> groups_;
    std::string name_;
    std::vector<std::string> group_names_;
    std::optional<HierTree> tree_;
};

/// Sparse p x G co-data matrix: entry (k, g) = 1/|I_k| when covariate k is in
/// group g, where I_k is the set of (active) groups containing k.
class CoDataMatrix {
public:
    struct Entry {
        std::size_t group;
        double value;
    };

    CoDataMatrix(std::size_t p, std::size_t G) : rows_(p), counts_(p, 0), G_(G) {}

    [[nodiscard]] std::size_t p() const noexcept { return rows_.size(); }
    [[nodiscard]] std::size_t groups() const noexcept { return G_; }
    [[nodiscard]] const std::vector<Entry>& row(std::size_t k) const { return rows_[k]; }
    [[nodiscard]] std::size_t membership_count(std::size_t k) const { return counts_[k]; }

    [[nodiscard]] Matrix dense() const {
        Matrix Z = Matrix::Zero(static_cast<Index>(p()), static_cast<Index>(G_));
        for (std::size_t k = 0; k < rows_.size(); ++k)
            for (const auto& e : rows_[k]) Z(static_cast<Index>(k), static_cast<Index>(e.group)) = e.value;
        return Z;
    }

    /// Z * gamma.
    [[nodiscard]] Vector apply(const Vector& gamma) const {
        Vector out = Vector::Zero(static_cast<Index>(p()));
        for (std::size_t k = 0; k < rows_.size(); ++k)
            for (const auto& e : rows_[k]) out[static_cast<Index>(k)] += e.value * gamma[static_cast<Index>(e.group)];
        return out;
    }

    static CoDataMatrix from_grouping(const Grouping& grouping, const std::vector<bool>* active) {
        CoDataMatrix Z(grouping.p(), grouping.size());
        for (std::size_t g = 0; g < grouping.size(); ++g) {
            if (active && !(*active)[g]) continue;
            for (auto k : grouping.group(g)) Z.rows_[k].push_back({g, 0.0});
        }
        for (std::size_t k = 0; k < grouping.p(); ++k) {
            auto& row = Z.rows_[k];
            Z.counts_[k] = row.size();
            if (row.empty()) {
                if (!active) throw CoverageError(k, grouping.name());
                continue;
            }
            const double w = 1.0 / static_cast<double>(row.size());
            for (auto& e : row) e.value = w;
        }
        return Z;
    }

private:
    std::vector<std::vector<Entry>> rows_;
    std::vector<std::size_t> counts_;
    std::size_t G_;
};

/// Builds Z for a grouping. With `active`, only the flagged groups count towards
/// the averaging; covariates outside every active group get an all-zero row.
inline CoDataMatrix build_codata_matrix(const Grouping& grouping) {
    return CoDataMatrix::from_grouping(grouping, nullptr);
}

inline CoDataMatrix build_codata_matrix(const Grouping& grouping, const std::vector<bool>& active) {
    return CoDataMatrix::from_grouping(grouping, &active);
}

struct HierarchyOptions {
    std::size_t min_group_size = 1;
    /// Split the root at this value first and only refine the low side.
    std::optional<double> initial_threshold;
    /// Refine only the lower child at every split.
    bool recurse_low_only = false;
    std::string name = "continuous";
};

/// Adaptive discretisation of continuous co-data: the root holds every covariate
/// ordered by value; nodes are split at the median into ceil/floor halves while
/// the smaller half keeps at least `min_group_size` members. Ties are ordered by
/// covariate index. NaN values form a separate detached group.
inline Grouping build_hierarchy_from_continuous(std::span<const double> values, const HierarchyOptions& opts = {}) {
    if (values.empty()) throw InputError("continuous co-data is empty");
    if (opts.min_group_size < 1) throw InputError("min_group_size must be at least 1");
    IndexSet order, missing;
    for (std::size_t k = 0; k < values.size(); ++k) (std::isnan(values[k]) ? missing : order).push_back(k);
    if (order.empty()) throw InputError("continuous co-data has no observed values");
    if (opts.min_group_size > order.size())
        throw InputError("min_group_size " + std::to_string(opts.min_group_size) + " exceeds the number of covariates " +
                         std::to_string(order.size()));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });

    struct Node {
        std::size_t lo, hi;
        std::optional<std::size_t> parent;
        bool refine;
    };
    std::vector<Node> nodes{{0, order.size(), std::nullopt, true}};
    std::vector<std::string> names{"root"};

    auto can_split = [&](std::size_t size) { return size >= 2 && size / 2 >= opts.min_group_size; };

    std::size_t head = 0;
    if (opts.initial_threshold) {
        const double t = *opts.initial_threshold;
        const auto cut = static_cast<std::size_t>(
            std::count_if(order.begin(), order.end(), [&](std::size_t k) { return values[k] < t; }));
        if (cut == 0 || cut == order.size())
            throw InputError("threshold " + std::to_string(t) + " does not split the co-data into two non-empty groups");
        nodes.push_back({0, cut, 0, true});
        nodes.push_back({cut, order.size(), 0, false});
        names.push_back("root.low");
        names.push_back("root.high");
        head = 1;
    }
    for (; head < nodes.size(); ++head) {
        const Node node = nodes[head];
        if (!node.refine) continue;
        const std::size_t size = node.hi - node.lo;
        if (!can_split(size)) continue;
        const std::size_t mid = node.lo + (size + 1) / 2;
        nodes.push_back({node.lo, mid, head, true});
        nodes.push_back({mid, node.hi, head, !opts.recurse_low_only});
        names.push_back(names[head] + ".1");
        names.push_back(names[head] + ".2");
    }

    std::vector<IndexSet> groups;
    HierTree tree;
    for (const auto& node : nodes) {
        groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(node.lo),
                            order.begin() + static_cast<std::ptrdiff_t>(node.hi));
        tree.parent.push_back(node.parent);
    }
    if (!missing.empty()) {
        groups.push_back(missing);
        names.push_back("missing");
        tree.parent.push_back(std::nullopt);
        tree.detached.push_back(groups.size() - 1);
    }
    return Grouping(values.size(), std::move(groups), opts.name, std::move(names), std::move(tree));
}

/// Random in/out halves of every group, parallel to the source grouping.
struct GroupSplit {
    std::vector<IndexSet> in_groups;
    std::vector<IndexSet> out_groups;
    std::uint64_t seed = 0;
};

namespace detail {

/// Shuffles each member set and cuts it after ceil(size/2) members.
inline GroupSplit split_sets(const std::vector<IndexSet>& sets, std::uint64_t seed) {
    GroupSplit split;
    split.seed = seed;
    std::mt19937_64 rng(seed);
    for (const auto& set : sets) {
        IndexSet members = set;
        std::shuffle(members.begin(), members.end(), rng);
        const auto cut = static_cast<std::ptrdiff_t>((members.size() + 1) / 2);
        IndexSet in(members.begin(), members.begin() + cut), out(members.begin() + cut, members.end());
        std::sort(in.begin(), in.end());
        std::sort(out.begin(), out.end());
        split.in_groups.push_back(std::move(in));
        split.out_groups.push_back(std::move(out));
    }
    return split;
}

} // namespace detail

/// Each group is shuffled and cut after ceil(size/2) members. Singleton groups
/// go wholly to the in-part.
inline GroupSplit split_groups_random(const Grouping& grouping, std::uint64_t seed) {
    for (std::size_t g = 0; g < grouping.size(); ++g)
        if (grouping.group(g).size() < 2)
            log::warn("group '" + grouping.group_name(g) + "' of grouping '" + grouping.name() +
                      "' has a single member; it is placed entirely in the in-part");
    return detail::split_sets(grouping.groups(), seed);
}

/// Degenerate split with the whole group in the in-part and an empty out-part.
inline GroupSplit full_split(const Grouping& grouping) {
    GroupSplit split;
    split.in_groups = grouping.groups();
    split.out_groups.assign(grouping.size(), {});
    return split;
}

} // namespace ecpc
