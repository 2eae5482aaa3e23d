#pragma once

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxengine/core.hpp"
#include "taxengine/rng.hpp"

namespace taxengine {

struct NodeId {
    std::uint32_t value = 0;

    friend constexpr auto operator<=>(NodeId, NodeId) = default;
};

inline constexpr std::string_view kPathSeparator = ">";
inline constexpr std::string_view kCanonicalJoin = " > ";
inline constexpr std::size_t kDefaultDepthLimit = 8;

namespace detail {

inline std::string_view trim(std::string_view s) noexcept
{
    constexpr std::string_view ws = " \t\r\n\f\v";
    const auto first = s.find_first_not_of(ws);
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(ws);
    return s.substr(first, last - first + 1);
}

} // namespace detail

struct CategoryPath {
    std::vector<std::string> segments;

    std::size_t depth() const noexcept { return segments.size(); }
    bool empty() const noexcept { return segments.empty(); }

    std::string join(std::string_view sep = kCanonicalJoin) const
    {
        std::string out;
        for (std::size_t i = 0; i < segments.size(); ++i) {
            if (i > 0) {
                out += sep;
            }
            out += segments[i];
        }
        return out;
    }

    /// First `n` segments.
    CategoryPath prefix(std::size_t n) const
    {
        CategoryPath p;
        p.segments.assign(segments.begin(), segments.begin() + static_cast<std::ptrdiff_t>(std::min(n, segments.size())));
        return p;
    }

    friend bool operator==(const CategoryPath&, const CategoryPath&) = default;
    friend auto operator<=>(const CategoryPath&, const CategoryPath&) = default;
};

/// Splits `raw` on `separator` and trims every component.
inline CategoryPath parse_path(std::string_view raw, std::string_view separator = kPathSeparator)
{
    const auto body = detail::trim(raw);
    if (body.empty()) {
        fail(Errc::EmptyPath, "category path is empty");
    }
    if (separator.empty()) {
        fail(Errc::InvalidConfig, "path separator is empty");
    }
    CategoryPath path;
    std::size_t start = 0;
    while (true) {
        const auto pos = body.find(separator, start);
        const auto piece = detail::trim(body.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (piece.empty()) {
            fail(Errc::EmptySegment, "empty segment in path '" + std::string(raw) + "'");
        }
        path.segments.emplace_back(piece);
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + separator.size();
    }
    return path;
}

struct ChildMask {
    std::size_t level = 0; ///< level of the children the mask ranges over
    std::vector<std::uint8_t> bits;

    std::size_t popcount() const noexcept
    {
        return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
    }
};

/// Immutable rooted category tree. Levels are 1-based; every level >= 2 carries
/// a reserved STOP class at the last index of its class ordering.
class Taxonomy {
public:
    struct Node {
        std::string name;
        std::size_t level = 1;
        std::optional<NodeId> parent;
        std::vector<NodeId> children;
        bool terminal = false; ///< some recorded path ends here
        std::size_t position = 0; ///< index within its level's class ordering
    };

    Taxonomy() = default;

    static Taxonomy build(std::span<const CategoryPath> paths)
    {
        Trie trie;
        for (const auto& p : paths) {
            if (p.empty()) {
                fail(Errc::EmptyPath, "cannot build taxonomy from an empty path");
            }
            trie.insert(p);
        }
        Taxonomy tax;
        tax.append_trie(std::nullopt, trie);
        return tax;
    }

    static Taxonomy from_lines(std::istream& in)
    {
        std::vector<CategoryPath> paths;
        std::string line;
        while (std::getline(in, line)) {
            const auto body = detail::trim(line);
            if (body.empty() || body.front() == '#') {
                continue;
            }
            paths.push_back(parse_path(body));
        }
        return build(paths);
    }

    static Taxonomy load(const std::filesystem::path& file)
    {
        std::ifstream in(file);
        if (!in) {
            fail(Errc::Io, "cannot open taxonomy file " + file.string());
        }
        return from_lines(in);
    }

    /// One line per terminal node, in node-id order.
    std::vector<std::string> to_lines() const
    {
        std::vector<std::string> lines;
        for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].terminal) {
                lines.push_back(path_of(NodeId{i}).join());
            }
        }
        return lines;
    }

    void save(const std::filesystem::path& file) const
    {
        std::ofstream out(file, std::ios::binary);
        if (!out) {
            fail(Errc::Io, "cannot write taxonomy file " + file.string());
        }
        for (const auto& line : to_lines()) {
            out << line << '\n';
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    std::size_t max_depth() const noexcept { return levels_.size(); }

    const Node& node(NodeId id) const
    {
        check(id);
        return nodes_[id.value];
    }

    bool contains(NodeId id) const noexcept { return id.value < nodes_.size(); }

    std::span<const NodeId> roots() const noexcept
    {
        return levels_.empty() ? std::span<const NodeId>{} : std::span<const NodeId>(levels_.front());
    }

    /// Real (non-STOP) classes at `level`, in class-index order.
    std::span<const NodeId> level_nodes(std::size_t level) const
    {
        check_level(level);
        return levels_[level - 1];
    }

    static bool has_stop(std::size_t level) noexcept { return level >= 2; }

    /// Width of the class ordering at `level`, STOP included.
    std::size_t class_count(std::size_t level) const
    {
        return level_nodes(level).size() + (has_stop(level) ? 1 : 0);
    }

    std::size_t stop_index(std::size_t level) const
    {
        if (!has_stop(level)) {
            fail(Errc::IndexOutOfRange, "level 1 has no STOP class");
        }
        return level_nodes(level).size();
    }

    std::size_t position(NodeId id) const { return node(id).position; }

    NodeId at(std::size_t level, std::size_t position) const
    {
        const auto nodes = level_nodes(level);
        if (position >= nodes.size()) {
            fail(Errc::IndexOutOfRange, "class index " + std::to_string(position) + " at level " + std::to_string(level));
        }
        return nodes[position];
    }

    /// A node may end a path if a recorded path ends there or it has no children.
    bool is_valid_terminal(NodeId id) const
    {
        const auto& n = node(id);
        return n.terminal || n.children.empty();
    }

    ChildMask children_mask(NodeId parent) const
    {
        const auto& p = node(parent);
        if (p.level >= max_depth()) {
            fail(Errc::DepthExceeded, "node '" + p.name + "' is at the deepest level");
        }
        ChildMask mask;
        mask.level = p.level + 1;
        mask.bits.assign(class_count(mask.level), 0);
        for (const auto child : p.children) {
            mask.bits[nodes_[child.value].position] = 1;
        }
        mask.bits.back() = is_valid_terminal(parent) ? 1 : 0;
        return mask;
    }

    /// The node and all of its ancestors, root first.
    std::vector<NodeId> ancestor_closure(NodeId id) const
    {
        std::vector<NodeId> chain;
        std::optional<NodeId> cur = id;
        check(id);
        while (cur) {
            chain.push_back(*cur);
            cur = nodes_[cur->value].parent;
        }
        std::reverse(chain.begin(), chain.end());
        return chain;
    }

    std::optional<NodeId> child_named(std::optional<NodeId> parent, std::string_view name) const
    {
        const std::span<const NodeId> candidates = parent ? std::span<const NodeId>(node(*parent).children) : roots();
        for (const auto c : candidates) {
            if (nodes_[c.value].name == name) {
                return c;
            }
        }
        return std::nullopt;
    }

    /// Resolves a root-anchored chain of names; nullopt when any edge is missing.
    std::optional<NodeId> find(const CategoryPath& path) const
    {
        std::optional<NodeId> cur;
        for (const auto& seg : path.segments) {
            cur = child_named(cur, seg);
            if (!cur) {
                return std::nullopt;
            }
        }
        return cur;
    }

    bool validate_path(const CategoryPath& path) const
    {
        if (path.empty()) {
            return false;
        }
        const auto end = find(path);
        return end.has_value() && is_valid_terminal(*end);
    }

    CategoryPath path_of(NodeId id) const
    {
        CategoryPath p;
        for (const auto a : ancestor_closure(id)) {
            p.segments.push_back(nodes_[a.value].name);
        }
        return p;
    }

    std::vector<NodeId> leaves() const
    {
        std::vector<NodeId> out;
        for (std::uint32_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].children.empty()) {
                out.push_back(NodeId{i});
            }
        }
        return out;
    }

    /// Copy-on-write extension: `new_subtree` paths are relative to `parent`.
    /// Existing node ids and class indices never move; new classes are
    /// appended in front of each level's STOP slot.
    Taxonomy graft(NodeId parent, std::span<const CategoryPath> new_subtree,
                   std::size_t depth_limit = kDefaultDepthLimit) const
    {
        const auto& p = node(parent);
        Trie trie;
        for (const auto& rel : new_subtree) {
            if (rel.empty()) {
                fail(Errc::EmptyPath, "graft path is empty");
            }
            for (const auto& seg : rel.segments) {
                if (detail::trim(seg).empty() || detail::trim(seg).size() != seg.size()) {
                    fail(Errc::EmptySegment, "graft segment '" + seg + "' is empty or untrimmed");
                }
                if (seg.find(kPathSeparator) != std::string::npos) {
                    fail(Errc::InvalidPath, "graft segment '" + seg + "' contains the path separator");
                }
            }
            if (child_named(parent, rel.segments.front())) {
                fail(Errc::DuplicateChild, "'" + p.name + "' already has a child named '" + rel.segments.front() + "'");
            }
            if (p.level + rel.depth() > depth_limit) {
                fail(Errc::DepthExceeded, "graft would reach depth " + std::to_string(p.level + rel.depth()) +
                                              " (limit " + std::to_string(depth_limit) + ")");
            }
            trie.insert(rel);
        }
        Taxonomy out = *this;
        out.append_trie(parent, trie);
        return out;
    }

    /// Stable digest of the exact node table (ids, parents, names, terminals).
    std::uint64_t hash() const
    {
        std::ostringstream os;
        for (const auto& n : nodes_) {
            os << (n.parent ? static_cast<long long>(n.parent->value) : -1LL) << '\t' << n.name << '\t' << n.terminal << '\n';
        }
        return fnv1a(os.str());
    }

    nlohmann::json to_json() const
    {
        auto arr = nlohmann::json::array();
        for (const auto& n : nodes_) {
            arr.push_back({{"name", n.name},
                           {"parent", n.parent ? static_cast<long long>(n.parent->value) : -1LL},
                           {"terminal", n.terminal}});
        }
        return arr;
    }

    /// Inverse of to_json; ids and class indices are restored exactly.
    static Taxonomy from_json(const nlohmann::json& arr)
    {
        Taxonomy tax;
        for (const auto& entry : arr) {
            const auto parent = entry.at("parent").get<long long>();
            Node n;
            n.name = entry.at("name").get<std::string>();
            n.terminal = entry.at("terminal").get<bool>();
            const auto id = NodeId{static_cast<std::uint32_t>(tax.nodes_.size())};
            if (parent >= 0) {
                if (static_cast<std::size_t>(parent) >= tax.nodes_.size()) {
                    fail(Errc::UnknownNode, "parent id " + std::to_string(parent) + " precedes its definition");
                }
                n.parent = NodeId{static_cast<std::uint32_t>(parent)};
                n.level = tax.nodes_[n.parent->value].level + 1;
                tax.nodes_[n.parent->value].children.push_back(id);
            }
            tax.place(id, std::move(n));
        }
        return tax;
    }

    friend bool operator==(const Taxonomy& a, const Taxonomy& b) { return a.to_json() == b.to_json(); }

private:
    struct Trie {
        std::map<std::string, Trie> children;
        bool terminal = false;

        void insert(const CategoryPath& p)
        {
            Trie* cur = this;
            for (const auto& seg : p.segments) {
                cur = &cur->children[seg];
            }
            cur->terminal = true;
        }
    };

    void check(NodeId id) const
    {
        if (id.value >= nodes_.size()) {
            fail(Errc::UnknownNode, "node id " + std::to_string(id.value));
        }
    }

    void check_level(std::size_t level) const
    {
        if (level < 1 || level > levels_.size()) {
            fail(Errc::IndexOutOfRange, "level " + std::to_string(level) + " outside 1.." + std::to_string(levels_.size()));
        }
    }

    void place(NodeId id, Node n)
    {
        if (levels_.size() < n.level) {
            levels_.resize(n.level);
        }
        n.position = levels_[n.level - 1].size();
        levels_[n.level - 1].push_back(id);
        nodes_.push_back(std::move(n));
    }

    /// Breadth-first, lexicographic within each parent: deterministic ids.
    void append_trie(std::optional<NodeId> anchor, const Trie& trie)
    {
        std::vector<std::pair<std::optional<NodeId>, const Trie*>> frontier{{anchor, &trie}};
        while (!frontier.empty()) {
            std::vector<std::pair<std::optional<NodeId>, const Trie*>> next;
            for (const auto& [parent, sub] : frontier) {
                for (const auto& [name, child] : sub->children) {
                    std::optional<NodeId> existing = child_named(parent, name);
                    NodeId id;
                    if (existing) {
                        id = *existing;
                        nodes_[id.value].terminal = nodes_[id.value].terminal || child.terminal;
                    } else {
                        id = NodeId{static_cast<std::uint32_t>(nodes_.size())};
                        Node n;
                        n.name = name;
                        n.terminal = child.terminal;
                        n.parent = parent;
                        n.level = parent ? nodes_[parent->value].level + 1 : 1;
                        if (parent) {
                            nodes_[parent->value].children.push_back(id);
                        }
                        place(id, std::move(n));
                    }
                    next.emplace_back(id, &child);
                }
            }
            frontier = std::move(next);
        }
    }

    std::vector<Node> nodes_;
    std::vector<std::vector<NodeId>> levels_;
};

} // namespace taxengine
