#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "taxengine/bundle.hpp"
#include "taxengine/core.hpp"
#include "taxengine/log.hpp"
#include "taxengine/pca.hpp"
#include "taxengine/rng.hpp"
#include "taxengine/taxonomy.hpp"

namespace taxengine {

namespace detail {

inline Matrix take_rows(const Matrix& X, std::span<const std::size_t> rows)
{
    Matrix out(static_cast<Eigen::Index>(rows.size()), X.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        out.row(static_cast<Eigen::Index>(r)) = X.row(static_cast<Eigen::Index>(rows[r]));
    }
    return out;
}

inline double lower_median(std::vector<double> v)
{
    std::sort(v.begin(), v.end());
    return v[(v.size() - 1) / 2];
}

} // namespace detail

// ---------------------------------------------------------------------------
// K-Means

struct KMeansResult {
    std::vector<std::size_t> assignment;
    Matrix centroids;                   ///< k x dim
    std::vector<double> inertia_history;///< one entry per assignment step
    std::size_t iterations = 0;
    bool converged = false;

    double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
};

inline KMeansResult kmeans(const Matrix& X, std::size_t k, std::uint64_t seed, std::size_t max_iter = 100)
{
    const auto n = static_cast<std::size_t>(X.rows());
    if (n == 0) {
        fail(Errc::EmptyInput, "kmeans on an empty matrix");
    }
    if (k < 1 || k > n) {
        fail(Errc::InvalidConfig, "kmeans needs 1 <= k <= n, got k=" + std::to_string(k) + " n=" + std::to_string(n));
    }
    CounterRng rng(seed, fnv1a("kmeans++"));
    KMeansResult res;
    res.centroids.resize(static_cast<Eigen::Index>(k), X.cols());
    std::vector<char> chosen(n, 0);
    std::size_t first = static_cast<std::size_t>(rng.below(n));
    chosen[first] = 1;
    res.centroids.row(0) = X.row(static_cast<Eigen::Index>(first));
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) {
        d2[i] = (X.row(static_cast<Eigen::Index>(i)) - res.centroids.row(0)).squaredNorm();
    }
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            total += chosen[i] ? 0.0 : d2[i];
        }
        std::size_t pick = n;
        if (total > 0.0) {
            const double r = rng.uniform() * total;
            double cum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (chosen[i] || d2[i] == 0.0) {
                    continue;
                }
                cum += d2[i];
                pick = i;
                if (cum > r) {
                    break;
                }
            }
        } else {
            std::vector<std::size_t> rest;
            for (std::size_t i = 0; i < n; ++i) {
                if (!chosen[i]) {
                    rest.push_back(i);
                }
            }
            pick = rest[static_cast<std::size_t>(rng.below(rest.size()))];
        }
        chosen[pick] = 1;
        res.centroids.row(static_cast<Eigen::Index>(c)) = X.row(static_cast<Eigen::Index>(pick));
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], (X.row(static_cast<Eigen::Index>(i)) - res.centroids.row(static_cast<Eigen::Index>(c))).squaredNorm());
        }
    }

    std::vector<std::size_t> prev;
    for (std::size_t it = 0; it < max_iter; ++it) {
        res.assignment.assign(n, 0);
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < k; ++c) {
                const double d = (X.row(static_cast<Eigen::Index>(i)) - res.centroids.row(static_cast<Eigen::Index>(c))).squaredNorm();
                if (d < best) {
                    best = d;
                    res.assignment[i] = c;
                }
            }
            inertia += best;
        }
        res.inertia_history.push_back(inertia);
        ++res.iterations;
        if (res.assignment == prev) {
            res.converged = true;
            break;
        }
        prev = res.assignment;
        Matrix sums = Matrix::Zero(static_cast<Eigen::Index>(k), X.cols());
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sums.row(static_cast<Eigen::Index>(res.assignment[i])) += X.row(static_cast<Eigen::Index>(i));
            ++counts[res.assignment[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] > 0) {
                res.centroids.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
            }
        }
    }
    return res;
}

// ---------------------------------------------------------------------------
// Filtering

/// Clusters whose mean member-to-centroid distance exceeds the threshold are
/// discarded. Without an explicit threshold it is median + mad_multiplier *
/// MAD over the clusters with at least two members (lower median for even
/// counts), and singleton clusters are discarded as isolated records.
struct KeepRule {
    double mad_multiplier = 1.0;
    std::optional<double> threshold;
};

inline constexpr std::size_t kDefaultFilterClusters = 8;

struct FilterCluster {
    std::size_t size = 0;
    double mean_distance = 0.0;
    bool kept = false;
};

struct FilterReport {
    std::vector<FilterCluster> clusters; ///< non-empty K-Means clusters
    std::vector<std::size_t> kept;       ///< row indices, ascending
    std::vector<std::size_t> discarded;
    double threshold = 0.0;
};

inline FilterReport filter_records(const Matrix& X, std::size_t k, std::uint64_t seed, const KeepRule& rule = {},
                                   std::size_t max_iter = 100)
{
    const auto km = kmeans(X, k, seed, max_iter);
    std::vector<double> dist_sum(k, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < km.assignment.size(); ++i) {
        const auto c = km.assignment[i];
        dist_sum[c] += (X.row(static_cast<Eigen::Index>(i)) - km.centroids.row(static_cast<Eigen::Index>(c))).norm();
        ++counts[c];
    }
    FilterReport rep;
    std::vector<std::size_t> slot(k, 0);
    std::vector<double> dispersion;
    for (std::size_t c = 0; c < k; ++c) {
        if (counts[c] == 0) {
            continue;
        }
        slot[c] = rep.clusters.size();
        rep.clusters.push_back({counts[c], dist_sum[c] / static_cast<double>(counts[c]), false});
        if (counts[c] > 1) {
            dispersion.push_back(rep.clusters.back().mean_distance);
        }
    }
    const bool drop_singletons = !rule.threshold && !dispersion.empty();
    if (dispersion.empty()) {
        dispersion.push_back(0.0);
    }
    if (rule.threshold) {
        rep.threshold = *rule.threshold;
    } else {
        const double med = detail::lower_median(dispersion);
        std::vector<double> dev;
        for (const auto d : dispersion) {
            dev.push_back(std::abs(d - med));
        }
        rep.threshold = med + rule.mad_multiplier * detail::lower_median(dev);
    }
    for (auto& c : rep.clusters) {
        c.kept = !(c.mean_distance > rep.threshold) && !(drop_singletons && c.size == 1);
    }
    for (std::size_t i = 0; i < km.assignment.size(); ++i) {
        (rep.clusters[slot[km.assignment[i]]].kept ? rep.kept : rep.discarded).push_back(i);
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Agglomerative clustering

enum class Linkage { Ward, Average, Complete };

inline std::string_view to_string(Linkage l) noexcept
{
    switch (l) {
    case Linkage::Ward: return "ward";
    case Linkage::Average: return "average";
    case Linkage::Complete: return "complete";
    }
    return "ward";
}

inline Linkage parse_linkage(std::string_view s)
{
    if (s == "ward") return Linkage::Ward;
    if (s == "average") return Linkage::Average;
    if (s == "complete") return Linkage::Complete;
    fail(Errc::InvalidConfig, "unknown linkage '" + std::string(s) + "' (ward|average|complete)");
}

/// One dendrogram step. Ids below n are points; id n + t is the cluster formed
/// at step t. Ward heights are sqrt of the Lance-Williams squared distance.
struct Merge {
    std::size_t a = 0;
    std::size_t b = 0;
    double height = 0.0;
    std::size_t size = 0;
};

/// Exactly one of `count` or `threshold` is set.
struct StopCriterion {
    std::optional<std::size_t> count;
    std::optional<double> threshold;

    static StopCriterion clusters(std::size_t c) { return {c, std::nullopt}; }
    static StopCriterion distance(double t) { return {std::nullopt, t}; }

    void check() const
    {
        if (count.has_value() == threshold.has_value()) {
            fail(Errc::InvalidConfig, "stop criterion needs exactly one of count or threshold");
        }
        if (count && *count < 1) {
            fail(Errc::InvalidConfig, "stop count must be >= 1");
        }
    }
};

struct AgglomerativeResult {
    std::vector<std::size_t> assignment; ///< cluster numbers in order of first member
    std::size_t clusters = 0;
    std::vector<Merge> merges;
};

class CondensedDistances {
public:
    explicit CondensedDistances(std::size_t n) : n_(n), d_(n * (n - 1) / 2, 0.0) {}
    double& operator()(std::size_t i, std::size_t j) { return d_[index(i, j)]; }
    double operator()(std::size_t i, std::size_t j) const { return d_[index(i, j)]; }

private:
    std::size_t index(std::size_t i, std::size_t j) const
    {
        if (i > j) {
            std::swap(i, j);
        }
        return i * n_ - i * (i + 1) / 2 + (j - i - 1);
    }
    std::size_t n_;
    std::vector<double> d_;
};

/// Exact global-minimum merging with a per-row nearest-neighbour cache; ties
/// go to the smallest (i, j) slot pair.
inline std::vector<Merge> linkage_tree(const Matrix& X, Linkage linkage)
{
    const auto n = static_cast<std::size_t>(X.rows());
    if (n < 2) {
        fail(Errc::EmptyInput, "agglomerative clustering needs at least 2 points");
    }
    CondensedDistances D(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double sq = (X.row(static_cast<Eigen::Index>(i)) - X.row(static_cast<Eigen::Index>(j))).squaredNorm();
            D(i, j) = linkage == Linkage::Ward ? sq : std::sqrt(sq);
        }
    }
    std::vector<char> active(n, 1);
    std::vector<std::size_t> size(n, 1);
    std::vector<std::size_t> id(n);
    std::iota(id.begin(), id.end(), std::size_t{0});
    constexpr auto none = std::numeric_limits<std::size_t>::max();
    std::vector<std::size_t> nn(n, none);
    std::vector<double> nnd(n, std::numeric_limits<double>::infinity());
    const auto refresh = [&](std::size_t i) {
        nn[i] = none;
        nnd[i] = std::numeric_limits<double>::infinity();
        for (std::size_t j = i + 1; j < n; ++j) {
            if (active[j] && D(i, j) < nnd[i]) {
                nnd[i] = D(i, j);
                nn[i] = j;
            }
        }
    };
    for (std::size_t i = 0; i < n; ++i) {
        refresh(i);
    }
    std::vector<Merge> merges;
    merges.reserve(n - 1);
    for (std::size_t step = 0; step + 1 < n; ++step) {
        std::size_t i = none;
        for (std::size_t s = 0; s < n; ++s) {
            if (active[s] && nn[s] != none && (i == none || nnd[s] < nnd[i])) {
                i = s;
            }
        }
        const std::size_t j = nn[i];
        const double dij = D(i, j);
        merges.push_back({std::min(id[i], id[j]), std::max(id[i], id[j]), linkage == Linkage::Ward ? std::sqrt(dij) : dij, size[i] + size[j]});
        const double ni = static_cast<double>(size[i]);
        const double nj = static_cast<double>(size[j]);
        for (std::size_t k = 0; k < n; ++k) {
            if (!active[k] || k == i || k == j) {
                continue;
            }
            const double dki = D(k, i);
            const double dkj = D(k, j);
            double updated = 0.0;
            switch (linkage) {
            case Linkage::Ward: {
                const double nk = static_cast<double>(size[k]);
                updated = ((ni + nk) * dki + (nj + nk) * dkj - nk * dij) / (ni + nj + nk);
                break;
            }
            case Linkage::Average: updated = (ni * dki + nj * dkj) / (ni + nj); break;
            case Linkage::Complete: updated = std::max(dki, dkj); break;
            }
            D(k, i) = updated;
        }
        active[j] = 0;
        size[i] += size[j];
        id[i] = n + step;
        refresh(i);
        for (std::size_t k = 0; k < n; ++k) {
            if (!active[k] || k == i) {
                continue;
            }
            if (k < i) {
                if (nn[k] == i || nn[k] == j) {
                    refresh(k);
                } else if (D(k, i) < nnd[k] || (D(k, i) == nnd[k] && i < nn[k])) {
                    nn[k] = i;
                    nnd[k] = D(k, i);
                }
            } else if (k < j && nn[k] == j) {
                refresh(k);
            }
        }
    }
    return merges;
}

/// Replays the dendrogram until the stop criterion holds.
inline std::vector<std::size_t> cut_tree(std::size_t n, const std::vector<Merge>& merges, const StopCriterion& stop)
{
    stop.check();
    std::vector<std::size_t> parent(2 * n, 0);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    const auto find = [&](std::size_t x) {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    };
    std::size_t applied = 0;
    const std::size_t target = stop.count ? std::min(*stop.count, n) : 1;
    for (std::size_t t = 0; t < merges.size(); ++t) {
        if (stop.count && n - applied <= target) {
            break;
        }
        if (stop.threshold && merges[t].height > *stop.threshold) {
            break;
        }
        parent[find(merges[t].a)] = n + t;
        parent[find(merges[t].b)] = n + t;
        ++applied;
    }
    std::map<std::size_t, std::size_t> number;
    std::vector<std::size_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto root = find(i);
        const auto it = number.try_emplace(root, number.size()).first;
        out[i] = it->second;
    }
    return out;
}

inline AgglomerativeResult agglomerative(const Matrix& X, Linkage linkage, const StopCriterion& stop)
{
    stop.check();
    AgglomerativeResult res;
    res.merges = linkage_tree(X, linkage);
    res.assignment = cut_tree(static_cast<std::size_t>(X.rows()), res.merges, stop);
    res.clusters = res.assignment.empty() ? 0 : *std::max_element(res.assignment.begin(), res.assignment.end()) + 1;
    return res;
}

// ---------------------------------------------------------------------------
// Dimensionality reduction

enum class ReducerMethod { Pca, External };

inline ReducerMethod parse_reducer(std::string_view s)
{
    if (s == "pca") return ReducerMethod::Pca;
    if (s == "external") return ReducerMethod::External;
    fail(Errc::InvalidConfig, "unknown reducer '" + std::string(s) + "' (pca|external)");
}

/// PCA keeps `dims` components when set, else enough for `variance`
/// (never fewer than 2). EXTERNAL uses precomputed coordinates as given.
struct ReducerConfig {
    ReducerMethod method = ReducerMethod::Pca;
    std::optional<std::size_t> dims;
    double variance = kDefaultVarianceTarget;
    std::filesystem::path file;

    void check() const
    {
        if (dims && *dims < 2) {
            fail(Errc::InvalidConfig, "reducer target dim must be >= 2");
        }
        if (!(variance > 0.0 && variance <= 1.0)) {
            fail(Errc::InvalidConfig, "reducer variance target must lie in (0, 1]");
        }
    }
};

inline Matrix reduce(const Matrix& X, const ReducerConfig& cfg, const Matrix* external = nullptr)
{
    cfg.check();
    if (cfg.method == ReducerMethod::External) {
        if (external == nullptr || external->rows() != X.rows()) {
            fail(Errc::InvalidConfig, "external reducer needs coordinates for every row");
        }
        return *external;
    }
    if (X.rows() < 3) {
        return X;
    }
    const auto cap = static_cast<std::size_t>(std::min(X.rows() - 1, X.cols()));
    try {
        PcaModel model;
        if (cfg.dims) {
            model = pca_fit_dims(X, std::min(*cfg.dims, cap));
        } else {
            model = pca_fit(X, cfg.variance);
            if (model.output_dim() < 2 && cap >= 2) {
                model = pca_fit_dims(X, 2);
            }
        }
        return pca_transform(model, X);
    } catch (const Error& e) {
        if (e.code() == Errc::DegenerateData) {
            return X;
        }
        throw;
    }
}

/// Coordinates from a TSV of `record_id<TAB>v1<TAB>v2...`, aligned to `ids`.
inline Matrix load_external_coordinates(const std::filesystem::path& file, std::span<const std::string> ids)
{
    const auto lines = detail::split_lines(detail::read_text(file, Errc::Io));
    std::map<std::string, std::vector<double>, std::less<>> rows;
    std::size_t width = 0;
    for (const auto& line : lines) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ss(line);
        std::string id;
        std::getline(ss, id, '\t');
        std::vector<double> v;
        std::string cell;
        while (std::getline(ss, cell, '\t')) {
            v.push_back(std::stod(cell));
        }
        if (width == 0) {
            width = v.size();
        }
        if (v.size() != width || width == 0) {
            fail(Errc::DimMismatch, "ragged coordinate row for '" + id + "' in " + file.string());
        }
        rows.emplace(id, std::move(v));
    }
    Matrix out(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(width));
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const auto it = rows.find(ids[r]);
        if (it == rows.end()) {
            fail(Errc::RowCountMismatch, "no external coordinates for record '" + ids[r] + "'");
        }
        for (std::size_t c = 0; c < width; ++c) {
            out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = it->second[c];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cascade clustering

struct DepthPlan {
    StopCriterion stop = StopCriterion::clusters(2);
    ReducerConfig reducer;
    Linkage linkage = Linkage::Ward;
};

inline constexpr std::size_t kDefaultExemplars = 5;

struct ClusterNode {
    std::size_t id = 0;
    std::optional<std::size_t> parent;
    std::size_t depth = 0;
    std::vector<std::size_t> members; ///< row indices, ascending
    RowVector centroid;               ///< in the original space
    std::vector<std::size_t> exemplars;
    std::vector<std::size_t> children;
    std::string label;
    bool human_label = false;
};

/// Node 0 is the root (the clustered set); ids are breadth-first.
struct ClusterTree {
    std::vector<ClusterNode> nodes;
    bool labels_imported = false;

    const ClusterNode& root() const { return nodes.front(); }
    std::size_t max_depth() const
    {
        std::size_t d = 0;
        for (const auto& n : nodes) {
            d = std::max(d, n.depth);
        }
        return d;
    }

    const ClusterNode& at(std::size_t id) const
    {
        if (id >= nodes.size()) {
            fail(Errc::UnknownClusterId, "no cluster " + std::to_string(id));
        }
        return nodes[id];
    }

    /// For every root member, the deepest cluster at depth <= `depth` holding it.
    std::map<std::size_t, std::size_t> cluster_of(std::size_t depth) const
    {
        std::map<std::size_t, std::size_t> out;
        for (const auto& n : nodes) {
            if (n.depth <= depth) {
                for (const auto m : n.members) {
                    auto& slot = out[m];
                    if (nodes[slot].depth <= n.depth) {
                        slot = n.id;
                    }
                }
            }
        }
        return out;
    }

    std::vector<std::size_t> leaves() const
    {
        std::vector<std::size_t> out;
        for (const auto& n : nodes) {
            if (n.children.empty() && n.parent) {
                out.push_back(n.id);
            }
        }
        return out;
    }

    /// Replaces row indices with `rows[index]` (members and exemplars).
    void remap(std::span<const std::size_t> rows)
    {
        for (auto& n : nodes) {
            for (auto& m : n.members) {
                m = rows[m];
            }
            for (auto& e : n.exemplars) {
                e = rows[e];
            }
            std::sort(n.members.begin(), n.members.end());
        }
    }
};

namespace detail {

inline std::vector<std::size_t> nearest_to_centroid(const Matrix& X, const std::vector<std::size_t>& members, const RowVector& centroid,
                                                    std::size_t count)
{
    std::vector<std::pair<double, std::size_t>> d;
    for (const auto m : members) {
        d.emplace_back((X.row(static_cast<Eigen::Index>(m)) - centroid).squaredNorm(), m);
    }
    std::sort(d.begin(), d.end());
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < std::min(count, d.size()); ++i) {
        out.push_back(d[i].second);
    }
    return out;
}

inline ClusterNode make_cluster(const Matrix& X, std::size_t id, std::optional<std::size_t> parent, std::size_t depth,
                                std::vector<std::size_t> members, std::size_t exemplars)
{
    ClusterNode node;
    node.id = id;
    node.parent = parent;
    node.depth = depth;
    node.members = std::move(members);
    node.centroid = take_rows(X, node.members).colwise().mean();
    node.exemplars = nearest_to_centroid(X, node.members, node.centroid, exemplars);
    return node;
}

} // namespace detail

/// Depth d clusters come from reducing and clustering each depth d-1
/// cluster's members with plan[d-1]. The root is always split (a single
/// depth-1 child is allowed); deeper clusters are split only when clustering
/// yields at least two groups, and are left as leaves when smaller than the
/// next stop count.
inline ClusterTree cascade_cluster(const Matrix& X, std::span<const DepthPlan> plan, std::size_t exemplars = kDefaultExemplars,
                                   const Matrix* external = nullptr)
{
    if (plan.empty()) {
        fail(Errc::InvalidConfig, "depth plan must have at least one depth");
    }
    if (X.rows() == 0) {
        fail(Errc::EmptyInput, "cascade clustering on an empty matrix");
    }
    for (const auto& p : plan) {
        p.stop.check();
        p.reducer.check();
    }
    ClusterTree tree;
    std::vector<std::size_t> all(static_cast<std::size_t>(X.rows()));
    std::iota(all.begin(), all.end(), std::size_t{0});
    tree.nodes.push_back(detail::make_cluster(X, 0, std::nullopt, 0, all, exemplars));
    for (std::size_t q = 0; q < tree.nodes.size(); ++q) {
        const auto depth = tree.nodes[q].depth;
        if (depth >= plan.size()) {
            continue;
        }
        const auto& p = plan[depth];
        const auto members = tree.nodes[q].members;
        const std::size_t minimum = p.stop.count ? std::max<std::size_t>(*p.stop.count, 2) : 2;
        std::vector<std::size_t> assignment(members.size(), 0);
        std::size_t groups = 1;
        if (members.size() >= minimum) {
            const Matrix sub = detail::take_rows(X, members);
            Matrix ext;
            if (external) {
                ext = detail::take_rows(*external, members);
            }
            const auto res = agglomerative(reduce(sub, p.reducer, external ? &ext : nullptr), p.linkage, p.stop);
            assignment = res.assignment;
            groups = res.clusters;
        } else if (depth > 0) {
            continue;
        }
        if (groups < 2 && depth > 0) {
            continue;
        }
        std::vector<std::vector<std::size_t>> split(groups);
        for (std::size_t i = 0; i < members.size(); ++i) {
            split[assignment[i]].push_back(members[i]);
        }
        for (auto& g : split) {
            const auto id = tree.nodes.size();
            tree.nodes[q].children.push_back(id);
            tree.nodes.push_back(detail::make_cluster(X, id, q, depth + 1, std::move(g), exemplars));
        }
    }
    return tree;
}

// ---------------------------------------------------------------------------
// Labeling file round-trip

inline constexpr std::string_view kClusterFileHeader = "cluster_id\tparent_id\tdepth\tsize\texemplar_ids\tlabel";
inline constexpr std::string_view kUnlabeledSuffix = "-unlabeled";

/// One row per node; the root row carries `root_label`, the rest a blank label.
inline void export_clusters(const ClusterTree& tree, const std::filesystem::path& file, std::span<const std::string> ids,
                            const std::string& root_label)
{
    if (tree.nodes.empty()) {
        fail(Errc::InvalidState, "cannot export an empty cluster tree");
    }
    std::ofstream out(file, std::ios::binary);
    if (!out) {
        fail(Errc::Io, "cannot write " + file.string());
    }
    out << kClusterFileHeader << '\n';
    for (const auto& n : tree.nodes) {
        out << n.id << '\t' << (n.parent ? std::to_string(*n.parent) : "") << '\t' << n.depth << '\t' << n.members.size() << '\t';
        for (std::size_t e = 0; e < n.exemplars.size(); ++e) {
            out << (e ? "," : "") << ids[n.exemplars[e]];
        }
        out << '\t' << (n.parent ? "" : root_label) << '\n';
    }
}

/// Fills labels from the file. Blank labels become the parent's label plus
/// "-unlabeled" and stay marked as not human-assigned.
inline ClusterTree import_labels(ClusterTree tree, const std::filesystem::path& file, const std::string& root_label)
{
    const auto lines = detail::split_lines(detail::read_text(file, Errc::Io));
    if (lines.empty() || lines.front() != kClusterFileHeader) {
        fail(Errc::InvalidConfig, file.string() + " lacks the cluster file header");
    }
    std::map<std::size_t, std::string> given;
    for (std::size_t li = 1; li < lines.size(); ++li) {
        if (lines[li].empty()) {
            continue;
        }
        std::vector<std::string> cells;
        std::istringstream ss(lines[li]);
        std::string cell;
        while (std::getline(ss, cell, '\t')) {
            cells.push_back(cell);
        }
        if (cells.empty()) {
            continue;
        }
        std::size_t id = 0;
        try {
            std::size_t used = 0;
            id = std::stoul(cells[0], &used);
            if (used != cells[0].size()) {
                throw std::invalid_argument(cells[0]);
            }
        } catch (const std::exception&) {
            fail(Errc::UnknownClusterId, "bad cluster id '" + cells[0] + "'");
        }
        if (id >= tree.nodes.size()) {
            fail(Errc::UnknownClusterId, "cluster " + std::to_string(id) + " is not in the tree");
        }
        if (cells.size() >= 4 && cells[3] != std::to_string(tree.nodes[id].members.size())) {
            fail(Errc::UnknownClusterId, "cluster " + std::to_string(id) + " has size " + std::to_string(tree.nodes[id].members.size()) +
                                             " but the labels file says " + cells[3] + "; the file is from another clustering");
        }
        const auto label = cells.size() >= 6 ? std::string(detail::trim(cells[5])) : std::string();
        if (!label.empty() && tree.nodes[id].parent) {
            given[id] = label;
        }
    }
    tree.nodes[0].label = root_label;
    tree.nodes[0].human_label = true;
    for (std::size_t i = 1; i < tree.nodes.size(); ++i) {
        auto& n = tree.nodes[i];
        const auto it = given.find(i);
        n.human_label = it != given.end();
        n.label = n.human_label ? it->second : tree.nodes[*n.parent].label + std::string(kUnlabeledSuffix);
    }
    for (const auto& n : tree.nodes) {
        std::set<std::string> seen;
        for (const auto c : n.children) {
            if (tree.nodes[c].human_label && !seen.insert(tree.nodes[c].label).second) {
                fail(Errc::DuplicateLabelAmongSiblings, "label '" + tree.nodes[c].label + "' appears twice under cluster " + std::to_string(n.id));
            }
        }
    }
    tree.labels_imported = true;
    return tree;
}

// ---------------------------------------------------------------------------
// Orchestration

struct RecatConfig {
    std::string modality = "image";
    bool filter = true;
    std::size_t filter_clusters = kDefaultFilterClusters;
    KeepRule keep;
    std::vector<DepthPlan> depth_plan{DepthPlan{StopCriterion::clusters(3), {}, Linkage::Ward}};
    std::size_t exemplars = kDefaultExemplars;
    std::uint64_t seed = 0;
    std::optional<std::filesystem::path> external_coordinates;
};

struct RecatDiscovery {
    NodeId target;
    std::vector<std::size_t> members;   ///< records labeled exactly with the target path
    std::optional<FilterReport> filter; ///< row indices mapped to bundle records
    ClusterTree tree;                   ///< members are bundle record indices
};

/// Filter, reduce and cascade-cluster the records whose label ends at `target`.
inline RecatDiscovery discover_subcategories(const EmbeddingBundle& bundle, const CategoryPath& target, const RecatConfig& cfg)
{
    const auto node = bundle.taxonomy.find(target);
    if (!node) {
        fail(Errc::UnknownNode, "recategorization target '" + target.join() + "' is not in the taxonomy");
    }
    RecatDiscovery out;
    out.target = *node;
    for (std::size_t i = 0; i < bundle.size(); ++i) {
        if (bundle.labels[i] == target) {
            out.members.push_back(i);
        }
    }
    if (out.members.empty()) {
        fail(Errc::EmptyInput, "no records are labeled '" + target.join() + "'");
    }
    const Matrix X = bundle.rows(cfg.modality, out.members);
    std::vector<std::size_t> rows(out.members.size());
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    if (cfg.filter) {
        auto rep = filter_records(X, std::min(cfg.filter_clusters, out.members.size()), cfg.seed, cfg.keep);
        rows = rep.kept;
        for (auto& k : rep.kept) {
            k = out.members[k];
        }
        for (auto& d : rep.discarded) {
            d = out.members[d];
        }
        log::info("recat: filter kept " + std::to_string(rep.kept.size()) + " of " + std::to_string(out.members.size()) +
                               " records (threshold " + std::to_string(rep.threshold) + ")");
        out.filter = std::move(rep);
    }
    const Matrix kept = detail::take_rows(X, rows);
    std::optional<Matrix> ext;
    if (cfg.external_coordinates) {
        std::vector<std::string> kept_ids;
        for (const auto r : rows) {
            kept_ids.push_back(bundle.ids[out.members[r]]);
        }
        ext = load_external_coordinates(*cfg.external_coordinates, kept_ids);
    }
    out.tree = cascade_cluster(kept, cfg.depth_plan, cfg.exemplars, ext ? &*ext : nullptr);
    std::vector<std::size_t> to_record;
    for (const auto r : rows) {
        to_record.push_back(out.members[r]);
    }
    out.tree.remap(to_record);
    if (out.tree.root().children.size() < 2) {
        log::warn("recat: clustering found a single subcategory under '" + target.join() + "'");
    }
    return out;
}

struct RecatResult {
    Taxonomy taxonomy;
    EmbeddingBundle bundle;
    std::vector<CategoryPath> grafted; ///< new paths relative to the target
    std::size_t relabeled = 0;
};

/// Grafts the human-labeled clusters under the target and rewrites each
/// clustered record's label to its deepest human-labeled cluster. Records in
/// "-unlabeled" clusters keep their parent's path; everything else is untouched.
inline RecatResult apply_subcategories(const EmbeddingBundle& bundle, const RecatDiscovery& disc)
{
    const auto& tree = disc.tree;
    if (!tree.labels_imported) {
        fail(Errc::LabelsMissing, "cluster tree has no imported labels");
    }
    const auto& tax = bundle.taxonomy;
    const auto target_path = tax.path_of(disc.target);
    std::vector<CategoryPath> relative(tree.nodes.size());
    std::vector<char> usable(tree.nodes.size(), 0);
    usable[0] = 1;
    for (std::size_t i = 1; i < tree.nodes.size(); ++i) {
        const auto& n = tree.nodes[i];
        usable[i] = usable[*n.parent] && n.human_label;
        relative[i] = relative[*n.parent];
        if (usable[i]) {
            relative[i].segments.push_back(n.label);
        }
    }
    std::vector<std::size_t> deepest(bundle.size(), 0);
    for (const auto& n : tree.nodes) {
        if (usable[n.id]) {
            for (const auto m : n.members) {
                if (tree.nodes[deepest[m]].depth <= n.depth) {
                    deepest[m] = n.id;
                }
            }
        }
    }
    RecatResult res;
    std::set<CategoryPath> paths;
    for (const auto m : tree.root().members) {
        if (deepest[m] != 0) {
            paths.insert(relative[deepest[m]]);
        }
    }
    res.grafted.assign(paths.begin(), paths.end());
    res.taxonomy = res.grafted.empty() ? tax : tax.graft(disc.target, res.grafted);
    res.bundle = bundle;
    res.bundle.taxonomy = res.taxonomy;
    for (const auto m : tree.root().members) {
        if (deepest[m] == 0) {
            continue;
        }
        CategoryPath p = target_path;
        for (const auto& s : relative[deepest[m]].segments) {
            p.segments.push_back(s);
        }
        res.bundle.labels[m] = std::move(p);
        ++res.relabeled;
    }
    res.bundle.check();
    return res;
}

/// discover → (labels file) → graft → relabel.
inline RecatResult recategorize_run(const EmbeddingBundle& bundle, const CategoryPath& target, const RecatConfig& cfg,
                                    const std::filesystem::path& labels_file)
{
    auto disc = discover_subcategories(bundle, target, cfg);
    disc.tree = import_labels(std::move(disc.tree), labels_file, bundle.taxonomy.node(disc.target).name);
    return apply_subcategories(bundle, disc);
}

} // namespace taxengine
