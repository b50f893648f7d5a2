#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "bam/error.hpp"
#include "bam/ops.hpp"
#include "bam/rng.hpp"

namespace bam {

enum class SplitTag : std::uint8_t { none, train, val, test };

inline const char* to_string(SplitTag s)
{
    switch (s) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
    default: return "none";
    }
}

/// Node-classification graph as stored on disk: raw features, the undirected
/// edge list in file order, one label and one split tag per node.
struct GraphDataset
{
    std::string name;
    std::size_t num_nodes = 0;
    std::size_t num_features = 0;
    std::vector<double> features;  // num_nodes x num_features, row-major
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    std::vector<int> labels;
    std::vector<SplitTag> split;
    bool row_normalize = true;

    std::size_t num_classes() const
    {
        int mx = -1;
        for (int l : labels) mx = std::max(mx, l);
        return static_cast<std::size_t>(mx + 1);
    }

    std::vector<std::size_t> nodes_in(SplitTag tag) const
    {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < split.size(); ++i)
            if (split[i] == tag) out.push_back(i);
        return out;
    }

    /// Structural checks independent of any named reference statistics.
    void validate() const
    {
        if (num_nodes == 0 || num_features == 0) throw ValidationError("graph: empty dataset");
        if (features.size() != num_nodes * num_features) {
            throw ValidationError("graph: feature matrix has wrong size");
        }
        if (labels.size() != num_nodes || split.size() != num_nodes) {
            throw ValidationError("graph: labels and splits must cover every node");
        }
        for (int l : labels)
            if (l < 0) throw ValidationError("graph: labels must be nonnegative");
        for (const auto& [u, v] : edges) {
            if (u >= num_nodes || v >= num_nodes) {
                throw ValidationError("graph: edge endpoint out of range (" + std::to_string(u) + ", " +
                                      std::to_string(v) + ")");
            }
        }
    }

    bool operator==(const GraphDataset&) const = default;
};

/// Features ready for the model: a copy, row-normalized when the dataset asks
/// for it (rows summing to zero are left as they are).
inline Tensor model_features(const GraphDataset& g)
{
    std::vector<double> x = g.features;
    if (g.row_normalize) {
        for (std::size_t i = 0; i < g.num_nodes; ++i) {
            double* row = &x[i * g.num_features];
            const double s = std::accumulate(row, row + g.num_features, 0.0);
            if (s != 0.0)
                for (std::size_t f = 0; f < g.num_features; ++f) row[f] /= s;
        }
    }
    return Tensor({g.num_nodes, g.num_features}, std::move(x));
}

/// Neighborhood pattern used by attention: both directions of every edge plus
/// a self-loop on every node, deduplicated, columns ascending within a row.
inline Csr attention_pattern(const GraphDataset& g)
{
    std::vector<std::vector<std::size_t>> nbr(g.num_nodes);
    for (std::size_t i = 0; i < g.num_nodes; ++i) nbr[i].push_back(i);
    for (const auto& [u, v] : g.edges) {
        nbr[u].push_back(v);
        nbr[v].push_back(u);
    }
    Csr csr;
    csr.num_rows = g.num_nodes;
    csr.num_cols = g.num_nodes;
    csr.row_ptr.assign(g.num_nodes + 1, 0);
    for (std::size_t i = 0; i < g.num_nodes; ++i) {
        auto& r = nbr[i];
        std::sort(r.begin(), r.end());
        r.erase(std::unique(r.begin(), r.end()), r.end());
        csr.col.insert(csr.col.end(), r.begin(), r.end());
        csr.row_ptr[i + 1] = csr.col.size();
    }
    return csr;
}

/// Number of distinct undirected edges, self-loops excluded.
inline std::size_t unique_undirected_edges(const GraphDataset& g)
{
    std::vector<std::pair<std::size_t, std::size_t>> e;
    for (auto [u, v] : g.edges) {
        if (u == v) continue;
        e.emplace_back(std::min(u, v), std::max(u, v));
    }
    std::sort(e.begin(), e.end());
    return static_cast<std::size_t>(std::unique(e.begin(), e.end()) - e.begin());
}

/// Relabels nodes: node i becomes perm[i].
inline GraphDataset permute(const GraphDataset& g, const std::vector<std::size_t>& perm)
{
    GraphDataset out = g;
    for (std::size_t i = 0; i < g.num_nodes; ++i) {
        std::copy_n(&g.features[i * g.num_features], g.num_features,
                    &out.features[perm[i] * g.num_features]);
        out.labels[perm[i]] = g.labels[i];
        out.split[perm[i]] = g.split[i];
    }
    for (auto& [u, v] : out.edges) {
        u = perm[u];
        v = perm[v];
    }
    return out;
}

/// Subgraph induced by the first `size` nodes reached breadth-first from
/// node 0 (further components are entered at their lowest id). Nodes keep
/// their relative order, labels and split tags.
inline GraphDataset induced_subgraph(const GraphDataset& g, std::size_t size)
{
    if (size == 0 || size > g.num_nodes) throw ParameterError("induced_subgraph: size must lie in [1, num_nodes]");
    const Csr nbr = attention_pattern(g);
    std::vector<std::uint8_t> picked(g.num_nodes, 0);
    std::vector<std::size_t> queue;
    std::size_t head = 0, next_root = 0;
    while (queue.size() < size) {
        if (head == queue.size()) {
            while (picked[next_root]) ++next_root;
            picked[next_root] = 1;
            queue.push_back(next_root);
        }
        const std::size_t u = queue[head++];
        for (std::size_t e = nbr.row_ptr[u]; e < nbr.row_ptr[u + 1] && queue.size() < size; ++e) {
            const std::size_t v = nbr.col[e];
            if (!picked[v]) {
                picked[v] = 1;
                queue.push_back(v);
            }
        }
    }
    std::vector<std::size_t> id(g.num_nodes, g.num_nodes);
    GraphDataset out;
    out.name = g.name + "-sub" + std::to_string(size);
    out.num_features = g.num_features;
    out.row_normalize = g.row_normalize;
    for (std::size_t i = 0; i < g.num_nodes; ++i) {
        if (!picked[i]) continue;
        id[i] = out.num_nodes++;
        out.features.insert(out.features.end(), &g.features[i * g.num_features], &g.features[(i + 1) * g.num_features]);
        out.labels.push_back(g.labels[i]);
        out.split.push_back(g.split[i]);
    }
    for (const auto& [u, v] : g.edges)
        if (picked[u] && picked[v]) out.edges.emplace_back(id[u], id[v]);
    return out;
}

struct PlantedPartitionParams
{
    std::size_t nodes = 500;
    std::size_t classes = 7;
    std::size_t features = 200;
    double avg_degree = 4.0;
    double homophily = 0.8;       // chance an edge stays inside its class
    double topic_rate = 0.08;     // word probability for the node's own topic
    double background_rate = 0.02;
    std::size_t train_per_class = 20;
    std::size_t val = 100;
    std::size_t test = 200;
};

/// Random citation-like graph: nodes in classes, homophilous edges, binary
/// bag-of-words features with a per-class topic block. Splits are drawn the
/// Planetoid way: a fixed number of training nodes per class, then val and
/// test from the remaining nodes.
inline GraphDataset planted_partition(const PlantedPartitionParams& p, Rng& rng, std::string name = "planted")
{
    if (p.classes < 2 || p.nodes < p.classes || p.features < p.classes) {
        throw ParameterError("planted_partition: need at least two classes, one node and one feature per class");
    }
    if (p.train_per_class * p.classes + p.val + p.test > p.nodes) {
        throw ParameterError("planted_partition: splits exceed the node count");
    }
    GraphDataset g;
    g.name = std::move(name);
    g.num_nodes = p.nodes;
    g.num_features = p.features;
    std::vector<std::vector<std::size_t>> members(p.classes);
    for (std::size_t i = 0; i < p.nodes; ++i) {
        const auto c = i < p.classes ? i : rng.below(p.classes);
        g.labels.push_back(static_cast<int>(c));
        members[c].push_back(i);
    }
    const std::size_t block = p.features / p.classes;
    g.features.assign(p.nodes * p.features, 0.0);
    for (std::size_t i = 0; i < p.nodes; ++i) {
        const auto c = static_cast<std::size_t>(g.labels[i]);
        for (std::size_t f = 0; f < p.features; ++f) {
            const bool topic = f / block == c;
            if (rng.bernoulli(topic ? p.topic_rate : p.background_rate)) g.features[i * p.features + f] = 1.0;
        }
    }
    const auto edges = static_cast<std::size_t>(p.avg_degree * static_cast<double>(p.nodes) / 2.0);
    for (std::size_t e = 0; e < edges; ++e) {
        const std::size_t u = rng.below(p.nodes);
        const auto& same = members[static_cast<std::size_t>(g.labels[u])];
        const std::size_t v = rng.bernoulli(p.homophily) ? same[rng.below(same.size())] : rng.below(p.nodes);
        g.edges.emplace_back(u, v);
    }
    std::vector<std::size_t> order(p.nodes);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = p.nodes; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    g.split.assign(p.nodes, SplitTag::none);
    std::vector<std::size_t> taken(p.classes, 0);
    std::vector<std::size_t> rest;
    for (std::size_t i : order) {
        auto& t = taken[static_cast<std::size_t>(g.labels[i])];
        if (t < p.train_per_class) {
            g.split[i] = SplitTag::train;
            ++t;
        } else {
            rest.push_back(i);
        }
    }
    for (std::size_t r = 0; r < rest.size() && r < p.val + p.test; ++r) {
        g.split[rest[r]] = r < p.val ? SplitTag::val : SplitTag::test;
    }
    return g;
}

}  // namespace bam
