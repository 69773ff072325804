#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "phenotyper/cohort.hpp"
#include "phenotyper/common.hpp"

namespace phenotyper {

/// Edge-scored transition graph for one phenotype (Table 6-style rendering:
/// box = medication, oval = diagnosis).
struct PhenotypeGraph {
    enum class Direction { ADLikely, ADUnlikely };

    struct Node {
        std::uint32_t entity = 0;
        std::string code;
        EntityKind kind = EntityKind::Medication;
        bool is_from = false;  // role in the bipartite layout
    };
    struct Edge {
        std::uint32_t from = 0;
        std::uint32_t to = 0;
        double score = 0.0;
    };

    int phenotype = 0;
    Direction direction = Direction::ADUnlikely;
    std::vector<Node> nodes;  // from-nodes first, then to-nodes, by entity index
    std::vector<Edge> edges;  // descending score, ties by (from, to)
    std::size_t dropped_nonpositive = 0;  // edges with log2(M)+eps < 0
};

struct EdgeScoreOptions {
    double epsilon = 16.0;  // added to log2 transition probability
    std::size_t top_k = 10;
    double coefficient = 0.0;  // logistic coefficient; sign sets the direction label
    bool random_among_top = false;  // sample top_k from the top pool_factor*top_k
    std::size_t pool_factor = 3;
    std::uint64_t seed = 0;
};

/// score(j -> k) = B[j,r] * C[k,r] * (log2(M[j,k]) + epsilon) over cells with
/// M > 0 and positive memberships; edges whose log term is negative are
/// dropped (counted in the result) to keep scores non-negative.
inline PhenotypeGraph edge_scores(int phenotype, const Eigen::MatrixXd& B,
                                  const Eigen::MatrixXd& C, const Eigen::MatrixXd& mean_transitions,
                                  const Vocabulary& vocabulary,
                                  const EdgeScoreOptions& options = {}) {
    if (options.epsilon <= 0.0) throw ConfigError("edge_scores: epsilon must be > 0");
    if (B.rows() != C.rows() || B.rows() != mean_transitions.rows() ||
        mean_transitions.rows() != mean_transitions.cols() ||
        static_cast<std::size_t>(B.rows()) != vocabulary.size())
        throw Error("edge_scores: dimension mismatch");
    if (phenotype < 0 || phenotype >= B.cols()) throw Error("edge_scores: bad phenotype index");

    PhenotypeGraph g;
    g.phenotype = phenotype;
    g.direction = options.coefficient > 0.0 ? PhenotypeGraph::Direction::ADLikely
                                            : PhenotypeGraph::Direction::ADUnlikely;

    std::vector<PhenotypeGraph::Edge> all;
    for (Eigen::Index j = 0; j < B.rows(); ++j) {
        if (!(B(j, phenotype) > 0.0)) continue;
        for (Eigen::Index k = 0; k < C.rows(); ++k) {
            if (!(C(k, phenotype) > 0.0)) continue;
            const double m = mean_transitions(j, k);
            if (!(m > 0.0)) continue;
            const double logterm = std::log2(m) + options.epsilon;
            if (logterm < 0.0) {
                ++g.dropped_nonpositive;
                continue;
            }
            all.push_back({static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(k),
                           B(j, phenotype) * C(k, phenotype) * logterm});
        }
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.from != b.from) return a.from < b.from;
        return a.to < b.to;
    });

    if (options.random_among_top && all.size() > options.top_k) {
        const std::size_t pool =
            std::min(all.size(), options.top_k * std::max<std::size_t>(options.pool_factor, 1));
        Rng rng(options.seed);
        // partial Fisher-Yates over the pool, then restore score order
        for (std::size_t i = 0; i < options.top_k; ++i) {
            const std::size_t j = i + rng.uniform_index(pool - i);
            std::swap(all[i], all[j]);
        }
        all.resize(options.top_k);
        std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.from != b.from) return a.from < b.from;
            return a.to < b.to;
        });
    } else if (all.size() > options.top_k) {
        all.resize(options.top_k);
    }
    g.edges = std::move(all);

    std::vector<std::uint32_t> from_set, to_set;
    for (const auto& e : g.edges) {
        from_set.push_back(e.from);
        to_set.push_back(e.to);
    }
    const auto uniq = [](std::vector<std::uint32_t>& v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    uniq(from_set);
    uniq(to_set);
    for (std::uint32_t e : from_set)
        g.nodes.push_back({e, vocabulary.codes[e], vocabulary.kinds[e], true});
    for (std::uint32_t e : to_set)
        g.nodes.push_back({e, vocabulary.codes[e], vocabulary.kinds[e], false});
    return g;
}

enum class GraphFormat { Dot, Json };

inline std::string graph_to_dot(const PhenotypeGraph& g) {
    std::string out = "digraph phenotype_" + std::to_string(g.phenotype) + " {\n";
    out += "  label=\"phenotype " + std::to_string(g.phenotype) +
           (g.direction == PhenotypeGraph::Direction::ADLikely ? " (AD likely)" : " (AD unlikely)") +
           "\";\n  rankdir=LR;\n";
    for (const auto& n : g.nodes) {
        out += "  \"";
        out += n.is_from ? "from:" : "to:";
        out += n.code;
        out += n.kind == EntityKind::Medication ? "\" [shape=box, label=\""
                                                : "\" [shape=oval, label=\"";
        out += n.code + "\"];\n";
    }
    for (const auto& e : g.edges) {
        const auto code = [&](std::uint32_t entity, bool from) -> std::string {
            for (const auto& n : g.nodes)
                if (n.entity == entity && n.is_from == from) return n.code;
            throw Error("graph_to_dot: edge references unknown node");
        };
        out += "  \"from:" + code(e.from, true) + "\" -> \"to:" + code(e.to, false) +
               "\" [label=\"" + format_double(e.score) + "\"];\n";
    }
    out += "}\n";
    return out;
}

inline nlohmann::ordered_json graph_to_json(const PhenotypeGraph& g) {
    nlohmann::ordered_json j;
    j["phenotype"] = g.phenotype;
    j["direction"] =
        g.direction == PhenotypeGraph::Direction::ADLikely ? "ad_likely" : "ad_unlikely";
    j["dropped_nonpositive_edges"] = g.dropped_nonpositive;
    auto nodes = nlohmann::ordered_json::array();
    for (const auto& n : g.nodes)
        nodes.push_back({{"code", n.code},
                         {"kind", n.kind == EntityKind::Medication ? "medication" : "diagnosis"},
                         {"role", n.is_from ? "from" : "to"}});
    j["nodes"] = std::move(nodes);
    auto edges = nlohmann::ordered_json::array();
    for (const auto& e : g.edges) {
        std::string from_code, to_code;
        for (const auto& n : g.nodes) {
            if (n.entity == e.from && n.is_from) from_code = n.code;
            if (n.entity == e.to && !n.is_from) to_code = n.code;
        }
        edges.push_back({{"from", from_code}, {"to", to_code}, {"score", e.score}});
    }
    j["edges"] = std::move(edges);
    return j;
}

/// Renders a graph list as one document: concatenated digraphs for DOT, an
/// array for JSON. Byte-deterministic.
inline std::string export_graphs(const std::vector<PhenotypeGraph>& graphs, GraphFormat format) {
    if (format == GraphFormat::Dot) {
        std::string out;
        for (const auto& g : graphs) out += graph_to_dot(g);
        return out;
    }
    auto arr = nlohmann::ordered_json::array();
    for (const auto& g : graphs) arr.push_back(graph_to_json(g));
    return arr.dump(2) + "\n";
}

}  // namespace phenotyper
