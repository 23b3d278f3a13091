#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include <derog/errors.hpp>
#include <derog/rng.hpp>
#include <derog/tensor.hpp>

namespace derog {

// One graph with n nodes, f features per node, and undirected edges stored
// once each. Batching expands every edge into both directions.
struct Graph {
    long n = 0;
    long f = 0;
    std::vector<double> x;  // n*f, row-major
    std::vector<std::pair<long, long>> edges;
    long label = 0;
    long env_id = 0;
};

inline void validate_graph(const Graph& g, const std::string& where) {
    if (g.n < 1) throw validation_error(where + ": graph must have at least one node");
    if (g.f < 1) throw validation_error(where + ": node features must be non-empty");
    if (static_cast<long>(g.x.size()) != g.n * g.f)
        throw validation_error(where + ": feature matrix size does not match n*f");
    for (auto& [a, b] : g.edges) {
        if (a < 0 || a >= g.n || b < 0 || b >= g.n)
            throw validation_error(where + ": edge endpoint out of range [0," +
                                   std::to_string(g.n) + ")");
        if (a == b) throw validation_error(where + ": self-loop " + std::to_string(a));
    }
    if (g.label < 0) throw validation_error(where + ": negative label");
    if (g.env_id < 0) throw validation_error(where + ": negative env id");
}

struct Batch {
    Tensor x;                        // |V| x f constant input
    std::vector<long> e_src, e_dst;  // directed edges after doubling
    std::vector<long> graph_index;   // node -> graph ordinal
    std::vector<long> node_counts;   // per graph
    std::vector<long> labels, env_ids;
    long graph_count = 0;
    long feature_dim = 0;

    long total_nodes() const { return static_cast<long>(graph_index.size()); }
};

inline Batch batch_graphs(const std::vector<Graph>& graphs) {
    if (graphs.empty()) throw usage_error("batch_graphs: empty batch");
    Batch b;
    b.graph_count = static_cast<long>(graphs.size());
    b.feature_dim = graphs[0].f;
    long total = 0;
    for (std::size_t g = 0; g < graphs.size(); ++g) {
        validate_graph(graphs[g], "batch_graphs: graph " + std::to_string(g));
        if (graphs[g].f != b.feature_dim)
            throw shape_error("batch_graphs: feature dim mismatch (" +
                              std::to_string(graphs[g].f) + " vs " +
                              std::to_string(b.feature_dim) + ")");
        total += graphs[g].n;
    }
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(total * b.feature_dim));
    long offset = 0;
    for (std::size_t g = 0; g < graphs.size(); ++g) {
        const Graph& gr = graphs[g];
        flat.insert(flat.end(), gr.x.begin(), gr.x.end());
        for (long v = 0; v < gr.n; ++v) b.graph_index.push_back(static_cast<long>(g));
        for (auto& [s, d] : gr.edges) {
            b.e_src.push_back(offset + s);
            b.e_dst.push_back(offset + d);
            b.e_src.push_back(offset + d);
            b.e_dst.push_back(offset + s);
        }
        b.node_counts.push_back(gr.n);
        b.labels.push_back(gr.label);
        b.env_ids.push_back(gr.env_id);
        offset += gr.n;
    }
    b.x = Tensor::matrix(total, b.feature_dim, std::move(flat));
    return b;
}

enum class ReadoutMode { mean, sum };

// Pools node rows into one row per graph. Mean divides by the node count of
// the owning graph (a constant, so the division participates in gradients
// only as a fixed scale).
inline Tensor readout(Tape& t, const Tensor& nodes, const std::vector<long>& graph_index,
                      long graph_count, ReadoutMode mode) {
    if (static_cast<long>(graph_index.size()) != nodes.rows())
        throw shape_error("readout: graph_index length " +
                          std::to_string(graph_index.size()) + " != node rows " +
                          std::to_string(nodes.rows()));
    if (graph_count < 1) throw shape_error("readout: graph_count must be positive");
    Tensor pooled = t.scatter_sum_rows(nodes, graph_index, graph_count);
    if (mode == ReadoutMode::sum) return pooled;
    std::vector<double> counts(static_cast<std::size_t>(graph_count), 0.0);
    for (long g : graph_index) counts[static_cast<std::size_t>(g)] += 1.0;
    std::vector<double> inv(static_cast<std::size_t>(graph_count * nodes.cols()));
    for (long g = 0; g < graph_count; ++g) {
        double s = counts[static_cast<std::size_t>(g)];
        double iv = s > 0.0 ? 1.0 / s : 0.0;
        for (long j = 0; j < nodes.cols(); ++j)
            inv[static_cast<std::size_t>(g * nodes.cols() + j)] = iv;
    }
    return t.mul(pooled, Tensor::matrix(graph_count, nodes.cols(), std::move(inv)));
}

// Copies each graph-level row down to that graph's nodes.
inline Tensor broadcast_to_nodes(Tape& t, const Tensor& per_graph,
                                 const std::vector<long>& graph_index) {
    return t.index_rows(per_graph, graph_index);
}

// ---- jsonl persistence ----
//
// One graph per line: {"nodes": [[...],...], "edges": [[u,v],...],
// "label": int, "env": int}. Unknown keys are rejected so silent schema
// drift fails loudly.

inline void save_jsonl(const std::vector<Graph>& graphs, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw data_error("save_jsonl: cannot open " + path + " for writing");
    for (const Graph& g : graphs) {
        nlohmann::ordered_json j;
        auto& nodes = j["nodes"] = nlohmann::ordered_json::array();
        for (long v = 0; v < g.n; ++v) {
            nlohmann::ordered_json row = nlohmann::ordered_json::array();
            for (long c = 0; c < g.f; ++c)
                row.push_back(g.x[static_cast<std::size_t>(v * g.f + c)]);
            nodes.push_back(std::move(row));
        }
        auto& edges = j["edges"] = nlohmann::ordered_json::array();
        for (auto& [a, b] : g.edges) edges.push_back({a, b});
        j["label"] = g.label;
        j["env"] = g.env_id;
        out << j.dump() << "\n";
    }
    if (!out) throw data_error("save_jsonl: write failed for " + path);
}

inline std::vector<Graph> load_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("load_jsonl: cannot open " + path);
    std::vector<Graph> graphs;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string where = path + " line " + std::to_string(line_no);
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error(where + ": " + e.what());
        }
        if (!j.is_object()) throw data_error(where + ": expected an object");
        static const std::set<std::string> allowed{"nodes", "edges", "label", "env"};
        for (auto& [key, _] : j.items())
            if (!allowed.count(key)) throw data_error(where + ": unknown key \"" + key + "\"");
        for (const std::string& key : allowed)
            if (!j.contains(key)) throw data_error(where + ": missing key \"" + key + "\"");

        Graph g;
        const auto& nodes = j["nodes"];
        if (!nodes.is_array() || nodes.empty())
            throw data_error(where + ": \"nodes\" must be a non-empty array");
        g.n = static_cast<long>(nodes.size());
        for (const auto& row : nodes) {
            if (!row.is_array() || row.empty())
                throw data_error(where + ": node rows must be non-empty arrays");
            if (g.f == 0) g.f = static_cast<long>(row.size());
            if (static_cast<long>(row.size()) != g.f)
                throw data_error(where + ": ragged node feature rows");
            for (const auto& v : row) {
                if (!v.is_number()) throw data_error(where + ": node features must be numbers");
                g.x.push_back(v.get<double>());
            }
        }
        const auto& edges = j["edges"];
        if (!edges.is_array()) throw data_error(where + ": \"edges\" must be an array");
        for (const auto& e : edges) {
            if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() ||
                !e[1].is_number_integer())
                throw data_error(where + ": edges must be [int,int] pairs");
            g.edges.push_back({e[0].get<long>(), e[1].get<long>()});
        }
        if (!j["label"].is_number_integer())
            throw data_error(where + ": \"label\" must be an integer");
        if (!j["env"].is_number_integer())
            throw data_error(where + ": \"env\" must be an integer");
        g.label = j["label"].get<long>();
        g.env_id = j["env"].get<long>();
        validate_graph(g, where);
        graphs.push_back(std::move(g));
    }
    return graphs;
}

// ---- synthetic motif dataset ----

enum class ShiftKind { covariate, concept_shift };

inline std::string shift_kind_name(ShiftKind k) {
    return k == ShiftKind::covariate ? "covariate" : "concept";
}

inline ShiftKind parse_shift_kind(const std::string& s) {
    if (s == "covariate") return ShiftKind::covariate;
    if (s == "concept") return ShiftKind::concept_shift;
    throw config_error("unknown shift kind \"" + s + "\" (want covariate|concept)");
}

struct MotifConfig {
    ShiftKind shift = ShiftKind::covariate;
    long n_train = 600;
    long n_id_val = 200;
    long n_ood_val = 200;
    long n_ood_test = 200;
    double p_train = 0.9;      // concept mode: P(base agrees with label), train regime
    double p_ood = 1.0 / 3.0;  // concept mode, OOD regime; 1/3 = no correlation
};

struct DatasetSplit {
    std::vector<Graph> train, id_val, ood_val, ood_test;
    ShiftKind shift_kind = ShiftKind::covariate;
    long class_count = 3;
    long env_count = 0;
};

namespace motif_detail {

using Edges = std::vector<std::pair<long, long>>;

// class-defining motifs, appended after the base
inline Edges motif_edges(long label, long& nm) {
    switch (label) {
        case 0:  // house: square + roof apex
            nm = 5;
            return {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 0}, {4, 1}};
        case 1:  // five-cycle
            nm = 5;
            return {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 0}};
        default:  // crane: square with two legs
            nm = 6;
            return {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {0, 4}, {1, 5}};
    }
}

// bases 0..4: wheel, random tree, ladder, star, path
inline Edges base_edges(long kind, long n, Rng& rng) {
    Edges e;
    switch (kind) {
        case 0:  // wheel: hub 0, rim cycle 1..n-1
            for (long i = 1; i < n; ++i) e.push_back({0, i});
            for (long i = 1; i + 1 < n; ++i) e.push_back({i, i + 1});
            e.push_back({n - 1, 1});
            break;
        case 1:  // random recursive tree
            for (long i = 1; i < n; ++i) e.push_back({rng.below(i), i});
            break;
        case 2: {  // ladder: two rails plus rungs; odd n hangs one extra node
            long m = n / 2;
            for (long i = 0; i + 1 < m; ++i) {
                e.push_back({i, i + 1});
                e.push_back({m + i, m + i + 1});
            }
            for (long i = 0; i < m; ++i) e.push_back({i, m + i});
            if (n % 2 == 1) e.push_back({2 * m - 1, 2 * m});
            break;
        }
        case 3:  // star
            for (long i = 1; i < n; ++i) e.push_back({0, i});
            break;
        default:  // path
            for (long i = 1; i < n; ++i) e.push_back({i - 1, i});
            break;
    }
    return e;
}

inline Graph make_graph(ShiftKind shift, bool train_regime, double p_agree, Rng& rng) {
    long label = rng.below(3);
    long base_kind;
    if (shift == ShiftKind::covariate) {
        base_kind = train_regime ? rng.below(3) : 3 + rng.below(2);
    } else {
        // concept shift: base drawn from {wheel,tree,ladder}; agreement with
        // the label is the spurious signal whose strength p_agree varies
        if (rng.uniform() < p_agree)
            base_kind = label;
        else
            base_kind = (label + 1 + rng.below(2)) % 3;
    }
    long nb = 8 + rng.below(8);
    Edges edges = base_edges(base_kind, nb, rng);
    long nm = 0;
    Edges motif = motif_edges(label, nm);
    for (auto& [a, b] : motif) edges.push_back({a + nb, b + nb});
    edges.push_back({rng.below(nb), nb + rng.below(nm)});

    Graph g;
    g.n = nb + nm;
    g.f = 1;
    g.x.assign(static_cast<std::size_t>(g.n), 1.0);
    g.edges = std::move(edges);
    g.label = label;
    if (shift == ShiftKind::covariate)
        g.env_id = base_kind;
    else
        g.env_id = train_regime ? 0 : 1;
    return g;
}

}  // namespace motif_detail

// Deterministic generator: graph k (counted across all four splits in order)
// uses Rng(seed ^ k) regardless of split sizes elsewhere, so any one graph
// can be reproduced in isolation.
inline DatasetSplit generate_motif_dataset(const MotifConfig& cfg, std::uint64_t seed) {
    if (cfg.n_train < 0 || cfg.n_id_val < 0 || cfg.n_ood_val < 0 || cfg.n_ood_test < 0)
        throw config_error("generate_motif_dataset: negative split size");
    if (cfg.p_train < 0.0 || cfg.p_train > 1.0 || cfg.p_ood < 0.0 || cfg.p_ood > 1.0)
        throw config_error("generate_motif_dataset: p_train/p_ood must lie in [0,1]");

    DatasetSplit ds;
    ds.shift_kind = cfg.shift;
    ds.env_count = cfg.shift == ShiftKind::covariate ? 5 : 2;
    std::uint64_t ordinal = 0;
    auto fill = [&](std::vector<Graph>& out, long count, bool train_regime) {
        double p = train_regime ? cfg.p_train : cfg.p_ood;
        for (long i = 0; i < count; ++i) {
            Rng rng(seed ^ ordinal);
            ++ordinal;
            out.push_back(motif_detail::make_graph(cfg.shift, train_regime, p, rng));
        }
    };
    fill(ds.train, cfg.n_train, true);
    fill(ds.id_val, cfg.n_id_val, true);
    fill(ds.ood_val, cfg.n_ood_val, false);
    fill(ds.ood_test, cfg.n_ood_test, false);
    return ds;
}

}  // namespace derog
