#pragma once

// Explanatory graph data model: one layer per selected conv-layer, each filter
// disentangled into a fixed number of part-pattern nodes. Nodes of layer L
// link to M nodes of layer L+1; top-layer nodes link to the dummy node.

#include <compare>
#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "expgraph/geometry.hpp"

namespace expgraph {

inline constexpr int kGraphSchemaVersion = 1;
inline constexpr double kSigma2Floor = 1e-4;

struct NodeId {
    int layer = 0;    // index in the bottom-to-top layer list
    int filter = 0;
    int pattern = 0;

    static constexpr NodeId dummy() { return {-1, -1, -1}; }
    constexpr bool is_dummy() const { return layer < 0; }

    friend constexpr auto operator<=>(const NodeId&, const NodeId&) = default;
};

std::string to_string(NodeId id);

struct Hyperparams {
    double tau = 0.1;
    int M = 15;
    int T = 20;
    double beta = 1.0;
    double lambda = 1.0 / 15.0;

    friend bool operator==(const Hyperparams&, const Hyperparams&) = default;
};

struct PatternNode {
    NodeId id;
    Vec2 mu;
    double sigma2 = kSigma2Floor;
    std::vector<NodeId> edges;  // nodes of layer L+1, or {dummy} on the top layer

    bool linked_to_dummy() const { return edges.size() == 1 && edges.front().is_dummy(); }

    friend bool operator==(const PatternNode&, const PatternNode&) = default;
};

struct LayerSpec {
    std::string layer_id;
    int depth = 1;                 // filter count D
    int patterns_per_filter = 1;   // N_{L,d}, shared by every filter of the layer

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct GraphLayer {
    LayerSpec spec;
    std::vector<PatternNode> nodes;  // flat index = filter * N + pattern

    std::size_t flat_index(int filter, int pattern) const {
        return static_cast<std::size_t>(filter) * spec.patterns_per_filter + pattern;
    }
    std::size_t flat_index(NodeId id) const { return flat_index(id.filter, id.pattern); }
    bool contains(NodeId id) const {
        return id.filter >= 0 && id.filter < spec.depth && id.pattern >= 0 &&
               id.pattern < spec.patterns_per_filter;
    }

    friend bool operator==(const GraphLayer&, const GraphLayer&) = default;
};

struct ExplanatoryGraph {
    Hyperparams hyperparams;
    std::vector<GraphLayer> layers;  // bottom-to-top

    const PatternNode& node(NodeId id) const {
        return layers[static_cast<std::size_t>(id.layer)].nodes[layers[static_cast<std::size_t>(id.layer)].flat_index(id)];
    }
    std::size_t node_count() const;

    friend bool operator==(const ExplanatoryGraph&, const ExplanatoryGraph&) = default;
};

// Allocates layers with nodes in flat order, mu = (0.5, 0.5), sigma2 at the
// floor and no edges.
ExplanatoryGraph make_graph_skeleton(const std::vector<LayerSpec>& specs, const Hyperparams& hp);

// Throws SchemaError (duplicate ids, variance below floor, skipped layers,
// bad hyperparameters) or DanglingEdge (edge to a node that does not exist).
void validate(const ExplanatoryGraph& g);

nlohmann::ordered_json graph_to_json(const ExplanatoryGraph& g);
ExplanatoryGraph graph_from_json(const nlohmann::json& doc);

std::string serialize_graph(const ExplanatoryGraph& g);
ExplanatoryGraph deserialize_graph(std::string_view text);

void save_graph(const std::filesystem::path& path, const ExplanatoryGraph& g);
ExplanatoryGraph load_graph(const std::filesystem::path& path);

nlohmann::ordered_json node_id_to_json(NodeId id);
NodeId node_id_from_json(const nlohmann::json& j);

}  // namespace expgraph
