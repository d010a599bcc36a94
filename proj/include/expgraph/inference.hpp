#pragma once

// Pattern-position inference: every node is assigned to the unit of its
// filter that maximizes S = F(x) * compatibility(p_x), top layer first.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "expgraph/compat.hpp"
#include "expgraph/dataset.hpp"
#include "expgraph/graph.hpp"

namespace expgraph {

struct NodeAssignment {
    NodeId node;
    int d = 0;
    int i = 0;
    int j = 0;
    Vec2 p;              // inferred position, mu_V when undetected
    double score = 0.0;  // S of the chosen unit
    bool detected = false;

    friend bool operator==(const NodeAssignment&, const NodeAssignment&) = default;
};

// Argmax over the active units of V's filter; ties go to the smallest linear
// index. With no active unit the node is undetected and falls back to mu_V.
NodeAssignment assign_node(const PatternNode& v, const ActiveUnits& units, const LayerMeta& meta,
                           const GraphLayer* upper, const UpperContext& ctx);

// Same contract over dense units (zero-mass units never win).
NodeAssignment assign_node(const PatternNode& v, std::span<const Unit> units, const LayerMeta& meta,
                           const GraphLayer* upper, const UpperContext& ctx);

std::vector<NodeAssignment> infer_layer(const GraphLayer& layer, const LayerObservation& obs,
                                        const GraphLayer* upper, const UpperContext& ctx);

UpperContext to_context(std::span<const NodeAssignment> assignments);

// Per-layer assignments for one image, bottom-to-top like the graph.
struct ImageInference {
    std::string image_id;
    std::vector<std::vector<NodeAssignment>> layers;
};

// Throws LayerMissingInImage if the image lacks a graph layer.
ImageInference infer_image(const ExplanatoryGraph& g, const ImageObservation& image);

// Smallest K such that the K largest scores hold at least `ratio` of the
// total. Throws AllZeroScores when nothing is positive.
std::size_t top_k_energy(std::span<const double> scores, double ratio);

nlohmann::ordered_json inference_to_json(const ImageInference& inf);
ImageInference inference_from_json(const nlohmann::json& doc, const std::string& image_id,
                                   const ExplanatoryGraph& g);

void save_inference(const std::filesystem::path& path, const ImageInference& inf);
ImageInference load_inference(const std::filesystem::path& path, const std::string& image_id,
                              const ExplanatoryGraph& g);

}  // namespace expgraph
