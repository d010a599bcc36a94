#pragma once

// Multi-shot part localization on top of an explanatory graph, organized as a
// small And-Or graph: semantic part (OR over templates) -> part template (AND
// over retrieved patterns) -> latent pattern (OR over units, resolved by
// inference).
//
// Retrieval and voting use a simple scheme:
//   retrieval score of V for a template  w = S_V * exp(-|p_V - c|^2 / (2 r^2))
//   each pattern votes for p_V + delta,  delta = c - p_V on the annotated image
// with c the annotated part center and r the proximity bandwidth.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "expgraph/graph.hpp"
#include "expgraph/inference.hpp"

namespace expgraph {

inline constexpr double kAogBandwidth = 0.1;
inline constexpr double kAogRetrievalFraction = 0.1;

struct AogPattern {
    NodeId node;
    Vec2 delta;
    double weight = 0.0;

    friend bool operator==(const AogPattern&, const AogPattern&) = default;
};

struct PartTemplate {
    std::vector<AogPattern> patterns;

    friend bool operator==(const PartTemplate&, const PartTemplate&) = default;
};

struct AOGModel {
    std::string part;
    double bandwidth = kAogBandwidth;
    std::vector<PartTemplate> templates;

    friend bool operator==(const AOGModel&, const AOGModel&) = default;
};

struct PartAnnotation {
    std::string image_id;
    Vec2 center;
    int template_index = 0;
};

// K = 0.1 * sum of N_{L,d} over all filters of all layers, at least 1.
std::size_t default_retrieval_count(std::span<const LayerSpec> layers);
std::size_t default_retrieval_count(const ExplanatoryGraph& g);

struct AogBuild {
    AOGModel model;
    std::vector<std::string> warnings;
};

// One annotation per template, indices 0..m-1. Throws NoDetectedPatterns when
// an annotated image has no detected pattern to retrieve.
AogBuild build_aog(const ExplanatoryGraph& g, std::span<const ImageInference> inferences,
                   std::span<const PartAnnotation> annotations, std::size_t k, const std::string& part);

struct Localization {
    Vec2 position;
    int template_index = 0;
    double score = 0.0;
};

// Weighted vote of each template's detected patterns; the best-scoring
// template wins, ties to the lower index. Throws NoDetectedPatterns.
Localization localize_part(const AOGModel& aog, const ImageInference& inference);

// Euclidean distance over the diagonal of the unit image square.
double normalized_distance(Vec2 predicted, Vec2 truth);

nlohmann::ordered_json aog_to_json(const AOGModel& aog);
AOGModel aog_from_json(const nlohmann::json& doc);
void save_aog(const std::filesystem::path& path, const AOGModel& aog);
AOGModel load_aog(const std::filesystem::path& path);

std::vector<PartAnnotation> load_annotations(const std::filesystem::path& path);
void save_annotations(const std::filesystem::path& path, std::span<const PartAnnotation> annotations);

}  // namespace expgraph
