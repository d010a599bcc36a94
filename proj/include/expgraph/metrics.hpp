#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "expgraph/geometry.hpp"
#include "expgraph/graph.hpp"
#include "expgraph/inference.hpp"

namespace expgraph {

// image_id -> part name -> normalized landmark position.
using LandmarkSet = std::map<std::string, std::map<std::string, Vec2>>;

LandmarkSet load_landmarks(const std::filesystem::path& path);
void save_landmarks(const std::filesystem::path& path, const LandmarkSet& landmarks);
nlohmann::ordered_json landmarks_to_json(const LandmarkSet& landmarks);
LandmarkSet landmarks_from_json(const nlohmann::json& doc);

// One node's inferred position in one image.
struct Observation {
    std::string image_id;
    Vec2 p;
    double score = 0.0;
    bool detected = false;
};

struct InstabilityResult {
    double value = 0.0;
    std::size_t images = 0;  // images that entered the statistic
};

// Mean over landmark parts of the population standard deviation, across
// images, of |p_V - landmark| / sqrt(2). Undetected observations and images
// without landmarks are skipped; the parts used are those every remaining
// image annotates. Throws InsufficientSamples with fewer than two images.
InstabilityResult location_instability(std::span<const Observation> observations, const LandmarkSet& landmarks);

struct RankedInference {
    std::string image_id;
    Vec2 p;
    double score = 0.0;
};

// The top-K images by score with K = top_k_energy(scores, ratio); ties keep
// input order. Throws AllZeroScores.
std::vector<RankedInference> select_top_inferences(std::span<const Observation> observations, double ratio = 0.3);

inline constexpr int kDefaultHeatmapGrid = 56;
inline constexpr double kHeatmapTopFraction = 0.5;

// Row-major grid of density values; cell (r, c) is sampled at its center
// ((c + 0.5) / size, (r + 0.5) / size). Values are densities, not cell
// masses: multiply by 1 / size^2 for the mass a cell holds.
struct Heatmap {
    int size = 0;
    std::vector<double> values;

    double at(int row, int col) const { return values[static_cast<std::size_t>(row) * size + col]; }
};

// Sum of S * N(cell | p_V, sigma2_V) over the top half (by score, ceil) of the
// layer's detected nodes. Nodes tied with the last one kept are kept too.
Heatmap render_heatmap(std::span<const NodeAssignment> assignments, const GraphLayer& layer, int size = kDefaultHeatmapGrid);

std::string heatmap_csv(const Heatmap& h);
std::string heatmap_pgm(const Heatmap& h);   // ASCII P2, scaled so the peak is 255

}  // namespace expgraph
