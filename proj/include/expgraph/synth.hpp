#pragma once

// Planted-graph generator: builds a known explanatory graph and renders
// feature maps from it, so learning and inference can be scored against
// ground truth without a CNN.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "expgraph/fmap.hpp"
#include "expgraph/graph.hpp"
#include "expgraph/metrics.hpp"

namespace expgraph {

struct SynthLayerSpec {
    std::string layer_id;
    int depth = 1;
    int height = 14;
    int width = 14;
    int patterns_per_filter = 1;
};

struct SynthSpec {
    std::vector<SynthLayerSpec> layers;  // bottom-to-top, square grids
    double image_size_px = 224.0;
    double pattern_sigma = 0.01;         // std of a pattern's per-image position noise
    int edges_per_node = 2;              // planted |E_V| below the top layer
    double jitter_std = 0.05;            // per-image global object displacement
    int noise_peaks_per_filter = 0;
    double amplitude_min = 0.5;
    double amplitude_max = 1.0;
    double noise_amplitude_min = 0.2;
    double noise_amplitude_max = 0.6;
    double min_separation = 0.25;        // planted centers of one filter are at least this far apart
    double placement_margin = 0.15;      // planted centers lie in [margin, 1 - margin]^2
    double render_cutoff = 3.0;          // bumps vanish beyond this many grid steps; 0 keeps full support
    std::map<std::string, Vec2> landmarks{{"head", {0.3, 0.3}}, {"back", {0.5, 0.45}}, {"tail", {0.72, 0.62}}};
    std::uint64_t seed = 0;

    // Throws InvalidArgument.
    void validate() const;
    std::vector<LayerSpec> layer_specs() const;
};

// Two layers, 10 filters x 3 patterns, two planted edges per lower node and
// one noise peak per filter map.
SynthSpec reference_synth_spec(std::uint64_t seed = 0);

nlohmann::ordered_json synth_spec_to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& doc);

// Centers of one filter are separated by max(3 * pattern_sigma,
// min_separation); throws SeparationUnsatisfiable if rejection sampling
// cannot place them.
ExplanatoryGraph gen_planted_graph(const SynthSpec& spec);

struct ImageTruth {
    std::string image_id;
    Vec2 jitter;
    std::vector<std::vector<Vec2>> positions;  // per layer, per planted node (flat order)
    std::map<std::string, Vec2> landmarks;
};

struct SynthDataset {
    std::vector<FeatureMapSet> images;
    std::vector<ImageTruth> truth;

    LandmarkSet landmark_set() const;
};

SynthDataset sample_images(const ExplanatoryGraph& planted, int n_images, const SynthSpec& spec, int threads = 1);

// Writes <image>_<layer>.fmap files, manifest.json, truth.json and
// landmarks.json into dir.
void write_synthetic(const std::filesystem::path& dir, const ExplanatoryGraph& planted, const SynthDataset& data);

nlohmann::ordered_json truth_to_json(const ExplanatoryGraph& planted, const SynthDataset& data);

// Minimum-cost assignment of rows to columns of a square cost matrix.
// Returns assignment[row] = column.
std::vector<int> match_exhaustive(const std::vector<std::vector<double>>& cost);
std::vector<int> match_hungarian(const std::vector<std::vector<double>>& cost);

struct RecoveryReport {
    double mean_error = 0.0;                   // over all planted patterns
    double match_rate = 0.0;                   // fraction with error < threshold
    std::vector<std::vector<double>> errors;   // per layer, per planted node
    std::vector<std::vector<NodeId>> matched;  // learned partner of each planted node
};

// Per filter, pairs planted and learned patterns to minimize the summed mu
// distance (exhaustive for N <= 6, Hungarian above). Throws ShapeMismatch.
RecoveryReport recovery_error(const ExplanatoryGraph& planted, const ExplanatoryGraph& learned,
                              double threshold = 0.02);

}  // namespace expgraph
