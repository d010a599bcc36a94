#pragma once

// Dataset manifests and the sparse per-filter view of feature maps that the
// learner and inference operate on.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "expgraph/fmap.hpp"
#include "expgraph/geometry.hpp"

namespace expgraph {

struct ManifestLayer {
    std::string layer_id;
    std::filesystem::path path;  // relative paths resolve against the manifest directory
};

struct ManifestEntry {
    std::string image_id;
    std::vector<ManifestLayer> layers;
};

struct Manifest {
    std::filesystem::path base_dir;
    std::vector<ManifestEntry> images;
};

Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

// Units of one filter with positive activation-entity count, in linear order.
// Units with F(x) = 0 contribute nothing to any likelihood or score.
struct ActiveUnits {
    std::vector<Vec2> pos;
    std::vector<double> mass;
    std::vector<std::uint32_t> unit;  // linear index d*H*W + i*W + j

    std::size_t size() const { return pos.size(); }
    bool empty() const { return pos.empty(); }
};

struct LayerObservation {
    LayerMeta meta;
    std::vector<ActiveUnits> filters;  // one per filter d
};

struct ImageObservation {
    std::string image_id;
    std::vector<LayerObservation> layers;  // bottom-to-top, same order as the graph
};

LayerObservation observe(const FeatureMap& fm, double beta);
LayerObservation observe(std::span<const Unit> units, const LayerMeta& meta);

// Picks the maps named in layer_ids (bottom-to-top) out of one image.
ImageObservation observe_image(const FeatureMapSet& set, std::span<const std::string> layer_ids, double beta);

// Loads every image of the manifest. All images must provide every layer and
// agree on each layer's shape.
std::vector<ImageObservation> load_dataset(const Manifest& manifest,
                                           std::span<const std::string> layer_ids,
                                           double beta, int threads = 1);

void check_consistent_shapes(std::span<const ImageObservation> images);

}  // namespace expgraph
