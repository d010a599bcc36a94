#pragma once

// .fmap container: dense per-layer activation tensors plus the metadata
// needed to project feature-map units onto the image plane.
//
// Layout (all integers little-endian):
//   bytes 0..7    magic "FMAP0001"
//   bytes 8..11   u32 header length n
//   bytes 12..    n bytes of UTF-8 JSON header
//   then          D*H*W float32 values, d-major, then row i, then column j

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "expgraph/geometry.hpp"

namespace expgraph {

inline constexpr std::string_view kFmapMagic = "FMAP0001";

struct PixelPoint {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(PixelPoint, PixelPoint) = default;
};

struct LayerMeta {
    std::string layer_id;
    int depth = 1;
    int height = 1;
    int width = 1;
    double stride_px = 1.0;
    PixelPoint offset_px;     // receptive-field center of unit (0, 0)
    double image_width_px = 1.0;
    double image_height_px = 1.0;
    double image_diag_px = 1.0;

    std::size_t unit_count() const {
        return static_cast<std::size_t>(depth) * height * width;
    }
    std::size_t linear_index(int d, int i, int j) const {
        return (static_cast<std::size_t>(d) * height + i) * width + j;
    }

    friend bool operator==(const LayerMeta&, const LayerMeta&) = default;
};

// Throws InvalidArgument when a dimension or scale is non-positive.
void validate(const LayerMeta& meta);

struct FeatureMap {
    std::string image_id;
    LayerMeta meta;
    std::vector<float> values;  // size meta.unit_count()

    // Header bytes as read from disk. Re-emitted verbatim on write as long as
    // they still describe image_id and meta, which keeps load/write lossless
    // for containers produced by other tools.
    std::string header_text;
};

struct Unit {
    int d = 0;
    int i = 0;
    int j = 0;
    Vec2 p;
    double f = 0.0;       // normalized response, <= 1
    double mass = 0.0;    // activation-entity count F = beta * max(f, 0)
};

// One image's maps for the selected layers, bottom-to-top.
struct FeatureMapSet {
    std::string image_id;
    std::vector<FeatureMap> maps;
};

std::vector<std::uint8_t> encode_fmap(const FeatureMap& fm);
FeatureMap decode_fmap(std::span<const std::uint8_t> bytes, std::string_view source = "<memory>");

FeatureMap load_fmap(const std::filesystem::path& path);
void write_fmap(const std::filesystem::path& path, const FeatureMap& fm);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Receptive-field center of unit (i, j) in normalized image coordinates,
// clamped to [0, 1]^2.
Vec2 project_position(int i, int j, const LayerMeta& meta);

// Divides by the map's maximum activation (1 when nothing is positive) and
// converts to activation-entity counts. Units come out in linear order.
std::vector<Unit> normalize_responses(const FeatureMap& fm, double beta);

}  // namespace expgraph
