#include "expgraph/dataset.hpp"

#include <fstream>

#include <json.hpp>

#include "expgraph/error.hpp"
#include "expgraph/parallel.hpp"

namespace expgraph {

using nlohmann::json;

Manifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open manifest " + path.string());
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_array())
        fail(ErrorKind::SchemaError, path.string() + ": manifest must be a JSON array");

    Manifest m;
    m.base_dir = path.parent_path();
    for (const json& e : doc) {
        if (!e.is_object() || !e.contains("image_id") || !e.contains("layers") ||
            !e["image_id"].is_string() || !e["layers"].is_array())
            fail(ErrorKind::SchemaError, path.string() + ": entries need image_id and layers");
        ManifestEntry entry;
        entry.image_id = e["image_id"].get<std::string>();
        for (const json& l : e["layers"]) {
            if (!l.is_object() || !l.contains("layer_id") || !l.contains("path") ||
                !l["layer_id"].is_string() || !l["path"].is_string())
                fail(ErrorKind::SchemaError, path.string() + ": layer entries need layer_id and path");
            entry.layers.push_back({l["layer_id"].get<std::string>(), l["path"].get<std::string>()});
        }
        m.images.push_back(std::move(entry));
    }
    return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& manifest) {
    nlohmann::ordered_json doc = nlohmann::ordered_json::array();
    for (const auto& e : manifest.images) {
        nlohmann::ordered_json layers = nlohmann::ordered_json::array();
        for (const auto& l : e.layers) {
            nlohmann::ordered_json o;
            o["layer_id"] = l.layer_id;
            o["path"] = l.path.generic_string();
            layers.push_back(o);
        }
        nlohmann::ordered_json o;
        o["image_id"] = e.image_id;
        o["layers"] = layers;
        doc.push_back(o);
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    out << doc.dump(1) << '\n';
}

LayerObservation observe(std::span<const Unit> units, const LayerMeta& meta) {
    LayerObservation obs;
    obs.meta = meta;
    obs.filters.resize(static_cast<std::size_t>(meta.depth));
    for (const Unit& u : units) {
        if (u.d < 0 || u.d >= meta.depth)
            fail(ErrorKind::IndexOutOfRange, "unit filter " + std::to_string(u.d) + " in " + meta.layer_id);
        if (u.mass <= 0.0) continue;
        ActiveUnits& a = obs.filters[static_cast<std::size_t>(u.d)];
        a.pos.push_back(u.p);
        a.mass.push_back(u.mass);
        a.unit.push_back(static_cast<std::uint32_t>(meta.linear_index(u.d, u.i, u.j)));
    }
    return obs;
}

LayerObservation observe(const FeatureMap& fm, double beta) {
    auto units = normalize_responses(fm, beta);
    return observe(units, fm.meta);
}

ImageObservation observe_image(const FeatureMapSet& set, std::span<const std::string> layer_ids, double beta) {
    ImageObservation img;
    img.image_id = set.image_id;
    for (const auto& id : layer_ids) {
        const FeatureMap* found = nullptr;
        for (const auto& fm : set.maps)
            if (fm.meta.layer_id == id) found = &fm;
        if (!found) fail(ErrorKind::LayerMissingInImage, "image " + set.image_id + " lacks layer " + id);
        img.layers.push_back(observe(*found, beta));
    }
    return img;
}

std::vector<ImageObservation> load_dataset(const Manifest& manifest, std::span<const std::string> layer_ids,
                                           double beta, int threads) {
    if (manifest.images.empty()) fail(ErrorKind::EmptyDataset, "manifest lists no images");
    std::vector<ImageObservation> out(manifest.images.size());
    parallel_for(manifest.images.size(), threads, [&](std::size_t k) {
        const ManifestEntry& e = manifest.images[k];
        ImageObservation img;
        img.image_id = e.image_id;
        for (const auto& id : layer_ids) {
            const ManifestLayer* found = nullptr;
            for (const auto& l : e.layers)
                if (l.layer_id == id) found = &l;
            if (!found) fail(ErrorKind::LayerMissingInImage, "image " + e.image_id + " lacks layer " + id);
            std::filesystem::path p = found->path.is_absolute() ? found->path : manifest.base_dir / found->path;
            FeatureMap fm = load_fmap(p);
            if (fm.meta.layer_id != id)
                fail(ErrorKind::SchemaError, p.string() + ": header layer_id " + fm.meta.layer_id +
                                                 " does not match manifest layer " + id);
            img.layers.push_back(observe(fm, beta));
        }
        out[k] = std::move(img);
    });
    check_consistent_shapes(out);
    return out;
}

void check_consistent_shapes(std::span<const ImageObservation> images) {
    if (images.empty()) return;
    const auto& ref = images.front();
    for (const auto& img : images) {
        if (img.layers.size() != ref.layers.size())
            fail(ErrorKind::ShapeMismatch, "image " + img.image_id + " has a different layer count");
        for (std::size_t l = 0; l < ref.layers.size(); ++l) {
            const LayerMeta& a = ref.layers[l].meta;
            const LayerMeta& b = img.layers[l].meta;
            if (a.depth != b.depth || a.height != b.height || a.width != b.width)
                fail(ErrorKind::ShapeMismatch, "layer " + a.layer_id + " shape differs in image " + img.image_id);
        }
    }
}

}  // namespace expgraph
