#include "expgraph/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "expgraph/error.hpp"

namespace expgraph {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

ojson landmarks_to_json(const LandmarkSet& landmarks) {
    ojson doc = ojson::object();
    for (const auto& [image, parts] : landmarks) {
        ojson p = ojson::object();
        for (const auto& [name, pos] : parts) p[name] = {pos.u, pos.v};
        doc[image] = std::move(p);
    }
    return doc;
}

LandmarkSet landmarks_from_json(const json& doc) {
    if (!doc.is_object()) fail(ErrorKind::SchemaError, "landmarks must map image_id to parts");
    LandmarkSet out;
    for (const auto& [image, parts] : doc.items()) {
        if (!parts.is_object()) fail(ErrorKind::SchemaError, "landmarks of " + image + " must be an object");
        for (const auto& [name, pos] : parts.items()) {
            if (!pos.is_array() || pos.size() != 2 || !pos[0].is_number() || !pos[1].is_number())
                fail(ErrorKind::SchemaError, "landmark " + image + "/" + name + " must be [u,v]");
            out[image][name] = {pos[0].get<double>(), pos[1].get<double>()};
        }
    }
    return out;
}

LandmarkSet load_landmarks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) fail(ErrorKind::SchemaError, path.string() + " is not valid JSON");
    return landmarks_from_json(doc);
}

void save_landmarks(const std::filesystem::path& path, const LandmarkSet& landmarks) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    out << landmarks_to_json(landmarks).dump(1) << '\n';
}

InstabilityResult location_instability(std::span<const Observation> observations, const LandmarkSet& landmarks) {
    std::vector<const Observation*> used;
    std::vector<const std::map<std::string, Vec2>*> marks;
    for (const Observation& o : observations) {
        if (!o.detected) continue;
        auto it = landmarks.find(o.image_id);
        if (it == landmarks.end() || it->second.empty()) continue;
        used.push_back(&o);
        marks.push_back(&it->second);
    }
    if (used.size() < 2)
        fail(ErrorKind::InsufficientSamples, std::to_string(used.size()) + " usable image(s), need 2");

    std::set<std::string> parts;
    for (const auto& [name, pos] : *marks.front()) parts.insert(name);
    for (const auto* m : marks)
        for (auto it = parts.begin(); it != parts.end();)
            it = m->count(*it) ? std::next(it) : parts.erase(it);
    if (parts.empty()) fail(ErrorKind::InsufficientSamples, "no landmark part shared by all images");

    const double n = static_cast<double>(used.size());
    double sum_std = 0.0;
    for (const std::string& part : parts) {
        std::vector<double> dist;
        dist.reserve(used.size());
        for (std::size_t k = 0; k < used.size(); ++k)
            dist.push_back(norm(used[k]->p - marks[k]->at(part)) / kUnitDiagonal);
        const double mean = std::accumulate(dist.begin(), dist.end(), 0.0) / n;
        double var = 0.0;
        for (double d : dist) var += (d - mean) * (d - mean);
        sum_std += std::sqrt(var / n);
    }
    return {sum_std / static_cast<double>(parts.size()), used.size()};
}

std::vector<RankedInference> select_top_inferences(std::span<const Observation> observations, double ratio) {
    std::vector<double> scores;
    scores.reserve(observations.size());
    for (const Observation& o : observations) scores.push_back(o.detected ? o.score : 0.0);
    const std::size_t k = top_k_energy(scores, ratio);

    std::vector<std::size_t> order(observations.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<RankedInference> out;
    for (std::size_t r = 0; r < k; ++r) {
        const Observation& o = observations[order[r]];
        out.push_back({o.image_id, o.p, scores[order[r]]});
    }
    return out;
}

Heatmap render_heatmap(std::span<const NodeAssignment> assignments, const GraphLayer& layer, int size) {
    if (size < 1) fail(ErrorKind::InvalidArgument, "heat-map grid must be >= 1");
    Heatmap h;
    h.size = size;
    h.values.assign(static_cast<std::size_t>(size) * size, 0.0);

    std::vector<const NodeAssignment*> detected;
    for (const NodeAssignment& a : assignments)
        if (a.detected) detected.push_back(&a);
    std::stable_sort(detected.begin(), detected.end(),
                     [](const NodeAssignment* a, const NodeAssignment* b) { return a->score > b->score; });
    const auto keep = static_cast<std::size_t>(std::ceil(kHeatmapTopFraction * static_cast<double>(detected.size())));
    if (keep < detected.size()) {
        const double cutoff = detected[keep - 1]->score;
        std::size_t n = keep;
        while (n < detected.size() && detected[n]->score == cutoff) ++n;
        detected.resize(n);
    }

    for (const NodeAssignment* a : detected) {
        if (!layer.contains(a->node)) fail(ErrorKind::DanglingEdge, "assignment for unknown node " + to_string(a->node));
        const double sigma2 = layer.nodes[layer.flat_index(a->node)].sigma2;
        for (int r = 0; r < size; ++r)
            for (int c = 0; c < size; ++c) {
                const Vec2 cell{(c + 0.5) / size, (r + 0.5) / size};
                h.values[static_cast<std::size_t>(r) * size + c] += a->score * gaussian2(cell, a->p, sigma2);
            }
    }
    return h;
}

std::string heatmap_csv(const Heatmap& h) {
    std::string out;
    char buf[40];
    for (int r = 0; r < h.size; ++r) {
        for (int c = 0; c < h.size; ++c) {
            std::snprintf(buf, sizeof buf, "%.9g", h.at(r, c));
            if (c) out += ',';
            out += buf;
        }
        out += '\n';
    }
    return out;
}

std::string heatmap_pgm(const Heatmap& h) {
    double peak = 0.0;
    for (double v : h.values) peak = std::max(peak, v);
    std::string out = "P2\n" + std::to_string(h.size) + " " + std::to_string(h.size) + "\n255\n";
    for (int r = 0; r < h.size; ++r) {
        for (int c = 0; c < h.size; ++c) {
            const long level = peak > 0.0 ? std::lround(255.0 * h.at(r, c) / peak) : 0;
            if (c) out += ' ';
            out += std::to_string(level);
        }
        out += '\n';
    }
    return out;
}

}  // namespace expgraph
