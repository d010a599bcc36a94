#include "expgraph/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include "expgraph/error.hpp"

namespace expgraph {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

NodeAssignment undetected(const PatternNode& v) {
    NodeAssignment a;
    a.node = v.id;
    a.d = v.id.filter;
    a.p = v.mu;
    return a;
}

void set_unit(NodeAssignment& a, std::uint32_t linear, const LayerMeta& meta) {
    const int plane = meta.height * meta.width;
    a.d = static_cast<int>(linear) / plane;
    a.i = (static_cast<int>(linear) % plane) / meta.width;
    a.j = static_cast<int>(linear) % meta.width;
}

double score_from_log(double log_score) {
    // Keep a detected score strictly positive even when exp underflows.
    return std::max(std::exp(log_score), std::numeric_limits<double>::denorm_min());
}

}  // namespace

NodeAssignment assign_node(const PatternNode& v, const ActiveUnits& units, const LayerMeta& meta,
                           const GraphLayer* upper, const UpperContext& ctx) {
    NodeAssignment a = undetected(v);
    if (units.empty()) return a;
    const GaussianForm form = summarize(neighbor_terms(v, upper, ctx)).at(v.mu);
    double best = -std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t x = 0; x < units.size(); ++x) {
        const double s = std::log(units.mass[x]) + form.log_density(units.pos[x]);
        if (s > best) {
            best = s;
            arg = x;
        }
    }
    a.detected = true;
    a.p = units.pos[arg];
    a.score = score_from_log(best);
    set_unit(a, units.unit[arg], meta);
    return a;
}

NodeAssignment assign_node(const PatternNode& v, std::span<const Unit> units, const LayerMeta& meta,
                           const GraphLayer* upper, const UpperContext& ctx) {
    ActiveUnits active;
    for (const Unit& u : units) {
        if (u.d != v.id.filter)
            fail(ErrorKind::InvalidArgument, "unit of filter " + std::to_string(u.d) + " offered to node " +
                                                 to_string(v.id));
        if (u.mass <= 0.0) continue;
        active.pos.push_back(u.p);
        active.mass.push_back(u.mass);
        active.unit.push_back(static_cast<std::uint32_t>(meta.linear_index(u.d, u.i, u.j)));
    }
    // Dense input may come in any order; restore linear order for tie-breaking.
    std::vector<std::size_t> order(active.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return active.unit[a] < active.unit[b]; });
    ActiveUnits sorted;
    for (std::size_t k : order) {
        sorted.pos.push_back(active.pos[k]);
        sorted.mass.push_back(active.mass[k]);
        sorted.unit.push_back(active.unit[k]);
    }
    return assign_node(v, sorted, meta, upper, ctx);
}

std::vector<NodeAssignment> infer_layer(const GraphLayer& layer, const LayerObservation& obs,
                                        const GraphLayer* upper, const UpperContext& ctx) {
    if (obs.meta.depth != layer.spec.depth)
        fail(ErrorKind::ShapeMismatch, "layer " + layer.spec.layer_id + ": graph has " +
                                           std::to_string(layer.spec.depth) + " filters, map has " +
                                           std::to_string(obs.meta.depth));
    std::vector<NodeAssignment> out;
    out.reserve(layer.nodes.size());
    for (const PatternNode& v : layer.nodes)
        out.push_back(assign_node(v, obs.filters[static_cast<std::size_t>(v.id.filter)], obs.meta, upper, ctx));
    return out;
}

UpperContext to_context(std::span<const NodeAssignment> assignments) {
    UpperContext ctx;
    ctx.dummy = false;
    ctx.nodes.reserve(assignments.size());
    for (const NodeAssignment& a : assignments) ctx.nodes.push_back({a.p, a.score, a.detected});
    return ctx;
}

ImageInference infer_image(const ExplanatoryGraph& g, const ImageObservation& image) {
    ImageInference inf;
    inf.image_id = image.image_id;
    inf.layers.resize(g.layers.size());
    UpperContext ctx = UpperContext::top();
    for (std::size_t l = g.layers.size(); l-- > 0;) {
        const GraphLayer& layer = g.layers[l];
        const LayerObservation* obs = nullptr;
        for (const auto& o : image.layers)
            if (o.meta.layer_id == layer.spec.layer_id) obs = &o;
        if (!obs)
            fail(ErrorKind::LayerMissingInImage, "image " + image.image_id + " lacks layer " + layer.spec.layer_id);
        const GraphLayer* upper = l + 1 < g.layers.size() ? &g.layers[l + 1] : nullptr;
        inf.layers[l] = infer_layer(layer, *obs, upper, ctx);
        ctx = to_context(inf.layers[l]);
    }
    return inf;
}

std::size_t top_k_energy(std::span<const double> scores, double ratio) {
    if (!(ratio > 0.0 && ratio <= 1.0)) fail(ErrorKind::InvalidArgument, "ratio must lie in (0, 1]");
    std::vector<double> sorted(scores.begin(), scores.end());
    for (double s : sorted)
        if (!(s >= 0.0)) fail(ErrorKind::InvalidArgument, "scores must be nonnegative");
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    double total = 0.0;
    for (double s : sorted) total += s;
    if (!(total > 0.0)) fail(ErrorKind::AllZeroScores, "no positive score");
    const double target = ratio * total;
    double acc = 0.0;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
        acc += sorted[k];
        if (acc >= target) return k + 1;
    }
    // Only reachable through rounding when ratio == 1: the full prefix is the total.
    std::size_t nonzero = 0;
    for (double s : sorted) nonzero += s > 0.0;
    return nonzero;
}

ojson inference_to_json(const ImageInference& inf) {
    ojson arr = ojson::array();
    for (const auto& layer : inf.layers)
        for (const NodeAssignment& a : layer) {
            ojson o;
            o["node_id"] = node_id_to_json(a.node);
            o["unit"] = {a.d, a.i, a.j};
            o["p"] = {a.p.u, a.p.v};
            o["score"] = a.score;
            o["detected"] = a.detected;
            arr.push_back(std::move(o));
        }
    return arr;
}

ImageInference inference_from_json(const json& doc, const std::string& image_id, const ExplanatoryGraph& g) {
    if (!doc.is_array()) fail(ErrorKind::SchemaError, "inference document must be an array");
    ImageInference inf;
    inf.image_id = image_id;
    inf.layers.resize(g.layers.size());
    std::vector<std::vector<bool>> filled(g.layers.size());
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        inf.layers[l].resize(g.layers[l].nodes.size());
        filled[l].assign(g.layers[l].nodes.size(), false);
    }
    for (const json& o : doc) {
        if (!o.is_object() || !o.contains("node_id") || !o.contains("unit") || !o.contains("p") ||
            !o.contains("score") || !o.contains("detected"))
            fail(ErrorKind::SchemaError, "inference entry lacks a field: " + o.dump());
        NodeAssignment a;
        a.node = node_id_from_json(o["node_id"]);
        if (a.node.is_dummy() || a.node.layer >= static_cast<int>(g.layers.size()) ||
            !g.layers[static_cast<std::size_t>(a.node.layer)].contains(a.node))
            fail(ErrorKind::DanglingEdge, "inference for unknown node " + to_string(a.node));
        const json& unit = o["unit"];
        const json& p = o["p"];
        if (!unit.is_array() || unit.size() != 3 || !p.is_array() || p.size() != 2 || !o["score"].is_number() ||
            !o["detected"].is_boolean())
            fail(ErrorKind::SchemaError, "malformed inference entry: " + o.dump());
        a.d = unit[0].get<int>();
        a.i = unit[1].get<int>();
        a.j = unit[2].get<int>();
        a.p = {p[0].get<double>(), p[1].get<double>()};
        a.score = o["score"].get<double>();
        a.detected = o["detected"].get<bool>();
        const auto l = static_cast<std::size_t>(a.node.layer);
        const std::size_t f = g.layers[l].flat_index(a.node);
        if (filled[l][f]) fail(ErrorKind::SchemaError, "duplicate inference for " + to_string(a.node));
        filled[l][f] = true;
        inf.layers[l][f] = a;
    }
    for (std::size_t l = 0; l < filled.size(); ++l)
        for (std::size_t f = 0; f < filled[l].size(); ++f)
            if (!filled[l][f])
                fail(ErrorKind::SchemaError, "image " + image_id + " lacks inference for " +
                                                 to_string(g.layers[l].nodes[f].id));
    return inf;
}

void save_inference(const std::filesystem::path& path, const ImageInference& inf) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    out << inference_to_json(inf).dump(1) << '\n';
}

ImageInference load_inference(const std::filesystem::path& path, const std::string& image_id,
                              const ExplanatoryGraph& g) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) fail(ErrorKind::SchemaError, path.string() + " is not valid JSON");
    return inference_from_json(doc, image_id, g);
}

}  // namespace expgraph
