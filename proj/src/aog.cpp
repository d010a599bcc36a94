#include "expgraph/aog.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

#include "expgraph/error.hpp"

namespace expgraph {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

std::size_t default_retrieval_count(std::span<const LayerSpec> layers) {
    double total = 0.0;
    for (const LayerSpec& l : layers) total += static_cast<double>(l.depth) * l.patterns_per_filter;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(kAogRetrievalFraction * total)));
}

std::size_t default_retrieval_count(const ExplanatoryGraph& g) {
    std::vector<LayerSpec> specs;
    for (const auto& l : g.layers) specs.push_back(l.spec);
    return default_retrieval_count(specs);
}

namespace {

const NodeAssignment& lookup(const ImageInference& inf, NodeId id) {
    if (id.is_dummy() || id.layer < 0 || static_cast<std::size_t>(id.layer) >= inf.layers.size())
        fail(ErrorKind::DanglingEdge, "image " + inf.image_id + " has no inference for " + to_string(id));
    for (const NodeAssignment& a : inf.layers[static_cast<std::size_t>(id.layer)])
        if (a.node == id) return a;
    fail(ErrorKind::DanglingEdge, "image " + inf.image_id + " has no inference for " + to_string(id));
}

}  // namespace

AogBuild build_aog(const ExplanatoryGraph& g, std::span<const ImageInference> inferences,
                   std::span<const PartAnnotation> annotations, std::size_t k, const std::string& part) {
    if (k < 1) fail(ErrorKind::InvalidArgument, "K must be >= 1");
    if (annotations.empty()) fail(ErrorKind::InvalidArgument, "need at least one part annotation");
    std::vector<const PartAnnotation*> by_template(annotations.size(), nullptr);
    for (const PartAnnotation& a : annotations) {
        if (a.template_index < 0 || static_cast<std::size_t>(a.template_index) >= annotations.size())
            fail(ErrorKind::InvalidArgument, "template indices must run 0..m-1");
        auto& slot = by_template[static_cast<std::size_t>(a.template_index)];
        if (slot) fail(ErrorKind::InvalidArgument, "template " + std::to_string(a.template_index) + " annotated twice");
        slot = &a;
    }

    AogBuild out;
    out.model.part = part;
    out.model.bandwidth = kAogBandwidth;
    const double r2 = 2.0 * kAogBandwidth * kAogBandwidth;
    for (const PartAnnotation* ann : by_template) {
        const ImageInference* inf = nullptr;
        for (const ImageInference& candidate : inferences)
            if (candidate.image_id == ann->image_id) inf = &candidate;
        if (!inf) fail(ErrorKind::InvalidArgument, "no inference for annotated image " + ann->image_id);
        if (inf->layers.size() != g.layers.size())
            fail(ErrorKind::ShapeMismatch, "inference of " + ann->image_id + " does not match the graph");

        std::vector<AogPattern> ranked;
        for (const auto& layer : inf->layers)
            for (const NodeAssignment& a : layer) {
                if (!a.detected) continue;
                const double w = a.score * std::exp(-squared_norm(a.p - ann->center) / r2);
                ranked.push_back({a.node, ann->center - a.p, w});
            }
        if (ranked.empty() || std::none_of(ranked.begin(), ranked.end(), [](const AogPattern& p) { return p.weight > 0.0; }))
            fail(ErrorKind::NoDetectedPatterns, "annotated image " + ann->image_id);
        std::stable_sort(ranked.begin(), ranked.end(), [](const AogPattern& a, const AogPattern& b) {
            if (a.weight != b.weight) return a.weight > b.weight;
            return a.node < b.node;
        });
        if (k > ranked.size())
            out.warnings.push_back("template " + std::to_string(ann->template_index) + ": K = " + std::to_string(k) +
                                   " exceeds the " + std::to_string(ranked.size()) + " detected patterns; keeping all");
        ranked.resize(std::min(k, ranked.size()));
        out.model.templates.push_back({std::move(ranked)});
    }
    return out;
}

Localization localize_part(const AOGModel& aog, const ImageInference& inference) {
    const double r2 = 2.0 * aog.bandwidth * aog.bandwidth;
    Localization best;
    bool found = false;
    for (std::size_t t = 0; t < aog.templates.size(); ++t) {
        const auto& patterns = aog.templates[t].patterns;
        std::vector<Vec2> votes;
        std::vector<double> weights;
        double total = 0.0;
        Vec2 acc;
        for (const AogPattern& pat : patterns) {
            const NodeAssignment& a = lookup(inference, pat.node);
            if (!a.detected || !(pat.weight > 0.0)) continue;
            const Vec2 vote = a.p + pat.delta;
            votes.push_back(vote);
            weights.push_back(pat.weight);
            total += pat.weight;
            acc += pat.weight * vote;
        }
        if (!(total > 0.0)) continue;
        const Vec2 candidate = acc / total;
        double score = 0.0;
        for (std::size_t k = 0; k < votes.size(); ++k)
            score += weights[k] * std::exp(-squared_norm(votes[k] - candidate) / r2);
        if (!found || score > best.score) {
            best = {candidate, static_cast<int>(t), score};
            found = true;
        }
    }
    if (!found) fail(ErrorKind::NoDetectedPatterns, "no template pattern detected in " + inference.image_id);
    return best;
}

double normalized_distance(Vec2 predicted, Vec2 truth) { return norm(predicted - truth) / kUnitDiagonal; }

ojson aog_to_json(const AOGModel& aog) {
    ojson doc;
    doc["part"] = aog.part;
    doc["bandwidth"] = aog.bandwidth;
    ojson templates = ojson::array();
    for (const PartTemplate& t : aog.templates) {
        ojson patterns = ojson::array();
        for (const AogPattern& p : t.patterns) {
            ojson o;
            o["node_id"] = node_id_to_json(p.node);
            o["delta"] = {p.delta.u, p.delta.v};
            o["weight"] = p.weight;
            patterns.push_back(std::move(o));
        }
        ojson tj;
        tj["patterns"] = std::move(patterns);
        templates.push_back(std::move(tj));
    }
    doc["templates"] = std::move(templates);
    return doc;
}

AOGModel aog_from_json(const json& doc) {
    AOGModel aog;
    try {
        aog.part = doc.at("part").get<std::string>();
        aog.bandwidth = doc.at("bandwidth").get<double>();
        for (const json& tj : doc.at("templates")) {
            PartTemplate t;
            for (const json& o : tj.at("patterns")) {
                AogPattern p;
                p.node = node_id_from_json(o.at("node_id"));
                p.delta = {o.at("delta").at(0).get<double>(), o.at("delta").at(1).get<double>()};
                p.weight = o.at("weight").get<double>();
                if (p.weight < 0.0) fail(ErrorKind::SchemaError, "negative pattern weight");
                t.patterns.push_back(p);
            }
            if (t.patterns.empty()) fail(ErrorKind::SchemaError, "template without patterns");
            aog.templates.push_back(std::move(t));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::SchemaError, std::string("aog: ") + e.what());
    }
    if (!(aog.bandwidth > 0.0)) fail(ErrorKind::SchemaError, "aog bandwidth must be > 0");
    return aog;
}

void save_aog(const std::filesystem::path& path, const AOGModel& aog) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    out << aog_to_json(aog).dump(1) << '\n';
}

AOGModel load_aog(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) fail(ErrorKind::SchemaError, path.string() + " is not valid JSON");
    return aog_from_json(doc);
}

std::vector<PartAnnotation> load_annotations(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_array()) fail(ErrorKind::SchemaError, path.string() + " must be a JSON array");
    std::vector<PartAnnotation> out;
    try {
        for (const json& o : doc)
            out.push_back({o.at("image_id").get<std::string>(),
                           {o.at("center").at(0).get<double>(), o.at("center").at(1).get<double>()},
                           o.at("template").get<int>()});
    } catch (const json::exception& e) {
        fail(ErrorKind::SchemaError, std::string("annotations: ") + e.what());
    }
    return out;
}

void save_annotations(const std::filesystem::path& path, std::span<const PartAnnotation> annotations) {
    ojson doc = ojson::array();
    for (const PartAnnotation& a : annotations) {
        ojson o;
        o["image_id"] = a.image_id;
        o["center"] = {a.center.u, a.center.v};
        o["template"] = a.template_index;
        doc.push_back(std::move(o));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    out << doc.dump(1) << '\n';
}

}  // namespace expgraph
