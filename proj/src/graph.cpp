#include "expgraph/graph.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "expgraph/error.hpp"

namespace expgraph {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string to_string(NodeId id) {
    if (id.is_dummy()) return "dummy";
    return "(" + std::to_string(id.layer) + "," + std::to_string(id.filter) + "," + std::to_string(id.pattern) + ")";
}

std::size_t ExplanatoryGraph::node_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.nodes.size();
    return n;
}

ExplanatoryGraph make_graph_skeleton(const std::vector<LayerSpec>& specs, const Hyperparams& hp) {
    ExplanatoryGraph g;
    g.hyperparams = hp;
    for (std::size_t l = 0; l < specs.size(); ++l) {
        GraphLayer layer;
        layer.spec = specs[l];
        for (int d = 0; d < layer.spec.depth; ++d)
            for (int k = 0; k < layer.spec.patterns_per_filter; ++k) {
                PatternNode n;
                n.id = {static_cast<int>(l), d, k};
                n.mu = {0.5, 0.5};
                n.sigma2 = kSigma2Floor;
                layer.nodes.push_back(std::move(n));
            }
        g.layers.push_back(std::move(layer));
    }
    return g;
}

void validate(const ExplanatoryGraph& g) {
    const Hyperparams& hp = g.hyperparams;
    if (!(hp.tau > 0.0) || hp.M < 1 || hp.T < 0 || !(hp.beta > 0.0))
        fail(ErrorKind::SchemaError, "hyperparams need tau > 0, M >= 1, T >= 0, beta > 0");
    if (std::abs(hp.lambda * hp.M - 1.0) > 1e-12)
        fail(ErrorKind::SchemaError, "lambda * M must equal 1");
    if (g.layers.empty()) fail(ErrorKind::SchemaError, "graph has no layers");

    std::set<std::string> layer_ids;
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        const GraphLayer& layer = g.layers[l];
        const LayerSpec& spec = layer.spec;
        if (!layer_ids.insert(spec.layer_id).second)
            fail(ErrorKind::SchemaError, "duplicate layer_id " + spec.layer_id);
        if (spec.depth < 1 || spec.patterns_per_filter < 1)
            fail(ErrorKind::SchemaError, "layer " + spec.layer_id + ": D and N must be >= 1");

        std::set<NodeId> seen;
        for (const PatternNode& n : layer.nodes)
            if (!seen.insert(n.id).second) fail(ErrorKind::SchemaError, "duplicate node id " + to_string(n.id));
        const std::size_t expected = static_cast<std::size_t>(spec.depth) * spec.patterns_per_filter;
        if (layer.nodes.size() != expected)
            fail(ErrorKind::SchemaError, "layer " + spec.layer_id + " holds " + std::to_string(layer.nodes.size()) +
                                             " nodes, expected D*N = " + std::to_string(expected));

        const bool top = l + 1 == g.layers.size();
        for (std::size_t f = 0; f < layer.nodes.size(); ++f) {
            const PatternNode& n = layer.nodes[f];
            if (n.id.layer != static_cast<int>(l) || !layer.contains(n.id) || layer.flat_index(n.id) != f)
                fail(ErrorKind::SchemaError, "node " + to_string(n.id) + " out of place in layer " + spec.layer_id);
            if (!std::isfinite(n.mu.u) || !std::isfinite(n.mu.v) || n.mu.u < 0.0 || n.mu.u > 1.0 ||
                n.mu.v < 0.0 || n.mu.v > 1.0)
                fail(ErrorKind::SchemaError, "node " + to_string(n.id) + ": mu outside [0,1]^2");
            if (!std::isfinite(n.sigma2) || n.sigma2 < kSigma2Floor)
                fail(ErrorKind::SchemaError, "node " + to_string(n.id) + ": sigma2 below floor");

            if (top) {
                if (!n.linked_to_dummy())
                    fail(ErrorKind::SchemaError, "top-layer node " + to_string(n.id) + " must link to the dummy node");
                continue;
            }
            if (n.edges.size() != static_cast<std::size_t>(hp.M))
                fail(ErrorKind::SchemaError, "node " + to_string(n.id) + " has " + std::to_string(n.edges.size()) +
                                                 " edges, expected M = " + std::to_string(hp.M));
            std::set<NodeId> targets;
            for (NodeId e : n.edges) {
                if (e.is_dummy())
                    fail(ErrorKind::SchemaError, "non-top node " + to_string(n.id) + " links to the dummy node");
                if (e.layer != static_cast<int>(l) + 1)
                    fail(ErrorKind::SchemaError, "edge " + to_string(n.id) + " -> " + to_string(e) +
                                                     " does not target the next layer");
                if (!g.layers[l + 1].contains(e))
                    fail(ErrorKind::DanglingEdge, to_string(n.id) + " -> " + to_string(e));
                if (!targets.insert(e).second)
                    fail(ErrorKind::SchemaError, "node " + to_string(n.id) + " repeats edge " + to_string(e));
            }
        }
    }
}

ojson node_id_to_json(NodeId id) {
    if (id.is_dummy()) return "dummy";
    return ojson::array({id.layer, id.filter, id.pattern});
}

NodeId node_id_from_json(const json& j) {
    if (j.is_string() && j.get<std::string>() == "dummy") return NodeId::dummy();
    if (!j.is_array() || j.size() != 3 || !j[0].is_number_integer() || !j[1].is_number_integer() ||
        !j[2].is_number_integer())
        fail(ErrorKind::SchemaError, "node id must be [L,d,k] or \"dummy\": " + j.dump());
    NodeId id{j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
    if (id.layer < 0 || id.filter < 0 || id.pattern < 0)
        fail(ErrorKind::SchemaError, "negative node id component: " + j.dump());
    return id;
}

ojson graph_to_json(const ExplanatoryGraph& g) {
    ojson doc;
    doc["version"] = kGraphSchemaVersion;
    ojson hp;
    hp["tau"] = g.hyperparams.tau;
    hp["M"] = g.hyperparams.M;
    hp["T"] = g.hyperparams.T;
    hp["beta"] = g.hyperparams.beta;
    hp["lambda"] = g.hyperparams.lambda;
    doc["hyperparams"] = hp;
    ojson layers = ojson::array();
    for (const GraphLayer& layer : g.layers) {
        ojson lj;
        lj["layer_id"] = layer.spec.layer_id;
        lj["D"] = layer.spec.depth;
        lj["N"] = layer.spec.patterns_per_filter;
        ojson nodes = ojson::array();
        for (const PatternNode& n : layer.nodes) {
            ojson nj;
            nj["id"] = node_id_to_json(n.id);
            nj["mu"] = {n.mu.u, n.mu.v};
            nj["sigma2"] = n.sigma2;
            ojson edges = ojson::array();
            for (NodeId e : n.edges) edges.push_back(node_id_to_json(e));
            nj["edges"] = edges;
            nodes.push_back(std::move(nj));
        }
        lj["nodes"] = std::move(nodes);
        layers.push_back(std::move(lj));
    }
    doc["layers"] = std::move(layers);
    return doc;
}

namespace {

void expect_keys(const json& obj, std::initializer_list<const char*> keys, std::string_view where) {
    if (!obj.is_object()) fail(ErrorKind::SchemaError, std::string(where) + " must be an object");
    for (const char* k : keys)
        if (!obj.contains(k)) fail(ErrorKind::SchemaError, std::string(where) + " lacks '" + k + "'");
    for (const auto& [k, v] : obj.items()) {
        bool known = false;
        for (const char* allowed : keys) known = known || k == allowed;
        if (!known) fail(ErrorKind::SchemaError, std::string(where) + " has unknown field '" + k + "'");
    }
}

double number(const json& j, std::string_view what) {
    if (!j.is_number()) fail(ErrorKind::SchemaError, std::string(what) + " must be a number");
    return j.get<double>();
}

int integer(const json& j, std::string_view what) {
    if (!j.is_number_integer()) fail(ErrorKind::SchemaError, std::string(what) + " must be an integer");
    return j.get<int>();
}

}  // namespace

ExplanatoryGraph graph_from_json(const json& doc) {
    expect_keys(doc, {"version", "hyperparams", "layers"}, "graph");
    if (integer(doc["version"], "version") != kGraphSchemaVersion)
        fail(ErrorKind::SchemaError, "unsupported graph version " + doc["version"].dump());

    ExplanatoryGraph g;
    const json& hp = doc["hyperparams"];
    expect_keys(hp, {"tau", "M", "T", "beta", "lambda"}, "hyperparams");
    g.hyperparams.tau = number(hp["tau"], "tau");
    g.hyperparams.M = integer(hp["M"], "M");
    g.hyperparams.T = integer(hp["T"], "T");
    g.hyperparams.beta = number(hp["beta"], "beta");
    g.hyperparams.lambda = number(hp["lambda"], "lambda");

    if (!doc["layers"].is_array()) fail(ErrorKind::SchemaError, "layers must be an array");
    int l = 0;
    for (const json& lj : doc["layers"]) {
        expect_keys(lj, {"layer_id", "D", "N", "nodes"}, "layer");
        GraphLayer layer;
        if (!lj["layer_id"].is_string()) fail(ErrorKind::SchemaError, "layer_id must be a string");
        layer.spec.layer_id = lj["layer_id"].get<std::string>();
        layer.spec.depth = integer(lj["D"], "D");
        layer.spec.patterns_per_filter = integer(lj["N"], "N");
        if (layer.spec.depth < 1 || layer.spec.patterns_per_filter < 1)
            fail(ErrorKind::SchemaError, "layer " + layer.spec.layer_id + ": D and N must be >= 1");
        if (!lj["nodes"].is_array()) fail(ErrorKind::SchemaError, "nodes must be an array");

        std::vector<PatternNode> parsed;
        for (const json& nj : lj["nodes"]) {
            expect_keys(nj, {"id", "mu", "sigma2", "edges"}, "node");
            PatternNode n;
            n.id = node_id_from_json(nj["id"]);
            if (n.id.is_dummy()) fail(ErrorKind::SchemaError, "a stored node cannot be the dummy node");
            const json& mu = nj["mu"];
            if (!mu.is_array() || mu.size() != 2) fail(ErrorKind::SchemaError, "mu must be [u,v]");
            n.mu = {number(mu[0], "mu"), number(mu[1], "mu")};
            n.sigma2 = number(nj["sigma2"], "sigma2");
            if (!nj["edges"].is_array()) fail(ErrorKind::SchemaError, "edges must be an array");
            for (const json& e : nj["edges"]) n.edges.push_back(node_id_from_json(e));
            parsed.push_back(std::move(n));
        }

        // Place nodes in flat order; validate() reports anything left over.
        std::set<NodeId> seen;
        layer.nodes.resize(static_cast<std::size_t>(layer.spec.depth) * layer.spec.patterns_per_filter);
        std::vector<bool> filled(layer.nodes.size(), false);
        for (PatternNode& n : parsed) {
            if (!seen.insert(n.id).second) fail(ErrorKind::SchemaError, "duplicate node id " + to_string(n.id));
            if (n.id.layer != l || !layer.contains(n.id))
                fail(ErrorKind::SchemaError, "node " + to_string(n.id) + " out of place in layer " + layer.spec.layer_id);
            const std::size_t f = layer.flat_index(n.id);
            filled[f] = true;
            layer.nodes[f] = std::move(n);
        }
        for (std::size_t f = 0; f < filled.size(); ++f)
            if (!filled[f])
                fail(ErrorKind::SchemaError, "layer " + layer.spec.layer_id + " is missing node " +
                                                 to_string({l, static_cast<int>(f) / layer.spec.patterns_per_filter,
                                                            static_cast<int>(f) % layer.spec.patterns_per_filter}));
        g.layers.push_back(std::move(layer));
        ++l;
    }
    validate(g);
    return g;
}

std::string serialize_graph(const ExplanatoryGraph& g) {
    validate(g);
    return graph_to_json(g).dump(1) + "\n";
}

ExplanatoryGraph deserialize_graph(std::string_view text) {
    json doc = json::parse(text, nullptr, false);
    if (doc.is_discarded()) fail(ErrorKind::SchemaError, "graph document is not valid JSON");
    return graph_from_json(doc);
}

void save_graph(const std::filesystem::path& path, const ExplanatoryGraph& g) {
    const std::string text = serialize_graph(g);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    out << text;
}

ExplanatoryGraph load_graph(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize_graph(ss.str());
}

}  // namespace expgraph
