#include <doctest.h>

#include <json.hpp>

#include "expgraph/error.hpp"
#include "expgraph/graph.hpp"
#include "oracles.hpp"

using namespace expgraph;

namespace {

ExplanatoryGraph two_layer(int M) {
    Hyperparams hp;
    hp.M = M;
    hp.lambda = 1.0 / M;
    ExplanatoryGraph g = make_graph_skeleton({{"low", 2, 2}, {"high", 2, 2}}, hp);
    for (auto& n : g.layers[1].nodes) {
        n.edges = {NodeId::dummy()};
        n.mu = {0.25 + 0.1 * n.id.filter, 0.6 - 0.05 * n.id.pattern};
        n.sigma2 = 0.003;
    }
    for (auto& n : g.layers[0].nodes) {
        n.mu = {0.4, 0.45 + 0.01 * n.id.pattern};
        n.sigma2 = 0.002 + 0.0001 * n.id.filter;
        for (int k = 0; k < M; ++k) n.edges.push_back({1, k % 2, k / 2});
    }
    return g;
}

ErrorKind kind_of(const std::string& text) {
    try {
        deserialize_graph(text);
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("no error thrown");
    return ErrorKind::IoError;
}

}  // namespace

TEST_CASE("one layer, two filters, one node each round-trips") {
    Hyperparams hp;
    ExplanatoryGraph g = make_graph_skeleton({{"c", 2, 1}}, hp);
    g.layers[0].nodes[0].edges = {NodeId::dummy()};
    g.layers[0].nodes[1].edges = {NodeId::dummy()};
    g.layers[0].nodes[1].mu = {0.123456789012345678, 0.9};
    validate(g);
    const std::string text = serialize_graph(g);
    const ExplanatoryGraph back = deserialize_graph(text);
    CHECK(back == g);
    CHECK(serialize_graph(back) == text);
}

TEST_CASE("two-layer graph round-trips") {
    const ExplanatoryGraph g = two_layer(3);
    validate(g);
    CHECK(deserialize_graph(serialize_graph(g)) == g);
}

TEST_CASE("VGG-16 sized config has four layer blocks") {
    Hyperparams hp;
    ExplanatoryGraph g = make_graph_skeleton({{"c9", 512, 40}, {"c10", 512, 40}, {"c12", 512, 20}, {"c13", 512, 20}}, hp);
    for (std::size_t l = 0; l < 4; ++l)
        for (auto& n : g.layers[l].nodes) {
            if (l == 3) {
                n.edges = {NodeId::dummy()};
                continue;
            }
            for (int k = 0; k < 15; ++k) n.edges.push_back({static_cast<int>(l) + 1, k, 0});
        }
    validate(g);
    const auto doc = nlohmann::json::parse(serialize_graph(g));
    CHECK(doc["layers"].size() == 4);
    CHECK(doc["layers"][0]["N"] == 40);
    CHECK(doc["layers"][3]["N"] == 20);
    CHECK(doc["version"] == kGraphSchemaVersion);
    CHECK(g.node_count() == 512 * 120);
}

TEST_CASE("validation failures") {
    const ExplanatoryGraph good = two_layer(2);
    auto doc = nlohmann::json::parse(serialize_graph(good));

    SUBCASE("edge to missing node") {
        doc["layers"][0]["nodes"][0]["edges"][1] = {1, 7, 0};
        CHECK(kind_of(doc.dump()) == ErrorKind::DanglingEdge);
    }
    SUBCASE("edge skipping a layer") {
        doc["layers"][0]["nodes"][0]["edges"][1] = {0, 1, 1};
        CHECK(kind_of(doc.dump()) == ErrorKind::SchemaError);
    }
    SUBCASE("duplicate node id") {
        doc["layers"][0]["nodes"][1]["id"] = doc["layers"][0]["nodes"][0]["id"];
        CHECK(kind_of(doc.dump()) == ErrorKind::SchemaError);
    }
    SUBCASE("variance below floor") {
        doc["layers"][1]["nodes"][0]["sigma2"] = 5e-5;
        CHECK(kind_of(doc.dump()) == ErrorKind::SchemaError);
    }
    SUBCASE("duplicate edge") {
        doc["layers"][0]["nodes"][0]["edges"][1] = doc["layers"][0]["nodes"][0]["edges"][0];
        CHECK(kind_of(doc.dump()) == ErrorKind::SchemaError);
    }
    SUBCASE("wrong edge count") {
        doc["layers"][0]["nodes"][0]["edges"].erase(1);
        CHECK(kind_of(doc.dump()) == ErrorKind::SchemaError);
    }
    SUBCASE("top layer without dummy") {
        doc["layers"][1]["nodes"][0]["edges"] = nlohmann::json::array();
        CHECK(kind_of(doc.dump()) == ErrorKind::SchemaError);
    }
    SUBCASE("unknown field") {
        doc["layers"][0]["nodes"][0]["color"] = "red";
        CHECK(kind_of(doc.dump()) == ErrorKind::SchemaError);
    }
    SUBCASE("unknown top-level field") {
        doc["extra"] = 1;
        CHECK(kind_of(doc.dump()) == ErrorKind::SchemaError);
    }
    SUBCASE("lambda inconsistent with M") {
        doc["hyperparams"]["lambda"] = 0.3;
        CHECK(kind_of(doc.dump()) == ErrorKind::SchemaError);
    }
    SUBCASE("node count off") {
        doc["layers"][1]["N"] = 3;
        CHECK(kind_of(doc.dump()) == ErrorKind::SchemaError);
    }
    SUBCASE("not json") { CHECK(kind_of("{nope") == ErrorKind::SchemaError); }
}

TEST_CASE("file round trip") {
    const auto dir = oracle::scratch_dir("graph");
    const ExplanatoryGraph g = two_layer(4);
    save_graph(dir / "g.json", g);
    CHECK(load_graph(dir / "g.json") == g);
    std::filesystem::remove_all(dir);
}

TEST_CASE("node ids order and print") {
    CHECK(NodeId{0, 1, 2} < NodeId{0, 2, 0});
    CHECK(NodeId{1, 0, 0} > NodeId{0, 9, 9});
    CHECK(to_string(NodeId{1, 2, 3}) == "(1,2,3)");
    CHECK(to_string(NodeId::dummy()) == "dummy");
    CHECK(node_id_from_json(node_id_to_json({2, 5, 1})) == NodeId{2, 5, 1});
}
