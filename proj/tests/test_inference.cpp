#include <doctest.h>

#include <cmath>
#include <random>

#include "expgraph/em.hpp"
#include "expgraph/error.hpp"
#include "expgraph/inference.hpp"
#include "expgraph/synth.hpp"
#include "oracles.hpp"

using namespace expgraph;

namespace {

// Units past the border clamp onto identical positions, which gives exact ties.
LayerMeta clamping_meta(int d, int h, int w) {
    return {"c", d, h, w, 16.0, {24.0, 24.0}, 80.0, 80.0, std::hypot(80.0, 80.0)};
}

struct Instance {
    GraphLayer upper;
    UpperContext ctx;
    PatternNode v;
    FeatureMap fm;
};

Instance random_instance(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0), s2(5e-4, 0.05);
    std::uniform_int_distribution<int> level(0, 3), dims(2, 7), pick(0, 4);
    Instance in;
    in.upper.spec = {"up", 5, 1};
    for (int d = 0; d < 5; ++d) in.upper.nodes.push_back({{1, d, 0}, {u(rng), u(rng)}, s2(rng), {NodeId::dummy()}});
    in.ctx.dummy = false;
    for (int d = 0; d < 5; ++d) in.ctx.nodes.push_back({{u(rng), u(rng)}, 1.0, u(rng) < 0.8});
    in.v = {{0, 1, 0}, {u(rng), u(rng)}, s2(rng), {}};
    for (int d = 0; d < 5; ++d)
        if (u(rng) < 0.5) in.v.edges.push_back({1, d, 0});
    if (in.v.edges.empty()) in.v.edges.push_back({1, pick(rng), 0});

    in.fm.meta = clamping_meta(2, dims(rng), dims(rng));
    in.fm.values.resize(in.fm.meta.unit_count());
    // coarse levels so several units share F, and some maps are all zero
    const bool silent = u(rng) < 0.05;
    for (float& x : in.fm.values) x = silent ? 0.0f : static_cast<float>(level(rng)) - 1.0f;
    return in;
}

std::span<const Unit> filter_units(const std::vector<Unit>& all, const Instance& in) {
    const std::size_t n = static_cast<std::size_t>(in.fm.meta.height) * in.fm.meta.width;
    return std::span<const Unit>(all).subspan(static_cast<std::size_t>(in.v.id.filter) * n, n);
}

struct Pick {
    int d = 0, i = 0, j = 0;
    double score = 0.0;
    bool detected = false;
};

// Exhaustive scan over every unit of the filter, in linear order, strict >.
Pick exhaustive_argmax(const Instance& in) {
    const auto units = normalize_responses(in.fm, 1.0);
    const auto terms = neighbor_terms(in.v, &in.upper, in.ctx);
    Pick best;
    double best_log = -INFINITY;
    for (int i = 0; i < in.fm.meta.height; ++i)
        for (int j = 0; j < in.fm.meta.width; ++j) {
            const Unit& x = units[in.fm.meta.linear_index(in.v.id.filter, i, j)];
            if (!(x.mass > 0.0)) continue;
            const double ls = std::log(x.mass) + oracle::log_product_density(x.p, in.v.mu, terms);
            if (!best.detected || ls > best_log) {
                best = {in.v.id.filter, i, j, x.mass * std::exp(oracle::log_product_density(x.p, in.v.mu, terms)), true};
                best_log = ls;
            }
        }
    return best;
}

}  // namespace

TEST_CASE("argmax matches an exhaustive scan, ties included") {
    std::mt19937_64 rng(17);
    int ties = 0;
    for (int rep = 0; rep < 300; ++rep) {
        const Instance in = random_instance(rng);
        const auto units = normalize_responses(in.fm, 1.0);
        const NodeAssignment a = assign_node(in.v, filter_units(units, in), in.fm.meta, &in.upper, in.ctx);
        const Pick o = exhaustive_argmax(in);
        CHECK(a.detected == o.detected);
        if (!o.detected) {
            CHECK(a.p == in.v.mu);
            CHECK(a.score == 0.0);
            continue;
        }
        CHECK(a.d == o.d);
        CHECK(a.i == o.i);
        CHECK(a.j == o.j);
        CHECK(a.score == doctest::Approx(o.score).epsilon(1e-12));
        CHECK(a.p == project_position(o.i, o.j, in.fm.meta));

        // count instances where a later unit matched the winner exactly
        for (int i = 0; i < in.fm.meta.height; ++i)
            for (int j = 0; j < in.fm.meta.width; ++j) {
                const Unit& x = units[in.fm.meta.linear_index(o.d, i, j)];
                if ((i > o.i || (i == o.i && j > o.j)) && x.mass == units[in.fm.meta.linear_index(o.d, o.i, o.j)].mass &&
                    x.p == a.p)
                    ++ties;
            }

        const LayerObservation obs = observe(in.fm, 1.0);
        CHECK(assign_node(in.v, obs.filters[1], in.fm.meta, &in.upper, in.ctx) == a);
    }
    CHECK(ties > 0);
}

TEST_CASE("single active unit is chosen whatever its density") {
    PatternNode v{{0, 0, 0}, {0.1, 0.1}, 1e-4, {NodeId::dummy()}};
    FeatureMap fm;
    fm.meta = {"c", 1, 4, 4, 16.0, {8.0, 8.0}, 64.0, 64.0, std::hypot(64.0, 64.0)};
    fm.values.assign(16, 0.0f);
    fm.values[fm.meta.linear_index(0, 3, 3)] = 0.2f;
    const auto units = normalize_responses(fm, 1.0);
    const NodeAssignment a = assign_node(v, units, fm.meta, nullptr, UpperContext::top());
    CHECK(a.detected);
    CHECK(a.i == 3);
    CHECK(a.j == 3);
    CHECK(a.score > 0.0);
}

TEST_CASE("score is F times density") {
    // density 2.0 at p: sigma2 with 1/(2 pi sigma2) = 2
    const double s2 = 1.0 / (4.0 * kPi);
    FeatureMap fm;
    fm.meta = {"c", 1, 1, 2, 32.0, {16.0, 16.0}, 64.0, 64.0, std::hypot(64.0, 64.0)};
    fm.values = {1.0f, 0.5f};
    PatternNode v{{0, 0, 0}, project_position(0, 1, fm.meta), s2, {NodeId::dummy()}};
    auto units = normalize_responses(fm, 1.0);
    units[0].mass = 0.0;
    const NodeAssignment a = assign_node(v, units, fm.meta, nullptr, UpperContext::top());
    CHECK(a.j == 1);
    CHECK(a.score == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("raising the winner's F keeps it the winner") {
    std::mt19937_64 rng(23);
    for (int rep = 0; rep < 50; ++rep) {
        Instance in = random_instance(rng);
        auto units = normalize_responses(in.fm, 1.0);
        const NodeAssignment a = assign_node(in.v, filter_units(units, in), in.fm.meta, &in.upper, in.ctx);
        if (!a.detected) continue;
        units[in.fm.meta.linear_index(a.d, a.i, a.j)].mass *= 1.5;
        const NodeAssignment b = assign_node(in.v, filter_units(units, in), in.fm.meta, &in.upper, in.ctx);
        CHECK(b.i == a.i);
        CHECK(b.j == a.j);
    }
}

TEST_CASE("all-zero maps leave every node undetected") {
    SynthSpec spec;
    spec.layers = {{"a", 2, 6, 6, 2}, {"b", 2, 6, 6, 2}};
    spec.edges_per_node = 2;
    const ExplanatoryGraph g = gen_planted_graph(spec);
    SynthDataset data = sample_images(g, 1, spec);
    for (auto& m : data.images[0].maps) std::fill(m.values.begin(), m.values.end(), 0.0f);
    const std::vector<std::string> ids{"a", "b"};
    const ImageInference inf = infer_image(g, observe_image(data.images[0], ids, 1.0));
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t k = 0; k < inf.layers[l].size(); ++k) {
            CHECK_FALSE(inf.layers[l][k].detected);
            CHECK(inf.layers[l][k].p == g.layers[l].nodes[k].mu);
        }
}

TEST_CASE("learned graph localizes noiseless probes within one grid step") {
    SynthSpec spec;
    spec.layers = {{"a", 4, 14, 14, 2}, {"b", 4, 14, 14, 2}};
    spec.edges_per_node = 2;
    spec.seed = 2;
    const ExplanatoryGraph planted = gen_planted_graph(spec);
    const SynthDataset train = sample_images(planted, 80, spec);
    const std::vector<std::string> ids{"a", "b"};
    std::vector<ImageObservation> obs;
    for (const auto& im : train.images) obs.push_back(observe_image(im, ids, 1.0));
    LearnConfig cfg;
    cfg.M = 2;
    cfg.seed = 2;
    const ExplanatoryGraph learned = learn_graph(obs, spec.layer_specs(), cfg).graph;
    const RecoveryReport rep = recovery_error(planted, learned);

    SynthSpec probe = spec;
    probe.pattern_sigma = 0.0;
    probe.seed = 99;
    const SynthDataset test = sample_images(planted, 20, probe);
    const double step = 1.0 / 14.0;
    int hit = 0, total = 0;
    for (std::size_t n = 0; n < test.images.size(); ++n) {
        const ImageInference inf = infer_image(learned, observe_image(test.images[n], ids, 1.0));
        for (std::size_t l = 0; l < 2; ++l)
            for (std::size_t k = 0; k < planted.layers[l].nodes.size(); ++k) {
                // a node that matched no planted pattern has no planted location to land on
                if (rep.errors[l][k] >= 0.02) continue;
                const NodeId partner = rep.matched[l][k];
                const NodeAssignment& a = inf.layers[l][learned.layers[l].flat_index(partner)];
                const Vec2 truth = test.truth[n].positions[l][k];
                ++total;
                if (a.detected && std::max(std::abs(a.p.u - truth.u), std::abs(a.p.v - truth.v)) <= step) ++hit;
            }
    }
    CHECK(rep.match_rate >= 0.75);
    CHECK(static_cast<double>(hit) / total >= 0.95);
}

TEST_CASE("infer_image needs every layer") {
    SynthSpec spec;
    spec.layers = {{"a", 1, 4, 4, 1}};
    const ExplanatoryGraph g = gen_planted_graph(spec);
    const SynthDataset data = sample_images(g, 1, spec);
    ImageObservation obs = observe_image(data.images[0], std::vector<std::string>{"a"}, 1.0);
    obs.layers[0].meta.layer_id = "other";
    CHECK_THROWS_AS(infer_image(g, obs), Error);
}

TEST_CASE("inference is repeatable and round-trips through JSON") {
    SynthSpec spec;
    spec.layers = {{"a", 2, 6, 6, 2}, {"b", 2, 6, 6, 1}};
    spec.edges_per_node = 1;
    const ExplanatoryGraph g = gen_planted_graph(spec);
    const SynthDataset data = sample_images(g, 1, spec);
    const std::vector<std::string> ids{"a", "b"};
    const ImageObservation obs = observe_image(data.images[0], ids, 1.0);
    const ImageInference a = infer_image(g, obs);
    const ImageInference b = infer_image(g, obs);
    CHECK(inference_to_json(a).dump() == inference_to_json(b).dump());

    const auto dir = oracle::scratch_dir("inference");
    save_inference(dir / "x.json", a);
    const ImageInference back = load_inference(dir / "x.json", a.image_id, g);
    CHECK(back.layers == a.layers);
    const auto doc = inference_to_json(a);
    REQUIRE(doc.is_array());
    CHECK(doc[0].contains("node_id"));
    CHECK(doc[0]["unit"].size() == 3);
    std::filesystem::remove_all(dir);
}

TEST_CASE("top_k_energy examples") {
    CHECK(top_k_energy(std::vector<double>{0.5, 0.3, 0.2}, 0.3) == 1);
    CHECK(top_k_energy(std::vector<double>(10, 1.0), 0.3) == 3);
    CHECK(top_k_energy(std::vector<double>{0.0, 2.0, 0.0, 1.0, 3.0}, 1.0) == 3);
    CHECK_THROWS_AS(top_k_energy(std::vector<double>{0.0, 0.0}, 0.3), Error);
    CHECK_THROWS_AS(top_k_energy(std::vector<double>{1.0}, 0.0), Error);
}

TEST_CASE("top_k_energy against the prefix oracle") {
    std::mt19937_64 rng(29);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> n(1, 40);
    for (int rep = 0; rep < 500; ++rep) {
        std::vector<double> s(static_cast<std::size_t>(n(rng)));
        for (double& x : s) x = u(rng) < 0.3 ? 0.0 : std::floor(u(rng) * 8.0) / 4.0;
        if (std::all_of(s.begin(), s.end(), [](double x) { return x == 0.0; })) s[0] = 1.0;
        std::size_t prev = 0;
        for (double r : {0.1, 0.3, 0.5, 0.9, 1.0}) {
            const std::size_t k = top_k_energy(s, r);
            CHECK(k == oracle::top_k_energy(s, r));
            CHECK(k >= prev);
            prev = k;
        }
    }
}
