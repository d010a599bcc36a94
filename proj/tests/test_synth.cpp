#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "expgraph/dataset.hpp"
#include "expgraph/em.hpp"
#include "expgraph/error.hpp"
#include "expgraph/synth.hpp"
#include "oracles.hpp"

using namespace expgraph;

namespace {

SynthSpec small_spec(std::uint64_t seed) {
    SynthSpec s;
    s.layers = {{"a", 3, 14, 14, 3}, {"b", 3, 14, 14, 2}};
    s.seed = seed;
    return s;
}

double assignment_cost(const std::vector<std::vector<double>>& c, const std::vector<int>& perm) {
    double s = 0.0;
    for (std::size_t r = 0; r < perm.size(); ++r) s += c[r][static_cast<std::size_t>(perm[r])];
    return s;
}

bool is_permutation(std::vector<int> p) {
    std::sort(p.begin(), p.end());
    for (std::size_t k = 0; k < p.size(); ++k)
        if (p[k] != static_cast<int>(k)) return false;
    return true;
}

}  // namespace

TEST_CASE("same seed gives the same graph and images") {
    const SynthSpec s = small_spec(7);
    const ExplanatoryGraph a = gen_planted_graph(s);
    CHECK(a == gen_planted_graph(s));
    const SynthDataset da = sample_images(a, 6, s);
    const SynthDataset db = sample_images(a, 6, s, 3);
    for (std::size_t k = 0; k < 6; ++k) {
        CHECK(da.images[k].maps[0].values == db.images[k].maps[0].values);
        CHECK(da.images[k].maps[1].values == db.images[k].maps[1].values);
        CHECK(da.truth[k].positions == db.truth[k].positions);
    }
    CHECK_FALSE(gen_planted_graph(small_spec(8)) == a);
}

TEST_CASE("one pattern per filter places without separation limits") {
    SynthSpec s;
    s.layers = {{"a", 5, 7, 7, 1}};
    s.min_separation = 10.0;
    const ExplanatoryGraph g = gen_planted_graph(s);
    CHECK(g.layers[0].nodes.size() == 5);
}

TEST_CASE("planted patterns of a filter are separated") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        SynthSpec s = small_spec(seed);
        s.layers[0].patterns_per_filter = 4;
        s.pattern_sigma = 0.1;
        s.min_separation = 0.1;
        const ExplanatoryGraph g = gen_planted_graph(s);
        const double need = std::max(3.0 * s.pattern_sigma, s.min_separation);
        for (const GraphLayer& layer : g.layers)
            for (const PatternNode& x : layer.nodes)
                for (const PatternNode& y : layer.nodes) {
                    if (x.id.filter != y.id.filter || x.id.pattern >= y.id.pattern) continue;
                    CHECK(norm(x.mu - y.mu) >= need);
                }
    }
    SynthSpec crowded = small_spec(0);
    crowded.layers[0].patterns_per_filter = 40;
    CHECK_THROWS_AS(gen_planted_graph(crowded), Error);
    try {
        gen_planted_graph(crowded);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::SeparationUnsatisfiable);
    }
}

TEST_CASE("no jitter, no noise puts every bump on its planted center") {
    SynthSpec s = small_spec(3);
    s.jitter_std = 0.0;
    s.pattern_sigma = 0.0;
    const ExplanatoryGraph g = gen_planted_graph(s);
    const SynthDataset d = sample_images(g, 4, s);
    for (const ImageTruth& t : d.truth)
        for (std::size_t l = 0; l < g.layers.size(); ++l)
            for (std::size_t k = 0; k < g.layers[l].nodes.size(); ++k) CHECK(t.positions[l][k] == g.layers[l].nodes[k].mu);
}

TEST_CASE("true positions re-project within one cell of the rendered peak") {
    SynthSpec s;
    s.layers = {{"a", 4, 14, 14, 1}};
    s.seed = 5;
    const ExplanatoryGraph g = gen_planted_graph(s);
    const SynthDataset d = sample_images(g, 10, s);
    for (std::size_t n = 0; n < d.images.size(); ++n) {
        const FeatureMap& fm = d.images[n].maps[0];
        for (int f = 0; f < 4; ++f) {
            std::size_t best = fm.meta.linear_index(f, 0, 0);
            for (int i = 0; i < 14; ++i)
                for (int j = 0; j < 14; ++j)
                    if (fm.values[fm.meta.linear_index(f, i, j)] > fm.values[best]) best = fm.meta.linear_index(f, i, j);
            const int i = static_cast<int>((best / 14) % 14), j = static_cast<int>(best % 14);
            const Vec2 peak = project_position(i, j, fm.meta);
            const Vec2 truth = d.truth[n].positions[0][static_cast<std::size_t>(f)];
            CHECK(std::abs(peak.u - truth.u) <= 1.0 / 14.0);
            CHECK(std::abs(peak.v - truth.v) <= 1.0 / 14.0);
        }
    }
}

TEST_CASE("landmarks move with the image jitter") {
    const SynthSpec s = small_spec(9);
    const ExplanatoryGraph g = gen_planted_graph(s);
    const SynthDataset d = sample_images(g, 3, s);
    for (const ImageTruth& t : d.truth)
        for (const auto& [name, p] : s.landmarks) CHECK(t.landmarks.at(name) == p + t.jitter);
    CHECK(d.landmark_set().size() == 3);
}

TEST_CASE("synthetic spec json round trip") {
    SynthSpec s = small_spec(11);
    s.noise_peaks_per_filter = 4;
    s.landmarks = {{"nose", {0.1, 0.2}}};
    const SynthSpec back = synth_spec_from_json(nlohmann::json::parse(synth_spec_to_json(s).dump()));
    CHECK(synth_spec_to_json(back) == synth_spec_to_json(s));
    CHECK_THROWS_AS(synth_spec_from_json(nlohmann::json::parse(R"({"bogus":1})")), Error);
}

TEST_CASE("matchers reach the exhaustive optimum") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int n = 1; n <= 7; ++n)
        for (int rep = 0; rep < 30; ++rep) {
            std::vector<std::vector<double>> c(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n)));
            for (auto& row : c)
                for (double& x : row) x = u(rng);
            const double best = oracle::min_assignment_cost(c);
            const auto ex = match_exhaustive(c);
            const auto hu = match_hungarian(c);
            CHECK(is_permutation(ex));
            CHECK(is_permutation(hu));
            CHECK(assignment_cost(c, ex) == doctest::Approx(best).epsilon(1e-12));
            CHECK(assignment_cost(c, hu) == doctest::Approx(best).epsilon(1e-12));
        }
}

TEST_CASE("recovery of the planted graph itself") {
    const ExplanatoryGraph g = gen_planted_graph(small_spec(1));
    const RecoveryReport r = recovery_error(g, g);
    CHECK(r.mean_error == 0.0);
    CHECK(r.match_rate == 1.0);
    for (std::size_t l = 0; l < g.layers.size(); ++l)
        for (std::size_t k = 0; k < g.layers[l].nodes.size(); ++k) CHECK(r.matched[l][k] == g.layers[l].nodes[k].id);

    SUBCASE("shuffled pattern indices still match exactly") {
        ExplanatoryGraph shuffled = g;
        std::mt19937_64 rng(2);
        for (GraphLayer& layer : shuffled.layers) {
            const int n = layer.spec.patterns_per_filter;
            for (int d = 0; d < layer.spec.depth; ++d) {
                std::vector<Vec2> mus;
                for (int k = 0; k < n; ++k) mus.push_back(layer.nodes[layer.flat_index(d, k)].mu);
                std::shuffle(mus.begin(), mus.end(), rng);
                for (int k = 0; k < n; ++k) layer.nodes[layer.flat_index(d, k)].mu = mus[static_cast<std::size_t>(k)];
            }
        }
        const RecoveryReport s = recovery_error(g, shuffled);
        CHECK(s.mean_error == 0.0);
        CHECK(s.match_rate == 1.0);
    }
    SUBCASE("one displaced pattern") {
        ExplanatoryGraph moved = g;
        moved.layers[0].nodes[0].mu += Vec2{0.03, 0.04};
        const RecoveryReport s = recovery_error(g, moved);
        CHECK(s.errors[0][0] == doctest::Approx(0.05));
        const double total = static_cast<double>(g.node_count());
        CHECK(s.match_rate == doctest::Approx((total - 1.0) / total));
        CHECK(s.mean_error == doctest::Approx(0.05 / total));
    }
    SUBCASE("shape mismatch") {
        const ExplanatoryGraph other = gen_planted_graph(small_spec(2));
        SynthSpec wide = small_spec(1);
        wide.layers[1].patterns_per_filter = 3;
        CHECK_THROWS_AS(recovery_error(g, gen_planted_graph(wide)), Error);
        CHECK_NOTHROW(recovery_error(g, other));
    }
}

TEST_CASE("ten noise peaks raise the mean recovery error") {
    // Same planted graph and learner seeds, differing only in clutter.
    double clean = 0.0, noisy = 0.0;
    const std::vector<std::string> ids{"a"};
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        SynthSpec s;
        s.layers = {{"a", 3, 14, 14, 3}};
        s.seed = seed;
        const ExplanatoryGraph planted = gen_planted_graph(s);
        LearnConfig cfg;
        cfg.M = 1;
        cfg.seed = seed;
        for (int noise : {0, 10}) {
            s.noise_peaks_per_filter = noise;
            const SynthDataset d = sample_images(planted, 60, s);
            std::vector<ImageObservation> obs;
            for (const auto& im : d.images) obs.push_back(observe_image(im, ids, 1.0));
            const double err = recovery_error(planted, learn_graph(obs, s.layer_specs(), cfg).graph).mean_error;
            (noise == 0 ? clean : noisy) += err / 4.0;
        }
    }
    MESSAGE("mean recovery error: clean ", clean, " noisy ", noisy);
    CHECK(noisy > clean);
}
