#include <doctest.h>

#include <cmath>
#include <random>

#include "expgraph/compat.hpp"
#include "expgraph/error.hpp"
#include "oracles.hpp"

using namespace expgraph;

namespace {

std::vector<NeighborTerm> random_terms(std::mt19937_64& rng, int m) {
    std::uniform_real_distribution<double> pos(0.0, 1.0), jit(-0.05, 0.05), s2(1e-3, 1e-2);
    std::vector<NeighborTerm> t;
    for (int k = 0; k < m; ++k) {
        const Vec2 mu{pos(rng), pos(rng)};
        t.push_back({mu, mu + Vec2{jit(rng), jit(rng)}, s2(rng)});
    }
    return t;
}

// Two-layer graph: 1 node below with `edges`, three top nodes.
struct Fixture {
    GraphLayer upper;
    PatternNode v;
    UpperContext ctx;

    Fixture() {
        upper.spec = {"up", 3, 1};
        for (int d = 0; d < 3; ++d) {
            PatternNode n;
            n.id = {1, d, 0};
            n.mu = {0.2 + 0.2 * d, 0.3};
            n.sigma2 = 0.002 * (d + 1);
            n.edges = {NodeId::dummy()};
            upper.nodes.push_back(n);
        }
        v.id = {0, 0, 0};
        v.mu = {0.5, 0.5};
        v.sigma2 = 0.004;
        v.edges = {{1, 0, 0}, {1, 1, 0}, {1, 2, 0}};
        ctx.dummy = false;
        ctx.nodes = {{{0.21, 0.32}, 0.5, true}, {{0.43, 0.29}, 0.7, true}, {{0.6, 0.31}, 0.2, true}};
    }
};

}  // namespace

TEST_CASE("top layer reduces to a Gaussian around mu") {
    PatternNode v;
    v.mu = {0.3, 0.7};
    v.sigma2 = 0.0025;
    v.edges = {NodeId::dummy()};
    const UpperContext top = UpperContext::top();
    CHECK(compatibility_product(v.mu, v, nullptr, top) == doctest::Approx(1.0 / (2.0 * kPi * 0.0025)).epsilon(1e-14));
    const Vec2 q{0.33, 0.68};
    CHECK(compatibility_product(q, v, nullptr, top) == doctest::Approx(gaussian2(q, v.mu, v.sigma2)).epsilon(1e-14));
    const ClosedForm c = compatibility_closed(q, v, nullptr, top);
    CHECK(c.delta == Vec2{0.0, 0.0});
    CHECK(c.sigma2_tilde == v.sigma2);
}

TEST_CASE("single neighbor shifts the peak by its displacement") {
    const std::vector<NeighborTerm> t{{{0.2, 0.2}, {0.3, 0.3}, 0.01}};
    const Vec2 mu_v{0.5, 0.5};
    const Vec2 peak{0.6, 0.6};
    const double at_peak = compatibility_product(peak, mu_v, t);
    CHECK(at_peak == doctest::Approx(1.0 / (2.0 * kPi * 0.01)));
    for (Vec2 d : {Vec2{0.01, 0}, Vec2{0, -0.01}, Vec2{0.02, 0.02}}) CHECK(compatibility_product(peak + d, mu_v, t) < at_peak);
    const ClosedForm c = compatibility_closed(peak, mu_v, t);
    CHECK(c.delta.u == doctest::Approx(0.1));
    CHECK(c.delta.v == doctest::Approx(0.1));
    CHECK(c.sigma2_tilde == 0.01);
}

TEST_CASE("equal-variance neighbors average their displacements") {
    const std::vector<NeighborTerm> t{{{0.3, 0.3}, {0.32, 0.3}, 0.004}, {{0.6, 0.2}, {0.6, 0.22}, 0.004}};
    const ClosedForm c = compatibility_closed({0.5, 0.5}, {0.5, 0.5}, t);
    CHECK(c.delta.u == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(c.delta.v == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(c.sigma2_tilde == doctest::Approx(0.004));
}

TEST_CASE("precision weighting and sigma2_tilde") {
    const std::vector<NeighborTerm> t{{{0.3, 0.3}, {0.33, 0.3}, 0.001}, {{0.6, 0.2}, {0.6, 0.2}, 0.003}};
    const ClosedForm c = compatibility_closed({0.5, 0.5}, {0.5, 0.5}, t);
    // w = 1000, 333.3; delta_u = 0.03 * 1000 / 1333.3
    CHECK(c.delta.u == doctest::Approx(0.0225).epsilon(1e-12));
    CHECK(c.delta.v == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(c.sigma2_tilde == doctest::Approx(2.0 / (1000.0 + 1000.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("product matches the factor-by-factor oracle") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> pos(0.0, 1.0);
    for (int m : {1, 2, 5, 15}) {
        for (int rep = 0; rep < 10; ++rep) {
            const auto t = random_terms(rng, m);
            const Vec2 mu{pos(rng), pos(rng)};
            for (int k = 0; k < 10; ++k) {
                const Vec2 p{pos(rng), pos(rng)};
                CHECK(log_compatibility_product(p, mu, t) ==
                      doctest::Approx(oracle::log_product_density(p, mu, t)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("product / closed ratio is constant over p") {
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> pos(0.0, 1.0);
    for (int m : {1, 2, 5, 15}) {
        for (int rep = 0; rep < 5; ++rep) {
            const auto t = random_terms(rng, m);
            const Vec2 mu{pos(rng), pos(rng)};
            const Vec2 center = mu + compatibility_closed(mu, mu, t).delta;
            double lo = 1e300, hi = -1e300;
            for (int a = 0; a < 20; ++a)
                for (int b = 0; b < 20; ++b) {
                    // stay within a few sigma so both sides are representable
                    const Vec2 p = center + Vec2{(a - 9.5) * 0.004, (b - 9.5) * 0.004};
                    const double r = oracle::product_density(p, mu, t) / compatibility_closed(p, mu, t).density;
                    lo = std::min(lo, r);
                    hi = std::max(hi, r);
                }
            CHECK((hi - lo) / hi < 1e-9);
        }
    }
}

TEST_CASE("summary reproduces the log product") {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> pos(0.0, 1.0);
    for (int m : {1, 3, 15}) {
        const auto t = random_terms(rng, m);
        const NeighborSummary s = summarize(t);
        for (int k = 0; k < 20; ++k) {
            const Vec2 mu{pos(rng), pos(rng)};
            const Vec2 p{pos(rng), pos(rng)};
            CHECK(s.log_density(p, mu) == doctest::Approx(oracle::log_product_density(p, mu, t)).epsilon(1e-10));
        }
    }
}

TEST_CASE("neighbor_terms from a graph context") {
    Fixture f;
    const auto t = neighbor_terms(f.v, &f.upper, f.ctx);
    REQUIRE(t.size() == 3);
    CHECK(t[1].mu == f.upper.nodes[1].mu);
    CHECK(t[1].p == f.ctx.nodes[1].p);
    CHECK(t[2].sigma2 == f.upper.nodes[2].sigma2);

    SUBCASE("undetected neighbors are dropped") {
        f.ctx.nodes[1].detected = false;
        const auto t2 = neighbor_terms(f.v, &f.upper, f.ctx);
        REQUIRE(t2.size() == 2);
        CHECK(t2[0].p == f.ctx.nodes[0].p);
        CHECK(t2[1].p == f.ctx.nodes[2].p);
    }
    SUBCASE("all undetected keeps every factor with no displacement") {
        for (auto& n : f.ctx.nodes) n.detected = false;
        for (std::size_t k = 0; k < 3; ++k) f.ctx.nodes[k].p = f.upper.nodes[k].mu;
        const auto t3 = neighbor_terms(f.v, &f.upper, f.ctx);
        CHECK(t3.size() == 3);
        const ClosedForm c = compatibility_closed(f.v.mu, f.v.mu, t3);
        CHECK(c.delta == Vec2{0.0, 0.0});
    }
    SUBCASE("missing context entry") {
        f.ctx.nodes.pop_back();
        CHECK_THROWS_AS(neighbor_terms(f.v, &f.upper, f.ctx), Error);
        try {
            neighbor_terms(f.v, &f.upper, f.ctx);
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::MissingNeighborInference);
        }
    }
    SUBCASE("graph overloads agree with term overloads") {
        const Vec2 p{0.52, 0.49};
        CHECK(compatibility_product(p, f.v, &f.upper, f.ctx) == compatibility_product(p, f.v.mu, t));
        CHECK(compatibility_closed(p, f.v, &f.upper, f.ctx).density == compatibility_closed(p, f.v.mu, t).density);
    }
}
