#include "expgraph/compat.hpp"

#include <cmath>

#include "expgraph/error.hpp"

namespace expgraph {

std::vector<NeighborTerm> neighbor_terms(const PatternNode& v, const GraphLayer* upper, const UpperContext& ctx) {
    if (v.edges.empty()) fail(ErrorKind::InvalidArgument, "node " + to_string(v.id) + " has no edges");
    if (v.linked_to_dummy()) return {{Vec2{}, Vec2{}, v.sigma2}};

    if (upper == nullptr || ctx.dummy)
        fail(ErrorKind::MissingNeighborInference, "node " + to_string(v.id) + " needs upper-layer inference");
    std::vector<NeighborTerm> present;
    std::vector<NeighborTerm> all;
    present.reserve(v.edges.size());
    all.reserve(v.edges.size());
    for (NodeId e : v.edges) {
        if (e.is_dummy() || !upper->contains(e))
            fail(ErrorKind::MissingNeighborInference, to_string(v.id) + " -> " + to_string(e));
        const std::size_t f = upper->flat_index(e);
        if (f >= ctx.nodes.size() || f >= upper->nodes.size())
            fail(ErrorKind::MissingNeighborInference, "no inference for " + to_string(e));
        const PatternNode& n = upper->nodes[f];
        const PositionEstimate& est = ctx.nodes[f];
        NeighborTerm t{n.mu, est.p, n.sigma2};
        all.push_back(t);
        if (est.detected) present.push_back(t);
    }
    if (present.empty()) {
        for (auto& t : all) t.p = t.mu;
        return all;
    }
    return present;
}

double log_compatibility_product(Vec2 p, Vec2 mu_v, std::span<const NeighborTerm> terms) {
    if (terms.empty()) fail(ErrorKind::InvalidArgument, "compatibility needs at least one neighbor");
    const double lambda = 1.0 / static_cast<double>(terms.size());
    double acc = 0.0;
    for (const NeighborTerm& t : terms) acc += log_gaussian2(p, mu_v - t.mu + t.p, t.sigma2);
    return lambda * acc;
}

double compatibility_product(Vec2 p, Vec2 mu_v, std::span<const NeighborTerm> terms) {
    return std::exp(log_compatibility_product(p, mu_v, terms));
}

double compatibility_product(Vec2 p, const PatternNode& v, const GraphLayer* upper, const UpperContext& ctx) {
    auto terms = neighbor_terms(v, upper, ctx);
    return compatibility_product(p, v.mu, terms);
}

NeighborSummary summarize(std::span<const NeighborTerm> terms) {
    if (terms.empty()) fail(ErrorKind::InvalidArgument, "compatibility needs at least one neighbor");
    const double lambda = 1.0 / static_cast<double>(terms.size());
    double precision = 0.0;
    Vec2 weighted;
    double log_norm = 0.0;
    for (const NeighborTerm& t : terms) {
        const double w = 1.0 / t.sigma2;
        precision += w;
        weighted += w * (t.p - t.mu);
        log_norm += -std::log(2.0 * kPi * t.sigma2);
    }
    NeighborSummary s;
    s.delta = weighted / precision;
    s.sigma2_tilde = static_cast<double>(terms.size()) / precision;
    double spread = 0.0;
    for (const NeighborTerm& t : terms) spread += squared_norm(t.p - t.mu - s.delta) / t.sigma2;
    s.log_scale = lambda * log_norm - 0.5 * lambda * spread;
    return s;
}

ClosedForm compatibility_closed(Vec2 p, Vec2 mu_v, std::span<const NeighborTerm> terms) {
    if (terms.empty()) fail(ErrorKind::InvalidArgument, "compatibility needs at least one neighbor");
    double precision = 0.0;
    Vec2 weighted;
    for (const NeighborTerm& t : terms) {
        precision += 1.0 / t.sigma2;
        weighted += (t.p - t.mu) / t.sigma2;
    }
    ClosedForm c;
    c.delta = weighted / precision;
    c.sigma2_tilde = static_cast<double>(terms.size()) / precision;
    c.density = gaussian2(p, mu_v + c.delta, c.sigma2_tilde);
    return c;
}

ClosedForm compatibility_closed(Vec2 p, const PatternNode& v, const GraphLayer* upper, const UpperContext& ctx) {
    auto terms = neighbor_terms(v, upper, ctx);
    return compatibility_closed(p, v.mu, terms);
}

}  // namespace expgraph
