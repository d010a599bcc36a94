#pragma once

// Spatial compatibility between a pattern node and a position on the image
// plane, given where the node's upper-layer neighbors were inferred.
//
// Each neighbor V' votes with N(p | mu_V - mu_V' + p_V', sigma2_V'); the
// node's compatibility is the geometric mean of the votes. A product of
// isotropic Gaussians is again Gaussian, so the same quantity is also
// available as N(p | mu_V + delta, sigma2_tilde) times a position-free scale.

#include <span>
#include <vector>

#include "expgraph/geometry.hpp"
#include "expgraph/graph.hpp"

namespace expgraph {

// Inferred position of one upper-layer node in one image.
struct PositionEstimate {
    Vec2 p;
    double score = 0.0;
    bool detected = false;
};

// R_{L+1} for one image: estimates in the upper layer's flat node order, or
// the dummy context (single parent at the origin) for the top layer.
struct UpperContext {
    bool dummy = true;
    std::vector<PositionEstimate> nodes;

    static UpperContext top() { return {}; }
};

struct NeighborTerm {
    Vec2 mu;        // neighbor's prior position
    Vec2 p;         // neighbor's inferred position in this image
    double sigma2;  // neighbor's variance
};

// Factors of V's compatibility in one image. A dummy edge contributes
// {0, 0, sigma2_V}. Undetected neighbors are dropped; if none is detected all
// are kept at their fallback positions, which then carry no displacement.
// Throws MissingNeighborInference when ctx has no entry for an edge.
std::vector<NeighborTerm> neighbor_terms(const PatternNode& v, const GraphLayer* upper, const UpperContext& ctx);

// Geometric mean of the neighbor Gaussians, weight 1/|terms| each.
double log_compatibility_product(Vec2 p, Vec2 mu_v, std::span<const NeighborTerm> terms);
double compatibility_product(Vec2 p, Vec2 mu_v, std::span<const NeighborTerm> terms);
double compatibility_product(Vec2 p, const PatternNode& v, const GraphLayer* upper, const UpperContext& ctx);

struct ClosedForm {
    double density = 0.0;      // exact N(p | mu_V + delta, sigma2_tilde)
    Vec2 delta;                // precision-weighted mean displacement of the neighbors
    double sigma2_tilde = 0.0; // 1 / mean(1 / sigma2_V')
};

ClosedForm compatibility_closed(Vec2 p, Vec2 mu_v, std::span<const NeighborTerm> terms);
ClosedForm compatibility_closed(Vec2 p, const PatternNode& v, const GraphLayer* upper, const UpperContext& ctx);

// Unnormalized isotropic Gaussian in log space.
struct GaussianForm {
    Vec2 center;
    double variance = 1.0;
    double log_scale = 0.0;

    double log_density(Vec2 p) const { return log_scale - squared_norm(p - center) / (2.0 * variance); }
};

// Position-independent part of the product, precomputed once per (node,
// image): log_product(p) = log_scale - |p - mu_V - delta|^2 / (2 sigma2_tilde).
// Independent of mu_V, so it survives M-step updates of the node.
struct NeighborSummary {
    Vec2 delta;
    double sigma2_tilde = 1.0;
    double log_scale = 0.0;

    GaussianForm at(Vec2 mu_v) const { return {mu_v + delta, sigma2_tilde, log_scale}; }
    double log_density(Vec2 p, Vec2 mu_v) const { return at(mu_v).log_density(p); }
};

NeighborSummary summarize(std::span<const NeighborTerm> terms);

}  // namespace expgraph
