#pragma once

// Top-down EM learning of the explanatory graph.
//
// Each filter's activation entities are explained by a mixture of that
// filter's pattern nodes plus a constant-density noise component. A layer is
// learned from its own feature maps and the inferred positions of the layer
// above (R_{L+1}); the top layer hangs off a dummy parent at the origin.

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "expgraph/compat.hpp"
#include "expgraph/dataset.hpp"
#include "expgraph/graph.hpp"
#include "expgraph/inference.hpp"

namespace expgraph {

enum class MStepMode { ClosedForm, Gradient };

std::string_view to_string(MStepMode mode);
MStepMode parse_mstep_mode(std::string_view name);

struct LearnConfig {
    double tau = 0.1;
    int M = 15;
    int T = 20;
    double beta = 1.0;
    double eta = 0.05;
    MStepMode mode = MStepMode::ClosedForm;
    int candidate_pool = 100;
    std::uint64_t seed = 0;
    double sigma2_init = 0.0025;
    // Diagnostics: hold sigma2 or the neighbor sets fixed across iterations.
    bool update_sigma = true;
    bool update_neighbors = true;
    int threads = 1;

    // Throws InvalidArgument. T = 0 is accepted only when allow_zero_iterations.
    void validate(bool allow_zero_iterations = false) const;
    Hyperparams hyperparams() const;
};

// ---- E-step ---------------------------------------------------------------

// Posterior over {nodes of one filter} + {V_none} for each unit. Rows sum to 1.
struct Responsibilities {
    std::size_t components = 0;         // N + 1; the last column is V_none
    std::vector<double> values;         // row-major, units x components
    std::vector<double> log_mixture;    // per unit: log sum_V P(V) P(p_x | V)

    double at(std::size_t unit, std::size_t component) const { return values[unit * components + component]; }
    std::size_t rows() const { return log_mixture.size(); }
};

// Uniform prior 1/(N+1) on every component, constant density tau for V_none.
Responsibilities e_step(std::span<const Vec2> positions, std::span<const GaussianForm> nodes, double tau);

// Convenience form over dense units of a single filter.
Responsibilities e_step(std::span<const Unit> units, std::span<const PatternNode> nodes, const GraphLayer* upper,
                        const UpperContext& ctx, double tau);

// ---- M-step ---------------------------------------------------------------

// Responsibility-weighted sufficient statistics of one node in one image,
// with weights w_x = resp(V|x) * F(x), plus that image's neighbor summary.
struct ImageNodeStats {
    double weight = 0.0;
    Vec2 mean;              // weighted mean of p_x
    double scatter = 0.0;   // sum_x w_x |p_x - mean|^2
    Vec2 delta;
    double sigma2_tilde = 1.0;
};

ImageNodeStats accumulate_stats(std::span<const Vec2> positions, std::span<const double> weights,
                                const NeighborSummary& summary);

struct MuUpdate {
    Vec2 mu;
    bool zero_weight = false;  // node explains nothing; mu unchanged
};

// closed form: weighted mean of p_x - delta_I; gradient: one ascent step of
// size eta on the expected log-likelihood. Results are clamped to [0,1]^2.
MuUpdate m_step_mu(Vec2 current, std::span<const ImageNodeStats> stats, MStepMode mode, double eta);

struct SigmaUpdate {
    double sigma2 = kSigma2Floor;
    bool zero_weight = false;  // previous value kept
};

// Weighted mean of |p_x - mu - delta_I|^2 / 2, floored at kSigma2Floor.
SigmaUpdate estimate_sigma(double current, Vec2 mu, std::span<const ImageNodeStats> stats);

// Expected complete-data log-likelihood sum_x w_x log P(p_x | V) of one image
// and its gradient in mu_V, evaluated factor by factor.
double expected_loglik(Vec2 mu, std::span<const Vec2> positions, std::span<const double> weights,
                       std::span<const NeighborTerm> terms);
Vec2 expected_loglik_gradient(Vec2 mu, std::span<const Vec2> positions, std::span<const double> weights,
                              std::span<const NeighborTerm> terms);

// ---- Neighbor selection ---------------------------------------------------

// One image's share of filter d's likelihood as seen by a single node V.
struct SelectionImage {
    std::size_t image = 0;             // index into the context list
    std::span<const Vec2> positions;   // active units of filter d
    std::span<const double> mass;
    std::vector<double> log_other;     // log(P * tau + sum_{V'' != V} P * P(p_x | V''))
    double weight = 0.0;               // V's responsibility stats, used to re-fit mu
    Vec2 mean;
};

struct SelectionProblem {
    const PatternNode* node = nullptr;
    const GraphLayer* upper = nullptr;
    std::span<const UpperContext> contexts;
    std::vector<SelectionImage> images;
    double log_prior = 0.0;            // log 1/(N+1)
};

struct SelectionResult {
    std::vector<NodeId> edges;
    Vec2 mu;          // closed-form mu for the chosen edges
    double loglik = 0.0;
};

// Filter log-likelihood with V's edges replaced by `edges` and mu_V re-fit in
// closed form for them.
SelectionResult evaluate_edges(const SelectionProblem& problem, std::span<const NodeId> edges);

// Greedy forward selection of M edges among the candidates; ties go to the
// smallest node id. Throws InsufficientCandidates when fewer than M remain.
SelectionResult select_neighbors(const SelectionProblem& problem, std::span<const NodeId> candidates, int M);

// Upper-layer nodes ordered by the correlation, across images, between V's
// responsibility mass and the candidate's inference score; the first
// pool_size are returned (all of them when the layer is smaller).
std::vector<NodeId> rank_candidates(std::span<const double> node_mass_per_image, const GraphLayer& upper,
                                    std::span<const UpperContext> contexts, int pool_size);

// ---- Layer and graph learning ----------------------------------------------

class LayerLearner {
public:
    // `images` must outlive the learner; contexts hold R_{L+1} per image, or a
    // single dummy context per image for the top layer.
    LayerLearner(std::span<const ImageObservation> images, std::size_t layer_index, const GraphLayer* upper,
                 std::vector<UpperContext> contexts, GraphLayer layer, const LearnConfig& config);

    // mu uniform in [0.1, 0.9]^2 from rng, sigma2 = sigma2_init, edges = {dummy}.
    void initialize(std::mt19937_64& rng);

    // One EM iteration; returns the log-likelihood of the parameters it started from.
    double iterate();
    double loglik() const;

    const GraphLayer& layer() const { return layer_; }
    GraphLayer& layer() { return layer_; }
    const std::vector<UpperContext>& contexts() const { return contexts_; }

    // Inference of this layer in every image (R_L for the layer below).
    std::vector<std::vector<NodeAssignment>> infer() const;

private:
    struct ImageSlot {
        std::vector<ImageNodeStats> stats;   // per node
        std::vector<NeighborSummary> summaries;
        double loglik = 0.0;
    };

    const LayerObservation& obs(std::size_t image) const { return images_[image].layers[layer_index_]; }
    void expectation(std::vector<ImageSlot>& slots) const;
    void reselect_filter(int filter, const std::vector<ImageSlot>& slots);

    std::span<const ImageObservation> images_;
    std::size_t layer_index_;
    const GraphLayer* upper_;
    std::vector<UpperContext> contexts_;
    GraphLayer layer_;
    LearnConfig config_;
};

struct LayerResult {
    GraphLayer layer;
    std::vector<std::vector<NodeAssignment>> inference;  // per image
    std::vector<double> loglik;                          // after 0..T iterations
};

LayerResult learn_layer(std::span<const ImageObservation> images, std::size_t layer_index, const LayerSpec& spec,
                        const GraphLayer* upper, std::vector<UpperContext> contexts, const LearnConfig& config,
                        std::mt19937_64& rng);

struct LogEntry {
    int iteration = 0;
    std::string layer_id;
    double loglik = 0.0;
};

struct LearnResult {
    ExplanatoryGraph graph;
    std::vector<LogEntry> log;
};

// Learns the top layer first, then each lower layer against the inferred
// positions of the one above. `specs` are bottom-to-top and must match the
// layers of every image.
LearnResult learn_graph(std::span<const ImageObservation> images, const std::vector<LayerSpec>& specs,
                        const LearnConfig& config);

std::string learn_log_csv(std::span<const LogEntry> log);

}  // namespace expgraph
