#include "expgraph/em.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "expgraph/error.hpp"
#include "expgraph/parallel.hpp"

namespace expgraph {

namespace {

double log_add_exp(double a, double b) {
    if (a < b) std::swap(a, b);
    if (b == -std::numeric_limits<double>::infinity()) return a;
    return a + std::log1p(std::exp(b - a));
}

Vec2 clamp_unit(Vec2 p) { return {std::clamp(p.u, 0.0, 1.0), std::clamp(p.v, 0.0, 1.0)}; }

}  // namespace

std::string_view to_string(MStepMode mode) {
    return mode == MStepMode::ClosedForm ? "closed_form" : "gradient";
}

MStepMode parse_mstep_mode(std::string_view name) {
    if (name == "closed_form") return MStepMode::ClosedForm;
    if (name == "gradient") return MStepMode::Gradient;
    fail(ErrorKind::InvalidArgument, "unknown m-step mode '" + std::string(name) + "'");
}

void LearnConfig::validate(bool allow_zero_iterations) const {
    if (!(tau > 0.0)) fail(ErrorKind::InvalidArgument, "tau must be > 0");
    if (M < 1) fail(ErrorKind::InvalidArgument, "M must be >= 1");
    if (T < (allow_zero_iterations ? 0 : 1)) fail(ErrorKind::InvalidArgument, "T must be >= 1");
    if (!(beta > 0.0)) fail(ErrorKind::InvalidArgument, "beta must be > 0");
    if (!(eta > 0.0)) fail(ErrorKind::InvalidArgument, "eta must be > 0");
    if (candidate_pool < M) fail(ErrorKind::InvalidArgument, "candidate pool must be >= M");
    if (!(sigma2_init >= kSigma2Floor)) fail(ErrorKind::InvalidArgument, "sigma2_init below the variance floor");
    if (threads < 1) fail(ErrorKind::InvalidArgument, "threads must be >= 1");
}

Hyperparams LearnConfig::hyperparams() const {
    return {tau, M, T, beta, 1.0 / static_cast<double>(M)};
}

// ---- E-step ---------------------------------------------------------------

Responsibilities e_step(std::span<const Vec2> positions, std::span<const GaussianForm> nodes, double tau) {
    if (!(tau > 0.0)) fail(ErrorKind::InvalidArgument, "tau must be > 0");
    const std::size_t n = nodes.size();
    Responsibilities r;
    r.components = n + 1;
    r.values.resize(positions.size() * r.components);
    r.log_mixture.resize(positions.size());
    const double log_prior = -std::log(static_cast<double>(n + 1));
    const double log_none = log_prior + std::log(tau);

    std::vector<double> logs(r.components);
    for (std::size_t x = 0; x < positions.size(); ++x) {
        double top = log_none;
        for (std::size_t k = 0; k < n; ++k) {
            logs[k] = log_prior + nodes[k].log_density(positions[x]);
            top = std::max(top, logs[k]);
        }
        logs[n] = log_none;
        double sum = 0.0;
        for (double l : logs) sum += std::exp(l - top);
        const double log_mix = top + std::log(sum);
        r.log_mixture[x] = log_mix;
        double* row = &r.values[x * r.components];
        for (std::size_t k = 0; k <= n; ++k) row[k] = std::exp(logs[k] - log_mix);
    }
    return r;
}

Responsibilities e_step(std::span<const Unit> units, std::span<const PatternNode> nodes, const GraphLayer* upper,
                        const UpperContext& ctx, double tau) {
    std::vector<Vec2> pos;
    pos.reserve(units.size());
    for (const Unit& u : units) {
        if (!units.empty() && u.d != units.front().d)
            fail(ErrorKind::InvalidArgument, "e_step units must share one filter");
        pos.push_back(u.p);
    }
    std::vector<GaussianForm> forms;
    for (const PatternNode& v : nodes) forms.push_back(summarize(neighbor_terms(v, upper, ctx)).at(v.mu));
    return e_step(pos, forms, tau);
}

// ---- M-step ---------------------------------------------------------------

ImageNodeStats accumulate_stats(std::span<const Vec2> positions, std::span<const double> weights,
                                const NeighborSummary& summary) {
    ImageNodeStats s;
    s.delta = summary.delta;
    s.sigma2_tilde = summary.sigma2_tilde;
    Vec2 acc;
    for (std::size_t x = 0; x < positions.size(); ++x) {
        s.weight += weights[x];
        acc += weights[x] * positions[x];
    }
    if (!(s.weight > 0.0)) {
        s.weight = 0.0;
        return s;
    }
    s.mean = acc / s.weight;
    for (std::size_t x = 0; x < positions.size(); ++x) s.scatter += weights[x] * squared_norm(positions[x] - s.mean);
    return s;
}

MuUpdate m_step_mu(Vec2 current, std::span<const ImageNodeStats> stats, MStepMode mode, double eta) {
    double total = 0.0;
    for (const auto& s : stats) total += s.weight;
    if (!(total > 0.0)) return {current, true};

    if (mode == MStepMode::ClosedForm) {
        Vec2 acc;
        for (const auto& s : stats)
            if (s.weight > 0.0) acc += s.weight * (s.mean - s.delta);
        return {clamp_unit(acc / total), false};
    }
    Vec2 grad;
    for (const auto& s : stats)
        if (s.weight > 0.0) grad += (s.weight / s.sigma2_tilde) * (s.mean - current - s.delta);
    return {clamp_unit(current + eta * grad), false};
}

SigmaUpdate estimate_sigma(double current, Vec2 mu, std::span<const ImageNodeStats> stats) {
    double total = 0.0;
    double acc = 0.0;
    for (const auto& s : stats) {
        if (!(s.weight > 0.0)) continue;
        total += s.weight;
        acc += s.scatter + s.weight * squared_norm(s.mean - mu - s.delta);
    }
    if (!(total > 0.0)) return {current, true};
    return {std::max(kSigma2Floor, acc / (2.0 * total)), false};
}

double expected_loglik(Vec2 mu, std::span<const Vec2> positions, std::span<const double> weights,
                       std::span<const NeighborTerm> terms) {
    double acc = 0.0;
    for (std::size_t x = 0; x < positions.size(); ++x)
        acc += weights[x] * log_compatibility_product(positions[x], mu, terms);
    return acc;
}

Vec2 expected_loglik_gradient(Vec2 mu, std::span<const Vec2> positions, std::span<const double> weights,
                              std::span<const NeighborTerm> terms) {
    const double m = static_cast<double>(terms.size());
    Vec2 grad;
    for (std::size_t x = 0; x < positions.size(); ++x)
        for (const NeighborTerm& t : terms) {
            const Vec2 prior = mu - t.mu + t.p;
            grad += (weights[x] / (m * t.sigma2)) * (positions[x] - prior);
        }
    return grad;
}

// ---- Neighbor selection ---------------------------------------------------

SelectionResult evaluate_edges(const SelectionProblem& problem, std::span<const NodeId> edges) {
    PatternNode v = *problem.node;
    v.edges.assign(edges.begin(), edges.end());

    std::vector<NeighborSummary> summaries;
    summaries.reserve(problem.images.size());
    double total = 0.0;
    Vec2 acc;
    for (const SelectionImage& img : problem.images) {
        summaries.push_back(summarize(neighbor_terms(v, problem.upper, problem.contexts[img.image])));
        if (img.weight > 0.0) {
            total += img.weight;
            acc += img.weight * (img.mean - summaries.back().delta);
        }
    }
    SelectionResult out;
    out.edges = v.edges;
    out.mu = total > 0.0 ? clamp_unit(acc / total) : v.mu;

    for (std::size_t k = 0; k < problem.images.size(); ++k) {
        const SelectionImage& img = problem.images[k];
        const GaussianForm form = summaries[k].at(out.mu);
        double ll = 0.0;
        for (std::size_t x = 0; x < img.positions.size(); ++x)
            ll += img.mass[x] * log_add_exp(img.log_other[x], problem.log_prior + form.log_density(img.positions[x]));
        out.loglik += ll;
    }
    return out;
}

SelectionResult select_neighbors(const SelectionProblem& problem, std::span<const NodeId> candidates, int M) {
    std::vector<NodeId> remaining(candidates.begin(), candidates.end());
    std::sort(remaining.begin(), remaining.end());
    remaining.erase(std::unique(remaining.begin(), remaining.end()), remaining.end());
    if (M < 1 || remaining.size() < static_cast<std::size_t>(M))
        fail(ErrorKind::InsufficientCandidates, "node " + to_string(problem.node->id) + " has " +
                                                    std::to_string(remaining.size()) + " candidates for M = " +
                                                    std::to_string(M));
    std::vector<NodeId> chosen;
    SelectionResult best;
    for (int step = 0; step < M; ++step) {
        std::size_t arg = 0;
        SelectionResult round_best;
        round_best.loglik = -std::numeric_limits<double>::infinity();
        chosen.push_back(NodeId{});
        for (std::size_t c = 0; c < remaining.size(); ++c) {
            chosen.back() = remaining[c];
            SelectionResult r = evaluate_edges(problem, chosen);
            if (r.loglik > round_best.loglik || c == 0) {
                round_best = std::move(r);
                arg = c;
            }
        }
        chosen.back() = remaining[arg];
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(arg));
        best = std::move(round_best);
    }
    std::sort(best.edges.begin(), best.edges.end());
    return best;
}

std::vector<NodeId> rank_candidates(std::span<const double> node_mass_per_image, const GraphLayer& upper,
                                    std::span<const UpperContext> contexts, int pool_size) {
    const std::size_t n_images = contexts.size();
    std::vector<NodeId> ids;
    ids.reserve(upper.nodes.size());
    for (const auto& n : upper.nodes) ids.push_back(n.id);
    if (static_cast<std::size_t>(pool_size) >= ids.size()) return ids;

    auto mean_of = [&](auto value) {
        double s = 0.0;
        for (std::size_t i = 0; i < n_images; ++i) s += value(i);
        return n_images ? s / static_cast<double>(n_images) : 0.0;
    };
    const double a_mean = mean_of([&](std::size_t i) { return node_mass_per_image[i]; });
    double a_var = 0.0;
    for (std::size_t i = 0; i < n_images; ++i) a_var += (node_mass_per_image[i] - a_mean) * (node_mass_per_image[i] - a_mean);

    std::vector<double> corr(ids.size(), 0.0);
    for (std::size_t c = 0; c < ids.size(); ++c) {
        auto score = [&](std::size_t i) {
            const PositionEstimate& e = contexts[i].nodes[c];
            return e.detected ? e.score : 0.0;
        };
        const double b_mean = mean_of(score);
        double cov = 0.0, b_var = 0.0;
        for (std::size_t i = 0; i < n_images; ++i) {
            const double db = score(i) - b_mean;
            cov += (node_mass_per_image[i] - a_mean) * db;
            b_var += db * db;
        }
        corr[c] = (a_var > 0.0 && b_var > 0.0) ? cov / std::sqrt(a_var * b_var) : 0.0;
    }
    std::vector<std::size_t> order(ids.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (corr[a] != corr[b]) return corr[a] > corr[b];
        return ids[a] < ids[b];
    });
    std::vector<NodeId> out;
    for (std::size_t k = 0; k < static_cast<std::size_t>(pool_size); ++k) out.push_back(ids[order[k]]);
    return out;
}

// ---- LayerLearner -----------------------------------------------------------

LayerLearner::LayerLearner(std::span<const ImageObservation> images, std::size_t layer_index,
                           const GraphLayer* upper, std::vector<UpperContext> contexts, GraphLayer layer,
                           const LearnConfig& config)
    : images_(images),
      layer_index_(layer_index),
      upper_(upper),
      contexts_(std::move(contexts)),
      layer_(std::move(layer)),
      config_(config) {
    if (images_.empty()) fail(ErrorKind::EmptyDataset, "no images to learn from");
    if (contexts_.size() != images_.size())
        fail(ErrorKind::MissingNeighborInference, "need one upper context per image");
    for (const auto& img : images_) {
        if (img.layers.size() <= layer_index_)
            fail(ErrorKind::LayerMissingInImage, "image " + img.image_id + " lacks layer " + layer_.spec.layer_id);
        const LayerMeta& m = img.layers[layer_index_].meta;
        if (m.layer_id != layer_.spec.layer_id)
            fail(ErrorKind::LayerMissingInImage, "image " + img.image_id + " has " + m.layer_id + " where " +
                                                     layer_.spec.layer_id + " was expected");
        if (m.depth != layer_.spec.depth)
            fail(ErrorKind::ShapeMismatch, "layer " + m.layer_id + " depth differs from the layer spec");
    }
}

void LayerLearner::initialize(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> coord(0.1, 0.9);
    for (PatternNode& v : layer_.nodes) {
        const double u = coord(rng);
        const double w = coord(rng);
        v.mu = {u, w};
        v.sigma2 = config_.sigma2_init;
        v.edges = {NodeId::dummy()};
    }
}

void LayerLearner::expectation(std::vector<ImageSlot>& slots) const {
    const int depth = layer_.spec.depth;
    const int n = layer_.spec.patterns_per_filter;
    slots.assign(images_.size(), {});
    parallel_for(images_.size(), config_.threads, [&](std::size_t img) {
        ImageSlot& slot = slots[img];
        slot.stats.resize(layer_.nodes.size());
        slot.summaries.resize(layer_.nodes.size());
        const LayerObservation& o = obs(img);
        std::vector<GaussianForm> forms(static_cast<std::size_t>(n));
        std::vector<double> weights;
        for (int d = 0; d < depth; ++d) {
            const std::size_t base = layer_.flat_index(d, 0);
            for (int k = 0; k < n; ++k) {
                const PatternNode& v = layer_.nodes[base + k];
                slot.summaries[base + k] = summarize(neighbor_terms(v, upper_, contexts_[img]));
                forms[static_cast<std::size_t>(k)] = slot.summaries[base + k].at(v.mu);
            }
            const ActiveUnits& units = o.filters[static_cast<std::size_t>(d)];
            if (units.empty()) {
                for (int k = 0; k < n; ++k)
                    slot.stats[base + k] = accumulate_stats({}, {}, slot.summaries[base + k]);
                continue;
            }
            const Responsibilities r = e_step(units.pos, forms, config_.tau);
            for (std::size_t x = 0; x < units.size(); ++x) slot.loglik += units.mass[x] * r.log_mixture[x];
            weights.resize(units.size());
            for (int k = 0; k < n; ++k) {
                for (std::size_t x = 0; x < units.size(); ++x)
                    weights[x] = r.at(x, static_cast<std::size_t>(k)) * units.mass[x];
                slot.stats[base + k] = accumulate_stats(units.pos, weights, slot.summaries[base + k]);
            }
        }
    });
}

double LayerLearner::loglik() const {
    std::vector<ImageSlot> slots;
    expectation(slots);
    double total = 0.0;
    for (const auto& s : slots) total += s.loglik;
    return total;
}

double LayerLearner::iterate() {
    std::vector<ImageSlot> slots;
    expectation(slots);
    double total = 0.0;
    for (const auto& s : slots) total += s.loglik;

    std::vector<ImageNodeStats> per_image(images_.size());
    for (std::size_t f = 0; f < layer_.nodes.size(); ++f) {
        PatternNode& v = layer_.nodes[f];
        for (std::size_t img = 0; img < images_.size(); ++img) per_image[img] = slots[img].stats[f];
        v.mu = m_step_mu(v.mu, per_image, config_.mode, config_.eta).mu;
        if (config_.update_sigma) v.sigma2 = estimate_sigma(v.sigma2, v.mu, per_image).sigma2;
    }

    if (config_.update_neighbors && upper_ != nullptr) {
        parallel_for(static_cast<std::size_t>(layer_.spec.depth), config_.threads,
                     [&](std::size_t d) { reselect_filter(static_cast<int>(d), slots); });
    }
    return total;
}

void LayerLearner::reselect_filter(int filter, const std::vector<ImageSlot>& slots) {
    const std::size_t n = static_cast<std::size_t>(layer_.spec.patterns_per_filter);
    const std::size_t base = layer_.flat_index(filter, 0);
    const double log_prior = -std::log(static_cast<double>(n + 1));
    const double log_none = log_prior + std::log(config_.tau);

    // Per active image: log P(V) P(p_x | V) for every node of the filter, row-major units x n.
    std::vector<std::size_t> active;
    std::vector<std::vector<double>> ldens;
    for (std::size_t img = 0; img < images_.size(); ++img) {
        const ActiveUnits& units = obs(img).filters[static_cast<std::size_t>(filter)];
        if (units.empty()) continue;
        active.push_back(img);
        std::vector<double> rows(units.size() * n);
        for (std::size_t k = 0; k < n; ++k) {
            const GaussianForm form = slots[img].summaries[base + k].at(layer_.nodes[base + k].mu);
            for (std::size_t x = 0; x < units.size(); ++x) rows[x * n + k] = log_prior + form.log_density(units.pos[x]);
        }
        ldens.push_back(std::move(rows));
    }

    std::vector<double> mass_per_image(images_.size(), 0.0);
    for (std::size_t k = 0; k < n; ++k) {
        PatternNode& v = layer_.nodes[base + k];
        SelectionProblem problem;
        problem.node = &v;
        problem.upper = upper_;
        problem.contexts = contexts_;
        problem.log_prior = log_prior;
        for (std::size_t a = 0; a < active.size(); ++a) {
            const std::size_t img = active[a];
            const ActiveUnits& units = obs(img).filters[static_cast<std::size_t>(filter)];
            SelectionImage si;
            si.image = img;
            si.positions = units.pos;
            si.mass = units.mass;
            si.weight = slots[img].stats[base + k].weight;
            si.mean = slots[img].stats[base + k].mean;
            si.log_other.resize(units.size());
            for (std::size_t x = 0; x < units.size(); ++x) {
                double acc = log_none;
                for (std::size_t o = 0; o < n; ++o)
                    if (o != k) acc = log_add_exp(acc, ldens[a][x * n + o]);
                si.log_other[x] = acc;
            }
            problem.images.push_back(std::move(si));
        }
        for (std::size_t img = 0; img < images_.size(); ++img) mass_per_image[img] = slots[img].stats[base + k].weight;

        const auto candidates = rank_candidates(mass_per_image, *upper_, contexts_, config_.candidate_pool);
        SelectionResult chosen = select_neighbors(problem, candidates, config_.M);
        v.edges = std::move(chosen.edges);
        if (config_.mode == MStepMode::ClosedForm) v.mu = chosen.mu;

        for (std::size_t a = 0; a < active.size(); ++a) {
            const std::size_t img = active[a];
            const ActiveUnits& units = obs(img).filters[static_cast<std::size_t>(filter)];
            const GaussianForm form = summarize(neighbor_terms(v, upper_, contexts_[img])).at(v.mu);
            for (std::size_t x = 0; x < units.size(); ++x) ldens[a][x * n + k] = log_prior + form.log_density(units.pos[x]);
        }
    }
}

std::vector<std::vector<NodeAssignment>> LayerLearner::infer() const {
    std::vector<std::vector<NodeAssignment>> out(images_.size());
    parallel_for(images_.size(), config_.threads,
                 [&](std::size_t img) { out[img] = infer_layer(layer_, obs(img), upper_, contexts_[img]); });
    return out;
}

// ---- Drivers ----------------------------------------------------------------

LayerResult learn_layer(std::span<const ImageObservation> images, std::size_t layer_index, const LayerSpec& spec,
                        const GraphLayer* upper, std::vector<UpperContext> contexts, const LearnConfig& config,
                        std::mt19937_64& rng) {
    config.validate(/*allow_zero_iterations=*/true);
    if (images.empty()) fail(ErrorKind::EmptyDataset, "no images to learn from");
    ExplanatoryGraph skeleton = make_graph_skeleton({spec}, config.hyperparams());
    GraphLayer layer = std::move(skeleton.layers.front());
    for (PatternNode& v : layer.nodes) v.id.layer = static_cast<int>(layer_index);

    LayerLearner learner(images, layer_index, upper, std::move(contexts), std::move(layer), config);
    learner.initialize(rng);
    LayerResult result;
    for (int t = 0; t < config.T; ++t) result.loglik.push_back(learner.iterate());
    result.loglik.push_back(learner.loglik());
    result.inference = learner.infer();
    result.layer = learner.layer();
    return result;
}

LearnResult learn_graph(std::span<const ImageObservation> images, const std::vector<LayerSpec>& specs,
                        const LearnConfig& config) {
    config.validate();
    if (images.empty()) fail(ErrorKind::EmptyDataset, "no images to learn from");
    if (specs.empty()) fail(ErrorKind::InvalidArgument, "no layers to learn");
    for (const auto& img : images) {
        if (img.layers.size() < specs.size())
            fail(ErrorKind::LayerMissingInImage, "image " + img.image_id + " has too few layers");
        for (std::size_t l = 0; l < specs.size(); ++l)
            if (img.layers[l].meta.layer_id != specs[l].layer_id)
                fail(ErrorKind::LayerMissingInImage, "image " + img.image_id + " lacks layer " + specs[l].layer_id);
    }

    LearnResult out;
    out.graph.hyperparams = config.hyperparams();
    out.graph.layers.resize(specs.size());
    std::mt19937_64 rng(config.seed);
    std::vector<UpperContext> contexts(images.size(), UpperContext::top());
    for (std::size_t l = specs.size(); l-- > 0;) {
        const GraphLayer* upper = l + 1 < specs.size() ? &out.graph.layers[l + 1] : nullptr;
        LayerResult r = learn_layer(images, l, specs[l], upper, std::move(contexts), config, rng);
        for (std::size_t t = 0; t < r.loglik.size(); ++t)
            out.log.push_back({static_cast<int>(t), specs[l].layer_id, r.loglik[t]});
        contexts.clear();
        for (const auto& assignments : r.inference) contexts.push_back(to_context(assignments));
        out.graph.layers[l] = std::move(r.layer);
    }
    validate(out.graph);
    return out;
}

std::string learn_log_csv(std::span<const LogEntry> log) {
    std::string out = "iter,layer,loglik\n";
    char buf[64];
    for (const LogEntry& e : log) {
        std::snprintf(buf, sizeof buf, "%.17g", e.loglik);
        out += std::to_string(e.iteration) + "," + e.layer_id + "," + buf + "\n";
    }
    return out;
}

}  // namespace expgraph
