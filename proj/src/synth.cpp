#include "expgraph/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "expgraph/dataset.hpp"
#include "expgraph/error.hpp"
#include "expgraph/parallel.hpp"

namespace expgraph {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::string image_name(int k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "img%05d", k);
    return buf;
}

void add_bump(std::vector<float>& values, std::size_t plane_offset, int size, Vec2 center, double amplitude,
              double cutoff) {
    const double step = 1.0 / size;
    const double limit2 = cutoff > 0.0 ? (cutoff * step) * (cutoff * step) : std::numeric_limits<double>::infinity();
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
            const Vec2 p{(j + 0.5) * step, (i + 0.5) * step};
            const double r2 = squared_norm(p - center);
            if (r2 > limit2) continue;
            values[plane_offset + static_cast<std::size_t>(i) * size + j] +=
                static_cast<float>(amplitude * std::exp(-r2 / (2.0 * step * step)));
        }
}

}  // namespace

void SynthSpec::validate() const {
    if (layers.empty()) fail(ErrorKind::InvalidArgument, "synthetic spec needs at least one layer");
    for (const auto& l : layers) {
        if (l.depth < 1 || l.height < 1 || l.width < 1 || l.patterns_per_filter < 1)
            fail(ErrorKind::InvalidArgument, "synthetic layer " + l.layer_id + " needs positive D, H, W, N");
        if (l.height != l.width) fail(ErrorKind::InvalidArgument, "synthetic layer " + l.layer_id + " must be square");
    }
    if (!(image_size_px > 0.0) || pattern_sigma < 0.0 || jitter_std < 0.0 || noise_peaks_per_filter < 0 ||
        edges_per_node < 1 || amplitude_min > amplitude_max || noise_amplitude_min > noise_amplitude_max ||
        amplitude_min <= 0.0 || noise_amplitude_min < 0.0 || placement_margin < 0.0 || placement_margin >= 0.5 ||
        render_cutoff < 0.0 || min_separation < 0.0)
        fail(ErrorKind::InvalidArgument, "synthetic spec has an out-of-range parameter");
}

std::vector<LayerSpec> SynthSpec::layer_specs() const {
    std::vector<LayerSpec> out;
    for (const auto& l : layers) out.push_back({l.layer_id, l.depth, l.patterns_per_filter});
    return out;
}

SynthSpec reference_synth_spec(std::uint64_t seed) {
    SynthSpec s;
    s.layers = {{"low", 10, 14, 14, 3}, {"high", 10, 14, 14, 3}};
    s.edges_per_node = 2;
    s.noise_peaks_per_filter = 1;
    s.seed = seed;
    return s;
}

ojson synth_spec_to_json(const SynthSpec& s) {
    ojson doc;
    ojson layers = ojson::array();
    for (const auto& l : s.layers) {
        ojson o;
        o["layer_id"] = l.layer_id;
        o["D"] = l.depth;
        o["H"] = l.height;
        o["W"] = l.width;
        o["N"] = l.patterns_per_filter;
        layers.push_back(o);
    }
    doc["layers"] = layers;
    doc["image_size_px"] = s.image_size_px;
    doc["pattern_sigma"] = s.pattern_sigma;
    doc["edges_per_node"] = s.edges_per_node;
    doc["jitter_std"] = s.jitter_std;
    doc["noise_peaks_per_filter"] = s.noise_peaks_per_filter;
    doc["amplitude"] = {s.amplitude_min, s.amplitude_max};
    doc["noise_amplitude"] = {s.noise_amplitude_min, s.noise_amplitude_max};
    doc["min_separation"] = s.min_separation;
    doc["placement_margin"] = s.placement_margin;
    doc["render_cutoff"] = s.render_cutoff;
    ojson lm = ojson::object();
    for (const auto& [name, p] : s.landmarks) lm[name] = {p.u, p.v};
    doc["landmarks"] = lm;
    doc["seed"] = s.seed;
    return doc;
}

SynthSpec synth_spec_from_json(const json& doc) {
    if (!doc.is_object()) fail(ErrorKind::SchemaError, "synthetic spec must be an object");
    static const char* known[] = {"layers", "image_size_px", "pattern_sigma", "edges_per_node", "jitter_std",
                                  "noise_peaks_per_filter", "amplitude", "noise_amplitude", "min_separation",
                                  "placement_margin", "render_cutoff", "landmarks", "seed"};
    for (const auto& [k, v] : doc.items())
        if (std::find_if(std::begin(known), std::end(known), [&](const char* n) { return k == n; }) == std::end(known))
            fail(ErrorKind::SchemaError, "synthetic spec has unknown field '" + k + "'");
    SynthSpec s;
    try {
        if (doc.contains("layers")) {
            s.layers.clear();
            for (const json& l : doc["layers"])
                s.layers.push_back({l.at("layer_id").get<std::string>(), l.at("D").get<int>(), l.at("H").get<int>(),
                                    l.at("W").get<int>(), l.at("N").get<int>()});
        }
        s.image_size_px = doc.value("image_size_px", s.image_size_px);
        s.pattern_sigma = doc.value("pattern_sigma", s.pattern_sigma);
        s.edges_per_node = doc.value("edges_per_node", s.edges_per_node);
        s.jitter_std = doc.value("jitter_std", s.jitter_std);
        s.noise_peaks_per_filter = doc.value("noise_peaks_per_filter", s.noise_peaks_per_filter);
        if (doc.contains("amplitude")) {
            s.amplitude_min = doc["amplitude"].at(0).get<double>();
            s.amplitude_max = doc["amplitude"].at(1).get<double>();
        }
        if (doc.contains("noise_amplitude")) {
            s.noise_amplitude_min = doc["noise_amplitude"].at(0).get<double>();
            s.noise_amplitude_max = doc["noise_amplitude"].at(1).get<double>();
        }
        s.min_separation = doc.value("min_separation", s.min_separation);
        s.placement_margin = doc.value("placement_margin", s.placement_margin);
        s.render_cutoff = doc.value("render_cutoff", s.render_cutoff);
        if (doc.contains("landmarks")) {
            s.landmarks.clear();
            for (const auto& [name, p] : doc["landmarks"].items())
                s.landmarks[name] = {p.at(0).get<double>(), p.at(1).get<double>()};
        }
        s.seed = doc.value("seed", s.seed);
    } catch (const json::exception& e) {
        fail(ErrorKind::SchemaError, std::string("synthetic spec: ") + e.what());
    }
    s.validate();
    return s;
}

ExplanatoryGraph gen_planted_graph(const SynthSpec& spec) {
    spec.validate();
    Hyperparams hp;
    hp.M = spec.edges_per_node;
    hp.lambda = 1.0 / hp.M;
    ExplanatoryGraph g = make_graph_skeleton(spec.layer_specs(), hp);

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> coord(spec.placement_margin, 1.0 - spec.placement_margin);
    const double separation = std::max(3.0 * spec.pattern_sigma, spec.min_separation);
    const double sigma2 = std::max(kSigma2Floor, spec.pattern_sigma * spec.pattern_sigma);
    constexpr int kDrawsPerPattern = 2000;
    constexpr int kRestarts = 50;

    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        GraphLayer& layer = g.layers[l];
        const int n = layer.spec.patterns_per_filter;
        for (int d = 0; d < layer.spec.depth; ++d) {
            std::vector<Vec2> centers;
            for (int attempt = 0; attempt < kRestarts && static_cast<int>(centers.size()) < n; ++attempt) {
                centers.clear();
                for (int k = 0; k < n; ++k) {
                    bool placed = false;
                    for (int draw = 0; draw < kDrawsPerPattern && !placed; ++draw) {
                        const Vec2 c{coord(rng), coord(rng)};
                        placed = std::all_of(centers.begin(), centers.end(),
                                             [&](Vec2 o) { return norm(c - o) >= separation; });
                        if (placed) centers.push_back(c);
                    }
                    if (!placed) break;
                }
            }
            if (static_cast<int>(centers.size()) < n)
                fail(ErrorKind::SeparationUnsatisfiable, "cannot place " + std::to_string(n) +
                                                             " patterns at separation " + std::to_string(separation) +
                                                             " in layer " + layer.spec.layer_id);
            for (int k = 0; k < n; ++k) {
                PatternNode& v = layer.nodes[layer.flat_index(d, k)];
                v.mu = centers[static_cast<std::size_t>(k)];
                v.sigma2 = sigma2;
            }
        }
    }

    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        const bool top = l + 1 == g.layers.size();
        for (PatternNode& v : g.layers[l].nodes) {
            if (top) {
                v.edges = {NodeId::dummy()};
                continue;
            }
            const GraphLayer& upper = g.layers[l + 1];
            if (upper.nodes.size() < static_cast<std::size_t>(hp.M))
                fail(ErrorKind::InvalidArgument, "layer " + upper.spec.layer_id + " has fewer nodes than M");
            std::vector<std::size_t> pick(upper.nodes.size());
            std::iota(pick.begin(), pick.end(), 0);
            for (int m = 0; m < hp.M; ++m) {
                std::uniform_int_distribution<std::size_t> which(static_cast<std::size_t>(m), pick.size() - 1);
                std::swap(pick[static_cast<std::size_t>(m)], pick[which(rng)]);
            }
            v.edges.clear();
            for (int m = 0; m < hp.M; ++m) v.edges.push_back(upper.nodes[pick[static_cast<std::size_t>(m)]].id);
            std::sort(v.edges.begin(), v.edges.end());
        }
    }
    validate(g);
    return g;
}

LandmarkSet SynthDataset::landmark_set() const {
    LandmarkSet out;
    for (const auto& t : truth) out[t.image_id] = t.landmarks;
    return out;
}

SynthDataset sample_images(const ExplanatoryGraph& planted, int n_images, const SynthSpec& spec, int threads) {
    spec.validate();
    if (n_images < 1) fail(ErrorKind::InvalidArgument, "need at least one image");
    if (planted.layers.size() != spec.layers.size())
        fail(ErrorKind::ShapeMismatch, "planted graph and synthetic spec disagree on layers");

    SynthDataset data;
    data.images.resize(static_cast<std::size_t>(n_images));
    data.truth.resize(static_cast<std::size_t>(n_images));
    parallel_for(static_cast<std::size_t>(n_images), threads, [&](std::size_t k) {
        std::mt19937_64 rng(splitmix64(spec.seed ^ splitmix64(k + 1)));
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

        ImageTruth& truth = data.truth[k];
        FeatureMapSet& set = data.images[k];
        truth.image_id = set.image_id = image_name(static_cast<int>(k));
        truth.jitter = {spec.jitter_std * gauss(rng), spec.jitter_std * gauss(rng)};
        for (const auto& [name, p] : spec.landmarks) truth.landmarks[name] = p + truth.jitter;

        for (std::size_t l = 0; l < spec.layers.size(); ++l) {
            const SynthLayerSpec& ls = spec.layers[l];
            const GraphLayer& layer = planted.layers[l];
            if (layer.spec.depth != ls.depth || layer.spec.patterns_per_filter != ls.patterns_per_filter)
                fail(ErrorKind::ShapeMismatch, "planted layer " + layer.spec.layer_id + " does not match the spec");
            FeatureMap fm;
            fm.image_id = set.image_id;
            fm.meta.layer_id = ls.layer_id;
            fm.meta.depth = ls.depth;
            fm.meta.height = ls.height;
            fm.meta.width = ls.width;
            fm.meta.stride_px = spec.image_size_px / ls.width;
            fm.meta.offset_px = {fm.meta.stride_px / 2.0, fm.meta.stride_px / 2.0};
            fm.meta.image_width_px = spec.image_size_px;
            fm.meta.image_height_px = spec.image_size_px;
            fm.meta.image_diag_px = std::hypot(spec.image_size_px, spec.image_size_px);
            fm.values.assign(fm.meta.unit_count(), 0.0f);

            std::vector<Vec2>& positions = truth.positions.emplace_back();
            for (const PatternNode& v : layer.nodes) {
                const Vec2 noise{spec.pattern_sigma * gauss(rng), spec.pattern_sigma * gauss(rng)};
                const Vec2 center = v.mu + truth.jitter + noise;
                positions.push_back(center);
                const std::size_t plane = fm.meta.linear_index(v.id.filter, 0, 0);
                add_bump(fm.values, plane, ls.width, center, uniform(spec.amplitude_min, spec.amplitude_max),
                         spec.render_cutoff);
            }
            for (int d = 0; d < ls.depth; ++d)
                for (int q = 0; q < spec.noise_peaks_per_filter; ++q) {
                    const Vec2 center{unit(rng), unit(rng)};
                    add_bump(fm.values, fm.meta.linear_index(d, 0, 0), ls.width, center,
                             uniform(spec.noise_amplitude_min, spec.noise_amplitude_max), spec.render_cutoff);
                }
            set.maps.push_back(std::move(fm));
        }
    });
    return data;
}

ojson truth_to_json(const ExplanatoryGraph& planted, const SynthDataset& data) {
    ojson doc;
    doc["planted"] = graph_to_json(planted);
    ojson images = ojson::array();
    for (const ImageTruth& t : data.truth) {
        ojson o;
        o["image_id"] = t.image_id;
        o["jitter"] = {t.jitter.u, t.jitter.v};
        ojson pos = ojson::array();
        for (std::size_t l = 0; l < t.positions.size(); ++l)
            for (std::size_t f = 0; f < t.positions[l].size(); ++f) {
                ojson e;
                e["node_id"] = node_id_to_json(planted.layers[l].nodes[f].id);
                e["p"] = {t.positions[l][f].u, t.positions[l][f].v};
                pos.push_back(std::move(e));
            }
        o["positions"] = std::move(pos);
        ojson lm = ojson::object();
        for (const auto& [name, p] : t.landmarks) lm[name] = {p.u, p.v};
        o["landmarks"] = std::move(lm);
        images.push_back(std::move(o));
    }
    doc["images"] = std::move(images);
    return doc;
}

void write_synthetic(const std::filesystem::path& dir, const ExplanatoryGraph& planted, const SynthDataset& data) {
    std::filesystem::create_directories(dir);
    Manifest manifest;
    manifest.base_dir = dir;
    for (const FeatureMapSet& set : data.images) {
        ManifestEntry entry;
        entry.image_id = set.image_id;
        for (const FeatureMap& fm : set.maps) {
            const std::string name = set.image_id + "_" + fm.meta.layer_id + ".fmap";
            write_fmap(dir / name, fm);
            entry.layers.push_back({fm.meta.layer_id, name});
        }
        manifest.images.push_back(std::move(entry));
    }
    write_manifest(dir / "manifest.json", manifest);
    std::ofstream truth(dir / "truth.json", std::ios::trunc);
    if (!truth) fail(ErrorKind::IoError, "cannot write truth.json in " + dir.string());
    truth << truth_to_json(planted, data).dump(1) << '\n';
    save_landmarks(dir / "landmarks.json", data.landmark_set());
}

std::vector<int> match_exhaustive(const std::vector<std::vector<double>>& cost) {
    const int n = static_cast<int>(cost.size());
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<int> best = perm;
    double best_cost = std::numeric_limits<double>::infinity();
    do {
        double c = 0.0;
        for (int r = 0; r < n; ++r) c += cost[static_cast<std::size_t>(r)][static_cast<std::size_t>(perm[static_cast<std::size_t>(r)])];
        if (c < best_cost) {
            best_cost = c;
            best = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

std::vector<int> match_hungarian(const std::vector<std::vector<double>>& cost) {
    // Shortest augmenting path with potentials; rows and columns are 1-based inside.
    const std::size_t n = cost.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> col_owner(n + 1, 0), way(n + 1, 0);
    for (std::size_t row = 1; row <= n; ++row) {
        col_owner[0] = row;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = col_owner[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (col_owner[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> assignment(n, -1);
    for (std::size_t j = 1; j <= n; ++j)
        if (col_owner[j] != 0) assignment[col_owner[j] - 1] = static_cast<int>(j - 1);
    return assignment;
}

RecoveryReport recovery_error(const ExplanatoryGraph& planted, const ExplanatoryGraph& learned, double threshold) {
    if (planted.layers.size() != learned.layers.size())
        fail(ErrorKind::ShapeMismatch, "graphs differ in layer count");
    RecoveryReport report;
    double total = 0.0;
    std::size_t count = 0, within = 0;
    for (std::size_t l = 0; l < planted.layers.size(); ++l) {
        const GraphLayer& a = planted.layers[l];
        const GraphLayer& b = learned.layers[l];
        if (a.spec.depth != b.spec.depth || a.spec.patterns_per_filter != b.spec.patterns_per_filter)
            fail(ErrorKind::ShapeMismatch, "layer " + a.spec.layer_id + " differs in shape");
        const int n = a.spec.patterns_per_filter;
        auto& errors = report.errors.emplace_back(a.nodes.size(), 0.0);
        auto& matched = report.matched.emplace_back(a.nodes.size());
        for (int d = 0; d < a.spec.depth; ++d) {
            std::vector<std::vector<double>> cost(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(n)));
            for (int r = 0; r < n; ++r)
                for (int c = 0; c < n; ++c)
                    cost[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] =
                        norm(a.nodes[a.flat_index(d, r)].mu - b.nodes[b.flat_index(d, c)].mu);
            const std::vector<int> assignment = n <= 6 ? match_exhaustive(cost) : match_hungarian(cost);
            for (int r = 0; r < n; ++r) {
                const std::size_t f = a.flat_index(d, r);
                const double e = cost[static_cast<std::size_t>(r)][static_cast<std::size_t>(assignment[static_cast<std::size_t>(r)])];
                errors[f] = e;
                matched[f] = b.nodes[b.flat_index(d, assignment[static_cast<std::size_t>(r)])].id;
                total += e;
                ++count;
                within += e < threshold;
            }
        }
    }
    report.mean_error = count ? total / static_cast<double>(count) : 0.0;
    report.match_rate = count ? static_cast<double>(within) / static_cast<double>(count) : 0.0;
    return report;
}

}  // namespace expgraph
