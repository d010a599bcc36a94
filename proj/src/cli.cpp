#include "expgraph/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "expgraph/aog.hpp"
#include "expgraph/dataset.hpp"
#include "expgraph/error.hpp"
#include "expgraph/fmap.hpp"
#include "expgraph/inference.hpp"
#include "expgraph/metrics.hpp"
#include "expgraph/parallel.hpp"
#include "expgraph/synth.hpp"

namespace expgraph {

namespace fs = std::filesystem;
using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
    json doc = json::parse(in, nullptr, false);
    if (doc.is_discarded()) fail(ErrorKind::SchemaError, path.string() + " is not valid JSON");
    return doc;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
    out << text;
}

std::string fmt(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
    return q + "\"";
}

const std::string kInferenceSuffix = ".inference.json";

// Inference files of a directory, sorted by image id.
std::vector<ImageInference> load_inference_dir(const fs::path& dir, const ExplanatoryGraph& g) {
    if (!fs::is_directory(dir)) fail(ErrorKind::IoError, dir.string() + " is not a directory");
    std::vector<std::pair<std::string, fs::path>> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        const std::string name = entry.path().filename().string();
        if (name.size() > kInferenceSuffix.size() &&
            name.compare(name.size() - kInferenceSuffix.size(), kInferenceSuffix.size(), kInferenceSuffix) == 0)
            files.emplace_back(name.substr(0, name.size() - kInferenceSuffix.size()), entry.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<ImageInference> out;
    for (const auto& [id, path] : files) out.push_back(load_inference(path, id, g));
    return out;
}

std::vector<std::string> graph_layer_ids(const ExplanatoryGraph& g) {
    std::vector<std::string> ids;
    for (const auto& l : g.layers) ids.push_back(l.spec.layer_id);
    return ids;
}

struct Common {
    std::uint64_t seed = 0;
    int threads = 1;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--seed", c.seed, "random seed");
    cmd->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
}

int gen_synthetic(const fs::path& spec_path, const fs::path& out, int n_images, const Common& c, bool seed_given,
                  std::ostream& log) {
    SynthSpec spec = spec_path.empty() ? reference_synth_spec(c.seed) : synth_spec_from_json(read_json(spec_path));
    if (seed_given) spec.seed = c.seed;
    spec.validate();
    if (n_images < 1) fail(ErrorKind::InvalidArgument, "--images must be >= 1");
    const ExplanatoryGraph planted = gen_planted_graph(spec);
    const SynthDataset data = sample_images(planted, n_images, spec, c.threads);
    fs::create_directories(out);
    write_synthetic(out, planted, data);
    save_graph(out / "planted_graph.json", planted);
    write_text(out / "synth_spec.json", synth_spec_to_json(spec).dump(1) + "\n");

    LayersConfig cfg;
    cfg.learn.M = spec.edges_per_node;
    for (const auto& l : spec.layers) {
        cfg.layer_ids.push_back(l.layer_id);
        cfg.patterns_per_filter.push_back(l.patterns_per_filter);
    }
    write_text(out / "layers.json", layers_config_to_json(cfg).dump(1) + "\n");
    log << "wrote " << n_images << " images to " << out.string() << "\n";
    return 0;
}

int learn(const fs::path& manifest_path, const fs::path& layers_path, const fs::path& out, fs::path log_path,
          const Common& c, bool seed_given, std::ostream& log) {
    LayersConfig cfg = load_layers_config(layers_path);
    if (seed_given) cfg.learn.seed = c.seed;
    cfg.learn.threads = c.threads;
    cfg.learn.validate();
    const Manifest manifest = load_manifest(manifest_path);
    const auto images = load_dataset(manifest, cfg.layer_ids, cfg.learn.beta, c.threads);
    if (images.empty()) fail(ErrorKind::EmptyDataset, manifest_path.string());

    std::vector<LayerSpec> specs;
    for (std::size_t l = 0; l < cfg.layer_ids.size(); ++l) {
        const int depth = images.front().layers[l].meta.depth;
        specs.push_back({cfg.layer_ids[l], depth, cfg.patterns_per_filter[l]});
    }
    const LearnResult result = learn_graph(images, specs, cfg.learn);
    save_graph(out, result.graph);
    if (log_path.empty()) log_path = fs::path(out).replace_extension(".learn_log.csv");
    write_text(log_path, learn_log_csv(result.log));
    log << "learned " << result.graph.node_count() << " nodes -> " << out.string() << "\n";
    return 0;
}

int infer(const fs::path& graph_path, const fs::path& manifest_path, const fs::path& out, const Common& c,
          std::ostream& log) {
    const ExplanatoryGraph g = load_graph(graph_path);
    const Manifest manifest = load_manifest(manifest_path);
    const auto images = load_dataset(manifest, graph_layer_ids(g), g.hyperparams.beta, c.threads);
    fs::create_directories(out);
    std::vector<std::string> text(images.size());
    parallel_for(images.size(), c.threads, [&](std::size_t k) {
        text[k] = inference_to_json(infer_image(g, images[k])).dump(1) + "\n";
    });
    for (std::size_t k = 0; k < images.size(); ++k)
        write_text(out / (images[k].image_id + kInferenceSuffix), text[k]);
    log << "inferred " << images.size() << " images -> " << out.string() << "\n";
    return 0;
}

int instability(const fs::path& graph_path, const fs::path& inference_dir, const fs::path& landmarks_path,
                const fs::path& out, const fs::path& patches_path, double ratio, std::ostream& log) {
    const ExplanatoryGraph g = load_graph(graph_path);
    const auto inferences = load_inference_dir(inference_dir, g);
    const LandmarkSet landmarks = load_landmarks(landmarks_path);

    std::string csv = "node_id,value,n_images\n";
    ojson patches = ojson::array();
    for (std::size_t l = 0; l < g.layers.size(); ++l) {
        for (std::size_t n = 0; n < g.layers[l].nodes.size(); ++n) {
            const NodeId id = g.layers[l].nodes[n].id;
            std::vector<Observation> obs;
            for (const auto& inf : inferences) {
                const NodeAssignment& a = inf.layers[l][n];
                obs.push_back({inf.image_id, a.p, a.score, a.detected});
            }
            std::string value = "nan";
            std::size_t used = 0;
            try {
                const InstabilityResult r = location_instability(obs, landmarks);
                value = fmt(r.value);
                used = r.images;
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::InsufficientSamples) throw;
            }
            csv += csv_field(to_string(id)) + "," + value + "," + std::to_string(used) + "\n";

            if (!patches_path.empty()) {
                ojson entry;
                entry["node_id"] = node_id_to_json(id);
                ojson top = ojson::array();
                try {
                    for (const RankedInference& r : select_top_inferences(obs, ratio)) {
                        ojson o;
                        o["image_id"] = r.image_id;
                        o["p"] = {r.p.u, r.p.v};
                        o["score"] = r.score;
                        top.push_back(std::move(o));
                    }
                } catch (const Error& e) {
                    if (e.kind() != ErrorKind::AllZeroScores) throw;
                }
                entry["images"] = std::move(top);
                patches.push_back(std::move(entry));
            }
        }
    }
    write_text(out, csv);
    if (!patches_path.empty()) write_text(patches_path, patches.dump(1) + "\n");
    log << "instability for " << g.node_count() << " nodes -> " << out.string() << "\n";
    return 0;
}

int heatmap(const fs::path& graph_path, const fs::path& inference_dir, const fs::path& out,
            const std::string& only_layer, const std::string& only_image, int size, std::ostream& log) {
    const ExplanatoryGraph g = load_graph(graph_path);
    const auto inferences = load_inference_dir(inference_dir, g);
    fs::create_directories(out);
    std::size_t written = 0;
    bool layer_found = only_layer.empty();
    for (const auto& inf : inferences) {
        if (!only_image.empty() && inf.image_id != only_image) continue;
        for (std::size_t l = 0; l < g.layers.size(); ++l) {
            const std::string& lid = g.layers[l].spec.layer_id;
            if (!only_layer.empty() && lid != only_layer) continue;
            layer_found = true;
            const Heatmap h = render_heatmap(inf.layers[l], g.layers[l], size);
            const std::string stem = inf.image_id + "_" + lid;
            write_text(out / (stem + ".pgm"), heatmap_pgm(h));
            write_text(out / (stem + ".csv"), heatmap_csv(h));
            ++written;
        }
    }
    if (!layer_found) fail(ErrorKind::InvalidArgument, "graph has no layer " + only_layer);
    log << "wrote " << written << " heat maps -> " << out.string() << "\n";
    return 0;
}

int aog_build(const fs::path& graph_path, const fs::path& inference_dir, const fs::path& annotations_path,
              const std::string& part, long k, const fs::path& out, std::ostream& log) {
    const ExplanatoryGraph g = load_graph(graph_path);
    const auto inferences = load_inference_dir(inference_dir, g);
    const auto annotations = load_annotations(annotations_path);
    const std::size_t kk = k > 0 ? static_cast<std::size_t>(k) : default_retrieval_count(g);
    const AogBuild built = build_aog(g, inferences, annotations, kk, part);
    for (const auto& w : built.warnings) log << "warning: " << w << "\n";
    save_aog(out, built.model);
    log << "aog with " << built.model.templates.size() << " templates, K = " << kk << " -> " << out.string() << "\n";
    return 0;
}

int aog_localize(const fs::path& aog_path, const fs::path& graph_path, const fs::path& inference_dir,
                 const fs::path& landmarks_path, const fs::path& out, std::ostream& log) {
    const AOGModel aog = load_aog(aog_path);
    const ExplanatoryGraph g = load_graph(graph_path);
    const auto inferences = load_inference_dir(inference_dir, g);
    LandmarkSet truth;
    if (!landmarks_path.empty()) truth = load_landmarks(landmarks_path);

    std::vector<Localization> found(inferences.size());
    std::vector<int> ok(inferences.size(), 0);
    parallel_for(inferences.size(), 1, [&](std::size_t k) {
        try {
            found[k] = localize_part(aog, inferences[k]);
            ok[k] = 1;
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::NoDetectedPatterns) throw;
        }
    });

    std::string csv = "image_id,part,u,v,template,score,norm_dist\n";
    double total = 0.0;
    std::size_t scored = 0;
    for (std::size_t k = 0; k < inferences.size(); ++k) {
        const std::string& id = inferences[k].image_id;
        if (!ok[k]) {
            log << "warning: no template pattern detected in " << id << "\n";
            continue;
        }
        std::string dist;
        auto img = truth.find(id);
        if (img != truth.end()) {
            auto part = img->second.find(aog.part);
            if (part != img->second.end()) {
                const double d = normalized_distance(found[k].position, part->second);
                dist = fmt(d);
                total += d;
                ++scored;
            }
        }
        csv += csv_field(id) + "," + csv_field(aog.part) + "," + fmt(found[k].position.u) + "," +
               fmt(found[k].position.v) + "," + std::to_string(found[k].template_index) + "," + fmt(found[k].score) +
               "," + dist + "\n";
    }
    write_text(out, csv);
    if (scored) log << "mean normalized distance " << total / static_cast<double>(scored) << " over " << scored << " images\n";
    return 0;
}

int validate_file(const fs::path& path, std::ostream& out) {
    const auto bytes = read_file_bytes(path);
    static constexpr char kMagic[] = "FMAP0001";
    if (bytes.size() >= 8 && std::equal(bytes.begin(), bytes.begin() + 8, kMagic)) {
        const FeatureMap fm = decode_fmap(bytes, path.string());
        validate(fm.meta);
        out << "ok fmap " << fm.image_id << " " << fm.meta.layer_id << " " << fm.meta.depth << "x" << fm.meta.height
            << "x" << fm.meta.width << "\n";
        return 0;
    }
    const ExplanatoryGraph g = deserialize_graph(std::string(bytes.begin(), bytes.end()));
    out << "ok graph " << g.layers.size() << " layers " << g.node_count() << " nodes\n";
    return 0;
}

void emit_error(std::ostream& err, const std::string& kind, const std::string& context) {
    ojson e;
    e["error"] = kind;
    e["context"] = context;
    err << e.dump() << "\n";
}

}  // namespace

ojson layers_config_to_json(const LayersConfig& cfg) {
    ojson hp;
    hp["tau"] = cfg.learn.tau;
    hp["M"] = cfg.learn.M;
    hp["T"] = cfg.learn.T;
    hp["beta"] = cfg.learn.beta;
    hp["eta"] = cfg.learn.eta;
    hp["mode"] = std::string(to_string(cfg.learn.mode));
    hp["candidate_pool"] = cfg.learn.candidate_pool;
    hp["sigma2_init"] = cfg.learn.sigma2_init;
    ojson layers = ojson::array();
    for (std::size_t l = 0; l < cfg.layer_ids.size(); ++l) {
        ojson o;
        o["layer_id"] = cfg.layer_ids[l];
        o["N"] = cfg.patterns_per_filter[l];
        layers.push_back(std::move(o));
    }
    ojson doc;
    doc["hyperparams"] = std::move(hp);
    doc["layers"] = std::move(layers);
    return doc;
}

LayersConfig layers_config_from_json(const json& doc) {
    LayersConfig cfg;
    try {
        if (!doc.is_object()) fail(ErrorKind::SchemaError, "layers config must be an object");
        for (const auto& [key, _] : doc.items())
            if (key != "hyperparams" && key != "layers") fail(ErrorKind::SchemaError, "unknown layers config field " + key);
        if (doc.contains("hyperparams")) {
            const json& hp = doc.at("hyperparams");
            for (const auto& [key, v] : hp.items()) {
                if (key == "tau") cfg.learn.tau = v.get<double>();
                else if (key == "M") cfg.learn.M = v.get<int>();
                else if (key == "T") cfg.learn.T = v.get<int>();
                else if (key == "beta") cfg.learn.beta = v.get<double>();
                else if (key == "eta") cfg.learn.eta = v.get<double>();
                else if (key == "mode") cfg.learn.mode = parse_mstep_mode(v.get<std::string>());
                else if (key == "candidate_pool") cfg.learn.candidate_pool = v.get<int>();
                else if (key == "sigma2_init") cfg.learn.sigma2_init = v.get<double>();
                else fail(ErrorKind::SchemaError, "unknown hyperparameter " + key);
            }
        }
        for (const json& l : doc.at("layers")) {
            cfg.layer_ids.push_back(l.at("layer_id").get<std::string>());
            cfg.patterns_per_filter.push_back(l.at("N").get<int>());
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::SchemaError, std::string("layers config: ") + e.what());
    }
    if (cfg.layer_ids.empty()) fail(ErrorKind::SchemaError, "layers config lists no layers");
    for (int n : cfg.patterns_per_filter)
        if (n < 1) fail(ErrorKind::SchemaError, "N must be >= 1");
    return cfg;
}

LayersConfig load_layers_config(const fs::path& path) { return layers_config_from_json(read_json(path)); }

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Explanatory graphs from CNN feature maps", "expgraph"};
    app.require_subcommand(1);
    Common common;

    std::string spec_path, out_path, manifest_path, layers_path, log_path, graph_path, inference_dir, landmarks_path,
        patches_path, layer_id, image_id, annotations_path, part = "part", aog_path, target;
    int n_images = 200, size = kDefaultHeatmapGrid;
    double ratio = 0.3;
    long k = 0;

    auto* gen = app.add_subcommand("gen-synthetic", "render a planted graph into feature maps");
    gen->add_option("--spec", spec_path, "synthetic spec JSON (default: reference spec)")->check(CLI::ExistingFile);
    gen->add_option("--images", n_images, "number of images");
    gen->add_option("--out", out_path, "output directory")->required();
    add_common(gen, common);

    auto* lrn = app.add_subcommand("learn", "learn an explanatory graph");
    lrn->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
    lrn->add_option("--layers", layers_path)->required()->check(CLI::ExistingFile);
    lrn->add_option("--out", out_path, "graph.json")->required();
    lrn->add_option("--log", log_path, "learn-log CSV (default: next to --out)");
    add_common(lrn, common);

    auto* inf = app.add_subcommand("infer", "infer pattern positions");
    inf->add_option("--graph", graph_path)->required()->check(CLI::ExistingFile);
    inf->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
    inf->add_option("--out", out_path, "output directory")->required();
    add_common(inf, common);

    auto* ins = app.add_subcommand("instability", "location instability per node");
    ins->add_option("--graph", graph_path)->required()->check(CLI::ExistingFile);
    ins->add_option("--inference", inference_dir)->required()->check(CLI::ExistingDirectory);
    ins->add_option("--landmarks", landmarks_path)->required()->check(CLI::ExistingFile);
    ins->add_option("--out", out_path, "instability.csv")->required();
    ins->add_option("--patches", patches_path, "patches.json with top inferences per node");
    ins->add_option("--ratio", ratio, "energy ratio for --patches")->check(CLI::Range(0.0, 1.0));
    add_common(ins, common);

    auto* hm = app.add_subcommand("heatmap", "render per-layer heat maps");
    hm->add_option("--graph", graph_path)->required()->check(CLI::ExistingFile);
    hm->add_option("--inference", inference_dir)->required()->check(CLI::ExistingDirectory);
    hm->add_option("--out", out_path, "output directory")->required();
    hm->add_option("--layer", layer_id);
    hm->add_option("--image", image_id);
    hm->add_option("--size", size)->check(CLI::PositiveNumber);
    add_common(hm, common);

    auto* ab = app.add_subcommand("aog-build", "build a part AOG from annotated images");
    ab->add_option("--graph", graph_path)->required()->check(CLI::ExistingFile);
    ab->add_option("--inference", inference_dir)->required()->check(CLI::ExistingDirectory);
    ab->add_option("--annotations", annotations_path)->required()->check(CLI::ExistingFile);
    ab->add_option("--part", part);
    ab->add_option("--k", k, "patterns per template (default 0.1 * sum N)");
    ab->add_option("--out", out_path, "aog.json")->required();
    add_common(ab, common);

    auto* al = app.add_subcommand("aog-localize", "localize a part in every inferred image");
    al->add_option("--aog", aog_path)->required()->check(CLI::ExistingFile);
    al->add_option("--graph", graph_path)->required()->check(CLI::ExistingFile);
    al->add_option("--inference", inference_dir)->required()->check(CLI::ExistingDirectory);
    al->add_option("--landmarks", landmarks_path, "ground truth for norm_dist")->check(CLI::ExistingFile);
    al->add_option("--out", out_path, "localization.csv")->required();
    add_common(al, common);

    auto* val = app.add_subcommand("validate", "check a graph.json or .fmap file");
    val->add_option("file", target)->required()->check(CLI::ExistingFile);

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? 0 : 2;
    }

    auto seed_given = [&](CLI::App* cmd) { return cmd->count("--seed") > 0; };
    try {
        if (*gen) return gen_synthetic(spec_path, out_path, n_images, common, seed_given(gen), out);
        if (*lrn) return learn(manifest_path, layers_path, out_path, log_path, common, seed_given(lrn), out);
        if (*inf) return infer(graph_path, manifest_path, out_path, common, out);
        if (*ins) return instability(graph_path, inference_dir, landmarks_path, out_path, patches_path, ratio, out);
        if (*hm) return heatmap(graph_path, inference_dir, out_path, layer_id, image_id, size, out);
        if (*ab) return aog_build(graph_path, inference_dir, annotations_path, part, k, out_path, out);
        if (*al) return aog_localize(aog_path, graph_path, inference_dir, landmarks_path, out_path, out);
        if (*val) return validate_file(target, out);
    } catch (const Error& e) {
        emit_error(err, std::string(to_string(e.kind())), e.context());
        return 1;
    } catch (const std::exception& e) {
        emit_error(err, "IoError", e.what());
        return 1;
    }
    return 2;
}

int run(const std::vector<std::string>& args) { return run(args, std::cout, std::cerr); }

}  // namespace expgraph
