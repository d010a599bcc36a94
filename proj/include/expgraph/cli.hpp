#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "expgraph/em.hpp"
#include "expgraph/graph.hpp"

namespace expgraph {

// layers.json: learning hyperparameters plus N_{L,d} per layer, bottom-to-top.
// Filter counts come from the feature maps.
struct LayersConfig {
    LearnConfig learn;
    std::vector<std::string> layer_ids;
    std::vector<int> patterns_per_filter;
};

nlohmann::ordered_json layers_config_to_json(const LayersConfig& cfg);
LayersConfig layers_config_from_json(const nlohmann::json& doc);
LayersConfig load_layers_config(const std::filesystem::path& path);

// Exit codes: 0 success, 1 runtime error ({"error","context"} on err), 2 usage.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args);

}  // namespace expgraph
