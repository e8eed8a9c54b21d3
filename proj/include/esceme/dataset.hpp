#pragma once

#include "esceme/world.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

namespace esceme::world {

inline constexpr int kDatasetVersion = 1;

// Scenes plus episodes in their default (scene-interleaved) order.
struct Dataset {
    WorldConfig config;
    std::uint64_t seed = 0;
    std::vector<Scene> scenes;
    std::vector<Episode> episodes;

    const Scene& scene(const std::string& id) const;
    void reindex();

private:
    std::unordered_map<std::string, std::size_t> index_;
};

// Episodes are sampled per scene as shortest paths between random start/goal
// pairs with min_hops..max_hops moves, then interleaved round-robin across
// scenes so that episode order visits every scene early.
Dataset generate_dataset(const WorldConfig& config, std::uint64_t seed, int n_scenes, int episodes_per_scene);

std::string dataset_to_json(const Dataset& data);
Dataset dataset_from_json(const std::string& text);
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace esceme::world
