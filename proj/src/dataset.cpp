#include "esceme/dataset.hpp"

#include "esceme/errors.hpp"
#include "esceme/rng.hpp"

#include <fstream>
#include <json.hpp>
#include <sstream>

namespace esceme::world {

using nlohmann::json;

const Scene& Dataset::scene(const std::string& id) const {
    if (index_.size() == scenes.size()) {
        const auto it = index_.find(id);
        if (it != index_.end()) return scenes[it->second];
    } else {
        for (const auto& s : scenes)
            if (s.id == id) return s;
    }
    throw ConfigError("unknown scene id " + id);
}

void Dataset::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < scenes.size(); ++i) index_[scenes[i].id] = i;
}

namespace {

std::vector<Episode> sample_episodes(const Scene& scene, const WorldConfig& config, std::uint64_t seed, int count) {
    Rng rng(seed);
    std::vector<Episode> out;
    const auto n = static_cast<std::uint64_t>(scene.size());
    int attempts = 0;
    while (static_cast<int>(out.size()) < count) {
        if (++attempts > 10000 * count) throw ConfigError("cannot sample routes with the requested hop range in " + scene.id);
        const auto start = static_cast<ViewpointId>(rng.below(n));
        const auto goal = static_cast<ViewpointId>(rng.below(n));
        if (start == goal) continue;
        auto route = shortest_path(scene, start, goal);
        const int hops = static_cast<int>(route.size()) - 1;
        // Relax the lower bound late so that tiny scenes still produce routes.
        const int min_hops = attempts > 1000 * count ? 1 : config.min_hops;
        if (hops < min_hops || hops > config.max_hops) continue;
        if (2 * hops + 1 > config.max_instruction_len) continue;
        Episode e;
        e.scene_id = scene.id;
        e.seed = derive_seed({seed, static_cast<std::uint64_t>(out.size())});
        e.start_heading = start_heading_from_seed(e.seed);
        e.instruction = synthesize_instruction(scene, route, e.seed, config.landmark_vocab, config.max_instruction_len);
        e.goal = goal;
        e.route = std::move(route);
        out.push_back(std::move(e));
    }
    return out;
}

json scene_to_json(const Scene& s) {
    json nodes = json::array();
    for (const auto& n : s.nodes) {
        json nb = json::array();
        for (const auto& e : n.neighbors) nb.push_back(e.id);
        nodes.push_back({{"x", n.position.x}, {"y", n.position.y}, {"landmark", n.landmark}, {"neighbors", nb}});
    }
    return {{"id", s.id}, {"seed", s.seed}, {"nodes", nodes}};
}

Scene scene_from_json(const json& j) {
    Scene s;
    s.id = j.at("id").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& n : j.at("nodes")) {
        SceneNode node;
        node.position = {n.at("x").get<double>(), n.at("y").get<double>()};
        node.landmark = n.at("landmark").get<int>();
        for (const auto& id : n.at("neighbors")) node.neighbors.push_back({id.get<int>(), 0.0});
        s.nodes.push_back(std::move(node));
    }
    for (auto& node : s.nodes)
        for (auto& e : node.neighbors) {
            if (!s.contains(e.id)) throw ConfigError("scene " + s.id + " references unknown neighbor");
            e.length = distance(node.position, s.nodes[static_cast<std::size_t>(e.id)].position);
        }
    return s;
}

}  // namespace

Dataset generate_dataset(const WorldConfig& config, std::uint64_t seed, int n_scenes, int episodes_per_scene) {
    if (n_scenes < 1 || episodes_per_scene < 1) throw ConfigError("dataset needs at least one scene and one episode");
    Dataset data;
    data.config = config;
    data.seed = seed;
    std::vector<std::vector<Episode>> per_scene;
    for (int s = 0; s < n_scenes; ++s) {
        const std::uint64_t scene_seed = derive_seed({seed, 0x7363656e65ULL, static_cast<std::uint64_t>(s)});
        data.scenes.push_back(generate_scene(scene_seed, config.n_nodes, config.mean_degree, config));
        per_scene.push_back(sample_episodes(data.scenes.back(), config, derive_seed({scene_seed, 0x65706973ULL}), episodes_per_scene));
    }
    for (int e = 0; e < episodes_per_scene; ++e)
        for (int s = 0; s < n_scenes; ++s) {
            auto ep = per_scene[static_cast<std::size_t>(s)][static_cast<std::size_t>(e)];
            ep.id = static_cast<int>(data.episodes.size());
            data.episodes.push_back(std::move(ep));
        }
    data.reindex();
    return data;
}

std::string dataset_to_json(const Dataset& data) {
    const auto& c = data.config;
    json world = {{"n_nodes", c.n_nodes},         {"mean_degree", c.mean_degree}, {"max_degree", c.max_degree},
                  {"landmark_vocab", c.landmark_vocab}, {"feature_dim", c.feature_dim}, {"sigma_obs", c.sigma_obs},
                  {"extent", c.extent},           {"feature_seed", c.feature_seed}, {"min_hops", c.min_hops},
                  {"max_hops", c.max_hops},       {"max_instruction_len", c.max_instruction_len}};
    json scenes = json::array();
    for (const auto& s : data.scenes) scenes.push_back(scene_to_json(s));
    json episodes = json::array();
    for (const auto& e : data.episodes)
        episodes.push_back({{"id", e.id},
                            {"scene_id", e.scene_id},
                            {"instruction", e.instruction},
                            {"route", e.route},
                            {"start_heading", e.start_heading},
                            {"goal", e.goal},
                            {"seed", e.seed}});
    json doc = {{"version", kDatasetVersion}, {"seed", data.seed}, {"world", world}, {"scenes", scenes}, {"episodes", episodes}};
    return doc.dump();
}

Dataset dataset_from_json(const std::string& text) {
    try {
        const json doc = json::parse(text);
        if (doc.at("version").get<int>() != kDatasetVersion) throw ConfigError("unsupported dataset version");
        Dataset data;
        data.seed = doc.at("seed").get<std::uint64_t>();
        const auto& w = doc.at("world");
        auto& c = data.config;
        c.n_nodes = w.at("n_nodes").get<int>();
        c.mean_degree = w.at("mean_degree").get<double>();
        c.max_degree = w.at("max_degree").get<int>();
        c.landmark_vocab = w.at("landmark_vocab").get<int>();
        c.feature_dim = w.at("feature_dim").get<int>();
        c.sigma_obs = w.at("sigma_obs").get<double>();
        c.extent = w.at("extent").get<double>();
        c.feature_seed = w.at("feature_seed").get<std::uint64_t>();
        c.min_hops = w.at("min_hops").get<int>();
        c.max_hops = w.at("max_hops").get<int>();
        c.max_instruction_len = w.at("max_instruction_len").get<int>();
        for (const auto& s : doc.at("scenes")) data.scenes.push_back(scene_from_json(s));
        data.reindex();
        for (const auto& j : doc.at("episodes")) {
            Episode e;
            e.id = j.at("id").get<int>();
            e.scene_id = j.at("scene_id").get<std::string>();
            e.instruction = j.at("instruction").get<std::vector<int>>();
            e.route = j.at("route").get<std::vector<int>>();
            e.start_heading = j.at("start_heading").get<double>();
            e.goal = j.at("goal").get<int>();
            e.seed = j.at("seed").get<std::uint64_t>();
            const auto& scene = data.scene(e.scene_id);
            validate_route(scene, e.route);
            if (e.route.size() < 2 || e.goal != e.route.back()) throw ConfigError("episode goal must end its route");
            data.episodes.push_back(std::move(e));
        }
        return data;
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("malformed dataset: ") + ex.what());
    }
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << dataset_to_json(data) << '\n';
}

Dataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return dataset_from_json(buf.str());
}

}  // namespace esceme::world
