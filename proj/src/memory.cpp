#include "esceme/memory.hpp"

#include "esceme/errors.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

namespace esceme::memory {

using nlohmann::json;

inline constexpr int kSnapshotVersion = 1;

Pooling pooling_from_string(const std::string& s) {
    if (s == "max") return Pooling::Max;
    if (s == "mean") return Pooling::Mean;
    throw ConfigError("pooling must be 'max' or 'mean', got '" + s + "'");
}

std::string to_string(Pooling p) { return p == Pooling::Max ? "max" : "mean"; }

std::vector<double> pool(std::span<const std::vector<double>> features, Pooling mode) {
    if (features.empty()) throw ConfigError("pooling over an empty feature set");
    std::vector<double> out = features.front();
    for (std::size_t i = 1; i < features.size(); ++i) {
        if (features[i].size() != out.size()) throw ConfigError("pooling over features of different dimension");
        for (std::size_t j = 0; j < out.size(); ++j)
            out[j] = mode == Pooling::Max ? std::max(out[j], features[i][j]) : out[j] + features[i][j];
    }
    if (mode == Pooling::Mean)
        for (auto& v : out) v /= static_cast<double>(features.size());
    return out;
}

EpisodicMemory::EpisodicMemory(int dim, Pooling pooling) : dim_(dim), pooling_(pooling) {
    if (dim < 1) throw ConfigError("memory dimension must be positive");
}

bool EpisodicMemory::update(const std::string& scene_id, const world::Observation& ob) {
    auto& g = scenes_[scene_id];
    if (g.nodes.contains(ob.viewpoint)) return false;
    std::vector<std::vector<double>> feats;
    for (const auto& c : ob.candidates)
        if (c.navigable) feats.push_back(c.feature);
    auto m = pool(feats, pooling_);
    if (static_cast<int>(m.size()) != dim_) throw ConfigError("observation feature dimension does not match memory");
    g.nodes.emplace(ob.viewpoint, std::move(m));
    for (const auto& c : ob.candidates)
        if (c.navigable && c.neighbor != ob.viewpoint && g.nodes.contains(c.neighbor))
            g.edges.insert({std::min(ob.viewpoint, c.neighbor), std::max(ob.viewpoint, c.neighbor)});
    return true;
}

std::vector<std::vector<double>> EpisodicMemory::retrieve(const std::string& scene_id,
                                                          std::span<const ViewpointId> candidates) const {
    std::vector<std::vector<double>> out(candidates.size(), std::vector<double>(static_cast<std::size_t>(dim_), 0.0));
    const auto it = scenes_.find(scene_id);
    if (it == scenes_.end()) return out;
    for (std::size_t k = 0; k < candidates.size(); ++k) {
        const auto node = it->second.nodes.find(candidates[k]);
        if (node != it->second.nodes.end()) out[k] = node->second;
    }
    return out;
}

void EpisodicMemory::reset() { scenes_.clear(); }

void EpisodicMemory::reset(const std::string& scene_id) { scenes_.erase(scene_id); }

bool EpisodicMemory::contains(const std::string& scene_id, ViewpointId v) const {
    const auto* g = graph(scene_id);
    return g && g->nodes.contains(v);
}

GraphSize EpisodicMemory::size(const std::string& scene_id) const {
    const auto* g = graph(scene_id);
    return g ? GraphSize{g->nodes.size(), g->edges.size()} : GraphSize{};
}

const SceneGraph* EpisodicMemory::graph(const std::string& scene_id) const {
    const auto it = scenes_.find(scene_id);
    return it == scenes_.end() ? nullptr : &it->second;
}

void EpisodicMemory::set_graph(const std::string& scene_id, SceneGraph graph) {
    for (const auto& [u, v] : graph.edges)
        if (u >= v || !graph.nodes.contains(u) || !graph.nodes.contains(v))
            throw ConfigError("memory edge references a missing node");
    if (graph.nodes.empty())
        scenes_.erase(scene_id);
    else
        scenes_[scene_id] = std::move(graph);
}

std::string EpisodicMemory::snapshot() const {
    json scenes = json::array();
    for (const auto& [id, g] : scenes_) {
        json nodes = json::array();
        for (const auto& [v, m] : g.nodes) nodes.push_back({{"viewpoint", v}, {"feature", m}});
        json edges = json::array();
        for (const auto& [u, v] : g.edges) edges.push_back({u, v});
        scenes.push_back({{"id", id}, {"nodes", nodes}, {"edges", edges}});
    }
    return json{{"version", kSnapshotVersion}, {"dim", dim_}, {"pooling", to_string(pooling_)}, {"scenes", scenes}}.dump();
}

EpisodicMemory EpisodicMemory::restore(const std::string& blob) {
    try {
        const json doc = json::parse(blob);
        if (doc.at("version").get<int>() != kSnapshotVersion) throw ConfigError("unsupported memory snapshot version");
        EpisodicMemory mem(doc.at("dim").get<int>(), pooling_from_string(doc.at("pooling").get<std::string>()));
        for (const auto& s : doc.at("scenes")) {
            SceneGraph g;
            for (const auto& n : s.at("nodes")) {
                auto m = n.at("feature").get<std::vector<double>>();
                if (static_cast<int>(m.size()) != mem.dim_) throw ConfigError("memory snapshot feature has wrong dimension");
                if (!std::all_of(m.begin(), m.end(), [](double x) { return std::isfinite(x); }))
                    throw ConfigError("memory snapshot feature is not finite");
                g.nodes.emplace(n.at("viewpoint").get<int>(), std::move(m));
            }
            for (const auto& e : s.at("edges")) {
                const int u = e.at(0).get<int>();
                const int v = e.at(1).get<int>();
                if (u >= v || !g.nodes.contains(u) || !g.nodes.contains(v))
                    throw ConfigError("memory snapshot edge references a missing node");
                g.edges.insert({u, v});
            }
            mem.scenes_.emplace(s.at("id").get<std::string>(), std::move(g));
        }
        return mem;
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("malformed memory snapshot: ") + ex.what());
    }
}

}  // namespace esceme::memory
