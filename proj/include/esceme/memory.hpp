#pragma once

#include "esceme/world.hpp"

#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace esceme::memory {

enum class Pooling { Max, Mean };

Pooling pooling_from_string(const std::string& s);
std::string to_string(Pooling p);

// Element-wise max or mean over a non-empty set of equal-length vectors.
std::vector<double> pool(std::span<const std::vector<double>> features, Pooling mode);

using world::ViewpointId;
using Edge = std::pair<ViewpointId, ViewpointId>;  // first < second

struct SceneGraph {
    std::map<ViewpointId, std::vector<double>> nodes;
    std::set<Edge> edges;

    bool operator==(const SceneGraph&) const = default;
};

struct GraphSize {
    std::size_t nodes = 0;
    std::size_t edges = 0;
    bool operator==(const GraphSize&) const = default;
};

// Per-scene memory graphs. A viewpoint's feature is fixed on first visit:
// the pool of the navigable candidate features of that observation. Edges
// (all of weight 1) join the new node to already-stored candidates.
class EpisodicMemory {
public:
    explicit EpisodicMemory(int dim, Pooling pooling = Pooling::Max);

    int dim() const { return dim_; }
    Pooling pooling() const { return pooling_; }

    // Returns true if the store changed; revisits are no-ops.
    bool update(const std::string& scene_id, const world::Observation& ob);

    // m_V for stored candidates, zero vectors otherwise, in input order.
    std::vector<std::vector<double>> retrieve(const std::string& scene_id,
                                              std::span<const ViewpointId> candidates) const;

    void reset();
    void reset(const std::string& scene_id);

    bool contains(const std::string& scene_id, ViewpointId v) const;
    GraphSize size(const std::string& scene_id) const;
    const SceneGraph* graph(const std::string& scene_id) const;
    const std::map<std::string, SceneGraph>& scenes() const { return scenes_; }
    // Replaces one scene's store wholesale (an empty graph erases it).
    void set_graph(const std::string& scene_id, SceneGraph graph);

    // Versioned JSON document: {"version", "dim", "pooling", "scenes": [{"id",
    // "nodes": [{"viewpoint", "feature"}], "edges": [[u, v]]}]}.
    std::string snapshot() const;
    // Throws ConfigError on malformed input.
    static EpisodicMemory restore(const std::string& blob);

    bool operator==(const EpisodicMemory&) const = default;

private:
    int dim_;
    Pooling pooling_;
    std::map<std::string, SceneGraph> scenes_;
};

}  // namespace esceme::memory
