#pragma once

#include "esceme/dataset.hpp"
#include "esceme/memory.hpp"
#include "esceme/world.hpp"

#include <algorithm>
#include <string>
#include <utility>
#include <vector>

namespace esceme::testing {

// Scene with the given geometry; lengths come from positions.
inline world::Scene make_scene(const std::string& id, const std::vector<world::Vec2>& positions,
                               const std::vector<int>& landmarks, const std::vector<std::pair<int, int>>& edges) {
    world::Scene s;
    s.id = id;
    s.seed = 0;
    s.nodes.resize(positions.size());
    for (std::size_t i = 0; i < positions.size(); ++i) {
        s.nodes[i].position = positions[i];
        s.nodes[i].landmark = landmarks[i];
    }
    for (auto [u, v] : edges) {
        const double len = world::distance(positions[static_cast<std::size_t>(u)], positions[static_cast<std::size_t>(v)]);
        s.nodes[static_cast<std::size_t>(u)].neighbors.push_back({v, len});
        s.nodes[static_cast<std::size_t>(v)].neighbors.push_back({u, len});
    }
    for (auto& n : s.nodes)
        std::sort(n.neighbors.begin(), n.neighbors.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return s;
}

// The two scripted instructions of the memory walkthrough.
//
//        a(6)     d(7)---f(8)
//         |        |      |
//  b(5)--V1(0)----V2(1)--V3(2)----V4(3)----V5(4)
//         |
//        c(9)
//
// Episode 1 walks V1..V5; episode 2 walks d -> f -> V3, ending on a node that
// is already stored.
struct Walkthrough {
    world::Scene scene;
    std::vector<world::ViewpointId> first;
    std::vector<world::ViewpointId> second;
};

inline Walkthrough walkthrough() {
    const std::vector<world::Vec2> pos{{0, 0}, {3, 0}, {6, 0}, {9, 0}, {12, 0}, {-3, 0}, {0, 3}, {3, 3}, {6, 3}, {0, -3}};
    const std::vector<int> lm{0, 1, 2, 3, 4, 5, 0, 1, 2, 3};
    const std::vector<std::pair<int, int>> edges{{0, 1}, {1, 2}, {2, 3}, {3, 4}, {0, 5}, {0, 6},
                                                 {0, 9}, {1, 7}, {7, 8}, {8, 2}};
    return {make_scene("walkthrough", pos, lm, edges), {0, 1, 2, 3, 4}, {7, 8, 2}};
}

inline std::set<memory::Edge> edge_set(std::initializer_list<std::pair<int, int>> es) {
    std::set<memory::Edge> out;
    for (auto [u, v] : es) out.insert({std::min(u, v), std::max(u, v)});
    return out;
}

// Small world for fast agent and training tests.
inline world::WorldConfig tiny_world(int dim = 8) {
    world::WorldConfig c;
    c.n_nodes = 8;
    c.mean_degree = 3.0;
    c.max_degree = 5;
    c.landmark_vocab = 6;
    c.feature_dim = dim;
    c.min_hops = 2;
    c.max_hops = 3;
    c.max_instruction_len = 8;
    return c;
}

}  // namespace esceme::testing
