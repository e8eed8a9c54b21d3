#include "../support/fixtures.hpp"

#include "esceme/dataset.hpp"
#include "esceme/errors.hpp"
#include "esceme/rng.hpp"
#include "esceme/world.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

using namespace esceme;
using namespace esceme::world;

namespace {

// Every simple path from u to goal.
void enumerate_paths(const Scene& s, ViewpointId u, ViewpointId goal, std::vector<ViewpointId>& stack,
                     std::vector<std::vector<ViewpointId>>& out) {
    if (u == goal) {
        out.push_back(stack);
        return;
    }
    for (const auto& nb : s.node(u).neighbors) {
        if (std::find(stack.begin(), stack.end(), nb.id) != stack.end()) continue;
        stack.push_back(nb.id);
        enumerate_paths(s, nb.id, goal, stack, out);
        stack.pop_back();
    }
}

std::vector<ViewpointId> brute_shortest(const Scene& s, ViewpointId a, ViewpointId b) {
    std::vector<std::vector<ViewpointId>> all;
    std::vector<ViewpointId> stack{a};
    enumerate_paths(s, a, b, stack, all);
    double best = 1e300;
    for (const auto& p : all) best = std::min(best, path_length(s, p));
    std::vector<ViewpointId> pick;
    for (const auto& p : all)
        if (path_length(s, p) <= best + 1e-9 && (pick.empty() || p < pick)) pick = p;
    return pick;
}

}  // namespace

TEST_CASE("generated scenes satisfy the scene invariants") {
    WorldConfig cfg;
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        const int n = 4 + static_cast<int>(seed % 20);
        const double deg = 2.0 + static_cast<double>(seed % 3);
        const auto s = generate_scene(seed, n, std::min(deg, n - 1.0), cfg);
        const auto bad = s.check_invariants(cfg.max_degree, cfg.landmark_vocab);
        INFO("seed " << seed << ": " << bad.value_or(""));
        CHECK_FALSE(bad.has_value());
        CHECK(s.size() == static_cast<std::size_t>(n));
    }
}

TEST_CASE("scene generation is deterministic") {
    const auto a = generate_scene(7, 4, 2.0);
    const auto b = generate_scene(7, 4, 2.0);
    REQUIRE(a.size() == 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.nodes[i].position.x == b.nodes[i].position.x);
        CHECK(a.nodes[i].position.y == b.nodes[i].position.y);
        CHECK(a.nodes[i].landmark == b.nodes[i].landmark);
        REQUIRE(a.nodes[i].neighbors.size() == b.nodes[i].neighbors.size());
        for (std::size_t k = 0; k < a.nodes[i].neighbors.size(); ++k) {
            CHECK(a.nodes[i].neighbors[k].id == b.nodes[i].neighbors[k].id);
            CHECK(a.nodes[i].neighbors[k].length == b.nodes[i].neighbors[k].length);
        }
    }
}

TEST_CASE("different seeds give different landmark assignments") {
    int differ = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const auto a = generate_scene(seed * 2 + 7, 4, 2.0);
        const auto b = generate_scene(seed * 2 + 8, 4, 2.0);
        bool same = true;
        for (std::size_t i = 0; i < 4; ++i) same = same && a.nodes[i].landmark == b.nodes[i].landmark;
        differ += same ? 0 : 1;
    }
    CHECK(differ >= 95);
}

TEST_CASE("three nodes with degree two force a triangle") {
    const auto s = generate_scene(1, 3, 2.0);
    CHECK(s.edge_count() == 3);
    for (const auto& n : s.nodes) CHECK(n.neighbors.size() == 2);
}

TEST_CASE("impossible generation parameters are rejected") {
    CHECK_THROWS_AS(generate_scene(1, 2, 2.0), ConfigError);
    CHECK_THROWS_AS(generate_scene(1, 6, 1.5), ConfigError);
    CHECK_THROWS_AS(generate_scene(1, 6, 6.0), ConfigError);
}

TEST_CASE("observation lists one navigable candidate per neighbour") {
    const auto w = testing::walkthrough();
    const ObservationModel model(WorldConfig{});
    const auto ob = model.observe(w.scene, 0, 0.0, 11);
    REQUIRE(ob.candidates.size() == 4);
    std::set<ViewpointId> seen;
    for (const auto& c : ob.candidates) {
        CHECK(c.navigable);
        CHECK(w.scene.adjacent(0, c.neighbor));
        seen.insert(c.neighbor);
        CHECK(c.feature.size() == 32);
    }
    CHECK(seen == std::set<ViewpointId>{1, 5, 6, 9});
    CHECK_THROWS(model.observe(w.scene, 42, 0.0, 1));
}

TEST_CASE("observations are deterministic and the perturbation is bounded") {
    WorldConfig cfg;
    const ObservationModel model(cfg);
    const auto s = generate_scene(3, 16, 4.0, cfg);
    const auto a = model.observe(s, 2, 0.5, 99);
    const auto b = model.observe(s, 2, 0.5, 99);
    for (std::size_t k = 0; k < a.candidates.size(); ++k) CHECK(a.candidates[k].feature == b.candidates[k].feature);

    Rng rng(5);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
        const auto v = static_cast<ViewpointId>(rng.below(s.size()));
        const auto ob = model.observe(s, v, rng.uniform(-3.0, 3.0), rng.next_u64());
        for (const auto& c : ob.candidates) {
            const auto base = model.base_feature(s.node(c.neighbor).landmark, c.theta, c.phi);
            for (std::size_t j = 0; j < base.size(); ++j) worst = std::max(worst, std::abs(c.feature[j] - base[j]));
        }
    }
    CHECK(worst <= cfg.sigma_obs);
    CHECK(worst > 0.0);
}

TEST_CASE("relative candidate headings follow the agent heading") {
    const auto w = testing::walkthrough();
    const ObservationModel model(WorldConfig{});
    const auto ob = model.observe(w.scene, 0, 0.0, 1);
    for (const auto& c : ob.candidates) {
        if (c.neighbor == 1) CHECK(c.theta == doctest::Approx(0.0));
        if (c.neighbor == 6) CHECK(c.theta == doctest::Approx(std::numbers::pi / 2));
    }
}

TEST_CASE("shortest path trivial and tie cases") {
    const auto w = testing::walkthrough();
    CHECK(shortest_path(w.scene, 3, 3) == std::vector<ViewpointId>{3});
    CHECK(path_length(w.scene, std::vector<ViewpointId>{3}) == 0.0);

    // Triangle with |AB| = |BC| = 1 and |AC| = 2 (degenerate, collinear):
    // both routes have length 2 and the smaller id sequence wins.
    const auto tri = testing::make_scene("tri", {{0, 0}, {1, 0}, {2, 0}}, {0, 0, 0}, {{0, 1}, {1, 2}, {0, 2}});
    CHECK(tri.edge_length(0, 2) == doctest::Approx(2.0));
    CHECK(shortest_path(tri, 0, 2) == brute_shortest(tri, 0, 2));
    CHECK(shortest_path(tri, 0, 2) == std::vector<ViewpointId>{0, 1, 2});
}

TEST_CASE("shortest path agrees with exhaustive enumeration on small graphs") {
    WorldConfig cfg;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const int n = 4 + static_cast<int>(seed % 5);
        const auto s = generate_scene(seed, n, 2.5, cfg);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b) {
                const auto fast = shortest_path(s, a, b);
                const auto slow = brute_shortest(s, a, b);
                CHECK(path_length(s, fast) == doctest::Approx(path_length(s, slow)).epsilon(1e-12));
                CHECK(fast == slow);
                CHECK(geodesic_distances(s, a)[static_cast<std::size_t>(b)] ==
                      doctest::Approx(path_length(s, slow)).epsilon(1e-12));
            }
    }
}

TEST_CASE("instruction layout interleaves landmarks and turns") {
    const auto w = testing::walkthrough();
    const Vocabulary vocab{6};
    const std::vector<ViewpointId> route{0, 1, 2};
    const auto ins = synthesize_instruction(w.scene, route, 3, 6, 8);
    REQUIRE(ins.size() == 8);
    CHECK(ins[0] == 0);
    CHECK(vocab.is_turn(ins[1]));
    CHECK(ins[2] == 1);
    CHECK(vocab.is_turn(ins[3]));
    CHECK(ins[4] == 2);
    for (std::size_t i = 5; i < ins.size(); ++i) CHECK(ins[i] == vocab.pad());
    CHECK(ins == synthesize_instruction(w.scene, route, 3, 6, 8));
    CHECK_THROWS(synthesize_instruction(w.scene, std::vector<ViewpointId>{0}, 3, 6, 8));
}

TEST_CASE("straight routes produce straight turns") {
    const auto w = testing::walkthrough();
    const Vocabulary vocab{6};
    const std::vector<ViewpointId> route{0, 1, 2, 3, 4};
    // Find an instruction seed whose start heading already points along +x.
    std::uint64_t seed = 0;
    while (std::abs(wrap_angle(start_heading_from_seed(seed))) > std::numbers::pi / 8) ++seed;
    const auto ins = synthesize_instruction(w.scene, route, seed, 6, 12);
    for (int i = 1; i < 9; i += 2) CHECK(ins[static_cast<std::size_t>(i)] == vocab.straight());
    // Turns after the first never depend on the start heading.
    const auto other = synthesize_instruction(w.scene, route, seed + 1, 6, 12);
    for (int i = 3; i < 9; i += 2) CHECK(other[static_cast<std::size_t>(i)] == vocab.straight());
}

TEST_CASE("routes with different landmark sequences get different instructions") {
    WorldConfig cfg;
    cfg.landmark_vocab = 4;
    const auto s = generate_scene(12, 6, 3.0, cfg);
    std::vector<std::vector<ViewpointId>> routes;
    for (int a = 0; a < 6; ++a)
        for (const auto& b : s.node(a).neighbors)
            for (const auto& c : s.node(b.id).neighbors)
                if (c.id != a) routes.push_back({a, b.id, c.id});
    REQUIRE(routes.size() > 10);
    for (std::size_t i = 0; i < routes.size(); ++i)
        for (std::size_t j = i + 1; j < routes.size(); ++j) {
            std::vector<int> li, lj;
            for (auto v : routes[i]) li.push_back(s.node(v).landmark);
            for (auto v : routes[j]) lj.push_back(s.node(v).landmark);
            if (li == lj) continue;
            CHECK(synthesize_instruction(s, routes[i], 5, 4, 8) != synthesize_instruction(s, routes[j], 5, 4, 8));
        }
}

TEST_CASE("step moves to the chosen neighbour or terminates") {
    const auto w = testing::walkthrough();
    const ObservationModel model(WorldConfig{});
    const auto ob = model.observe(w.scene, 0, 0.0, 1);
    const auto stop = step(w.scene, ob, kStop);
    CHECK(stop.terminal);
    CHECK(stop.viewpoint == 0);
    const auto moved = step(w.scene, ob, 0);
    CHECK_FALSE(moved.terminal);
    CHECK(moved.viewpoint == ob.candidates[0].neighbor);
    CHECK_THROWS(step(w.scene, ob, 4));
    CHECK_THROWS(step(w.scene, ob, -5));
}

TEST_CASE("datasets are deterministic and survive a JSON round trip") {
    const auto cfg = testing::tiny_world(8);
    const auto a = generate_dataset(cfg, 4, 3, 5);
    const auto b = generate_dataset(cfg, 4, 3, 5);
    CHECK(dataset_to_json(a) == dataset_to_json(b));
    REQUIRE(a.episodes.size() == 15);
    for (const auto& ep : a.episodes) {
        const auto& s = a.scene(ep.scene_id);
        CHECK_NOTHROW(validate_route(s, ep.route));
        CHECK(ep.route.front() != ep.route.back());
        CHECK(ep.goal == ep.route.back());
        CHECK(ep.route == shortest_path(s, ep.route.front(), ep.goal));
        CHECK(static_cast<int>(ep.instruction.size()) == cfg.max_instruction_len);
    }
    const auto back = dataset_from_json(dataset_to_json(a));
    CHECK(dataset_to_json(back) == dataset_to_json(a));
    CHECK_THROWS_AS(dataset_from_json("{\"version\": 1}"), ConfigError);
    CHECK_THROWS_AS(dataset_from_json("not json"), ConfigError);
}
