#include "esceme/world.hpp"

#include "esceme/errors.hpp"
#include "esceme/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <queue>
#include <tuple>

namespace esceme::world {

double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

double heading_between(Vec2 a, Vec2 b) { return std::atan2(b.y - a.y, b.x - a.x); }

double wrap_angle(double a) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    a = std::fmod(a, two_pi);
    if (a <= -std::numbers::pi) a += two_pi;
    if (a > std::numbers::pi) a -= two_pi;
    return a;
}

const SceneNode& Scene::node(ViewpointId v) const {
    if (!contains(v)) throw ConfigError("unknown viewpoint " + std::to_string(v) + " in scene " + id);
    return nodes[static_cast<std::size_t>(v)];
}

bool Scene::adjacent(ViewpointId u, ViewpointId v) const {
    if (!contains(u) || !contains(v)) return false;
    const auto& nb = nodes[static_cast<std::size_t>(u)].neighbors;
    return std::any_of(nb.begin(), nb.end(), [v](const Neighbor& n) { return n.id == v; });
}

double Scene::edge_length(ViewpointId u, ViewpointId v) const {
    for (const auto& n : node(u).neighbors)
        if (n.id == v) return n.length;
    throw ConfigError("no edge " + std::to_string(u) + "-" + std::to_string(v) + " in scene " + id);
}

std::size_t Scene::edge_count() const {
    std::size_t twice = 0;
    for (const auto& n : nodes) twice += n.neighbors.size();
    return twice / 2;
}

std::optional<std::string> Scene::check_invariants(int max_degree, int landmark_vocab) const {
    if (nodes.empty()) return "empty scene";
    for (std::size_t u = 0; u < nodes.size(); ++u) {
        const auto& n = nodes[u];
        const auto deg = static_cast<int>(n.neighbors.size());
        if (deg < 2 || deg > max_degree) return "degree out of range at node " + std::to_string(u);
        if (n.landmark < 0 || n.landmark >= landmark_vocab) return "landmark out of range at node " + std::to_string(u);
        for (std::size_t i = 0; i < n.neighbors.size(); ++i) {
            const auto& e = n.neighbors[i];
            if (!contains(e.id) || e.id == static_cast<int>(u)) return "bad neighbor id at node " + std::to_string(u);
            if (i > 0 && n.neighbors[i - 1].id >= e.id) return "neighbors not strictly ascending at node " + std::to_string(u);
            if (!(e.length > 0.0)) return "non-positive edge length";
            if (std::abs(e.length - distance(n.position, nodes[static_cast<std::size_t>(e.id)].position)) > 1e-9)
                return "edge length differs from euclidean distance";
            if (!adjacent(e.id, static_cast<int>(u))) return "asymmetric edge";
            if (std::abs(edge_length(e.id, static_cast<int>(u)) - e.length) > 0.0) return "asymmetric edge length";
        }
    }
    std::vector<char> seen(nodes.size(), 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    std::size_t reached = 1;
    while (!stack.empty()) {
        const int u = stack.back();
        stack.pop_back();
        for (const auto& e : nodes[static_cast<std::size_t>(u)].neighbors) {
            if (!seen[static_cast<std::size_t>(e.id)]) {
                seen[static_cast<std::size_t>(e.id)] = 1;
                ++reached;
                stack.push_back(e.id);
            }
        }
    }
    if (reached != nodes.size()) return "scene graph is disconnected";
    return std::nullopt;
}

namespace {

struct Pair {
    double length;
    int u;
    int v;
};

class DisjointSets {
public:
    explicit DisjointSets(std::size_t n) : parent_(n) { std::iota(parent_.begin(), parent_.end(), 0); }
    int find(int x) {
        while (parent_[static_cast<std::size_t>(x)] != x) {
            parent_[static_cast<std::size_t>(x)] = parent_[static_cast<std::size_t>(parent_[static_cast<std::size_t>(x)])];
            x = parent_[static_cast<std::size_t>(x)];
        }
        return x;
    }
    bool unite(int a, int b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        parent_[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
        return true;
    }

private:
    std::vector<int> parent_;
};

std::optional<Scene> try_generate(std::uint64_t seed, int n, double mean_degree, const WorldConfig& config) {
    Rng rng(seed);
    const auto un = static_cast<std::size_t>(n);
    const double min_sep = 0.35 * config.extent / std::sqrt(static_cast<double>(n));

    Scene scene;
    scene.seed = seed;
    scene.nodes.resize(un);
    for (std::size_t i = 0; i < un; ++i) {
        Vec2 p;
        for (int attempt = 0; attempt < 1000; ++attempt) {
            p = {rng.uniform(0.0, config.extent), rng.uniform(0.0, config.extent)};
            bool ok = true;
            for (std::size_t j = 0; j < i && ok; ++j) ok = distance(p, scene.nodes[j].position) >= min_sep;
            if (ok) break;
        }
        scene.nodes[i].position = p;
    }
    for (auto& node : scene.nodes) node.landmark = static_cast<int>(rng.below(static_cast<std::uint64_t>(config.landmark_vocab)));

    std::vector<Pair> pairs;
    pairs.reserve(un * (un - 1) / 2);
    for (int u = 0; u < n; ++u)
        for (int v = u + 1; v < n; ++v)
            pairs.push_back({distance(scene.nodes[static_cast<std::size_t>(u)].position, scene.nodes[static_cast<std::size_t>(v)].position), u, v});
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        return std::tie(a.length, a.u, a.v) < std::tie(b.length, b.u, b.v);
    });

    std::vector<std::vector<char>> adj(un, std::vector<char>(un, 0));
    std::vector<int> degree(un, 0);
    std::size_t edges = 0;
    DisjointSets components(un);
    auto add_edge = [&](int u, int v) {
        adj[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)] = adj[static_cast<std::size_t>(v)][static_cast<std::size_t>(u)] = 1;
        ++degree[static_cast<std::size_t>(u)];
        ++degree[static_cast<std::size_t>(v)];
        ++edges;
        components.unite(u, v);
    };
    auto can_add = [&](int u, int v) {
        return !adj[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)] && degree[static_cast<std::size_t>(u)] < config.max_degree &&
               degree[static_cast<std::size_t>(v)] < config.max_degree;
    };

    // Two nearest neighbours of every node (minimum degree 2).
    for (int u = 0; u < n; ++u) {
        std::vector<std::pair<double, int>> by_dist;
        for (int v = 0; v < n; ++v)
            if (v != u)
                by_dist.emplace_back(distance(scene.nodes[static_cast<std::size_t>(u)].position, scene.nodes[static_cast<std::size_t>(v)].position), v);
        std::sort(by_dist.begin(), by_dist.end());
        for (const auto& [d, v] : by_dist) {
            if (degree[static_cast<std::size_t>(u)] >= 2) break;
            if (can_add(u, v)) add_edge(u, v);
        }
    }
    // Spanning-tree edges between components.
    for (const auto& p : pairs)
        if (components.find(p.u) != components.find(p.v) && can_add(p.u, p.v)) add_edge(p.u, p.v);
    // Densify with the shortest remaining pairs.
    const auto target = static_cast<std::size_t>(std::lround(mean_degree * n / 2.0));
    for (const auto& p : pairs) {
        if (edges >= target) break;
        if (can_add(p.u, p.v)) add_edge(p.u, p.v);
    }

    for (int u = 0; u < n; ++u) {
        auto& node = scene.nodes[static_cast<std::size_t>(u)];
        for (int v = 0; v < n; ++v)
            if (adj[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)])
                node.neighbors.push_back({v, distance(node.position, scene.nodes[static_cast<std::size_t>(v)].position)});
    }
    if (scene.check_invariants(config.max_degree, config.landmark_vocab)) return std::nullopt;
    return scene;
}

}  // namespace

Scene generate_scene(std::uint64_t seed, int n_nodes, double mean_degree, const WorldConfig& config) {
    if (n_nodes < 3) throw ConfigError("a scene needs at least 3 nodes for minimum degree 2");
    if (!(mean_degree >= 2.0) || !(mean_degree < n_nodes))
        throw ConfigError("mean_degree must satisfy 2 <= mean_degree < n_nodes");
    if (config.max_degree < 2 || mean_degree > config.max_degree)
        throw ConfigError("mean_degree exceeds max_degree");
    if (config.landmark_vocab < 1) throw ConfigError("landmark_vocab must be positive");
    for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
        const std::uint64_t s = attempt == 0 ? seed : derive_seed({seed, attempt});
        if (auto scene = try_generate(s, n_nodes, mean_degree, config)) {
            scene->seed = seed;
            scene->id = "scene-" + std::to_string(seed);
            return *std::move(scene);
        }
    }
    throw ConfigError("could not generate a connected scene with the requested degree bounds");
}

// ---------------------------------------------------------------------------

std::vector<double> orientation_encoding(double theta, double phi) {
    return {std::sin(theta), std::cos(theta), std::sin(phi), std::cos(phi)};
}

ObservationModel::ObservationModel(const WorldConfig& config)
    : feature_dim_(config.feature_dim),
      landmark_dim_(config.feature_dim / 2),
      landmark_vocab_(config.landmark_vocab),
      sigma_(config.sigma_obs) {
    if (feature_dim_ < 2) throw ConfigError("feature_dim must be at least 2");
    if (!(sigma_ >= 0.0)) throw ConfigError("sigma_obs must be non-negative");
    Rng rng(derive_seed({config.feature_seed, 0x6c616e646d61726bULL}));
    table_.resize(static_cast<std::size_t>(landmark_vocab_ * landmark_dim_));
    for (auto& v : table_) v = rng.uniform(-1.0, 1.0);
}

std::vector<double> ObservationModel::base_feature(int landmark, double theta, double phi) const {
    if (landmark < 0 || landmark >= landmark_vocab_) throw ConfigError("landmark out of range");
    std::vector<double> f(static_cast<std::size_t>(feature_dim_));
    const auto row = table_.begin() + static_cast<std::ptrdiff_t>(landmark * landmark_dim_);
    std::copy(row, row + landmark_dim_, f.begin());
    const auto orient = orientation_encoding(theta, phi);
    for (int i = landmark_dim_; i < feature_dim_; ++i) f[static_cast<std::size_t>(i)] = orient[static_cast<std::size_t>((i - landmark_dim_) % 4)];
    return f;
}

Observation ObservationModel::observe(const Scene& scene, ViewpointId viewpoint, double heading,
                                      std::uint64_t noise_seed) const {
    const auto& here = scene.node(viewpoint);
    Observation ob;
    ob.viewpoint = viewpoint;
    ob.heading = heading;
    ob.candidates.reserve(here.neighbors.size());
    for (const auto& nb : here.neighbors) {
        const auto& there = scene.node(nb.id);
        Candidate c;
        c.neighbor = nb.id;
        c.theta = wrap_angle(heading_between(here.position, there.position) - heading);
        c.phi = 0.0;
        c.feature = base_feature(there.landmark, c.theta, c.phi);
        Rng noise(derive_seed({scene.seed, noise_seed, static_cast<std::uint64_t>(viewpoint), static_cast<std::uint64_t>(nb.id)}));
        for (auto& v : c.feature) v += noise.uniform(-sigma_, sigma_);
        c.navigable = true;
        ob.candidates.push_back(std::move(c));
    }
    return ob;
}

// ---------------------------------------------------------------------------

std::vector<double> geodesic_distances(const Scene& scene, ViewpointId source) {
    scene.node(source);
    std::vector<double> dist(scene.size(), std::numeric_limits<double>::infinity());
    using Item = std::pair<double, int>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
    dist[static_cast<std::size_t>(source)] = 0.0;
    queue.emplace(0.0, source);
    while (!queue.empty()) {
        const auto [d, u] = queue.top();
        queue.pop();
        if (d > dist[static_cast<std::size_t>(u)]) continue;
        for (const auto& e : scene.nodes[static_cast<std::size_t>(u)].neighbors) {
            const double nd = d + e.length;
            if (nd < dist[static_cast<std::size_t>(e.id)]) {
                dist[static_cast<std::size_t>(e.id)] = nd;
                queue.emplace(nd, e.id);
            }
        }
    }
    return dist;
}

std::vector<ViewpointId> shortest_path(const Scene& scene, ViewpointId start, ViewpointId goal) {
    scene.node(goal);
    const auto dist = geodesic_distances(scene, start);
    constexpr double tie = 1e-9;

    // Lexicographically smallest shortest path to each node, settled in order
    // of distance; every shortest-path predecessor is strictly closer.
    std::vector<int> order(scene.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return std::tie(dist[static_cast<std::size_t>(a)], a) < std::tie(dist[static_cast<std::size_t>(b)], b);
    });
    std::vector<std::vector<ViewpointId>> best(scene.size());
    best[static_cast<std::size_t>(start)] = {start};
    for (int v : order) {
        if (v == start) continue;
        auto& chosen = best[static_cast<std::size_t>(v)];
        for (const auto& e : scene.nodes[static_cast<std::size_t>(v)].neighbors) {
            const auto& via = best[static_cast<std::size_t>(e.id)];
            if (via.empty()) continue;
            if (std::abs(dist[static_cast<std::size_t>(e.id)] + e.length - dist[static_cast<std::size_t>(v)]) > tie) continue;
            if (dist[static_cast<std::size_t>(e.id)] >= dist[static_cast<std::size_t>(v)]) continue;
            auto candidate = via;
            candidate.push_back(v);
            if (chosen.empty() || candidate < chosen) chosen = std::move(candidate);
        }
        if (v == goal) break;
    }
    return best[static_cast<std::size_t>(goal)];
}

double path_length(const Scene& scene, std::span<const ViewpointId> path) {
    double total = 0.0;
    for (std::size_t i = 1; i < path.size(); ++i) total += scene.edge_length(path[i - 1], path[i]);
    return total;
}

void validate_route(const Scene& scene, std::span<const ViewpointId> route) {
    if (route.empty()) throw ConfigError("empty route");
    scene.node(route.front());
    for (std::size_t i = 1; i < route.size(); ++i)
        if (!scene.adjacent(route[i - 1], route[i]))
            throw ConfigError("route step " + std::to_string(route[i - 1]) + "->" + std::to_string(route[i]) + " is not an edge");
}

int turn_token(const Vocabulary& vocab, double heading_change) {
    const double c = wrap_angle(heading_change);
    if (std::abs(c) <= std::numbers::pi / 6.0) return vocab.straight();
    return c > 0.0 ? vocab.left() : vocab.right();
}

double start_heading_from_seed(std::uint64_t seed) {
    Rng rng(derive_seed({seed, 0x68656164ULL}));
    return rng.uniform(-std::numbers::pi, std::numbers::pi);
}

std::vector<int> synthesize_instruction(const Scene& scene, std::span<const ViewpointId> route,
                                        std::uint64_t seed, int landmark_vocab, int max_len) {
    if (route.size() < 2) throw ConfigError("instruction route needs at least 2 nodes");
    validate_route(scene, route);
    const Vocabulary vocab{landmark_vocab};
    std::vector<int> tokens;
    double heading = start_heading_from_seed(seed);
    tokens.push_back(scene.node(route[0]).landmark);
    for (std::size_t i = 1; i < route.size(); ++i) {
        const double move = heading_between(scene.node(route[i - 1]).position, scene.node(route[i]).position);
        tokens.push_back(turn_token(vocab, move - heading));
        tokens.push_back(scene.node(route[i]).landmark);
        heading = move;
    }
    tokens.resize(static_cast<std::size_t>(max_len), vocab.pad());
    return tokens;
}

StepOutcome step(const Scene& scene, const Observation& ob, int action) {
    if (action == kStop) return {true, ob.viewpoint, ob.heading};
    if (action < 0 || static_cast<std::size_t>(action) >= ob.candidates.size())
        throw ConfigError("action index " + std::to_string(action) + " out of range");
    const auto& c = ob.candidates[static_cast<std::size_t>(action)];
    if (!c.navigable) throw ConfigError("action index " + std::to_string(action) + " is not navigable");
    const auto from = scene.node(ob.viewpoint).position;
    const auto to = scene.node(c.neighbor).position;
    return {false, c.neighbor, heading_between(from, to)};
}

}  // namespace esceme::world
