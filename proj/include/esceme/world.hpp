#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace esceme::world {

using ViewpointId = int;

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
};

double distance(Vec2 a, Vec2 b);

// Absolute heading (radians, counter-clockwise from +x) of the segment a -> b.
double heading_between(Vec2 a, Vec2 b);

// Wraps an angle into (-pi, pi].
double wrap_angle(double a);

struct Neighbor {
    ViewpointId id = 0;
    double length = 0.0;
};

struct SceneNode {
    Vec2 position;
    int landmark = 0;
    std::vector<Neighbor> neighbors;  // ascending by id
};

// Generation and observation parameters shared by every scene of a dataset.
struct WorldConfig {
    int n_nodes = 16;
    double mean_degree = 4.0;
    int max_degree = 8;
    int landmark_vocab = 16;
    int feature_dim = 32;
    double sigma_obs = 0.05;
    double extent = 10.0;  // side of the square, meters
    std::uint64_t feature_seed = 20230301;
    int min_hops = 3;
    int max_hops = 5;
    int max_instruction_len = 16;
};

class Scene {
public:
    std::string id;
    std::uint64_t seed = 0;
    std::vector<SceneNode> nodes;

    std::size_t size() const { return nodes.size(); }
    bool contains(ViewpointId v) const { return v >= 0 && static_cast<std::size_t>(v) < nodes.size(); }
    const SceneNode& node(ViewpointId v) const;
    bool adjacent(ViewpointId u, ViewpointId v) const;
    // Throws if (u, v) is not an edge.
    double edge_length(ViewpointId u, ViewpointId v) const;
    std::size_t edge_count() const;

    // Connectivity, degree bounds, edge symmetry and edge length consistency.
    // Returns a description of the first violated invariant.
    std::optional<std::string> check_invariants(int max_degree, int landmark_vocab) const;
};

// Random geometric graph on the square: two-nearest-neighbour edges,
// minimum-spanning-tree edges for connectivity, then the shortest remaining
// pairs until the requested mean degree is reached.
Scene generate_scene(std::uint64_t seed, int n_nodes, double mean_degree, const WorldConfig& config = {});

// ---------------------------------------------------------------------------
// Observation

struct Candidate {
    ViewpointId neighbor = 0;
    double theta = 0.0;  // heading relative to the agent
    double phi = 0.0;    // elevation, always 0 in the planar world
    std::vector<double> feature;
    bool navigable = true;
};

struct Observation {
    ViewpointId viewpoint = 0;
    double heading = 0.0;
    std::vector<Candidate> candidates;
};

// [sin theta, cos theta, sin phi, cos phi]
std::vector<double> orientation_encoding(double theta, double phi);

// Fixed landmark embedding table plus the deterministic per-view perturbation.
class ObservationModel {
public:
    explicit ObservationModel(const WorldConfig& config);

    int feature_dim() const { return feature_dim_; }
    int landmark_dim() const { return landmark_dim_; }
    double sigma() const { return sigma_; }

    // Unperturbed f_k: landmark embedding followed by the tiled orientation encoding.
    std::vector<double> base_feature(int landmark, double theta, double phi) const;

    Observation observe(const Scene& scene, ViewpointId viewpoint, double heading,
                        std::uint64_t noise_seed) const;

private:
    int feature_dim_;
    int landmark_dim_;
    int landmark_vocab_;
    double sigma_;
    std::vector<double> table_;  // landmark_vocab x landmark_dim
};

// ---------------------------------------------------------------------------
// Routes and instructions

// Minimum-length path; equal lengths (within 1e-9) resolve to the
// lexicographically smallest id sequence.
std::vector<ViewpointId> shortest_path(const Scene& scene, ViewpointId start, ViewpointId goal);

// Geodesic distance from `source` to every node.
std::vector<double> geodesic_distances(const Scene& scene, ViewpointId source);

double path_length(const Scene& scene, std::span<const ViewpointId> path);

// Throws unless consecutive nodes are adjacent.
void validate_route(const Scene& scene, std::span<const ViewpointId> route);

// Instruction tokens: landmarks occupy [0, landmark_vocab); the rest follow.
struct Vocabulary {
    int landmark_vocab = 0;

    int left() const { return landmark_vocab; }
    int right() const { return landmark_vocab + 1; }
    int straight() const { return landmark_vocab + 2; }
    int pad() const { return landmark_vocab + 3; }
    int cls() const { return landmark_vocab + 4; }
    int size() const { return landmark_vocab + 5; }
    bool is_landmark(int t) const { return t >= 0 && t < landmark_vocab; }
    bool is_turn(int t) const { return t >= left() && t <= straight(); }
};

// |change| <= pi/6 is STRAIGHT, positive (counter-clockwise) is LEFT.
int turn_token(const Vocabulary& vocab, double heading_change);

// Start heading implied by an instruction seed.
double start_heading_from_seed(std::uint64_t seed);

// landmark(r0) turn(0) landmark(r1) ... landmark(rn); turn(i) is the heading
// change of move i relative to the previous move, the first move measured from
// start_heading_from_seed(seed). Truncated or PAD-padded to max_len.
std::vector<int> synthesize_instruction(const Scene& scene, std::span<const ViewpointId> route,
                                        std::uint64_t seed, int landmark_vocab, int max_len);

// ---------------------------------------------------------------------------
// Transitions

inline constexpr int kStop = -1;

struct StepOutcome {
    bool terminal = false;
    ViewpointId viewpoint = 0;
    double heading = 0.0;
};

// action is kStop or an index into ob.candidates that is navigable.
StepOutcome step(const Scene& scene, const Observation& ob, int action);

struct Episode {
    int id = 0;
    std::string scene_id;
    std::vector<int> instruction;  // length max_instruction_len, PAD-padded
    std::vector<ViewpointId> route;
    double start_heading = 0.0;
    ViewpointId goal = 0;
    std::uint64_t seed = 0;
};

}  // namespace esceme::world
