#pragma once

#include "esceme/autodiff.hpp"
#include "esceme/memory.hpp"
#include "esceme/world.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace esceme::agent {

using ad::Matrix;
using ad::Var;

enum class Variant { CandidateEnhancing, CandidateEnhancingWithGraph };

Variant variant_from_string(const std::string& s);  // "CE" | "CE+GE"
std::string to_string(Variant v);

struct AgentConfig {
    int dim = 32;
    int heads = 1;
    int max_candidates = 8;
    int max_instruction_len = 16;
    int landmark_vocab = 16;
    int max_steps = 12;
    Variant variant = Variant::CandidateEnhancing;
    memory::Pooling pooling = memory::Pooling::Max;

    int vocab_size() const { return world::Vocabulary{landmark_vocab}.size(); }
    bool graph_encoding() const { return variant == Variant::CandidateEnhancingWithGraph; }
    // Throws ConfigError: dim even and divisible by heads, positive sizes.
    void validate() const;

    bool operator==(const AgentConfig&) const = default;
};

// Named trainable tensors, kept in a fixed registration order.
class AgentParameters {
public:
    AgentParameters() = default;
    // Weights uniform(-1/sqrt(d), 1/sqrt(d)), biases zero.
    AgentParameters(const AgentConfig& config, std::uint64_t seed);

    const AgentConfig& config() const { return config_; }
    const Var& get(const std::string& name) const;
    Var& get(const std::string& name);
    bool contains(const std::string& name) const { return index_.contains(name); }
    const std::vector<std::string>& names() const { return names_; }
    std::size_t count() const;
    bool all_finite() const;
    void zero_grad();

    // Deep copy with fresh leaves.
    AgentParameters clone() const;

    // {"version", "config", "tensors": [{"name", "shape": [r, c], "data": [...]}]}
    std::string to_json() const;
    static AgentParameters from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static AgentParameters load(const std::filesystem::path& path);

    bool same_values(const AgentParameters& other) const;

private:
    void add(const std::string& name, Matrix m);

    AgentConfig config_;
    std::vector<std::string> names_;
    std::vector<Var> tensors_;
    std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------

// Per-head key and value projections of a block of context rows.
struct ProjectedKeys {
    std::vector<Var> k;
    std::vector<Var> v;
};

// Rows: x_cls followed by x_1..x_L.
struct EncodedInstruction {
    Var tokens;
    Matrix key_mask;  // 1 x (L+1); -inf on PAD positions
    ProjectedKeys context;  // tokens as keys of the candidate cross-attention
    Var cls() const { return ad::row(tokens, 0); }
    int length() const { return tokens.rows() - 1; }
};

struct HistoryState {
    std::vector<Var> steps;  // h_1..h_{t-1}, each 1 x d
    std::vector<ProjectedKeys> context;  // one per step, as for the instruction
    std::size_t size() const { return steps.size(); }
};

struct EnhancedCandidates {
    Var features;             // (K+1) x d, STOP last
    std::vector<char> navigable;  // K+1 entries, STOP always allowed
    int count() const { return features.rows() - 1; }
};

struct CrossModalOutput {
    Var candidates;  // (K+1) x d
    Var cls;         // 1 x d
};

// Memory subgraph handed to the graph-encoding branch.
struct GraphInput {
    std::vector<std::vector<double>> features;  // n node features
    std::vector<std::pair<int, int>> edges;     // indices into features
    int size() const { return static_cast<int>(features.size()); }
};

// Stored scene memory minus the nodes of the current path (and the current node).
GraphInput masked_subgraph(const memory::EpisodicMemory& mem, const std::string& scene_id,
                           const std::vector<world::ViewpointId>& path_so_far);

// G[i][j][0] = e_ij, G[i][i][1..d] = m_i, zero elsewhere; row i*n + j.
Matrix graph_tensor(const GraphInput& graph, int dim);

struct StepForward {
    EnhancedCandidates enhanced;
    CrossModalOutput fused;
    Var log_probs;  // (K+1) x 1
    Var value;      // 1 x 1
    std::vector<double> probabilities;
};

struct AttentionResult {
    Var output;                 // queries x d, after the output projection
    std::vector<Var> weights;   // per head, queries x keys, rows sum to 1
};

// Multi-head scaled dot-product attention with parameters under `prefix`
// (prefix.q<h>, prefix.k<h>, prefix.v<h>, prefix.o). key_mask is 1 x keys.
AttentionResult attend(const AgentParameters& p, const std::string& prefix, const Var& queries, const Var& keys,
                       const Matrix& key_mask);

// Same computation with keys given as pre-projected row blocks, so context
// that repeats across steps is projected once.
ProjectedKeys project_keys(const AgentParameters& p, const std::string& prefix, const Var& keys);
AttentionResult attend_projected(const AgentParameters& p, const std::string& prefix, const Var& queries,
                                 const std::vector<const ProjectedKeys*>& blocks, const Matrix& key_mask);

// Forward pieces; all are deterministic functions of their inputs.
EncodedInstruction encode_instruction(const AgentParameters& p, const std::vector<int>& tokens);
Var enhance(const AgentParameters& p, const Matrix& memory_feats, const Matrix& plain_feats,
            const Matrix& orientations, const std::vector<char>& navigable);
EnhancedCandidates enhance_candidates(const AgentParameters& p, const world::Observation& ob,
                                      const std::vector<std::vector<double>>& memory_feats);
CrossModalOutput cross_modal(const AgentParameters& p, const EnhancedCandidates& cands,
                             const EncodedInstruction& instr, const HistoryState& hist,
                             const std::optional<Var>& graph_token);
Var predict_logits(const AgentParameters& p, const CrossModalOutput& fused);
Var critic_value(const AgentParameters& p, const CrossModalOutput& fused, const std::vector<char>& allowed);
HistoryState update_history(const AgentParameters& p, const HistoryState& hist, const Var& chosen,
                            double theta, double phi);
Var graph_encode(const AgentParameters& p, const GraphInput& graph);

// Softmax of logits with masked entries at exactly zero probability.
std::vector<double> action_distribution(const Var& log_probs);

struct StepInputs {
    const world::Observation* observation = nullptr;
    std::vector<std::vector<double>> memory_feats;  // one per candidate
    std::optional<GraphInput> graph;                // only for the CE+GE variant
};

StepForward forward_step(const AgentParameters& p, const EncodedInstruction& instr, const HistoryState& hist,
                         const StepInputs& in);

enum class ActMode { Greedy, Sample };

// Greedy: first index of the maximum; Sample: inverse CDF with u in [0, 1).
// The STOP action is returned as world::kStop.
int choose_action(const std::vector<double>& probabilities, ActMode mode, double u = 0.0);

// Per-step invariant: non-negative, sums to 1 within 1e-9, zero where masked.
bool distribution_valid(const std::vector<double>& probabilities, const std::vector<char>& allowed);

}  // namespace esceme::agent
