#pragma once

#include "esceme/agent.hpp"
#include "esceme/dataset.hpp"
#include "esceme/memory.hpp"
#include "esceme/rng.hpp"
#include "esceme/world.hpp"

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace esceme::training {

using agent::AgentParameters;
using ad::Var;

struct TrainConfig {
    double alpha = 0.2;  // imitation weight
    double gamma = 0.9;
    double learning_rate = 1e-3;
    int batch_size = 8;
    int iterations = 2000;
    std::uint64_t seed = 1;
    double success_radius = 3.0;
    double terminal_bonus = 2.0;
    double critic_weight = 0.5;
    double grad_clip = 5.0;  // global L2 norm; 0 disables
    int validate_every = 0;  // iterations; 0 disables
    bool use_memory = true;

    void validate() const;
};

// Candidate index of the next node on the geodesic to goal; kStop at the goal.
int teacher_action(const world::Scene& scene, const world::Observation& ob, world::ViewpointId goal);

struct RolloutStep {
    int t = 0;
    world::Observation observation;
    std::vector<std::vector<double>> memory_feats;
    std::optional<agent::GraphInput> graph;
    int teacher_action = world::kStop;
    int action = world::kStop;
    double log_prob = 0.0;
    double value = 0.0;
    double reward = 0.0;
    bool done = false;
};

struct Rollout {
    const world::Episode* episode = nullptr;
    std::vector<RolloutStep> steps;
    std::vector<world::ViewpointId> path;
    bool stopped = false;  // false when the step budget ran out
};

enum class RolloutMode { Teacher, Sample, Greedy };

struct RolloutOptions {
    RolloutMode mode = RolloutMode::Greedy;
    bool use_memory = true;      // false: retrieval returns zeros
    bool update_memory = true;
    std::uint64_t noise_seed = 0;  // combined with the step index
    double success_radius = 3.0;
    double terminal_bonus = 2.0;
    // Called with each step's distribution and mask (invariant checks).
    std::function<void(const std::vector<double>&, const std::vector<char>&)> on_distribution;
};

// Runs one episode without recording gradients. Memory is consulted before
// each decision and updated with that step's observation afterwards.
Rollout run_rollout(const AgentParameters& params, const world::Scene& scene, const world::Episode& episode,
                    const world::ObservationModel& observer, memory::EpisodicMemory& mem, const RolloutOptions& opts,
                    Rng* rng);

// Per-step reward: decrease of geodesic distance to the goal; the final step
// adds +bonus inside the success radius and -bonus otherwise.
std::vector<double> step_rewards(const world::Scene& scene, const Rollout& rollout, world::ViewpointId goal,
                                 double success_radius, double terminal_bonus);

std::vector<double> discounted_returns(std::span<const double> rewards, double gamma);

// -alpha * sum_t log P(a*_t). Throws NumericFault on a zero-probability teacher action.
Var il_loss(std::span<const Var> teacher_log_probs, double alpha);

struct RlLoss {
    Var policy;  // -sum_t log P(a~_t) * (R_t - v_t), advantage held constant
    Var critic;  // sum_t (R_t - v_t)^2
};

// Advantages come from `values` unless `frozen_advantages` is given.
RlLoss rl_loss(std::span<const Var> log_probs, std::span<const Var> values, std::span<const double> returns,
               const std::vector<double>* frozen_advantages = nullptr);

struct LossParts {
    Var total;
    double il = 0.0;
    double policy = 0.0;
    double critic = 0.0;
    std::vector<double> advantages;  // concatenated over RL rollouts
};

// Rebuilds the differentiable loss from recorded rollouts (fixed actions,
// observations and memory reads), averaged over the batch.
LossParts trace_loss(const AgentParameters& params, std::span<const Rollout> teacher_rollouts,
                     std::span<const Rollout> sampled_rollouts, const TrainConfig& cfg,
                     const std::vector<double>* frozen_advantages = nullptr);

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(AgentParameters& params);

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, std::vector<double>> m_, v_;
};

double global_grad_norm(const AgentParameters& params);
void clip_gradients(AgentParameters& params, double max_norm);

struct LogEntry {
    int iteration = 0;
    double il_loss = 0.0;
    double rl_loss = 0.0;
    double critic_loss = 0.0;
    std::map<std::string, double> validation;
};

std::string to_jsonl(const LogEntry& e);

struct TrainResult {
    AgentParameters params;
    std::vector<LogEntry> log;
};

using Validator = std::function<std::map<std::string, double>(const AgentParameters&)>;

// Memory persists across episodes within an epoch and is reset between epochs.
TrainResult train(const AgentParameters& init, const world::Dataset& data, const TrainConfig& cfg,
                  const Validator& validator = {});

}  // namespace esceme::training
