#pragma once

#include "esceme/agent.hpp"
#include "esceme/dataset.hpp"
#include "esceme/memory.hpp"
#include "esceme/metrics.hpp"
#include "esceme/training.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace esceme::harness {

enum class ProtocolKind { SingleRun, TwoPass, ReinitEveryEpisode, ZeroMemoryBaseline };

ProtocolKind protocol_from_string(const std::string& s);  // single | twopass | reinit | zero
std::string to_string(ProtocolKind k);

struct Protocol {
    ProtocolKind kind = ProtocolKind::SingleRun;
    std::optional<std::uint64_t> shuffle_seed;  // GIVEN order when absent
    bool freeze_scored_pass = false;            // TWO_PASS: no memory updates in pass 2
};

struct EvalRecord {
    int episode_id = 0;
    std::string scene_id;
    std::string protocol;
    int order_index = 0;
    std::vector<world::ViewpointId> trajectory;
    metrics::MetricVector metrics;
    memory::GraphSize memory_at_start;
    int steps = 0;
    int distribution_violations = 0;
};

struct EvalRun {
    std::vector<EvalRecord> records;
    std::size_t decisions = 0;               // distributions checked
    std::size_t distribution_violations = 0;
    std::size_t range_violations = 0;        // MetricVector invariants
};

// Dataset order, or a seeded permutation of it.
std::vector<std::size_t> episode_order(const world::Dataset& data, const std::optional<std::uint64_t>& shuffle_seed);

// Greedy inference under a memory protocol. Episodes of one scene run in the
// given order; records come out in execution order.
EvalRun run_eval(const agent::AgentParameters& params, const world::Dataset& data, const Protocol& protocol);

std::string to_jsonl(const EvalRecord& r);
std::string to_jsonl(const std::vector<EvalRecord>& records);
std::vector<EvalRecord> records_from_jsonl(const std::string& text);

std::vector<metrics::MetricVector> metric_rows(const std::vector<EvalRecord>& records);
std::string summary_csv(const metrics::Summary& s);

struct CurvePoint {
    double progress = 0.0;  // fraction of episodes processed
    double value = 0.0;
};

// Moving average of `metric` (SPL, CLS, ...) over episode order; one point for
// every full window.
std::vector<CurvePoint> progress_curve(const std::vector<EvalRecord>& records, const std::string& metric, int window);
std::string curve_csv(const std::vector<CurvePoint>& curve);

// Mean value of the curve points with progress in [lo, hi].
double curve_mean_between(const std::vector<CurvePoint>& curve, double lo, double hi);

struct StabilityReport {
    std::map<std::string, double> mean;
    std::map<std::string, double> stddev;
    std::vector<std::map<std::string, double>> per_order;  // split means for each order
};

// Runs the protocol under n_orders shuffled episode orders (seeds base_seed,
// base_seed + 1, ...) and aggregates the per-order split means.
StabilityReport stability_report(const agent::AgentParameters& params, const world::Dataset& data, ProtocolKind kind,
                                 int n_orders, std::uint64_t base_seed = 1);

struct PairedReport {
    std::map<std::string, double> delta;  // mean(A) - mean(B)
    std::map<int, std::map<std::string, double>> per_episode;
};

// Episodes are matched by id; both record sets must cover the same episodes.
PairedReport compare(const std::vector<EvalRecord>& a, const std::vector<EvalRecord>& b);
std::string paired_csv(const PairedReport& r);

// ---------------------------------------------------------------------------

// Structured configuration file (JSON object with optional "world", "agent",
// "train" and "eval" sections). Unknown keys are rejected.
struct RunConfig {
    world::WorldConfig world;
    agent::AgentConfig agent;
    training::TrainConfig train;
    std::uint64_t init_seed = 7;
    bool freeze_scored_pass = false;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);

// Agent config consistent with a world config (dim, vocab, instruction length).
agent::AgentConfig agent_config_for(const world::WorldConfig& world, agent::AgentConfig base);

// Throws ConfigError when a checkpoint cannot read the dataset.
void check_compatible(const agent::AgentParameters& params, const world::Dataset& data);

}  // namespace esceme::harness
