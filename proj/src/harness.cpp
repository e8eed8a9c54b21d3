#include "esceme/harness.hpp"

#include "esceme/errors.hpp"
#include "esceme/rng.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <set>
#include <sstream>

namespace esceme::harness {

using nlohmann::json;

ProtocolKind protocol_from_string(const std::string& s) {
    if (s == "single") return ProtocolKind::SingleRun;
    if (s == "twopass") return ProtocolKind::TwoPass;
    if (s == "reinit") return ProtocolKind::ReinitEveryEpisode;
    if (s == "zero") return ProtocolKind::ZeroMemoryBaseline;
    throw ConfigError("protocol must be single|twopass|reinit|zero, got '" + s + "'");
}

std::string to_string(ProtocolKind k) {
    switch (k) {
        case ProtocolKind::SingleRun: return "single";
        case ProtocolKind::TwoPass: return "twopass";
        case ProtocolKind::ReinitEveryEpisode: return "reinit";
        case ProtocolKind::ZeroMemoryBaseline: return "zero";
    }
    return "single";
}

std::vector<std::size_t> episode_order(const world::Dataset& data, const std::optional<std::uint64_t>& shuffle_seed) {
    std::vector<std::size_t> order(data.episodes.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (shuffle_seed) {
        Rng rng(derive_seed({*shuffle_seed, 0x73687566ULL}));
        rng.shuffle(order);
    }
    return order;
}

void check_compatible(const agent::AgentParameters& params, const world::Dataset& data) {
    const auto& a = params.config();
    const auto& w = data.config;
    if (a.dim != w.feature_dim) throw ConfigError("checkpoint dim does not match dataset feature_dim");
    if (a.landmark_vocab != w.landmark_vocab) throw ConfigError("checkpoint vocabulary does not match dataset");
    if (a.max_instruction_len < w.max_instruction_len) throw ConfigError("checkpoint L_max shorter than dataset instructions");
    if (a.max_candidates < w.max_degree) throw ConfigError("checkpoint K_max smaller than dataset max degree");
}

EvalRun run_eval(const agent::AgentParameters& params, const world::Dataset& data, const Protocol& protocol) {
    check_compatible(params, data);
    const auto& cfg = params.config();
    const world::ObservationModel observer(data.config);
    memory::EpisodicMemory mem(cfg.dim, cfg.pooling);
    const auto order = episode_order(data, protocol.shuffle_seed);
    const bool zero = protocol.kind == ProtocolKind::ZeroMemoryBaseline;

    EvalRun run;
    auto run_pass = [&](bool record, bool update_memory) {
        for (std::size_t idx = 0; idx < order.size(); ++idx) {
            const auto& ep = data.episodes[order[idx]];
            const auto& scene = data.scene(ep.scene_id);
            if (protocol.kind == ProtocolKind::ReinitEveryEpisode) mem.reset();
            EvalRecord rec;
            rec.memory_at_start = mem.size(ep.scene_id);
            training::RolloutOptions opts;
            opts.mode = training::RolloutMode::Greedy;
            opts.use_memory = !zero;
            opts.update_memory = update_memory && !zero;
            opts.noise_seed = derive_seed({ep.seed, 0x6576616cULL});
            opts.on_distribution = [&](const std::vector<double>& p, const std::vector<char>& allowed) {
                if (!record) return;
                ++run.decisions;
                if (!agent::distribution_valid(p, allowed)) ++rec.distribution_violations;
            };
            const auto rollout = training::run_rollout(params, scene, ep, observer, mem, opts, nullptr);
            if (!record) continue;
            rec.episode_id = ep.id;
            rec.scene_id = ep.scene_id;
            rec.protocol = to_string(protocol.kind);
            rec.order_index = static_cast<int>(idx);
            rec.trajectory = rollout.path;
            rec.steps = static_cast<int>(rollout.steps.size());
            rec.metrics = metrics::evaluate(scene, rollout.path, ep.route);
            run.distribution_violations += static_cast<std::size_t>(rec.distribution_violations);
            if (!rec.metrics.within_ranges()) ++run.range_violations;
            run.records.push_back(std::move(rec));
        }
    };
    if (protocol.kind == ProtocolKind::TwoPass) {
        run_pass(false, true);
        run_pass(true, !protocol.freeze_scored_pass);
    } else {
        run_pass(true, true);
    }
    return run;
}

std::string to_jsonl(const EvalRecord& r) {
    json j = {{"episode_id", r.episode_id},
              {"scene_id", r.scene_id},
              {"protocol", r.protocol},
              {"order_index", r.order_index},
              {"trajectory", r.trajectory},
              {"steps", r.steps},
              {"memory_nodes", r.memory_at_start.nodes},
              {"memory_edges", r.memory_at_start.edges},
              {"distribution_violations", r.distribution_violations},
              {"metrics", r.metrics.as_map()}};
    return j.dump();
}

std::string to_jsonl(const std::vector<EvalRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += to_jsonl(r);
        out += '\n';
    }
    return out;
}

std::vector<EvalRecord> records_from_jsonl(const std::string& text) {
    std::vector<EvalRecord> out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            EvalRecord r;
            r.episode_id = j.at("episode_id").get<int>();
            r.scene_id = j.at("scene_id").get<std::string>();
            r.protocol = j.at("protocol").get<std::string>();
            r.order_index = j.at("order_index").get<int>();
            r.trajectory = j.at("trajectory").get<std::vector<world::ViewpointId>>();
            r.steps = j.at("steps").get<int>();
            r.memory_at_start.nodes = j.at("memory_nodes").get<std::size_t>();
            r.memory_at_start.edges = j.at("memory_edges").get<std::size_t>();
            r.distribution_violations = j.at("distribution_violations").get<int>();
            const auto& m = j.at("metrics");
            auto& v = r.metrics;
            v.tl = m.at("TL").get<double>();
            v.ne = m.at("NE").get<double>();
            v.sr = m.at("SR").get<double>();
            v.spl = m.at("SPL").get<double>();
            v.cls = m.at("CLS").get<double>();
            v.ndtw = m.at("nDTW").get<double>();
            v.sdtw = m.at("SDTW").get<double>();
            v.gp = m.at("GP").get<double>();
            out.push_back(std::move(r));
        } catch (const json::exception& ex) {
            throw ConfigError("bad record on line " + std::to_string(line_no) + ": " + ex.what());
        }
    }
    return out;
}

std::vector<metrics::MetricVector> metric_rows(const std::vector<EvalRecord>& records) {
    std::vector<metrics::MetricVector> rows;
    rows.reserve(records.size());
    for (const auto& r : records) rows.push_back(r.metrics);
    return rows;
}

namespace {

std::string fmt(double x) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", x);
    return buf;
}

}  // namespace

std::string summary_csv(const metrics::Summary& s) {
    std::string out = "metric,mean,std,count\n";
    for (const auto& name : metrics::MetricVector::names())
        out += name + "," + fmt(s.mean.at(name)) + "," + fmt(s.stddev.at(name)) + "," + std::to_string(s.count) + "\n";
    return out;
}

std::vector<CurvePoint> progress_curve(const std::vector<EvalRecord>& records, const std::string& metric, int window) {
    if (records.empty()) throw ConfigError("progress curve needs records");
    if (window < 1) throw ConfigError("window must be positive");
    const auto n = records.size();
    const auto w = std::min(static_cast<std::size_t>(window), n);
    std::vector<CurvePoint> curve;
    // Each window is summed from scratch so identical windows give identical values.
    for (std::size_t end = w; end <= n; ++end) {
        double s = 0.0;
        for (std::size_t j = end - w; j < end; ++j) s += records[j].metrics.get(metric);
        curve.push_back({static_cast<double>(end) / static_cast<double>(n), s / static_cast<double>(w)});
    }
    return curve;
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
    std::string out = "progress,value\n";
    for (const auto& p : curve) out += fmt(p.progress) + "," + fmt(p.value) + "\n";
    return out;
}

double curve_mean_between(const std::vector<CurvePoint>& curve, double lo, double hi) {
    double s = 0.0;
    int n = 0;
    for (const auto& p : curve)
        if (p.progress >= lo && p.progress <= hi) {
            s += p.value;
            ++n;
        }
    if (n == 0) throw ConfigError("no curve points in the requested progress range");
    return s / n;
}

StabilityReport stability_report(const agent::AgentParameters& params, const world::Dataset& data, ProtocolKind kind,
                                 int n_orders, std::uint64_t base_seed) {
    if (n_orders < 2) throw ConfigError("stability needs at least 2 orders");
    StabilityReport rep;
    for (int i = 0; i < n_orders; ++i) {
        Protocol p{kind, base_seed + static_cast<std::uint64_t>(i), false};
        auto run = run_eval(params, data, p);
        // Sum in episode-id order so order-free protocols give identical means.
        std::sort(run.records.begin(), run.records.end(),
                  [](const EvalRecord& x, const EvalRecord& y) { return x.episode_id < y.episode_id; });
        const auto rows = metric_rows(run.records);
        rep.per_order.push_back(metrics::summarize(rows).mean);
    }
    for (const auto& name : metrics::MetricVector::names()) {
        std::vector<double> xs;
        for (const auto& m : rep.per_order) xs.push_back(m.at(name));
        rep.mean[name] = metrics::mean(xs);
        rep.stddev[name] = metrics::sample_stddev(xs);
    }
    return rep;
}

PairedReport compare(const std::vector<EvalRecord>& a, const std::vector<EvalRecord>& b) {
    std::map<int, const EvalRecord*> by_id;
    for (const auto& r : b) by_id[r.episode_id] = &r;
    if (by_id.size() != b.size() || a.size() != b.size()) throw ConfigError("compare needs the same episodes on both sides");
    PairedReport rep;
    for (const auto& ra : a) {
        const auto it = by_id.find(ra.episode_id);
        if (it == by_id.end()) throw ConfigError("episode " + std::to_string(ra.episode_id) + " missing from one side");
        auto& row = rep.per_episode[ra.episode_id];
        for (const auto& name : metrics::MetricVector::names()) row[name] = ra.metrics.get(name) - it->second->metrics.get(name);
    }
    const auto sa = metrics::summarize(metric_rows(a));
    const auto sb = metrics::summarize(metric_rows(b));
    for (const auto& name : metrics::MetricVector::names()) rep.delta[name] = sa.mean.at(name) - sb.mean.at(name);
    return rep;
}

std::string paired_csv(const PairedReport& r) {
    std::string out = "episode_id";
    for (const auto& name : metrics::MetricVector::names()) out += ",d_" + name;
    out += "\nall";
    for (const auto& name : metrics::MetricVector::names()) out += "," + fmt(r.delta.at(name));
    out += "\n";
    for (const auto& [id, row] : r.per_episode) {
        out += std::to_string(id);
        for (const auto& name : metrics::MetricVector::names()) out += "," + fmt(row.at(name));
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void read_key(const json& section, std::set<std::string>& seen, const char* key, T& target) {
    if (section.contains(key)) {
        target = section.at(key).get<T>();
        seen.insert(key);
    }
}

void reject_unknown(const json& section, const std::set<std::string>& seen, const std::string& name) {
    for (const auto& [k, v] : section.items())
        if (!seen.contains(k)) throw ConfigError("unknown key '" + k + "' in config section '" + name + "'");
}

}  // namespace

agent::AgentConfig agent_config_for(const world::WorldConfig& world, agent::AgentConfig base) {
    base.dim = world.feature_dim;
    base.landmark_vocab = world.landmark_vocab;
    base.max_instruction_len = std::max(base.max_instruction_len, world.max_instruction_len);
    base.max_candidates = std::max(base.max_candidates, world.max_degree);
    base.validate();
    return base;
}

RunConfig parse_run_config(const std::string& json_text) {
    RunConfig rc;
    try {
        const json doc = json::parse(json_text);
        if (!doc.is_object()) throw ConfigError("config must be a JSON object");
        for (const auto& [k, v] : doc.items())
            if (k != "world" && k != "agent" && k != "train" && k != "eval") throw ConfigError("unknown config section '" + k + "'");
        if (doc.contains("world")) {
            const auto& s = doc.at("world");
            std::set<std::string> seen;
            auto& w = rc.world;
            read_key(s, seen, "n_nodes", w.n_nodes);
            read_key(s, seen, "mean_degree", w.mean_degree);
            read_key(s, seen, "K_max", w.max_degree);
            read_key(s, seen, "landmark_vocab", w.landmark_vocab);
            read_key(s, seen, "d", w.feature_dim);
            read_key(s, seen, "sigma_obs", w.sigma_obs);
            read_key(s, seen, "extent", w.extent);
            read_key(s, seen, "feature_seed", w.feature_seed);
            read_key(s, seen, "min_hops", w.min_hops);
            read_key(s, seen, "max_hops", w.max_hops);
            read_key(s, seen, "L_max", w.max_instruction_len);
            reject_unknown(s, seen, "world");
        }
        if (doc.contains("agent")) {
            const auto& s = doc.at("agent");
            std::set<std::string> seen;
            auto& a = rc.agent;
            read_key(s, seen, "heads", a.heads);
            read_key(s, seen, "max_steps", a.max_steps);
            read_key(s, seen, "init_seed", rc.init_seed);
            std::string variant = agent::to_string(a.variant), pooling = memory::to_string(a.pooling);
            read_key(s, seen, "variant", variant);
            read_key(s, seen, "pooling", pooling);
            a.variant = agent::variant_from_string(variant);
            a.pooling = memory::pooling_from_string(pooling);
            reject_unknown(s, seen, "agent");
        }
        if (doc.contains("train")) {
            const auto& s = doc.at("train");
            std::set<std::string> seen;
            auto& t = rc.train;
            read_key(s, seen, "alpha", t.alpha);
            read_key(s, seen, "gamma", t.gamma);
            read_key(s, seen, "lr", t.learning_rate);
            read_key(s, seen, "batch_size", t.batch_size);
            read_key(s, seen, "iterations", t.iterations);
            read_key(s, seen, "seed", t.seed);
            read_key(s, seen, "critic_weight", t.critic_weight);
            read_key(s, seen, "grad_clip", t.grad_clip);
            read_key(s, seen, "validate_every", t.validate_every);
            read_key(s, seen, "use_memory", t.use_memory);
            reject_unknown(s, seen, "train");
        }
        if (doc.contains("eval")) {
            const auto& s = doc.at("eval");
            std::set<std::string> seen;
            read_key(s, seen, "freeze_scored_pass", rc.freeze_scored_pass);
            reject_unknown(s, seen, "eval");
        }
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("malformed config: ") + ex.what());
    }
    rc.agent = agent_config_for(rc.world, rc.agent);
    rc.train.validate();
    return rc;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_run_config(buf.str());
}

}  // namespace esceme::harness
