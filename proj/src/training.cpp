#include "esceme/training.hpp"

#include "esceme/errors.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>

namespace esceme::training {

using nlohmann::json;

void TrainConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    if (iterations < 0) throw ConfigError("iterations must be non-negative");
    if (!(success_radius > 0.0)) throw ConfigError("success radius must be positive");
    if (grad_clip < 0.0) throw ConfigError("grad_clip must be non-negative");
}

int teacher_action(const world::Scene& scene, const world::Observation& ob, world::ViewpointId goal) {
    if (ob.viewpoint == goal) return world::kStop;
    const auto path = world::shortest_path(scene, ob.viewpoint, goal);
    const auto next = path.at(1);
    for (std::size_t k = 0; k < ob.candidates.size(); ++k)
        if (ob.candidates[k].neighbor == next && ob.candidates[k].navigable) return static_cast<int>(k);
    throw ConfigError("teacher's next node is not a navigable candidate");
}

Rollout run_rollout(const AgentParameters& params, const world::Scene& scene, const world::Episode& episode,
                    const world::ObservationModel& observer, memory::EpisodicMemory& mem, const RolloutOptions& opts,
                    Rng* rng) {
    if (opts.mode == RolloutMode::Sample && !rng) throw ConfigError("sampling rollout needs a generator");
    const auto& cfg = params.config();
    ad::NoGradGuard no_grad;
    Rollout out;
    out.episode = &episode;
    const auto instr = agent::encode_instruction(params, episode.instruction);
    agent::HistoryState hist;
    world::ViewpointId here = episode.route.front();
    double heading = episode.start_heading;
    out.path.push_back(here);
    for (int t = 0; t < cfg.max_steps; ++t) {
        RolloutStep st;
        st.t = t;
        st.observation = observer.observe(scene, here, heading, derive_seed({opts.noise_seed, static_cast<std::uint64_t>(t)}));
        const auto& ob = st.observation;
        std::vector<world::ViewpointId> ids;
        for (const auto& c : ob.candidates) ids.push_back(c.neighbor);
        st.memory_feats = opts.use_memory ? mem.retrieve(episode.scene_id, ids)
                                          : std::vector<std::vector<double>>(ids.size(), std::vector<double>(static_cast<std::size_t>(cfg.dim), 0.0));
        if (cfg.graph_encoding())
            st.graph = opts.use_memory ? agent::masked_subgraph(mem, episode.scene_id, out.path) : agent::GraphInput{};
        st.teacher_action = teacher_action(scene, ob, episode.goal);

        agent::StepInputs in{&ob, st.memory_feats, st.graph};
        const auto fwd = agent::forward_step(params, instr, hist, in);
        if (opts.on_distribution) opts.on_distribution(fwd.probabilities, fwd.enhanced.navigable);
        switch (opts.mode) {
            case RolloutMode::Teacher: st.action = st.teacher_action; break;
            case RolloutMode::Greedy: st.action = agent::choose_action(fwd.probabilities, agent::ActMode::Greedy); break;
            case RolloutMode::Sample: st.action = agent::choose_action(fwd.probabilities, agent::ActMode::Sample, rng->uniform()); break;
        }
        const int row = st.action == world::kStop ? fwd.enhanced.count() : st.action;
        st.log_prob = fwd.log_probs.at(row, 0);
        st.value = fwd.value.scalar();

        if (opts.update_memory) mem.update(episode.scene_id, ob);
        const auto outcome = world::step(scene, ob, st.action);
        st.done = outcome.terminal;
        if (!outcome.terminal) {
            const auto& c = ob.candidates[static_cast<std::size_t>(st.action)];
            hist = agent::update_history(params, hist, ad::row(fwd.enhanced.features, st.action), c.theta, c.phi);
            here = outcome.viewpoint;
            heading = outcome.heading;
            out.path.push_back(here);
        }
        out.steps.push_back(std::move(st));
        if (outcome.terminal) {
            out.stopped = true;
            break;
        }
    }
    if (!out.steps.empty()) out.steps.back().done = true;
    const auto rewards = step_rewards(scene, out, episode.goal, opts.success_radius, opts.terminal_bonus);
    for (std::size_t i = 0; i < rewards.size(); ++i) out.steps[i].reward = rewards[i];
    return out;
}

std::vector<double> step_rewards(const world::Scene& scene, const Rollout& rollout, world::ViewpointId goal,
                                 double success_radius, double terminal_bonus) {
    const auto dist = world::geodesic_distances(scene, goal);
    std::vector<double> rewards;
    std::size_t pos = 0;
    for (const auto& st : rollout.steps) {
        const auto here = rollout.path[pos];
        double r = 0.0;
        if (st.action != world::kStop) {
            const auto next = rollout.path.at(pos + 1);
            r = dist[static_cast<std::size_t>(here)] - dist[static_cast<std::size_t>(next)];
            ++pos;
        }
        rewards.push_back(r);
    }
    if (!rewards.empty()) {
        const double final_dist = dist[static_cast<std::size_t>(rollout.path.back())];
        rewards.back() += final_dist < success_radius ? terminal_bonus : -terminal_bonus;
    }
    return rewards;
}

std::vector<double> discounted_returns(std::span<const double> rewards, double gamma) {
    std::vector<double> out(rewards.size());
    double acc = 0.0;
    for (std::size_t i = rewards.size(); i-- > 0;) {
        acc = rewards[i] + gamma * acc;
        out[i] = acc;
    }
    return out;
}

Var il_loss(std::span<const Var> teacher_log_probs, double alpha) {
    std::vector<Var> terms;
    for (const auto& lp : teacher_log_probs) {
        if (!std::isfinite(lp.scalar())) throw NumericFault("teacher action has zero probability");
        terms.push_back(lp);
    }
    if (terms.empty()) return ad::constant(ad::Matrix(1, 1));
    return ad::scale(ad::sum(ad::concat_rows(terms)), -alpha);
}

RlLoss rl_loss(std::span<const Var> log_probs, std::span<const Var> values, std::span<const double> returns,
               const std::vector<double>* frozen_advantages) {
    if (log_probs.size() != values.size() || log_probs.size() != returns.size())
        throw ConfigError("rl_loss inputs differ in length");
    if (frozen_advantages && frozen_advantages->size() != returns.size())
        throw ConfigError("frozen advantages differ in length");
    RlLoss out{ad::constant(ad::Matrix(1, 1)), ad::constant(ad::Matrix(1, 1))};
    if (log_probs.empty()) return out;
    std::vector<Var> policy_terms, critic_terms;
    for (std::size_t t = 0; t < log_probs.size(); ++t) {
        const double adv = frozen_advantages ? (*frozen_advantages)[t] : returns[t] - values[t].scalar();
        policy_terms.push_back(ad::scale(log_probs[t], -adv));
        critic_terms.push_back(ad::square(ad::add_scalar(ad::scale(values[t], -1.0), returns[t])));
    }
    out.policy = ad::sum(ad::concat_rows(policy_terms));
    out.critic = ad::sum(ad::concat_rows(critic_terms));
    return out;
}

namespace {

struct Replay {
    std::vector<Var> log_probs;
    std::vector<Var> values;
};

// Differentiable re-run of a recorded rollout.
Replay replay(const AgentParameters& params, const Rollout& r) {
    Replay out;
    const auto instr = agent::encode_instruction(params, r.episode->instruction);
    agent::HistoryState hist;
    for (const auto& st : r.steps) {
        agent::StepInputs in{&st.observation, st.memory_feats, st.graph};
        const auto fwd = agent::forward_step(params, instr, hist, in);
        const int row = st.action == world::kStop ? fwd.enhanced.count() : st.action;
        out.log_probs.push_back(ad::pick(fwd.log_probs, row, 0));
        out.values.push_back(fwd.value);
        if (st.action != world::kStop) {
            const auto& c = st.observation.candidates[static_cast<std::size_t>(st.action)];
            hist = agent::update_history(params, hist, ad::row(fwd.enhanced.features, st.action), c.theta, c.phi);
        }
    }
    return out;
}

}  // namespace

LossParts trace_loss(const AgentParameters& params, std::span<const Rollout> teacher_rollouts,
                     std::span<const Rollout> sampled_rollouts, const TrainConfig& cfg,
                     const std::vector<double>* frozen_advantages) {
    const double batch = static_cast<double>(std::max(teacher_rollouts.size(), sampled_rollouts.size()));
    std::vector<Var> il_terms;
    for (const auto& r : teacher_rollouts) il_terms.push_back(il_loss(replay(params, r).log_probs, cfg.alpha));

    std::vector<Var> policy_terms, critic_terms;
    LossParts out;
    std::size_t offset = 0;
    for (const auto& r : sampled_rollouts) {
        const auto rep = replay(params, r);
        std::vector<double> rewards;
        for (const auto& st : r.steps) rewards.push_back(st.reward);
        const auto returns = discounted_returns(rewards, cfg.gamma);
        std::vector<double> frozen;
        if (frozen_advantages) {
            if (frozen_advantages->size() < offset + returns.size()) throw ConfigError("too few frozen advantages");
            frozen.assign(frozen_advantages->begin() + static_cast<std::ptrdiff_t>(offset),
                          frozen_advantages->begin() + static_cast<std::ptrdiff_t>(offset + returns.size()));
        }
        const auto rl = rl_loss(rep.log_probs, rep.values, returns, frozen_advantages ? &frozen : nullptr);
        for (std::size_t t = 0; t < returns.size(); ++t) out.advantages.push_back(returns[t] - rep.values[t].scalar());
        offset += returns.size();
        policy_terms.push_back(rl.policy);
        critic_terms.push_back(rl.critic);
    }
    auto total_of = [](const std::vector<Var>& terms) {
        return terms.empty() ? ad::constant(ad::Matrix(1, 1)) : ad::sum(ad::concat_rows(terms));
    };
    const Var il = total_of(il_terms);
    const Var policy = total_of(policy_terms);
    const Var critic = total_of(critic_terms);
    out.il = il.scalar() / batch;
    out.policy = policy.scalar() / batch;
    out.critic = critic.scalar() / batch;
    out.total = ad::scale(ad::add(ad::add(il, policy), ad::scale(critic, cfg.critic_weight)), 1.0 / batch);
    return out;
}

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(AgentParameters& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& name : params.names()) {
        auto& p = params.get(name);
        const auto& g = p.grad();
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) {
            m.assign(g.size(), 0.0);
            v.assign(g.size(), 0.0);
        }
        auto& w = p.mutable_value().data;
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1_ * m[i] + (1.0 - beta1_) * g.data[i];
            v[i] = beta2_ * v[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
            w[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        }
    }
}

double global_grad_norm(const AgentParameters& params) {
    double sq = 0.0;
    for (const auto& name : params.names())
        for (double g : params.get(name).grad().data) sq += g * g;
    return std::sqrt(sq);
}

void clip_gradients(AgentParameters& params, double max_norm) {
    const double norm = global_grad_norm(params);
    if (!std::isfinite(norm)) throw NumericFault("non-finite gradient");
    if (max_norm <= 0.0 || norm <= max_norm) return;
    const double s = max_norm / norm;
    for (const auto& name : params.names()) {
        auto& p = params.get(name);
        auto& g = p.node()->grad_buffer();
        for (auto& x : g.data) x *= s;
    }
}

std::string to_jsonl(const LogEntry& e) {
    json j = {{"iteration", e.iteration}, {"il_loss", e.il_loss}, {"rl_loss", e.rl_loss}, {"critic_loss", e.critic_loss}};
    if (!e.validation.empty()) j["val"] = e.validation;
    return j.dump();
}

TrainResult train(const AgentParameters& init, const world::Dataset& data, const TrainConfig& cfg,
                  const Validator& validator) {
    cfg.validate();
    if (data.episodes.empty()) throw ConfigError("training dataset is empty");
    const auto& acfg = init.config();
    if (acfg.dim != data.config.feature_dim || acfg.landmark_vocab != data.config.landmark_vocab ||
        acfg.max_instruction_len < data.config.max_instruction_len)
        throw ConfigError("agent config does not match the dataset");

    TrainResult result{init.clone(), {}};
    auto& params = result.params;
    const world::ObservationModel observer(data.config);
    memory::EpisodicMemory mem(acfg.dim, acfg.pooling);
    Rng rng(derive_seed({cfg.seed, 0x747261696eULL}));
    Adam adam(cfg.learning_rate);

    std::vector<std::size_t> order(data.episodes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::size_t cursor = 0;

    for (int it = 0; it < cfg.iterations; ++it) {
        std::vector<Rollout> teacher, sampled;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == order.size()) {
                rng.shuffle(order);
                cursor = 0;
                mem.reset();
            }
            const auto& ep = data.episodes[order[cursor++]];
            const auto& scene = data.scene(ep.scene_id);
            RolloutOptions opts;
            opts.use_memory = cfg.use_memory;
            opts.success_radius = cfg.success_radius;
            opts.terminal_bonus = cfg.terminal_bonus;
            // Both passes read the memory as it stood before this episode;
            // the teacher's observations are merged in afterwards.
            const auto* stored = mem.graph(ep.scene_id);
            const memory::SceneGraph before = stored ? *stored : memory::SceneGraph{};
            opts.mode = RolloutMode::Teacher;
            opts.noise_seed = rng.next_u64();
            teacher.push_back(run_rollout(params, scene, ep, observer, mem, opts, &rng));
            mem.set_graph(ep.scene_id, before);
            opts.mode = RolloutMode::Sample;
            opts.noise_seed = rng.next_u64();
            sampled.push_back(run_rollout(params, scene, ep, observer, mem, opts, &rng));
            for (const auto& st : teacher.back().steps) mem.update(ep.scene_id, st.observation);
        }
        params.zero_grad();
        const auto loss = trace_loss(params, teacher, sampled, cfg);
        if (!std::isfinite(loss.total.scalar())) throw NumericFault("non-finite loss at iteration " + std::to_string(it));
        ad::backward(loss.total);
        clip_gradients(params, cfg.grad_clip);
        adam.step(params);
        if (!params.all_finite()) throw NumericFault("non-finite parameters at iteration " + std::to_string(it));

        LogEntry entry{it, loss.il, loss.policy, loss.critic, {}};
        if (validator && cfg.validate_every > 0 && (it + 1) % cfg.validate_every == 0) entry.validation = validator(params);
        result.log.push_back(std::move(entry));
    }
    return result;
}

}  // namespace esceme::training
