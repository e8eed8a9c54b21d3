#include "esceme/agent.hpp"

#include "esceme/errors.hpp"
#include "esceme/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace esceme::agent {

using nlohmann::json;

inline constexpr int kCheckpointVersion = 1;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Variant variant_from_string(const std::string& s) {
    if (s == "CE") return Variant::CandidateEnhancing;
    if (s == "CE+GE") return Variant::CandidateEnhancingWithGraph;
    throw ConfigError("variant must be 'CE' or 'CE+GE', got '" + s + "'");
}

std::string to_string(Variant v) { return v == Variant::CandidateEnhancing ? "CE" : "CE+GE"; }

void AgentConfig::validate() const {
    if (dim < 2 || dim % 2 != 0) throw ConfigError("dim must be even and >= 2");
    if (heads < 1 || dim % heads != 0) throw ConfigError("dim must be divisible by heads");
    if (max_candidates < 1) throw ConfigError("max_candidates must be positive");
    if (max_instruction_len < 1) throw ConfigError("max_instruction_len must be positive");
    if (landmark_vocab < 1) throw ConfigError("landmark_vocab must be positive");
    if (max_steps < 1) throw ConfigError("max_steps must be positive");
}

// ---------------------------------------------------------------------------

AgentParameters::AgentParameters(const AgentConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    const int d = config.dim;
    const int dh = d / config.heads;
    const int half = d / 2;
    Rng rng(derive_seed({seed, 0x706172616d73ULL}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    auto weight = [&](int r, int c) {
        Matrix m(r, c);
        for (auto& v : m.data) v = rng.uniform(-bound, bound);
        return m;
    };
    auto bias = [](int c) { return Matrix(1, c); };
    auto attention = [&](const std::string& prefix) {
        for (int h = 0; h < config.heads; ++h) {
            add(prefix + ".q" + std::to_string(h), weight(d, dh));
            add(prefix + ".k" + std::to_string(h), weight(d, dh));
            add(prefix + ".v" + std::to_string(h), weight(d, dh));
        }
        add(prefix + ".o", weight(d, d));
    };
    auto mlp = [&](const std::string& prefix, int in, int hidden, int out) {
        add(prefix + ".w1", weight(in, hidden));
        add(prefix + ".b1", bias(hidden));
        add(prefix + ".w2", weight(hidden, out));
        add(prefix + ".b2", bias(out));
    };

    add("tok_emb", weight(config.vocab_size(), d));
    add("pos_emb", weight(config.max_instruction_len + 1, d));
    add("type_text", weight(1, d));
    add("type_visual", weight(1, d));
    add("nav_emb", weight(1, d));
    add("stop_emb", weight(1, d));
    add("orient_proj", weight(4, d));
    attention("instr");
    mlp("fusion", 2 * d, d, d);
    add("hist.w", weight(d + 4, d));
    add("hist.b", bias(d));
    add("hist_pos", weight(config.max_steps, d));
    attention("xcand");
    attention("xcls");
    mlp("pred", d, d, 1);
    mlp("critic", d, d, 1);
    mlp("ge1", 1 + d, half, half);
    mlp("ge2", 1 + d, half, half);
    mlp("ge3", 1 + d, half, half);
}

void AgentParameters::add(const std::string& name, Matrix m) {
    index_[name] = tensors_.size();
    names_.push_back(name);
    tensors_.push_back(ad::parameter(std::move(m)));
}

const Var& AgentParameters::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return tensors_[it->second];
}

Var& AgentParameters::get(const std::string& name) {
    const auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter " + name);
    return tensors_[it->second];
}

std::size_t AgentParameters::count() const {
    std::size_t n = 0;
    for (const auto& t : tensors_) n += t.value().size();
    return n;
}

bool AgentParameters::all_finite() const {
    return std::all_of(tensors_.begin(), tensors_.end(), [](const Var& t) { return t.value().all_finite(); });
}

void AgentParameters::zero_grad() {
    for (auto& t : tensors_) t.zero_grad();
}

AgentParameters AgentParameters::clone() const {
    AgentParameters out;
    out.config_ = config_;
    for (std::size_t i = 0; i < names_.size(); ++i) out.add(names_[i], tensors_[i].value());
    return out;
}

bool AgentParameters::same_values(const AgentParameters& other) const {
    if (names_ != other.names_ || !(config_ == other.config_)) return false;
    for (std::size_t i = 0; i < tensors_.size(); ++i)
        if (!(tensors_[i].value() == other.tensors_[i].value())) return false;
    return true;
}

namespace {

json config_to_json(const AgentConfig& c) {
    return {{"d", c.dim},
            {"heads", c.heads},
            {"K_max", c.max_candidates},
            {"L_max", c.max_instruction_len},
            {"landmark_vocab", c.landmark_vocab},
            {"max_steps", c.max_steps},
            {"variant", to_string(c.variant)},
            {"pooling", memory::to_string(c.pooling)}};
}

AgentConfig config_from_json(const json& j) {
    AgentConfig c;
    c.dim = j.at("d").get<int>();
    c.heads = j.at("heads").get<int>();
    c.max_candidates = j.at("K_max").get<int>();
    c.max_instruction_len = j.at("L_max").get<int>();
    c.landmark_vocab = j.at("landmark_vocab").get<int>();
    c.max_steps = j.at("max_steps").get<int>();
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.pooling = memory::pooling_from_string(j.at("pooling").get<std::string>());
    c.validate();
    return c;
}

}  // namespace

std::string AgentParameters::to_json() const {
    json tensors = json::array();
    for (std::size_t i = 0; i < names_.size(); ++i) {
        const auto& m = tensors_[i].value();
        tensors.push_back({{"name", names_[i]}, {"shape", {m.rows, m.cols}}, {"data", m.data}});
    }
    return json{{"version", kCheckpointVersion}, {"config", config_to_json(config_)}, {"tensors", tensors}}.dump();
}

AgentParameters AgentParameters::from_json(const std::string& text) {
    try {
        const json doc = json::parse(text);
        if (doc.at("version").get<int>() != kCheckpointVersion) throw ConfigError("unsupported checkpoint version");
        const AgentConfig config = config_from_json(doc.at("config"));
        // Shapes must match a freshly initialised parameter set.
        AgentParameters out(config, 0);
        std::set<std::string> seen;
        for (const auto& t : doc.at("tensors")) {
            const auto name = t.at("name").get<std::string>();
            const auto shape = t.at("shape").get<std::vector<int>>();
            auto data = t.at("data").get<std::vector<double>>();
            auto& target = out.get(name);
            if (shape.size() != 2 || shape[0] != target.rows() || shape[1] != target.cols() ||
                data.size() != target.value().size())
                throw ConfigError("checkpoint tensor " + name + " has the wrong shape");
            target.mutable_value().data = std::move(data);
            seen.insert(name);
        }
        if (seen.size() != out.names_.size()) throw ConfigError("checkpoint is missing tensors");
        if (!out.all_finite()) throw NumericFault("checkpoint holds non-finite values");
        return out;
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("malformed checkpoint: ") + ex.what());
    }
}

void AgentParameters::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << to_json() << '\n';
}

AgentParameters AgentParameters::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

// ---------------------------------------------------------------------------

namespace {

Var two_layer(const AgentParameters& p, const std::string& prefix, const Var& x) {
    const Var hidden = ad::tanh(ad::add_row(ad::matmul(x, p.get(prefix + ".w1")), p.get(prefix + ".b1")));
    return ad::add_row(ad::matmul(hidden, p.get(prefix + ".w2")), p.get(prefix + ".b2"));
}

Matrix broadcast_mask(const Matrix& key_mask, int rows) {
    Matrix m(rows, key_mask.cols);
    for (int r = 0; r < rows; ++r) std::copy(key_mask.data.begin(), key_mask.data.end(), m.data.begin() + static_cast<std::ptrdiff_t>(r) * key_mask.cols);
    return m;
}

}  // namespace

ProjectedKeys project_keys(const AgentParameters& p, const std::string& prefix, const Var& keys) {
    ProjectedKeys out;
    for (int h = 0; h < p.config().heads; ++h) {
        const auto tag = std::to_string(h);
        out.k.push_back(ad::matmul(keys, p.get(prefix + ".k" + tag)));
        out.v.push_back(ad::matmul(keys, p.get(prefix + ".v" + tag)));
    }
    return out;
}

AttentionResult attend_projected(const AgentParameters& p, const std::string& prefix, const Var& queries,
                                 const std::vector<const ProjectedKeys*>& blocks, const Matrix& key_mask) {
    const auto& cfg = p.config();
    if (blocks.empty()) throw ConfigError("attention without keys");
    const double inv = 1.0 / std::sqrt(static_cast<double>(cfg.dim / cfg.heads));
    const Matrix mask = broadcast_mask(key_mask, queries.rows());
    AttentionResult res;
    Var joined;
    for (int h = 0; h < cfg.heads; ++h) {
        const auto hs = static_cast<std::size_t>(h);
        std::vector<Var> ks, vs;
        for (const auto* b : blocks) {
            ks.push_back(b->k[hs]);
            vs.push_back(b->v[hs]);
        }
        const Var k = ks.size() == 1 ? ks.front() : ad::concat_rows(ks);
        const Var v = vs.size() == 1 ? vs.front() : ad::concat_rows(vs);
        const Var q = ad::matmul(queries, p.get(prefix + ".q" + std::to_string(h)));
        const Var w = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), inv), mask);
        const Var head = ad::matmul(w, v);
        joined = h == 0 ? head : ad::concat_cols(joined, head);
        res.weights.push_back(w);
    }
    res.output = ad::matmul(joined, p.get(prefix + ".o"));
    return res;
}

AttentionResult attend(const AgentParameters& p, const std::string& prefix, const Var& queries, const Var& keys,
                       const Matrix& key_mask) {
    const auto projected = project_keys(p, prefix, keys);
    return attend_projected(p, prefix, queries, {&projected}, key_mask);
}

EncodedInstruction encode_instruction(const AgentParameters& p, const std::vector<int>& tokens) {
    const auto& cfg = p.config();
    const world::Vocabulary vocab{cfg.landmark_vocab};
    if (static_cast<int>(tokens.size()) > cfg.max_instruction_len) throw ConfigError("instruction longer than L_max");
    std::vector<int> ids{vocab.cls()};
    Matrix key_mask(1, static_cast<int>(tokens.size()) + 1);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= vocab.size() || tokens[i] == vocab.cls())
            throw ConfigError("out-of-vocabulary instruction token " + std::to_string(tokens[i]));
        ids.push_back(tokens[i]);
        if (tokens[i] == vocab.pad()) key_mask(0, static_cast<int>(i) + 1) = kNegInf;
    }
    const int n = static_cast<int>(ids.size());
    Var e = ad::add(ad::gather_rows(p.get("tok_emb"), ids), ad::slice_rows(p.get("pos_emb"), 0, n));
    e = ad::add_row(e, p.get("type_text"));
    const auto att = attend(p, "instr", e, e, key_mask);
    const Var tokens_out = ad::add(e, att.output);
    return {tokens_out, key_mask, project_keys(p, "xcand", tokens_out)};
}

Var enhance(const AgentParameters& p, const Matrix& memory_feats, const Matrix& plain_feats, const Matrix& orientations,
            const std::vector<char>& navigable) {
    const int d = p.config().dim;
    if (memory_feats.cols != d || plain_feats.cols != d || memory_feats.rows != plain_feats.rows ||
        orientations.rows != plain_feats.rows || orientations.cols != 4 ||
        static_cast<int>(navigable.size()) != plain_feats.rows)
        throw ConfigError("candidate feature dimensions do not match the agent");
    const Var fused = two_layer(p, "fusion", ad::concat_cols(ad::constant(memory_feats), ad::constant(plain_feats)));
    Matrix nav(plain_feats.rows, 1);
    for (int k = 0; k < nav.rows; ++k) nav(k, 0) = navigable[static_cast<std::size_t>(k)] ? 1.0 : 0.0;
    Var out = ad::add_row(fused, p.get("type_visual"));
    out = ad::add(out, ad::matmul(ad::constant(nav), p.get("nav_emb")));
    return ad::add(out, ad::matmul(ad::constant(orientations), p.get("orient_proj")));
}

EnhancedCandidates enhance_candidates(const AgentParameters& p, const world::Observation& ob,
                                      const std::vector<std::vector<double>>& memory_feats) {
    const auto k = ob.candidates.size();
    if (k < 1) throw ConfigError("observation without candidates");
    if (static_cast<int>(k) > p.config().max_candidates) throw ConfigError("more candidates than K_max");
    if (memory_feats.size() != k) throw ConfigError("one memory feature per candidate is required");
    std::vector<std::vector<double>> plain, orient;
    std::vector<char> nav;
    for (const auto& c : ob.candidates) {
        plain.push_back(c.feature);
        orient.push_back(world::orientation_encoding(c.theta, c.phi));
        nav.push_back(c.navigable ? 1 : 0);
    }
    const Var views = enhance(p, Matrix::from_rows(memory_feats), Matrix::from_rows(plain), Matrix::from_rows(orient), nav);
    const Var stop = ad::add(p.get("type_visual"), p.get("stop_emb"));
    const std::vector<Var> rows{views, stop};
    nav.push_back(1);
    return {ad::concat_rows(rows), std::move(nav)};
}

CrossModalOutput cross_modal(const AgentParameters& p, const EnhancedCandidates& cands, const EncodedInstruction& instr,
                             const HistoryState& hist, const std::optional<Var>& graph_token) {
    std::vector<const ProjectedKeys*> ctx{&instr.context};
    for (const auto& h : hist.context) ctx.push_back(&h);
    ProjectedKeys graph_keys;
    if (graph_token) {
        graph_keys = project_keys(p, "xcand", *graph_token);
        ctx.push_back(&graph_keys);
    }
    const int ctx_rows = instr.tokens.rows() + static_cast<int>(hist.size()) + (graph_token ? 1 : 0);
    Matrix ctx_mask(1, ctx_rows);
    std::copy(instr.key_mask.data.begin(), instr.key_mask.data.end(), ctx_mask.data.begin());

    Matrix cand_mask(1, cands.features.rows());
    for (int k = 0; k < cand_mask.cols; ++k)
        if (!cands.navigable[static_cast<std::size_t>(k)]) cand_mask(0, k) = kNegInf;

    const Var x_cls = instr.cls();
    CrossModalOutput out;
    out.candidates = ad::add(cands.features, attend_projected(p, "xcand", cands.features, ctx, ctx_mask).output);
    out.cls = ad::add(x_cls, attend(p, "xcls", x_cls, cands.features, cand_mask).output);
    return out;
}

Var predict_logits(const AgentParameters& p, const CrossModalOutput& fused) {
    return two_layer(p, "pred", ad::mul_row(fused.candidates, fused.cls));
}

Var critic_value(const AgentParameters& p, const CrossModalOutput& fused, const std::vector<char>& allowed) {
    std::vector<int> keep;
    for (std::size_t i = 0; i < allowed.size(); ++i)
        if (allowed[i]) keep.push_back(static_cast<int>(i));
    // The critic reads detached features: its regression never reaches the policy trunk.
    const Var joint = ad::detach(ad::mul_row(fused.candidates, fused.cls));
    return two_layer(p, "critic", ad::mean_rows(ad::gather_rows(joint, keep)));
}

HistoryState update_history(const AgentParameters& p, const HistoryState& hist, const Var& chosen, double theta,
                            double phi) {
    const int t = static_cast<int>(hist.size());
    if (t >= p.config().max_steps) throw ConfigError("history longer than max_steps");
    const Var orient = ad::constant_row(world::orientation_encoding(theta, phi));
    Var h = ad::add_row(ad::matmul(ad::concat_cols(chosen, orient), p.get("hist.w")), p.get("hist.b"));
    h = ad::add(h, ad::row(p.get("hist_pos"), t));
    HistoryState next = hist;
    next.steps.push_back(h);
    next.context.push_back(project_keys(p, "xcand", h));
    return next;
}

GraphInput masked_subgraph(const memory::EpisodicMemory& mem, const std::string& scene_id,
                           const std::vector<world::ViewpointId>& path_so_far) {
    GraphInput g;
    const auto* stored = mem.graph(scene_id);
    if (!stored) return g;
    const std::set<world::ViewpointId> masked(path_so_far.begin(), path_so_far.end());
    std::map<world::ViewpointId, int> slot;
    for (const auto& [v, m] : stored->nodes) {
        if (masked.contains(v)) continue;
        slot[v] = g.size();
        g.features.push_back(m);
    }
    for (const auto& [u, v] : stored->edges) {
        const auto a = slot.find(u);
        const auto b = slot.find(v);
        if (a != slot.end() && b != slot.end()) g.edges.emplace_back(a->second, b->second);
    }
    return g;
}

Matrix graph_tensor(const GraphInput& graph, int dim) {
    const int n = graph.size();
    Matrix g(n * n, 1 + dim);
    for (const auto& [i, j] : graph.edges) {
        g(i * n + j, 0) = 1.0;
        g(j * n + i, 0) = 1.0;
    }
    for (int i = 0; i < n; ++i) {
        const auto& m = graph.features[static_cast<std::size_t>(i)];
        if (static_cast<int>(m.size()) != dim) throw ConfigError("graph node feature has the wrong dimension");
        for (int c = 0; c < dim; ++c) g(i * n + i, 1 + c) = m[static_cast<std::size_t>(c)];
    }
    return g;
}

Var graph_encode(const AgentParameters& p, const GraphInput& graph) {
    const int d = p.config().dim;
    const int n = graph.size();
    if (n == 0) return ad::constant(Matrix(1, d));
    const Var g = ad::constant(graph_tensor(graph, d));
    // Per-channel n x n products of two position-wise MLPs, the third MLP as
    // skip. The plain sum of the products is the same for any two regular
    // graphs of equal size and degree, so the readout sums a curved
    // per-entry activation instead.
    const Var prod = ad::channel_matmul(two_layer(p, "ge1", g), two_layer(p, "ge2", g), n);
    const Var encoded = ad::concat_cols(prod, two_layer(p, "ge3", g));
    return ad::sum_rows(ad::gelu(encoded));
}

std::vector<double> action_distribution(const Var& log_probs) {
    std::vector<double> probs(static_cast<std::size_t>(log_probs.rows()));
    double top = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < log_probs.rows(); ++i) top = std::max(top, log_probs.at(i, 0));
    double total = 0.0;
    for (int i = 0; i < log_probs.rows(); ++i) {
        probs[static_cast<std::size_t>(i)] = std::exp(log_probs.at(i, 0) - top);
        total += probs[static_cast<std::size_t>(i)];
    }
    for (auto& x : probs) x /= total;
    return probs;
}

StepForward forward_step(const AgentParameters& p, const EncodedInstruction& instr, const HistoryState& hist,
                         const StepInputs& in) {
    if (!in.observation) throw ConfigError("forward_step without observation");
    StepForward out;
    out.enhanced = enhance_candidates(p, *in.observation, in.memory_feats);
    std::optional<Var> token;
    if (p.config().graph_encoding()) token = graph_encode(p, in.graph ? *in.graph : GraphInput{});
    out.fused = cross_modal(p, out.enhanced, instr, hist, token);
    out.log_probs = ad::masked_log_softmax(predict_logits(p, out.fused), out.enhanced.navigable);
    out.value = critic_value(p, out.fused, out.enhanced.navigable);
    out.probabilities = action_distribution(out.log_probs);
    if (!out.value.value().all_finite()) throw NumericFault("non-finite critic value");
    for (double x : out.probabilities)
        if (!std::isfinite(x)) throw NumericFault("non-finite action probability");
    return out;
}

int choose_action(const std::vector<double>& probabilities, ActMode mode, double u) {
    if (probabilities.empty()) throw ConfigError("empty action distribution");
    const int stop_index = static_cast<int>(probabilities.size()) - 1;
    int chosen = 0;
    if (mode == ActMode::Greedy) {
        chosen = static_cast<int>(std::max_element(probabilities.begin(), probabilities.end()) - probabilities.begin());
    } else {
        double acc = 0.0;
        chosen = -1;
        for (std::size_t i = 0; i < probabilities.size(); ++i) {
            acc += probabilities[i];
            if (u < acc && probabilities[i] > 0.0) {
                chosen = static_cast<int>(i);
                break;
            }
        }
        // Rounding can leave acc slightly below u; take the last supported entry.
        if (chosen < 0)
            for (int i = stop_index; i >= 0; --i)
                if (probabilities[static_cast<std::size_t>(i)] > 0.0) {
                    chosen = i;
                    break;
                }
    }
    return chosen == stop_index ? world::kStop : chosen;
}

bool distribution_valid(const std::vector<double>& probabilities, const std::vector<char>& allowed) {
    if (probabilities.size() != allowed.size()) return false;
    double total = 0.0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
        if (!(probabilities[i] >= 0.0)) return false;
        if (!allowed[i] && probabilities[i] != 0.0) return false;
        total += probabilities[i];
    }
    return std::abs(total - 1.0) <= 1e-9;
}

}  // namespace esceme::agent
