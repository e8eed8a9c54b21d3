// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any FAIL.
#include "../support/fixtures.hpp"
#include "../support/gradcheck.hpp"

#include "esceme/agent.hpp"
#include "esceme/dataset.hpp"
#include "esceme/harness.hpp"
#include "esceme/memory.hpp"
#include "esceme/metrics.hpp"
#include "esceme/rng.hpp"
#include "esceme/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace esceme;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kWalkthroughSeconds = 1.0;
constexpr double kGradEps = 1e-5;
constexpr double kGradRelTol = 1e-4;
constexpr double kGradSeconds = 30.0;
constexpr double kDtwTol = 1e-9;
constexpr double kHandTol = 1e-9;
constexpr double kMetricSeconds = 30.0;
constexpr double kSeparation = 1e-6;
constexpr double kWlSeconds = 5.0;
constexpr double kMemoryGainPoints = 2.0;
constexpr double kTwoPassSlackPoints = 0.5;
constexpr double kPatternSeconds = 30.0 * 60.0;
constexpr double kOrderSigmaPoints = 1.5;
constexpr int kCurveSeedsNeeded = 4;
constexpr double kProbTol = 1e-9;

// Desk-scale experiment shared by criteria 5, 6, 7 and 9.
constexpr int kTrainScenes = 40;
constexpr int kTrainEpisodesPerScene = 10;
constexpr int kTestScenes = 120;
constexpr int kTestEpisodesPerScene = 10;
constexpr int kIterations = 3000;
constexpr int kSeeds = 5;
constexpr int kOrders = 5;
constexpr int kCurveWindow = 50;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
    std::printf("%s criterion %d: %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
    std::fflush(stdout);
    if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

// ---------------------------------------------------------------------------

void criterion_walkthrough() {
    const auto t0 = Clock::now();
    const auto w = testing::walkthrough();
    const world::ObservationModel model(world::WorldConfig{});
    memory::EpisodicMemory mem(32);
    for (auto v : w.first) mem.update("walkthrough", model.observe(w.scene, v, 0.0, 1));
    std::set<world::ViewpointId> nodes;
    for (const auto& [id, f] : mem.graph("walkthrough")->nodes) nodes.insert(id);
    const bool first_ok = nodes == std::set<world::ViewpointId>{0, 1, 2, 3, 4} &&
                          mem.graph("walkthrough")->edges == testing::edge_set({{0, 1}, {1, 2}, {2, 3}, {3, 4}});
    mem.update("walkthrough", model.observe(w.scene, w.second[0], 0.0, 2));
    mem.update("walkthrough", model.observe(w.scene, w.second[1], 0.0, 2));
    const auto before = mem;
    const bool changed = mem.update("walkthrough", model.observe(w.scene, w.second[2], 0.0, 2));
    const bool revisit_ok = !changed && mem == before;
    const double secs = seconds_since(t0);
    report(1, first_ok && revisit_ok && secs < kWalkthroughSeconds,
           fmt("episode-1 graph exact=%s, revisit untouched=%s, %.3fs", first_ok ? "yes" : "no", revisit_ok ? "yes" : "no", secs));
}

void criterion_gradient() {
    const auto t0 = Clock::now();
    auto s = testing::grad_setup(3);
    const auto steps = s.teacher.front().steps.size();
    const auto errors = testing::gradient_errors(s, kGradEps);
    double worst = 0.0;
    std::string worst_name;
    for (const auto& [name, err] : errors)
        if (err >= worst) {
            worst = err;
            worst_name = name;
        }
    const double secs = seconds_since(t0);
    report(2, steps == 3 && worst <= kGradRelTol && secs < kGradSeconds,
           fmt("%zu groups, worst relative error %.2e (%s), %zu-step episode, %.1fs", errors.size(), worst, worst_name.c_str(),
               steps, secs));
}

double dtw_enumerate(const std::vector<world::Vec2>& a, const std::vector<world::Vec2>& b) {
    double best = 1e300;
    std::function<void(std::size_t, std::size_t, double)> walk = [&](std::size_t i, std::size_t j, double acc) {
        acc += world::distance(a[i], b[j]);
        if (i + 1 == a.size() && j + 1 == b.size()) {
            best = std::min(best, acc);
            return;
        }
        if (i + 1 < a.size()) walk(i + 1, j, acc);
        if (j + 1 < b.size()) walk(i, j + 1, acc);
        if (i + 1 < a.size() && j + 1 < b.size()) walk(i + 1, j + 1, acc);
    };
    walk(0, 0, 0.0);
    return best;
}

void criterion_metrics() {
    const auto t0 = Clock::now();
    Rng rng(2024);
    int dtw_bad = 0;
    double dtw_worst = 0.0;
    for (int i = 0; i < 200; ++i) {
        const auto sc = world::generate_scene(rng.next_u64(), 10, 3.0);
        auto walk = [&](std::size_t len) {
            std::vector<world::ViewpointId> p{static_cast<world::ViewpointId>(rng.below(sc.size()))};
            while (p.size() < len) {
                const auto& nb = sc.node(p.back()).neighbors;
                p.push_back(nb[rng.below(nb.size())].id);
            }
            return p;
        };
        const auto p = walk(1 + rng.below(5)), r = walk(1 + rng.below(5));
        std::vector<world::Vec2> pa, ra;
        for (auto v : p) pa.push_back(sc.node(v).position);
        for (auto v : r) ra.push_back(sc.node(v).position);
        const double brute = dtw_enumerate(pa, ra);
        const double dp = metrics::dtw(pa, ra);
        const double nd = metrics::ndtw(sc, p, r);
        const double err = std::max(std::abs(dp - brute), std::abs(nd - std::exp(-brute / (3.0 * static_cast<double>(r.size())))));
        dtw_worst = std::max(dtw_worst, err);
        if (err > kDtwTol) ++dtw_bad;
    }

    // Line 0-1-2-3 with 3 m edges and a 4 m spur 1-4; a 3-4-5 right triangle.
    using P = std::vector<world::ViewpointId>;
    const auto line = testing::make_scene("line", {{0, 0}, {3, 0}, {6, 0}, {9, 0}, {3, 4}}, {0, 1, 2, 3, 4},
                                          {{0, 1}, {1, 2}, {2, 3}, {1, 4}});
    const auto tri = testing::make_scene("tri", {{0, 0}, {3, 0}, {3, 4}}, {0, 1, 2}, {{0, 1}, {1, 2}, {0, 2}});
    struct Case {
        const world::Scene* scene;
        P path, ref;
        double ne, sr, spl, gp;
    };
    const std::vector<Case> cases{
        {&line, {0, 1, 2}, {0, 1, 2}, 0.0, 1.0, 1.0, 6.0},
        {&line, {0}, {0, 1, 2}, 6.0, 0.0, 0.0, 0.0},
        {&line, {0, 1}, {0, 1, 2}, 3.0, 0.0, 0.0, 3.0},
        {&line, {0, 1, 2, 3}, {0, 1, 2}, 3.0, 0.0, 0.0, 3.0},
        {&line, {0, 1, 4, 1, 2}, {0, 1, 2}, 0.0, 1.0, 6.0 / 14.0, 6.0},
        {&line, {1, 4}, {1, 2}, 7.0, 0.0, 0.0, -4.0},
        {&line, {0, 1, 2, 3, 2, 1}, {0, 1, 2, 3}, 6.0, 0.0, 0.0, 3.0},
        {&tri, {0, 2, 1}, {0, 1}, 0.0, 1.0, 3.0 / 9.0, 3.0},
        {&tri, {0, 2}, {0, 1}, 4.0, 0.0, 0.0, -1.0},
        {&tri, {1, 2, 0, 1}, {1, 2}, 4.0, 0.0, 0.0, 0.0},
    };
    int hand_bad = 0;
    for (const auto& c : cases) {
        const auto goal = c.ref.back();
        const auto m = metrics::evaluate(*c.scene, c.path, c.ref);
        const bool ok = std::abs(m.ne - c.ne) <= kHandTol && m.sr == c.sr && std::abs(m.spl - c.spl) <= kHandTol &&
                        std::abs(m.gp - c.gp) <= kHandTol && metrics::sr(*c.scene, c.path, goal) == c.sr;
        if (!ok) ++hand_bad;
    }
    const double secs = seconds_since(t0);
    report(3, dtw_bad == 0 && hand_bad == 0 && secs < kMetricSeconds,
           fmt("nDTW DP vs enumeration worst |diff| %.1e on 200 pairs, %d/%zu hand cases match, %.2fs", dtw_worst,
               static_cast<int>(cases.size()) - hand_bad, cases.size(), secs));
}

void criterion_wl() {
    const auto t0 = Clock::now();
    agent::AgentConfig cfg;
    cfg.variant = agent::Variant::CandidateEnhancingWithGraph;
    double smallest = 1e300;
    Rng rng(77);
    for (int draw = 0; draw < 20; ++draw) {
        const agent::AgentParameters p(cfg, 1000 + static_cast<std::uint64_t>(draw));
        std::vector<double> feature(static_cast<std::size_t>(cfg.dim));
        for (auto& x : feature) x = rng.uniform(-1, 1);
        agent::GraphInput hexagon, triangles;
        hexagon.features.assign(6, feature);
        triangles.features.assign(6, feature);
        for (int i = 0; i < 6; ++i) hexagon.edges.emplace_back(i, (i + 1) % 6);
        for (int base : {0, 3})
            for (int i = 0; i < 3; ++i) triangles.edges.emplace_back(base + i, base + (i + 1) % 3);
        const auto a = agent::graph_encode(p, hexagon).value(), b = agent::graph_encode(p, triangles).value();
        double sq = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) sq += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
        smallest = std::min(smallest, std::sqrt(sq));
    }
    const double secs = seconds_since(t0);
    report(4, smallest > kSeparation && secs < kWlSeconds,
           fmt("smallest ||enc(C6) - enc(2xC3)|| over 20 draws %.3e, %.2fs", smallest, secs));
}

// ---------------------------------------------------------------------------

struct SeedResult {
    std::map<std::string, double> spl;  // protocol -> mean SPL (points)
    double single_sigma = 0.0;
    double zero_sigma = 0.0;
    double curve_first = 0.0;
    double curve_last = 0.0;
    std::size_t decisions = 0;
    std::size_t violations = 0;
    std::size_t range_violations = 0;
};

struct Pattern {
    std::vector<SeedResult> seeds;
    std::size_t test_episodes = 0;
    std::size_t test_scenes = 0;
    bool unseen = false;
    double seconds = 0.0;
    std::string first_checkpoint;
};

world::WorldConfig desk_world() { return world::WorldConfig{}; }

Pattern run_pattern(const fs::path& scratch) {
    const auto t0 = Clock::now();
    Pattern out;
    const auto wc = desk_world();
    const auto train_data = world::generate_dataset(wc, 101, kTrainScenes, kTrainEpisodesPerScene);
    const auto test_data = world::generate_dataset(wc, 202, kTestScenes, kTestEpisodesPerScene);
    std::set<std::string> train_ids;
    for (const auto& s : train_data.scenes) train_ids.insert(s.id);
    out.unseen = true;
    for (const auto& s : test_data.scenes) out.unseen = out.unseen && !train_ids.contains(s.id);
    out.test_episodes = test_data.episodes.size();
    out.test_scenes = test_data.scenes.size();

    const auto acfg = harness::agent_config_for(wc, agent::AgentConfig{});
    for (int seed = 1; seed <= kSeeds; ++seed) {
        training::TrainConfig tc;
        tc.iterations = kIterations;
        tc.seed = static_cast<std::uint64_t>(seed);
        const agent::AgentParameters init(acfg, derive_seed({static_cast<std::uint64_t>(seed), 0x696e6974}));
        const auto trained = training::train(init, train_data, tc).params;
        if (seed == 1) {
            out.first_checkpoint = (scratch / "seed1.json").string();
            trained.save(out.first_checkpoint);
        }
        SeedResult r;
        for (auto kind : {harness::ProtocolKind::SingleRun, harness::ProtocolKind::TwoPass,
                          harness::ProtocolKind::ReinitEveryEpisode, harness::ProtocolKind::ZeroMemoryBaseline}) {
            const auto run = harness::run_eval(trained, test_data, {kind, std::nullopt, false});
            const auto summary = metrics::summarize(harness::metric_rows(run.records));
            r.spl[harness::to_string(kind)] = 100.0 * summary.mean.at("SPL");
            r.decisions += run.decisions;
            r.violations += run.distribution_violations;
            r.range_violations += run.range_violations;
            if (kind == harness::ProtocolKind::SingleRun) {
                const auto curve = harness::progress_curve(run.records, "SPL", kCurveWindow);
                r.curve_first = harness::curve_mean_between(curve, 0.0, 0.2);
                r.curve_last = harness::curve_mean_between(curve, 0.8, 1.0);
            }
        }
        r.single_sigma = 100.0 * harness::stability_report(trained, test_data, harness::ProtocolKind::SingleRun, kOrders).stddev.at("SPL");
        r.zero_sigma = 100.0 * harness::stability_report(trained, test_data, harness::ProtocolKind::ZeroMemoryBaseline, kOrders).stddev.at("SPL");
        std::printf("  seed %d: SPL single %.2f twopass %.2f reinit %.2f zero %.2f | sigma single %.2f zero %.2f | curve %.3f -> %.3f\n",
                    seed, r.spl["single"], r.spl["twopass"], r.spl["reinit"], r.spl["zero"], r.single_sigma, r.zero_sigma,
                    r.curve_first, r.curve_last);
        std::fflush(stdout);
        out.seeds.push_back(std::move(r));
    }
    out.seconds = seconds_since(t0);
    return out;
}

double mean_of(const Pattern& p, const std::function<double(const SeedResult&)>& f) {
    double s = 0.0;
    for (const auto& r : p.seeds) s += f(r);
    return s / static_cast<double>(p.seeds.size());
}

void criteria_pattern(const Pattern& p) {
    const double single = mean_of(p, [](const auto& r) { return r.spl.at("single"); });
    const double zero = mean_of(p, [](const auto& r) { return r.spl.at("zero"); });
    const double reinit = mean_of(p, [](const auto& r) { return r.spl.at("reinit"); });
    const double twopass = mean_of(p, [](const auto& r) { return r.spl.at("twopass"); });
    const bool split_ok = p.unseen && p.test_scenes >= 20 && p.test_episodes >= 200;
    const bool a = single - zero >= kMemoryGainPoints, b = reinit <= single, c = twopass >= single - kTwoPassSlackPoints;
    report(5, split_ok && a && b && c && p.seconds <= kPatternSeconds,
           fmt("mean SPL over %zu seeds on %zu unseen scenes / %zu episodes: single %.2f, zero %.2f (gain %+.2f), reinit %.2f, "
               "twopass %.2f; %.0fs",
               p.seeds.size(), p.test_scenes, p.test_episodes, single, zero, single - zero, reinit, twopass, p.seconds));

    double worst_sigma = 0.0, worst_zero = 0.0;
    for (const auto& r : p.seeds) {
        worst_sigma = std::max(worst_sigma, r.single_sigma);
        worst_zero = std::max(worst_zero, r.zero_sigma);
    }
    report(6, worst_sigma <= kOrderSigmaPoints && worst_zero == 0.0,
           fmt("largest single-run SPL sigma over %d orders %.2f points (mean %.2f), zero-memory sigma %.1f", kOrders, worst_sigma,
               mean_of(p, [](const auto& r) { return r.single_sigma; }), worst_zero));

    int rising = 0;
    for (const auto& r : p.seeds) rising += r.curve_last > r.curve_first ? 1 : 0;
    report(7, rising >= kCurveSeedsNeeded,
           fmt("final-quintile smoothed SPL above first quintile in %d/%zu seeds (window %d)", rising, p.seeds.size(), kCurveWindow));
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

void criterion_determinism(const fs::path& scratch, const std::string& checkpoint) {
    const std::string cli = ESCEME_CLI_PATH;
    const auto data = (scratch / "eval_data.json").string();
    const auto a = (scratch / "eval_a.jsonl").string(), b = (scratch / "eval_b.jsonl").string();
    const auto quiet = " 2>/dev/null";
    int rc = std::system((cli + " gen --seed 303 --scenes 4 --episodes-per-scene 8 --out " + data + quiet).c_str());
    for (const auto& out : {a, b})
        rc |= std::system((cli + " eval --checkpoint " + checkpoint + " --data " + data + " --protocol single --shuffle-seed 5 --out " +
                           out + quiet).c_str());
    const auto ta = read_file(a), tb = read_file(b);
    const auto ha = fnv1a(ta), hb = fnv1a(tb);
    report(8, rc == 0 && !ta.empty() && ha == hb,
           fmt("two eval runs: %zu bytes, hashes %016llx / %016llx", ta.size(), static_cast<unsigned long long>(ha),
               static_cast<unsigned long long>(hb)));
}

void criterion_distributions(const Pattern& p) {
    std::size_t decisions = 0, violations = 0, ranges = 0;
    for (const auto& r : p.seeds) {
        decisions += r.decisions;
        violations += r.violations;
        ranges += r.range_violations;
    }
    report(9, decisions > 0 && violations == 0,
           fmt("%zu decisions checked (sum 1 within %.0e, non-negative, masked zero): %zu violations; metric range violations %zu",
               decisions, kProbTol, violations, ranges));
}

}  // namespace

int main() {
    const auto scratch = fs::temp_directory_path() / "esceme_acceptance";
    fs::create_directories(scratch);
    criterion_walkthrough();
    criterion_gradient();
    criterion_metrics();
    criterion_wl();
    const auto pattern = run_pattern(scratch);
    criteria_pattern(pattern);
    criterion_determinism(scratch, pattern.first_checkpoint);
    criterion_distributions(pattern);
    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
