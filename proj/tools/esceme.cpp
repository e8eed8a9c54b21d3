#include "esceme/agent.hpp"
#include "esceme/dataset.hpp"
#include "esceme/errors.hpp"
#include "esceme/harness.hpp"
#include "esceme/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace esceme;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

// Writes to the file, or stdout for "-" / empty.
void emit(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-")
        std::cout << text;
    else
        write_text(path, text);
}

harness::RunConfig config_or_default(const std::string& path) {
    return path.empty() ? harness::RunConfig{} : harness::load_run_config(path);
}

std::string summary_line(const std::string& label, const metrics::Summary& s) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-8s SR %.3f  SPL %.3f  CLS %.3f  nDTW %.3f  NE %.2f  GP %.2f  (n=%zu)", label.c_str(),
                  s.mean.at("SR"), s.mean.at("SPL"), s.mean.at("CLS"), s.mean.at("nDTW"), s.mean.at("NE"),
                  s.mean.at("GP"), s.count);
    return buf;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Episodic scene memory navigation agent: data generation, training and evaluation"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "Generate a scene/episode dataset");
    std::uint64_t gen_seed = 1;
    int gen_scenes = 20, gen_eps = 10, gen_nodes = -1;
    std::string gen_out, gen_config;
    gen->add_option("--seed", gen_seed, "dataset seed");
    gen->add_option("--scenes", gen_scenes, "number of scenes")->check(CLI::PositiveNumber);
    gen->add_option("--episodes-per-scene", gen_eps, "episodes per scene")->check(CLI::PositiveNumber);
    gen->add_option("--nodes", gen_nodes, "viewpoints per scene (overrides the config)");
    gen->add_option("--config", gen_config, "JSON config file");
    gen->add_option("--out", gen_out, "output dataset JSON")->required();

    // train
    auto* tr = app.add_subcommand("train", "Train an agent on a dataset");
    std::string tr_config, tr_data, tr_out, tr_log, tr_val;
    std::optional<std::uint64_t> tr_seed;
    std::optional<int> tr_iters;
    std::string tr_variant;
    tr->add_option("--config", tr_config, "JSON config file");
    tr->add_option("--data", tr_data, "training dataset JSON")->required();
    tr->add_option("--out", tr_out, "checkpoint path")->required();
    tr->add_option("--log", tr_log, "training log (JSONL)");
    tr->add_option("--val", tr_val, "validation dataset, evaluated single-run every validate_every iterations");
    tr->add_option("--seed", tr_seed, "training and initialization seed");
    tr->add_option("--iterations", tr_iters, "override the configured iteration count");
    tr->add_option("--variant", tr_variant, "CE or CE+GE");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint under a memory protocol");
    std::string ev_ckpt, ev_data, ev_protocol = "single", ev_out, ev_summary, ev_config;
    std::optional<std::uint64_t> ev_shuffle;
    bool ev_freeze = false;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint JSON")->required();
    ev->add_option("--data", ev_data, "dataset JSON")->required();
    ev->add_option("--protocol", ev_protocol, "single|twopass|reinit|zero")
        ->check(CLI::IsMember({"single", "twopass", "reinit", "zero"}));
    ev->add_option("--shuffle-seed", ev_shuffle, "evaluate a seeded permutation of the episode order");
    ev->add_flag("--freeze-second-pass", ev_freeze, "twopass: no memory updates while scoring");
    ev->add_option("--config", ev_config, "JSON config file (eval section)");
    ev->add_option("--out", ev_out, "records JSONL (stdout when omitted)");
    ev->add_option("--summary", ev_summary, "summary CSV");

    // ablate
    auto* ab = app.add_subcommand("ablate", "Run all four protocols and paired comparisons against single-run");
    std::string ab_ckpt, ab_data, ab_dir;
    ab->add_option("--checkpoint", ab_ckpt, "checkpoint JSON")->required();
    ab->add_option("--data", ab_data, "dataset JSON")->required();
    ab->add_option("--out-dir", ab_dir, "output directory")->required();

    // curve
    auto* cu = app.add_subcommand("curve", "Smoothed metric over inference progress");
    std::string cu_records, cu_metric = "spl", cu_out;
    int cu_window = 20;
    cu->add_option("--records", cu_records, "records JSONL from eval")->required();
    cu->add_option("--metric", cu_metric, "spl|cls")->check(CLI::IsMember({"spl", "cls"}));
    cu->add_option("--window", cu_window, "moving-average window")->check(CLI::PositiveNumber);
    cu->add_option("--out", cu_out, "curve CSV (stdout when omitted)");

    // stability
    auto* st = app.add_subcommand("stability", "Mean and std of metrics over shuffled episode orders");
    std::string st_ckpt, st_data, st_protocol = "single", st_out;
    int st_orders = 5;
    std::uint64_t st_seed = 1;
    st->add_option("--checkpoint", st_ckpt, "checkpoint JSON")->required();
    st->add_option("--data", st_data, "dataset JSON")->required();
    st->add_option("--protocol", st_protocol, "single|twopass|reinit|zero")
        ->check(CLI::IsMember({"single", "twopass", "reinit", "zero"}));
    st->add_option("--orders", st_orders, "number of shuffled orders");
    st->add_option("--base-seed", st_seed, "first shuffle seed");
    st->add_option("--out", st_out, "CSV (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (gen->parsed()) {
            auto cfg = config_or_default(gen_config).world;
            if (gen_nodes > 0) cfg.n_nodes = gen_nodes;
            const auto data = world::generate_dataset(cfg, gen_seed, gen_scenes, gen_eps);
            world::save_dataset(data, gen_out);
            std::cerr << "wrote " << data.scenes.size() << " scenes, " << data.episodes.size() << " episodes to "
                      << gen_out << "\n";
        } else if (tr->parsed()) {
            auto rc = config_or_default(tr_config);
            const auto data = world::load_dataset(tr_data);
            if (tr_seed) {
                rc.train.seed = *tr_seed;
                rc.init_seed = *tr_seed;
            }
            if (tr_iters) rc.train.iterations = *tr_iters;
            if (!tr_variant.empty()) rc.agent.variant = agent::variant_from_string(tr_variant);
            rc.train.validate();
            const auto agent_cfg = harness::agent_config_for(data.config, rc.agent);
            const agent::AgentParameters init(agent_cfg, derive_seed({rc.init_seed, 0x696e6974ULL}));
            training::Validator validator;
            std::optional<world::Dataset> val;
            if (!tr_val.empty()) {
                val = world::load_dataset(tr_val);
                validator = [&](const agent::AgentParameters& p) {
                    const auto run = harness::run_eval(p, *val, harness::Protocol{});
                    return metrics::summarize(harness::metric_rows(run.records)).mean;
                };
            }
            const auto result = training::train(init, data, rc.train, validator);
            result.params.save(tr_out);
            if (!tr_log.empty()) {
                std::string log;
                for (const auto& e : result.log) log += training::to_jsonl(e) + "\n";
                write_text(tr_log, log);
            }
            std::cerr << "trained " << rc.train.iterations << " iterations, checkpoint " << tr_out << "\n";
        } else if (ev->parsed()) {
            const auto rc = config_or_default(ev_config);
            const auto params = agent::AgentParameters::load(ev_ckpt);
            const auto data = world::load_dataset(ev_data);
            harness::Protocol protocol{harness::protocol_from_string(ev_protocol), ev_shuffle,
                                       ev_freeze || rc.freeze_scored_pass};
            const auto run = harness::run_eval(params, data, protocol);
            emit(ev_out, harness::to_jsonl(run.records));
            const auto summary = metrics::summarize(harness::metric_rows(run.records));
            if (!ev_summary.empty()) write_text(ev_summary, harness::summary_csv(summary));
            std::cerr << summary_line(ev_protocol, summary) << "\n";
        } else if (ab->parsed()) {
            const auto params = agent::AgentParameters::load(ab_ckpt);
            const auto data = world::load_dataset(ab_data);
            const fs::path dir(ab_dir);
            fs::create_directories(dir);
            std::map<std::string, std::vector<harness::EvalRecord>> runs;
            std::string table = "protocol";
            for (const auto& name : metrics::MetricVector::names()) table += "," + name;
            table += "\n";
            for (const std::string name : {"single", "twopass", "reinit", "zero"}) {
                const auto run = harness::run_eval(params, data, {harness::protocol_from_string(name), std::nullopt, false});
                write_text(dir / (name + ".jsonl"), harness::to_jsonl(run.records));
                const auto s = metrics::summarize(harness::metric_rows(run.records));
                table += name;
                for (const auto& m : metrics::MetricVector::names()) table += "," + std::to_string(s.mean.at(m));
                table += "\n";
                std::cerr << summary_line(name, s) << "\n";
                runs[name] = run.records;
            }
            write_text(dir / "summary.csv", table);
            for (const std::string name : {"twopass", "reinit", "zero"})
                write_text(dir / ("compare_single_vs_" + name + ".csv"),
                           harness::paired_csv(harness::compare(runs.at("single"), runs.at(name))));
        } else if (cu->parsed()) {
            const auto records = harness::records_from_jsonl(read_text(cu_records));
            const auto curve = harness::progress_curve(records, cu_metric == "spl" ? "SPL" : "CLS", cu_window);
            emit(cu_out, harness::curve_csv(curve));
        } else if (st->parsed()) {
            const auto params = agent::AgentParameters::load(st_ckpt);
            const auto data = world::load_dataset(st_data);
            const auto rep =
                harness::stability_report(params, data, harness::protocol_from_string(st_protocol), st_orders, st_seed);
            std::string csv = "metric,mean,std,orders\n";
            for (const auto& name : metrics::MetricVector::names())
                csv += name + "," + std::to_string(rep.mean.at(name)) + "," + std::to_string(rep.stddev.at(name)) + "," +
                       std::to_string(st_orders) + "\n";
            emit(st_out, csv);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const NumericFault& e) {
        std::cerr << "numeric fault: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitOk;
}
