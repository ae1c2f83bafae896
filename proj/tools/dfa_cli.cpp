// Experiment runner CLI: run / compare / align / bench over sectioned
// key=value config files. See presets/ for ready-made experiments.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "dfa/runner.hpp"

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw dfa::ConfigError("cannot open config '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

struct Overrides {
    std::int64_t seed = -1;
    std::string out;
    std::int64_t workers = -1;

    void apply(dfa::ExperimentConfig& cfg) const {
        if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
        if (!out.empty()) cfg.output_dir = out;
        if (workers >= 0) cfg.workers = static_cast<std::size_t>(workers);
    }
};

void add_overrides(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--seed", ov.seed, "override the config seed");
    cmd->add_option("--out", ov.out, "override the output directory");
    cmd->add_option("--workers", ov.workers, "override the worker count");
}

int do_run(const std::string& config_path, const Overrides& ov) {
    const std::string text = read_file(config_path);
    dfa::ExperimentConfig cfg = dfa::parse_config(text);
    if (const char* env = std::getenv("DFA_ENGINE_SEED"))
        cfg.seed = std::stoull(env);
    ov.apply(cfg);
    cfg.validate();
    std::printf("run: task=%s mode=%s seed=%llu epochs=%zu -> %s\n",
                dfa::to_string(cfg.task), dfa::to_string(cfg.mode),
                static_cast<unsigned long long>(cfg.seed), cfg.epochs,
                cfg.output_dir.c_str());
    const bool pristine = ov.seed < 0 && ov.out.empty() && ov.workers < 0 &&
                          std::getenv("DFA_ENGINE_SEED") == nullptr;
    dfa::RunResult res = dfa::run_experiment(cfg, pristine ? text : std::string());
    for (const auto& r : res.rows)
        if (r.split == "val")
            std::printf("  epoch %3zu  val loss %.5f  val metric %.5f  lr %.3g\n",
                        r.epoch, r.loss, r.metric, r.lr);
    std::printf("best val metric %.6g (epoch %zu); test metric %.6g\n",
                res.best_val_metric, res.best_epoch, res.test_metric);
    if (!res.alignment.empty()) {
        std::printf("alignment (deepest layer %s): mean %.4f std %.4f n=%zu\n",
                    res.alignment.back().layer_id.c_str(),
                    res.alignment.back().mean_cosine, res.alignment.back().std_cosine,
                    res.alignment.back().sample_count);
    }
    std::printf("artifacts in %s\n", res.out_dir.c_str());
    return 0;
}

int do_compare(const std::string& path_a, const std::string& path_b,
               const Overrides& ov) {
    dfa::ExperimentConfig a = dfa::parse_config(read_file(path_a));
    dfa::ExperimentConfig b = dfa::parse_config(read_file(path_b));
    if (ov.seed >= 0) {
        a.seed = static_cast<std::uint64_t>(ov.seed);
        b.seed = a.seed;
    }
    if (ov.workers >= 0) {
        a.workers = static_cast<std::size_t>(ov.workers);
        b.workers = a.workers;
    }
    const std::string out = ov.out.empty() ? "runs/compare" : ov.out;
    dfa::CompareReport rep = dfa::compare_experiments(a, b, out);
    std::fputs(rep.table.c_str(), stdout);
    for (const auto& v : rep.violations) std::printf("FLAG: %s\n", v.c_str());
    if (rep.violations.empty()) std::printf("ordering: as expected\n");
    std::printf("report in %s/compare.csv\n", out.c_str());
    return 0;
}

int do_align(const std::string& checkpoint, const Overrides& ov) {
    const std::string out = ov.out.empty() ? "runs/align" : ov.out;
    auto records = dfa::align_from_checkpoint(checkpoint, out);
    for (const auto& r : records)
        std::printf("  %-16s mean %.4f  std %.4f  n=%zu%s\n", r.layer_id.c_str(),
                    r.mean_cosine, r.std_cosine, r.sample_count,
                    &r == &records.back() ? "  (deepest)" : "");
    std::printf("alignment.csv in %s\n", out.c_str());
    return 0;
}

int do_bench(const std::string& config_path, const Overrides& ov) {
    dfa::ExperimentConfig cfg = dfa::parse_config(read_file(config_path));
    ov.apply(cfg);
    const std::string out = ov.out.empty() ? "runs/bench" : ov.out;
    dfa::BenchReport rep = dfa::bench_parallel_engine(cfg, out);
    std::printf("workers %zu: wall %.2f ms, sequential %.2f ms, speedup %.2fx\n",
                rep.engine.workers, rep.engine.wall_ms, rep.sequential_measured_ms,
                rep.speedup);
    for (const auto& t : rep.engine.tasks)
        std::printf("  task %-16s %.3f ms\n", t.name.c_str(), t.millis);
    std::printf("timing.json in %s\n", out.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"feedback-alignment training engine"};
    app.require_subcommand(1);

    std::string config_path, config_b, checkpoint;
    Overrides ov;

    auto* run = app.add_subcommand("run", "train a network from a config file");
    run->add_option("--config", config_path, "experiment config")->required();
    add_overrides(run, ov);

    auto* cmp = app.add_subcommand("compare", "run two configs side by side");
    cmp->add_option("config_a", config_path, "first config")->required();
    cmp->add_option("config_b", config_b, "second config")->required();
    add_overrides(cmp, ov);

    auto* aln = app.add_subcommand("align", "measure alignment from a DFA checkpoint");
    aln->add_option("--checkpoint", checkpoint, "checkpoint.bin from a DFA run")
        ->required();
    add_overrides(aln, ov);

    auto* ben = app.add_subcommand("bench", "time the concurrent update engine");
    ben->add_option("--config", config_path, "experiment config (DFA mode)")->required();
    add_overrides(ben, ov);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return do_run(config_path, ov);
        if (cmp->parsed()) return do_compare(config_path, config_b, ov);
        if (aln->parsed()) return do_align(checkpoint, ov);
        if (ben->parsed()) return do_bench(config_path, ov);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
