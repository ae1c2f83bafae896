#pragma once

// Experiment orchestration behind the CLI subcommands: build dataset/network/
// optimizer from a config, run epochs, emit artifacts (metrics.csv,
// alignment.csv, checkpoint.bin, config echo, summary.json).

#include <chrono>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>

#include "dfa/checkpoint.hpp"
#include "dfa/config.hpp"
#include "dfa/metrics_io.hpp"
#include "dfa/train_loop.hpp"

#include <json.hpp>

namespace dfa {

struct BuiltExperiment {
    ExperimentConfig cfg;
    std::optional<TabularDataset> tabular;
    std::optional<GraphDataset> graph;
    std::optional<TextDataset> text;
    Network net;
    OptimizerState opt;
    PlateauScheduler scheduler;
    bool has_scheduler = false;
    SeededRng shuffle_rng{0}, dropout_rng{0};

    bool metric_improved(double candidate, double best) const {
        // perplexity is lower-better; accuracy higher-better
        return cfg.task == TaskKind::CharLm ? candidate < best : candidate > best;
    }
    double worst_metric() const {
        return cfg.task == TaskKind::CharLm ? 1e300 : -1e300;
    }
};

inline BuiltExperiment build_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    BuiltExperiment ex;
    ex.cfg = cfg;
    SeededRng root(cfg.seed);
    SeededRng data_rng = root.fork(1);
    SeededRng init_rng = root.fork(2);
    SeededRng fb_rng = root.fork(3);
    ex.shuffle_rng = root.fork(4);
    ex.dropout_rng = root.fork(5);

    const Activation act = activation_from_string(cfg.activation);
    switch (cfg.task) {
        case TaskKind::Blobs: {
            ex.tabular = gen_blobs(data_rng, cfg.n_per_class, cfg.classes, cfg.dim,
                                   cfg.spread);
            ex.net = make_mlp(init_rng, cfg.dim, cfg.widths, cfg.classes, act);
            break;
        }
        case TaskKind::Sbm: {
            ex.graph = gen_sbm_graph(data_rng, cfg.n_per_community, cfg.communities,
                                     cfg.p_in, cfg.p_out, cfg.feature_noise,
                                     cfg.train_per_class, cfg.val_per_class);
            auto adj = std::make_shared<Matrix>(normalize_adjacency(ex.graph->adjacency));
            ex.net = make_gcn(init_rng, adj, ex.graph->features.cols(), cfg.widths,
                              ex.graph->n_classes(), act);
            break;
        }
        case TaskKind::Cora: {
            ex.graph = load_planetoid(cfg.data_dir, cfg.dataset_name);
            auto adj = std::make_shared<Matrix>(normalize_adjacency(ex.graph->adjacency));
            ex.net = make_gcn(init_rng, adj, ex.graph->features.cols(), cfg.widths,
                              ex.graph->n_classes(), act);
            break;
        }
        case TaskKind::CharLm: {
            if (cfg.corpus_path.empty()) {
                ex.text = load_text_chars_from_string(
                    gen_text_corpus(cfg.corpus_seed, cfg.corpus_bytes), cfg.chunk_length);
            } else {
                ex.text = load_text_chars(cfg.corpus_path, cfg.chunk_length);
            }
            ex.net = make_char_lm(init_rng, ex.text->vocab_size(), cfg.d_model, cfg.depth,
                                  cfg.heads, cfg.d_ff, cfg.block_norm == "pre",
                                  cfg.positional);
            break;
        }
    }
    ex.net.mode = cfg.train_mode();
    ex.net.granularity = cfg.feedback_granularity();
    ex.net.dropout = cfg.dropout;
    if (ex.net.mode == TrainMode::DFA)
        attach_feedback(ex.net, fb_rng, cfg.shared_master, cfg.scale_rule());

    ex.opt.kind = cfg.optimizer_kind();
    ex.opt.lr = cfg.lr;
    ex.opt.beta1 = cfg.beta1;
    ex.opt.beta2 = cfg.beta2;
    ex.opt.eps = cfg.eps;
    ex.opt.weight_decay = cfg.weight_decay;
    if (cfg.scheduler == "plateau") {
        ex.scheduler.factor = cfg.factor;
        ex.scheduler.patience = cfg.patience;
        ex.has_scheduler = true;
    }
    return ex;
}

namespace detail {

// Alignment over the task's full evaluation set (all labeled samples for
// graphs, every row for blobs, capped validation chunks for text).
inline std::vector<AlignmentRecord> alignment_full_eval(BuiltExperiment& ex, int epoch) {
    if (ex.tabular) {
        std::vector<int> all(ex.tabular->size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
        return measure_alignment(ex.net, ex.tabular->features, ex.tabular->labels,
                                 LossKind::SoftmaxCrossEntropy, &all, epoch);
    }
    if (ex.graph) {
        const auto labeled = ex.graph->labeled_rows();
        return measure_alignment(ex.net, ex.graph->features, ex.graph->labels,
                                 LossKind::SoftmaxCrossEntropy, &labeled, epoch);
    }
    AlignmentAccumulator acc(ex.net);
    const auto& ds = *ex.text;
    const std::size_t n = std::min(ds.chunk_count(1), ex.cfg.eval_chunks);
    for (std::size_t c = 0; c < n; ++c) {
        std::vector<int> input, target;
        ds.chunk(1, c, input, target);
        ForwardTrace tr = forward_trace_ids(ex.net, input);
        Matrix y(target.size(), ex.net.output_dim());
        for (std::size_t t = 0; t < target.size(); ++t)
            y(t, static_cast<std::size_t>(target[t])) = 1.0;
        LossResult lr = loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y);
        acc.add(tr, lr.delta);
    }
    return acc.records(epoch);
}

inline std::map<std::string, Matrix> snapshot_params(const Network& net) {
    std::map<std::string, Matrix> out;
    for (const auto& [name, p] : net.params()) out.emplace(name, *p);
    return out;
}

inline std::pair<double, double> test_metrics(BuiltExperiment& ex, Network& net,
                                              ThreadPool* pool) {
    if (ex.tabular)
        return evaluate_classifier(net, ex.tabular->features, ex.tabular->labels,
                                   LossKind::SoftmaxCrossEntropy, ex.tabular->test_idx);
    if (ex.graph)
        return evaluate_classifier(net, ex.graph->features, ex.graph->labels,
                                   LossKind::SoftmaxCrossEntropy, ex.graph->test_idx);
    return evaluate_lm(net, *ex.text, 2, ex.cfg.eval_chunks, pool);
}

}  // namespace detail

struct RunResult {
    std::vector<MetricsRow> rows;
    std::vector<AlignmentRecord> alignment;  // final measurement (DFA runs)
    double best_val_metric = 0.0;
    std::size_t best_epoch = 0;
    double test_loss = 0.0;
    double test_metric = 0.0;
    double wall_s = 0.0;
    std::string out_dir;
};

// Deterministic end-to-end run; artifacts land in out_dir. original_config
// (when run from a file) is echoed verbatim for provenance.
inline RunResult run_experiment(const ExperimentConfig& cfg,
                                const std::string& original_config = "") {
    const auto wall0 = std::chrono::steady_clock::now();
    BuiltExperiment ex = build_experiment(cfg);
    std::filesystem::create_directories(cfg.output_dir);

    std::unique_ptr<ThreadPool> pool;
    if (cfg.workers > 1) pool = std::make_unique<ThreadPool>(cfg.workers);

    EpochContext ctx;
    ctx.opt = &ex.opt;
    ctx.scheduler = ex.has_scheduler ? &ex.scheduler : nullptr;
    ctx.shuffle_rng = &ex.shuffle_rng;
    ctx.dropout_rng = &ex.dropout_rng;
    ctx.batch_size = cfg.batch_size;
    ctx.batch_chunks = cfg.batch_chunks;
    ctx.epoch_batches = cfg.epoch_batches;
    ctx.eval_chunks = cfg.eval_chunks;
    ctx.pool = pool.get();

    RunResult res;
    res.out_dir = cfg.output_dir;
    res.best_val_metric = ex.worst_metric();
    std::map<std::string, Matrix> best_params = detail::snapshot_params(ex.net);
    std::vector<AlignmentRecord> alignment_rows;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochMetrics m;
        if (ex.tabular)
            m = train_epoch(ex.net, *ex.tabular, ctx);
        else if (ex.graph)
            m = train_epoch(ex.net, *ex.graph, ctx);
        else
            m = train_epoch(ex.net, *ex.text, ctx);

        const double wall = cfg.timing ? m.wall_ms : 0.0;
        res.rows.push_back({epoch, "train", m.train_loss, m.train_metric, m.lr, wall});
        res.rows.push_back({epoch, "val", m.val_loss, m.val_metric, m.lr, 0.0});
        if (ex.metric_improved(m.val_metric, res.best_val_metric)) {
            res.best_val_metric = m.val_metric;
            res.best_epoch = epoch;
            best_params = detail::snapshot_params(ex.net);
        }
        if (ex.net.mode == TrainMode::DFA && cfg.alignment_every > 0 &&
            epoch % cfg.alignment_every == 0) {
            auto recs = detail::alignment_full_eval(ex, static_cast<int>(epoch));
            alignment_rows.insert(alignment_rows.end(), recs.begin(), recs.end());
        }
    }

    // test metrics from the best-validation parameters
    Network test_net = ex.net;
    restore_params(test_net, best_params);
    std::tie(res.test_loss, res.test_metric) = detail::test_metrics(ex, test_net, pool.get());
    res.rows.push_back(
        {cfg.epochs, "test", res.test_loss, res.test_metric, ex.opt.lr, 0.0});

    if (ex.net.mode == TrainMode::DFA) {
        res.alignment = detail::alignment_full_eval(ex, static_cast<int>(cfg.epochs));
        alignment_rows.insert(alignment_rows.end(), res.alignment.begin(),
                              res.alignment.end());
        atomic_write_file(cfg.output_dir + "/alignment.csv",
                          format_alignment_csv(alignment_rows));
    }

    atomic_write_file(cfg.output_dir + "/metrics.csv", format_metrics_csv(res.rows));
    atomic_write_file(cfg.output_dir + "/config.cfg",
                      original_config.empty() ? cfg.serialize() : original_config);

    Checkpoint ck;
    ck.config = cfg;
    ck.epochs_done = cfg.epochs;
    ck.params = detail::snapshot_params(ex.net);
    ck.feedback = ex.net.feedback;
    ck.optimizer = ex.opt;
    ck.shuffle_state = ex.shuffle_rng.state();
    ck.dropout_state = ex.dropout_rng.state();
    ck.scheduler = ex.scheduler;
    ck.best_val_metric = res.best_val_metric;
    ck.best_epoch = res.best_epoch;
    ck.best_params = std::move(best_params);
    save_checkpoint(ck, cfg.output_dir + "/checkpoint.bin");

    res.wall_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();

    nlohmann::json summary{{"task", to_string(cfg.task)},
                           {"mode", to_string(cfg.mode)},
                           {"seed", cfg.seed},
                           {"epochs", cfg.epochs},
                           {"metric_kind",
                            cfg.task == TaskKind::CharLm ? "perplexity" : "accuracy"},
                           {"best_val_metric", res.best_val_metric},
                           {"best_epoch", res.best_epoch},
                           {"test_loss", res.test_loss},
                           {"test_metric", res.test_metric},
                           {"final_lr", ex.opt.lr},
                           {"workers", cfg.workers},
                           {"wall_s", res.wall_s}};
    atomic_write_file(cfg.output_dir + "/summary.json", summary.dump(2) + "\n");
    return res;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

struct CompareReport {
    RunResult a, b;
    std::vector<std::string> violations;
    std::string table;  // side-by-side per-epoch validation metrics
};

// Joint report over two configs sharing task and seed; flags ordering
// violations of the expected bp >= dfa > shallow strength order.
inline CompareReport compare_experiments(const ExperimentConfig& cfg_a,
                                         const ExperimentConfig& cfg_b,
                                         const std::string& out_dir) {
    if (cfg_a.task != cfg_b.task)
        throw ParameterError("compare: configs disagree on task (" +
                             std::string(to_string(cfg_a.task)) + " vs " +
                             to_string(cfg_b.task) + ")");
    if (cfg_a.seed != cfg_b.seed)
        throw ParameterError("compare: configs disagree on seed");
    CompareReport rep;
    ExperimentConfig a = cfg_a, b = cfg_b;
    a.output_dir = out_dir + "/a";
    b.output_dir = out_dir + "/b";
    rep.a = run_experiment(a);
    rep.b = run_experiment(b);

    std::map<std::size_t, std::pair<double, double>> val;
    for (const auto& r : rep.a.rows)
        if (r.split == "val") val[r.epoch].first = r.metric;
    for (const auto& r : rep.b.rows)
        if (r.split == "val") val[r.epoch].second = r.metric;
    std::string csv = "epoch,a_val_metric,b_val_metric,delta\n";
    std::string table = "epoch  a_val      b_val      delta\n";
    char buf[160];
    for (const auto& [epoch, pair] : val) {
        std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g\n", epoch, pair.first,
                      pair.second, pair.first - pair.second);
        csv += buf;
        std::snprintf(buf, sizeof buf, "%-6zu %-10.5g %-10.5g %+.5g\n", epoch,
                      pair.first, pair.second, pair.first - pair.second);
        table += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "final test metric: a=%.6g (%s)  b=%.6g (%s)  delta=%+.6g\n",
                  rep.a.test_metric, to_string(cfg_a.mode), rep.b.test_metric,
                  to_string(cfg_b.mode), rep.a.test_metric - rep.b.test_metric);
    table += buf;
    rep.table = std::move(table);

    // ordering check on the final test metric
    const bool lower_better = cfg_a.task == TaskKind::CharLm;
    auto strength = [](TrainMode m) {
        return m == TrainMode::BP ? 2 : m == TrainMode::DFA ? 1 : 0;
    };
    if (strength(cfg_a.mode) != strength(cfg_b.mode)) {
        const bool a_stronger = strength(cfg_a.mode) > strength(cfg_b.mode);
        const double sa = lower_better ? -rep.a.test_metric : rep.a.test_metric;
        const double sb = lower_better ? -rep.b.test_metric : rep.b.test_metric;
        const bool a_wins = sa > sb;
        if (a_stronger != a_wins)
            rep.violations.push_back(
                std::string("ordering violation: ") + to_string(cfg_a.mode) + " (" +
                std::to_string(rep.a.test_metric) + ") vs " + to_string(cfg_b.mode) +
                " (" + std::to_string(rep.b.test_metric) + ")");
    }
    std::filesystem::create_directories(out_dir);
    atomic_write_file(out_dir + "/compare.csv", csv);
    return rep;
}

// ---------------------------------------------------------------------------
// align
// ---------------------------------------------------------------------------

// Recomputes alignment from a DFA checkpoint over the full evaluation set.
inline std::vector<AlignmentRecord> align_from_checkpoint(const std::string& ck_path,
                                                          const std::string& out_dir) {
    Checkpoint ck = load_checkpoint(ck_path);
    if (ck.config.mode != TrainMode::DFA)
        throw ModeError("align: checkpoint was not produced by a DFA run (mode " +
                        std::string(to_string(ck.config.mode)) + ")");
    BuiltExperiment ex = build_experiment(ck.config);
    restore_params(ex.net, ck.params);
    ex.net.feedback = ck.feedback;
    ex.net.validate_feedback();
    auto records = detail::alignment_full_eval(ex, static_cast<int>(ck.epochs_done));
    std::filesystem::create_directories(out_dir);
    atomic_write_file(out_dir + "/alignment.csv", format_alignment_csv(records));
    return records;
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

struct BenchReport {
    EngineReport engine;
    double sequential_measured_ms = 0.0;
    double speedup = 0.0;
};

// Times the concurrent update engine against the sequential backward on one
// representative batch of the configured task.
inline BenchReport bench_parallel_engine(const ExperimentConfig& cfg,
                                         const std::string& out_dir) {
    ExperimentConfig c = cfg;
    c.output_dir = out_dir;
    BuiltExperiment ex = build_experiment(c);
    if (ex.net.mode != TrainMode::DFA)
        throw ModeError("bench: config must select DFA mode");

    ForwardTrace tr;
    Matrix delta;
    if (ex.tabular) {
        tr = forward_trace(ex.net, ex.tabular->features);
        std::vector<int> all(ex.tabular->size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
        delta = loss_and_error_masked(LossKind::SoftmaxCrossEntropy, tr.output(),
                                      ex.tabular->labels, all)
                    .delta;
    } else if (ex.graph) {
        tr = forward_trace(ex.net, ex.graph->features);
        delta = loss_and_error_masked(LossKind::SoftmaxCrossEntropy, tr.output(),
                                      ex.graph->labels, ex.graph->train_idx)
                    .delta;
    } else {
        std::vector<int> input, target;
        ex.text->chunk(0, 0, input, target);
        tr = forward_trace_ids(ex.net, input);
        Matrix y(target.size(), ex.net.output_dim());
        for (std::size_t t = 0; t < target.size(); ++t)
            y(t, static_cast<std::size_t>(target[t])) = 1.0;
        delta = loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y).delta;
    }

    auto plan = plan_updates(ex.net, tr, delta);
    const auto t0 = std::chrono::steady_clock::now();
    GradientSet seq = run_plan_sequential(plan);
    const double seq_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();

    BenchReport rep;
    GradientSet par = execute_concurrent(plan, c.workers, &rep.engine);
    for (const auto& [name, g] : seq)
        if (max_abs_diff(par.at(name), g) > 1e-12)
            throw ContractError("bench: concurrent gradients diverged at '" + name + "'");
    rep.sequential_measured_ms = seq_ms;
    rep.speedup = rep.engine.wall_ms > 0.0 ? seq_ms / rep.engine.wall_ms : 0.0;

    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : rep.engine.tasks)
        tasks.push_back({{"name", t.name}, {"millis", t.millis}});
    nlohmann::json j{{"workers", c.workers},
                     {"tasks", tasks},
                     {"wall_ms", rep.engine.wall_ms},
                     {"critical_path_ms", rep.engine.critical_path_ms()},
                     {"sequential_baseline_ms", rep.engine.sequential_baseline_ms()},
                     {"sequential_measured_ms", rep.sequential_measured_ms},
                     {"speedup", rep.speedup}};
    std::filesystem::create_directories(out_dir);
    atomic_write_file(out_dir + "/timing.json", j.dump(2) + "\n");
    return rep;
}

}  // namespace dfa
