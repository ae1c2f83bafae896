#pragma once

#include <chrono>

#include "dfa/datasets.hpp"
#include "dfa/parallel.hpp"
#include "dfa/training.hpp"

namespace dfa {

// Runs a DFA plan either inline or on an existing pool; merging per-task
// results keyed by parameter name, so values never depend on scheduling.
inline GradientSet run_plan(const UpdatePlan& plan, ThreadPool* pool) {
    if (!pool) return run_plan_sequential(plan);
    std::vector<std::future<GradientSet>> futures;
    futures.reserve(plan.tasks.size());
    for (const auto& task : plan.tasks)
        futures.push_back(pool->submit([&task]() { return task.compute(); }));
    GradientSet gs;
    for (auto& f : futures) gs.merge(f.get());
    return gs;
}

inline GradientSet backward_for_mode_pooled(const Network& net, const ForwardTrace& tr,
                                            const Matrix& delta_ay, ThreadPool* pool) {
    if (net.mode == TrainMode::DFA && pool)
        return run_plan(build_update_plan(net, tr, delta_ay), pool);
    return backward_for_mode(net, tr, delta_ay);
}

struct EpochContext {
    OptimizerState* opt = nullptr;
    PlateauScheduler* scheduler = nullptr;  // optional
    SeededRng* shuffle_rng = nullptr;
    SeededRng* dropout_rng = nullptr;
    LossKind loss = LossKind::SoftmaxCrossEntropy;
    std::size_t batch_size = 32;  // tabular minibatches
    // char-LM epoch shape
    std::size_t batch_chunks = 16;
    std::size_t epoch_batches = 50;
    std::size_t eval_chunks = 100;
    ThreadPool* pool = nullptr;  // chunk/task parallelism when non-null
};

struct EpochMetrics {
    double train_loss = 0.0;
    double train_metric = 0.0;  // accuracy (classification) or perplexity (LM)
    double val_loss = 0.0;
    double val_metric = 0.0;
    double lr = 0.0;
    double wall_ms = 0.0;
};

namespace detail {

inline Matrix gather_rows(const Matrix& src, const std::vector<int>& rows,
                          std::size_t begin, std::size_t end) {
    Matrix out(end - begin, src.cols());
    for (std::size_t r = begin; r < end; ++r)
        for (std::size_t j = 0; j < src.cols(); ++j)
            out(r - begin, j) = src(static_cast<std::size_t>(rows[r]), j);
    return out;
}

}  // namespace detail

// Eval-mode loss and accuracy on selected rows of a feature dataset.
inline std::pair<double, double> evaluate_classifier(const Network& net, const Matrix& x,
                                                     const Matrix& y, LossKind loss,
                                                     const std::vector<int>& rows) {
    ForwardTrace tr = forward_trace(net, x);
    LossResult lr = loss_and_error_masked(loss, tr.output(), y, rows);
    return {lr.loss, accuracy_on_rows(tr.output(), y, rows)};
}

// (mean token NLL, perplexity) over the first max_chunks chunks of a split.
inline std::pair<double, double> evaluate_lm(const Network& net, const TextDataset& ds,
                                             int split, std::size_t max_chunks,
                                             ThreadPool* pool = nullptr) {
    const std::size_t total = ds.chunk_count(split);
    const std::size_t n = std::min(total, max_chunks);
    if (n == 0) throw ParameterError("evaluate_lm: split has no chunks");
    const std::size_t vocab = net.output_dim();
    auto chunk_nll = [&net, &ds, split, vocab](std::size_t c) {
        std::vector<int> input, target;
        ds.chunk(split, c, input, target);
        ForwardTrace tr = forward_trace_ids(net, input);
        Matrix y(target.size(), vocab);
        for (std::size_t t = 0; t < target.size(); ++t)
            y(t, static_cast<std::size_t>(target[t])) = 1.0;
        return loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y).loss;
    };
    double nll = 0.0;
    if (pool) {
        std::vector<std::future<double>> futs;
        futs.reserve(n);
        for (std::size_t c = 0; c < n; ++c)
            futs.push_back(pool->submit([&chunk_nll, c]() { return chunk_nll(c); }));
        for (auto& f : futs) nll += f.get();
    } else {
        for (std::size_t c = 0; c < n; ++c) nll += chunk_nll(c);
    }
    nll /= static_cast<double>(n);
    return {nll, perplexity(nll)};
}

// ---------------------------------------------------------------------------
// train_epoch — one full pass appropriate to the dataset kind
// ---------------------------------------------------------------------------

inline EpochMetrics train_epoch(Network& net, const TabularDataset& ds,
                                EpochContext& ctx) {
    if (ds.train_idx.empty()) throw ParameterError("train_epoch: empty training split");
    if (ctx.batch_size == 0) throw ParameterError("train_epoch: batch_size must be positive");
    const auto t0 = std::chrono::steady_clock::now();

    std::vector<int> order = ds.train_idx;
    detail::shuffle_indices(order, *ctx.shuffle_rng);
    auto params = net.params();
    for (std::size_t begin = 0; begin < order.size(); begin += ctx.batch_size) {
        const std::size_t end = std::min(begin + ctx.batch_size, order.size());
        Matrix x = detail::gather_rows(ds.features, order, begin, end);
        Matrix y = detail::gather_rows(ds.labels, order, begin, end);
        DropoutCtx drop{net.dropout, ctx.dropout_rng};
        ForwardTrace tr = forward_trace(net, x, drop);
        LossResult lr = loss_and_error(ctx.loss, tr.output(), y);
        GradientSet gs = backward_for_mode_pooled(net, tr, lr.delta, ctx.pool);
        optimizer_step(*ctx.opt, params, gs);
    }

    EpochMetrics m;
    std::tie(m.train_loss, m.train_metric) =
        evaluate_classifier(net, ds.features, ds.labels, ctx.loss, ds.train_idx);
    std::tie(m.val_loss, m.val_metric) =
        evaluate_classifier(net, ds.features, ds.labels, ctx.loss, ds.val_idx);
    if (ctx.scheduler) ctx.scheduler->observe(m.val_loss, *ctx.opt);
    m.lr = ctx.opt->lr;
    m.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    return m;
}

// Full-batch semi-supervised step: one update per epoch over the train mask.
inline EpochMetrics train_epoch(Network& net, const GraphDataset& ds, EpochContext& ctx) {
    if (ds.train_idx.empty()) throw ParameterError("train_epoch: empty training split");
    const auto t0 = std::chrono::steady_clock::now();

    DropoutCtx drop{net.dropout, ctx.dropout_rng};
    ForwardTrace tr = forward_trace(net, ds.features, drop);
    LossResult lr = loss_and_error_masked(ctx.loss, tr.output(), ds.labels, ds.train_idx);
    GradientSet gs = backward_for_mode_pooled(net, tr, lr.delta, ctx.pool);
    optimizer_step(*ctx.opt, net.params(), gs);

    EpochMetrics m;
    ForwardTrace ev = forward_trace(net, ds.features);
    LossResult trn = loss_and_error_masked(ctx.loss, ev.output(), ds.labels, ds.train_idx);
    m.train_loss = trn.loss;
    m.train_metric = accuracy_on_rows(ev.output(), ds.labels, ds.train_idx);
    LossResult val = loss_and_error_masked(ctx.loss, ev.output(), ds.labels, ds.val_idx);
    m.val_loss = val.loss;
    m.val_metric = accuracy_on_rows(ev.output(), ds.labels, ds.val_idx);
    if (ctx.scheduler) ctx.scheduler->observe(m.val_loss, *ctx.opt);
    m.lr = ctx.opt->lr;
    m.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    return m;
}

// Character LM epoch: epoch_batches batches of batch_chunks chunks sampled
// without replacement from the train region (reshuffled every epoch).
inline EpochMetrics train_epoch(Network& net, const TextDataset& ds, EpochContext& ctx) {
    const std::size_t n_train_chunks = ds.chunk_count(0);
    if (n_train_chunks == 0 || ctx.epoch_batches == 0 || ctx.batch_chunks == 0)
        throw ParameterError("train_epoch: no batches to run");
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t vocab = net.output_dim();

    std::vector<int> order(n_train_chunks);
    for (std::size_t i = 0; i < n_train_chunks; ++i) order[i] = static_cast<int>(i);
    detail::shuffle_indices(order, *ctx.shuffle_rng);

    auto params = net.params();
    double train_nll = 0.0;
    std::size_t batches_done = 0;
    std::size_t cursor = 0;
    for (std::size_t b = 0; b < ctx.epoch_batches && cursor + 1 <= n_train_chunks; ++b) {
        const std::size_t take = std::min(ctx.batch_chunks, n_train_chunks - cursor);
        std::vector<std::size_t> chunk_ids(take);
        std::vector<std::uint64_t> drop_seeds(take);
        for (std::size_t i = 0; i < take; ++i) {
            chunk_ids[i] = static_cast<std::size_t>(order[cursor + i]);
            drop_seeds[i] = ctx.dropout_rng ? ctx.dropout_rng->next_u64() : 0;
        }
        cursor += take;

        auto chunk_grads = [&](std::size_t i) {
            std::vector<int> input, target;
            ds.chunk(0, chunk_ids[i], input, target);
            SeededRng drop_rng(drop_seeds[i]);
            DropoutCtx drop{net.dropout, net.dropout > 0.0 ? &drop_rng : nullptr};
            ForwardTrace tr = forward_trace_ids(net, input, drop);
            Matrix y(target.size(), vocab);
            for (std::size_t t = 0; t < target.size(); ++t)
                y(t, static_cast<std::size_t>(target[t])) = 1.0;
            LossResult lr = loss_and_error(LossKind::SoftmaxCrossEntropy, tr.output(), y);
            lr.delta.scale_inplace(1.0 / static_cast<double>(take));
            GradientSet gs = backward_for_mode(net, tr, lr.delta);
            return std::make_pair(lr.loss, std::move(gs));
        };

        GradientSet batch_gs;
        double batch_nll = 0.0;
        if (ctx.pool) {
            std::vector<std::future<std::pair<double, GradientSet>>> futs;
            futs.reserve(take);
            for (std::size_t i = 0; i < take; ++i)
                futs.push_back(ctx.pool->submit([&chunk_grads, i]() { return chunk_grads(i); }));
            for (auto& f : futs) {
                auto [nll, gs] = f.get();
                batch_nll += nll;
                batch_gs.merge(std::move(gs));
            }
        } else {
            for (std::size_t i = 0; i < take; ++i) {
                auto [nll, gs] = chunk_grads(i);
                batch_nll += nll;
                batch_gs.merge(std::move(gs));
            }
        }
        optimizer_step(*ctx.opt, params, batch_gs);
        train_nll += batch_nll / static_cast<double>(take);
        ++batches_done;
    }

    EpochMetrics m;
    m.train_loss = train_nll / static_cast<double>(batches_done);
    m.train_metric = perplexity(m.train_loss);
    std::tie(m.val_loss, m.val_metric) = evaluate_lm(net, ds, 1, ctx.eval_chunks, ctx.pool);
    if (ctx.scheduler) ctx.scheduler->observe(m.val_loss, *ctx.opt);
    m.lr = ctx.opt->lr;
    m.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    return m;
}

}  // namespace dfa
