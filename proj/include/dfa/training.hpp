#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dfa/network.hpp"

namespace dfa {

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

enum class LossKind { Mse, SoftmaxCrossEntropy };

struct LossResult {
    double loss = 0.0;
    Matrix delta;  // dL/d(logits), batch reduction folded in
};

inline LossResult loss_and_error(LossKind kind, const Matrix& yhat, const Matrix& y) {
    if (!yhat.same_shape(y))
        throw ShapeError("loss_and_error: predictions " + yhat.shape() +
                         " vs targets " + y.shape());
    const double inv_batch = 1.0 / static_cast<double>(yhat.rows());
    LossResult r;
    if (kind == LossKind::Mse) {
        r.delta = yhat;
        r.delta.sub_inplace(y);
        double acc = 0.0;
        for (double d : r.delta.flat()) acc += d * d;
        r.loss = acc * inv_batch;
        r.delta.scale_inplace(2.0 * inv_batch);
    } else {
        Matrix p = softmax_rows(yhat);
        double nll = 0.0;
        for (std::size_t i = 0; i < y.rows(); ++i)
            for (std::size_t j = 0; j < y.cols(); ++j)
                if (y(i, j) != 0.0)
                    nll -= y(i, j) * std::log(std::max(p(i, j), 1e-300));
        r.loss = nll * inv_batch;
        r.delta = p;
        r.delta.sub_inplace(y);
        r.delta.scale_inplace(inv_batch);
    }
    return r;
}

// Loss restricted to selected rows (semi-supervised node classification).
// The returned delta has the full shape with zeros outside the mask.
inline LossResult loss_and_error_masked(LossKind kind, const Matrix& yhat,
                                        const Matrix& y, const std::vector<int>& rows) {
    if (rows.empty()) throw ParameterError("loss_and_error_masked: empty mask");
    Matrix yh(rows.size(), yhat.cols()), ym(rows.size(), y.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t j = 0; j < yhat.cols(); ++j) {
            yh(r, j) = yhat(static_cast<std::size_t>(rows[r]), j);
            ym(r, j) = y(static_cast<std::size_t>(rows[r]), j);
        }
    LossResult sub = loss_and_error(kind, yh, ym);
    LossResult r;
    r.loss = sub.loss;
    r.delta = Matrix(yhat.rows(), yhat.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < yhat.cols(); ++j)
            r.delta(static_cast<std::size_t>(rows[i]), j) = sub.delta(i, j);
    return r;
}

inline double perplexity(double mean_token_nll) { return std::exp(mean_token_nll); }

// ---------------------------------------------------------------------------
// Region backwards (shared by BP, DFA, shallow, and the parallel engine)
// ---------------------------------------------------------------------------

// BP deltas at attachment boundaries, recorded for alignment measurement.
struct BoundaryCapture {
    std::map<std::string, Matrix> deltas;
};

namespace detail {

inline const Matrix& layer_input(const Network& net, const ForwardTrace& tr,
                                 std::size_t i) {
    return i == 0 ? tr.input : tr.layer_output(i - 1);
}

inline void store_block_grads(const std::string& id, BlockGrads&& g, GradientSet& gs) {
    for (std::size_t h = 0; h < g.attn.w_q.size(); ++h) {
        const std::string hs = std::to_string(h);
        gs.add_to(id + ".attn.wq" + hs, g.attn.w_q[h]);
        gs.add_to(id + ".attn.wk" + hs, g.attn.w_k[h]);
        gs.add_to(id + ".attn.wv" + hs, g.attn.w_v[h]);
    }
    gs.add_to(id + ".attn.wout", g.attn.w_out);
    gs.add_to(id + ".ffn1.weight", g.ffn1_w);
    gs.add_to(id + ".ffn1.bias", g.ffn1_b);
    gs.add_to(id + ".ffn2.weight", g.ffn2_w);
    gs.add_to(id + ".ffn2.bias", g.ffn2_b);
    gs.add_to(id + ".ln1.gain", g.ln1_gain);
    gs.add_to(id + ".ln1.bias", g.ln1_bias);
    gs.add_to(id + ".ln2.gain", g.ln2_gain);
    gs.add_to(id + ".ln2.bias", g.ln2_bias);
}

inline void store_attn_sublayer_grads(const std::string& id, BlockGrads&& g,
                                      GradientSet& gs) {
    for (std::size_t h = 0; h < g.attn.w_q.size(); ++h) {
        const std::string hs = std::to_string(h);
        gs.add_to(id + ".attn.wq" + hs, g.attn.w_q[h]);
        gs.add_to(id + ".attn.wk" + hs, g.attn.w_k[h]);
        gs.add_to(id + ".attn.wv" + hs, g.attn.w_v[h]);
    }
    gs.add_to(id + ".attn.wout", g.attn.w_out);
    gs.add_to(id + ".ln1.gain", g.ln1_gain);
    gs.add_to(id + ".ln1.bias", g.ln1_bias);
}

inline void store_ffn_sublayer_grads(const std::string& id, BlockGrads&& g,
                                     GradientSet& gs) {
    gs.add_to(id + ".ffn1.weight", g.ffn1_w);
    gs.add_to(id + ".ffn1.bias", g.ffn1_b);
    gs.add_to(id + ".ffn2.weight", g.ffn2_w);
    gs.add_to(id + ".ffn2.bias", g.ffn2_b);
    gs.add_to(id + ".ln2.gain", g.ln2_gain);
    gs.add_to(id + ".ln2.bias", g.ln2_bias);
}

// Hidden dense/graph layer: delta_out is the gradient at the layer's output
// as consumed downstream (post-activation, post-dropout).
inline std::optional<Matrix> feature_region_backward(const Network& net, std::size_t i,
                                                     const ForwardTrace& tr,
                                                     const Matrix& delta_out,
                                                     GradientSet& gs,
                                                     bool want_input_grad) {
    const auto& node = net.layers[i];
    const Matrix& input = layer_input(net, tr, i);
    if (node.is_dense()) {
        const auto& l = std::get<DenseLayer>(node.impl);
        const auto& t = std::get<DenseTrace>(tr.layers[i]);
        Matrix delta_h = t.has_mask ? hadamard(delta_out, t.mask) : delta_out;
        Matrix delta_a = hadamard(delta_h, activate_deriv(l.act, t.r.a));
        gs.add_to(node.id + ".weight", matmul_tn(delta_a, input));
        gs.add_to(node.id + ".bias", col_sum(delta_a));
        if (!want_input_grad) return std::nullopt;
        return matmul(delta_a, l.weight);
    }
    if (node.is_graph()) {
        const auto& l = std::get<GraphConvLayer>(node.impl);
        const auto& t = std::get<GraphTrace>(tr.layers[i]);
        Matrix delta_h = t.has_mask ? hadamard(delta_out, t.mask) : delta_out;
        Matrix delta_a = hadamard(delta_h, activate_deriv(l.act, t.r.a));
        gs.add_to(node.id + ".weight", matmul_tn(t.r.propagated, delta_a));
        if (!want_input_grad) return std::nullopt;
        return matmul(*l.adj_norm, matmul_nt(delta_a, l.weight));
    }
    throw ContractError("feature_region_backward: layer " + node.id +
                        " is not dense or graph");
}

// Topmost region: trained from the true loss derivative in every mode.
// Covers the top layer and, for token networks, the final layer norm.
inline std::optional<Matrix> head_region_backward(const Network& net,
                                                  const ForwardTrace& tr,
                                                  const Matrix& delta_ay,
                                                  GradientSet& gs,
                                                  bool want_input_grad) {
    if (tr.layers.size() != net.layers.size())
        throw ContractError("head_region_backward: trace depth " +
                            std::to_string(tr.layers.size()) + " != network depth " +
                            std::to_string(net.layers.size()));
    const std::size_t top = net.layers.size() - 1;
    const auto& node = net.layers[top];
    if (node.is_dense()) {
        const auto& l = std::get<DenseLayer>(node.impl);
        const auto& t = std::get<DenseTrace>(tr.layers[top]);
        Matrix delta_a = hadamard(delta_ay, activate_deriv(l.act, t.r.a));
        const Matrix& head_in = tr.has_final_norm ? tr.final_norm_cache.out
                                                  : detail::layer_input(net, tr, top);
        gs.add_to(node.id + ".weight", matmul_tn(delta_a, head_in));
        gs.add_to(node.id + ".bias", col_sum(delta_a));
        if (!want_input_grad && !tr.has_final_norm) return std::nullopt;
        Matrix delta_in = matmul(delta_a, l.weight);
        if (tr.has_final_norm) {
            Matrix ggain, gbias;
            delta_in = layernorm_backward(net.final_norm, tr.final_norm_cache, delta_in,
                                          ggain, gbias);
            gs.add_to("final_norm.gain", ggain);
            gs.add_to("final_norm.bias", gbias);
        }
        if (!want_input_grad) return std::nullopt;
        return delta_in;
    }
    if (node.is_graph()) {
        const auto& l = std::get<GraphConvLayer>(node.impl);
        const auto& t = std::get<GraphTrace>(tr.layers[top]);
        Matrix delta_a = hadamard(delta_ay, activate_deriv(l.act, t.r.a));
        gs.add_to(node.id + ".weight", matmul_tn(t.r.propagated, delta_a));
        if (!want_input_grad) return std::nullopt;
        return matmul(*l.adj_norm, matmul_nt(delta_a, l.weight));
    }
    throw ContractError("head_region_backward: unsupported top layer kind");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Backward passes
// ---------------------------------------------------------------------------

// Exact chain-rule gradients. Returns dL/d(parameter); the optimizer applies
// the descent sign.
inline GradientSet backward_bp(const Network& net, const ForwardTrace& tr,
                               const Matrix& delta_ay,
                               BoundaryCapture* capture = nullptr) {
    if (tr.layers.size() != net.layers.size())
        throw ContractError("backward_bp: trace does not match network depth");
    GradientSet gs;
    const std::size_t depth = net.layers.size();
    std::optional<Matrix> delta =
        detail::head_region_backward(net, tr, delta_ay, gs, depth > 1);
    if (depth == 1) return gs;

    const bool micro = net.granularity == FeedbackGranularity::Micro;
    for (std::size_t idx = depth - 1; idx-- > 0;) {
        const auto& node = net.layers[idx];
        const bool want = idx > 0;
        if (node.is_embedding()) {
            const auto& e = std::get<EmbeddingLayer>(node.impl);
            Matrix grad_table;
            embedding_backward(e, tr.input_ids, *delta, grad_table);
            gs.add_to(node.id + ".table", grad_table);
            break;
        }
        if (node.is_block()) {
            if (capture) {
                // BP's signal at this block's output boundary
                capture->deltas[micro ? node.id + ".ffn" : node.id] = *delta;
            }
            const auto& b = std::get<TransformerBlock>(node.impl);
            const auto& t = std::get<BlockTrace>(tr.layers[idx]);
            BlockGrads g;
            Matrix delta_u;
            auto next = transformer_block_backward(b, t.c, *delta, g, want,
                                                   (capture && micro) ? &delta_u : nullptr);
            if (capture && micro) capture->deltas[node.id + ".attn"] = std::move(delta_u);
            detail::store_block_grads(node.id, std::move(g), gs);
            delta = std::move(next);
        } else {
            if (capture) capture->deltas[node.id] = *delta;
            delta = detail::feature_region_backward(net, idx, tr, *delta, gs, want);
        }
    }
    return gs;
}

// Only the topmost region is trained; everything below stays frozen.
inline GradientSet backward_shallow(const Network& net, const ForwardTrace& tr,
                                    const Matrix& delta_ay) {
    GradientSet gs;
    detail::head_region_backward(net, tr, delta_ay, gs, false);
    return gs;
}

// ---------------------------------------------------------------------------
// DFA update plan
// ---------------------------------------------------------------------------

// One independent unit of gradient work. Tasks share the immutable trace and
// error; write sets are pairwise disjoint parameter names.
struct UpdateTask {
    std::string name;
    std::vector<std::string> writes;
    std::function<GradientSet()> compute;
};

struct UpdatePlan {
    std::vector<UpdateTask> tasks;
};

// Builds the per-attachment-region task list for one trace. Every task reads
// (trace, feedback, delta_ay) and produces its own GradientSet; merging the
// results in task order reproduces the sequential backward bitwise.
inline UpdatePlan build_update_plan(const Network& net, const ForwardTrace& tr,
                                    const Matrix& delta_ay) {
    if (net.mode != TrainMode::DFA)
        throw ModeError("update plan requires DFA mode; " +
                        std::string(to_string(net.mode)) +
                        " has sequential dependencies");
    net.validate_feedback();
    if (tr.layers.size() != net.layers.size())
        throw ContractError("build_update_plan: trace does not match network depth");
    if (delta_ay.cols() != net.output_dim())
        throw ShapeError("build_update_plan: delta " + delta_ay.shape() +
                         " does not match output dim " +
                         std::to_string(net.output_dim()));

    UpdatePlan plan;
    const auto attachments = net.attachments();
    const bool has_embedding = net.is_token_network();

    // Head region: true error, identical computation to BP's top step.
    plan.tasks.push_back(UpdateTask{
        "head", net.head_param_names(), [&net, &tr, &delta_ay]() {
            GradientSet gs;
            detail::head_region_backward(net, tr, delta_ay, gs, false);
            return gs;
        }});

    for (std::size_t ai = 0; ai < attachments.size(); ++ai) {
        const Attachment& att = attachments[ai];
        const FeedbackMatrix& fb = net.feedback[ai];
        const LayerNode& node = net.layers[att.layer_index];
        const std::string& id = node.id;

        if (att.point == Attachment::Point::LayerOutput) {
            std::vector<std::string> writes{id + ".weight"};
            if (node.is_dense()) writes.push_back(id + ".bias");
            plan.tasks.push_back(UpdateTask{
                att.id, std::move(writes), [&net, &tr, &delta_ay, &fb, li = att.layer_index]() {
                    GradientSet gs;
                    Matrix injected = broadcast_error(fb, delta_ay);
                    detail::feature_region_backward(net, li, tr, injected, gs, false);
                    return gs;
                }});
        } else if (att.point == Attachment::Point::BlockOutput) {
            const bool first_block = att.layer_index == 1 && has_embedding;
            std::vector<std::string> writes;
            const auto& b = std::get<TransformerBlock>(node.impl);
            for (std::size_t h = 0; h < b.attn.n_heads; ++h) {
                const std::string hs = std::to_string(h);
                writes.push_back(id + ".attn.wq" + hs);
                writes.push_back(id + ".attn.wk" + hs);
                writes.push_back(id + ".attn.wv" + hs);
            }
            for (const char* s : {".attn.wout", ".ffn1.weight", ".ffn1.bias",
                                  ".ffn2.weight", ".ffn2.bias", ".ln1.gain",
                                  ".ln1.bias", ".ln2.gain", ".ln2.bias"})
                writes.push_back(id + s);
            if (first_block) writes.push_back(net.layers.front().id + ".table");
            plan.tasks.push_back(UpdateTask{
                att.id, std::move(writes),
                [&net, &tr, &delta_ay, &fb, li = att.layer_index, first_block]() {
                    GradientSet gs;
                    const auto& blk = std::get<TransformerBlock>(net.layers[li].impl);
                    const auto& t = std::get<BlockTrace>(tr.layers[li]);
                    Matrix injected = broadcast_error(fb, delta_ay);
                    BlockGrads g;
                    auto grad_x =
                        transformer_block_backward(blk, t.c, injected, g, first_block);
                    detail::store_block_grads(net.layers[li].id, std::move(g), gs);
                    if (first_block) {
                        const auto& e =
                            std::get<EmbeddingLayer>(net.layers.front().impl);
                        Matrix grad_table;
                        embedding_backward(e, tr.input_ids, *grad_x, grad_table);
                        gs.add_to(net.layers.front().id + ".table", grad_table);
                    }
                    return gs;
                }});
        } else if (att.point == Attachment::Point::AttnSublayer) {
            std::vector<std::string> writes;
            const auto& b = std::get<TransformerBlock>(node.impl);
            for (std::size_t h = 0; h < b.attn.n_heads; ++h) {
                const std::string hs = std::to_string(h);
                writes.push_back(id + ".attn.wq" + hs);
                writes.push_back(id + ".attn.wk" + hs);
                writes.push_back(id + ".attn.wv" + hs);
            }
            writes.push_back(id + ".attn.wout");
            writes.push_back(id + ".ln1.gain");
            writes.push_back(id + ".ln1.bias");
            plan.tasks.push_back(UpdateTask{
                att.id, std::move(writes), [&net, &tr, &delta_ay, &fb, li = att.layer_index]() {
                    GradientSet gs;
                    const auto& blk = std::get<TransformerBlock>(net.layers[li].impl);
                    const auto& t = std::get<BlockTrace>(tr.layers[li]);
                    Matrix injected = broadcast_error(fb, delta_ay);
                    BlockGrads g;
                    block_attn_sublayer_backward(blk, t.c, injected, g);
                    detail::store_attn_sublayer_grads(net.layers[li].id, std::move(g), gs);
                    return gs;
                }});
        } else {  // FfnSublayer
            std::vector<std::string> writes{id + ".ffn1.weight", id + ".ffn1.bias",
                                            id + ".ffn2.weight", id + ".ffn2.bias",
                                            id + ".ln2.gain", id + ".ln2.bias"};
            plan.tasks.push_back(UpdateTask{
                att.id, std::move(writes), [&net, &tr, &delta_ay, &fb, li = att.layer_index]() {
                    GradientSet gs;
                    const auto& blk = std::get<TransformerBlock>(net.layers[li].impl);
                    const auto& t = std::get<BlockTrace>(tr.layers[li]);
                    Matrix injected = broadcast_error(fb, delta_ay);
                    BlockGrads g;
                    block_ffn_sublayer_backward(blk, t.c, injected, g);
                    detail::store_ffn_sublayer_grads(net.layers[li].id, std::move(g), gs);
                    return gs;
                }});

            // The embedding trains by true backpropagation through the first
            // block, fed by the signal injected at that block's output.
            if (att.layer_index == 1 && has_embedding) {
                plan.tasks.push_back(UpdateTask{
                    "embed", {net.layers.front().id + ".table"},
                    [&net, &tr, &delta_ay, &fb]() {
                        GradientSet gs;
                        const auto& blk =
                            std::get<TransformerBlock>(net.layers[1].impl);
                        const auto& t = std::get<BlockTrace>(tr.layers[1]);
                        Matrix injected = broadcast_error(fb, delta_ay);
                        BlockGrads discard;
                        auto grad_x =
                            transformer_block_backward(blk, t.c, injected, discard, true);
                        const auto& e =
                            std::get<EmbeddingLayer>(net.layers.front().impl);
                        Matrix grad_table;
                        embedding_backward(e, tr.input_ids, *grad_x, grad_table);
                        gs.add_to(net.layers.front().id + ".table", grad_table);
                        return gs;
                    }});
            }
        }
    }
    return plan;
}

inline GradientSet run_plan_sequential(const UpdatePlan& plan) {
    GradientSet gs;
    for (const auto& task : plan.tasks) gs.merge(task.compute());
    return gs;
}

// Random projections of the global error per Eq.-style DFA credit assignment;
// the top region receives the true derivative. Equals the parallel engine's
// output bitwise because both run the same task list.
inline GradientSet backward_dfa(const Network& net, const ForwardTrace& tr,
                                const Matrix& delta_ay) {
    if (net.mode != TrainMode::DFA)
        throw ConfigError("backward_dfa: network is not in DFA mode");
    if (net.feedback.empty() && !net.attachments().empty())
        throw ConfigError("backward_dfa: feedback matrices missing");
    return run_plan_sequential(build_update_plan(net, tr, delta_ay));
}

inline GradientSet backward_for_mode(const Network& net, const ForwardTrace& tr,
                                     const Matrix& delta_ay) {
    switch (net.mode) {
        case TrainMode::BP: return backward_bp(net, tr, delta_ay);
        case TrainMode::DFA: return backward_dfa(net, tr, delta_ay);
        case TrainMode::Shallow: return backward_shallow(net, tr, delta_ay);
    }
    throw ContractError("backward_for_mode: unknown mode");
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

enum class OptimizerKind { Sgd, Adam };

struct OptimizerState {
    OptimizerKind kind = OptimizerKind::Sgd;
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // L2 on ".weight" matrices
    std::map<std::string, Matrix> m, v;
    std::uint64_t step = 0;  // global counter shared by all parameters
};

inline bool weight_decay_applies(const std::string& name) {
    return name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

inline void optimizer_step(OptimizerState& opt,
                           std::vector<std::pair<std::string, Matrix*>> params,
                           const GradientSet& grads) {
    for (const auto& [name, g] : grads) {
        bool known = false;
        for (const auto& [pname, p] : params) known = known || pname == name;
        if (!known)
            throw ContractError("optimizer_step: gradient '" + name +
                                "' has no matching parameter");
    }
    ++opt.step;
    for (auto& [name, p] : params) {
        if (!grads.contains(name)) continue;
        Matrix g = grads.at(name);
        if (!g.same_shape(*p))
            throw ContractError("optimizer_step: gradient shape " + g.shape() +
                                " != parameter shape " + p->shape() + " for " + name);
        if (opt.weight_decay != 0.0 && weight_decay_applies(name))
            g.axpy_inplace(opt.weight_decay, *p);
        if (opt.kind == OptimizerKind::Sgd) {
            p->axpy_inplace(-opt.lr, g);
            continue;
        }
        auto mit = opt.m.find(name);
        if (mit == opt.m.end()) {
            mit = opt.m.emplace(name, Matrix(g.rows(), g.cols())).first;
            opt.v.emplace(name, Matrix(g.rows(), g.cols()));
        }
        Matrix& m = mit->second;
        Matrix& v = opt.v.at(name);
        const double b1 = opt.beta1, b2 = opt.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double gi = g.data()[i];
            m.data()[i] = b1 * m.data()[i] + (1.0 - b1) * gi;
            v.data()[i] = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            const double mhat = m.data()[i] / c1;
            const double vhat = v.data()[i] / c2;
            p->data()[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Plateau scheduler
// ---------------------------------------------------------------------------

// Multiplies the learning rate by `factor` after `patience` consecutive
// epochs without improvement of a lower-is-better metric.
struct PlateauScheduler {
    double factor = 0.2;
    int patience = 1;
    double best_metric = std::numeric_limits<double>::infinity();
    int wait = 0;

    void observe(double metric, OptimizerState& opt) {
        if (metric < best_metric) {
            best_metric = metric;
            wait = 0;
            return;
        }
        if (++wait >= patience) {
            opt.lr *= factor;
            wait = 0;
        }
    }
};

// ---------------------------------------------------------------------------
// Small evaluation helpers
// ---------------------------------------------------------------------------

inline std::size_t argmax_row(const Matrix& m, std::size_t i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m.cols(); ++j)
        if (m(i, j) > m(i, best)) best = j;
    return best;
}

inline double accuracy_on_rows(const Matrix& logits, const Matrix& y_onehot,
                               const std::vector<int>& rows) {
    if (rows.empty()) throw ParameterError("accuracy_on_rows: empty row set");
    std::size_t hits = 0;
    for (int r : rows) {
        const auto i = static_cast<std::size_t>(r);
        if (argmax_row(logits, i) == argmax_row(y_onehot, i)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(rows.size());
}

}  // namespace dfa
