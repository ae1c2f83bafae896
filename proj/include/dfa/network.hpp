#pragma once

#include <map>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "dfa/feedback.hpp"
#include "dfa/layers.hpp"
#include "dfa/matrix.hpp"

namespace dfa {

enum class TrainMode { BP, DFA, Shallow };

inline const char* to_string(TrainMode m) {
    switch (m) {
        case TrainMode::BP: return "bp";
        case TrainMode::DFA: return "dfa";
        case TrainMode::Shallow: return "shallow";
    }
    return "?";
}

struct LayerNode {
    std::string id;
    std::variant<DenseLayer, GraphConvLayer, TransformerBlock, EmbeddingLayer> impl;

    bool is_dense() const { return std::holds_alternative<DenseLayer>(impl); }
    bool is_graph() const { return std::holds_alternative<GraphConvLayer>(impl); }
    bool is_block() const { return std::holds_alternative<TransformerBlock>(impl); }
    bool is_embedding() const { return std::holds_alternative<EmbeddingLayer>(impl); }

    std::size_t out_dim() const {
        if (is_dense()) return std::get<DenseLayer>(impl).out_dim();
        if (is_graph()) return std::get<GraphConvLayer>(impl).out_dim();
        if (is_block()) return std::get<TransformerBlock>(impl).d_model();
        return std::get<EmbeddingLayer>(impl).d_model();
    }
};

// One hidden point where a DFA feedback matrix injects the projected error.
struct Attachment {
    enum class Point { LayerOutput, BlockOutput, AttnSublayer, FfnSublayer };
    std::string id;
    std::size_t layer_index = 0;
    Point point = Point::LayerOutput;
    std::size_t dim = 0;
};

struct Network {
    std::vector<LayerNode> layers;
    TrainMode mode = TrainMode::BP;
    FeedbackGranularity granularity = FeedbackGranularity::PerLayer;
    std::vector<FeedbackMatrix> feedback;  // parallel to attachments()
    LayerNorm final_norm;                  // pre-norm transformers only
    bool has_final_norm = false;
    double dropout = 0.0;

    std::size_t depth() const { return layers.size(); }
    std::size_t output_dim() const { return layers.back().out_dim(); }

    bool is_token_network() const {
        return !layers.empty() && layers.front().is_embedding();
    }

    std::vector<Attachment> attachments() const {
        std::vector<Attachment> out;
        if (granularity == FeedbackGranularity::PerLayer) {
            for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
                if (layers[i].is_embedding()) continue;
                out.push_back({layers[i].id, i, Attachment::Point::LayerOutput,
                               layers[i].out_dim()});
            }
        } else {
            for (std::size_t i = 0; i < layers.size(); ++i) {
                if (!layers[i].is_block()) continue;
                if (granularity == FeedbackGranularity::Macro) {
                    out.push_back({layers[i].id, i, Attachment::Point::BlockOutput,
                                   layers[i].out_dim()});
                } else {
                    out.push_back({layers[i].id + ".attn", i,
                                   Attachment::Point::AttnSublayer, layers[i].out_dim()});
                    out.push_back({layers[i].id + ".ffn", i,
                                   Attachment::Point::FfnSublayer, layers[i].out_dim()});
                }
            }
        }
        return out;
    }

    // Stable, ordered registry of every trainable parameter.
    std::vector<std::pair<std::string, Matrix*>> params() {
        std::vector<std::pair<std::string, Matrix*>> out;
        for (auto& node : layers) {
            const std::string& id = node.id;
            if (node.is_dense()) {
                auto& l = std::get<DenseLayer>(node.impl);
                out.emplace_back(id + ".weight", &l.weight);
                out.emplace_back(id + ".bias", &l.bias);
            } else if (node.is_graph()) {
                auto& l = std::get<GraphConvLayer>(node.impl);
                out.emplace_back(id + ".weight", &l.weight);
            } else if (node.is_embedding()) {
                auto& l = std::get<EmbeddingLayer>(node.impl);
                out.emplace_back(id + ".table", &l.table);
            } else {
                auto& b = std::get<TransformerBlock>(node.impl);
                for (std::size_t h = 0; h < b.attn.n_heads; ++h) {
                    const std::string hs = std::to_string(h);
                    out.emplace_back(id + ".attn.wq" + hs, &b.attn.w_q[h]);
                    out.emplace_back(id + ".attn.wk" + hs, &b.attn.w_k[h]);
                    out.emplace_back(id + ".attn.wv" + hs, &b.attn.w_v[h]);
                }
                out.emplace_back(id + ".attn.wout", &b.attn.w_out);
                out.emplace_back(id + ".ffn1.weight", &b.ffn1.weight);
                out.emplace_back(id + ".ffn1.bias", &b.ffn1.bias);
                out.emplace_back(id + ".ffn2.weight", &b.ffn2.weight);
                out.emplace_back(id + ".ffn2.bias", &b.ffn2.bias);
                out.emplace_back(id + ".ln1.gain", &b.ln1.gain);
                out.emplace_back(id + ".ln1.bias", &b.ln1.bias);
                out.emplace_back(id + ".ln2.gain", &b.ln2.gain);
                out.emplace_back(id + ".ln2.bias", &b.ln2.bias);
            }
        }
        if (has_final_norm) {
            out.emplace_back("final_norm.gain", &final_norm.gain);
            out.emplace_back("final_norm.bias", &final_norm.bias);
        }
        return out;
    }

    std::vector<std::pair<std::string, const Matrix*>> params() const {
        auto mut = const_cast<Network*>(this)->params();
        std::vector<std::pair<std::string, const Matrix*>> out;
        out.reserve(mut.size());
        for (auto& [name, p] : mut) out.emplace_back(name, p);
        return out;
    }

    // Names of parameters belonging to the topmost (true-error) region.
    std::vector<std::string> head_param_names() const {
        std::vector<std::string> names;
        const auto& top = layers.back();
        names.push_back(top.id + ".weight");
        if (top.is_dense()) names.push_back(top.id + ".bias");
        if (has_final_norm) {
            names.push_back("final_norm.gain");
            names.push_back("final_norm.bias");
        }
        return names;
    }

    std::uint64_t param_hash() const {
        std::uint64_t h = 0x9E3779B97F4A7C15ULL;
        for (const auto& [name, p] : params()) h ^= content_hash(*p) * 0x100000001B3ULL;
        return h;
    }

    void validate_chaining() const {
        for (std::size_t i = 0; i + 1 < layers.size(); ++i) {
            const std::size_t out = layers[i].out_dim();
            std::size_t in_next = 0;
            const auto& nxt = layers[i + 1];
            if (nxt.is_dense()) in_next = std::get<DenseLayer>(nxt.impl).in_dim();
            else if (nxt.is_graph()) in_next = std::get<GraphConvLayer>(nxt.impl).in_dim();
            else if (nxt.is_block()) in_next = std::get<TransformerBlock>(nxt.impl).d_model();
            else throw ConfigError("embedding must be the first layer");
            if (out != in_next)
                throw ConfigError("layer dims do not chain: " + layers[i].id + " out " +
                                  std::to_string(out) + " vs " + nxt.id + " in " +
                                  std::to_string(in_next));
        }
    }

    void validate_feedback() const {
        const auto att = attachments();
        if (feedback.size() != att.size())
            throw ConfigError("feedback count " + std::to_string(feedback.size()) +
                              " does not match attachment count " +
                              std::to_string(att.size()));
        for (std::size_t i = 0; i < att.size(); ++i) {
            if (feedback[i].out_dim() != att[i].dim ||
                feedback[i].error_dim() != output_dim())
                throw ConfigError("feedback for '" + att[i].id + "' has shape " +
                                  shape_str(feedback[i].out_dim(), feedback[i].error_dim()) +
                                  ", expected " + shape_str(att[i].dim, output_dim()));
        }
    }
};

// ---------------------------------------------------------------------------
// Forward traces
// ---------------------------------------------------------------------------

struct DenseTrace {
    DenseResult r;
    Matrix dropped;  // empty when no dropout
    Matrix mask;
    bool has_mask = false;
    const Matrix& output() const { return has_mask ? dropped : r.h; }
};

struct GraphTrace {
    GraphConvResult r;
    Matrix dropped;
    Matrix mask;
    bool has_mask = false;
    const Matrix& output() const { return has_mask ? dropped : r.h; }
};

struct BlockTrace {
    BlockCache c;
    const Matrix& output() const { return c.out; }
};

struct EmbedTrace {
    Matrix h;
    const Matrix& output() const { return h; }
};

using LayerTrace = std::variant<DenseTrace, GraphTrace, BlockTrace, EmbedTrace>;

struct ForwardTrace {
    Matrix input;                // h_0 for feature networks
    std::vector<int> input_ids;  // token networks
    std::vector<LayerTrace> layers;
    LayerNormCache final_norm_cache;
    bool has_final_norm = false;

    const Matrix& layer_output(std::size_t i) const {
        return std::visit([](const auto& t) -> const Matrix& { return t.output(); },
                          layers[i]);
    }

    // Predictions: output of the last layer.
    const Matrix& output() const { return layer_output(layers.size() - 1); }
};

inline ForwardTrace forward_trace(const Network& net, const Matrix& x,
                                  const DropoutCtx& drop = {}) {
    if (net.is_token_network())
        throw ContractError("forward_trace: token network requires id input");
    ForwardTrace tr;
    tr.input = x;
    const Matrix* h = &tr.input;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& node = net.layers[i];
        const bool hidden = i + 1 < net.layers.size();
        if (node.is_dense()) {
            DenseTrace t;
            t.r = dense_forward(std::get<DenseLayer>(node.impl), *h);
            if (hidden && drop.active()) {
                t.mask = drop.sample_mask(t.r.h.rows(), t.r.h.cols());
                t.dropped = hadamard(t.r.h, t.mask);
                t.has_mask = true;
            }
            tr.layers.emplace_back(std::move(t));
        } else if (node.is_graph()) {
            GraphTrace t;
            t.r = graphconv_forward(std::get<GraphConvLayer>(node.impl), *h);
            if (hidden && drop.active()) {
                t.mask = drop.sample_mask(t.r.h.rows(), t.r.h.cols());
                t.dropped = hadamard(t.r.h, t.mask);
                t.has_mask = true;
            }
            tr.layers.emplace_back(std::move(t));
        } else {
            throw ContractError("forward_trace: unsupported layer kind in feature network");
        }
        h = &tr.layer_output(i);
    }
    return tr;
}

inline ForwardTrace forward_trace_ids(const Network& net, const std::vector<int>& ids,
                                      const DropoutCtx& drop = {}) {
    if (!net.is_token_network())
        throw ContractError("forward_trace_ids: network does not start with an embedding");
    ForwardTrace tr;
    tr.input_ids = ids;
    const Matrix* h = nullptr;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        const auto& node = net.layers[i];
        if (node.is_embedding()) {
            EmbedTrace t;
            t.h = embedding_forward(std::get<EmbeddingLayer>(node.impl), ids);
            tr.layers.emplace_back(std::move(t));
        } else if (node.is_block()) {
            BlockTrace t;
            t.c = transformer_block_forward(std::get<TransformerBlock>(node.impl), *h, drop);
            tr.layers.emplace_back(std::move(t));
        } else if (node.is_dense()) {
            const Matrix* head_in = h;
            if (i + 1 == net.layers.size() && net.has_final_norm) {
                tr.final_norm_cache = layernorm_forward(net.final_norm, *h);
                tr.has_final_norm = true;
                head_in = &tr.final_norm_cache.out;
            }
            DenseTrace t;
            t.r = dense_forward(std::get<DenseLayer>(node.impl), *head_in);
            tr.layers.emplace_back(std::move(t));
        } else {
            throw ContractError("forward_trace_ids: unsupported layer kind");
        }
        h = &tr.layer_output(i);
    }
    return tr;
}

// ---------------------------------------------------------------------------
// Gradient sets
// ---------------------------------------------------------------------------

// Per-parameter gradients keyed by parameter name. Ordered map so iteration
// (and therefore optimizer application) is deterministic.
class GradientSet {
public:
    bool contains(const std::string& name) const { return grads_.count(name) > 0; }

    Matrix& slot(const std::string& name) { return grads_[name]; }

    const Matrix& at(const std::string& name) const {
        auto it = grads_.find(name);
        if (it == grads_.end())
            throw ContractError("GradientSet: missing gradient for '" + name + "'");
        return it->second;
    }

    void add_to(const std::string& name, const Matrix& g) {
        auto it = grads_.find(name);
        if (it == grads_.end())
            grads_.emplace(name, g);
        else
            it->second.add_inplace(g);
    }

    void merge(GradientSet&& other) {
        for (auto& [name, g] : other.grads_) {
            auto it = grads_.find(name);
            if (it == grads_.end())
                grads_.emplace(name, std::move(g));
            else
                it->second.add_inplace(g);
        }
    }

    std::size_t size() const { return grads_.size(); }
    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }
    auto begin() { return grads_.begin(); }
    auto end() { return grads_.end(); }

private:
    std::map<std::string, Matrix> grads_;
};

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

inline Network make_mlp(SeededRng& rng, std::size_t in_dim,
                        const std::vector<std::size_t>& hidden, std::size_t out_dim,
                        Activation act) {
    Network net;
    std::size_t prev = in_dim;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        LayerNode node;
        node.id = "layer" + std::to_string(i + 1);
        node.impl = make_dense(rng, prev, hidden[i], act);
        prev = hidden[i];
        net.layers.push_back(std::move(node));
    }
    LayerNode top;
    top.id = "layer" + std::to_string(hidden.size() + 1);
    top.impl = make_dense(rng, prev, out_dim, Activation::Identity);
    net.layers.push_back(std::move(top));
    net.validate_chaining();
    return net;
}

inline Network make_gcn(SeededRng& rng, std::shared_ptr<const Matrix> adj_norm,
                        std::size_t in_dim, const std::vector<std::size_t>& hidden,
                        std::size_t out_dim, Activation act) {
    Network net;
    std::size_t prev = in_dim;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
        LayerNode node;
        node.id = "layer" + std::to_string(i + 1);
        node.impl = make_graphconv(rng, prev, hidden[i], act, adj_norm);
        prev = hidden[i];
        net.layers.push_back(std::move(node));
    }
    LayerNode top;
    top.id = "layer" + std::to_string(hidden.size() + 1);
    top.impl = make_graphconv(rng, prev, out_dim, Activation::Identity, adj_norm);
    net.layers.push_back(std::move(top));
    net.validate_chaining();
    return net;
}

inline Network make_char_lm(SeededRng& rng, std::size_t vocab, std::size_t d_model,
                            std::size_t n_blocks, std::size_t n_heads, std::size_t d_ff,
                            bool pre_norm = true, bool positional = true) {
    Network net;
    LayerNode emb;
    emb.id = "embed";
    emb.impl = make_embedding(rng, vocab, d_model, positional);
    net.layers.push_back(std::move(emb));
    for (std::size_t i = 0; i < n_blocks; ++i) {
        LayerNode node;
        node.id = "block" + std::to_string(i + 1);
        node.impl = make_transformer_block(rng, d_model, n_heads, d_ff, true, pre_norm);
        net.layers.push_back(std::move(node));
    }
    LayerNode head;
    head.id = "head";
    head.impl = make_dense(rng, d_model, vocab, Activation::Identity);
    net.layers.push_back(std::move(head));
    if (pre_norm) {
        net.final_norm = make_layernorm(d_model);
        net.has_final_norm = true;
    }
    net.validate_chaining();
    return net;
}

enum class FeedbackScaleRule { Target, Output };

// Draws one feedback matrix per hidden attachment point (or slices of one
// shared master). error_dim is the network output width.
inline void attach_feedback(Network& net, SeededRng& rng, bool shared_master,
                            FeedbackScaleRule rule = FeedbackScaleRule::Target) {
    const std::size_t error_dim = net.output_dim();
    const auto att = net.attachments();
    net.feedback.clear();
    if (shared_master) {
        std::size_t max_dim = 0;
        for (const auto& a : att) max_dim = std::max(max_dim, a.dim);
        SharedFeedbackMaster master(rng, max_dim, error_dim);
        for (const auto& a : att) {
            const std::size_t scale_dim =
                rule == FeedbackScaleRule::Target ? a.dim : error_dim;
            net.feedback.push_back(master.slice_for(a.id, a.dim, scale_dim));
        }
    } else {
        for (const auto& a : att) {
            const std::size_t scale_dim =
                rule == FeedbackScaleRule::Target ? a.dim : error_dim;
            net.feedback.push_back(
                init_feedback(rng, a.dim, error_dim, a.id, scale_dim));
        }
    }
}

}  // namespace dfa
