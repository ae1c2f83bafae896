#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <vector>

#include "dfa/activations.hpp"
#include "dfa/matrix.hpp"
#include "dfa/rng.hpp"

namespace dfa {

// Inverted-dropout context threaded through forward passes. A null rng (or
// zero rate) disables dropout, which is also the eval-time path.
struct DropoutCtx {
    double rate = 0.0;
    SeededRng* rng = nullptr;
    bool active() const { return rate > 0.0 && rng != nullptr; }

    // Mask entries are 0 or 1/keep so the same matrix applies in both passes.
    Matrix sample_mask(std::size_t rows, std::size_t cols) const {
        Matrix m(rows, cols);
        const double keep = 1.0 - rate;
        for (auto& v : m.data()) v = (rng->next_double() >= rate) ? 1.0 / keep : 0.0;
        return m;
    }
};

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

struct DenseLayer {
    Matrix weight;  // out_dim x in_dim
    Matrix bias;    // 1 x out_dim
    Activation act = Activation::Identity;

    std::size_t in_dim() const { return weight.cols(); }
    std::size_t out_dim() const { return weight.rows(); }
};

// Scaled-uniform fan-in init, biases zero.
inline DenseLayer make_dense(SeededRng& rng, std::size_t in_dim, std::size_t out_dim,
                             Activation act) {
    const double s = 1.0 / std::sqrt(static_cast<double>(in_dim));
    DenseLayer l;
    l.weight = uniform_matrix(rng, out_dim, in_dim, -s, s);
    l.bias = Matrix(1, out_dim);
    l.act = act;
    return l;
}

struct DenseResult {
    Matrix a;  // pre-activation, batch x out_dim
    Matrix h;  // f(a)
};

inline DenseResult dense_forward(const DenseLayer& layer, const Matrix& h_prev) {
    if (h_prev.cols() != layer.in_dim())
        throw ShapeError("dense_forward: input " + h_prev.shape() +
                         " does not match weight " + layer.weight.shape());
    DenseResult r;
    r.a = matmul_nt(h_prev, layer.weight);
    for (std::size_t i = 0; i < r.a.rows(); ++i) {
        double* row = r.a.row_ptr(i);
        for (std::size_t j = 0; j < r.a.cols(); ++j) row[j] += layer.bias(0, j);
    }
    r.h = activate(layer.act, r.a);
    return r;
}

// ---------------------------------------------------------------------------
// Graph convolution
// ---------------------------------------------------------------------------

struct GraphConvLayer {
    Matrix weight;  // in_dim x out_dim
    Activation act = Activation::Identity;
    std::shared_ptr<const Matrix> adj_norm;  // n x n, symmetric, entries >= 0

    std::size_t in_dim() const { return weight.rows(); }
    std::size_t out_dim() const { return weight.cols(); }
};

inline GraphConvLayer make_graphconv(SeededRng& rng, std::size_t in_dim,
                                     std::size_t out_dim, Activation act,
                                     std::shared_ptr<const Matrix> adj_norm) {
    const double s = 1.0 / std::sqrt(static_cast<double>(in_dim));
    GraphConvLayer l;
    l.weight = uniform_matrix(rng, in_dim, out_dim, -s, s);
    l.act = act;
    l.adj_norm = std::move(adj_norm);
    return l;
}

// Symmetric normalization with self-loops: D^{-1/2} (A+I) D^{-1/2}.
inline Matrix normalize_adjacency(const Matrix& adjacency) {
    const std::size_t n = adjacency.rows();
    if (adjacency.cols() != n)
        throw ParameterError("normalize_adjacency: adjacency must be square, got " +
                             adjacency.shape());
    for (std::size_t i = 0; i < n; ++i) {
        if (adjacency(i, i) != 0.0)
            throw ParameterError("normalize_adjacency: nonzero diagonal at node " +
                                 std::to_string(i));
        for (std::size_t j = i + 1; j < n; ++j) {
            if (adjacency(i, j) != adjacency(j, i))
                throw ParameterError("normalize_adjacency: asymmetric at (" +
                                     std::to_string(i) + "," + std::to_string(j) + ")");
            if (adjacency(i, j) != 0.0 && adjacency(i, j) != 1.0)
                throw ParameterError("normalize_adjacency: entries must be 0 or 1");
        }
    }
    std::vector<double> dinv(n);
    for (std::size_t i = 0; i < n; ++i) {
        double deg = 1.0;  // self-loop
        for (std::size_t j = 0; j < n; ++j) deg += adjacency(i, j);
        dinv[i] = 1.0 / std::sqrt(deg);
    }
    Matrix norm(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            const double aij = (i == j) ? 1.0 : adjacency(i, j);
            norm(i, j) = dinv[i] * aij * dinv[j];
        }
    return norm;
}

struct GraphConvResult {
    Matrix propagated;  // adj_norm * h_prev, kept for the weight gradient
    Matrix a;           // propagated * W
    Matrix h;           // f(a)
};

inline GraphConvResult graphconv_forward(const GraphConvLayer& layer,
                                         const Matrix& h_prev) {
    if (!layer.adj_norm)
        throw ContractError("graphconv_forward: layer has no adjacency");
    if (h_prev.rows() != layer.adj_norm->rows())
        throw ShapeError("graphconv_forward: features " + h_prev.shape() +
                         " do not match adjacency " + layer.adj_norm->shape());
    if (h_prev.cols() != layer.in_dim())
        throw ShapeError("graphconv_forward: features " + h_prev.shape() +
                         " do not match weight " + layer.weight.shape());
    GraphConvResult r;
    r.propagated = matmul(*layer.adj_norm, h_prev);
    r.a = matmul(r.propagated, layer.weight);
    r.h = activate(layer.act, r.a);
    return r;
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

struct LayerNorm {
    Matrix gain;  // 1 x d
    Matrix bias;  // 1 x d
    std::size_t dim() const { return gain.cols(); }
};

inline LayerNorm make_layernorm(std::size_t d) {
    LayerNorm ln;
    ln.gain = Matrix(1, d);
    ln.gain.fill(1.0);
    ln.bias = Matrix(1, d);
    return ln;
}

constexpr double kLayerNormEps = 1e-8;

struct LayerNormCache {
    Matrix xhat;                  // normalized rows before gain/bias
    std::vector<double> inv_std;  // per row
    Matrix out;
};

inline LayerNormCache layernorm_forward(const LayerNorm& ln, const Matrix& x) {
    if (x.cols() != ln.dim())
        throw ShapeError("layernorm_forward: input " + x.shape() +
                         " does not match dim " + std::to_string(ln.dim()));
    LayerNormCache c;
    const std::size_t d = x.cols();
    c.xhat = Matrix(x.rows(), d);
    c.out = Matrix(x.rows(), d);
    c.inv_std.resize(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const double* xi = x.row_ptr(i);
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xi[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double t = xi[j] - mu;
            var += t * t;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        c.inv_std[i] = inv;
        double* xh = c.xhat.row_ptr(i);
        double* o = c.out.row_ptr(i);
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (xi[j] - mu) * inv;
            o[j] = ln.gain(0, j) * xh[j] + ln.bias(0, j);
        }
    }
    return c;
}

// Accumulates parameter gradients, returns the input gradient.
inline Matrix layernorm_backward(const LayerNorm& ln, const LayerNormCache& c,
                                 const Matrix& grad_out, Matrix& grad_gain,
                                 Matrix& grad_bias) {
    const std::size_t d = grad_out.cols();
    if (grad_gain.empty()) grad_gain = Matrix(1, d);
    if (grad_bias.empty()) grad_bias = Matrix(1, d);
    Matrix grad_x(grad_out.rows(), d);
    for (std::size_t i = 0; i < grad_out.rows(); ++i) {
        const double* go = grad_out.row_ptr(i);
        const double* xh = c.xhat.row_ptr(i);
        double* gx = grad_x.row_ptr(i);
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            grad_gain(0, j) += go[j] * xh[j];
            grad_bias(0, j) += go[j];
            const double t = go[j] * ln.gain(0, j);
            m1 += t;
            m2 += t * xh[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        const double inv = c.inv_std[i];
        for (std::size_t j = 0; j < d; ++j) {
            const double t = go[j] * ln.gain(0, j);
            gx[j] = (t - m1 - xh[j] * m2) * inv;
        }
    }
    return grad_x;
}

// ---------------------------------------------------------------------------
// Multi-head attention
// ---------------------------------------------------------------------------

struct AttentionLayer {
    std::vector<Matrix> w_q, w_k, w_v;  // per head, d_model x d_k
    Matrix w_out;                       // (n_heads * d_k) x d_model
    std::size_t n_heads = 1;

    std::size_t d_model() const { return w_q.empty() ? 0 : w_q[0].rows(); }
    std::size_t d_k() const { return w_q.empty() ? 0 : w_q[0].cols(); }
};

inline AttentionLayer make_attention(SeededRng& rng, std::size_t d_model,
                                     std::size_t n_heads) {
    if (n_heads == 0 || d_model % n_heads != 0)
        throw ParameterError("make_attention: d_model " + std::to_string(d_model) +
                             " not divisible by n_heads " + std::to_string(n_heads));
    const std::size_t d_k = d_model / n_heads;
    const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
    AttentionLayer l;
    l.n_heads = n_heads;
    for (std::size_t h = 0; h < n_heads; ++h) {
        l.w_q.push_back(uniform_matrix(rng, d_model, d_k, -s, s));
        l.w_k.push_back(uniform_matrix(rng, d_model, d_k, -s, s));
        l.w_v.push_back(uniform_matrix(rng, d_model, d_k, -s, s));
    }
    const double so = 1.0 / std::sqrt(static_cast<double>(n_heads * d_k));
    l.w_out = uniform_matrix(rng, n_heads * d_k, d_model, -so, so);
    return l;
}

struct AttentionCache {
    Matrix x;  // projection input (already normalized in pre-norm blocks)
    std::vector<Matrix> q, k, v;        // per head, seq x d_k
    std::vector<Matrix> weights;        // per head, seq x seq, post-softmax
    std::vector<Matrix> weight_masks;   // dropout masks on the weights
    bool has_dropout = false;
    Matrix concat;  // seq x (n_heads * d_k)
    Matrix out;     // seq x d_model
    bool causal = false;
};

// Row-stochastic attention weights; causal rows renormalize over the prefix
// so future positions carry exact zeros.
inline Matrix scaled_softmax_scores(const Matrix& q, const Matrix& k, bool causal) {
    const std::size_t seq = q.rows();
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix w(seq, seq);
    for (std::size_t t = 0; t < seq; ++t) {
        const std::size_t limit = causal ? t + 1 : seq;
        double mx = -1e300;
        for (std::size_t u = 0; u < limit; ++u) {
            double s = 0.0;
            const double* qt = q.row_ptr(t);
            const double* ku = k.row_ptr(u);
            for (std::size_t p = 0; p < q.cols(); ++p) s += qt[p] * ku[p];
            w(t, u) = s * scale;
            mx = std::max(mx, w(t, u));
        }
        double sum = 0.0;
        for (std::size_t u = 0; u < limit; ++u) {
            w(t, u) = std::exp(w(t, u) - mx);
            sum += w(t, u);
        }
        const double inv = 1.0 / sum;
        for (std::size_t u = 0; u < limit; ++u) w(t, u) *= inv;
        // entries beyond limit stay exactly 0
    }
    return w;
}

inline AttentionCache attention_forward(const AttentionLayer& layer, const Matrix& x,
                                        bool causal, const DropoutCtx& drop = {}) {
    if (x.cols() != layer.d_model())
        throw ShapeError("attention_forward: input " + x.shape() +
                         " does not match d_model " + std::to_string(layer.d_model()));
    AttentionCache c;
    c.x = x;
    c.causal = causal;
    const std::size_t seq = x.rows();
    const std::size_t dk = layer.d_k();
    c.concat = Matrix(seq, layer.n_heads * dk);
    c.has_dropout = drop.active();
    for (std::size_t h = 0; h < layer.n_heads; ++h) {
        Matrix q = matmul(x, layer.w_q[h]);
        Matrix k = matmul(x, layer.w_k[h]);
        Matrix v = matmul(x, layer.w_v[h]);
        Matrix w = scaled_softmax_scores(q, k, causal);
        Matrix w_used = w;
        if (c.has_dropout) {
            Matrix mask = drop.sample_mask(seq, seq);
            w_used = hadamard(w, mask);
            c.weight_masks.push_back(std::move(mask));
        }
        Matrix o = matmul(w_used, v);
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t p = 0; p < dk; ++p) c.concat(t, h * dk + p) = o(t, p);
        c.q.push_back(std::move(q));
        c.k.push_back(std::move(k));
        c.v.push_back(std::move(v));
        c.weights.push_back(std::move(w));
    }
    c.out = matmul(c.concat, layer.w_out);
    return c;
}

struct AttentionGrads {
    std::vector<Matrix> w_q, w_k, w_v;
    Matrix w_out;
};

// Exact gradients through the attention mechanism, softmax Jacobian included.
// Note the v path reads this layer's own w_v, so credit assignment inside the
// layer reuses forward weights even when the surrounding network does not.
inline Matrix attention_backward(const AttentionLayer& layer, const AttentionCache& c,
                                 const Matrix& grad_out, AttentionGrads& grads) {
    if (!grad_out.same_shape(c.out))
        throw ShapeError("attention_backward: grad " + grad_out.shape() +
                         " does not match output " + c.out.shape());
    const std::size_t seq = c.x.rows();
    const std::size_t dk = layer.d_k();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    if (grads.w_q.empty()) {
        grads.w_q.resize(layer.n_heads);
        grads.w_k.resize(layer.n_heads);
        grads.w_v.resize(layer.n_heads);
        for (std::size_t h = 0; h < layer.n_heads; ++h) {
            grads.w_q[h] = Matrix(layer.d_model(), dk);
            grads.w_k[h] = Matrix(layer.d_model(), dk);
            grads.w_v[h] = Matrix(layer.d_model(), dk);
        }
        grads.w_out = Matrix(layer.n_heads * dk, layer.d_model());
    }

    grads.w_out.add_inplace(matmul_tn(c.concat, grad_out));
    Matrix grad_concat = matmul_nt(grad_out, layer.w_out);
    Matrix grad_x(seq, layer.d_model());

    for (std::size_t h = 0; h < layer.n_heads; ++h) {
        Matrix grad_o(seq, dk);
        for (std::size_t t = 0; t < seq; ++t)
            for (std::size_t p = 0; p < dk; ++p) grad_o(t, p) = grad_concat(t, h * dk + p);

        const Matrix& w = c.weights[h];
        Matrix w_used = c.has_dropout ? hadamard(w, c.weight_masks[h]) : w;

        Matrix grad_v = matmul_tn(w_used, grad_o);
        Matrix grad_w = matmul_nt(grad_o, c.v[h]);
        if (c.has_dropout) grad_w = hadamard(grad_w, c.weight_masks[h]);

        // softmax Jacobian per row; rows with zero weight contribute nothing
        Matrix grad_s(seq, seq);
        for (std::size_t t = 0; t < seq; ++t) {
            const double* wr = w.row_ptr(t);
            const double* gr = grad_w.row_ptr(t);
            double inner = 0.0;
            for (std::size_t u = 0; u < seq; ++u) inner += gr[u] * wr[u];
            double* gs = grad_s.row_ptr(t);
            for (std::size_t u = 0; u < seq; ++u) gs[u] = wr[u] * (gr[u] - inner);
        }

        Matrix grad_q = matmul(grad_s, c.k[h]);
        grad_q.scale_inplace(scale);
        Matrix grad_k = matmul_tn(grad_s, c.q[h]);
        grad_k.scale_inplace(scale);

        grads.w_q[h].add_inplace(matmul_tn(c.x, grad_q));
        grads.w_k[h].add_inplace(matmul_tn(c.x, grad_k));
        grads.w_v[h].add_inplace(matmul_tn(c.x, grad_v));

        grad_x.add_inplace(matmul_nt(grad_q, layer.w_q[h]));
        grad_x.add_inplace(matmul_nt(grad_k, layer.w_k[h]));
        grad_x.add_inplace(matmul_nt(grad_v, layer.w_v[h]));
    }
    return grad_x;
}

// ---------------------------------------------------------------------------
// Transformer block
// ---------------------------------------------------------------------------

struct TransformerBlock {
    AttentionLayer attn;
    DenseLayer ffn1;  // d_model -> d_ff, relu
    DenseLayer ffn2;  // d_ff -> d_model, identity
    LayerNorm ln1, ln2;
    bool causal = true;
    bool pre_norm = true;

    std::size_t d_model() const { return attn.d_model(); }
};

inline TransformerBlock make_transformer_block(SeededRng& rng, std::size_t d_model,
                                               std::size_t n_heads, std::size_t d_ff,
                                               bool causal, bool pre_norm) {
    TransformerBlock b;
    b.attn = make_attention(rng, d_model, n_heads);
    b.ffn1 = make_dense(rng, d_model, d_ff, Activation::Relu);
    b.ffn2 = make_dense(rng, d_ff, d_model, Activation::Identity);
    b.ln1 = make_layernorm(d_model);
    b.ln2 = make_layernorm(d_model);
    b.causal = causal;
    b.pre_norm = pre_norm;
    return b;
}

struct BlockCache {
    Matrix x;  // block input
    LayerNormCache ln1c;
    AttentionCache attnc;
    Matrix u;  // first residual output (post-LN when post-norm)
    LayerNormCache ln2c;
    Matrix ffn_a;    // hidden pre-activation
    Matrix ffn_h;    // relu output, pre-dropout
    Matrix ffn_mask;
    bool ffn_has_mask = false;
    Matrix ffn_out;  // second linear output
    Matrix out;      // block output
};

inline BlockCache transformer_block_forward(const TransformerBlock& b, const Matrix& x,
                                            const DropoutCtx& drop = {}) {
    if (x.cols() != b.d_model())
        throw ShapeError("transformer_block_forward: input " + x.shape() +
                         " does not match d_model " + std::to_string(b.d_model()));
    BlockCache c;
    c.x = x;
    if (b.pre_norm) {
        c.ln1c = layernorm_forward(b.ln1, x);
        c.attnc = attention_forward(b.attn, c.ln1c.out, b.causal, drop);
        c.u = x;
        c.u.add_inplace(c.attnc.out);
        c.ln2c = layernorm_forward(b.ln2, c.u);
        DenseResult f1 = dense_forward(b.ffn1, c.ln2c.out);
        c.ffn_a = std::move(f1.a);
        c.ffn_h = std::move(f1.h);
        Matrix ffn_in = c.ffn_h;
        if (drop.active()) {
            c.ffn_mask = drop.sample_mask(ffn_in.rows(), ffn_in.cols());
            c.ffn_has_mask = true;
            ffn_in = hadamard(ffn_in, c.ffn_mask);
        }
        DenseResult f2 = dense_forward(b.ffn2, ffn_in);
        c.ffn_out = std::move(f2.a);
        c.out = c.u;
        c.out.add_inplace(c.ffn_out);
    } else {
        c.attnc = attention_forward(b.attn, x, b.causal, drop);
        Matrix r1 = x;
        r1.add_inplace(c.attnc.out);
        c.ln1c = layernorm_forward(b.ln1, r1);
        c.u = c.ln1c.out;
        DenseResult f1 = dense_forward(b.ffn1, c.u);
        c.ffn_a = std::move(f1.a);
        c.ffn_h = std::move(f1.h);
        Matrix ffn_in = c.ffn_h;
        if (drop.active()) {
            c.ffn_mask = drop.sample_mask(ffn_in.rows(), ffn_in.cols());
            c.ffn_has_mask = true;
            ffn_in = hadamard(ffn_in, c.ffn_mask);
        }
        DenseResult f2 = dense_forward(b.ffn2, ffn_in);
        c.ffn_out = std::move(f2.a);
        Matrix r2 = c.u;
        r2.add_inplace(c.ffn_out);
        c.ln2c = layernorm_forward(b.ln2, r2);
        c.out = c.ln2c.out;
    }
    return c;
}

struct BlockGrads {
    AttentionGrads attn;
    Matrix ffn1_w, ffn1_b, ffn2_w, ffn2_b;
    Matrix ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

namespace detail {

inline void ensure_block_grads(const TransformerBlock& b, BlockGrads& g) {
    if (g.ffn1_w.empty()) {
        g.ffn1_w = Matrix(b.ffn1.out_dim(), b.ffn1.in_dim());
        g.ffn1_b = Matrix(1, b.ffn1.out_dim());
        g.ffn2_w = Matrix(b.ffn2.out_dim(), b.ffn2.in_dim());
        g.ffn2_b = Matrix(1, b.ffn2.out_dim());
    }
}

// FFN path: grad at ffn_out -> parameter grads, returns grad at the FFN input
// (the ln2c.out in pre-norm, c.u in post-norm).
inline Matrix block_ffn_path_backward(const TransformerBlock& b, const BlockCache& c,
                                      const Matrix& grad_z2, BlockGrads& g) {
    ensure_block_grads(b, g);
    Matrix ffn_in = c.ffn_has_mask ? hadamard(c.ffn_h, c.ffn_mask) : c.ffn_h;
    g.ffn2_w.add_inplace(matmul_tn(grad_z2, ffn_in));
    g.ffn2_b.add_inplace(col_sum(grad_z2));
    Matrix grad_h = matmul(grad_z2, b.ffn2.weight);
    if (c.ffn_has_mask) grad_h = hadamard(grad_h, c.ffn_mask);
    Matrix grad_a = hadamard(grad_h, activate_deriv(b.ffn1.act, c.ffn_a));
    const Matrix& f1_in = b.pre_norm ? c.ln2c.out : c.u;
    g.ffn1_w.add_inplace(matmul_tn(grad_a, f1_in));
    g.ffn1_b.add_inplace(col_sum(grad_a));
    return matmul(grad_a, b.ffn1.weight);
}

}  // namespace detail

// Full exact backward through the block. Fills parameter grads; computes the
// input gradient only when requested (the embedding path needs it). When
// delta_u_capture is set it receives the gradient at the first residual
// output, the attention sub-layer boundary.
inline std::optional<Matrix> transformer_block_backward(const TransformerBlock& b,
                                                        const BlockCache& c,
                                                        const Matrix& grad_out,
                                                        BlockGrads& g,
                                                        bool want_input_grad,
                                                        Matrix* delta_u_capture = nullptr) {
    detail::ensure_block_grads(b, g);
    if (b.pre_norm) {
        // out = u + FFN(LN2(u)); u = x + Attn(LN1(x))
        Matrix grad_u = grad_out;
        Matrix grad_n2 = detail::block_ffn_path_backward(b, c, grad_out, g);
        grad_u.add_inplace(
            layernorm_backward(b.ln2, c.ln2c, grad_n2, g.ln2_gain, g.ln2_bias));
        if (delta_u_capture) *delta_u_capture = grad_u;
        Matrix grad_n1 = attention_backward(b.attn, c.attnc, grad_u, g.attn);
        Matrix grad_x_ln =
            layernorm_backward(b.ln1, c.ln1c, grad_n1, g.ln1_gain, g.ln1_bias);
        if (!want_input_grad) return std::nullopt;
        Matrix grad_x = grad_u;
        grad_x.add_inplace(grad_x_ln);
        return grad_x;
    }
    // out = LN2(u + FFN(u)); u = LN1(x + Attn(x))
    Matrix grad_r2 =
        layernorm_backward(b.ln2, c.ln2c, grad_out, g.ln2_gain, g.ln2_bias);
    Matrix grad_u = grad_r2;
    grad_u.add_inplace(detail::block_ffn_path_backward(b, c, grad_r2, g));
    if (delta_u_capture) *delta_u_capture = grad_u;
    Matrix grad_r1 = layernorm_backward(b.ln1, c.ln1c, grad_u, g.ln1_gain, g.ln1_bias);
    Matrix grad_x_attn = attention_backward(b.attn, c.attnc, grad_r1, g.attn);
    if (!want_input_grad) return std::nullopt;
    Matrix grad_x = grad_r1;
    grad_x.add_inplace(grad_x_attn);
    return grad_x;
}

// Micro-granularity regions: each sub-layer trains from the signal injected at
// its own residual output and does not propagate further down.

inline void block_attn_sublayer_backward(const TransformerBlock& b, const BlockCache& c,
                                         const Matrix& delta_u, BlockGrads& g) {
    detail::ensure_block_grads(b, g);
    if (b.pre_norm) {
        // u = x + Attn(LN1(x))
        Matrix grad_n1 = attention_backward(b.attn, c.attnc, delta_u, g.attn);
        layernorm_backward(b.ln1, c.ln1c, grad_n1, g.ln1_gain, g.ln1_bias);
    } else {
        // u = LN1(x + Attn(x))
        Matrix grad_r1 =
            layernorm_backward(b.ln1, c.ln1c, delta_u, g.ln1_gain, g.ln1_bias);
        attention_backward(b.attn, c.attnc, grad_r1, g.attn);
    }
}

inline void block_ffn_sublayer_backward(const TransformerBlock& b, const BlockCache& c,
                                        const Matrix& delta_out, BlockGrads& g) {
    detail::ensure_block_grads(b, g);
    if (b.pre_norm) {
        // out = u + FFN(LN2(u))
        Matrix grad_n2 = detail::block_ffn_path_backward(b, c, delta_out, g);
        layernorm_backward(b.ln2, c.ln2c, grad_n2, g.ln2_gain, g.ln2_bias);
    } else {
        // out = LN2(u + FFN(u))
        Matrix grad_r2 =
            layernorm_backward(b.ln2, c.ln2c, delta_out, g.ln2_gain, g.ln2_bias);
        detail::block_ffn_path_backward(b, c, grad_r2, g);
    }
}

// ---------------------------------------------------------------------------
// Token embedding
// ---------------------------------------------------------------------------

struct EmbeddingLayer {
    Matrix table;  // vocab x d_model
    bool sinusoidal_positions = true;

    std::size_t vocab() const { return table.rows(); }
    std::size_t d_model() const { return table.cols(); }
};

inline EmbeddingLayer make_embedding(SeededRng& rng, std::size_t vocab,
                                     std::size_t d_model, bool positions) {
    const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
    EmbeddingLayer e;
    e.table = uniform_matrix(rng, vocab, d_model, -s, s);
    e.sinusoidal_positions = positions;
    return e;
}

inline void add_sinusoidal_positions(Matrix& h) {
    const std::size_t d = h.cols();
    for (std::size_t t = 0; t < h.rows(); ++t) {
        double* row = h.row_ptr(t);
        for (std::size_t j = 0; j + 1 < d; j += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(j) /
                                                      static_cast<double>(d));
            row[j] += std::sin(static_cast<double>(t) * freq);
            row[j + 1] += std::cos(static_cast<double>(t) * freq);
        }
    }
}

inline Matrix embedding_forward(const EmbeddingLayer& e, const std::vector<int>& ids) {
    if (ids.empty()) throw ParameterError("embedding_forward: empty id sequence");
    Matrix h(ids.size(), e.d_model());
    for (std::size_t t = 0; t < ids.size(); ++t) {
        const int id = ids[t];
        if (id < 0 || static_cast<std::size_t>(id) >= e.vocab())
            throw ParameterError("embedding_forward: id " + std::to_string(id) +
                                 " out of vocab " + std::to_string(e.vocab()));
        const double* src = e.table.row_ptr(static_cast<std::size_t>(id));
        double* dst = h.row_ptr(t);
        for (std::size_t j = 0; j < e.d_model(); ++j) dst[j] = src[j];
    }
    if (e.sinusoidal_positions) add_sinusoidal_positions(h);
    return h;
}

inline void embedding_backward(const EmbeddingLayer& e, const std::vector<int>& ids,
                               const Matrix& grad_h, Matrix& grad_table) {
    if (grad_table.empty()) grad_table = Matrix(e.vocab(), e.d_model());
    for (std::size_t t = 0; t < ids.size(); ++t) {
        double* dst = grad_table.row_ptr(static_cast<std::size_t>(ids[t]));
        const double* src = grad_h.row_ptr(t);
        for (std::size_t j = 0; j < e.d_model(); ++j) dst[j] += src[j];
    }
}

}  // namespace dfa
