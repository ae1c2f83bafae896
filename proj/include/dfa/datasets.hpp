#pragma once

// Synthetic generators and file ingestion for the three task families:
// tabular blobs, stochastic-block-model graphs (plus citation networks in the
// textual Planetoid layout described below), and character-level text.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dfa/matrix.hpp"
#include "dfa/rng.hpp"

namespace dfa {

// ---------------------------------------------------------------------------
// Tabular
// ---------------------------------------------------------------------------

struct TabularDataset {
    Matrix features;  // n x d
    Matrix labels;    // n x c, one-hot
    std::vector<int> train_idx, val_idx, test_idx;

    std::size_t size() const { return features.rows(); }
    std::size_t n_classes() const { return labels.cols(); }
};

namespace detail {

inline void shuffle_indices(std::vector<int>& idx, SeededRng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i)
        std::swap(idx[i - 1], idx[rng.next_u64() % i]);
}

}  // namespace detail

// Gaussian clusters centered on unit-simplex vertices, 80/10/10 split.
inline TabularDataset gen_blobs(SeededRng& rng, std::size_t n_per_class,
                                std::size_t n_classes, std::size_t dim, double spread) {
    if (n_per_class == 0 || n_classes == 0 || dim == 0)
        throw ParameterError("gen_blobs: counts must be positive");
    if (n_classes > dim)
        throw ParameterError("gen_blobs: n_classes " + std::to_string(n_classes) +
                             " exceeds dim " + std::to_string(dim) +
                             " (simplex means need one axis per class)");
    const std::size_t n = n_per_class * n_classes;
    TabularDataset ds;
    ds.features = Matrix(n, dim);
    ds.labels = Matrix(n, n_classes);
    for (std::size_t c = 0; c < n_classes; ++c)
        for (std::size_t s = 0; s < n_per_class; ++s) {
            const std::size_t row = c * n_per_class + s;
            for (std::size_t j = 0; j < dim; ++j) {
                const double mean = (j == c) ? 1.0 : 0.0;
                ds.features(row, j) = mean + (spread > 0.0 ? rng.normal(0.0, spread) : 0.0);
            }
            ds.labels(row, c) = 1.0;
        }
    std::vector<int> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
    detail::shuffle_indices(idx, rng);
    const std::size_t n_train = (n * 8) / 10;
    const std::size_t n_val = n / 10;
    ds.train_idx.assign(idx.begin(), idx.begin() + n_train);
    ds.val_idx.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
    ds.test_idx.assign(idx.begin() + n_train + n_val, idx.end());
    return ds;
}

inline void export_tabular_csv(const TabularDataset& ds, std::ostream& out) {
    out << "split,label";
    for (std::size_t j = 0; j < ds.features.cols(); ++j) out << ",f" << j;
    out << "\n";
    std::vector<std::string> split(ds.size(), "train");
    for (int i : ds.val_idx) split[static_cast<std::size_t>(i)] = "val";
    for (int i : ds.test_idx) split[static_cast<std::size_t>(i)] = "test";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        std::size_t label = 0;
        for (std::size_t c = 1; c < ds.labels.cols(); ++c)
            if (ds.labels(i, c) > ds.labels(i, label)) label = c;
        out << split[i] << "," << label;
        char buf[32];
        for (std::size_t j = 0; j < ds.features.cols(); ++j) {
            std::snprintf(buf, sizeof buf, ",%.9g", ds.features(i, j));
            out << buf;
        }
        out << "\n";
    }
}

// ---------------------------------------------------------------------------
// Graphs
// ---------------------------------------------------------------------------

struct GraphDataset {
    Matrix adjacency;  // n x n, {0,1}, symmetric, zero diagonal
    Matrix features;   // n x d
    Matrix labels;     // n x c, one-hot (all-zero rows allowed for unlabeled)
    std::vector<int> train_idx, val_idx, test_idx;

    std::size_t size() const { return adjacency.rows(); }
    std::size_t n_classes() const { return labels.cols(); }

    std::vector<int> labeled_rows() const {
        std::vector<int> rows;
        for (std::size_t i = 0; i < labels.rows(); ++i)
            for (std::size_t j = 0; j < labels.cols(); ++j)
                if (labels(i, j) != 0.0) {
                    rows.push_back(static_cast<int>(i));
                    break;
                }
        return rows;
    }
};

// Stochastic block model with one-hot community features plus Gaussian noise
// and a citation-style semi-supervised split (a few labeled nodes per class).
inline GraphDataset gen_sbm_graph(SeededRng& rng, std::size_t n_per_community,
                                  std::size_t k_communities, double p_in, double p_out,
                                  double feature_noise,
                                  std::size_t train_per_class = 20,
                                  std::size_t val_per_class = 30) {
    if (n_per_community == 0 || k_communities == 0)
        throw ParameterError("gen_sbm_graph: counts must be positive");
    if (!(0.0 <= p_out && p_out < p_in && p_in <= 1.0))
        throw ParameterError("gen_sbm_graph: need 0 <= p_out < p_in <= 1, got p_in=" +
                             std::to_string(p_in) + " p_out=" + std::to_string(p_out));
    if (train_per_class + val_per_class > n_per_community)
        throw ParameterError("gen_sbm_graph: split sizes exceed community size");
    const std::size_t n = n_per_community * k_communities;
    GraphDataset ds;
    ds.adjacency = Matrix(n, n);
    ds.features = Matrix(n, k_communities);
    ds.labels = Matrix(n, k_communities);
    auto community = [n_per_community](std::size_t node) {
        return node / n_per_community;
    };
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double p = community(i) == community(j) ? p_in : p_out;
            if (rng.next_double() < p) ds.adjacency(i, j) = ds.adjacency(j, i) = 1.0;
        }
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = community(i);
        ds.labels(i, c) = 1.0;
        for (std::size_t j = 0; j < k_communities; ++j)
            ds.features(i, j) = (j == c ? 1.0 : 0.0) +
                                (feature_noise > 0.0 ? rng.normal(0.0, feature_noise) : 0.0);
    }
    for (std::size_t c = 0; c < k_communities; ++c) {
        std::vector<int> nodes(n_per_community);
        for (std::size_t s = 0; s < n_per_community; ++s)
            nodes[s] = static_cast<int>(c * n_per_community + s);
        detail::shuffle_indices(nodes, rng);
        for (std::size_t s = 0; s < n_per_community; ++s) {
            if (s < train_per_class)
                ds.train_idx.push_back(nodes[s]);
            else if (s < train_per_class + val_per_class)
                ds.val_idx.push_back(nodes[s]);
            else
                ds.test_idx.push_back(nodes[s]);
        }
    }
    std::sort(ds.train_idx.begin(), ds.train_idx.end());
    std::sort(ds.val_idx.begin(), ds.val_idx.end());
    std::sort(ds.test_idx.begin(), ds.test_idx.end());
    return ds;
}

// ---------------------------------------------------------------------------
// Planetoid citation networks (textual layout)
// ---------------------------------------------------------------------------
//
// The loader reads the standard eight-file family ind.<name>.{x, tx, allx, y,
// ty, ally, graph, test.index} in a line-oriented textual record layout (the
// upstream binary pickles are converted once with tools/planetoid_to_text.py):
//
//   ind.<name>.x, .tx, .allx   "SPARSE <rows> <cols> <nnz>" header, then one
//                              "<row> <col> <value>" line per nonzero.
//   ind.<name>.y, .ty, .ally   "DENSE <rows> <cols>" header, then <rows>
//                              lines of <cols> space-separated 0/1 ints.
//   ind.<name>.graph           one line per node: "<node>: <nbr> <nbr> ...".
//   ind.<name>.test.index      one node index per line (same content as the
//                              upstream distribution).
//
// Reconstruction follows the canonical convention: allx occupies node rows
// [0, allx.rows); tx row i lands at node test.index[i]; train mask is the
// first y.rows nodes, validation the next 500 (clamped to allx.rows), test
// the sorted test.index. Directed citation edges are symmetrized and self
// loops dropped. Any malformed record fails with the file name and line.

namespace detail {

struct TextFileReader {
    std::string path;
    std::ifstream in;
    std::size_t line_no = 0;

    explicit TextFileReader(const std::string& p) : path(p), in(p) {
        if (!in) throw IngestError("cannot open '" + path + "'");
    }

    bool next_line(std::string& line) {
        if (!std::getline(in, line)) return false;
        ++line_no;
        return true;
    }

    [[noreturn]] void fail(const std::string& what) const {
        throw IngestError("'" + path + "' line " + std::to_string(line_no) + ": " + what);
    }
};

inline Matrix read_planetoid_matrix(const std::string& path) {
    TextFileReader r(path);
    std::string line;
    if (!r.next_line(line)) r.fail("empty file");
    std::istringstream head(line);
    std::string tag;
    std::size_t rows = 0, cols = 0;
    head >> tag >> rows >> cols;
    if (tag == "SPARSE") {
        std::size_t nnz = 0;
        if (!(head >> nnz)) r.fail("SPARSE header missing nnz");
        if (rows == 0 || cols == 0) r.fail("zero dims in header");
        Matrix m(rows, cols);
        for (std::size_t e = 0; e < nnz; ++e) {
            if (!r.next_line(line)) r.fail("expected " + std::to_string(nnz) + " entries");
            std::istringstream ls(line);
            std::size_t i = 0, j = 0;
            double v = 0.0;
            if (!(ls >> i >> j >> v)) r.fail("malformed sparse entry");
            if (i >= rows || j >= cols) r.fail("entry out of bounds");
            m(i, j) = v;
        }
        return m;
    }
    if (tag == "DENSE") {
        if (rows == 0 || cols == 0) r.fail("zero dims in header");
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < rows; ++i) {
            if (!r.next_line(line)) r.fail("expected " + std::to_string(rows) + " rows");
            std::istringstream ls(line);
            for (std::size_t j = 0; j < cols; ++j)
                if (!(ls >> m(i, j))) r.fail("row " + std::to_string(i) + " too short");
        }
        return m;
    }
    r.fail("unknown header tag '" + tag + "' (expected SPARSE or DENSE)");
}

}  // namespace detail

inline GraphDataset load_planetoid(const std::string& dir, const std::string& name) {
    const std::string base = dir + "/ind." + name + ".";
    Matrix x = detail::read_planetoid_matrix(base + "x");
    Matrix y = detail::read_planetoid_matrix(base + "y");
    Matrix allx = detail::read_planetoid_matrix(base + "allx");
    Matrix ally = detail::read_planetoid_matrix(base + "ally");
    Matrix tx = detail::read_planetoid_matrix(base + "tx");
    Matrix ty = detail::read_planetoid_matrix(base + "ty");

    if (x.rows() != y.rows())
        throw IngestError("'" + base + "x' rows " + std::to_string(x.rows()) +
                          " != '" + base + "y' rows " + std::to_string(y.rows()));
    if (x.cols() != allx.cols() || tx.cols() != allx.cols())
        throw IngestError("feature widths disagree across x/allx/tx for '" + name + "'");
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j)
            if (x(i, j) != allx(i, j))
                throw IngestError("'" + base + "x' is not a prefix of allx at (" +
                                  std::to_string(i) + "," + std::to_string(j) +
                                  "); format drift?");

    // graph: node count and adjacency
    detail::TextFileReader gr(base + "graph");
    std::vector<std::vector<std::size_t>> nbrs;
    std::string line;
    while (gr.next_line(line)) {
        if (line.empty()) continue;
        const auto colon = line.find(':');
        if (colon == std::string::npos) gr.fail("expected '<node>: <neighbors>'");
        std::size_t node = 0;
        try {
            node = static_cast<std::size_t>(std::stoull(line.substr(0, colon)));
        } catch (...) {
            gr.fail("bad node id");
        }
        if (node >= nbrs.size()) nbrs.resize(node + 1);
        std::istringstream ls(line.substr(colon + 1));
        std::size_t nb = 0;
        while (ls >> nb) nbrs[node].push_back(nb);
    }
    const std::size_t n = nbrs.size();
    if (n == 0) throw IngestError("'" + base + "graph' has no nodes");

    // test indices
    detail::TextFileReader ti(base + "test.index");
    std::vector<std::size_t> test_index;
    while (ti.next_line(line)) {
        if (line.empty()) continue;
        try {
            test_index.push_back(static_cast<std::size_t>(std::stoull(line)));
        } catch (...) {
            ti.fail("bad index");
        }
    }
    if (test_index.size() != tx.rows())
        throw IngestError("'" + base + "test.index' count " +
                          std::to_string(test_index.size()) + " != tx rows " +
                          std::to_string(tx.rows()));
    for (std::size_t idx : test_index)
        if (idx < allx.rows() || idx >= n)
            throw IngestError("'" + base + "test.index' value " + std::to_string(idx) +
                              " outside [allx.rows, n)");

    GraphDataset ds;
    ds.features = Matrix(n, allx.cols());
    ds.labels = Matrix(n, y.cols());
    for (std::size_t i = 0; i < allx.rows(); ++i) {
        for (std::size_t j = 0; j < allx.cols(); ++j) ds.features(i, j) = allx(i, j);
        for (std::size_t j = 0; j < ally.cols(); ++j) ds.labels(i, j) = ally(i, j);
    }
    for (std::size_t r = 0; r < test_index.size(); ++r) {
        const std::size_t i = test_index[r];
        for (std::size_t j = 0; j < tx.cols(); ++j) ds.features(i, j) = tx(r, j);
        for (std::size_t j = 0; j < ty.cols(); ++j) ds.labels(i, j) = ty(r, j);
    }

    ds.adjacency = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t nb : nbrs[i]) {
            if (nb >= n)
                throw IngestError("'" + base + "graph' neighbor " + std::to_string(nb) +
                                  " out of range for node " + std::to_string(i));
            if (nb == i) continue;  // drop self loops
            ds.adjacency(i, nb) = ds.adjacency(nb, i) = 1.0;  // symmetrize
        }

    const std::size_t n_train = y.rows();
    const std::size_t val_end = std::min(n_train + 500, allx.rows());
    for (std::size_t i = 0; i < n_train; ++i) ds.train_idx.push_back(static_cast<int>(i));
    for (std::size_t i = n_train; i < val_end; ++i) ds.val_idx.push_back(static_cast<int>(i));
    std::vector<std::size_t> sorted_test = test_index;
    std::sort(sorted_test.begin(), sorted_test.end());
    for (std::size_t i : sorted_test) ds.test_idx.push_back(static_cast<int>(i));
    return ds;
}

// Canonical text round-trip form for a parsed graph dataset.
inline std::string serialize_graph_canonical(const GraphDataset& ds) {
    std::ostringstream out;
    out << "GRAPH " << ds.size() << " " << ds.features.cols() << " "
        << ds.labels.cols() << "\n";
    char buf[40];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.features.cols(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", ds.features(i, j));
            out << (j ? " " : "") << buf;
        }
        out << "\n";
    }
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.labels.cols(); ++j)
            out << (j ? " " : "") << static_cast<int>(ds.labels(i, j));
        out << "\n";
    }
    std::size_t edges = 0;
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t j = i + 1; j < ds.size(); ++j)
            if (ds.adjacency(i, j) != 0.0) ++edges;
    out << "EDGES " << edges << "\n";
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t j = i + 1; j < ds.size(); ++j)
            if (ds.adjacency(i, j) != 0.0) out << i << " " << j << "\n";
    auto dump = [&out](const char* tag, const std::vector<int>& idx) {
        out << tag;
        for (int i : idx) out << " " << i;
        out << "\n";
    };
    dump("TRAIN", ds.train_idx);
    dump("VAL", ds.val_idx);
    dump("TEST", ds.test_idx);
    return out.str();
}

inline GraphDataset parse_graph_canonical(const std::string& text) {
    std::istringstream in(text);
    std::string tag;
    std::size_t n = 0, d = 0, c = 0;
    in >> tag >> n >> d >> c;
    if (tag != "GRAPH" || n == 0)
        throw IngestError("canonical graph: bad header");
    GraphDataset ds;
    ds.features = Matrix(n, d);
    ds.labels = Matrix(n, c);
    ds.adjacency = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            if (!(in >> ds.features(i, j))) throw IngestError("canonical graph: features truncated");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j)
            if (!(in >> ds.labels(i, j))) throw IngestError("canonical graph: labels truncated");
    std::size_t edges = 0;
    in >> tag >> edges;
    if (tag != "EDGES") throw IngestError("canonical graph: missing EDGES");
    for (std::size_t e = 0; e < edges; ++e) {
        std::size_t i = 0, j = 0;
        if (!(in >> i >> j)) throw IngestError("canonical graph: edges truncated");
        ds.adjacency(i, j) = ds.adjacency(j, i) = 1.0;
    }
    auto read_idx = [&in](const char* expect, std::vector<int>& out) {
        std::string t, rest;
        in >> t;
        if (t != expect) throw IngestError(std::string("canonical graph: expected ") + expect);
        std::getline(in, rest);
        std::istringstream ls(rest);
        int v = 0;
        while (ls >> v) out.push_back(v);
    };
    read_idx("TRAIN", ds.train_idx);
    read_idx("VAL", ds.val_idx);
    read_idx("TEST", ds.test_idx);
    return ds;
}

// ---------------------------------------------------------------------------
// Character-level text
// ---------------------------------------------------------------------------

struct TextDataset {
    std::vector<int> ids;             // full corpus as token ids
    std::vector<std::uint32_t> vocab;  // id -> codepoint; id 0 is <unk>
    std::size_t chunk_length = 0;
    std::size_t train_end = 0;  // [0, train_end) train
    std::size_t val_end = 0;    // [train_end, val_end) val, rest test

    std::size_t vocab_size() const { return vocab.size(); }

    struct Region {
        std::size_t begin, end;
    };
    Region region(int split) const {  // 0 train, 1 val, 2 test
        if (split == 0) return {0, train_end};
        if (split == 1) return {train_end, val_end};
        return {val_end, ids.size()};
    }

    // Non-overlapping chunks; each needs chunk_length + 1 ids for the shifted
    // target.
    std::size_t chunk_count(int split) const {
        const Region r = region(split);
        const std::size_t len = r.end - r.begin;
        return len > chunk_length ? (len - 1) / chunk_length : 0;
    }

    void chunk(int split, std::size_t index, std::vector<int>& input,
               std::vector<int>& target) const {
        const Region r = region(split);
        const std::size_t start = r.begin + index * chunk_length;
        input.assign(ids.begin() + start, ids.begin() + start + chunk_length);
        target.assign(ids.begin() + start + 1, ids.begin() + start + chunk_length + 1);
    }
};

namespace detail {

// Decodes UTF-8; malformed bytes map to U+FFFD.
inline std::vector<std::uint32_t> utf8_codepoints(const std::string& bytes) {
    std::vector<std::uint32_t> cps;
    std::size_t i = 0;
    while (i < bytes.size()) {
        const auto b0 = static_cast<unsigned char>(bytes[i]);
        std::size_t len = 1;
        std::uint32_t cp = 0xFFFD;
        if (b0 < 0x80) {
            cp = b0;
        } else if ((b0 >> 5) == 0x6)
            len = 2;
        else if ((b0 >> 4) == 0xE)
            len = 3;
        else if ((b0 >> 3) == 0x1E)
            len = 4;
        if (len > 1) {
            if (i + len <= bytes.size()) {
                cp = b0 & (0x7F >> len);
                bool ok = true;
                for (std::size_t k = 1; k < len; ++k) {
                    const auto bk = static_cast<unsigned char>(bytes[i + k]);
                    ok = ok && (bk >> 6) == 0x2;
                    cp = (cp << 6) | (bk & 0x3F);
                }
                if (!ok) {
                    cp = 0xFFFD;
                    len = 1;
                }
            } else {
                len = 1;
            }
        }
        cps.push_back(cp);
        i += len;
    }
    return cps;
}

}  // namespace detail

// Character-level ids with a 256-codepoint working set (first-seen order);
// anything beyond maps to the unknown token. 90/5/5 contiguous split.
inline TextDataset load_text_chars_from_string(const std::string& bytes,
                                               std::size_t chunk_length) {
    if (chunk_length == 0)
        throw ParameterError("load_text_chars: chunk_length must be positive");
    if (bytes.empty()) throw IngestError("text corpus is empty");

    TextDataset ds;
    ds.chunk_length = chunk_length;
    ds.vocab.push_back(0xFFFD);  // id 0: <unk>
    std::map<std::uint32_t, int> to_id;
    const auto cps = detail::utf8_codepoints(bytes);
    ds.ids.reserve(cps.size());
    for (std::uint32_t cp : cps) {
        auto it = to_id.find(cp);
        if (it == to_id.end()) {
            if (ds.vocab.size() < 256) {
                const int id = static_cast<int>(ds.vocab.size());
                ds.vocab.push_back(cp);
                it = to_id.emplace(cp, id).first;
            } else {
                ds.ids.push_back(0);
                continue;
            }
        }
        ds.ids.push_back(it->second);
    }
    ds.train_end = (ds.ids.size() * 90) / 100;
    ds.val_end = (ds.ids.size() * 95) / 100;
    return ds;
}

inline TextDataset load_text_chars(const std::string& path, std::size_t chunk_length) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    if (buf.str().empty()) throw IngestError("'" + path + "' is empty");
    return load_text_chars_from_string(buf.str(), chunk_length);
}

// Seeded English-like filler with a fixed word-successor structure, so a
// character model has real bigram/word statistics to learn. Used by the
// char_lm presets when no corpus file is given.
inline std::string gen_text_corpus(std::uint64_t seed, std::size_t approx_bytes) {
    static const char* kWords[] = {
        "the",     "of",      "and",     "to",       "in",      "is",
        "was",     "for",     "on",      "are",      "with",    "as",
        "at",      "by",      "from",    "that",     "this",    "it",
        "an",      "be",      "or",      "which",    "one",     "had",
        "not",     "but",     "what",    "all",      "were",    "when",
        "there",   "can",     "more",    "other",    "some",    "time",
        "these",   "two",     "may",     "then",     "do",      "first",
        "any",     "new",     "work",    "part",     "take",    "place",
        "made",    "live",    "where",   "after",    "back",    "little",
        "only",    "round",   "year",    "came",     "show",    "every",
        "good",    "under",   "name",    "very",     "through", "just",
        "form",    "sentence", "great",  "think",    "say",     "help",
        "low",     "line",    "differ",  "turn",     "cause",   "much",
        "mean",    "before",  "move",    "right",    "boy",     "old",
        "too",     "same",    "tell",    "does",     "set",     "three",
        "want",    "air",     "well",    "also",     "play",    "small",
        "end",     "put",     "home",    "read",     "hand",    "port",
        "large",   "spell",   "add",     "even",     "land",    "here",
        "must",    "big",     "high",    "such",     "follow",  "act",
        "why",     "ask",     "men",     "change",   "went",    "light",
        "kind",    "off",     "need",    "house",    "picture", "try",
        "again",   "animal",  "point",   "mother",   "world",   "near",
    };
    constexpr std::size_t kBank = sizeof(kWords) / sizeof(kWords[0]);
    SeededRng rng(seed);
    std::string out;
    out.reserve(approx_bytes + 64);
    std::size_t word = rng.next_u64() % kBank;
    bool sentence_start = true;
    std::size_t words_in_sentence = 0;
    std::size_t sentences_in_paragraph = 0;
    const std::size_t sentence_len = 6;
    while (out.size() < approx_bytes) {
        std::string w = kWords[word];
        if (sentence_start) w[0] = static_cast<char>(w[0] - 'a' + 'A');
        out += w;
        sentence_start = false;
        ++words_in_sentence;
        // fixed successor fan-out gives the text stable word bigrams
        const std::uint64_t pick = rng.next_u64();
        if (pick % 10 == 0) {
            word = rng.next_u64() % kBank;
        } else {
            static const std::size_t strides[] = {7, 13, 31, 47};
            word = (word * 3 + strides[pick % 4] + 1) % kBank;
        }
        if (words_in_sentence >= sentence_len + pick % 7) {
            out += ".";
            ++sentences_in_paragraph;
            words_in_sentence = 0;
            sentence_start = true;
            if (sentences_in_paragraph >= 8 + pick % 5) {
                out += "\n\n";
                sentences_in_paragraph = 0;
            } else {
                out += " ";
            }
        } else {
            out += (pick % 17 == 3) ? ", " : " ";
        }
    }
    out += "\n";
    return out;
}

}  // namespace dfa
