#pragma once

// Flat, sectioned key=value experiment configuration. Unknown keys are
// rejected so typos never silently change a run. parse(serialize(c)) == c.

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dfa/errors.hpp"
#include "dfa/feedback.hpp"
#include "dfa/network.hpp"
#include "dfa/training.hpp"

namespace dfa {

enum class TaskKind { Blobs, Sbm, Cora, CharLm };

inline const char* to_string(TaskKind t) {
    switch (t) {
        case TaskKind::Blobs: return "blobs";
        case TaskKind::Sbm: return "sbm";
        case TaskKind::Cora: return "cora";
        case TaskKind::CharLm: return "char_lm";
    }
    return "?";
}

struct ExperimentConfig {
    // experiment
    TaskKind task = TaskKind::Blobs;
    TrainMode mode = TrainMode::BP;
    std::uint64_t seed = 42;
    std::size_t epochs = 50;
    std::string output_dir = "runs/out";
    std::size_t workers = 1;
    bool timing = false;          // fill the metrics.csv wall_ms column
    std::size_t alignment_every = 0;  // 0 = only after training (DFA runs)

    // architecture
    std::vector<std::size_t> widths{16};  // hidden widths (feature networks)
    std::string activation = "relu";
    std::size_t depth = 0;  // feature nets: widths+1 (checked); char_lm: blocks
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t d_ff = 256;
    std::string block_norm = "pre";
    bool causal = true;
    std::size_t chunk_length = 64;
    bool positional = true;

    // feedback
    std::string granularity = "per_layer";
    std::string feedback_scale = "target";
    bool shared_master = false;

    // optimizer
    std::string optimizer = "adam";
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double dropout = 0.0;

    // scheduler
    std::string scheduler = "none";
    double factor = 0.2;
    int patience = 1;

    // dataset
    std::size_t n_per_class = 250;  // blobs
    std::size_t classes = 8;
    std::size_t dim = 16;
    double spread = 0.35;
    std::size_t n_per_community = 100;  // sbm
    std::size_t communities = 4;
    double p_in = 0.1;
    double p_out = 0.01;
    double feature_noise = 1.0;
    std::size_t train_per_class = 20;
    std::size_t val_per_class = 30;
    std::string data_dir = "data/planetoid";  // cora
    std::string dataset_name = "cora";
    std::string corpus_path;  // char_lm; empty -> deterministic synthetic corpus
    std::size_t corpus_bytes = 1000000;
    std::uint64_t corpus_seed = 7;
    std::size_t batch_chunks = 16;
    std::size_t epoch_batches = 60;
    std::size_t eval_chunks = 100;

    // train
    std::size_t batch_size = 32;

    std::string serialize() const;
    void validate() const;

    TrainMode train_mode() const { return mode; }
    FeedbackGranularity feedback_granularity() const {
        if (granularity == "per_layer") return FeedbackGranularity::PerLayer;
        if (granularity == "macro") return FeedbackGranularity::Macro;
        if (granularity == "micro") return FeedbackGranularity::Micro;
        throw ConfigError("unknown feedback granularity '" + granularity + "'");
    }
    FeedbackScaleRule scale_rule() const {
        if (feedback_scale == "target") return FeedbackScaleRule::Target;
        if (feedback_scale == "output") return FeedbackScaleRule::Output;
        throw ConfigError("unknown feedback scale rule '" + feedback_scale + "'");
    }
    OptimizerKind optimizer_kind() const {
        if (optimizer == "sgd") return OptimizerKind::Sgd;
        if (optimizer == "adam") return OptimizerKind::Adam;
        throw ConfigError("unknown optimizer '" + optimizer + "'");
    }

    bool operator==(const ExperimentConfig& o) const {
        return serialize() == o.serialize();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected boolean, got '" + v + "'");
}

inline double parse_real(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (...) {
        throw ConfigError("key '" + key + "': expected number, got '" + v + "'");
    }
}

inline std::uint64_t parse_uint(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        const auto u = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return u;
    } catch (...) {
        throw ConfigError("key '" + key + "': expected unsigned integer, got '" + v + "'");
    }
}

inline std::vector<std::size_t> parse_size_list(const std::string& v,
                                                const std::string& key) {
    std::vector<std::size_t> out;
    std::string item;
    std::istringstream ss(v);
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_uint(item, key));
    }
    if (out.empty()) throw ConfigError("key '" + key + "': expected width list");
    return out;
}

}  // namespace detail

inline void apply_config_key(ExperimentConfig& c, const std::string& section,
                             const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_real;
    using detail::parse_size_list;
    using detail::parse_uint;
    const std::string full = section.empty() ? key : section + "." + key;

    if (section.empty()) {
        if (key == "task") {
            if (value == "blobs") c.task = TaskKind::Blobs;
            else if (value == "sbm") c.task = TaskKind::Sbm;
            else if (value == "cora") c.task = TaskKind::Cora;
            else if (value == "char_lm") c.task = TaskKind::CharLm;
            else throw ConfigError("unknown task '" + value + "'");
            return;
        }
        if (key == "mode") {
            if (value == "bp") c.mode = TrainMode::BP;
            else if (value == "dfa") c.mode = TrainMode::DFA;
            else if (value == "shallow") c.mode = TrainMode::Shallow;
            else throw ConfigError("unknown mode '" + value + "'");
            return;
        }
        if (key == "seed") { c.seed = parse_uint(value, full); return; }
        if (key == "epochs") { c.epochs = parse_uint(value, full); return; }
        if (key == "output_dir") { c.output_dir = value; return; }
        if (key == "workers") { c.workers = parse_uint(value, full); return; }
        if (key == "timing") { c.timing = parse_bool(value, full); return; }
        if (key == "alignment_every") { c.alignment_every = parse_uint(value, full); return; }
    } else if (section == "architecture") {
        if (key == "widths") { c.widths = parse_size_list(value, full); return; }
        if (key == "activation") { c.activation = value; return; }
        if (key == "depth") { c.depth = parse_uint(value, full); return; }
        if (key == "d_model") { c.d_model = parse_uint(value, full); return; }
        if (key == "heads") { c.heads = parse_uint(value, full); return; }
        if (key == "d_ff") { c.d_ff = parse_uint(value, full); return; }
        if (key == "block_norm") { c.block_norm = value; return; }
        if (key == "causal") { c.causal = parse_bool(value, full); return; }
        if (key == "chunk_length") { c.chunk_length = parse_uint(value, full); return; }
        if (key == "positional") { c.positional = parse_bool(value, full); return; }
    } else if (section == "feedback") {
        if (key == "granularity") { c.granularity = value; return; }
        if (key == "scale") { c.feedback_scale = value; return; }
        if (key == "shared_master") { c.shared_master = parse_bool(value, full); return; }
    } else if (section == "optimizer") {
        if (key == "kind") { c.optimizer = value; return; }
        if (key == "lr") { c.lr = parse_real(value, full); return; }
        if (key == "beta1") { c.beta1 = parse_real(value, full); return; }
        if (key == "beta2") { c.beta2 = parse_real(value, full); return; }
        if (key == "eps") { c.eps = parse_real(value, full); return; }
        if (key == "weight_decay") { c.weight_decay = parse_real(value, full); return; }
        if (key == "dropout") { c.dropout = parse_real(value, full); return; }
    } else if (section == "scheduler") {
        if (key == "kind") { c.scheduler = value; return; }
        if (key == "factor") { c.factor = parse_real(value, full); return; }
        if (key == "patience") { c.patience = static_cast<int>(parse_uint(value, full)); return; }
    } else if (section == "dataset") {
        if (key == "n_per_class") { c.n_per_class = parse_uint(value, full); return; }
        if (key == "classes") { c.classes = parse_uint(value, full); return; }
        if (key == "dim") { c.dim = parse_uint(value, full); return; }
        if (key == "spread") { c.spread = parse_real(value, full); return; }
        if (key == "n_per_community") { c.n_per_community = parse_uint(value, full); return; }
        if (key == "communities") { c.communities = parse_uint(value, full); return; }
        if (key == "p_in") { c.p_in = parse_real(value, full); return; }
        if (key == "p_out") { c.p_out = parse_real(value, full); return; }
        if (key == "feature_noise") { c.feature_noise = parse_real(value, full); return; }
        if (key == "train_per_class") { c.train_per_class = parse_uint(value, full); return; }
        if (key == "val_per_class") { c.val_per_class = parse_uint(value, full); return; }
        if (key == "data_dir") { c.data_dir = value; return; }
        if (key == "name") { c.dataset_name = value; return; }
        if (key == "corpus_path") { c.corpus_path = value; return; }
        if (key == "corpus_bytes") { c.corpus_bytes = parse_uint(value, full); return; }
        if (key == "corpus_seed") { c.corpus_seed = parse_uint(value, full); return; }
        if (key == "batch_chunks") { c.batch_chunks = parse_uint(value, full); return; }
        if (key == "epoch_batches") { c.epoch_batches = parse_uint(value, full); return; }
        if (key == "eval_chunks") { c.eval_chunks = parse_uint(value, full); return; }
    } else if (section == "train") {
        if (key == "batch_size") { c.batch_size = parse_uint(value, full); return; }
    } else {
        throw ConfigError("unknown section '[" + section + "]'");
    }
    throw ConfigError("unknown key '" + full + "'");
}

inline ExperimentConfig parse_config(const std::string& text) {
    ExperimentConfig c;
    std::istringstream in(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(line_no) + ": bad section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        try {
            apply_config_key(c, section, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return c;
}

inline ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    ExperimentConfig c = parse_config(buf.str());
    if (const char* env = std::getenv("DFA_ENGINE_SEED")) {
        c.seed = detail::parse_uint(env, "DFA_ENGINE_SEED");
    }
    return c;
}

inline std::string ExperimentConfig::serialize() const {
    std::ostringstream out;
    char buf[64];
    auto real = [&buf](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    out << "task = " << to_string(task) << "\n";
    out << "mode = " << to_string(mode) << "\n";
    out << "seed = " << seed << "\n";
    out << "epochs = " << epochs << "\n";
    out << "output_dir = " << output_dir << "\n";
    out << "workers = " << workers << "\n";
    out << "timing = " << (timing ? "on" : "off") << "\n";
    out << "alignment_every = " << alignment_every << "\n";
    out << "\n[architecture]\n";
    out << "widths = ";
    for (std::size_t i = 0; i < widths.size(); ++i) out << (i ? "," : "") << widths[i];
    out << "\n";
    out << "activation = " << activation << "\n";
    out << "depth = " << depth << "\n";
    out << "d_model = " << d_model << "\n";
    out << "heads = " << heads << "\n";
    out << "d_ff = " << d_ff << "\n";
    out << "block_norm = " << block_norm << "\n";
    out << "causal = " << (causal ? "true" : "false") << "\n";
    out << "chunk_length = " << chunk_length << "\n";
    out << "positional = " << (positional ? "true" : "false") << "\n";
    out << "\n[feedback]\n";
    out << "granularity = " << granularity << "\n";
    out << "scale = " << feedback_scale << "\n";
    out << "shared_master = " << (shared_master ? "true" : "false") << "\n";
    out << "\n[optimizer]\n";
    out << "kind = " << optimizer << "\n";
    out << "lr = " << real(lr) << "\n";
    out << "beta1 = " << real(beta1) << "\n";
    out << "beta2 = " << real(beta2) << "\n";
    out << "eps = " << real(eps) << "\n";
    out << "weight_decay = " << real(weight_decay) << "\n";
    out << "dropout = " << real(dropout) << "\n";
    out << "\n[scheduler]\n";
    out << "kind = " << scheduler << "\n";
    out << "factor = " << real(factor) << "\n";
    out << "patience = " << patience << "\n";
    out << "\n[dataset]\n";
    out << "n_per_class = " << n_per_class << "\n";
    out << "classes = " << classes << "\n";
    out << "dim = " << dim << "\n";
    out << "spread = " << real(spread) << "\n";
    out << "n_per_community = " << n_per_community << "\n";
    out << "communities = " << communities << "\n";
    out << "p_in = " << real(p_in) << "\n";
    out << "p_out = " << real(p_out) << "\n";
    out << "feature_noise = " << real(feature_noise) << "\n";
    out << "train_per_class = " << train_per_class << "\n";
    out << "val_per_class = " << val_per_class << "\n";
    out << "data_dir = " << data_dir << "\n";
    out << "name = " << dataset_name << "\n";
    out << "corpus_path = " << corpus_path << "\n";
    out << "corpus_bytes = " << corpus_bytes << "\n";
    out << "corpus_seed = " << corpus_seed << "\n";
    out << "batch_chunks = " << batch_chunks << "\n";
    out << "epoch_batches = " << epoch_batches << "\n";
    out << "eval_chunks = " << eval_chunks << "\n";
    out << "\n[train]\n";
    out << "batch_size = " << batch_size << "\n";
    return out.str();
}

inline void ExperimentConfig::validate() const {
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (workers == 0) throw ConfigError("workers must be >= 1");
    activation_from_string(activation);  // throws on bad name
    (void)feedback_granularity();
    (void)scale_rule();
    (void)optimizer_kind();
    if (scheduler != "none" && scheduler != "plateau")
        throw ConfigError("unknown scheduler '" + scheduler + "'");
    if (block_norm != "pre" && block_norm != "post")
        throw ConfigError("block_norm must be pre or post");
    if (!(dropout >= 0.0 && dropout < 1.0))
        throw ConfigError("dropout must be in [0, 1)");
    const bool is_lm = task == TaskKind::CharLm;
    if (is_lm) {
        if (granularity == "per_layer")
            throw ConfigError("char_lm requires feedback granularity macro or micro");
        if (d_model % heads != 0)
            throw ConfigError("d_model must be divisible by heads");
        if (depth == 0) throw ConfigError("char_lm: depth (block count) must be >= 1");
        if (chunk_length == 0 || batch_chunks == 0 || epoch_batches == 0)
            throw ConfigError("char_lm: chunk/batch settings must be positive");
    } else {
        if (granularity != "per_layer")
            throw ConfigError("granularity '" + granularity + "' is only valid for char_lm");
        if (widths.empty()) throw ConfigError("widths must name at least one hidden layer");
        if (depth != 0 && depth != widths.size() + 1)
            throw ConfigError("depth " + std::to_string(depth) +
                              " inconsistent with widths (+1 output layer)");
        if (task == TaskKind::Blobs && batch_size == 0)
            throw ConfigError("batch_size must be positive");
    }
}

}  // namespace dfa
