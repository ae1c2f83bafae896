#pragma once

// Versioned binary checkpoint: config echo, every parameter, feedback
// matrices (shared master stored once), optimizer moments, RNG stream states,
// scheduler state and counters. Reload reproduces the next step bitwise.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "dfa/config.hpp"
#include "dfa/network.hpp"
#include "dfa/training.hpp"

namespace dfa {

namespace detail {

struct BinWriter {
    std::string buf;

    void u8(std::uint8_t v) { buf.push_back(static_cast<char>(v)); }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void str(const std::string& s) {
        u64(s.size());
        buf.append(s);
    }
    void matrix(const Matrix& m) {
        u64(m.rows());
        u64(m.cols());
        for (double v : m.flat()) f64(v);
    }
};

struct BinReader {
    const std::string& buf;
    std::size_t pos = 0;

    explicit BinReader(const std::string& b) : buf(b) {}

    void need(std::size_t n) const {
        if (pos + n > buf.size())
            throw IngestError("checkpoint truncated at offset " + std::to_string(pos));
    }
    std::uint8_t u8() {
        need(1);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() {
        const std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str() {
        const std::uint64_t n = u64();
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    Matrix matrix() {
        const std::uint64_t r = u64(), c = u64();
        Matrix m(r, c);
        for (auto& v : m.data()) v = f64();
        return m;
    }
};

}  // namespace detail

// Atomic write: temp file in the same directory, then rename.
inline void atomic_write_file(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IngestError("cannot write '" + tmp + "'");
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw IngestError("short write to '" + tmp + "'");
    }
    std::filesystem::rename(tmp, path);
}

struct Checkpoint {
    ExperimentConfig config;
    std::size_t epochs_done = 0;
    std::map<std::string, Matrix> params;
    std::vector<FeedbackMatrix> feedback;
    OptimizerState optimizer;
    std::array<std::uint64_t, 4> shuffle_state{};
    std::array<std::uint64_t, 4> dropout_state{};
    PlateauScheduler scheduler;
    double best_val_metric = 0.0;
    std::size_t best_epoch = 0;
    std::map<std::string, Matrix> best_params;  // parameters at the best epoch
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
    detail::BinWriter w;
    w.buf.append("DFACKPT1");
    w.u64(1);  // format version
    w.str(ck.config.serialize());
    w.u64(ck.epochs_done);

    w.u64(ck.params.size());
    for (const auto& [name, m] : ck.params) {
        w.str(name);
        w.matrix(m);
    }

    // feedback: shared masters written once, slices reference them by index
    std::vector<const Matrix*> storages;
    for (const auto& fb : ck.feedback) {
        bool seen = false;
        for (const auto* s : storages) seen = seen || s == fb.storage().get();
        if (!seen) storages.push_back(fb.storage().get());
    }
    w.u64(storages.size());
    for (const auto* s : storages) w.matrix(*s);
    w.u64(ck.feedback.size());
    for (const auto& fb : ck.feedback) {
        w.str(fb.layer_id());
        std::size_t idx = 0;
        for (; idx < storages.size(); ++idx)
            if (storages[idx] == fb.storage().get()) break;
        w.u64(idx);
        w.u64(fb.out_dim());
        w.u64(fb.error_dim());
        w.f64(fb.scale());
    }

    w.u8(ck.optimizer.kind == OptimizerKind::Adam ? 1 : 0);
    w.f64(ck.optimizer.lr);
    w.f64(ck.optimizer.beta1);
    w.f64(ck.optimizer.beta2);
    w.f64(ck.optimizer.eps);
    w.f64(ck.optimizer.weight_decay);
    w.u64(ck.optimizer.step);
    w.u64(ck.optimizer.m.size());
    for (const auto& [name, m] : ck.optimizer.m) {
        w.str(name);
        w.matrix(m);
        w.matrix(ck.optimizer.v.at(name));
    }

    for (auto s : ck.shuffle_state) w.u64(s);
    for (auto s : ck.dropout_state) w.u64(s);

    w.f64(ck.scheduler.factor);
    w.u64(static_cast<std::uint64_t>(ck.scheduler.patience));
    w.f64(ck.scheduler.best_metric);
    w.u64(static_cast<std::uint64_t>(ck.scheduler.wait));

    w.f64(ck.best_val_metric);
    w.u64(ck.best_epoch);
    w.u64(ck.best_params.size());
    for (const auto& [name, m] : ck.best_params) {
        w.str(name);
        w.matrix(m);
    }
    return w.buf;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
    if (bytes.size() < 8 || bytes.compare(0, 8, "DFACKPT1") != 0)
        throw IngestError("checkpoint: bad magic");
    detail::BinReader r(bytes);
    r.pos = 8;
    const std::uint64_t version = r.u64();
    if (version != 1)
        throw IngestError("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    ck.config = parse_config(r.str());
    ck.epochs_done = r.u64();

    const std::uint64_t n_params = r.u64();
    for (std::uint64_t i = 0; i < n_params; ++i) {
        std::string name = r.str();
        ck.params.emplace(std::move(name), r.matrix());
    }

    const std::uint64_t n_storage = r.u64();
    std::vector<std::shared_ptr<const Matrix>> storages;
    for (std::uint64_t i = 0; i < n_storage; ++i)
        storages.push_back(std::make_shared<Matrix>(r.matrix()));
    const std::uint64_t n_fb = r.u64();
    for (std::uint64_t i = 0; i < n_fb; ++i) {
        std::string id = r.str();
        const std::uint64_t idx = r.u64();
        if (idx >= storages.size()) throw IngestError("checkpoint: bad feedback storage index");
        const std::uint64_t od = r.u64(), ed = r.u64();
        const double scale = r.f64();
        ck.feedback.emplace_back(std::move(id), storages[idx], od, ed, scale);
    }

    ck.optimizer.kind = r.u8() ? OptimizerKind::Adam : OptimizerKind::Sgd;
    ck.optimizer.lr = r.f64();
    ck.optimizer.beta1 = r.f64();
    ck.optimizer.beta2 = r.f64();
    ck.optimizer.eps = r.f64();
    ck.optimizer.weight_decay = r.f64();
    ck.optimizer.step = r.u64();
    const std::uint64_t n_m = r.u64();
    for (std::uint64_t i = 0; i < n_m; ++i) {
        std::string name = r.str();
        Matrix m = r.matrix();
        Matrix v = r.matrix();
        ck.optimizer.m.emplace(name, std::move(m));
        ck.optimizer.v.emplace(std::move(name), std::move(v));
    }

    for (auto& s : ck.shuffle_state) s = r.u64();
    for (auto& s : ck.dropout_state) s = r.u64();

    ck.scheduler.factor = r.f64();
    ck.scheduler.patience = static_cast<int>(r.u64());
    ck.scheduler.best_metric = r.f64();
    ck.scheduler.wait = static_cast<int>(r.u64());

    ck.best_val_metric = r.f64();
    ck.best_epoch = r.u64();
    const std::uint64_t n_best = r.u64();
    for (std::uint64_t i = 0; i < n_best; ++i) {
        std::string name = r.str();
        ck.best_params.emplace(std::move(name), r.matrix());
    }
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    atomic_write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open checkpoint '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_checkpoint(buf.str());
}

// Copies checkpointed parameter values into a freshly built network.
inline void restore_params(Network& net, const std::map<std::string, Matrix>& params) {
    for (auto& [name, p] : net.params()) {
        auto it = params.find(name);
        if (it == params.end())
            throw IngestError("checkpoint: missing parameter '" + name + "'");
        if (!it->second.same_shape(*p))
            throw IngestError("checkpoint: parameter '" + name + "' shape " +
                              it->second.shape() + " != expected " + p->shape());
        *p = it->second;
    }
}

}  // namespace dfa
