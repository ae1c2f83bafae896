#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "dfa/matrix.hpp"
#include "dfa/rng.hpp"

namespace dfa {

enum class FeedbackGranularity { PerLayer, Macro, Micro };

inline const char* to_string(FeedbackGranularity g) {
    switch (g) {
        case FeedbackGranularity::PerLayer: return "per_layer";
        case FeedbackGranularity::Macro: return "macro";
        case FeedbackGranularity::Micro: return "micro";
    }
    return "?";
}

// Fixed random projection attached to one hidden attachment point. Entries
// are drawn once and never written again; storage may be a private matrix or
// a leading slice of a shared master (rescaled on read), so a stack of
// equally-sized layers costs one matrix.
class FeedbackMatrix {
public:
    FeedbackMatrix() = default;

    FeedbackMatrix(std::string layer_id, std::shared_ptr<const Matrix> storage,
                   std::size_t out_dim, std::size_t error_dim, double scale)
        : layer_id_(std::move(layer_id)),
          storage_(std::move(storage)),
          out_dim_(out_dim),
          error_dim_(error_dim),
          scale_(scale) {
        if (!storage_ || out_dim_ == 0 || error_dim_ == 0)
            throw ParameterError("FeedbackMatrix: empty storage or zero dims");
        if (storage_->rows() < out_dim_ || storage_->cols() < error_dim_)
            throw ParameterError("FeedbackMatrix: slice " +
                                 shape_str(out_dim_, error_dim_) +
                                 " exceeds storage " + storage_->shape());
    }

    const std::string& layer_id() const { return layer_id_; }
    std::size_t out_dim() const { return out_dim_; }
    std::size_t error_dim() const { return error_dim_; }
    double scale() const { return scale_; }
    const std::shared_ptr<const Matrix>& storage() const { return storage_; }

    double entry(std::size_t i, std::size_t j) const {
        return scale_ * (*storage_)(i, j);
    }

    // Materialized copy (tests and serialization).
    Matrix dense() const {
        Matrix b(out_dim_, error_dim_);
        for (std::size_t i = 0; i < out_dim_; ++i)
            for (std::size_t j = 0; j < error_dim_; ++j) b(i, j) = entry(i, j);
        return b;
    }

    std::uint64_t hash() const { return content_hash(dense()); }

private:
    std::string layer_id_;
    std::shared_ptr<const Matrix> storage_;
    std::size_t out_dim_ = 0;
    std::size_t error_dim_ = 0;
    double scale_ = 1.0;
};

// U(-1,1) entries, whole matrix scaled by 1/sqrt(scale_dim). scale_dim
// defaults to the receiving layer's width; the `output` scale rule passes
// error_dim instead.
inline FeedbackMatrix init_feedback(SeededRng& rng, std::size_t layer_out_dim,
                                    std::size_t error_dim, std::string layer_id = {},
                                    std::size_t scale_dim = 0) {
    if (layer_out_dim == 0 || error_dim == 0)
        throw ParameterError("init_feedback: dims must be positive, got " +
                             shape_str(layer_out_dim, error_dim));
    if (scale_dim == 0) scale_dim = layer_out_dim;
    auto storage = std::make_shared<Matrix>(
        uniform_matrix(rng, layer_out_dim, error_dim, -1.0, 1.0));
    return FeedbackMatrix(std::move(layer_id), std::move(storage), layer_out_dim,
                          error_dim, 1.0 / std::sqrt(static_cast<double>(scale_dim)));
}

// One master matrix backing every layer's feedback as a leading slice.
class SharedFeedbackMaster {
public:
    SharedFeedbackMaster() = default;

    SharedFeedbackMaster(SeededRng& rng, std::size_t max_out_dim, std::size_t error_dim) {
        if (max_out_dim == 0 || error_dim == 0)
            throw ParameterError("init_shared_master: dims must be positive");
        master_ = std::make_shared<Matrix>(
            uniform_matrix(rng, max_out_dim, error_dim, -1.0, 1.0));
    }

    FeedbackMatrix slice_for(std::string layer_id, std::size_t layer_out_dim,
                             std::size_t scale_dim = 0) const {
        if (!master_) throw ContractError("SharedFeedbackMaster: not initialized");
        if (layer_out_dim > master_->rows())
            throw ConfigError("shared feedback master: layer '" + layer_id + "' width " +
                              std::to_string(layer_out_dim) + " exceeds master rows " +
                              std::to_string(master_->rows()));
        if (scale_dim == 0) scale_dim = layer_out_dim;
        return FeedbackMatrix(std::move(layer_id), master_, layer_out_dim,
                              master_->cols(),
                              1.0 / std::sqrt(static_cast<double>(scale_dim)));
    }

    const std::shared_ptr<const Matrix>& master() const { return master_; }

private:
    std::shared_ptr<const Matrix> master_;
};

inline SharedFeedbackMaster init_shared_master(SeededRng& rng, std::size_t max_out_dim,
                                               std::size_t error_dim) {
    return SharedFeedbackMaster(rng, max_out_dim, error_dim);
}

// delta_ay * B^T, one projected row per sample/node/token.
inline Matrix broadcast_error(const FeedbackMatrix& fb, const Matrix& delta_ay) {
    if (delta_ay.cols() != fb.error_dim())
        throw ShapeError("broadcast_error: delta " + delta_ay.shape() +
                         " does not match feedback error_dim " +
                         std::to_string(fb.error_dim()));
    Matrix out(delta_ay.rows(), fb.out_dim());
    const Matrix& b = *fb.storage();
    const double scale = fb.scale();
    for (std::size_t r = 0; r < delta_ay.rows(); ++r) {
        const double* d = delta_ay.row_ptr(r);
        double* o = out.row_ptr(r);
        for (std::size_t i = 0; i < fb.out_dim(); ++i) {
            const double* bi = b.row_ptr(i);
            double acc = 0.0;
            for (std::size_t j = 0; j < fb.error_dim(); ++j) acc += d[j] * bi[j];
            o[i] = acc * scale;
        }
    }
    return out;
}

// Number of stored doubles across unique storages (the shared-master trick
// keeps this at max_out_dim * error_dim however many layers attach).
inline std::size_t feedback_storage_entries(const std::vector<FeedbackMatrix>& set) {
    std::vector<const Matrix*> seen;
    std::size_t total = 0;
    for (const auto& fb : set) {
        const Matrix* p = fb.storage().get();
        bool dup = false;
        for (const Matrix* s : seen) dup = dup || (s == p);
        if (!dup) {
            seen.push_back(p);
            total += p->size();
        }
    }
    return total;
}

}  // namespace dfa
