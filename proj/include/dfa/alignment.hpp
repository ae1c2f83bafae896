#pragma once

#include <cmath>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "dfa/training.hpp"

namespace dfa {

// Per-layer cosine alignment between the DFA-delivered signal B_i delta_ay
// and the signal BP would deliver at the same boundary, on a shared trace.
struct AlignmentRecord {
    std::string layer_id;
    double mean_cosine = 0.0;
    double std_cosine = 0.0;
    std::size_t sample_count = 0;
    std::size_t skipped = 0;  // zero-norm samples, excluded from the mean
    int epoch = 0;
};

// Accumulates per-sample cosines across any number of traces (batches or
// text chunks) before producing records.
class AlignmentAccumulator {
public:
    explicit AlignmentAccumulator(const Network& net) : net_(&net) {
        if (net.mode != TrainMode::DFA)
            throw ModeError("alignment requires a DFA-mode network");
        net.validate_feedback();
        attachments_ = net.attachments();
        cosines_.resize(attachments_.size());
        skipped_.assign(attachments_.size(), 0);
    }

    // delta_ay must come from the same trace. Parameters are never touched.
    void add(const ForwardTrace& trace, const Matrix& delta_ay) {
        BoundaryCapture capture;
        backward_bp(*net_, trace, delta_ay, &capture);
        for (std::size_t ai = 0; ai < attachments_.size(); ++ai) {
            const Matrix dfa_sig = broadcast_error(net_->feedback[ai], delta_ay);
            const Matrix& bp_sig = capture.deltas.at(attachments_[ai].id);
            for (std::size_t r = 0; r < dfa_sig.rows(); ++r) {
                const auto a = dfa_sig.row(r);
                const auto b = bp_sig.row(r);
                if (norm2(a) == 0.0 || norm2(b) == 0.0) {
                    ++skipped_[ai];
                    continue;
                }
                cosines_[ai].push_back(cosine_similarity(a, b));
            }
        }
    }

    std::vector<AlignmentRecord> records(int epoch = 0) const {
        std::vector<AlignmentRecord> out;
        for (std::size_t ai = 0; ai < attachments_.size(); ++ai) {
            AlignmentRecord rec;
            rec.layer_id = attachments_[ai].id;
            rec.epoch = epoch;
            rec.skipped = skipped_[ai];
            rec.sample_count = cosines_[ai].size();
            if (rec.sample_count > 0) {
                double mean = 0.0;
                for (double c : cosines_[ai]) mean += c;
                mean /= static_cast<double>(rec.sample_count);
                double var = 0.0;
                for (double c : cosines_[ai]) var += (c - mean) * (c - mean);
                var /= static_cast<double>(rec.sample_count);
                rec.mean_cosine = mean;
                rec.std_cosine = std::sqrt(var);
            }
            if (rec.skipped > 0)
                std::cerr << "[alignment] warning: " << rec.skipped
                          << " zero-norm samples skipped at " << rec.layer_id << "\n";
            out.push_back(std::move(rec));
        }
        return out;
    }

private:
    const Network* net_;
    std::vector<Attachment> attachments_;
    std::vector<std::vector<double>> cosines_;
    std::vector<std::size_t> skipped_;
};

// Feature networks (tabular and graph). Rows of the batch are the samples;
// for graphs pass the full node set and the labeled rows as the mask.
inline std::vector<AlignmentRecord> measure_alignment(
    const Network& net, const Matrix& x, const Matrix& y, LossKind loss,
    const std::vector<int>* mask_rows = nullptr, int epoch = 0) {
    AlignmentAccumulator acc(net);
    ForwardTrace tr = forward_trace(net, x);
    LossResult lr = mask_rows ? loss_and_error_masked(loss, tr.output(), y, *mask_rows)
                              : loss_and_error(loss, tr.output(), y);
    acc.add(tr, lr.delta);
    return acc.records(epoch);
}

}  // namespace dfa
