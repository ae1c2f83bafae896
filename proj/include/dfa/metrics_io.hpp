#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "dfa/alignment.hpp"

namespace dfa {

struct MetricsRow {
    std::size_t epoch = 0;
    std::string split;  // train | val | test
    double loss = 0.0;
    double metric = 0.0;  // accuracy or perplexity
    double lr = 0.0;
    double wall_ms = 0.0;
};

inline std::string format_metrics_csv(const std::vector<MetricsRow>& rows) {
    std::string out = "epoch,split,loss,metric,lr,wall_ms\n";
    char buf[160];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%s,%.10g,%.10g,%.10g,%.10g\n", r.epoch,
                      r.split.c_str(), r.loss, r.metric, r.lr, r.wall_ms);
        out += buf;
    }
    return out;
}

inline std::string format_alignment_csv(const std::vector<AlignmentRecord>& records) {
    std::string out = "epoch,layer_id,mean_cosine,std_cosine,n\n";
    char buf[160];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof buf, "%d,%s,%.10g,%.10g,%zu\n", r.epoch,
                      r.layer_id.c_str(), r.mean_cosine, r.std_cosine, r.sample_count);
        out += buf;
    }
    return out;
}

inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
    std::vector<MetricsRow> rows;
    std::size_t pos = text.find('\n');
    if (pos == std::string::npos) return rows;
    ++pos;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        if (line.empty()) continue;
        MetricsRow r;
        char split[32] = {0};
        if (std::sscanf(line.c_str(), "%zu,%31[^,],%lg,%lg,%lg,%lg", &r.epoch, split,
                        &r.loss, &r.metric, &r.lr, &r.wall_ms) == 6) {
            r.split = split;
            rows.push_back(std::move(r));
        }
    }
    return rows;
}

}  // namespace dfa
