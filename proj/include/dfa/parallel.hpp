#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "dfa/thread_pool.hpp"
#include "dfa/training.hpp"

namespace dfa {

// DFA's backward unlocking: once delta_ay exists, every attachment region's
// gradient is an independent pure function over shared immutable inputs.

inline UpdatePlan plan_updates(const Network& net, const ForwardTrace& tr,
                               const Matrix& delta_ay) {
    return build_update_plan(net, tr, delta_ay);
}

struct TaskTiming {
    std::string name;
    double millis = 0.0;
    bool completed = false;
};

struct EngineReport {
    std::vector<TaskTiming> tasks;
    double wall_ms = 0.0;
    std::size_t workers = 1;

    // Flat task graph: the critical path is the slowest task, the sequential
    // baseline is the sum.
    double critical_path_ms() const {
        double mx = 0.0;
        for (const auto& t : tasks) mx = std::max(mx, t.millis);
        return mx;
    }
    double sequential_baseline_ms() const {
        double sum = 0.0;
        for (const auto& t : tasks) sum += t.millis;
        return sum;
    }
};

// Runs every task on a pool of `workers` threads and merges the per-task
// gradient sets. Write sets are disjoint, so the merged values are identical
// to the sequential result regardless of scheduling.
inline GradientSet execute_concurrent(const UpdatePlan& plan, std::size_t workers,
                                      EngineReport* report = nullptr) {
    if (workers == 0)
        throw ParameterError("execute_concurrent: workers must be >= 1");
    using clock = std::chrono::steady_clock;
    const auto wall_start = clock::now();

    struct TaskResult {
        GradientSet gs;
        double millis = 0.0;
    };

    ThreadPool pool(workers);
    std::vector<std::future<TaskResult>> futures;
    futures.reserve(plan.tasks.size());
    for (const auto& task : plan.tasks) {
        futures.push_back(pool.submit([&task]() {
            const auto t0 = clock::now();
            TaskResult r;
            r.gs = task.compute();
            r.millis = std::chrono::duration<double, std::milli>(clock::now() - t0).count();
            return r;
        }));
    }

    GradientSet merged;
    std::vector<TaskTiming> timings(plan.tasks.size());
    std::string failure;
    for (std::size_t i = 0; i < futures.size(); ++i) {
        timings[i].name = plan.tasks[i].name;
        try {
            TaskResult r = futures[i].get();
            timings[i].millis = r.millis;
            timings[i].completed = true;
            merged.merge(std::move(r.gs));
        } catch (const std::exception& e) {
            if (failure.empty())
                failure = "task '" + plan.tasks[i].name + "' failed: " + e.what();
        }
    }
    const double wall =
        std::chrono::duration<double, std::milli>(clock::now() - wall_start).count();
    if (report) {
        report->tasks = timings;
        report->wall_ms = wall;
        report->workers = workers;
    }
    if (!failure.empty()) {
        std::string partial = "; partial timings:";
        for (const auto& t : timings)
            partial += " " + t.name + "=" +
                       (t.completed ? std::to_string(t.millis) + "ms" : "incomplete");
        throw std::runtime_error("execute_concurrent aborted: " + failure + partial);
    }
    return merged;
}

}  // namespace dfa
