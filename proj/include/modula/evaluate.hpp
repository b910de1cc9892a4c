#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "modula/training.hpp"

namespace modula {

struct TaskMetrics {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    int n_examples = 0;
};

struct EvalReport {
    std::map<std::string, TaskMetrics> per_task;
    double macro_accuracy = 0.0;
    double macro_loss = 0.0;
    int64_t step = 0;
};

/// Greedy continuation of a prompt by `n_new` tokens. Ties break toward
/// the lowest token id.
inline std::vector<int> greedy_decode(TrainState& s, const std::vector<int>& prompt, int n_new) {
    std::vector<int> tokens = prompt;
    for (int k = 0; k < n_new; ++k) {
        Graph g;
        NodeId logits = base_forward(g, s.base, s.config.base, s.stacks, tokens, s.stage);
        const Tensor& L = g.value(logits);
        int last = L.shape[0] - 1;
        int best = 0;
        double best_v = L.at(last, 0);
        for (int j = 1; j < L.shape[1]; ++j)
            if (L.at(last, j) > best_v) {
                best_v = L.at(last, j);
                best = j;
            }
        tokens.push_back(best);
    }
    return std::vector<int>(tokens.begin() + static_cast<long>(prompt.size()), tokens.end());
}

/// Teacher-forced mean cross entropy over the answer positions of one
/// example.
inline double example_loss(TrainState& s, const Example& ex) {
    Batch b;
    fill_row(b, ex, ex.length());
    Graph g;
    NodeId logits = base_forward(g, s.base, s.config.base, s.stacks, b.tokens[0], s.stage);
    NodeId loss = g.cross_entropy_rows(logits, b.targets[0], b.mask[0]);
    return g.value(loss).data[0];
}

/// Exact-sequence-match accuracy and mean loss per task on held-out
/// splits (seed-partitioned, disjoint from training), plus the macro
/// averages over tasks.
inline EvalReport evaluate(TrainState& s, const std::vector<TaskSpec>& tasks, int eval_samples) {
    if (tasks.empty()) throw std::invalid_argument("evaluate: no tasks");
    EvalReport report;
    report.step = s.step;
    for (const TaskSpec& spec : tasks) {
        TaskSpec bounded = spec;
        bounded.max_len = s.config.base.max_seq;
        std::vector<Example> eval_set = generate_eval(bounded, eval_samples);
        TaskMetrics m;
        m.n_examples = static_cast<int>(eval_set.size());
        int exact = 0;
        double loss_sum = 0.0;
        for (const Example& ex : eval_set) {
            std::vector<int> got = greedy_decode(s, ex.input, static_cast<int>(ex.target.size()));
            if (got == ex.target) ++exact;
            loss_sum += example_loss(s, ex);
        }
        m.accuracy = static_cast<double>(exact) / m.n_examples;
        m.mean_loss = loss_sum / m.n_examples;
        report.per_task[spec.id] = m;
    }
    for (const auto& [id, m] : report.per_task) {
        report.macro_accuracy += m.accuracy;
        report.macro_loss += m.mean_loss;
    }
    report.macro_accuracy /= static_cast<double>(report.per_task.size());
    report.macro_loss /= static_cast<double>(report.per_task.size());
    return report;
}

/// Mean loss over a dataset without updating anything. Used for router
/// validation comparisons.
inline double dataset_loss(TrainState& s, const std::vector<Example>& examples) {
    if (examples.empty()) throw std::invalid_argument("dataset_loss: empty dataset");
    double sum = 0.0;
    for (const Example& ex : examples) sum += example_loss(s, ex);
    return sum / static_cast<double>(examples.size());
}

inline nlohmann::json metrics_json(const EvalReport& r) {
    nlohmann::json tasks = nlohmann::json::object();
    for (const auto& [id, m] : r.per_task)
        tasks[id] = {{"accuracy", m.accuracy}, {"mean_loss", m.mean_loss}, {"n_examples", m.n_examples}};
    return {{"tasks", tasks},
            {"macro_accuracy", r.macro_accuracy},
            {"macro_loss", r.macro_loss},
            {"step", r.step}};
}

/// metrics.json carries only run-deterministic fields, so identical
/// (config, seed) runs produce byte-identical files. Wall time goes to
/// the separate timings sidecar written by the CLI.
inline void write_metrics(const EvalReport& r, const std::filesystem::path& path) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write metrics file: " + path.string());
    out << metrics_json(r).dump(2) << "\n";
}

}  // namespace modula
