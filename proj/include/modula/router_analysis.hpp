#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "modula/evaluate.hpp"
#include "modula/training.hpp"

namespace modula {

/// Mean routing vector and its entropy for one (layer, site, task)
/// cell, averaged post-softmax over every token of the task's held-out
/// sequences.
struct RouterCell {
    int layer = 0;
    SiteTag site = SiteTag::attn_q;
    std::string task;
    std::vector<std::string> expert_labels;  // index-aligned with mean
    std::vector<double> mean;
    double entropy = 0.0;
};

struct RouterReport {
    std::vector<RouterCell> cells;

    const RouterCell& cell(int layer, SiteTag site, const std::string& task) const {
        for (const auto& c : cells)
            if (c.layer == layer && c.site == site && c.task == task) return c;
        throw std::invalid_argument("router report: no cell for layer " + std::to_string(layer) + " site " +
                                    site_tag_name(site) + " task " + task);
    }

    /// Mean weight of the expert whose tag equals the task id.
    double matching_weight(int layer, SiteTag site, const std::string& task) const {
        const RouterCell& c = cell(layer, site, task);
        for (size_t i = 0; i < c.expert_labels.size(); ++i)
            if (c.expert_labels[i] == task) return c.mean[i];
        throw std::invalid_argument("router report: no expert tagged '" + task + "'");
    }
};

/// Routing-distribution analysis over held-out data. Requires a state
/// whose routers exist and are active (stage 3, or a trained molora
/// single-stage state). Routing vectors are recorded per token during
/// teacher-forced forwards of each evaluation sequence and averaged per
/// (layer, site, task). An empty `layers` list selects all layers.
inline RouterReport analyze_router(TrainState& s, const std::vector<TaskSpec>& tasks, int eval_samples,
                                   std::vector<int> layers = {}) {
    if (s.stage.kind != StageKind::stage3 && s.stage.kind != StageKind::single_stage)
        throw std::invalid_argument("analyze_router: requires a stage-3 state, got " + s.stage.label());
    for (auto& [ref, st] : s.stacks)
        if (st.variant != Variant::plain && !st.router)
            throw std::invalid_argument("analyze_router: no router at site " + ref.name());
    if (layers.empty())
        for (int i = 0; i < s.config.base.n_layers; ++i) layers.push_back(i);

    RouterReport report;
    for (const TaskSpec& spec : tasks) {
        TaskSpec bounded = spec;
        bounded.max_len = s.config.base.max_seq;
        std::vector<Example> eval_set = generate_eval(bounded, eval_samples);

        std::map<SiteRef, std::pair<std::vector<double>, int64_t>> acc;  // sums, token count
        RouteTraceFn trace = [&](const SiteRef& ref, const Tensor& routing) {
            auto& [sums, count] = acc[ref];
            int rows = routing.shape[0], n = routing.shape[1];
            if (sums.empty()) sums.assign(static_cast<size_t>(n), 0.0);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < n; ++j) sums[static_cast<size_t>(j)] += routing.at(i, j);
            count += rows;
        };
        for (const Example& ex : eval_set) {
            std::vector<int> seq = ex.input;
            seq.insert(seq.end(), ex.target.begin(), ex.target.end());
            Graph g;
            base_forward(g, s.base, s.config.base, s.stacks, seq, s.stage, trace);
        }

        for (auto& [ref, sums_count] : acc) {
            if (std::find(layers.begin(), layers.end(), ref.layer) == layers.end()) continue;
            auto& [sums, count] = sums_count;
            RouterCell cell;
            cell.layer = ref.layer;
            cell.site = ref.tag;
            cell.task = spec.id;
            cell.expert_labels = s.stacks.at(ref).routed_labels();
            cell.mean.resize(sums.size());
            for (size_t j = 0; j < sums.size(); ++j) cell.mean[j] = sums[j] / static_cast<double>(count);
            cell.entropy = 0.0;
            for (double p : cell.mean)
                if (p > 0.0) cell.entropy -= p * std::log(p);
            report.cells.push_back(std::move(cell));
        }
    }
    return report;
}

inline std::string format_weight(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

/// Flat grid for external heatmap tooling, one row per
/// (layer, site, task, expert).
inline void write_router_csv(const RouterReport& report, const std::filesystem::path& path) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write router report: " + path.string());
    out << "layer,site,task,expert,mean_weight,entropy\n";
    for (const auto& c : report.cells)
        for (size_t j = 0; j < c.mean.size(); ++j)
            out << c.layer << ',' << site_tag_name(c.site) << ',' << c.task << ',' << c.expert_labels[j]
                << ',' << format_weight(c.mean[j]) << ',' << format_weight(c.entropy) << "\n";
}

}  // namespace modula
