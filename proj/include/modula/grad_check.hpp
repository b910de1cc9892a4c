#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "modula/graph.hpp"

namespace modula {

/// One line per checked parameter tensor.
struct GradCheckEntry {
    std::string name;
    double max_rel_err = 0.0;
    bool ok = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst = 0.0;
    bool ok = true;

    const GradCheckEntry& entry(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return e;
        throw std::invalid_argument("grad_check: no entry named " + name);
    }
};

/// Builds the scalar loss on a fresh graph. The callable must bind the
/// checked parameter tensors itself (via Graph::param) and be a pure
/// function of their current values.
using LossBuilder = std::function<NodeId(Graph&)>;

namespace detail {
inline double eval_loss(const LossBuilder& build) {
    Graph g;
    NodeId loss = build(g);
    const Tensor& t = g.value(loss);
    if (!t.is_scalar())
        throw std::invalid_argument("grad_check: function must produce a scalar, got shape " + t.shape_str());
    return t.data[0];
}
}  // namespace detail

/// Central-difference gradient verification. Compares reverse-mode
/// gradients of `build` against (f(x+eps)-f(x-eps))/(2 eps) for every
/// element of every listed parameter. The error metric is
/// |ad - fd| / max(1, |ad|, |fd|), reported per tensor as a maximum.
///
/// Non-determinism is detected by evaluating the function twice up
/// front; any disagreement throws.
inline GradCheckReport grad_check(const LossBuilder& build,
                                  const std::vector<std::pair<std::string, Tensor*>>& params,
                                  double eps = 1e-5, double tol = 1e-5) {
    if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");

    double f0 = detail::eval_loss(build);
    double f1 = detail::eval_loss(build);
    if (f0 != f1)
        throw std::runtime_error("grad_check: function is not deterministic (two forward passes disagree)");

    // Reverse-mode gradients.
    std::vector<std::vector<double>> ad;
    std::vector<bool> saved_req;
    for (auto& [name, t] : params) {
        saved_req.push_back(t->requires_grad);
        t->requires_grad = true;
        t->clear_grad();
    }
    {
        Graph g;
        NodeId loss = build(g);
        g.backward(loss);
    }
    for (auto& [name, t] : params) {
        t->ensure_grad();
        ad.push_back(t->grad);
        t->clear_grad();
    }
    for (size_t i = 0; i < params.size(); ++i) params[i].second->requires_grad = saved_req[i];

    GradCheckReport report;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor* t = params[pi].second;
        GradCheckEntry entry;
        entry.name = params[pi].first;
        for (size_t i = 0; i < t->data.size(); ++i) {
            double orig = t->data[i];
            t->data[i] = orig + eps;
            double fp = detail::eval_loss(build);
            t->data[i] = orig - eps;
            double fm = detail::eval_loss(build);
            t->data[i] = orig;
            double fd = (fp - fm) / (2.0 * eps);
            double a = ad[pi][i];
            double rel = std::fabs(a - fd) / std::max({1.0, std::fabs(a), std::fabs(fd)});
            entry.max_rel_err = std::max(entry.max_rel_err, rel);
        }
        entry.ok = entry.max_rel_err <= tol;
        report.worst = std::max(report.worst, entry.max_rel_err);
        report.ok = report.ok && entry.ok;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace modula
