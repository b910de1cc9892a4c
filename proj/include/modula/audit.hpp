#pragma once

#include <string>

#include <json.hpp>

#include "modula/training.hpp"

namespace modula {

enum class AuditScenario { full_retrain, plug_task };

inline const char* audit_scenario_name(AuditScenario s) {
    return s == AuditScenario::full_retrain ? "full_retrain" : "plug_task";
}

inline AuditScenario audit_scenario_from(const std::string& s) {
    if (s == "full_retrain") return AuditScenario::full_retrain;
    if (s == "plug_task") return AuditScenario::plug_task;
    throw std::invalid_argument("unknown audit scenario: " + s);
}

/// Parameter-cost report for a scenario. `trained` counts the adapter
/// parameters the scenario would update; `total` counts every adapter
/// parameter (universal + all experts + router) over all sites. For
/// plug_task the trained set is one domain expert plus the router.
struct ParamAuditReport {
    AuditScenario scenario = AuditScenario::full_retrain;
    int n_sites = 0;
    int n_domain_experts = 0;
    int64_t universal_params = 0;
    int64_t expert_params = 0;  // all domain experts
    int64_t router_params = 0;
    int64_t trained = 0;
    int64_t total = 0;
    double fraction = 1.0;

    nlohmann::json to_json() const {
        return {{"scenario", audit_scenario_name(scenario)},
                {"n_sites", n_sites},
                {"n_domain_experts", n_domain_experts},
                {"universal_params", universal_params},
                {"expert_params", expert_params},
                {"router_params", router_params},
                {"trained_params", trained},
                {"total_adapter_params", total},
                {"trained_fraction", fraction}};
    }
};

/// Pure-arithmetic audit from dimensions; works at any scale without
/// allocating a single tensor.
inline ParamAuditReport param_audit_from_config(const RunConfig& cfg, int n_domain_experts,
                                                AuditScenario scenario) {
    if (n_domain_experts < 1) throw std::invalid_argument("param audit: need at least one domain expert");
    ParamAuditReport r;
    r.scenario = scenario;
    r.n_domain_experts = n_domain_experts;
    for (int layer = 0; layer < cfg.base.n_layers; ++layer) {
        for (SiteTag tag : cfg.base.adapter_sites) {
            auto [d_in, d_out] = cfg.base.site_dims(tag);
            StackParamCount c = param_count_from_dims(cfg.variant, d_in, d_out, cfg.universal_rank,
                                                      cfg.domain_rank, n_domain_experts, true,
                                                      cfg.flan_universal_routed);
            r.n_sites += 1;
            r.universal_params += c.universal;
            r.expert_params += static_cast<int64_t>(n_domain_experts) * c.per_expert;
            r.router_params += c.router;
            r.total += c.total;
            if (scenario == AuditScenario::plug_task)
                r.trained += c.per_expert + c.router;
        }
    }
    if (scenario == AuditScenario::full_retrain) r.trained = r.total;
    r.fraction = static_cast<double>(r.trained) / static_cast<double>(r.total);
    return r;
}

/// Audit of an actual state: enumerates every adapter tensor and
/// classifies it per scenario. Totals agree with the arithmetic audit
/// by construction (same closed forms, cross-checked in tests).
inline ParamAuditReport param_audit(TrainState& s, AuditScenario scenario) {
    ParamAuditReport r;
    r.scenario = scenario;
    std::string last_tag;
    for (auto& [ref, st] : s.stacks) {
        r.n_sites += 1;
        StackParamCount c = param_count(st);
        r.universal_params += c.universal;
        r.router_params += c.router;
        for (const auto& e : st.domain_experts) r.expert_params += e.param_count();
        r.total += c.total;
        r.n_domain_experts = static_cast<int>(st.domain_experts.size());
        if (!st.domain_experts.empty()) last_tag = st.domain_experts.back().domain_tag;
        if (scenario == AuditScenario::plug_task) {
            if (st.domain_experts.empty())
                throw std::invalid_argument("param audit: plug_task scenario needs at least one domain expert");
            // the most recently added expert stands in for "the new one"
            r.trained += st.domain_experts.back().param_count() + c.router;
        }
    }
    if (scenario == AuditScenario::full_retrain) r.trained = r.total;
    r.fraction = static_cast<double>(r.trained) / static_cast<double>(r.total);
    return r;
}

}  // namespace modula
