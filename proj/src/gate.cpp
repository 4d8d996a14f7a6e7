#include "ragopt/gate.hpp"

#include <cmath>
#include <string>

#include "ragopt/error.hpp"

namespace ragopt {

std::string_view to_string(Action a) { return a == Action::Fetch ? "FETCH" : "NO_FETCH"; }

std::string_view to_string(Route r) {
    switch (r) {
        case Route::Static: return "STATIC";
        case Route::Fetch: return "FETCH";
        case Route::NoFetch: return "NO_FETCH";
    }
    return "FETCH";
}

std::string_view to_string(GateMode m) {
    switch (m) {
        case GateMode::AllFetch: return "ALL_FETCH";
        case GateMode::SimThr: return "SIMTHR";
        case GateMode::SimThrPolicy: return "SIMTHR_POLICY";
        case GateMode::PolicyOnly: return "POLICY_ONLY";
    }
    return "ALL_FETCH";
}

GateMode parse_gate_mode(std::string_view s) {
    if (s == "ALL_FETCH" || s == "all-fetch") return GateMode::AllFetch;
    if (s == "SIMTHR" || s == "simthr") return GateMode::SimThr;
    if (s == "SIMTHR_POLICY" || s == "simthr-policy") return GateMode::SimThrPolicy;
    if (s == "POLICY_ONLY" || s == "policy-only") return GateMode::PolicyOnly;
    throw ValidationError("unknown gate mode '" + std::string(s) + "'");
}

void GateConfig::validate() const {
    if (!(threshold > 0.0 && threshold <= 1.0)) throw ValidationError("threshold must lie in (0, 1]");
}

bool clears_threshold(const GateConfig& config, double score) { return config.uses_threshold() && score >= config.threshold; }

GateDecision decide(const GateConfig& config, const ScoredFaq& top1, std::optional<Action> policy_action,
                    std::optional<std::pair<double, double>> policy_probs) {
    config.validate();
    GateDecision d{Route::Fetch, top1, std::nullopt};
    if (config.mode == GateMode::AllFetch) return d;
    if (clears_threshold(config, top1.score)) {
        d.route = Route::Static;
        return d;
    }
    if (config.mode == GateMode::SimThr) return d;
    if (!policy_action) throw MissingPolicyAction(std::string("mode ") + std::string(to_string(config.mode)) + " needs a policy action");
    if (policy_probs && std::abs(policy_probs->first + policy_probs->second - 1.0) > 1e-6)
        throw ValidationError("policy probabilities do not sum to 1");
    d.route = *policy_action == Action::Fetch ? Route::Fetch : Route::NoFetch;
    d.policy_probs = policy_probs;
    return d;
}

}  // namespace ragopt
