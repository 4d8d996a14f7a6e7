#pragma once

#include <optional>
#include <string_view>
#include <utility>

#include "ragopt/embedding.hpp"

namespace ragopt {

enum class Action { Fetch, NoFetch };

// Where a query is routed: static FAQ answer, full RAG, or LLM without fresh context.
enum class Route { Static, Fetch, NoFetch };

enum class GateMode { AllFetch, SimThr, SimThrPolicy, PolicyOnly };

std::string_view to_string(Action a);
std::string_view to_string(Route r);
std::string_view to_string(GateMode m);
GateMode parse_gate_mode(std::string_view s);

inline constexpr double kDefaultThreshold = 0.92;

struct GateConfig {
    double threshold = kDefaultThreshold;
    GateMode mode = GateMode::SimThrPolicy;

    bool uses_policy() const { return mode == GateMode::SimThrPolicy || mode == GateMode::PolicyOnly; }
    bool uses_threshold() const { return mode == GateMode::SimThr || mode == GateMode::SimThrPolicy; }
    void validate() const;
};

struct GateDecision {
    Route route = Route::Fetch;
    ScoredFaq top1;
    // (p_fetch, p_no_fetch) when the policy was consulted.
    std::optional<std::pair<double, double>> policy_probs;
};

// True when the threshold shortcut fires for this score.
bool clears_threshold(const GateConfig& config, double score);

// Pure routing rule. The threshold is checked first (score >= threshold),
// the policy only below it. Throws MissingPolicyAction when the mode needs
// the policy's action and none was given.
GateDecision decide(const GateConfig& config, const ScoredFaq& top1, std::optional<Action> policy_action,
                    std::optional<std::pair<double, double>> policy_probs = std::nullopt);

}  // namespace ragopt
