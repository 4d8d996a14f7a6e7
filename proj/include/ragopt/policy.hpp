#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ragopt/embedding.hpp"
#include "ragopt/gate.hpp"

namespace ragopt {

inline constexpr std::size_t kFeatureDim = 8;
inline constexpr std::size_t kHiddenDim = 16;
inline constexpr std::size_t kActionCount = 2;
inline constexpr std::size_t kStateHistory = 2;
inline constexpr int kPolicyFormatVersion = 1;

using Features = std::array<double, kFeatureDim>;

struct PrevTurn {
    std::string query;
    Action action = Action::Fetch;

    bool operator==(const PrevTurn&) const = default;
};

struct PolicyState {
    // Oldest first, at most two.
    std::vector<PrevTurn> prev;
    std::string current_query;
    Features features{};
};

// "[CLS] <q1> [SEP] <ACTION1> <q2> [SEP] <ACTION2> <q3> [SEP]"
std::string serialize_state(const PolicyState& state);
// Recovers prev turns and current query; features are left zero. Throws ParseError.
PolicyState parse_state(std::string_view serialized);

// Feature layout:
//   0  top-1 retrieval score of the current query
//   1  top-1 score of the most recent previous query (0 if absent)
//   2  top-1 score of the older previous query (0 if absent)
//   3  similarity of current and most recent previous query (0 if absent)
//   4  similarity of current and older previous query (0 if absent)
//   5  most recent previous action: +1 FETCH, 0 NO_FETCH, -1 absent
//   6  older previous action, same encoding
//   7  max similarity between the current query and the FAQs held in history
PolicyState featurize(std::span<const PrevTurn> prev, const std::string& current_query, Retriever& retriever,
                      std::span<const std::string> history_faq_ids);

struct ActionProbs {
    double fetch = 0.5;
    double no_fetch = 0.5;

    double of(Action a) const { return a == Action::Fetch ? fetch : no_fetch; }
};

// Argmax with exact ties going to FETCH.
Action greedy_action(const ActionProbs& p);

// 8 -> 16 (tanh, inverted dropout) -> 2 (softmax). Weights row-major, [out][in].
struct PolicyNet {
    std::array<double, kHiddenDim * kFeatureDim> w1{};
    std::array<double, kHiddenDim> b1{};
    std::array<double, kActionCount * kHiddenDim> w2{};
    std::array<double, kActionCount> b2{};
    double dropout_rate = 0.1;

    // Uniform in [-scale, scale] from the seed.
    static PolicyNet init(std::uint64_t seed, double dropout_rate = 0.1, double scale = 0.1);

    std::size_t parameter_count() const { return w1.size() + b1.size() + w2.size() + b2.size(); }
    // Flat views in order w1, b1, w2, b2.
    double& param(std::size_t i);
    double param(std::size_t i) const;
    bool all_finite() const;
    bool operator==(const PolicyNet&) const = default;
};

std::string policy_to_json(const PolicyNet& net);
PolicyNet policy_from_json(std::string_view json_text);
void save_policy(const std::filesystem::path& path, const PolicyNet& net);
PolicyNet load_policy(const std::filesystem::path& path);

// Hidden-unit keep mask scaled by 1/(1-rate); all ones when rate == 0.
std::array<double, kHiddenDim> dropout_mask(double rate, std::uint64_t seed);

// Dropout is off when `dropout_seed` is empty, otherwise a mask seeded by it.
ActionProbs forward(const PolicyNet& net, const Features& x, std::optional<std::uint64_t> dropout_seed = std::nullopt);
inline ActionProbs forward(const PolicyNet& net, const PolicyState& s, std::optional<std::uint64_t> dropout_seed = std::nullopt) {
    return forward(net, s.features, dropout_seed);
}

// Seed of MC pass i.
std::uint64_t mc_pass_seed(std::uint64_t seed, std::size_t pass);
// Mean of `passes` seeded-dropout forward passes.
ActionProbs mc_predict(const PolicyNet& net, const PolicyState& s, std::size_t passes, std::uint64_t seed);

struct SampledAction {
    Action action = Action::Fetch;
    double log_prob = 0.0;
    std::uint64_t dropout_seed = 0;
};

// Training-mode forward pass then a Bernoulli draw; reproducible per seed.
SampledAction sample_action(const PolicyNet& net, const PolicyState& s, std::uint64_t seed);

// G_t = sum_k gamma^k r_{t+k}, evaluated backwards.
std::vector<double> discounted_returns(std::span<const double> rewards, double gamma);

struct RolloutStep {
    PolicyState state;
    Action action = Action::Fetch;
    double reward = 0.0;
    double log_prob = 0.0;
    std::uint64_t dropout_seed = 0;
    std::size_t step_index = 0;
};

struct Trajectory {
    std::string session_id;
    std::vector<RolloutStep> steps;
    std::vector<double> returns;
};

struct PgSample {
    const Features* features = nullptr;
    Action action = Action::Fetch;
    double ret = 0.0;
    std::optional<std::uint64_t> dropout_seed;
};

struct PgLossResult {
    double loss = 0.0;
    // Same layout as PolicyNet::param.
    std::vector<double> grad;
};

// Mean over the batch of -log pi(a|s) G - lambda H(pi(.|s)). Throws EmptyBatch.
PgLossResult pg_loss(const PolicyNet& net, std::span<const PgSample> batch, double lambda);

struct PolicyTrainConfig {
    std::size_t epochs = 30;
    double learning_rate = 0.05;
    double lambda = 0.1;
    double gamma = 0.1;
    std::size_t batch_size = 32;
    std::uint64_t seed = 7;
};

struct PolicyTrainResult {
    PolicyNet net;
    std::vector<double> loss_trace;  // mean batch loss per epoch
};

// Plain SGD on pg_loss over shuffled step mini-batches; returns are recomputed
// from rewards with config.gamma. Throws InsufficientData without trajectories.
PolicyTrainResult train_policy(const PolicyNet& net, std::span<const Trajectory> trajectories, const PolicyTrainConfig& config);

}  // namespace ragopt
