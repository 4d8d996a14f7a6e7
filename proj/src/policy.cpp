#include "ragopt/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "ragopt/error.hpp"
#include "ragopt/io.hpp"
#include "ragopt/rng.hpp"

namespace ragopt {

using nlohmann::json;

namespace {

constexpr std::string_view kCls = "[CLS]";
constexpr std::string_view kSep = "[SEP]";
constexpr std::string_view kFetchTok = "[FETCH]";
constexpr std::string_view kNoFetchTok = "[NO_FETCH]";

std::vector<std::string> split_ws(std::string_view s) {
    std::vector<std::string> out;
    std::istringstream in{std::string(s)};
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

bool is_reserved(std::string_view t) { return t == kCls || t == kSep || t == kFetchTok || t == kNoFetchTok; }

std::string canonical_query(std::string_view q) {
    auto toks = split_ws(q);
    std::string out;
    for (const auto& t : toks) {
        if (is_reserved(t)) throw ValidationError("query text contains reserved token " + t);
        if (!out.empty()) out += ' ';
        out += t;
    }
    if (out.empty()) throw ValidationError("cannot serialize an empty query");
    return out;
}

}  // namespace

std::string serialize_state(const PolicyState& state) {
    if (state.prev.size() > kStateHistory) throw ValidationError("policy state holds more than two previous turns");
    std::string out(kCls);
    for (const auto& p : state.prev) {
        out += ' ';
        out += canonical_query(p.query);
        out += ' ';
        out += kSep;
        out += ' ';
        out += p.action == Action::Fetch ? kFetchTok : kNoFetchTok;
    }
    out += ' ';
    out += canonical_query(state.current_query);
    out += ' ';
    out += kSep;
    return out;
}

PolicyState parse_state(std::string_view serialized) {
    auto toks = split_ws(serialized);
    if (toks.empty() || toks.front() != kCls) throw ParseError("state must start with [CLS]");
    std::vector<std::string> queries;
    std::vector<Action> actions;
    std::size_t i = 1;
    while (true) {
        std::string q;
        while (i < toks.size() && !is_reserved(toks[i])) {
            if (!q.empty()) q += ' ';
            q += toks[i++];
        }
        if (q.empty()) throw ParseError("empty query segment in state");
        if (i >= toks.size() || toks[i] != kSep) throw ParseError("query segment not closed by [SEP]");
        ++i;
        queries.push_back(std::move(q));
        if (i == toks.size()) break;
        if (toks[i] == kFetchTok) {
            actions.push_back(Action::Fetch);
        } else if (toks[i] == kNoFetchTok) {
            actions.push_back(Action::NoFetch);
        } else {
            throw ParseError("expected an action token after [SEP], got '" + toks[i] + "'");
        }
        ++i;
    }
    if (queries.size() > kStateHistory + 1) throw ParseError("state holds more than two previous turns");
    PolicyState s;
    for (std::size_t k = 0; k + 1 < queries.size(); ++k) s.prev.push_back({queries[k], actions[k]});
    s.current_query = queries.back();
    return s;
}

PolicyState featurize(std::span<const PrevTurn> prev, const std::string& current_query, Retriever& retriever,
                      std::span<const std::string> history_faq_ids) {
    PolicyState s;
    const std::size_t n = std::min(prev.size(), kStateHistory);
    s.prev.assign(prev.end() - static_cast<std::ptrdiff_t>(n), prev.end());
    s.current_query = current_query;
    auto& f = s.features;
    f.fill(0.0);
    f[0] = retriever.top1(current_query).score;
    f[5] = f[6] = -1.0;
    // j = 0 is the most recent previous turn.
    for (std::size_t j = 0; j < n; ++j) {
        const auto& p = s.prev[n - 1 - j];
        f[1 + j] = retriever.top1(p.query).score;
        f[3 + j] = retriever.similarity(current_query, p.query);
        f[5 + j] = p.action == Action::Fetch ? 1.0 : 0.0;
    }
    if (!history_faq_ids.empty()) {
        double best = -INFINITY;
        for (const auto& id : history_faq_ids) best = std::max(best, retriever.faq_similarity(current_query, id));
        f[7] = best;
    }
    return s;
}

Action greedy_action(const ActionProbs& p) { return p.no_fetch > p.fetch ? Action::NoFetch : Action::Fetch; }

PolicyNet PolicyNet::init(std::uint64_t seed, double dropout_rate, double scale) {
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ValidationError("dropout rate must lie in [0, 1)");
    PolicyNet net;
    net.dropout_rate = dropout_rate;
    Rng rng(derive_seed(seed, {0x9011c}));
    for (std::size_t i = 0; i < net.parameter_count(); ++i) net.param(i) = rng.uniform(-scale, scale);
    return net;
}

double& PolicyNet::param(std::size_t i) {
    if (i < w1.size()) return w1[i];
    i -= w1.size();
    if (i < b1.size()) return b1[i];
    i -= b1.size();
    if (i < w2.size()) return w2[i];
    i -= w2.size();
    return b2.at(i);
}

double PolicyNet::param(std::size_t i) const { return const_cast<PolicyNet&>(*this).param(i); }

bool PolicyNet::all_finite() const {
    for (std::size_t i = 0; i < parameter_count(); ++i)
        if (!std::isfinite(param(i))) return false;
    return std::isfinite(dropout_rate);
}

std::string policy_to_json(const PolicyNet& net) {
    json doc = {{"format_version", kPolicyFormatVersion},
                {"input_dim", kFeatureDim},
                {"hidden_dim", kHiddenDim},
                {"dropout_rate", net.dropout_rate},
                {"w1", net.w1},
                {"b1", net.b1},
                {"w2", net.w2},
                {"b2", net.b2}};
    return doc.dump() + "\n";
}

PolicyNet policy_from_json(std::string_view json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("policy file: ") + e.what());
    }
    if (!doc.is_object() || doc.value("format_version", -1) != kPolicyFormatVersion)
        throw ParseError("policy file: unsupported or missing format_version");
    if (doc.value("input_dim", 0U) != kFeatureDim || doc.value("hidden_dim", 0U) != kHiddenDim)
        throw ValidationError("policy file: network shape differs from 8x16x2");
    PolicyNet net;
    try {
        net.dropout_rate = doc.at("dropout_rate").get<double>();
        net.w1 = doc.at("w1").get<decltype(net.w1)>();
        net.b1 = doc.at("b1").get<decltype(net.b1)>();
        net.w2 = doc.at("w2").get<decltype(net.w2)>();
        net.b2 = doc.at("b2").get<decltype(net.b2)>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("policy file: ") + e.what());
    }
    if (!net.all_finite() || net.dropout_rate < 0.0 || net.dropout_rate >= 1.0) throw ValidationError("policy file: invalid parameters");
    return net;
}

void save_policy(const std::filesystem::path& path, const PolicyNet& net) { write_file_atomic(path, policy_to_json(net)); }

PolicyNet load_policy(const std::filesystem::path& path) { return policy_from_json(read_file(path)); }

std::array<double, kHiddenDim> dropout_mask(double rate, std::uint64_t seed) {
    std::array<double, kHiddenDim> mask;
    mask.fill(1.0);
    if (rate <= 0.0) return mask;
    Rng rng(derive_seed(seed, {0xd509}));
    const double keep_scale = 1.0 / (1.0 - rate);
    for (auto& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
    return mask;
}

namespace {

struct ForwardCache {
    std::array<double, kHiddenDim> act{};   // tanh output before masking
    std::array<double, kHiddenDim> mask{};
    std::array<double, kHiddenDim> hidden{};
    std::array<double, kActionCount> log_probs{};
    std::array<double, kActionCount> probs{};
};

ForwardCache run_forward(const PolicyNet& net, const Features& x, std::optional<std::uint64_t> dropout_seed) {
    ForwardCache c;
    if (dropout_seed) {
        c.mask = dropout_mask(net.dropout_rate, *dropout_seed);
    } else {
        c.mask.fill(1.0);
    }
    for (std::size_t h = 0; h < kHiddenDim; ++h) {
        double pre = net.b1[h];
        for (std::size_t i = 0; i < kFeatureDim; ++i) pre += net.w1[h * kFeatureDim + i] * x[i];
        c.act[h] = std::tanh(pre);
        c.hidden[h] = c.act[h] * c.mask[h];
    }
    std::array<double, kActionCount> z{};
    for (std::size_t a = 0; a < kActionCount; ++a) {
        z[a] = net.b2[a];
        for (std::size_t h = 0; h < kHiddenDim; ++h) z[a] += net.w2[a * kHiddenDim + h] * c.hidden[h];
    }
    const double m = std::max(z[0], z[1]);
    const double lse = m + std::log(std::exp(z[0] - m) + std::exp(z[1] - m));
    for (std::size_t a = 0; a < kActionCount; ++a) {
        c.log_probs[a] = z[a] - lse;
        c.probs[a] = std::exp(c.log_probs[a]);
    }
    return c;
}

std::size_t index_of(Action a) { return a == Action::Fetch ? 0 : 1; }

}  // namespace

ActionProbs forward(const PolicyNet& net, const Features& x, std::optional<std::uint64_t> dropout_seed) {
    auto c = run_forward(net, x, dropout_seed);
    return {c.probs[0], c.probs[1]};
}

std::uint64_t mc_pass_seed(std::uint64_t seed, std::size_t pass) { return derive_seed(seed, {0x3c, pass}); }

ActionProbs mc_predict(const PolicyNet& net, const PolicyState& s, std::size_t passes, std::uint64_t seed) {
    if (passes == 0) throw ValidationError("mc_predict needs at least one pass");
    if (net.dropout_rate == 0.0) return forward(net, s);
    ActionProbs mean{0.0, 0.0};
    for (std::size_t i = 0; i < passes; ++i) {
        auto p = forward(net, s, mc_pass_seed(seed, i));
        mean.fetch += p.fetch;
        mean.no_fetch += p.no_fetch;
    }
    mean.fetch /= static_cast<double>(passes);
    mean.no_fetch /= static_cast<double>(passes);
    return mean;
}

SampledAction sample_action(const PolicyNet& net, const PolicyState& s, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {0x5a}));
    SampledAction out;
    out.dropout_seed = rng.next_u64();
    auto c = run_forward(net, s.features, out.dropout_seed);
    out.action = rng.uniform() < c.probs[0] ? Action::Fetch : Action::NoFetch;
    out.log_prob = c.log_probs[index_of(out.action)];
    return out;
}

std::vector<double> discounted_returns(std::span<const double> rewards, double gamma) {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ValidationError("gamma must lie in [0, 1]");
    std::vector<double> g(rewards.size());
    double acc = 0.0;
    for (std::size_t t = rewards.size(); t-- > 0;) {
        acc = rewards[t] + gamma * acc;
        g[t] = acc;
    }
    return g;
}

PgLossResult pg_loss(const PolicyNet& net, std::span<const PgSample> batch, double lambda) {
    if (batch.empty()) throw EmptyBatch("pg_loss on an empty batch");
    PgLossResult res{0.0, std::vector<double>(net.parameter_count(), 0.0)};
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    const std::size_t off_b1 = kHiddenDim * kFeatureDim;
    const std::size_t off_w2 = off_b1 + kHiddenDim;
    const std::size_t off_b2 = off_w2 + kActionCount * kHiddenDim;

    for (const auto& s : batch) {
        const Features& x = *s.features;
        auto c = run_forward(net, x, s.dropout_seed);
        const std::size_t a = index_of(s.action);
        double entropy = 0.0;
        for (std::size_t k = 0; k < kActionCount; ++k) entropy -= c.probs[k] * c.log_probs[k];
        res.loss += inv_n * (-c.log_probs[a] * s.ret - lambda * entropy);

        // dl/dz_k = -G (1[k=a] - p_k) + lambda p_k (log p_k + H)
        std::array<double, kActionCount> dz{};
        for (std::size_t k = 0; k < kActionCount; ++k)
            dz[k] = inv_n * (-s.ret * ((k == a ? 1.0 : 0.0) - c.probs[k]) + lambda * c.probs[k] * (c.log_probs[k] + entropy));

        std::array<double, kHiddenDim> dpre{};
        for (std::size_t h = 0; h < kHiddenDim; ++h) {
            double dh = 0.0;
            for (std::size_t k = 0; k < kActionCount; ++k) {
                res.grad[off_w2 + k * kHiddenDim + h] += dz[k] * c.hidden[h];
                dh += net.w2[k * kHiddenDim + h] * dz[k];
            }
            dpre[h] = dh * c.mask[h] * (1.0 - c.act[h] * c.act[h]);
        }
        for (std::size_t k = 0; k < kActionCount; ++k) res.grad[off_b2 + k] += dz[k];
        for (std::size_t h = 0; h < kHiddenDim; ++h) {
            res.grad[off_b1 + h] += dpre[h];
            for (std::size_t i = 0; i < kFeatureDim; ++i) res.grad[h * kFeatureDim + i] += dpre[h] * x[i];
        }
    }
    return res;
}

PolicyTrainResult train_policy(const PolicyNet& initial, std::span<const Trajectory> trajectories, const PolicyTrainConfig& config) {
    if (trajectories.empty()) throw InsufficientData("train_policy needs at least one trajectory");
    if (config.batch_size == 0) throw ValidationError("policy batch size must be positive");

    struct Item {
        const Features* features;
        Action action;
        double ret;
    };
    std::vector<Item> items;
    for (const auto& tr : trajectories) {
        std::vector<double> rewards;
        rewards.reserve(tr.steps.size());
        for (const auto& st : tr.steps) rewards.push_back(st.reward);
        const auto g = discounted_returns(rewards, config.gamma);
        for (std::size_t t = 0; t < tr.steps.size(); ++t) items.push_back({&tr.steps[t].state.features, tr.steps[t].action, g[t]});
    }
    if (items.empty()) throw InsufficientData("train_policy got trajectories without steps");

    PolicyTrainResult out{initial, {}};
    PolicyNet& net = out.net;
    Rng rng(derive_seed(config.seed, {0x7a11}));
    std::vector<std::size_t> order(items.size());
    std::vector<PgSample> batch;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            batch.clear();
            for (std::size_t j = start; j < end; ++j) {
                const auto& it = items[order[j]];
                batch.push_back({it.features, it.action, it.ret, derive_seed(config.seed, {0xd0, epoch, order[j]})});
            }
            auto r = pg_loss(net, batch, config.lambda);
            total += r.loss;
            ++batches;
            if (config.learning_rate != 0.0)
                for (std::size_t p = 0; p < net.parameter_count(); ++p) net.param(p) -= config.learning_rate * r.grad[p];
        }
        if (!net.all_finite()) throw Error("train_policy diverged: non-finite parameters");
        out.loss_trace.push_back(total / static_cast<double>(batches));
    }
    return out;
}

}  // namespace ragopt
