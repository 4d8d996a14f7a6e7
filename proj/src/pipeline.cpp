#include "ragopt/pipeline.hpp"

#include <algorithm>
#include <sstream>

#include "json.hpp"
#include "ragopt/error.hpp"
#include "ragopt/rng.hpp"
#include "ragopt/text.hpp"

namespace ragopt {

std::size_t count_tokens(std::string_view s) {
    std::size_t tokens = 0;
    std::size_t run = 0;
    auto flush = [&] {
        tokens += (run + 5) / 6;
        run = 0;
    };
    for (unsigned char c : s) {
        if (text::is_word_byte(c)) {
            if ((c & 0xC0) != 0x80) ++run;  // continuation bytes extend the current code point
            continue;
        }
        flush();
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') continue;
        ++tokens;
    }
    flush();
    return tokens;
}

void History::push(ConversationTurn turn) {
    turns_.push_back(std::move(turn));
    while (turns_.size() > kCapacity) turns_.pop_front();
}

std::vector<std::string> History::faq_ids() const {
    std::vector<std::string> ids;
    for (const auto& t : turns_)
        for (const auto& id : t.fetched_context)
            if (std::find(ids.begin(), ids.end(), id) == ids.end()) ids.push_back(id);
    return ids;
}

std::string render_faq(const FaqText& faq) { return "FAQ: " + faq.question + "\nAnswer: " + faq.answer; }
std::string render_faq(const FaqEntry& faq) { return render_faq(FaqText{faq.question, faq.answer}); }

namespace {

const std::string kUserLabel = "User: ";
const std::string kBotLabel = "Bot: ";

std::vector<FaqText> faq_texts(std::span<const std::string> ids, const FaqCorpus& corpus) {
    std::vector<FaqText> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        const auto& e = corpus.at(id);
        out.push_back({e.question, e.answer});
    }
    return out;
}

}  // namespace

std::string PromptBundle::render() const {
    std::string out = system_text;
    auto line = [&](const std::string& s) {
        out += '\n';
        out += s;
    };
    for (const auto& t : history) {
        line(kUserLabel + t.query);
        for (const auto& f : t.context) line(render_faq(f));
        line(kBotLabel + t.answer);
    }
    for (const auto& f : context_faqs) line(render_faq(f));
    line(kUserLabel + current_query);
    line(post_prompt);
    return out;
}

PromptBundle assemble_prompt(const History& history, std::span<const std::string> context_ids, const std::string& query,
                             const FaqCorpus& corpus, const PromptTemplate& tmpl) {
    PromptBundle b{tmpl.system_text, tmpl.post_prompt, {}, faq_texts(context_ids, corpus), query};
    for (const auto& t : history.turns()) b.history.push_back({t.query, faq_texts(t.fetched_context, corpus), t.answer});
    return b;
}

std::string_view to_string(Verdict v) { return v == Verdict::Good ? "GOOD" : "BAD"; }

void RewardConfig::validate() const {
    if (!(no_fetch_good > fetch_reward && fetch_reward > 0.0 && 0.0 > no_fetch_bad))
        throw ValidationError("reward config must satisfy no_fetch_good > fetch_reward > 0 > no_fetch_bad");
}

double reward(Action action, const std::optional<EvalRating>& rating, const RewardConfig& cfg) {
    if (action == Action::Fetch) {
        if (rating) throw UnexpectedRating("FETCH actions are rewarded without evaluation");
        return cfg.fetch_reward;
    }
    if (!rating) throw MissingRating("NO_FETCH reward needs an evaluation");
    return rating->verdict == Verdict::Good ? cfg.no_fetch_good : cfg.no_fetch_bad;
}

StepTruth truth_for(const SessionScript& session, std::size_t index) {
    const auto& st = session.steps.at(index);
    return {st.text, st.kind, effective_target(session, index)};
}

std::string_view refusal_answer() {
    return "I'm sorry, but I do not know about that. How can I assist you with the credit card?";
}

std::string_view greeting_answer() { return "Hello! Happy to help. Ask me anything about the credit card."; }

std::string_view unknown_answer() { return "I do not know the answer to that based on the information available."; }

std::string simulated_answer(std::string_view prompt, const FaqCorpus& corpus, const std::optional<StepTruth>& truth) {
    if (truth) {
        if (truth->kind == StepKind::Ood) return std::string(refusal_answer());
        if (truth->kind == StepKind::Greeting) return std::string(greeting_answer());
        if (truth->target) {
            const auto& faq = corpus.at(*truth->target);
            if (prompt.find(render_faq(faq)) != std::string_view::npos) return faq.answer;
        }
        return std::string(unknown_answer());
    }
    // Unscripted: the current context sits between the last bot line and the final user line.
    const auto user = prompt.rfind("\n" + kUserLabel);
    auto from = prompt.rfind("\n" + kBotLabel, user);
    if (from == std::string_view::npos) from = 0;
    const std::string_view region = prompt.substr(from, user == std::string_view::npos ? std::string_view::npos : user - from);
    const FaqEntry* best = nullptr;
    std::size_t best_pos = std::string_view::npos;
    for (const auto& e : corpus.entries()) {
        const auto pos = region.find(render_faq(e));
        if (pos < best_pos) {
            best_pos = pos;
            best = &e;
        }
    }
    return best ? best->answer : std::string(unknown_answer());
}

std::string simulated_llm(const PromptBundle& bundle, const FaqCorpus& corpus, const std::optional<StepTruth>& truth) {
    return simulated_answer(bundle.render(), corpus, truth);
}

EvalRating oracle_evaluate(const StepTruth& step, Route route, bool context_present, std::string_view answer,
                           const FaqCorpus& corpus) {
    if (step.kind == StepKind::Ood) {
        if (answer == refusal_answer()) return {Verdict::Good, "The answer admits it does not know and meets the answerability criteria"};
        return {Verdict::Bad, "An out-of-domain query should get the do-not-know response"};
    }
    if (step.kind == StepKind::Greeting) {
        if (answer == greeting_answer()) return {Verdict::Good, "The greeting is acknowledged"};
        return {Verdict::Bad, "A greeting should be acknowledged, not answered with FAQ content"};
    }
    if (!step.target) return {Verdict::Bad, "No target FAQ for an in-domain query"};
    if (!context_present) return {Verdict::Bad, "FAQ '" + *step.target + "' was not available, so the answer is unsupported"};
    if (answer == corpus.at(*step.target).answer) {
        if (route == Route::Static) return {Verdict::Good, "The static answer is FAQ '" + *step.target + "'"};
        return {Verdict::Good, "The answer matches the information in FAQ '" + *step.target + "'"};
    }
    return {Verdict::Bad, "The given answer is incorrect according to FAQ '" + *step.target + "'"};
}

LlmResponse SimulatedLlm::complete(const LlmRequest& request) {
    return {simulated_answer(request.prompt_text, *corpus_, truth_)};
}

std::optional<EvalRating> OracleEvaluator::evaluate(const EvalRequest& request) {
    if (!truth_) return std::nullopt;
    bool present = false;
    if (truth_->target) {
        const std::string needle = render_faq(corpus_->at(*truth_->target));
        auto has = [&](const std::vector<std::string>& texts) {
            return std::any_of(texts.begin(), texts.end(), [&](const std::string& t) { return t.find(needle) != std::string::npos; });
        };
        present = has(request.context_texts) || has(request.history_texts);
    }
    // The wire request carries no route.
    return oracle_evaluate(*truth_, Route::Fetch, present, request.answer, *corpus_);
}

void TokenLedger::append(const LedgerEntry& e) {
    entries_.push_back(e);
    total_input_ += e.input_tokens;
    total_output_ += e.output_tokens;
}

std::string TokenLedger::to_csv() const {
    std::ostringstream out;
    out << "step,route,input_tokens,output_tokens,verdict\n";
    for (const auto& e : entries_)
        out << e.step << ',' << to_string(e.route) << ',' << e.input_tokens << ',' << e.output_tokens << ','
            << (e.verdict ? to_string(*e.verdict) : std::string_view{}) << '\n';
    return out.str();
}

StepResult run_step(EnvState& env, const std::string& query, const std::optional<StepTruth>& truth, const GateConfig& gate,
                    const PolicyDriver* policy, Components& c, RatingPolicy rating_policy) {
    gate.validate();
    c.llm->observe_step(truth);
    c.evaluator->observe_step(truth);
    const FaqCorpus& corpus = *c.corpus;

    StepResult res;
    const ScoredFaq top1 = c.retriever->top1(query);

    std::optional<Action> action;
    std::optional<std::pair<double, double>> probs;
    if (gate.uses_policy() && !clears_threshold(gate, top1.score) && policy && policy->net) {
        const auto history_ids = env.history.faq_ids();
        res.state = featurize(env.prev, query, *c.retriever, history_ids);
        const std::uint64_t step_seed = derive_seed(policy->seed, {env.turn});
        if (policy->mode == PolicyMode::Sample) {
            res.action = sample_action(*policy->net, *res.state, step_seed);
            auto p = forward(*policy->net, *res.state, res.action->dropout_seed);
            probs = {p.fetch, p.no_fetch};
        } else {
            auto p = mc_predict(*policy->net, *res.state, policy->mc_passes, step_seed);
            const Action a = greedy_action(p);
            res.action = SampledAction{a, std::log(p.of(a)), 0};
            probs = {p.fetch, p.no_fetch};
        }
        action = res.action->action;
    }
    res.decision = decide(gate, top1, action, probs);

    std::vector<std::string> context_ids;
    std::size_t in_tokens = 0, out_tokens = 0;
    if (res.decision.route == Route::Static) {
        context_ids.push_back(top1.faq_id);
        res.answer = corpus.at(top1.faq_id).answer;
    } else {
        if (res.decision.route == Route::Fetch)
            for (auto& s : c.retriever->topk(query, std::min(c.k, corpus.size())).ranked) context_ids.push_back(std::move(s.faq_id));
        const PromptBundle bundle = assemble_prompt(env.history, context_ids, query, corpus, c.prompt);
        const std::string prompt = bundle.render();
        in_tokens = count_tokens(prompt);
        res.answer = c.llm->complete({prompt}).answer_text;
        out_tokens = count_tokens(res.answer);
    }

    if (rating_policy == RatingPolicy::Every || res.decision.route == Route::NoFetch) {
        EvalRequest req{query, res.answer, {}, {}};
        for (const auto& id : context_ids) req.context_texts.push_back(render_faq(corpus.at(id)));
        for (const auto& t : env.history.turns()) {
            req.history_texts.push_back(kUserLabel + t.query);
            for (const auto& id : t.fetched_context) req.history_texts.push_back(render_faq(corpus.at(id)));
            req.history_texts.push_back(kBotLabel + t.answer);
        }
        res.rating = c.evaluator->evaluate(req);
    }

    if (action) {
        if (*action == Action::Fetch) {
            res.reward = reward(Action::Fetch, std::nullopt, c.rewards);
        } else if (res.rating) {
            res.reward = reward(Action::NoFetch, res.rating, c.rewards);
        }
    }

    res.ledger_entry = {env.turn, res.decision.route, in_tokens, out_tokens,
                        res.rating ? std::optional<Verdict>(res.rating->verdict) : std::nullopt};
    env.ledger.append(res.ledger_entry);
    env.history.push({query, res.answer, context_ids, res.decision.route});
    env.prev.push_back({query, res.decision.route == Route::NoFetch ? Action::NoFetch : Action::Fetch});
    if (env.prev.size() > kStateHistory) env.prev.erase(env.prev.begin());
    ++env.turn;
    return res;
}

std::vector<Trajectory> rollout(const SessionScript& session, const PolicyNet& net, std::size_t samples, std::uint64_t seed,
                                Components& components, double gamma) {
    if (samples == 0) throw ValidationError("rollout needs at least one sample");
    const GateConfig gate{kDefaultThreshold, GateMode::PolicyOnly};
    std::vector<Trajectory> out;
    out.reserve(samples);
    for (std::size_t j = 0; j < samples; ++j) {
        EnvState env;
        const PolicyDriver driver{&net, PolicyMode::Sample, derive_seed(seed, {j}), 1};
        Trajectory tr{session.id, {}, {}};
        std::vector<double> rewards;
        for (std::size_t i = 0; i < session.steps.size(); ++i) {
            auto r = run_step(env, session.steps[i].text, truth_for(session, i), gate, &driver, components, RatingPolicy::NoFetchOnly);
            if (!r.state || !r.action || !r.reward) throw Error("rollout step did not consult the policy");
            tr.steps.push_back({std::move(*r.state), r.action->action, *r.reward, r.action->log_prob, r.action->dropout_seed, i});
            rewards.push_back(*r.reward);
        }
        tr.returns = discounted_returns(rewards, gamma);
        out.push_back(std::move(tr));
    }
    return out;
}

std::vector<Trajectory> generate_rollouts(std::span<const SessionScript> sessions, const PolicyNet& net, std::size_t samples,
                                          std::uint64_t seed, Components& components, double gamma) {
    std::vector<Trajectory> out;
    for (std::size_t i = 0; i < sessions.size(); ++i) {
        for (std::size_t j = 0; j < samples; ++j) {
            const SessionScript script = j == 0 ? sessions[i] : shuffle_session(sessions[i], derive_seed(seed, {i, j, 0x5f}));
            auto trs = rollout(script, net, 1, derive_seed(seed, {i, j}), components, gamma);
            out.insert(out.end(), std::make_move_iterator(trs.begin()), std::make_move_iterator(trs.end()));
        }
    }
    return out;
}

std::string trajectories_to_jsonl(std::span<const Trajectory> trajectories) {
    std::string out;
    for (const auto& tr : trajectories) {
        for (const auto& st : tr.steps) {
            nlohmann::json line = {{"state_serialized", serialize_state(st.state)},
                                   {"action", std::string(to_string(st.action))},
                                   {"reward", st.reward},
                                   {"session_id", tr.session_id},
                                   {"step_index", st.step_index}};
            out += line.dump();
            out += '\n';
        }
    }
    return out;
}

SettingResult evaluate_setting(std::span<const SessionScript> sessions, const GateConfig& gate, const PolicyDriver* policy,
                               Components& components) {
    SettingResult res;
    res.setting = std::string(to_string(gate.mode));
    std::size_t good = 0, total = 0, global_step = 0;
    for (const auto& session : sessions) {
        EnvState env;
        for (std::size_t i = 0; i < session.steps.size(); ++i) {
            const StepTruth truth = truth_for(session, i);
            auto r = run_step(env, session.steps[i].text, truth, gate, policy, components, RatingPolicy::Every);
            EvalRating rating = r.rating.value_or(EvalRating{Verdict::Bad, "not evaluated"});
            if (rating.verdict == Verdict::Good) ++good;
            ++total;
            res.trace.push_back({session.id, i, session.steps[i].text, session.steps[i].kind, r.decision.route, r.decision.top1,
                                 r.decision.policy_probs, r.ledger_entry.input_tokens, r.ledger_entry.output_tokens, rating});
            LedgerEntry e = r.ledger_entry;
            e.step = global_step++;
            res.ledger.append(e);
        }
    }
    res.tokens = res.ledger.total_input();
    res.output_tokens = res.ledger.total_output();
    res.accuracy = total ? static_cast<double>(good) / static_cast<double>(total) : 0.0;
    return res;
}

}  // namespace ragopt
