#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ragopt/corpus.hpp"
#include "ragopt/embedding.hpp"
#include "ragopt/gate.hpp"
#include "ragopt/policy.hpp"

namespace ragopt {

// Each maximal alphanumeric run counts ceil(len/6) tokens (len in code points,
// non-ASCII code points count as alphanumeric); every other non-whitespace
// character counts 1; whitespace counts 0.
std::size_t count_tokens(std::string_view text);

struct ConversationTurn {
    std::string query;
    std::string answer;
    std::vector<std::string> fetched_context;  // FAQ ids
    Route route = Route::Fetch;
};

// The last two conversation turns, oldest first.
class History {
public:
    static constexpr std::size_t kCapacity = 2;

    void push(ConversationTurn turn);
    const std::deque<ConversationTurn>& turns() const { return turns_; }
    std::size_t size() const { return turns_.size(); }
    // FAQ ids held by the retained turns, oldest turn first, duplicates removed.
    std::vector<std::string> faq_ids() const;

private:
    std::deque<ConversationTurn> turns_;
};

struct PromptTemplate {
    std::string system_text =
        "You are a helpful assistant for credit card FAQs. Answer the user's question using the FAQ context and the "
        "conversation history. If the question is unrelated or the answer is not available, say you do not know.";
    std::string post_prompt = "Instruction: Answer only using the information available.";
};

struct FaqText {
    std::string question;
    std::string answer;
};

// "FAQ: <question>\nAnswer: <answer>"
std::string render_faq(const FaqText& faq);
std::string render_faq(const FaqEntry& faq);

struct RenderedTurn {
    std::string query;
    std::vector<FaqText> context;
    std::string answer;
};

struct PromptBundle {
    std::string system_text;
    std::string post_prompt;
    std::vector<RenderedTurn> history;
    std::vector<FaqText> context_faqs;
    std::string current_query;

    // Newline-separated: system text, history turns oldest first (query,
    // context FAQs, answer), current context FAQs, current query, post prompt.
    std::string render() const;
    std::size_t input_tokens() const { return count_tokens(render()); }
};

PromptBundle assemble_prompt(const History& history, std::span<const std::string> context_ids, const std::string& query,
                             const FaqCorpus& corpus, const PromptTemplate& tmpl = {});

enum class Verdict { Good, Bad };
std::string_view to_string(Verdict v);

struct EvalRating {
    Verdict verdict = Verdict::Bad;
    std::string reason;
};

struct RewardConfig {
    double fetch_reward = 0.1;
    double no_fetch_good = 2.0;
    double no_fetch_bad = -1.0;

    // no_fetch_good > fetch_reward > 0 > no_fetch_bad
    void validate() const;
};

// FETCH takes no rating; NO_FETCH requires one. Throws MissingRating / UnexpectedRating.
double reward(Action action, const std::optional<EvalRating>& rating, const RewardConfig& cfg = {});

// Ground truth the simulators and oracle see for a scripted step.
struct StepTruth {
    std::string text;
    StepKind kind = StepKind::Domain;
    std::optional<std::string> target;  // effective target FAQ id
};

StepTruth truth_for(const SessionScript& session, std::size_t index);

std::string_view refusal_answer();
std::string_view greeting_answer();
std::string_view unknown_answer();

// Deterministic stand-in for the chat LLM. With a truth record: the target
// FAQ's answer verbatim if that FAQ is anywhere in the prompt, the refusal for
// OOD, the greeting for GREETING, otherwise the do-not-know text. Without one:
// the answer of the first FAQ in the current context, else do-not-know.
std::string simulated_answer(std::string_view prompt_text, const FaqCorpus& corpus, const std::optional<StepTruth>& truth);
std::string simulated_llm(const PromptBundle& bundle, const FaqCorpus& corpus, const std::optional<StepTruth>& truth);

// GOOD iff an OOD/GREETING step got the refusal/greeting, or the effective
// target was available and the answer is exactly its answer text.
EvalRating oracle_evaluate(const StepTruth& step, Route route, bool context_present, std::string_view answer,
                           const FaqCorpus& corpus);

struct LlmRequest {
    std::string prompt_text;
};

struct LlmResponse {
    std::string answer_text;
};

struct EvalRequest {
    std::string query;
    std::string answer;
    std::vector<std::string> context_texts;
    std::vector<std::string> history_texts;
};

// Boundary to an answer-generating model. Real clients ignore observe_step;
// the simulator uses it as its oracle channel.
class LlmClient {
public:
    virtual ~LlmClient() = default;
    virtual void observe_step(const std::optional<StepTruth>&) {}
    virtual LlmResponse complete(const LlmRequest& request) = 0;
};

class Evaluator {
public:
    virtual ~Evaluator() = default;
    virtual void observe_step(const std::optional<StepTruth>&) {}
    // nullopt when the evaluator cannot judge (no scripted truth).
    virtual std::optional<EvalRating> evaluate(const EvalRequest& request) = 0;
};

class SimulatedLlm final : public LlmClient {
public:
    explicit SimulatedLlm(const FaqCorpus& corpus) : corpus_(&corpus) {}
    void observe_step(const std::optional<StepTruth>& truth) override { truth_ = truth; }
    LlmResponse complete(const LlmRequest& request) override;

private:
    const FaqCorpus* corpus_;
    std::optional<StepTruth> truth_;
};

class OracleEvaluator final : public Evaluator {
public:
    explicit OracleEvaluator(const FaqCorpus& corpus) : corpus_(&corpus) {}
    void observe_step(const std::optional<StepTruth>& truth) override { truth_ = truth; }
    std::optional<EvalRating> evaluate(const EvalRequest& request) override;

private:
    const FaqCorpus* corpus_;
    std::optional<StepTruth> truth_;
};

struct LedgerEntry {
    std::size_t step = 0;
    Route route = Route::Fetch;
    std::size_t input_tokens = 0;
    std::size_t output_tokens = 0;
    std::optional<Verdict> verdict;
};

class TokenLedger {
public:
    void append(const LedgerEntry& e);
    const std::vector<LedgerEntry>& entries() const { return entries_; }
    std::size_t total_input() const { return total_input_; }
    std::size_t total_output() const { return total_output_; }
    std::size_t total() const { return total_input_ + total_output_; }
    // Columns: step,route,input_tokens,output_tokens,verdict
    std::string to_csv() const;

private:
    std::vector<LedgerEntry> entries_;
    std::size_t total_input_ = 0;
    std::size_t total_output_ = 0;
};

struct Components {
    const FaqCorpus* corpus = nullptr;
    Retriever* retriever = nullptr;
    LlmClient* llm = nullptr;
    Evaluator* evaluator = nullptr;
    PromptTemplate prompt;
    RewardConfig rewards;
    std::size_t k = 3;
};

enum class PolicyMode { Sample, McGreedy };

struct PolicyDriver {
    const PolicyNet* net = nullptr;
    PolicyMode mode = PolicyMode::McGreedy;
    std::uint64_t seed = 7;
    std::size_t mc_passes = 10;
};

// Which steps get an evaluator call: training rates NO_FETCH only, reporting rates all.
enum class RatingPolicy { NoFetchOnly, Every };

struct EnvState {
    History history;
    TokenLedger ledger;
    std::vector<PrevTurn> prev;  // policy context, at most two
    std::size_t turn = 0;
};

struct StepResult {
    std::string answer;
    GateDecision decision;
    std::optional<PolicyState> state;   // when the policy was consulted
    std::optional<SampledAction> action;
    std::optional<EvalRating> rating;
    std::optional<double> reward;       // when the policy was consulted
    LedgerEntry ledger_entry;
};

// One query through gate, retrieval, LLM and evaluator; updates history and ledger.
StepResult run_step(EnvState& env, const std::string& query, const std::optional<StepTruth>& truth, const GateConfig& gate,
                    const PolicyDriver* policy, Components& components, RatingPolicy rating_policy);

// `samples` trajectories of the session with actions sampled from the policy on
// every step (no threshold shortcut). Returns use `gamma`.
std::vector<Trajectory> rollout(const SessionScript& session, const PolicyNet& net, std::size_t samples, std::uint64_t seed,
                                Components& components, double gamma);

// Rollouts over several sessions; sample 0 of each session follows the script
// order and later samples use seeded shuffles of it.
std::vector<Trajectory> generate_rollouts(std::span<const SessionScript> sessions, const PolicyNet& net, std::size_t samples,
                                          std::uint64_t seed, Components& components, double gamma);

// JSON lines of {state_serialized, action, reward, session_id, step_index}.
std::string trajectories_to_jsonl(std::span<const Trajectory> trajectories);

struct TraceRow {
    std::string session_id;
    std::size_t step = 0;
    std::string query;
    StepKind kind = StepKind::Domain;
    Route route = Route::Fetch;
    ScoredFaq top1;
    std::optional<std::pair<double, double>> policy_probs;
    std::size_t input_tokens = 0;
    std::size_t output_tokens = 0;
    EvalRating rating;
};

struct SettingResult {
    std::string setting;
    std::size_t tokens = 0;         // input tokens passed to the LLM
    std::size_t output_tokens = 0;
    double saving = 0.0;            // vs ALL_FETCH, filled by the caller
    double accuracy = 0.0;          // fraction of steps rated GOOD
    TokenLedger ledger;
    std::vector<TraceRow> trace;
};

// Runs every session under the gate with MC-dropout greedy policy actions and
// rates every step.
SettingResult evaluate_setting(std::span<const SessionScript> sessions, const GateConfig& gate, const PolicyDriver* policy,
                               Components& components);

}  // namespace ragopt
