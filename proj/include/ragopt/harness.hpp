#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ragopt/corpus.hpp"
#include "ragopt/embedding.hpp"
#include "ragopt/gate.hpp"
#include "ragopt/pipeline.hpp"
#include "ragopt/policy.hpp"

namespace ragopt {

struct RunConfig {
    // Paths. Empty head/policy paths default to <out_dir>/head.json and <out_dir>/policy.json.
    std::filesystem::path corpus = "data/faq_corpus.json";
    std::filesystem::path train_sessions = "data/train_sessions.json";
    std::filesystem::path test_sessions = "data/test_session.json";
    std::filesystem::path ood_queries = "data/ood_queries.json";
    std::filesystem::path embeddings;  // optional base-vector fixture
    std::filesystem::path head;
    std::filesystem::path policy;
    std::filesystem::path out_dir = "out";

    double tau = 0.1;
    std::size_t batch_size = 8;
    double gamma = 0.1;
    double lambda = 0.1;
    double threshold = kDefaultThreshold;
    std::size_t k = 3;
    std::size_t mc_passes = 10;
    std::uint64_t seed = 7;
    GateMode mode = GateMode::SimThrPolicy;

    std::size_t dimension = 256;
    std::size_t embed_epochs = 100;
    double embed_lr = 0.1;
    HeadLoss loss = HeadLoss::InfoNce;
    double margin = 0.2;
    std::size_t train_per_faq = 24;
    std::size_t heldout_per_faq = 12;
    bool hinglish = false;

    std::size_t policy_rounds = 5;
    std::size_t policy_samples = 2;
    std::size_t policy_epochs = 30;
    double policy_lr = 0.05;
    std::size_t policy_batch = 32;
    double dropout = 0.1;
    RewardConfig rewards;

    std::filesystem::path head_path() const { return head.empty() ? out_dir / "head.json" : head; }
    std::filesystem::path policy_path() const { return policy.empty() ? out_dir / "policy.json" : policy; }
    void validate() const;
};

// Overlays keys present in the JSON document onto `base`.
RunConfig parse_run_config(std::string_view json_text, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});
std::string run_config_to_json(const RunConfig& config);

// Corpus, retrieval model and simulated LLM/evaluator wired into Components.
// Pinned in memory: Components points into it.
class World {
public:
    World(FaqCorpus corpus, EmbeddingStore store, ProjectionHead head, const RunConfig& config);
    World(const World&) = delete;
    World& operator=(const World&) = delete;

    const FaqCorpus& corpus() const { return corpus_; }
    const EmbeddingStore& store() const { return store_; }
    const ProjectionHead& head() const { return head_; }
    Retriever& retriever() { return *retriever_; }
    Components& components() { return components_; }

private:
    FaqCorpus corpus_;
    EmbeddingStore store_;
    ProjectionHead head_;
    std::unique_ptr<Retriever> retriever_;
    SimulatedLlm llm_;
    OracleEvaluator evaluator_;
    Components components_;
};

// Loads corpus, store and the trained head at config.head_path().
std::unique_ptr<World> make_world(const RunConfig& config);

struct EmbedReport {
    std::string loss_name;
    RetrievalMetrics before;
    RetrievalMetrics after;
    OodSeparation ood_before;
    OodSeparation ood_after;
    std::vector<double> loss_trace;
    std::size_t train_pairs = 0;
    std::size_t heldout_queries = 0;
};

// Training pairs and a disjoint held-out labeled set drawn with a different seed.
struct EmbeddingData {
    std::vector<ParaphrasePair> train;
    std::vector<LabeledQuery> heldout;
};
EmbeddingData make_embedding_data(const FaqCorpus& corpus, const RunConfig& config);

EmbeddingStore make_store(const RunConfig& config);
std::vector<std::string> load_text_list(const std::filesystem::path& path);

// Writes the head and embed_report.json; prints a before/after summary.
EmbedReport cmd_embed_train(const RunConfig& config, std::ostream& out);
// Metrics of the saved head (or identity when none exists) on the held-out set.
EmbedReport cmd_embed_eval(const RunConfig& config, std::ostream& out);

struct PolicyTrainReport {
    std::size_t tuples = 0;
    std::vector<double> loss_trace;
    std::vector<double> mean_reward_per_round;
};

struct PolicyTraining {
    PolicyNet net;
    std::vector<Trajectory> trajectories;  // every round, in order
    PolicyTrainReport report;
};

// Rounds of (rollouts under the current policy, REINFORCE epochs on them).
// Throws InsufficientData without sessions.
PolicyTraining train_policy_on_sessions(std::span<const SessionScript> sessions, Components& components, const RunConfig& config);

// Writes policy.json, rollouts.jsonl and policy_trace.json.
PolicyTrainReport cmd_policy_train(const RunConfig& config, std::ostream& out);

// Runs the test sessions under config.mode; writes ledger_<mode>.csv and trace_<mode>.json.
SettingResult cmd_simulate(const RunConfig& config, std::ostream& out);

struct Report {
    std::vector<SettingResult> settings;  // ALL_FETCH, SIMTHR, SIMTHR_POLICY
};

// Writes report.json, report.txt and one ledger CSV per setting.
Report cmd_report(const RunConfig& config, std::ostream& out);

// Reads queries line by line until "exit" or end of input.
void cmd_repl(const RunConfig& config, std::istream& in, std::ostream& out);

std::string render_report_table(const Report& report);
std::string report_to_json(const Report& report);
std::string trace_to_json(const std::vector<TraceRow>& trace);

}  // namespace ragopt
